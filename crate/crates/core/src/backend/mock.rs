//! Scripted backend for tests and dry runs.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Backend, FinishReason, GenerationRequest, GenerationResult, RequestTag};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MockScript {
    /// Probability of omitting each expected line.
    pub drop_rate: f64,
    /// Probability of swapping a kept line's relation for another one.
    pub corrupt_rate: f64,
    pub seed: u64,
    /// Fixed responses keyed by `doc_id#chunk`, overriding the echo.
    pub canned: BTreeMap<String, String>,
    /// Tags (`doc_id#chunk`) that fail with a backend error.
    pub fail_tags: BTreeSet<String>,
}

impl Default for MockScript {
    fn default() -> Self {
        MockScript {
            drop_rate: 0.0,
            corrupt_rate: 0.0,
            seed: 0,
            canned: BTreeMap::new(),
            fail_tags: BTreeSet::new(),
        }
    }
}

impl MockScript {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("drop_rate", self.drop_rate), ("corrupt_rate", self.corrupt_rate)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} {v} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Echoes the expected completion of each request, optionally dropping or
/// corrupting lines. Every stochastic choice is seeded from the script
/// seed and the request tag, so output does not depend on call order.
pub struct MockBackend {
    script: MockScript,
    expected: HashMap<RequestTag, String>,
    relation_names: Vec<String>,
    calls: AtomicUsize,
}

fn tag_seed(seed: u64, tag: &RequestTag) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325 ^ seed;
    for b in tag.doc_id.bytes().chain(tag.chunk_index.to_le_bytes()) {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn split_line(line: &str) -> Option<[&str; 3]> {
    let inner = line.trim().strip_prefix('(')?.strip_suffix(')')?;
    let f: Vec<&str> = inner.split('|').map(str::trim).collect();
    (f.len() == 3).then(|| [f[0], f[1], f[2]])
}

impl MockBackend {
    pub fn new(script: MockScript, expected: HashMap<RequestTag, String>, relation_names: Vec<String>) -> Result<Self> {
        script.validate()?;
        Ok(MockBackend {
            script,
            expected,
            relation_names,
            calls: AtomicUsize::new(0),
        })
    }

    /// Number of `generate` calls so far.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    fn echo(&self, tag: &RequestTag, expected: &str) -> String {
        let mut rng = ChaCha8Rng::seed_from_u64(tag_seed(self.script.seed, tag));
        let lines: Vec<&str> = expected.lines().filter(|l| !l.trim().is_empty()).collect();
        let mut gold_rel: HashMap<(&str, &str), BTreeSet<&str>> = HashMap::new();
        for l in &lines {
            if let Some([h, r, t]) = split_line(l) {
                gold_rel.entry((h, t)).or_default().insert(r);
            }
        }
        let mut out = Vec::new();
        for l in lines {
            // Both draws happen for every line so one rate does not shift the
            // stream seen by the other.
            let drop = rng.gen::<f64>() < self.script.drop_rate;
            let corrupt = rng.gen::<f64>() < self.script.corrupt_rate;
            if drop {
                continue;
            }
            match split_line(l) {
                Some([h, _, t]) if corrupt => {
                    let taken = &gold_rel[&(h, t)];
                    let others: Vec<&String> =
                        self.relation_names.iter().filter(|n| !taken.contains(n.as_str())).collect();
                    match others.choose(&mut rng) {
                        Some(r) => out.push(format!("({h}| {r}| {t})")),
                        None => out.push(l.to_string()),
                    }
                }
                _ => out.push(l.to_string()),
            }
        }
        out.join("\n")
    }
}

impl Backend for MockBackend {
    fn name(&self) -> String {
        "mock".into()
    }

    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResult> {
        request.validate()?;
        self.calls.fetch_add(1, Ordering::SeqCst);
        let key = request.tag.to_string();
        if self.script.fail_tags.contains(&key) {
            return Err(Error::Backend {
                tag: key,
                message: "scripted failure".into(),
            });
        }
        let text = match self.script.canned.get(&key) {
            Some(t) => t.clone(),
            None => self
                .expected
                .get(&request.tag)
                .map(|e| self.echo(&request.tag, e))
                .unwrap_or_default(),
        };
        Ok(GenerationResult {
            text,
            finish_reason: FinishReason::Stop,
            latency_ms: 0,
            usage: None,
        })
    }
}
