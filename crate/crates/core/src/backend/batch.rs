//! Parallel, rate-limited, resumable batch generation.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::{Backend, FinishReason, GenerationRequest, GenerationResult, RequestTag};
use crate::error::{Error, Result};

/// Time source for rate limiting.
pub trait Clock: Send + Sync {
    /// Time elapsed since the clock's origin.
    fn now(&self) -> Duration;
    fn sleep_until(&self, t: Duration);
}

pub struct SystemClock {
    origin: Instant,
}

impl Default for SystemClock {
    fn default() -> Self {
        SystemClock { origin: Instant::now() }
    }
}

impl Clock for SystemClock {
    fn now(&self) -> Duration {
        self.origin.elapsed()
    }

    fn sleep_until(&self, t: Duration) {
        if let Some(d) = t.checked_sub(self.now()) {
            thread::sleep(d);
        }
    }
}

/// Virtual clock: sleeping advances time instantly.
#[derive(Default)]
pub struct FakeClock {
    now: Mutex<Duration>,
}

impl Clock for FakeClock {
    fn now(&self) -> Duration {
        *self.now.lock().unwrap()
    }

    fn sleep_until(&self, t: Duration) {
        let mut n = self.now.lock().unwrap();
        *n = (*n).max(t);
    }
}

/// Hands out evenly spaced start slots at `per_second`.
pub struct RateLimiter {
    interval: Duration,
    next: Mutex<Option<Duration>>,
}

impl RateLimiter {
    pub fn new(per_second: f64) -> Result<Self> {
        if !(per_second > 0.0 && per_second.is_finite()) {
            return Err(Error::Config(format!("rate limit {per_second} must be positive")));
        }
        Ok(RateLimiter {
            interval: Duration::from_secs_f64(1.0 / per_second),
            next: Mutex::new(None),
        })
    }

    pub fn acquire(&self, clock: &dyn Clock) {
        let slot = {
            let mut next = self.next.lock().unwrap();
            let now = clock.now();
            let slot = next.map_or(now, |n| n.max(now));
            *next = Some(slot + self.interval);
            slot
        };
        clock.sleep_until(slot);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub tag: RequestTag,
    pub text: String,
    pub finish_reason: FinishReason,
    pub timestamp_ms: u64,
}

/// Parses ledger text. A final line without a newline is a torn write and
/// is ignored; any other malformed line is an error. Also returns the byte
/// length of the intact prefix.
pub fn parse_ledger(text: &str) -> Result<(Vec<LedgerEntry>, usize)> {
    let mut entries = Vec::new();
    let mut offset = 0;
    for (i, line) in text.split_inclusive('\n').enumerate() {
        if !line.ends_with('\n') {
            break;
        }
        offset += line.len();
        if line.trim().is_empty() {
            continue;
        }
        let e: LedgerEntry = serde_json::from_str(line).map_err(|e| Error::Format {
            doc_index: i,
            field: "ledger".into(),
            message: e.to_string(),
        })?;
        entries.push(e);
    }
    Ok((entries, offset))
}

/// Append-only record of completed requests, one JSON object per line.
pub struct Ledger {
    path: PathBuf,
    file: Mutex<File>,
    done: HashMap<RequestTag, LedgerEntry>,
}

impl Ledger {
    /// Opens or creates the ledger, dropping a torn final line.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let text = match std::fs::read(&path) {
            Ok(b) => String::from_utf8_lossy(&b).into_owned(),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
            Err(e) => return Err(Error::io(&path, e)),
        };
        let (entries, intact) = parse_ledger(&text)?;
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        if intact < text.len() {
            file.set_len(intact as u64).map_err(|e| Error::io(&path, e))?;
        }
        let done = entries.into_iter().map(|e| (e.tag.clone(), e)).collect();
        Ok(Ledger {
            path,
            file: Mutex::new(file),
            done,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn get(&self, tag: &RequestTag) -> Option<&LedgerEntry> {
        self.done.get(tag)
    }

    pub fn len(&self) -> usize {
        self.done.len()
    }

    pub fn is_empty(&self) -> bool {
        self.done.is_empty()
    }

    /// Appends one record as a single write.
    pub fn append(&self, tag: &RequestTag, result: &GenerationResult) -> Result<()> {
        let entry = LedgerEntry {
            tag: tag.clone(),
            text: result.text.clone(),
            finish_reason: result.finish_reason,
            timestamp_ms: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64),
        };
        let mut line = serde_json::to_string(&entry)?;
        line.push('\n');
        let mut f = self.file.lock().unwrap();
        f.write_all(line.as_bytes()).map_err(|e| Error::io(&self.path, e))?;
        f.flush().map_err(|e| Error::io(&self.path, e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchOptions {
    pub parallelism: usize,
    /// Maximum request starts per second.
    pub rate_per_second: Option<f64>,
}

impl Default for BatchOptions {
    fn default() -> Self {
        BatchOptions {
            parallelism: 4,
            rate_per_second: None,
        }
    }
}

#[derive(Debug)]
pub struct BatchReport {
    /// `results[i]` answers `requests[i]`.
    pub results: Vec<Result<GenerationResult>>,
    /// Requests answered from the ledger without calling the backend.
    pub resumed: usize,
}

impl BatchReport {
    pub fn failed_tags<'a>(&self, requests: &'a [GenerationRequest]) -> Vec<&'a RequestTag> {
        self.results
            .iter()
            .zip(requests)
            .filter(|(r, _)| r.is_err())
            .map(|(_, q)| &q.tag)
            .collect()
    }

    pub fn is_complete(&self) -> bool {
        self.results.iter().all(Result::is_ok)
    }
}

/// Runs `requests` on up to `parallelism` threads. Requests already in the
/// ledger are served from it; new successes (other than error finishes) are
/// appended. A failing request does not affect the others.
pub fn generate_batch(
    backend: &dyn Backend,
    requests: &[GenerationRequest],
    options: &BatchOptions,
    ledger: Option<&Ledger>,
    clock: &dyn Clock,
) -> Result<BatchReport> {
    if options.parallelism == 0 {
        return Err(Error::Config("parallelism must be at least 1".into()));
    }
    let limiter = options.rate_per_second.map(RateLimiter::new).transpose()?;
    let mut slots: Vec<Option<Result<GenerationResult>>> = Vec::with_capacity(requests.len());
    let mut pending = Vec::new();
    let mut resumed = 0;
    for (i, r) in requests.iter().enumerate() {
        match ledger.and_then(|l| l.get(&r.tag)) {
            Some(e) => {
                resumed += 1;
                slots.push(Some(Ok(GenerationResult {
                    text: e.text.clone(),
                    finish_reason: e.finish_reason,
                    latency_ms: 0,
                    usage: None,
                })));
            }
            None => {
                slots.push(None);
                pending.push(i);
            }
        }
    }
    let next = AtomicUsize::new(0);
    let out = Mutex::new(slots);
    thread::scope(|s| {
        for _ in 0..options.parallelism.min(pending.len()) {
            s.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::SeqCst);
                let Some(&i) = pending.get(k) else { break };
                if let Some(l) = &limiter {
                    l.acquire(clock);
                }
                let req = &requests[i];
                let mut res = backend.generate(req);
                if let (Ok(r), Some(l)) = (&res, ledger) {
                    if r.finish_reason != FinishReason::Error {
                        if let Err(e) = l.append(&req.tag, r) {
                            res = Err(e);
                        }
                    }
                }
                out.lock().unwrap()[i] = Some(res);
            });
        }
    });
    let results = out
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|r| r.expect("every request is answered"))
        .collect();
    Ok(BatchReport { results, resumed })
}
