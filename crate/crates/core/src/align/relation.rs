//! Relation-name resolution and embedding-based out-of-domain alignment.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::RelationSet;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RelationMatch {
    InDomain(String),
    OutOfDomain,
}

/// Exact display-name match, ignoring case and repeated whitespace.
pub fn align_relation(surface: &str, relations: &RelationSet) -> RelationMatch {
    match relations.id_by_name(surface) {
        Some(id) => RelationMatch::InDomain(id.to_string()),
        None => RelationMatch::OutOfDomain,
    }
}

/// A sentence-embedding provider.
pub trait Embedder: Send + Sync {
    fn embed(&self, text: &str) -> Result<Vec<f64>>;
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

/// Character-trigram and word feature hashing; a dependency-free stand-in
/// for a sentence encoder.
#[derive(Debug, Clone)]
pub struct HashingEmbedder {
    pub dim: usize,
}

impl Default for HashingEmbedder {
    fn default() -> Self {
        HashingEmbedder { dim: 512 }
    }
}

fn feature_hash(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

impl Embedder for HashingEmbedder {
    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        let norm = crate::corpus::fold_name(text);
        let mut v = vec![0.0; self.dim];
        let padded: Vec<char> = format!(" {norm} ").chars().collect();
        for w in padded.windows(3) {
            let g: String = w.iter().collect();
            v[(feature_hash(&g) % self.dim as u64) as usize] += 1.0;
        }
        for word in norm.split_whitespace() {
            v[(feature_hash(&format!("w:{word}")) % self.dim as u64) as usize] += 2.0;
        }
        Ok(unit(v))
    }
}

/// Precomputed vectors keyed by exact text, loaded from line-delimited
/// `{"text": ..., "vector": [...]}` records.
#[derive(Debug, Clone, Default)]
pub struct TableEmbedder {
    table: HashMap<String, Vec<f64>>,
}

#[derive(Deserialize, Serialize)]
struct TableRow {
    text: String,
    vector: Vec<f64>,
}

impl TableEmbedder {
    pub fn new(entries: impl IntoIterator<Item = (String, Vec<f64>)>) -> Self {
        TableEmbedder {
            table: entries.into_iter().collect(),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut table = HashMap::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let row: TableRow = serde_json::from_str(line).map_err(|e| Error::Format {
                doc_index: i,
                field: "embedding".into(),
                message: e.to_string(),
            })?;
            table.insert(row.text, row.vector);
        }
        Ok(TableEmbedder { table })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

impl Embedder for TableEmbedder {
    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        self.table
            .get(text)
            .map(|v| unit(v.clone()))
            .ok_or_else(|| Error::Embedder(format!("no vector for {text:?}")))
    }
}

/// Embeddings of every relation display name, in relation-set order.
#[derive(Debug, Clone)]
pub struct RelationEmbeddings {
    ids: Vec<String>,
    vectors: Vec<Vec<f64>>,
}

impl RelationEmbeddings {
    pub fn build(relations: &RelationSet, embedder: &dyn Embedder) -> Result<Self> {
        let mut ids = Vec::with_capacity(relations.len());
        let mut vectors = Vec::with_capacity(relations.len());
        for (id, name) in relations.iter() {
            ids.push(id.to_string());
            vectors.push(embedder.embed(name)?);
        }
        Ok(RelationEmbeddings { ids, vectors })
    }

    /// Best relation and its cosine similarity; earliest relation on ties.
    pub fn nearest(&self, v: &[f64]) -> Option<(&str, f64)> {
        let mut best: Option<(usize, f64)> = None;
        for (i, r) in self.vectors.iter().enumerate() {
            let s = cosine(v, r);
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((i, s));
            }
        }
        best.map(|(i, s)| (self.ids[i].as_str(), s))
    }

    /// Aligns a surface embedding to its nearest relation if the similarity
    /// reaches `theta`.
    pub fn classify(&self, v: &[f64], theta: f64) -> OutOfDomainAlignment {
        match self.nearest(v) {
            Some((id, s)) if s >= theta => OutOfDomainAlignment::Aligned {
                relation: id.to_string(),
                similarity: s,
            },
            Some((_, s)) => OutOfDomainAlignment::Discarded { similarity: s },
            None => OutOfDomainAlignment::Discarded { similarity: f64::NEG_INFINITY },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OutOfDomainAlignment {
    Aligned { relation: String, similarity: f64 },
    Discarded { similarity: f64 },
}

impl OutOfDomainAlignment {
    pub fn similarity(&self) -> f64 {
        match self {
            OutOfDomainAlignment::Aligned { similarity, .. } | OutOfDomainAlignment::Discarded { similarity } => {
                *similarity
            }
        }
    }
}

/// Nearest relation by cosine similarity of the surface embedding, kept only
/// when the similarity reaches `theta`.
pub fn align_out_of_domain_with(
    surface: &str,
    index: &RelationEmbeddings,
    embedder: &dyn Embedder,
    theta: f64,
) -> Result<OutOfDomainAlignment> {
    Ok(index.classify(&embedder.embed(surface)?, theta))
}

pub fn align_out_of_domain(
    surface: &str,
    relations: &RelationSet,
    embedder: &dyn Embedder,
    theta: f64,
) -> Result<OutOfDomainAlignment> {
    let index = RelationEmbeddings::build(relations, embedder)?;
    align_out_of_domain_with(surface, &index, embedder, theta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rels() -> RelationSet {
        RelationSet::new([("P569", "date of birth"), ("P108", "employer"), ("P17", "country")]).unwrap()
    }

    #[test]
    fn exact_relation_names() {
        assert_eq!(align_relation("date of birth", &rels()), RelationMatch::InDomain("P569".into()));
        assert_eq!(align_relation("Date Of Birth", &rels()), RelationMatch::InDomain("P569".into()));
        assert_eq!(align_relation("works at", &rels()), RelationMatch::OutOfDomain);
    }

    #[test]
    fn identical_surface_aligns_with_similarity_one() {
        let e = HashingEmbedder::default();
        match align_out_of_domain("employer", &rels(), &e, 0.99).unwrap() {
            OutOfDomainAlignment::Aligned { relation, similarity } => {
                assert_eq!(relation, "P108");
                assert!((similarity - 1.0).abs() < 1e-12);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn orthogonal_embedding_is_discarded() {
        let e = TableEmbedder::new([
            ("date of birth".to_string(), vec![1.0, 0.0, 0.0, 0.0]),
            ("employer".to_string(), vec![0.0, 1.0, 0.0, 0.0]),
            ("country".to_string(), vec![0.0, 0.0, 1.0, 0.0]),
            ("xyz".to_string(), vec![0.0, 0.0, 0.0, 1.0]),
        ]);
        assert_eq!(
            align_out_of_domain("xyz", &rels(), &e, 0.5).unwrap(),
            OutOfDomainAlignment::Discarded { similarity: 0.0 }
        );
        assert!(matches!(align_out_of_domain("missing", &rels(), &e, 0.5), Err(Error::Embedder(_))));
    }

    #[test]
    fn similarity_ties_go_to_relation_order() {
        let e = TableEmbedder::new([
            ("date of birth".to_string(), vec![1.0, 1.0]),
            ("employer".to_string(), vec![1.0, 1.0]),
            ("country".to_string(), vec![-1.0, 0.0]),
            ("q".to_string(), vec![1.0, 1.0]),
        ]);
        match align_out_of_domain("q", &rels(), &e, 0.0).unwrap() {
            OutOfDomainAlignment::Aligned { relation, .. } => assert_eq!(relation, "P569"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn table_embedder_parses_lines() {
        let t = TableEmbedder::parse("{\"text\":\"a\",\"vector\":[3,4]}\n\n").unwrap();
        let v = t.embed("a").unwrap();
        assert!((v[0] - 0.6).abs() < 1e-12 && (v[1] - 0.8).abs() < 1e-12);
        assert!(TableEmbedder::parse("not json").is_err());
    }

    proptest! {
        #[test]
        fn raising_theta_never_adds_alignments(surface in "[a-z ]{1,20}", t1 in -1.0f64..1.0, t2 in -1.0f64..1.0) {
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let e = HashingEmbedder::default();
            let a_hi = align_out_of_domain(&surface, &rels(), &e, hi).unwrap();
            let a_lo = align_out_of_domain(&surface, &rels(), &e, lo).unwrap();
            if matches!(a_hi, OutOfDomainAlignment::Aligned { .. }) {
                prop_assert_eq!(a_hi, a_lo);
            }
        }
    }
}
