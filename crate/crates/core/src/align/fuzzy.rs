//! Token-sort similarity and entity alignment.

use serde::{Deserialize, Serialize};

use crate::corpus::Document;
use crate::prompting::entity_names;

/// Lowercases and replaces every non-alphanumeric character with a space.
fn preprocess(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect::<String>()
        .to_lowercase()
}

fn sorted_tokens(s: &str) -> Vec<char> {
    let p = preprocess(s);
    let mut toks: Vec<&str> = p.split_whitespace().collect();
    toks.sort_unstable();
    toks.join(" ").chars().collect()
}

fn lcs_len(a: &[char], b: &[char]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for &x in a {
        let mut prev = 0;
        for (j, &y) in b.iter().enumerate() {
            let cur = row[j + 1];
            row[j + 1] = if x == y { prev + 1 } else { row[j + 1].max(row[j]) };
            prev = cur;
        }
    }
    row[b.len()]
}

/// Normalized indel similarity of the sorted token strings, in `[0, 100]`.
/// Either side empty after preprocessing scores 0.
pub fn token_sort_ratio(a: &str, b: &str) -> f64 {
    let (a, b) = (sorted_tokens(a), sorted_tokens(b));
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    200.0 * lcs_len(&a, &b) as f64 / (a.len() + b.len()) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EntityMatch {
    Matched { index: usize, score: f64 },
    Unmatched { best_score: f64 },
}

impl EntityMatch {
    pub fn index(&self) -> Option<usize> {
        match *self {
            EntityMatch::Matched { index, .. } => Some(index),
            EntityMatch::Unmatched { .. } => None,
        }
    }
}

/// Maps a generated entity string onto a document entity.
///
/// A string equal to the name the prompt used for an entity resolves to
/// it directly. Otherwise each entity scores the best [`token_sort_ratio`]
/// over its mention surfaces; the top score wins if it reaches
/// `threshold`, lower index first on ties.
pub fn align_entity(surface: &str, doc: &Document, threshold: f64) -> EntityMatch {
    align_entity_with_names(surface, doc, &entity_names(doc), threshold)
}

pub(crate) fn align_entity_with_names(surface: &str, doc: &Document, names: &[String], threshold: f64) -> EntityMatch {
    let s = surface.trim();
    if let Some(i) = names.iter().position(|n| n == s) {
        return EntityMatch::Matched { index: i, score: 100.0 };
    }
    let mut best: Option<(usize, f64)> = None;
    for e in &doc.entities {
        let score = e
            .mentions
            .iter()
            .map(|m| token_sort_ratio(s, &m.surface))
            .fold(0.0, f64::max);
        if best.is_none_or(|(_, b)| score > b) {
            best = Some((e.index, score));
        }
    }
    match best {
        Some((index, score)) if score >= threshold => EntityMatch::Matched { index, score },
        Some((_, score)) => EntityMatch::Unmatched { best_score: score },
        None => EntityMatch::Unmatched { best_score: 0.0 },
    }
}
