//! Entity-marker insertion: every mention is wrapped in a pair of `*` tokens.

use crate::corpus::Document;
use crate::error::{Error, Result};

pub const MARKER: &str = "*";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MarkedDocument {
    pub tokens: Vec<String>,
    /// `[entity][mention]` → position of the mention's opening marker, or
    /// `None` when truncation removed it.
    pub mention_marker_pos: Vec<Vec<Option<usize>>>,
    pub overflow: bool,
}

impl MarkedDocument {
    /// Surviving opening-marker positions of one entity.
    pub fn entity_positions(&self, entity: usize) -> Vec<usize> {
        self.mention_marker_pos[entity].iter().flatten().copied().collect()
    }

    /// Entities left without any marker after truncation.
    pub fn lost_entities(&self) -> Vec<usize> {
        (0..self.mention_marker_pos.len())
            .filter(|&e| self.mention_marker_pos[e].iter().all(Option::is_none))
            .collect()
    }
}

/// Inserts markers around every mention and flattens the sentences.
///
/// At a shared boundary, closing markers come before opening markers; among
/// mentions opening at the same token the longer one opens first, and among
/// mentions closing at the same token the shorter one closes first. The
/// result is truncated to `capacity` tokens, setting `overflow`.
pub fn mark_entities(doc: &Document, capacity: usize) -> Result<MarkedDocument> {
    // (entity, mention, start, end) per sentence
    let mut per_sentence: Vec<Vec<(usize, usize, usize, usize)>> = vec![Vec::new(); doc.sentences.len()];
    for e in &doc.entities {
        for (j, m) in e.mentions.iter().enumerate() {
            let len = doc.sentences.get(m.sent_id).map(Vec::len);
            if len.is_none_or(|len| m.end > len || m.start >= m.end) {
                return Err(Error::Validation(format!(
                    "{}: mention {:?} of entity {} does not fit sentence {}",
                    doc.doc_id, m.surface, e.index, m.sent_id
                )));
            }
            per_sentence[m.sent_id].push((e.index, j, m.start, m.end));
        }
    }

    let mut tokens = Vec::new();
    let mut positions: Vec<Vec<Option<usize>>> = doc
        .entities
        .iter()
        .map(|e| vec![None; e.mentions.len()])
        .collect();

    for (s, sent) in doc.sentences.iter().enumerate() {
        let spans = &per_sentence[s];
        for i in 0..=sent.len() {
            let mut closing: Vec<_> = spans.iter().filter(|m| m.3 == i).collect();
            closing.sort_by_key(|m| std::cmp::Reverse(m.2));
            tokens.extend(closing.iter().map(|_| MARKER.to_string()));

            let mut opening: Vec<_> = spans.iter().filter(|m| m.2 == i).collect();
            opening.sort_by_key(|m| std::cmp::Reverse(m.3));
            for &&(e, j, _, _) in &opening {
                positions[e][j] = Some(tokens.len());
                tokens.push(MARKER.to_string());
            }
            if let Some(t) = sent.get(i) {
                tokens.push(t.clone());
            }
        }
    }

    let overflow = tokens.len() > capacity;
    if overflow {
        tokens.truncate(capacity);
        for p in positions.iter_mut().flatten() {
            if p.is_some_and(|p| p >= capacity) {
                *p = None;
            }
        }
    }
    Ok(MarkedDocument {
        tokens,
        mention_marker_pos: positions,
        overflow,
    })
}
