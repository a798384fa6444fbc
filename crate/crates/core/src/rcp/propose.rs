//! Candidate proposal and the line-delimited proposal file.

use serde::{Deserialize, Serialize};

use super::classifier::RcpParams;
use super::encoder::Encoder;
use super::model::{score_document, ScoreDiagnostics};
use crate::corpus::{Document, EntityPair};
use crate::error::{Error, Result};

/// Pairs of `doc` with `P(NA) < tau`, in candidate order.
pub fn propose_candidates<E: Encoder + ?Sized>(
    doc: &Document,
    encoder: &E,
    params: &RcpParams,
    tau: f64,
) -> Result<(Vec<EntityPair>, ScoreDiagnostics)> {
    let (pairs, diag) = score_document(doc, encoder, params)?;
    Ok((threshold_pairs(pairs, tau), diag))
}

pub fn threshold_pairs(pairs: Vec<EntityPair>, tau: f64) -> Vec<EntityPair> {
    pairs
        .into_iter()
        .filter(|p| p.na_probability.is_some_and(|v| v < tau))
        .collect()
}

const PROPOSALS_FORMAT: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ProposalHeader {
    lmrc_proposals: u32,
    na_threshold: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProposalFile {
    pub na_threshold: f64,
    pub pairs: Vec<EntityPair>,
}

pub fn write_proposals(na_threshold: f64, pairs: &[EntityPair]) -> String {
    let mut out = serde_json::to_string(&ProposalHeader {
        lmrc_proposals: PROPOSALS_FORMAT,
        na_threshold,
    })
    .expect("plain data");
    out.push('\n');
    for p in pairs {
        out.push_str(&serde_json::to_string(p).expect("plain data"));
        out.push('\n');
    }
    out
}

pub fn parse_proposals(text: &str) -> Result<ProposalFile> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let fmt_err = |line: usize, field: &str, message: String| Error::Format {
        doc_index: line,
        field: field.into(),
        message,
    };
    let (i, first) = lines
        .next()
        .ok_or_else(|| fmt_err(0, "header", "missing proposal header".into()))?;
    let header: ProposalHeader =
        serde_json::from_str(first).map_err(|e| fmt_err(i, "header", e.to_string()))?;
    if header.lmrc_proposals != PROPOSALS_FORMAT {
        return Err(fmt_err(i, "lmrc_proposals", format!("unsupported version {}", header.lmrc_proposals)));
    }
    let mut pairs = Vec::new();
    for (i, line) in lines {
        let p: EntityPair = serde_json::from_str(line).map_err(|e| fmt_err(i, "record", e.to_string()))?;
        if p.head == p.tail {
            return Err(fmt_err(i, "tail", format!("self-pair ({}, {})", p.head, p.tail)));
        }
        if let Some(v) = p.na_probability {
            if !(0.0..=1.0).contains(&v) {
                return Err(fmt_err(i, "na_probability", format!("{v} outside [0, 1]")));
            }
        }
        pairs.push(p);
    }
    Ok(ProposalFile {
        na_threshold: header.na_threshold,
        pairs,
    })
}
