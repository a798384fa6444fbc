use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::fuzzy::{align_entity_with_names, EntityMatch};
use super::parse::{RawTriple, RejectedLine, SourceRef};
use super::relation::{
    align_relation, Embedder, OutOfDomainAlignment, RelationEmbeddings, RelationMatch,
};
use crate::corpus::{Document, RelationSet};
use crate::error::{Error, Result};
use crate::prompting::entity_names;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlignmentConfig {
    /// Minimum token-sort score in `[0, 100]` for an entity match.
    pub fuzzy_threshold: f64,
    /// Cosine threshold for out-of-domain relation alignment; `None`
    /// counts every out-of-domain relation as wrong.
    pub theta: Option<f64>,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        AlignmentConfig {
            fuzzy_threshold: 80.0,
            theta: None,
        }
    }
}

impl AlignmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=100.0).contains(&self.fuzzy_threshold) {
            return Err(Error::Config(format!("fuzzy_threshold {} outside [0, 100]", self.fuzzy_threshold)));
        }
        if let Some(t) = self.theta {
            if !(-1.0..=1.0).contains(&t) {
                return Err(Error::Config(format!("theta {t} outside [-1, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    InDomain,
    AlignedOutOfDomain { surface: String, similarity: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub doc_id: String,
    pub head: usize,
    pub tail: usize,
    pub relation: String,
    pub provenance: Provenance,
}

impl Prediction {
    pub fn key(&self) -> (&str, usize, usize, &str) {
        (&self.doc_id, self.head, self.tail, &self.relation)
    }
}

/// DocRED submission record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubmissionRecord {
    pub title: String,
    pub h_idx: usize,
    pub t_idx: usize,
    pub r: String,
}

impl From<&Prediction> for SubmissionRecord {
    fn from(p: &Prediction) -> Self {
        SubmissionRecord {
            title: p.doc_id.clone(),
            h_idx: p.head,
            t_idx: p.tail,
            r: p.relation.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RejectReason {
    /// The line itself did not parse.
    Malformed { detail: super::parse::LineRejection },
    EntityUnmatched { head: bool, tail: bool },
    /// Relation not in the inventory and no alignment was requested.
    RelationOutOfDomain,
    /// Out-of-domain relation whose best similarity fell below θ.
    RelationDiscarded { similarity: f64 },
    SelfLoop,
    EmbedderFailure { message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rejection {
    pub source: SourceRef,
    pub raw: String,
    pub reason: RejectReason,
}

impl From<RejectedLine> for Rejection {
    fn from(r: RejectedLine) -> Self {
        Rejection {
            source: r.source,
            raw: r.raw,
            reason: RejectReason::Malformed { detail: r.reason },
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Assembled {
    /// Sorted by (doc, head, tail, relation), deduplicated.
    pub predictions: Vec<Prediction>,
    pub rejections: Vec<Rejection>,
    /// Raw triples that repeated an existing prediction.
    pub duplicates: usize,
}

/// Out-of-domain alignment context: the embedder plus the pre-embedded
/// relation inventory.
pub struct OodAligner<'a> {
    pub embedder: &'a dyn Embedder,
    pub index: &'a RelationEmbeddings,
    cache: HashMap<String, std::result::Result<Vec<f64>, String>>,
}

impl<'a> OodAligner<'a> {
    pub fn new(embedder: &'a dyn Embedder, index: &'a RelationEmbeddings) -> Self {
        OodAligner {
            embedder,
            index,
            cache: HashMap::new(),
        }
    }

    fn align(&mut self, surface: &str, theta: f64) -> Result<OutOfDomainAlignment> {
        let cached = self
            .cache
            .entry(surface.to_string())
            .or_insert_with(|| self.embedder.embed(surface).map_err(|e| e.to_string()));
        match cached {
            Ok(v) => Ok(self.index.classify(v, theta)),
            Err(m) => Err(Error::Embedder(m.clone())),
        }
    }
}

/// Aligns raw triples of one document to predictions. Every input triple
/// ends up as a prediction, a duplicate of one, or exactly one rejection.
pub fn assemble_predictions(
    raw: &[RawTriple],
    doc: &Document,
    relations: &RelationSet,
    config: &AlignmentConfig,
    mut ood: Option<&mut OodAligner<'_>>,
) -> Assembled {
    let names = entity_names(doc);
    let mut kept: BTreeMap<(usize, usize, String), Prediction> = BTreeMap::new();
    let mut out = Assembled::default();
    for t in raw {
        let reject = |reason| Rejection {
            source: t.source.clone(),
            raw: t.raw.clone(),
            reason,
        };
        let h = align_entity_with_names(&t.head_surface, doc, &names, config.fuzzy_threshold);
        let o = align_entity_with_names(&t.tail_surface, doc, &names, config.fuzzy_threshold);
        let (head, tail) = match (h, o) {
            (EntityMatch::Matched { index: a, .. }, EntityMatch::Matched { index: b, .. }) => (a, b),
            _ => {
                out.rejections.push(reject(RejectReason::EntityUnmatched {
                    head: h.index().is_none(),
                    tail: o.index().is_none(),
                }));
                continue;
            }
        };
        let (relation, provenance) = match align_relation(&t.relation_surface, relations) {
            RelationMatch::InDomain(id) => (id, Provenance::InDomain),
            RelationMatch::OutOfDomain => match (config.theta, ood.as_deref_mut()) {
                (Some(theta), Some(aligner)) => match aligner.align(&t.relation_surface, theta) {
                    Ok(OutOfDomainAlignment::Aligned { relation, similarity }) => (
                        relation,
                        Provenance::AlignedOutOfDomain {
                            surface: t.relation_surface.clone(),
                            similarity,
                        },
                    ),
                    Ok(OutOfDomainAlignment::Discarded { similarity }) => {
                        out.rejections.push(reject(RejectReason::RelationDiscarded { similarity }));
                        continue;
                    }
                    Err(e) => {
                        out.rejections.push(reject(RejectReason::EmbedderFailure { message: e.to_string() }));
                        continue;
                    }
                },
                _ => {
                    out.rejections.push(reject(RejectReason::RelationOutOfDomain));
                    continue;
                }
            },
        };
        if head == tail {
            out.rejections.push(reject(RejectReason::SelfLoop));
            continue;
        }
        let key = (head, tail, relation.clone());
        if kept.contains_key(&key) {
            out.duplicates += 1;
            continue;
        }
        kept.insert(
            key,
            Prediction {
                doc_id: doc.doc_id.clone(),
                head,
                tail,
                relation,
                provenance,
            },
        );
    }
    out.predictions = kept.into_values().collect();
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::align::parse::parse_response;
    use crate::align::relation::HashingEmbedder;
    use crate::corpus::fixtures::{relations, two_docs};
    use crate::corpus::{candidate_pairs, gold_triples};
    use crate::prompting::{gold_completion, PromptMode};

    const RC: PromptMode = PromptMode::RelationClassification;

    fn run(text: &str, cfg: &AlignmentConfig) -> Assembled {
        let docs = two_docs();
        let (raw, _) = parse_response(text, "Ulm", 0, RC);
        assemble_predictions(&raw, &docs[0], &relations(), cfg, None)
    }

    #[test]
    fn gold_echo_recovers_gold() {
        let docs = two_docs();
        let text = gold_completion(&docs[0], &candidate_pairs(&docs[0]), &relations(), RC);
        let a = run(&text, &AlignmentConfig::default());
        let got: Vec<(usize, usize, String)> =
            a.predictions.iter().map(|p| (p.head, p.tail, p.relation.clone())).collect();
        let want: Vec<(usize, usize, String)> =
            gold_triples(&docs[0]).into_iter().map(|t| (t.head, t.tail, t.relation)).collect();
        assert_eq!(got, want);
        assert!(a.rejections.is_empty());
    }

    #[test]
    fn unmatched_tail_is_rejected() {
        let a = run("(Ulm| country| Atlantis)", &AlignmentConfig::default());
        assert!(a.predictions.is_empty());
        assert_eq!(a.rejections[0].reason, RejectReason::EntityUnmatched { head: false, tail: true });
    }

    #[test]
    fn duplicates_collapse() {
        let a = run("(Ulm| country| Germany)\n(Ulm| country| Germany)", &AlignmentConfig::default());
        assert_eq!(a.predictions.len(), 1);
        assert_eq!(a.duplicates, 1);
    }

    #[test]
    fn self_loop_is_rejected() {
        let a = run("(Ulm| country| ulm)", &AlignmentConfig::default());
        assert_eq!(a.rejections[0].reason, RejectReason::SelfLoop);
    }

    #[test]
    fn out_of_domain_paths() {
        let strict = run("(Ulm| kountry| Germany)", &AlignmentConfig::default());
        assert_eq!(strict.rejections[0].reason, RejectReason::RelationOutOfDomain);

        let docs = two_docs();
        let (raw, _) = parse_response("(Ulm| kountry| Germany)", "Ulm", 0, RC);
        let emb = HashingEmbedder::default();
        let index = RelationEmbeddings::build(&relations(), &emb).unwrap();
        let mut aligner = OodAligner::new(&emb, &index);
        let cfg = AlignmentConfig { theta: Some(0.3), ..Default::default() };
        let a = assemble_predictions(&raw, &docs[0], &relations(), &cfg, Some(&mut aligner));
        assert_eq!(a.predictions.len(), 1);
        assert_eq!(a.predictions[0].relation, "P17");
        assert!(matches!(a.predictions[0].provenance, Provenance::AlignedOutOfDomain { .. }));

        let cfg = AlignmentConfig { theta: Some(1.0), ..Default::default() };
        let a = assemble_predictions(&raw, &docs[0], &relations(), &cfg, Some(&mut aligner));
        assert!(matches!(a.rejections[0].reason, RejectReason::RelationDiscarded { .. }));
    }
}
