//! Extraction metrics: micro P/R/F1 with Ign F1, intra/inter-sentence
//! splits, per-relation breakdowns, proposal-stage binary metrics, and
//! out-of-domain threshold sweeps.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::align::{assemble_predictions, AlignmentConfig, Embedder, OodAligner, Prediction, Provenance, RawTriple, RelationEmbeddings};
use crate::corpus::{gold_pairs, gold_triples, Document, EntityPair, RelationSet};
use crate::error::{Error, Result};

pub fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 { 0.0 } else { num as f64 / den as f64 }
}

pub fn f1_score(p: f64, r: f64) -> f64 {
    if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub ign_precision: f64,
    pub ign_f1: f64,
    pub correct: u64,
    pub predicted: u64,
    pub gold: u64,
    pub correct_in_train: u64,
    pub extracted_triples: u64,
}

impl MetricsReport {
    pub fn from_counts(correct: u64, predicted: u64, gold: u64, correct_in_train: u64) -> Self {
        let precision = ratio(correct, predicted);
        let recall = ratio(correct, gold);
        let ign_precision = ratio(correct - correct_in_train, predicted - correct_in_train);
        MetricsReport {
            precision,
            recall,
            f1: f1_score(precision, recall),
            ign_precision,
            ign_f1: f1_score(ign_precision, recall),
            correct,
            predicted,
            gold,
            correct_in_train,
            extracted_triples: predicted,
        }
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "precision\t{:.2}", 100.0 * self.precision)?;
        writeln!(f, "recall\t{:.2}", 100.0 * self.recall)?;
        writeln!(f, "f1\t{:.2}", 100.0 * self.f1)?;
        writeln!(f, "ign_precision\t{:.2}", 100.0 * self.ign_precision)?;
        writeln!(f, "ign_f1\t{:.2}", 100.0 * self.ign_f1)?;
        writeln!(f, "correct\t{}", self.correct)?;
        writeln!(f, "predicted\t{}", self.predicted)?;
        writeln!(f, "gold\t{}", self.gold)?;
        writeln!(f, "correct_in_train\t{}", self.correct_in_train)?;
        writeln!(f, "extracted_triples\t{}", self.extracted_triples)
    }
}

/// Training facts as (head mention name, relation id, tail mention name),
/// expanded over every mention-name combination. Lookups are case-exact.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TrainFactSet {
    facts: HashSet<(String, String, String)>,
}

impl TrainFactSet {
    pub fn from_corpus(train: &[Document]) -> Self {
        let mut facts = HashSet::new();
        for d in train {
            for l in &d.labels {
                for hm in &d.entities[l.head].mentions {
                    for tm in &d.entities[l.tail].mentions {
                        facts.insert((hm.surface.clone(), l.relation.clone(), tm.surface.clone()));
                    }
                }
            }
        }
        TrainFactSet { facts }
    }

    pub fn len(&self) -> usize {
        self.facts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.facts.is_empty()
    }

    pub fn contains(&self, head: &str, relation: &str, tail: &str) -> bool {
        self.facts
            .contains(&(head.to_string(), relation.to_string(), tail.to_string()))
    }

    /// True when any mention-name combination of the triple is a training fact.
    pub fn covers(&self, doc: &Document, head: usize, relation: &str, tail: usize) -> bool {
        doc.entities[head].mentions.iter().any(|hm| {
            doc.entities[tail]
                .mentions
                .iter()
                .any(|tm| self.contains(&hm.surface, relation, &tm.surface))
        })
    }
}

type Key = (usize, usize, String);

/// Groups predictions by gold document, deduplicating and checking indices.
fn group(preds: &[Prediction], gold: &[Document]) -> Result<Vec<BTreeSet<Key>>> {
    let by_id: HashMap<&str, usize> = gold.iter().enumerate().map(|(i, d)| (d.doc_id.as_str(), i)).collect();
    let mut out = vec![BTreeSet::new(); gold.len()];
    for p in preds {
        let &i = by_id
            .get(p.doc_id.as_str())
            .ok_or_else(|| Error::Validation(format!("prediction for unknown document {:?}", p.doc_id)))?;
        let n = gold[i].num_entities();
        if p.head >= n || p.tail >= n {
            return Err(Error::Validation(format!(
                "prediction ({}, {}) out of range for {:?} with {n} entities",
                p.head, p.tail, p.doc_id
            )));
        }
        out[i].insert((p.head, p.tail, p.relation.clone()));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default)]
struct Counts {
    correct: u64,
    predicted: u64,
    gold: u64,
    in_train: u64,
}

impl Counts {
    fn add(self, o: Counts) -> Counts {
        Counts {
            correct: self.correct + o.correct,
            predicted: self.predicted + o.predicted,
            gold: self.gold + o.gold,
            in_train: self.in_train + o.in_train,
        }
    }

    fn report(self) -> MetricsReport {
        MetricsReport::from_counts(self.correct, self.predicted, self.gold, self.in_train)
    }
}

/// Counts over the triples of each document admitted by `keep`.
fn count<F>(grouped: &[BTreeSet<Key>], gold: &[Document], train: Option<&TrainFactSet>, keep: F) -> Counts
where
    F: Fn(&Document, &Key) -> bool + Sync,
{
    grouped
        .par_iter()
        .zip(gold.par_iter())
        .map(|(preds, doc)| {
            let g: BTreeSet<Key> = gold_triples(doc)
                .into_iter()
                .map(|t| (t.head, t.tail, t.relation))
                .filter(|k| keep(doc, k))
                .collect();
            let mut c = Counts {
                gold: g.len() as u64,
                ..Counts::default()
            };
            for k in preds.iter().filter(|k| keep(doc, k)) {
                c.predicted += 1;
                if g.contains(k) {
                    c.correct += 1;
                    if train.is_some_and(|t| t.covers(doc, k.0, &k.2, k.1)) {
                        c.in_train += 1;
                    }
                }
            }
            c
        })
        .reduce(Counts::default, Counts::add)
}

/// Micro-averaged scores of `preds` against the gold labels of `gold`.
/// Without training facts, Ign scores equal the plain ones.
pub fn evaluate(preds: &[Prediction], gold: &[Document], train: Option<&TrainFactSet>) -> Result<MetricsReport> {
    let grouped = group(preds, gold)?;
    Ok(count(&grouped, gold, train, |_, _| true).report())
}

/// Whether some sentence mentions both entities.
pub fn is_intra_sentence(doc: &Document, head: usize, tail: usize) -> bool {
    let sents = |e: usize| doc.entities[e].mentions.iter().map(|m| m.sent_id).collect::<HashSet<_>>();
    !sents(head).is_disjoint(&sents(tail))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntraInter {
    pub intra: MetricsReport,
    pub inter: MetricsReport,
}

pub fn intra_inter_f1(preds: &[Prediction], gold: &[Document]) -> Result<IntraInter> {
    let grouped = group(preds, gold)?;
    Ok(IntraInter {
        intra: count(&grouped, gold, None, |d, k| is_intra_sentence(d, k.0, k.1)).report(),
        inter: count(&grouped, gold, None, |d, k| !is_intra_sentence(d, k.0, k.1)).report(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationScore {
    pub relation: String,
    pub name: String,
    pub f1: f64,
    pub gold: u64,
    pub predicted: u64,
    pub correct: u64,
}

/// Per-relation scores ordered by descending gold count, then relation-set
/// order. Relations with neither gold nor predictions are left out.
pub fn per_relation_f1(preds: &[Prediction], gold: &[Document], relations: &RelationSet) -> Result<Vec<RelationScore>> {
    let grouped = group(preds, gold)?;
    let mut rows: Vec<(usize, RelationScore)> = relations
        .iter()
        .enumerate()
        .filter_map(|(pos, (id, name))| {
            let c = count(&grouped, gold, None, |_, k| k.2 == id);
            (c.gold + c.predicted > 0).then(|| {
                (
                    pos,
                    RelationScore {
                        relation: id.to_string(),
                        name: name.to_string(),
                        f1: c.report().f1,
                        gold: c.gold,
                        predicted: c.predicted,
                        correct: c.correct,
                    },
                )
            })
        })
        .collect();
    rows.sort_by(|a, b| b.1.gold.cmp(&a.1.gold).then(a.0.cmp(&b.0)));
    Ok(rows.into_iter().map(|(_, r)| r).collect())
}

/// Tab-separated per-relation table with a header row.
pub fn format_relation_table(rows: &[RelationScore]) -> String {
    let mut s = String::from("relation\tname\tgold\tpredicted\tcorrect\tf1\n");
    for r in rows {
        s.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{:.4}\n",
            r.relation, r.name, r.gold, r.predicted, r.correct, r.f1
        ));
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinaryMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub true_positives: u64,
    pub proposed: u64,
    pub gold: u64,
}

/// Proposal quality: overlap between proposed pairs and gold pairs that
/// carry at least one relation. Proposals for unknown documents count as
/// false positives.
pub fn rcp_binary_metrics(proposed: &[EntityPair], gold: &[Document]) -> BinaryMetrics {
    let gold_set: HashSet<(&str, usize, usize)> = gold
        .iter()
        .flat_map(|d| gold_pairs(d).into_iter().map(move |(h, t)| (d.doc_id.as_str(), h, t)))
        .collect();
    let prop: HashSet<(&str, usize, usize)> = proposed.iter().map(|p| (p.doc_id.as_str(), p.head, p.tail)).collect();
    let tp = prop.intersection(&gold_set).count() as u64;
    let (precision, recall) = (ratio(tp, prop.len() as u64), ratio(tp, gold_set.len() as u64));
    BinaryMetrics {
        precision,
        recall,
        f1: f1_score(precision, recall),
        true_positives: tp,
        proposed: prop.len() as u64,
        gold: gold_set.len() as u64,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub theta: f64,
    /// Predictions that came from out-of-domain alignment.
    pub aligned: u64,
    pub report: MetricsReport,
}

/// Re-aligns the raw triples of each document (`raw[i]` belongs to
/// `gold[i]`) at every θ in `grid` and scores the result.
#[allow(clippy::too_many_arguments)]
pub fn threshold_sweep(
    raw: &[Vec<RawTriple>],
    gold: &[Document],
    relations: &RelationSet,
    fuzzy_threshold: f64,
    grid: &[f64],
    embedder: &dyn Embedder,
    train: Option<&TrainFactSet>,
) -> Result<Vec<SweepRow>> {
    if raw.len() != gold.len() {
        return Err(Error::Contract(format!("{} raw groups for {} documents", raw.len(), gold.len())));
    }
    if grid.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Contract("theta grid must be ascending".into()));
    }
    let index = RelationEmbeddings::build(relations, embedder)?;
    let mut aligner = OodAligner::new(embedder, &index);
    let mut rows = Vec::with_capacity(grid.len());
    for &theta in grid {
        let config = AlignmentConfig {
            fuzzy_threshold,
            theta: Some(theta),
        };
        config.validate()?;
        let mut preds = Vec::new();
        for (triples, doc) in raw.iter().zip(gold) {
            preds.extend(assemble_predictions(triples, doc, relations, &config, Some(&mut aligner)).predictions);
        }
        let aligned = preds
            .iter()
            .filter(|p| matches!(p.provenance, Provenance::AlignedOutOfDomain { .. }))
            .count() as u64;
        rows.push(SweepRow {
            theta,
            aligned,
            report: evaluate(&preds, gold, train)?,
        });
    }
    Ok(rows)
}

/// `theta  f1  aligned` rows for plotting.
pub fn format_sweep(rows: &[SweepRow]) -> String {
    let mut s = String::from("theta\tf1\tign_f1\taligned\n");
    for r in rows {
        s.push_str(&format!("{:.4}\t{:.6}\t{:.6}\t{}\n", r.theta, r.report.f1, r.report.ign_f1, r.aligned));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::align::Provenance;
    use crate::corpus::fixtures::{relations, two_docs};
    use crate::corpus::{Entity, GoldLabel, Mention};

    fn pred(doc: &str, h: usize, t: usize, r: &str) -> Prediction {
        Prediction {
            doc_id: doc.into(),
            head: h,
            tail: t,
            relation: r.into(),
            provenance: Provenance::InDomain,
        }
    }

    fn doc_with(id: &str, names: &[(&str, usize)], labels: &[(usize, usize, &str)]) -> Document {
        Document {
            doc_id: id.into(),
            sentences: vec![vec!["w".into(); 3]; 3],
            entities: names
                .iter()
                .enumerate()
                .map(|(i, (n, s))| Entity {
                    index: i,
                    entity_type: "X".into(),
                    mentions: vec![Mention { surface: n.to_string(), sent_id: *s, start: 0, end: 1 }],
                })
                .collect(),
            labels: labels
                .iter()
                .map(|(h, t, r)| GoldLabel { head: *h, tail: *t, relation: r.to_string() })
                .collect(),
            labels_visible: true,
        }
    }

    #[test]
    fn perfect_and_partial() {
        let docs = two_docs();
        let perfect = vec![pred("Ulm", 1, 2, "P17"), pred("Ulm", 1, 2, "P131")];
        let r = evaluate(&perfect, &docs, None).unwrap();
        assert_eq!((r.precision, r.recall, r.f1), (1.0, 1.0, 1.0));
        let r = evaluate(&perfect[..1], &docs, None).unwrap();
        assert_eq!((r.precision, r.recall), (1.0, 0.5));
        assert!((r.f1 - 2.0 / 3.0).abs() < 1e-15);
        let r = evaluate(&[], &docs, None).unwrap();
        assert_eq!((r.precision, r.recall, r.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn crafted_ign_case() {
        let train = vec![doc_with("tr", &[("A", 0), ("B", 0)], &[(0, 1, "P17")])];
        let facts = TrainFactSet::from_corpus(&train);
        let dev = vec![doc_with(
            "dv",
            &[("A", 0), ("B", 0), ("C", 1), ("D", 2)],
            &[(0, 1, "P17"), (1, 2, "P17"), (2, 3, "P17"), (0, 3, "P17")],
        )];
        let preds = vec![pred("dv", 0, 1, "P17"), pred("dv", 1, 2, "P17"), pred("dv", 3, 0, "P17")];
        let r = evaluate(&preds, &dev, Some(&facts)).unwrap();
        assert_eq!((r.correct, r.predicted, r.gold, r.correct_in_train), (2, 3, 4, 1));
        assert!((r.precision - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.recall, 0.5);
        assert_eq!(r.ign_precision, 0.5);
        assert_eq!(r.ign_f1, 0.5);
    }

    #[test]
    fn ign_denominator_zero_is_zero() {
        let r = MetricsReport::from_counts(2, 2, 2, 2);
        assert_eq!(r.ign_precision, 0.0);
    }

    #[test]
    fn in_train_lookup_is_case_exact() {
        let facts = TrainFactSet::from_corpus(&[doc_with("tr", &[("A", 0), ("B", 0)], &[(0, 1, "P17")])]);
        assert!(facts.contains("A", "P17", "B"));
        assert!(!facts.contains("a", "P17", "B"));
    }

    #[test]
    fn unknown_document_is_an_error() {
        assert!(matches!(evaluate(&[pred("nope", 0, 1, "P17")], &two_docs(), None), Err(Error::Validation(_))));
    }

    #[test]
    fn intra_inter_partition() {
        let dev = vec![doc_with("d", &[("A", 0), ("B", 0), ("C", 1)], &[(0, 1, "P17"), (0, 2, "P17")])];
        let both = vec![pred("d", 0, 1, "P17"), pred("d", 0, 2, "P17")];
        let s = intra_inter_f1(&both, &dev).unwrap();
        assert_eq!((s.intra.f1, s.inter.f1), (1.0, 1.0));
        assert_eq!(s.intra.gold + s.inter.gold, 2);
        let s = intra_inter_f1(&both[..1], &dev).unwrap();
        assert_eq!((s.intra.correct, s.inter.correct), (1, 0));
    }

    #[test]
    fn per_relation_order_and_omission() {
        let dev = vec![doc_with(
            "d",
            &[("A", 0), ("B", 0), ("C", 1)],
            &[(0, 1, "P131"), (0, 2, "P131"), (1, 2, "P17")],
        )];
        let rows = per_relation_f1(&[pred("d", 0, 1, "P131"), pred("d", 0, 2, "P131")], &dev, &relations()).unwrap();
        let got: Vec<(&str, u64, f64)> = rows.iter().map(|r| (r.relation.as_str(), r.gold, r.f1)).collect();
        assert_eq!(got, vec![("P131", 2, 1.0), ("P17", 1, 0.0)]);
    }

    #[test]
    fn binary_metrics() {
        let docs = two_docs();
        let m = rcp_binary_metrics(&[EntityPair::new("Ulm", 1, 2)], &docs);
        assert_eq!((m.precision, m.recall, m.f1), (1.0, 1.0, 1.0));
        let m = rcp_binary_metrics(&[], &docs);
        assert_eq!(m.recall, 0.0);
    }
}
