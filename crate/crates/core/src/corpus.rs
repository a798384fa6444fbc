//! Documents, entities, relation inventories and the ordered candidate space.
//!
//! Input is the DocRED interchange format: a JSON array (or one JSON object
//! per line) of documents with `title`, `sents`, `vertexSet` and `labels`.
//! Documents are validated when they are loaded, so everything downstream may
//! assume the invariants on [`Document`] hold.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A mention of an entity: a token span `[start, end)` inside one sentence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mention {
    pub surface: String,
    pub sent_id: usize,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entity {
    pub index: usize,
    pub mentions: Vec<Mention>,
    pub entity_type: String,
}

impl Entity {
    /// Longest mention surface, first occurrence on ties.
    pub fn display_name(&self) -> &str {
        let mut best = &self.mentions[0].surface;
        for m in &self.mentions[1..] {
            if m.surface.chars().count() > best.chars().count() {
                best = &m.surface;
            }
        }
        best
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct GoldLabel {
    pub head: usize,
    pub tail: usize,
    pub relation: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub doc_id: String,
    pub sentences: Vec<Vec<String>>,
    pub entities: Vec<Entity>,
    pub labels: Vec<GoldLabel>,
    /// False when the split hides its annotations (no `labels` key).
    pub labels_visible: bool,
}

/// A (head, tail, relation) fact inside one document.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Triple {
    pub head: usize,
    pub tail: usize,
    pub relation: String,
}

/// An ordered candidate pair, optionally scored by the proposal model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityPair {
    pub doc_id: String,
    pub head: usize,
    pub tail: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub na_probability: Option<f64>,
}

impl EntityPair {
    pub fn new(doc_id: impl Into<String>, head: usize, tail: usize) -> Self {
        EntityPair {
            doc_id: doc_id.into(),
            head,
            tail,
            na_probability: None,
        }
    }
}

impl Document {
    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    /// Sentences joined by single spaces, tokens joined by single spaces.
    pub fn text(&self) -> String {
        self.sentences
            .iter()
            .map(|s| s.join(" "))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Mentions whose `surface` differs from the joined span tokens.
    ///
    /// Released DocRED files contain a handful of these (the `name` field is
    /// taken from the knowledge base rather than the tokenization), so they
    /// are reported rather than rejected.
    pub fn surface_mismatches(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for e in &self.entities {
            for (j, m) in e.mentions.iter().enumerate() {
                let joined = self.sentences[m.sent_id][m.start..m.end].join(" ");
                if joined != m.surface {
                    out.push((e.index, j));
                }
            }
        }
        out
    }

    /// Checks every structural invariant, naming the first offender.
    pub fn validate(&self, relations: &RelationSet) -> Result<()> {
        let id = &self.doc_id;
        for (i, e) in self.entities.iter().enumerate() {
            if e.index != i {
                return Err(Error::Validation(format!(
                    "{id}: entity at position {i} carries index {}",
                    e.index
                )));
            }
            if e.mentions.is_empty() {
                return Err(Error::Validation(format!("{id}: entity {i} has no mentions")));
            }
            for (j, m) in e.mentions.iter().enumerate() {
                let Some(sent) = self.sentences.get(m.sent_id) else {
                    return Err(Error::Validation(format!(
                        "{id}: entity {i} mention {j} ({:?}) refers to sentence {} of {}",
                        m.surface,
                        m.sent_id,
                        self.sentences.len()
                    )));
                };
                if m.start >= m.end {
                    return Err(Error::Validation(format!(
                        "{id}: entity {i} mention {j} ({:?}) has empty span [{}, {})",
                        m.surface, m.start, m.end
                    )));
                }
                if m.end > sent.len() {
                    return Err(Error::Validation(format!(
                        "{id}: entity {i} mention {j} ({:?}) span [{}, {}) exceeds sentence {} of length {}",
                        m.surface,
                        m.start,
                        m.end,
                        m.sent_id,
                        sent.len()
                    )));
                }
            }
        }
        let n = self.entities.len();
        for (k, l) in self.labels.iter().enumerate() {
            if l.head >= n || l.tail >= n {
                return Err(Error::Validation(format!(
                    "{id}: label {k} ({}, {}) references an entity outside 0..{n}",
                    l.head, l.tail
                )));
            }
            if l.head == l.tail {
                return Err(Error::Validation(format!(
                    "{id}: label {k} is a self-loop on entity {}",
                    l.head
                )));
            }
            if !relations.contains(&l.relation) {
                return Err(Error::Validation(format!(
                    "{id}: label {k} uses unknown relation id {:?}",
                    l.relation
                )));
            }
        }
        Ok(())
    }
}

/// Normalizes a relation display name for lookup: collapsed whitespace, case-folded.
pub fn fold_name(s: &str) -> String {
    s.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

/// The predefined relation inventory, in file order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelationSet {
    entries: Vec<(String, String)>,
    by_id: HashMap<String, usize>,
    by_folded_name: HashMap<String, usize>,
}

impl RelationSet {
    pub fn new<I, A, B>(entries: I) -> Result<Self>
    where
        I: IntoIterator<Item = (A, B)>,
        A: Into<String>,
        B: Into<String>,
    {
        let mut set = RelationSet {
            entries: Vec::new(),
            by_id: HashMap::new(),
            by_folded_name: HashMap::new(),
        };
        for (id, name) in entries {
            let (id, name) = (id.into(), name.into());
            let folded = fold_name(&name);
            if folded.is_empty() {
                return Err(Error::Validation(format!("relation {id:?} has an empty name")));
            }
            if is_na_token(&id) || is_na_token(&folded) {
                return Err(Error::Validation(format!(
                    "relation {id:?} ({name:?}) collides with the no-relation sentinel"
                )));
            }
            let pos = set.entries.len();
            if set.by_id.insert(id.clone(), pos).is_some() {
                return Err(Error::Validation(format!("duplicate relation id {id:?}")));
            }
            if set.by_folded_name.insert(folded, pos).is_some() {
                return Err(Error::Validation(format!(
                    "duplicate relation name {name:?} (case-insensitive)"
                )));
            }
            set.entries.push((id, name));
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.by_id.contains_key(id)
    }

    pub fn name(&self, id: &str) -> Option<&str> {
        self.by_id.get(id).map(|&i| self.entries[i].1.as_str())
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.by_id.get(id).copied()
    }

    /// Case- and whitespace-insensitive lookup of a display name.
    pub fn id_by_name(&self, name: &str) -> Option<&str> {
        self.by_folded_name
            .get(&fold_name(name))
            .map(|&i| self.entries[i].0.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(a, b)| (a.as_str(), b.as_str()))
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(a, _)| a.as_str())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(_, b)| b.as_str())
    }
}

pub(crate) fn is_na_token(s: &str) -> bool {
    let t = s.trim();
    t.eq_ignore_ascii_case("na") || t.eq_ignore_ascii_case("none")
}

// DocRED wire format.

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawMention {
    name: String,
    sent_id: i64,
    pos: Vec<i64>,
    #[serde(rename = "type", default)]
    entity_type: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawLabel {
    h: i64,
    t: i64,
    r: String,
    #[serde(default, skip_serializing)]
    #[allow(dead_code)]
    evidence: Option<Vec<i64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawDocument {
    title: String,
    sents: Vec<Vec<String>>,
    #[serde(rename = "vertexSet")]
    vertex_set: Vec<Vec<RawMention>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    labels: Option<Vec<RawLabel>>,
}

fn to_index(v: i64, what: &str, doc_id: &str) -> Result<usize> {
    usize::try_from(v)
        .map_err(|_| Error::Validation(format!("{doc_id}: negative {what} {v}")))
}

impl RawDocument {
    fn into_document(self, relations: &RelationSet) -> Result<Document> {
        let doc_id = self.title;
        let mut entities = Vec::with_capacity(self.vertex_set.len());
        for (i, raw_mentions) in self.vertex_set.into_iter().enumerate() {
            let entity_type = raw_mentions
                .first()
                .map(|m| m.entity_type.clone())
                .unwrap_or_default();
            let mut mentions = Vec::with_capacity(raw_mentions.len());
            for (j, m) in raw_mentions.into_iter().enumerate() {
                if m.pos.len() != 2 {
                    return Err(Error::Validation(format!(
                        "{doc_id}: entity {i} mention {j} ({:?}) has pos of length {}",
                        m.name,
                        m.pos.len()
                    )));
                }
                mentions.push(Mention {
                    sent_id: to_index(m.sent_id, "sent_id", &doc_id)?,
                    start: to_index(m.pos[0], "span start", &doc_id)?,
                    end: to_index(m.pos[1], "span end", &doc_id)?,
                    surface: m.name,
                });
            }
            entities.push(Entity {
                index: i,
                mentions,
                entity_type,
            });
        }
        let labels_visible = self.labels.is_some();
        let labels = self
            .labels
            .unwrap_or_default()
            .into_iter()
            .map(|l| {
                Ok(GoldLabel {
                    head: to_index(l.h, "label head", &doc_id)?,
                    tail: to_index(l.t, "label tail", &doc_id)?,
                    relation: l.r,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let doc = Document {
            doc_id,
            sentences: self.sents,
            entities,
            labels,
            labels_visible,
        };
        doc.validate(relations)?;
        Ok(doc)
    }

    fn from_document(doc: &Document) -> Self {
        RawDocument {
            title: doc.doc_id.clone(),
            sents: doc.sentences.clone(),
            vertex_set: doc
                .entities
                .iter()
                .map(|e| {
                    e.mentions
                        .iter()
                        .map(|m| RawMention {
                            name: m.surface.clone(),
                            sent_id: m.sent_id as i64,
                            pos: vec![m.start as i64, m.end as i64],
                            entity_type: e.entity_type.clone(),
                        })
                        .collect()
                })
                .collect(),
            labels: doc.labels_visible.then(|| {
                doc.labels
                    .iter()
                    .map(|l| RawLabel {
                        h: l.head as i64,
                        t: l.tail as i64,
                        r: l.relation.clone(),
                        evidence: None,
                    })
                    .collect()
            }),
        }
    }
}

fn parse_one(value: serde_json::Value, doc_index: usize, relations: &RelationSet) -> Result<Document> {
    let raw: RawDocument = serde_path_to_error::deserialize(value).map_err(|e| Error::Format {
        doc_index,
        field: e.path().to_string(),
        message: e.inner().to_string(),
    })?;
    raw.into_document(relations)
}

/// Parses documents from either a JSON array or line-delimited JSON objects.
pub fn parse_documents(text: &str, relations: &RelationSet) -> Result<Vec<Document>> {
    let trimmed = text.trim_start();
    if trimmed.starts_with('[') {
        let values: Vec<serde_json::Value> =
            serde_json::from_str(trimmed).map_err(|e| Error::Format {
                doc_index: 0,
                field: ".".into(),
                message: e.to_string(),
            })?;
        values
            .into_iter()
            .enumerate()
            .map(|(i, v)| parse_one(v, i, relations))
            .collect()
    } else {
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(i, line)| {
                let v: serde_json::Value =
                    serde_json::from_str(line).map_err(|e| Error::Format {
                        doc_index: i,
                        field: ".".into(),
                        message: e.to_string(),
                    })?;
                parse_one(v, i, relations)
            })
            .collect()
    }
}

/// Parses a relation-info object mapping relation id to display name.
pub fn parse_relation_set(text: &str) -> Result<RelationSet> {
    let map: IndexMap<String, String> = serde_json::from_str(text).map_err(|e| Error::Format {
        doc_index: 0,
        field: "rel_info".into(),
        message: e.to_string(),
    })?;
    RelationSet::new(map)
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn load_relation_set(path: impl AsRef<Path>) -> Result<RelationSet> {
    parse_relation_set(&read(path.as_ref())?)
}

pub fn load_documents(path: impl AsRef<Path>, relations: &RelationSet) -> Result<Vec<Document>> {
    parse_documents(&read(path.as_ref())?, relations)
}

pub fn load_corpus(
    path: impl AsRef<Path>,
    relation_info_path: impl AsRef<Path>,
) -> Result<(Vec<Document>, RelationSet)> {
    let relations = load_relation_set(relation_info_path)?;
    let docs = load_documents(path, &relations)?;
    Ok((docs, relations))
}

/// Canonical dump: one DocRED-shaped JSON object per line.
pub fn dump_documents(docs: &[Document]) -> String {
    let mut out = String::new();
    for d in docs {
        out.push_str(&serde_json::to_string(&RawDocument::from_document(d)).expect("plain data"));
        out.push('\n');
    }
    out
}

/// All ordered pairs, head ascending then tail ascending.
pub fn candidate_pairs(doc: &Document) -> Vec<EntityPair> {
    let n = doc.num_entities();
    let mut out = Vec::with_capacity(n * n.saturating_sub(1));
    for h in 0..n {
        for t in 0..n {
            if h != t {
                out.push(EntityPair::new(doc.doc_id.clone(), h, t));
            }
        }
    }
    out
}

pub fn gold_triples(doc: &Document) -> BTreeSet<Triple> {
    doc.labels
        .iter()
        .map(|l| Triple {
            head: l.head,
            tail: l.tail,
            relation: l.relation.clone(),
        })
        .collect()
}

/// Distinct ordered pairs carrying at least one gold label.
pub fn gold_pairs(doc: &Document) -> BTreeSet<(usize, usize)> {
    doc.labels.iter().map(|l| (l.head, l.tail)).collect()
}

/// Candidate-space statistics. Label-derived counts are `None` when any
/// document hides its labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub documents: u64,
    pub candidate_space: u64,
    pub na_pairs: Option<u64>,
    pub relation_pairs: Option<u64>,
    pub annotated_triples: Option<u64>,
}

pub fn corpus_statistics(corpus: &[Document]) -> CorpusStats {
    let mut candidate_space = 0u64;
    let mut relation_pairs = 0u64;
    let mut triples = 0u64;
    let mut visible = true;
    for d in corpus {
        let n = d.num_entities() as u64;
        candidate_space += n * n.saturating_sub(1);
        visible &= d.labels_visible;
        relation_pairs += gold_pairs(d).len() as u64;
        triples += gold_triples(d).len() as u64;
    }
    CorpusStats {
        documents: corpus.len() as u64,
        candidate_space,
        na_pairs: visible.then(|| candidate_space - relation_pairs),
        relation_pairs: visible.then_some(relation_pairs),
        annotated_triples: visible.then_some(triples),
    }
}

impl fmt::Display for CorpusStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let opt = |v: Option<u64>| v.map_or_else(|| "-".to_string(), |v| v.to_string());
        writeln!(f, "documents\t{}", self.documents)?;
        writeln!(f, "candidate_space\t{}", self.candidate_space)?;
        writeln!(f, "na_pairs\t{}", opt(self.na_pairs))?;
        writeln!(f, "relation_pairs\t{}", opt(self.relation_pairs))?;
        write!(f, "annotated_triples\t{}", opt(self.annotated_triples))
    }
}

/// Index from doc id to position, rejecting duplicate titles.
pub fn index_by_id(docs: &[Document]) -> Result<HashMap<&str, usize>> {
    let mut seen = HashSet::new();
    let mut out = HashMap::with_capacity(docs.len());
    for (i, d) in docs.iter().enumerate() {
        if !seen.insert(d.doc_id.as_str()) {
            return Err(Error::Validation(format!("duplicate document title {:?}", d.doc_id)));
        }
        out.insert(d.doc_id.as_str(), i);
    }
    Ok(out)
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    pub fn relations() -> RelationSet {
        RelationSet::new([
            ("P17", "country"),
            ("P131", "located in the administrative territorial entity"),
            ("P569", "date of birth"),
            ("P108", "employer"),
        ])
        .unwrap()
    }

    pub const TWO_DOCS: &str = r#"[
      {"title": "Ulm",
       "sents": [["Albert", "Einstein", "was", "born", "in", "Ulm", "."],
                 ["Ulm", "lies", "in", "Germany", "."]],
       "vertexSet": [
         [{"name": "Albert Einstein", "sent_id": 0, "pos": [0, 2], "type": "PER"}],
         [{"name": "Ulm", "sent_id": 0, "pos": [5, 6], "type": "LOC"},
          {"name": "Ulm", "sent_id": 1, "pos": [0, 1], "type": "LOC"}],
         [{"name": "Germany", "sent_id": 1, "pos": [3, 4], "type": "LOC"}]
       ],
       "labels": [{"h": 1, "t": 2, "r": "P17", "evidence": [1]},
                  {"h": 1, "t": 2, "r": "P131", "evidence": [1]}]},
      {"title": "Empty",
       "sents": [["Nothing", "here", "."]],
       "vertexSet": [[{"name": "Nothing", "sent_id": 0, "pos": [0, 1], "type": "MISC"}]],
       "labels": []}
    ]"#;

    pub fn two_docs() -> Vec<Document> {
        parse_documents(TWO_DOCS, &relations()).unwrap()
    }
}
