//! Generated corpora for smoke tests, demos and the acceptance suite.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Document, Entity, GoldLabel, Mention, RelationSet};

pub const BORDER: &str = "P47";

pub fn relations() -> RelationSet {
    RelationSet::new([
        ("P47", "shares border with"),
        ("P17", "country"),
        ("P131", "located in the administrative territorial entity"),
        ("P569", "date of birth"),
        ("P108", "employer"),
        ("P27", "country of citizenship"),
    ])
    .expect("static relation set is valid")
}

const SYLLABLES: &[&str] = &[
    "ka", "lo", "mi", "ren", "sa", "tor", "vel", "qui", "dan", "bo", "ez", "ul", "nor", "pha", "sti", "gra",
];

fn name(rng: &mut ChaCha8Rng) -> String {
    let n = rng.gen_range(2..=3);
    let mut s: String = (0..n).map(|_| *SYLLABLES.choose(rng).unwrap()).collect();
    s[..1].make_ascii_uppercase();
    s
}

const PLACES: &[&str] = &[
    "Avalon", "Brin", "Corvia", "Dalmor", "Estra", "Fenwick", "Galt", "Harrow", "Istan", "Jorvik", "Kell",
    "Lorn", "Mireth", "Norvale", "Ostra", "Pellam", "Quarn", "Rilla", "Sorrow", "Tamsin", "Ulden", "Varn",
];

/// Builds a document from sentences where each slot is either a plain
/// word or an entity mention (entity index, surface tokens).
struct Builder {
    doc_id: String,
    sentences: Vec<Vec<String>>,
    entities: Vec<Entity>,
    labels: Vec<GoldLabel>,
}

enum Slot<'a> {
    Word(&'a str),
    Mention(usize, &'a str),
}

impl Builder {
    fn new(doc_id: String) -> Self {
        Builder {
            doc_id,
            sentences: Vec::new(),
            entities: Vec::new(),
            labels: Vec::new(),
        }
    }

    fn entity(&mut self, entity_type: &str) -> usize {
        let index = self.entities.len();
        self.entities.push(Entity {
            index,
            mentions: Vec::new(),
            entity_type: entity_type.into(),
        });
        index
    }

    fn sentence(&mut self, slots: &[Slot<'_>]) {
        let sent_id = self.sentences.len();
        let mut toks = Vec::new();
        for s in slots {
            match *s {
                Slot::Word(w) => toks.push(w.to_string()),
                Slot::Mention(e, surface) => {
                    let start = toks.len();
                    toks.extend(surface.split_whitespace().map(String::from));
                    self.entities[e].mentions.push(Mention {
                        surface: surface.to_string(),
                        sent_id,
                        start,
                        end: toks.len(),
                    });
                }
            }
        }
        self.sentences.push(toks);
    }

    fn label(&mut self, head: usize, tail: usize, relation: &str) {
        self.labels.push(GoldLabel {
            head,
            tail,
            relation: relation.into(),
        });
    }

    fn finish(self) -> Document {
        Document {
            doc_id: self.doc_id,
            sentences: self.sentences,
            entities: self.entities,
            labels: self.labels,
            labels_visible: true,
        }
    }
}

/// Documents whose related pairs are separable from local context alone.
/// Each sentence introduces two fresh entities joined either by "borders"
/// (labelled [`BORDER`] in both directions) or by "and" (no relation).
/// Pairs from different sentences never relate.
pub fn separable_corpus(docs: usize, sentences_per_doc: usize, seed: u64) -> Vec<Document> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..docs)
        .map(|d| {
            let mut b = Builder::new(format!("sep{seed}-{d}"));
            for s in 0..sentences_per_doc {
                let (x, y) = (b.entity("LOC"), b.entity("LOC"));
                let (nx, ny) = (PLACES.choose(&mut rng).unwrap(), PLACES.choose(&mut rng).unwrap());
                // Alternate so every document holds both kinds.
                let related = if s < 2 { s == 0 } else { rng.gen_bool(0.5) };
                let verb = if related { "borders" } else { "and" };
                b.sentence(&[Slot::Mention(x, nx), Slot::Word(verb), Slot::Mention(y, ny), Slot::Word(".")]);
                if related {
                    b.label(x, y, BORDER);
                    b.label(y, x, BORDER);
                }
            }
            b.finish()
        })
        .collect()
}

/// Small documents with the awkward cases the prompt and alignment stages
/// must handle: several relations on one pair, names containing `|`,
/// entities sharing a display name, multi-token and repeated mentions.
pub fn toy_corpus(docs: usize, seed: u64) -> Vec<Document> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rels: Vec<String> = relations().ids().map(String::from).collect();
    (0..docs)
        .map(|d| {
            let mut b = Builder::new(format!("toy{seed}-{d}"));
            let n = rng.gen_range(3..=7);
            let mut names: Vec<String> = (0..n).map(|_| format!("{} {}", name(&mut rng), name(&mut rng))).collect();
            if d % 3 == 0 {
                names[1] = format!("{} | {}", name(&mut rng), name(&mut rng));
            }
            if d % 4 == 1 {
                names[2] = names[0].clone();
            }
            let ents: Vec<usize> = (0..n).map(|_| b.entity("MISC")).collect();
            let mut order = ents.clone();
            order.shuffle(&mut rng);
            for chunk in order.chunks(2) {
                let mut slots = vec![Slot::Word("Here")];
                for &e in chunk {
                    slots.push(Slot::Mention(e, &names[e]));
                    slots.push(Slot::Word("met"));
                }
                slots.push(Slot::Word("."));
                b.sentence(&slots);
            }
            // A second mention for the first entity.
            let again = names[ents[0]].clone();
            b.sentence(&[Slot::Word("Later"), Slot::Mention(ents[0], &again), Slot::Word("left"), Slot::Word(".")]);
            let mut seen = std::collections::BTreeSet::new();
            for _ in 0..rng.gen_range(1..=n) {
                let h = rng.gen_range(0..n);
                let t = rng.gen_range(0..n);
                if h == t {
                    continue;
                }
                let k = if rng.gen_bool(0.25) { 2 } else { 1 };
                for r in rels.choose_multiple(&mut rng, k) {
                    if seen.insert((h, t, r.clone())) {
                        b.label(h, t, r);
                    }
                }
            }
            b.finish()
        })
        .collect()
}
