use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use lmrc::align::{Provenance, Rejection, SubmissionRecord};
use lmrc::backend::{Backend, HttpBackend, Ledger, MockBackend, SystemClock};
use lmrc::corpus::{
    candidate_pairs, corpus_statistics, dump_documents, gold_pairs, load_documents, load_relation_set, Document,
    EntityPair, RelationSet,
};
use lmrc::eval::{
    evaluate, format_relation_table, format_sweep, intra_inter_f1, per_relation_f1, rcp_binary_metrics,
    threshold_sweep, TrainFactSet,
};
use lmrc::pipeline::{
    align_all, build_requests, expected_completions, parse_all, parse_responses, run_rc_stage, write_responses,
    RcStage,
};
use lmrc::prompting::{build_fewshot_exemplars, export_finetune_dataset, PromptMode};
use lmrc::rcp::train::score_corpus;
use lmrc::rcp::{parse_proposals, train_rcp, write_proposals, Checkpoint, HashingEncoder, RcpConfig};
use lmrc::synthetic;
use serde::Serialize;

use super::config::{read, require, require_file, BackendKind, PipelineConfig};
use super::manifest::{record_stage, StageFiles};
use super::{Cli, Command, Split};

pub const CHECKPOINT: &str = "checkpoint.json";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const PROPOSALS: &str = "proposals.jsonl";
pub const LEDGER: &str = "responses.ledger.jsonl";
pub const RESPONSES: &str = "responses.jsonl";

/// Some requests failed; everything else was written.
#[derive(Debug)]
pub struct Partial {
    pub failed: usize,
    pub total: usize,
}

impl fmt::Display for Partial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} of {} requests failed; rerun to retry them", self.failed, self.total)
    }
}

impl std::error::Error for Partial {}

pub fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<Partial>().is_some() {
        return 3;
    }
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<lmrc::Error>() {
            use lmrc::Error::*;
            return match err {
                Config(_) | Io { .. } | Format { .. } | Validation(_) | Checkpoint(_) => 2,
                _ => 1,
            };
        }
    }
    1
}

struct Stage {
    cfg: PipelineConfig,
    files: StageFiles,
    extra: serde_json::Map<String, serde_json::Value>,
}

impl Stage {
    fn out(&self, name: &str) -> PathBuf {
        self.cfg.output_dir.join(name)
    }

    fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
        let p = self.out(name);
        fs::write(&p, contents).with_context(|| format!("writing {}", p.display()))?;
        self.files.output(&p);
        Ok(p)
    }

    fn write_json(&mut self, name: &str, v: &impl Serialize) -> Result<PathBuf> {
        self.write(name, serde_json::to_string_pretty(v)? + "\n")
    }

    fn note(&mut self, key: &str, v: impl Serialize) {
        self.extra.insert(key.into(), serde_json::to_value(v).expect("plain data"));
    }

    fn relations(&mut self) -> Result<RelationSet> {
        let p = require("relations", &self.cfg.corpus.relations)?.to_path_buf();
        let rels = load_relation_set(&p)?;
        self.files.input(p);
        Ok(rels)
    }

    fn split(&mut self, split: Split, rels: &RelationSet) -> Result<Vec<Document>> {
        let (name, p) = match split {
            Split::Train => ("train corpus", &self.cfg.corpus.train),
            Split::Dev => ("dev corpus", &self.cfg.corpus.dev),
            Split::Test => ("test corpus", &self.cfg.corpus.test),
        };
        let p = require(name, p)?.to_path_buf();
        let docs = load_documents(&p, rels)?;
        self.files.input(p);
        Ok(docs)
    }

    fn input_file(&mut self, what: &str, explicit: Option<PathBuf>, default: &str) -> Result<(PathBuf, String)> {
        let p = explicit.unwrap_or_else(|| self.out(default));
        require_file(what, &p)?;
        let text = read(&p)?;
        self.files.input(&p);
        Ok((p, text))
    }
}

fn labelled(docs: &[Document], what: &str) -> Result<()> {
    if let Some(d) = docs.iter().find(|d| !d.labels_visible) {
        bail!(lmrc::Error::Contract(format!("{what} needs gold labels; {} has none", d.doc_id)));
    }
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.overrides.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    cli.overrides.apply(&mut cfg);
    cfg.propagate_seed();
    cfg.validate()?;

    if let Command::Synth { dir, train_docs, eval_docs } = &cli.command {
        return synth(dir, *train_docs, *eval_docs, cfg.seed);
    }

    fs::create_dir_all(&cfg.output_dir).with_context(|| format!("creating {}", cfg.output_dir.display()))?;
    let started = Instant::now();
    let mut st = Stage {
        cfg,
        files: StageFiles::default(),
        extra: serde_json::Map::new(),
    };
    let (name, outcome) = match cli.command {
        Command::TrainRcp => ("train-rcp", train(&mut st)),
        Command::Propose { checkpoint, split, tau } => ("propose", propose(&mut st, checkpoint, split, tau)),
        Command::RunRc {
            split,
            proposals,
            gold_pairs,
            fresh,
        } => ("run-rc", run_rc(&mut st, split, proposals, gold_pairs, fresh)),
        Command::Score { split, responses } => ("score", score(&mut st, split, responses)),
        Command::ExportFt { split, proposals } => ("export-ft", export_ft(&mut st, split, proposals)),
        Command::SweepTheta { split, responses, grid } => ("sweep-theta", sweep(&mut st, split, responses, grid)),
        Command::Stats => ("stats", stats(&mut st)),
        Command::Synth { .. } => unreachable!(),
    };
    let partial = match outcome {
        Ok(()) => None,
        Err(e) if e.downcast_ref::<Partial>().is_some() => Some(e),
        Err(e) => return Err(e),
    };
    let mut snapshot = serde_json::to_value(&st.cfg)?;
    if !st.extra.is_empty() {
        snapshot["stage"] = serde_json::Value::Object(std::mem::take(&mut st.extra));
    }
    record_stage(
        &st.cfg.output_dir,
        name,
        snapshot,
        &st.files,
        started.elapsed().as_millis() as u64,
    )?;
    partial.map_or(Ok(()), Err)
}

fn train(st: &mut Stage) -> Result<()> {
    let rels = st.relations()?;
    let train = st.split(Split::Train, &rels)?;
    let dev = match st.cfg.corpus.dev {
        Some(_) => st.split(Split::Dev, &rels)?,
        None => Vec::new(),
    };
    let mut encoder = HashingEncoder::new(st.cfg.encoder.clone())?;
    let outcome = train_rcp(&train, &dev, &mut encoder, &st.cfg.rcp)?;
    let ck = Checkpoint::new(&encoder, outcome.params, outcome.na_threshold, st.cfg.rcp.clone());
    st.write(CHECKPOINT, ck.to_json())?;
    let mut log = String::new();
    for r in &outcome.history {
        log.push_str(&serde_json::to_string(r)?);
        log.push('\n');
    }
    st.write(TRAIN_LOG, log)?;
    st.note("steps", outcome.steps);
    match &outcome.best {
        Some(b) => println!(
            "trained {} steps; best dev F1 {:.4} at step {} (threshold {:.2})",
            outcome.steps, b.dev.f1, b.step, outcome.na_threshold
        ),
        None => println!("trained {} steps; no dev evaluation", outcome.steps),
    }
    Ok(())
}

fn propose(st: &mut Stage, checkpoint: Option<PathBuf>, split: Split, tau_flag: Option<f64>) -> Result<()> {
    let (_, text) = st.input_file("checkpoint", checkpoint, CHECKPOINT)?;
    let ck = Checkpoint::from_json(&text)?;
    let encoder = ck.encoder.hashing_encoder()?;
    let rels = st.relations()?;
    let docs = st.split(split, &rels)?;
    let tau = tau_flag.unwrap_or(ck.na_threshold);
    if !(0.0..=1.0).contains(&tau) {
        bail!(lmrc::Error::Config(format!("threshold {tau} outside [0, 1]")));
    }
    let proposed: Vec<EntityPair> = score_corpus(&docs, &encoder, &ck.params)?
        .into_iter()
        .flatten()
        .filter(|p| p.na_probability.is_some_and(|v| v < tau))
        .collect();
    st.write(PROPOSALS, write_proposals(tau, &proposed))?;
    st.note("na_threshold", tau);
    let space: usize = docs.iter().map(|d| candidate_pairs(d).len()).sum();
    println!("proposed {} of {space} candidate pairs at threshold {tau}", proposed.len());
    if docs.iter().all(|d| d.labels_visible) {
        let m = rcp_binary_metrics(&proposed, &docs);
        println!("binary precision {:.4} recall {:.4} f1 {:.4}", m.precision, m.recall, m.f1);
        st.write_json("proposal_metrics.json", &m)?;
    }
    Ok(())
}

fn backend_for(st: &Stage, expected: impl FnOnce() -> Result<std::collections::HashMap<lmrc::backend::RequestTag, String>>, rels: &RelationSet) -> Result<Box<dyn Backend>> {
    Ok(match st.cfg.backend.kind {
        BackendKind::Mock => {
            let names = rels.names().map(String::from).collect();
            Box::new(MockBackend::new(st.cfg.backend.mock.clone(), expected()?, names)?)
        }
        BackendKind::Http => {
            let mut http = st.cfg.backend.http.clone();
            http.api_key = std::env::var(lmrc::backend::http::ENV_API_KEY).ok();
            Box::new(HttpBackend::new(http)?)
        }
    })
}

fn exemplars(st: &mut Stage, rels: &RelationSet) -> Result<String> {
    if st.cfg.prompt.n_shots == 0 {
        return Ok(String::new());
    }
    let train = st.split(Split::Train, rels)?;
    Ok(build_fewshot_exemplars(&train, rels, st.cfg.prompt.n_shots, &st.cfg.prompt, st.cfg.seed)?)
}

fn gold_relation_pairs(docs: &[Document]) -> Vec<EntityPair> {
    docs.iter()
        .flat_map(|d| gold_pairs(d).into_iter().map(|(h, t)| EntityPair::new(d.doc_id.clone(), h, t)))
        .collect()
}

#[derive(Serialize)]
struct RcReport<'a> {
    requests: usize,
    responses: usize,
    failed: Vec<FailedRequest<'a>>,
    truncated: Vec<String>,
    line_rejections: usize,
    alignment_rejections: usize,
    predictions: usize,
}

#[derive(Serialize)]
struct FailedRequest<'a> {
    tag: String,
    error: &'a str,
}

fn run_rc(st: &mut Stage, split: Split, proposals: Option<PathBuf>, gold: bool, fresh: bool) -> Result<()> {
    let rels = st.relations()?;
    let docs = st.split(split, &rels)?;
    let pairs = match (st.cfg.prompt.mode, gold) {
        (PromptMode::BaselineDocre, _) => docs.iter().flat_map(candidate_pairs).collect(),
        (PromptMode::RelationClassification, true) => {
            labelled(&docs, "--gold-pairs")?;
            gold_relation_pairs(&docs)
        }
        (PromptMode::RelationClassification, false) => {
            let (_, text) = st.input_file("proposals file", proposals, PROPOSALS)?;
            parse_proposals(&text)?.pairs
        }
    };
    let shots = exemplars(st, &rels)?;
    let backend = backend_for(
        st,
        || Ok(expected_completions(&build_requests(&docs, &pairs, &rels, &st.cfg.prompt, &shots)?)),
        &rels,
    )?;
    let ledger_path = st.out(LEDGER);
    if fresh && ledger_path.exists() {
        fs::remove_file(&ledger_path).with_context(|| format!("removing {}", ledger_path.display()))?;
    }
    let ledger = Ledger::open(&ledger_path)?;
    let resumed = ledger.len();
    let embedder = match st.cfg.alignment.theta {
        Some(_) => Some(st.cfg.embedder.build()?),
        None => None,
    };
    let batch = st.cfg.backend.batch();
    let stage = RcStage {
        relations: &rels,
        prompt: &st.cfg.prompt,
        alignment: &st.cfg.alignment,
        batch: &batch,
        embedder: embedder.as_deref(),
        max_tokens: st.cfg.backend.max_tokens,
    };
    let run = run_rc_stage(&stage, &docs, &pairs, &shots, backend.as_ref(), Some(&ledger), &SystemClock::default())?;
    drop(ledger);
    st.files.output(&ledger_path);
    st.write(RESPONSES, write_responses(&run.responses))?;
    let report = RcReport {
        requests: run.requests,
        responses: run.responses.records.len(),
        failed: run
            .failed
            .iter()
            .map(|(t, e)| FailedRequest {
                tag: t.to_string(),
                error: e,
            })
            .collect(),
        truncated: run.parsed.truncated.iter().map(ToString::to_string).collect(),
        line_rejections: run.parsed.rejections.len(),
        alignment_rejections: run.aligned.rejections.len(),
        predictions: run.aligned.predictions.len(),
    };
    st.write_json("rc_report.json", &report)?;
    st.note("backend", backend.name());
    st.note("resumed_from_ledger", resumed);
    println!(
        "{} requests over {} pairs: {} answered ({} from the ledger), {} failed, {} truncated",
        run.requests,
        pairs.len(),
        run.responses.records.len(),
        resumed.min(run.requests),
        run.failed.len(),
        run.parsed.truncated.len()
    );
    for (tag, e) in &run.failed {
        eprintln!("failed {tag}: {e}");
    }
    if !run.failed.is_empty() {
        bail!(Partial {
            failed: run.failed.len(),
            total: run.requests,
        });
    }
    Ok(())
}

fn train_facts(st: &mut Stage, rels: &RelationSet) -> Result<Option<TrainFactSet>> {
    match &st.cfg.corpus.train {
        Some(p) if p.exists() => Ok(Some(TrainFactSet::from_corpus(&st.split(Split::Train, rels)?))),
        _ => Ok(None),
    }
}

fn jsonl<T: Serialize>(items: &[T]) -> Result<String> {
    let mut s = String::new();
    for i in items {
        s.push_str(&serde_json::to_string(i)?);
        s.push('\n');
    }
    Ok(s)
}

fn score(st: &mut Stage, split: Split, responses: Option<PathBuf>) -> Result<()> {
    let rels = st.relations()?;
    let docs = st.split(split, &rels)?;
    labelled(&docs, "scoring")?;
    let train = train_facts(st, &rels)?;
    let (_, text) = st.input_file("responses file", responses, RESPONSES)?;
    let file = parse_responses(&text)?;
    let parsed = parse_all(&file.records, &docs, file.mode)?;
    let embedder = match st.cfg.alignment.theta {
        Some(_) => Some(st.cfg.embedder.build()?),
        None => None,
    };
    let aligned = align_all(&parsed.raw, &docs, &rels, &st.cfg.alignment, embedder.as_deref())?;
    let preds = &aligned.predictions;
    let report = evaluate(preds, &docs, train.as_ref())?;
    let split_scores = intra_inter_f1(preds, &docs)?;
    let per_rel = per_relation_f1(preds, &docs, &rels)?;
    let out_of_domain = preds
        .iter()
        .filter(|p| matches!(p.provenance, Provenance::AlignedOutOfDomain { .. }))
        .count();

    st.write_json("metrics.json", &report)?;
    st.write("metrics.txt", report.to_string())?;
    st.write("per_relation.tsv", format_relation_table(&per_rel))?;
    st.write_json("intra_inter.json", &split_scores)?;
    let submission: Vec<SubmissionRecord> = preds.iter().map(SubmissionRecord::from).collect();
    st.write_json("predictions.json", &submission)?;
    let rejections: Vec<&Rejection> = parsed.rejections.iter().chain(&aligned.rejections).collect();
    st.write("rejections.jsonl", jsonl(&rejections)?)?;
    st.note("ign_reference", train.is_some());
    print!("{report}");
    println!(
        "{} rejected lines, {} duplicates, {} aligned out of domain{}",
        rejections.len(),
        aligned.duplicates,
        out_of_domain,
        if train.is_some() { "" } else { "; no training corpus, so Ign equals the plain scores" }
    );
    Ok(())
}

fn export_ft(st: &mut Stage, split: Split, proposals: Option<PathBuf>) -> Result<()> {
    let rels = st.relations()?;
    let docs = st.split(split, &rels)?;
    let pairs = match proposals {
        Some(p) => {
            let (_, text) = st.input_file("proposals file", Some(p), PROPOSALS)?;
            Some(parse_proposals(&text)?.pairs)
        }
        None => None,
    };
    let records = export_finetune_dataset(&docs, &rels, &st.cfg.prompt, pairs.as_deref())?;
    st.write("finetune.jsonl", jsonl(&records)?)?;
    println!("{} fine-tuning records", records.len());
    Ok(())
}

fn default_grid() -> Vec<f64> {
    (0..=20).map(|i| i as f64 / 20.0).collect()
}

fn sweep(st: &mut Stage, split: Split, responses: Option<PathBuf>, grid: Vec<f64>) -> Result<()> {
    let rels = st.relations()?;
    let docs = st.split(split, &rels)?;
    labelled(&docs, "the sweep")?;
    let train = train_facts(st, &rels)?;
    let (_, text) = st.input_file("responses file", responses, RESPONSES)?;
    let file = parse_responses(&text)?;
    let parsed = parse_all(&file.records, &docs, file.mode)?;
    let grid = if grid.is_empty() { default_grid() } else { grid };
    if grid.windows(2).any(|w| w[0] > w[1]) {
        bail!(lmrc::Error::Config("theta grid must be ascending".into()));
    }
    let embedder = st.cfg.embedder.build()?;
    let rows = threshold_sweep(
        &parsed.raw,
        &docs,
        &rels,
        st.cfg.alignment.fuzzy_threshold,
        &grid,
        embedder.as_ref(),
        train.as_ref(),
    )?;
    let table = format_sweep(&rows);
    st.write("sweep.tsv", &table)?;
    print!("{table}");
    Ok(())
}

fn stats(st: &mut Stage) -> Result<()> {
    let rels = st.relations()?;
    let mut table = String::from("split\tdocuments\tcandidate_space\tna_pairs\trelation_pairs\tannotated_triples\n");
    let opt = |v: Option<u64>| v.map_or_else(|| "-".to_string(), |v| v.to_string());
    let mut any = false;
    for (split, name, p) in [
        (Split::Train, "train", st.cfg.corpus.train.clone()),
        (Split::Dev, "dev", st.cfg.corpus.dev.clone()),
        (Split::Test, "test", st.cfg.corpus.test.clone()),
    ] {
        if p.is_none() {
            continue;
        }
        any = true;
        let s = corpus_statistics(&st.split(split, &rels)?);
        table.push_str(&format!(
            "{name}\t{}\t{}\t{}\t{}\t{}\n",
            s.documents,
            s.candidate_space,
            opt(s.na_pairs),
            opt(s.relation_pairs),
            opt(s.annotated_triples)
        ));
    }
    if !any {
        bail!(lmrc::Error::Config("no corpus paths configured".into()));
    }
    st.write("stats.tsv", &table)?;
    print!("{table}");
    Ok(())
}

fn synth(dir: &Path, train_docs: usize, eval_docs: usize, seed: u64) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let rels = synthetic::relations();
    let info: serde_json::Map<String, serde_json::Value> =
        rels.iter().map(|(id, name)| (id.to_string(), name.into())).collect();
    let write = |name: &str, text: String| -> Result<()> {
        let p = dir.join(name);
        fs::write(&p, text).with_context(|| format!("writing {}", p.display()))
    };
    write("rel_info.json", serde_json::to_string_pretty(&info)? + "\n")?;
    write("train.jsonl", dump_documents(&synthetic::separable_corpus(train_docs, 5, seed)))?;
    write("dev.jsonl", dump_documents(&synthetic::separable_corpus(eval_docs, 5, seed + 1)))?;
    write("test.jsonl", dump_documents(&synthetic::separable_corpus(eval_docs, 5, seed + 2)))?;

    let mut cfg = PipelineConfig {
        seed,
        ..Default::default()
    };
    cfg.corpus.train = Some("train.jsonl".into());
    cfg.corpus.dev = Some("dev.jsonl".into());
    cfg.corpus.test = Some("test.jsonl".into());
    cfg.corpus.relations = Some("rel_info.json".into());
    // The hashing encoder starts from random features, so the tiny corpus
    // needs far larger steps than a pretrained encoder would.
    cfg.rcp = RcpConfig {
        lr_head: 3e-2,
        lr_encoder: 1e-2,
        epochs: 100,
        max_steps: Some(200),
        eval_every: Some(20),
        ..RcpConfig::default()
    };
    cfg.prompt.k = 4;
    cfg.propagate_seed();
    write("lmrc.toml", cfg.to_toml())?;
    println!("wrote a synthetic corpus and lmrc.toml to {}", dir.display());
    Ok(())
}
