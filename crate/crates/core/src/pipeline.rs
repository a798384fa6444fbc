//! The relation-classification stage from proposals to aligned predictions,
//! and the responses file that connects generation to scoring.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::align::{
    assemble_predictions, parse_response, AlignmentConfig, Embedder, OodAligner, Prediction, RawTriple,
    RelationEmbeddings, Rejection,
};
use crate::backend::{generate_batch, Backend, BatchOptions, Clock, FinishReason, GenerationRequest, Ledger, RequestTag};
use crate::corpus::{Document, EntityPair, RelationSet};
use crate::error::{Error, Result};
use crate::prompting::{build_document_prompts, PromptConfig, PromptInstance, PromptMode};

/// Prompts for every document, in corpus order then chunk order. Documents
/// without pairs get no prompt.
pub fn build_requests(
    docs: &[Document],
    pairs: &[EntityPair],
    relations: &RelationSet,
    config: &PromptConfig,
    exemplars: &str,
) -> Result<Vec<PromptInstance>> {
    let mut by_doc: HashMap<&str, Vec<EntityPair>> = HashMap::new();
    for p in pairs {
        by_doc.entry(p.doc_id.as_str()).or_default().push(p.clone());
    }
    let known: HashSet<&str> = docs.iter().map(|d| d.doc_id.as_str()).collect();
    if let Some(unknown) = by_doc.keys().find(|k| !known.contains(*k)) {
        return Err(Error::Validation(format!("pairs reference unknown document {unknown:?}")));
    }
    let mut out = Vec::new();
    for d in docs {
        if let Some(ps) = by_doc.get_mut(d.doc_id.as_str()) {
            ps.sort_by_key(|p| (p.head, p.tail));
            ps.dedup_by_key(|p| (p.head, p.tail));
            out.extend(build_document_prompts(d, ps, relations, config, exemplars)?);
        }
    }
    Ok(out)
}

/// Expected completions keyed by request tag, for a gold-echo mock.
pub fn expected_completions(prompts: &[PromptInstance]) -> HashMap<RequestTag, String> {
    prompts
        .iter()
        .filter_map(|p| {
            p.expected_completion
                .as_ref()
                .map(|c| (RequestTag::new(p.doc_id.clone(), p.chunk_index), c.clone()))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseRecord {
    pub tag: RequestTag,
    pub text: String,
    pub finish_reason: FinishReason,
}

const RESPONSES_FORMAT: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ResponseHeader {
    lmrc_responses: u32,
    mode: PromptMode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResponseFile {
    pub mode: PromptMode,
    pub records: Vec<ResponseRecord>,
}

/// Header line with the prompt mode, then one record per line.
pub fn write_responses(file: &ResponseFile) -> String {
    let header = ResponseHeader {
        lmrc_responses: RESPONSES_FORMAT,
        mode: file.mode,
    };
    let mut out = serde_json::to_string(&header).expect("plain data");
    out.push('\n');
    for r in &file.records {
        out.push_str(&serde_json::to_string(r).expect("plain data"));
        out.push('\n');
    }
    out
}

pub fn parse_responses(text: &str) -> Result<ResponseFile> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let err = |line: usize, field: &str, message: String| Error::Format {
        doc_index: line,
        field: field.into(),
        message,
    };
    let (i, first) = lines.next().ok_or_else(|| err(0, "header", "missing responses header".into()))?;
    let header: ResponseHeader = serde_json::from_str(first).map_err(|e| err(i, "header", e.to_string()))?;
    if header.lmrc_responses != RESPONSES_FORMAT {
        return Err(err(i, "lmrc_responses", format!("unsupported version {}", header.lmrc_responses)));
    }
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in lines {
        let r: ResponseRecord = serde_json::from_str(line).map_err(|e| err(i, "record", e.to_string()))?;
        if !seen.insert(r.tag.clone()) {
            return Err(err(i, "tag", format!("duplicate response for {}", r.tag)));
        }
        records.push(r);
    }
    Ok(ResponseFile {
        mode: header.mode,
        records,
    })
}

/// Parsed responses grouped by document (corpus order), plus line-level
/// rejections and the tags of truncated outputs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParsedResponses {
    pub raw: Vec<Vec<RawTriple>>,
    pub rejections: Vec<Rejection>,
    pub truncated: Vec<RequestTag>,
}

pub fn parse_all(records: &[ResponseRecord], docs: &[Document], mode: PromptMode) -> Result<ParsedResponses> {
    let pos: HashMap<&str, usize> = docs.iter().enumerate().map(|(i, d)| (d.doc_id.as_str(), i)).collect();
    let mut out = ParsedResponses {
        raw: vec![Vec::new(); docs.len()],
        ..Default::default()
    };
    for r in records {
        let &i = pos
            .get(r.tag.doc_id.as_str())
            .ok_or_else(|| Error::Validation(format!("response {} names an unknown document", r.tag)))?;
        if r.finish_reason == FinishReason::Length {
            out.truncated.push(r.tag.clone());
        }
        let (triples, bad) = parse_response(&r.text, &r.tag.doc_id, r.tag.chunk_index, mode);
        out.raw[i].extend(triples);
        out.rejections.extend(bad.into_iter().map(Rejection::from));
    }
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Aligned {
    pub predictions: Vec<Prediction>,
    pub rejections: Vec<Rejection>,
    pub duplicates: usize,
}

/// Aligns the raw triples of each document. `embedder` is required when
/// the configuration sets θ.
pub fn align_all(
    raw: &[Vec<RawTriple>],
    docs: &[Document],
    relations: &RelationSet,
    config: &AlignmentConfig,
    embedder: Option<&dyn Embedder>,
) -> Result<Aligned> {
    config.validate()?;
    let index = match (config.theta, embedder) {
        (Some(_), Some(e)) => Some(RelationEmbeddings::build(relations, e)?),
        (Some(_), None) => return Err(Error::Config("theta is set but no embedder was given".into())),
        _ => None,
    };
    let mut aligner = match (&index, embedder) {
        (Some(i), Some(e)) => Some(OodAligner::new(e, i)),
        _ => None,
    };
    let mut out = Aligned::default();
    for (d, triples) in docs.iter().zip(raw) {
        let a = assemble_predictions(triples, d, relations, config, aligner.as_mut());
        out.predictions.extend(a.predictions);
        out.rejections.extend(a.rejections);
        out.duplicates += a.duplicates;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RcRun {
    pub requests: usize,
    /// Successful responses in request order.
    pub responses: ResponseFile,
    /// Requests that failed; their pairs contribute no predictions.
    pub failed: Vec<(RequestTag, String)>,
    pub parsed: ParsedResponses,
    pub aligned: Aligned,
}

pub struct RcStage<'a> {
    pub relations: &'a RelationSet,
    pub prompt: &'a PromptConfig,
    pub alignment: &'a AlignmentConfig,
    pub batch: &'a BatchOptions,
    pub embedder: Option<&'a dyn Embedder>,
    pub max_tokens: u32,
}

/// Sends the prompts of `docs` and `pairs` to `backend` and aligns the
/// responses.
pub fn run_rc_stage(
    stage: &RcStage<'_>,
    docs: &[Document],
    pairs: &[EntityPair],
    exemplars: &str,
    backend: &dyn Backend,
    ledger: Option<&Ledger>,
    clock: &dyn Clock,
) -> Result<RcRun> {
    stage.alignment.validate()?;
    if stage.alignment.theta.is_some() && stage.embedder.is_none() {
        return Err(Error::Config("theta is set but no embedder was given".into()));
    }
    let prompts = build_requests(docs, pairs, stage.relations, stage.prompt, exemplars)?;
    let requests: Vec<GenerationRequest> = prompts
        .iter()
        .map(|p| {
            let mut r = GenerationRequest::new(p.text.clone(), RequestTag::new(p.doc_id.clone(), p.chunk_index));
            r.max_tokens = stage.max_tokens;
            r
        })
        .collect();
    let report = generate_batch(backend, &requests, stage.batch, ledger, clock)?;
    let mut records = Vec::new();
    let mut failed = Vec::new();
    for (req, res) in requests.iter().zip(report.results) {
        match res {
            Ok(r) => records.push(ResponseRecord {
                tag: req.tag.clone(),
                text: r.text,
                finish_reason: r.finish_reason,
            }),
            Err(e) => failed.push((req.tag.clone(), e.to_string())),
        }
    }
    let parsed = parse_all(&records, docs, stage.prompt.mode)?;
    let aligned = align_all(&parsed.raw, docs, stage.relations, stage.alignment, stage.embedder)?;
    Ok(RcRun {
        requests: requests.len(),
        responses: ResponseFile {
            mode: stage.prompt.mode,
            records,
        },
        failed,
        parsed,
        aligned,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{FakeClock, MockBackend, MockScript};
    use crate::corpus::candidate_pairs;
    use crate::corpus::fixtures::{relations, two_docs};
    use crate::eval::evaluate;

    fn stage<'a>(rels: &'a RelationSet, prompt: &'a PromptConfig, alignment: &'a AlignmentConfig) -> RcStage<'a> {
        static BATCH: std::sync::OnceLock<BatchOptions> = std::sync::OnceLock::new();
        RcStage {
            relations: rels,
            prompt,
            alignment,
            batch: BATCH.get_or_init(BatchOptions::default),
            embedder: None,
            max_tokens: 256,
        }
    }

    #[test]
    fn gold_echo_over_all_pairs_is_perfect() {
        let docs = two_docs();
        let rels = relations();
        let pairs: Vec<EntityPair> = docs.iter().flat_map(candidate_pairs).collect();
        let prompt = PromptConfig { k: 2, ..Default::default() };
        let prompts = build_requests(&docs, &pairs, &rels, &prompt, "").unwrap();
        assert_eq!(prompts.len(), 3);
        let names = rels.names().map(String::from).collect();
        let mock = MockBackend::new(MockScript::default(), expected_completions(&prompts), names).unwrap();
        let alignment = AlignmentConfig::default();
        let run = run_rc_stage(&stage(&rels, &prompt, &alignment), &docs, &pairs, "", &mock, None, &FakeClock::default())
            .unwrap();
        assert_eq!(run.requests, 3);
        assert!(run.failed.is_empty() && run.parsed.rejections.is_empty() && run.aligned.rejections.is_empty());
        assert_eq!(evaluate(&run.aligned.predictions, &docs, None).unwrap().f1, 1.0);

        // Rescoring from the written file gives the same predictions.
        let file = parse_responses(&write_responses(&run.responses)).unwrap();
        assert_eq!(file, run.responses);
        let parsed = parse_all(&file.records, &docs, file.mode).unwrap();
        let again = align_all(&parsed.raw, &docs, &rels, &alignment, None).unwrap();
        assert_eq!(again, run.aligned);
    }

    #[test]
    fn theta_without_embedder_is_a_config_error() {
        let docs = two_docs();
        let rels = relations();
        let prompt = PromptConfig::default();
        let alignment = AlignmentConfig { theta: Some(0.5), ..Default::default() };
        let mock = MockBackend::new(MockScript::default(), HashMap::new(), vec![]).unwrap();
        let r = run_rc_stage(&stage(&rels, &prompt, &alignment), &docs, &[], "", &mock, None, &FakeClock::default());
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn responses_file_rejects_bad_input() {
        assert!(parse_responses("").is_err());
        assert!(parse_responses("{\"lmrc_responses\":2,\"mode\":\"baseline_docre\"}").is_err());
        let rec = r#"{"tag":{"doc_id":"a","chunk_index":0},"text":"","finish_reason":"stop"}"#;
        let twice = format!("{{\"lmrc_responses\":1,\"mode\":\"baseline_docre\"}}\n{rec}\n{rec}\n");
        assert!(parse_responses(&twice).is_err());
    }

    #[test]
    fn unknown_document_in_responses() {
        let rec = ResponseRecord {
            tag: RequestTag::new("nope", 0),
            text: String::new(),
            finish_reason: FinishReason::Stop,
        };
        assert!(parse_all(&[rec], &two_docs(), PromptMode::RelationClassification).is_err());
    }
}
