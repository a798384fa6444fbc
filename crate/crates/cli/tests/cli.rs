use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::thread;

use lmrc::corpus::{candidate_pairs, gold_pairs, load_documents, load_relation_set, Document};
use serde_json::Value;
use tempfile::TempDir;

fn lmrc(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lmrc"))
        .current_dir(dir)
        .args(args)
        .env_remove("LMRC_API_KEY")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let o = lmrc(dir, args);
    assert!(
        o.status.success(),
        "lmrc {args:?} failed with {:?}\n{}",
        o.status.code(),
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn synth() -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["synth", "--dir", ".", "--train-docs", "12", "--eval-docs", "6"]);
    dir
}

fn with_config<'a>(args: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec!["--config", "lmrc.toml"];
    v.extend_from_slice(args);
    v
}

fn docs(dir: &Path, name: &str) -> Vec<Document> {
    let rels = load_relation_set(dir.join("rel_info.json")).unwrap();
    load_documents(dir.join(name), &rels).unwrap()
}

fn json(p: PathBuf) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

fn lines(p: PathBuf) -> usize {
    fs::read_to_string(p).unwrap().lines().filter(|l| !l.trim().is_empty()).count()
}

fn out(dir: &Path, name: &str) -> PathBuf {
    dir.join("out").join(name)
}

#[test]
fn train_is_deterministic_and_logs_dev_f1() {
    let d = synth();
    let p = d.path();
    let args = with_config(&["--max-steps", "40", "train-rcp"]);
    let stdout = ok(p, &args);
    assert!(stdout.contains("best dev F1"), "{stdout}");
    let log = fs::read_to_string(out(p, "train_log.jsonl")).unwrap();
    let first: Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert!(first["dev"]["f1"].is_number());
    let ck = fs::read(out(p, "checkpoint.json")).unwrap();

    ok(p, &args);
    assert_eq!(fs::read_to_string(out(p, "train_log.jsonl")).unwrap(), log);
    assert_eq!(fs::read(out(p, "checkpoint.json")).unwrap(), ck);

    let manifest = json(out(p, "run_manifest.json"));
    let stage = &manifest["stages"]["train-rcp"];
    for f in ["checkpoint.json", "train_log.jsonl"] {
        let key = Path::new("out").join(f).display().to_string();
        assert_eq!(stage["outputs"][&key].as_str().unwrap().len(), 64, "{f}");
    }
    assert_eq!(stage["config"]["rcp"]["max_steps"], 40);
}

#[test]
fn missing_corpus_is_a_config_error() {
    let d = synth();
    let o = lmrc(d.path(), &with_config(&["--train", "nope.jsonl", "train-rcp"]));
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("nope.jsonl"));
    let o = lmrc(d.path(), &["train-rcp"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bad_config_files_are_rejected() {
    let d = synth();
    let p = d.path();
    fs::write(p.join("typo.toml"), "sed = 3\n").unwrap();
    assert_eq!(lmrc(p, &["--config", "typo.toml", "stats"]).status.code(), Some(2));
    fs::write(p.join("key.toml"), "[backend.http]\napi_key = \"sk-1\"\n").unwrap();
    assert_eq!(lmrc(p, &["--config", "key.toml", "stats"]).status.code(), Some(2));
    assert_eq!(lmrc(p, &with_config(&["-k", "0", "stats"])).status.code(), Some(2));
}

#[test]
fn propose_threshold_extremes() {
    let d = synth();
    let p = d.path();
    ok(p, &with_config(&["--max-steps", "2", "train-rcp"]));
    let dev = docs(p, "dev.jsonl");
    let space: usize = dev.iter().map(|d| candidate_pairs(d).len()).sum();

    ok(p, &with_config(&["propose", "--tau", "1.0"]));
    assert_eq!(lines(out(p, "proposals.jsonl")), space + 1);

    ok(p, &with_config(&["propose", "--tau", "0.0"]));
    let text = fs::read_to_string(out(p, "proposals.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 1);
    let header: Value = serde_json::from_str(text.trim()).unwrap();
    assert_eq!(header["lmrc_proposals"], 1);
}

#[test]
fn gold_echo_round_trip_and_resume() {
    let d = synth();
    let p = d.path();
    ok(p, &with_config(&["run-rc", "--gold-pairs"]));
    let dev = docs(p, "dev.jsonl");
    let expected: usize = dev.iter().map(|d| gold_pairs(d).len().div_ceil(4)).sum();
    assert_eq!(lines(out(p, "responses.ledger.jsonl")), expected);
    let responses = fs::read(out(p, "responses.jsonl")).unwrap();

    // A second run is served from the ledger and writes the same bytes.
    ok(p, &with_config(&["run-rc", "--gold-pairs"]));
    assert_eq!(lines(out(p, "responses.ledger.jsonl")), expected);
    assert_eq!(fs::read(out(p, "responses.jsonl")).unwrap(), responses);

    ok(p, &with_config(&["score"]));
    let m = json(out(p, "metrics.json"));
    assert_eq!(m["f1"], 1.0);
    assert_eq!(m["precision"], 1.0);
    let preds = json(out(p, "predictions.json"));
    let gold: usize = dev.iter().map(|d| d.labels.len()).sum();
    assert_eq!(preds.as_array().unwrap().len(), gold);
    assert_eq!(lines(out(p, "rejections.jsonl")), 0);
    let ii = json(out(p, "intra_inter.json"));
    assert_eq!(ii["intra"]["f1"], 1.0);
    assert!(fs::read_to_string(out(p, "per_relation.tsv")).unwrap().contains("P47"));
}

#[test]
fn interrupted_run_resumes_without_duplicates() {
    let d = synth();
    let p = d.path();
    ok(p, &with_config(&["run-rc", "--gold-pairs"]));
    let ledger = out(p, "responses.ledger.jsonl");
    let text = fs::read_to_string(&ledger).unwrap();
    let total = text.lines().count();
    // Keep half the entries and a torn final line.
    let mut kept: String = text.lines().take(total / 2).map(|l| format!("{l}\n")).collect();
    kept.push_str(&text.lines().nth(total / 2).unwrap()[..10]);
    fs::write(&ledger, kept).unwrap();

    ok(p, &with_config(&["run-rc", "--gold-pairs"]));
    let tags: Vec<String> = fs::read_to_string(&ledger)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).unwrap()["tag"].to_string())
        .collect();
    assert_eq!(tags.len(), total);
    assert_eq!(tags.iter().collect::<BTreeSet<_>>().len(), total);
}

fn response_lines(p: &Path) -> usize {
    fs::read_to_string(out(p, "responses.jsonl"))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| {
            let v: Value = serde_json::from_str(l).unwrap();
            v["text"].as_str().unwrap().lines().filter(|l| !l.trim().is_empty()).count()
        })
        .sum()
}

#[test]
fn dropped_lines_set_recall_exactly() {
    let d = synth();
    let p = d.path();
    ok(p, &with_config(&["--drop-rate", "0.5", "run-rc", "--gold-pairs"]));
    ok(p, &with_config(&["score"]));
    let m = json(out(p, "metrics.json"));
    let survived = response_lines(p) as f64;
    let gold = m["gold"].as_f64().unwrap();
    assert!(survived > 0.0 && survived < gold);
    assert_eq!(m["recall"].as_f64().unwrap(), survived / gold);
    assert_eq!(m["precision"], 1.0);
}

#[test]
fn corrupted_lines_are_all_wrong() {
    let d = synth();
    let p = d.path();
    ok(p, &with_config(&["--corrupt-rate", "1.0", "run-rc", "--gold-pairs"]));
    ok(p, &with_config(&["score"]));
    let m = json(out(p, "metrics.json"));
    assert_eq!(m["predicted"].as_f64().unwrap(), response_lines(p) as f64);
    assert_eq!(m["precision"], 0.0);
    assert_eq!(m["correct"], 0);
}

#[test]
fn mock_failures_give_partial_exit_then_recover() {
    let d = synth();
    let p = d.path();
    let dev = docs(p, "dev.jsonl");
    let tag = format!("{}#0", dev[0].doc_id);
    let cfg = fs::read_to_string(p.join("lmrc.toml")).unwrap().replace("fail_tags = []", &format!("fail_tags = [{tag:?}]"));
    fs::write(p.join("fail.toml"), cfg).unwrap();
    let o = lmrc(p, &["--config", "fail.toml", "run-rc", "--gold-pairs"]);
    assert_eq!(o.status.code(), Some(3));
    let report = json(out(p, "rc_report.json"));
    assert_eq!(report["failed"][0]["tag"], tag);
    assert!(json(out(p, "run_manifest.json"))["stages"]["run-rc"].is_object());

    ok(p, &with_config(&["run-rc", "--gold-pairs"]));
    assert_eq!(json(out(p, "rc_report.json"))["failed"].as_array().unwrap().len(), 0);
    ok(p, &with_config(&["score"]));
    assert_eq!(json(out(p, "metrics.json"))["f1"], 1.0);
}

/// Answers chat requests with an empty completion, except for prompts
/// mentioning `poison`, which get a non-retryable error.
fn stub_server(poison: String, requests: usize) -> (String, thread::JoinHandle<()>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let base = format!("http://{}/v1", listener.local_addr().unwrap());
    let h = thread::spawn(move || {
        for stream in listener.incoming().take(requests) {
            let mut stream = stream.unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if line == "\r\n" || line.is_empty() {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
            }
            let mut body = vec![0; len];
            reader.read_exact(&mut body).unwrap();
            let body = String::from_utf8(body).unwrap();
            let (status, payload) = if body.contains(&poison) {
                ("400 Bad Request", r#"{"error":"invalid request"}"#.to_string())
            } else {
                (
                    "200 OK",
                    r#"{"choices":[{"message":{"content":""},"finish_reason":"stop"}]}"#.to_string(),
                )
            };
            write!(
                stream,
                "HTTP/1.1 {status}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
                payload.len()
            )
            .unwrap();
        }
    });
    (base, h)
}

#[test]
fn http_failures_are_listed() {
    let d = synth();
    let p = d.path();
    let dev = docs(p, "dev.jsonl");
    let requests: usize = dev.iter().map(|d| gold_pairs(d).len().div_ceil(4)).sum();
    let poison = dev[1].sentences[0][0].clone();
    let poisoned: Vec<&Document> = dev.iter().filter(|d| d.text().contains(&poison)).collect();
    let (base, server) = stub_server(poison, requests);
    let o = lmrc(
        p,
        &with_config(&["--backend", "http", "--api-base", &base, "--parallelism", "1", "run-rc", "--gold-pairs"]),
    );
    server.join().unwrap();
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    let report = json(out(p, "rc_report.json"));
    let failed: BTreeSet<String> = report["failed"]
        .as_array()
        .unwrap()
        .iter()
        .map(|f| f["tag"].as_str().unwrap().split('#').next().unwrap().to_string())
        .collect();
    let expected: BTreeSet<String> = poisoned.iter().map(|d| d.doc_id.clone()).collect();
    assert_eq!(failed, expected);
    assert_eq!(report["requests"], requests);
}

#[test]
fn export_counts_by_mode_and_determinism() {
    let d = synth();
    let p = d.path();
    let train = docs(p, "train.jsonl");
    let k = 4;
    ok(p, &with_config(&["--mode", "baseline", "export-ft"]));
    let baseline: usize = train.iter().map(|d| candidate_pairs(d).len().div_ceil(k)).sum();
    assert_eq!(lines(out(p, "finetune.jsonl")), baseline);

    ok(p, &with_config(&["--mode", "rc", "export-ft"]));
    let rc: usize = train.iter().map(|d| gold_pairs(d).len().div_ceil(k)).sum();
    assert_eq!(lines(out(p, "finetune.jsonl")), rc);
    let bytes = fs::read(out(p, "finetune.jsonl")).unwrap();
    ok(p, &with_config(&["--mode", "rc", "export-ft"]));
    assert_eq!(fs::read(out(p, "finetune.jsonl")).unwrap(), bytes);

    let first: Value =
        serde_json::from_str(fs::read_to_string(out(p, "finetune.jsonl")).unwrap().lines().next().unwrap()).unwrap();
    assert!(first["prompt"].as_str().unwrap().ends_with("\n"));
}

#[test]
fn sweep_singleton_matches_score() {
    let d = synth();
    let p = d.path();
    ok(p, &with_config(&["--drop-rate", "0.3", "--corrupt-rate", "0.3", "run-rc", "--gold-pairs"]));
    ok(p, &with_config(&["sweep-theta", "--grid", "0.4"]));
    let sweep = fs::read_to_string(out(p, "sweep.tsv")).unwrap();
    let row: Vec<&str> = sweep.lines().nth(1).unwrap().split('\t').collect();
    ok(p, &with_config(&["--theta", "0.4", "score"]));
    let m = json(out(p, "metrics.json"));
    assert_eq!(row[1], format!("{:.6}", m["f1"].as_f64().unwrap()));

    ok(p, &with_config(&["sweep-theta"]));
    let rows = lines(out(p, "sweep.tsv"));
    assert_eq!(rows, 22);
    let o = lmrc(p, &with_config(&["sweep-theta", "--grid", "0.5,0.1"]));
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn stats_table() {
    let d = synth();
    let p = d.path();
    ok(p, &with_config(&["stats"]));
    let table = fs::read_to_string(out(p, "stats.tsv")).unwrap();
    let train = docs(p, "train.jsonl");
    let space: usize = train.iter().map(|d| candidate_pairs(d).len()).sum();
    let row: Vec<&str> = table.lines().nth(1).unwrap().split('\t').collect();
    assert_eq!(row[0], "train");
    assert_eq!(row[2], space.to_string());
    assert_eq!(table.lines().count(), 4);
}
