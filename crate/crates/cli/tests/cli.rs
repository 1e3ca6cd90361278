use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rulex_core::datagen::{VOCAB_FILE, RULES_FILE};
use rulex_core::{AutoregRuleModel, ExtractorWeights, GeneratorConfig, RelationVocab};
use tempfile::TempDir;

const SMALL: &str = r#"{
  "synth": { "docs": 24 },
  "em": { "n": 10, "iterations": 2, "epsilon": 0.0, "beam_width": 20 }
}"#;

fn rulex(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rulex"))
        .args(args)
        .env_remove("RULEX_THREADS")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = rulex(args);
    assert!(out.status.success(), "{args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    out
}

fn failure(args: &[&str]) -> String {
    let out = rulex(args);
    assert_eq!(out.status.code(), Some(1), "{args:?} should fail");
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_config(dir: &Path) -> PathBuf {
    let path = dir.join("small.json");
    fs::write(&path, SMALL).unwrap();
    path
}

fn synth(dir: &Path, name: &str) -> PathBuf {
    let cfg = small_config(dir);
    let out = dir.join(name);
    ok(&["synth", "--config", s(&cfg), "--out", s(&out)]);
    out
}

fn train(dir: &Path, corpus: &Path, name: &str, extra: &[&str]) -> PathBuf {
    let cfg = small_config(dir);
    let out = dir.join(name);
    let mut args = vec!["train", "--config", s(&cfg), "--corpus", s(corpus), "--out", s(&out)];
    args.extend_from_slice(extra);
    ok(&args);
    out
}

fn same_files(a: &Path, b: &Path, names: &[&str]) {
    for name in names {
        let x = fs::read(a.join(name)).unwrap();
        let y = fs::read(b.join(name)).unwrap();
        assert!(x == y, "{name} differs between {} and {}", a.display(), b.display());
    }
}

const CORPUS_FILES: [&str; 5] = [VOCAB_FILE, RULES_FILE, "train.jsonl", "dev.jsonl", "test.jsonl"];
const RUN_FILES: [&str; 5] = ["generator.json", "extractor.json", "diagnostics.csv", "rules.txt", "vocab.txt"];

#[test]
fn synth_is_reproducible() {
    let tmp = TempDir::new().unwrap();
    let a = synth(tmp.path(), "a");
    let b = synth(tmp.path(), "b");
    for name in CORPUS_FILES.iter().chain(["config.json"].iter()) {
        assert!(a.join(name).is_file(), "missing {name}");
    }
    same_files(&a, &b, &CORPUS_FILES);
    assert!(!a.join(".lock").exists());

    let c = tmp.path().join("c");
    ok(&["synth", "--config", s(&small_config(tmp.path())), "--seed", "9", "--out", s(&c)]);
    assert_ne!(fs::read(a.join("train.jsonl")).unwrap(), fs::read(c.join("train.jsonl")).unwrap());
}

#[test]
fn output_parent_must_exist() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("missing").join("corpus");
    let err = failure(&["synth", "--out", s(&out)]);
    assert!(err.contains("does not exist"), "{err}");
}

#[test]
fn train_records_each_iteration_and_reruns_from_its_config() {
    let tmp = TempDir::new().unwrap();
    let corpus = synth(tmp.path(), "corpus");
    let run = train(tmp.path(), &corpus, "run", &[]);
    for name in RUN_FILES.iter().chain(["config.json"].iter()) {
        assert!(run.join(name).is_file(), "missing {name}");
    }
    let csv = fs::read_to_string(run.join("diagnostics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 3, "{csv}");
    assert!(lines[0].starts_with("iteration,L_G,L_R,train_f1"));
    assert!(lines[1].starts_with("1,") && lines[2].starts_with("2,"));

    // the saved config alone reproduces the run
    let again = tmp.path().join("again");
    let out = ok(&["train", "--config", s(&run.join("config.json")), "--out", s(&again)]);
    let echo = String::from_utf8_lossy(&out.stderr);
    assert!(echo.contains("resolved config") && echo.contains("\"seed\": 0"), "{echo}");
    same_files(&run, &again, &RUN_FILES);

    let threaded = train(tmp.path(), &corpus, "threaded", &["--threads", "2"]);
    same_files(&run, &threaded, &RUN_FILES);
}

#[test]
fn corrupt_corpus_line_is_named() {
    let tmp = TempDir::new().unwrap();
    let corpus = synth(tmp.path(), "corpus");
    let path = corpus.join("train.jsonl");
    let mut text = fs::read_to_string(&path).unwrap();
    let lines = text.lines().count();
    text.push_str("{\"doc_id\": \"broken\", \"entities\": [\n");
    fs::write(&path, text).unwrap();
    let err = failure(&["train", "--corpus", s(&corpus), "--out", s(&tmp.path().join("run"))]);
    assert!(err.contains(&format!("line {}", lines + 1)), "{err}");
}

#[test]
fn unknown_relation_is_rejected() {
    let tmp = TempDir::new().unwrap();
    let fx = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/metrics");
    let pred = tmp.path().join("pred.jsonl");
    fs::write(&pred, "{\"doc_id\":\"d1\",\"triples\":[[0,\"zz\",1,0.9]]}\n").unwrap();
    let err = failure(&[
        "eval",
        "--predictions",
        s(&pred),
        "--gold",
        s(&fx.join("gold.jsonl")),
        "--vocab",
        s(&fx.join("vocab.txt")),
    ]);
    assert!(err.contains("unknown relation `zz`"), "{err}");
}

#[test]
fn missing_input_is_reported() {
    let tmp = TempDir::new().unwrap();
    let gone = tmp.path().join("nowhere");
    let err = failure(&["train", "--corpus", s(&gone), "--out", s(&tmp.path().join("run"))]);
    assert!(err.contains("nowhere"), "{err}");
    let err = failure(&["infer", "--run", s(&gone), "--docs", s(&gone), "--out", s(&tmp.path().join("p"))]);
    assert!(err.contains("nowhere"), "{err}");
}

#[test]
fn predictions_score_and_gold_scores_perfectly() {
    let tmp = TempDir::new().unwrap();
    let corpus = synth(tmp.path(), "corpus");
    let run = train(tmp.path(), &corpus, "run", &[]);
    let pred = tmp.path().join("pred.jsonl");
    let test = corpus.join("test.jsonl");
    ok(&["infer", "--run", s(&run), "--docs", s(&test), "--out", s(&pred)]);
    let first = fs::read(&pred).unwrap();
    let pred2 = tmp.path().join("pred2.jsonl");
    ok(&["infer", "--run", s(&run), "--docs", s(&test), "--out", s(&pred2)]);
    assert_eq!(first, fs::read(&pred2).unwrap());

    let out = ok(&["eval", "--predictions", s(&pred), "--gold", s(&test), "--corpus", s(&corpus)]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("f1"));

    // gold positives written as predictions
    let mut lines = String::new();
    for line in fs::read_to_string(&test).unwrap().lines() {
        let doc: serde_json::Value = serde_json::from_str(line).unwrap();
        let triples: Vec<serde_json::Value> = doc["facts"]
            .as_array()
            .unwrap()
            .iter()
            .filter(|f| f[3] == 1)
            .map(|f| serde_json::json!([f[0], f[1], f[2], 1.0]))
            .collect();
        lines.push_str(&serde_json::json!({ "doc_id": doc["doc_id"], "triples": triples }).to_string());
        lines.push('\n');
    }
    let gold_pred = tmp.path().join("gold_pred.jsonl");
    fs::write(&gold_pred, lines).unwrap();
    let report = tmp.path().join("report.json");
    ok(&[
        "eval",
        "--predictions",
        s(&gold_pred),
        "--gold",
        s(&test),
        "--corpus",
        s(&corpus),
        "--rules",
        s(&corpus.join(RULES_FILE)),
        "--out",
        s(&report),
    ]);
    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r["f1"]["f1"], 1.0);
    assert_eq!(r["ign_f1"]["f1"], 1.0);
    let logic = &r["logic"];
    assert!(logic["vacuous"] == true || logic["score"].as_f64().unwrap() > 0.0, "{logic}");
}

#[test]
fn untrained_run_predicts_no_positives() {
    let tmp = TempDir::new().unwrap();
    let corpus = synth(tmp.path(), "corpus");
    let run = tmp.path().join("cold");
    fs::create_dir(&run).unwrap();
    let vocab_text = fs::read_to_string(corpus.join(VOCAB_FILE)).unwrap();
    let vocab = RelationVocab::parse(&vocab_text).unwrap();
    fs::write(run.join(VOCAB_FILE), &vocab_text).unwrap();
    let gen = AutoregRuleModel::new(&vocab, GeneratorConfig::default()).unwrap();
    fs::write(run.join("generator.json"), serde_json::to_string(&gen.to_checkpoint()).unwrap()).unwrap();
    let weights = ExtractorWeights::new().to_checkpoint(&vocab);
    fs::write(run.join("extractor.json"), serde_json::to_string(&weights).unwrap()).unwrap();

    let pred = tmp.path().join("pred.jsonl");
    let out = ok(&["infer", "--run", s(&run), "--docs", s(&corpus.join("test.jsonl")), "--out", s(&pred)]);
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("0 positive predictions"));
    for line in fs::read_to_string(&pred).unwrap().lines() {
        let rec: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(rec["triples"].as_array().unwrap().len(), 0);
    }
}

#[test]
fn oracle_passes_and_writes_a_report() {
    let tmp = TempDir::new().unwrap();
    let report = tmp.path().join("oracle.json");
    let out = rulex(&["oracle", "--scope", "posterior", "--out", s(&report)]);
    assert_eq!(out.status.code(), Some(0));
    let table = String::from_utf8_lossy(&out.stdout);
    assert!(table.contains("posterior") && !table.contains("grounding"), "{table}");
    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r.as_array().unwrap().len(), 1);
}

#[test]
fn bad_flags_and_configs_fail() {
    let tmp = TempDir::new().unwrap();
    let err = failure(&["synth", "--threads", "0", "--out", s(&tmp.path().join("x"))]);
    assert!(err.contains("threads"), "{err}");
    let cfg = tmp.path().join("bad.json");
    fs::write(&cfg, "{\"sed\": 3}").unwrap();
    let err = failure(&["synth", "--config", s(&cfg), "--out", s(&tmp.path().join("y"))]);
    assert!(err.contains("unknown field"), "{err}");
}
