use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use newscnn::corpus::{load_corpus, write_corpus};
use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_newscnn");

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env_remove("NEWSCNN_OUT").output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let o = run(args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    o
}

fn code(args: &[&str]) -> i32 {
    run(args).status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

struct Fixture {
    dir: tempfile::TempDir,
    corpus: PathBuf,
    embeddings: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let synth = dir.path().join("synth");
        ok(&["synth", "--seed", "5", "--out", s(&synth)]);
        Fixture { corpus: synth.join("corpus.jsonl"), embeddings: synth.join("embeddings.txt"), dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    /// Data flags plus a small, fast network.
    fn args<'a>(&'a self, extra: &[&'a str]) -> Vec<&'a str> {
        let mut v = vec![
            "--corpus",
            s(&self.corpus),
            "--embeddings",
            s(&self.embeddings),
            "--set",
            "iterations=40",
            "--set",
            "kernels=16",
            "--set",
            "hidden=8",
            "--set",
            "max_len=20",
        ];
        v.extend_from_slice(extra);
        v
    }

    fn train(&self, out: &str, extra: &[&str]) -> PathBuf {
        let out = self.path(out);
        let mut a = vec!["train"];
        let o = s(&out).to_string();
        let mut flags = self.args(extra);
        flags.extend(["--out", &o]);
        a.extend(flags);
        ok(&a);
        out
    }
}

#[test]
fn synth_default_has_150_records_and_is_reproducible() {
    let d = tempfile::tempdir().unwrap();
    let (a, b) = (d.path().join("a"), d.path().join("b"));
    ok(&["synth", "--seed", "1", "--out", s(&a)]);
    ok(&["synth", "--seed", "1", "--out", s(&b)]);
    assert_eq!(load_corpus(a.join("corpus.jsonl")).unwrap().len(), 150);
    for f in ["corpus.jsonl", "embeddings.txt", "synth.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let c = d.path().join("c");
    ok(&["synth", "--seed", "2", "--out", s(&c)]);
    assert_ne!(std::fs::read(a.join("corpus.jsonl")).unwrap(), std::fs::read(c.join("corpus.jsonl")).unwrap());
}

#[test]
fn synth_rejects_invalid_spec() {
    let d = tempfile::tempdir().unwrap();
    let o = run(&["synth", "--out", s(d.path()), "--set", "synth.num_sources=0"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!o.stderr.is_empty());
}

#[test]
fn output_root_from_environment() {
    let d = tempfile::tempdir().unwrap();
    let o = Command::new(BIN).args(["synth"]).env("NEWSCNN_OUT", d.path()).output().unwrap();
    assert!(o.status.success());
    assert!(d.path().join("synth").join("corpus.jsonl").exists());
}

#[test]
fn config_file_and_flag_precedence() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("run.cfg");
    std::fs::write(&cfg, "seed = 9\nsynth.articles_per_source = 4\n").unwrap();
    let (a, b) = (d.path().join("a"), d.path().join("b"));
    ok(&["synth", "--config", s(&cfg), "--out", s(&a)]);
    ok(&["synth", "--config", s(&cfg), "--seed", "10", "--set", "synth.articles_per_source=5", "--out", s(&b)]);
    assert_eq!(json(&a.join("synth.json"))["spec"]["seed"], 9);
    assert_eq!(load_corpus(a.join("corpus.jsonl")).unwrap().len(), 12);
    assert_eq!(json(&b.join("synth.json"))["spec"]["seed"], 10);
    assert_eq!(load_corpus(b.join("corpus.jsonl")).unwrap().len(), 15);
    std::fs::write(&cfg, "sed = 9\n").unwrap();
    assert_eq!(code(&["synth", "--config", s(&cfg), "--out", s(&a)]), 2);
}

#[test]
fn train_source_reports_accuracy() {
    let f = Fixture::new();
    let out = f.train("src", &["--task", "source"]);
    let r = json(&out.join("report.json"));
    assert_eq!(r["schema_version"], 1);
    assert_eq!(r["command"], "train");
    assert!(r["config"].get("out").is_none());
    let acc = r["metrics"]["train"][0]["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert!(out.join("model.ckpt").exists());
    assert!(json(&out.join("timing.json"))["total_ms"].as_f64().unwrap() > 0.0);
}

#[test]
fn multitask_reports_one_block_per_task() {
    let f = Fixture::new();
    let out = f.train("mt", &["--tasks", "source,geo"]);
    let r = json(&out.join("report.json"));
    let blocks = r["metrics"]["val"].as_array().unwrap();
    assert_eq!(blocks.len(), 2);
    assert_eq!(blocks[0]["task"], "source");
    assert_eq!(blocks[1]["task"], "geolocation");
    assert_eq!(r["training"]["head_lr_factor"], 0.1);
}

#[test]
fn transfer_keeps_the_source_trunk() {
    let f = Fixture::new();
    let src = f.train("src", &["--task", "source"]);
    let ck = src.join("model.ckpt");
    let out = f.train("tr", &["--transfer-from", s(&ck), "--task", "popularity"]);
    let a = json(&src.join("report.json"));
    let b = json(&out.join("report.json"));
    let hashes = &b["transfer_trunk_hash"];
    assert_eq!(hashes["source"], a["training"]["trunk_hash"]);
    assert_eq!(hashes["transferred"], hashes["source"]);
    assert_eq!(b["tasks"], serde_json::json!(["popularity"]));

    let mut same = vec!["train"];
    let o = s(&f.path("same")).to_string();
    same.extend(f.args(&["--transfer-from", s(&ck), "--task", "source", "--out", &o]));
    assert_eq!(code(&same), 2);
    same.push("--force");
    ok(&same);
}

#[test]
fn eval_task_must_match_checkpoint() {
    let f = Fixture::new();
    let ck = f.train("src", &["--task", "source"]).join("model.ckpt");
    let out = f.path("ev");
    let mut a = vec!["eval", "--checkpoint", s(&ck), "--out", s(&out)];
    a.extend(f.args(&["--task", "geolocation"]));
    assert_eq!(code(&a), 2);
    let mut a = vec!["eval", "--checkpoint", s(&ck), "--out", s(&out), "--part", "val"];
    a.extend(f.args(&["--task", "source"]));
    ok(&a);
    let r = json(&out.join("eval.json"));
    assert_eq!(r["part"], "val");
    assert_eq!(r["metrics"][0]["task"], "source");
}

#[test]
fn eval_without_labels_is_a_data_error() {
    let f = Fixture::new();
    let ck = f.train("geo", &["--task", "geolocation"]).join("model.ckpt");
    let mut recs = load_corpus(&f.corpus).unwrap();
    for r in &mut recs {
        r.geo.clear();
    }
    let bare = f.path("bare.jsonl");
    write_corpus(&bare, &recs).unwrap();
    let out = f.path("ev");
    let o = run(&[
        "eval",
        "--checkpoint",
        s(&ck),
        "--corpus",
        s(&bare),
        "--embeddings",
        s(&f.embeddings),
        "--out",
        s(&out),
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn illustration_metrics_in_column_order() {
    let f = Fixture::new();
    let out = f.train("ill", &["--task", "illustration"]);
    let text = std::fs::read_to_string(out.join("report.json")).unwrap();
    let (r1, r10, mr) = (text.find("\"R@1\"").unwrap(), text.find("\"R@10\"").unwrap(), text.find("\"MR\"").unwrap());
    assert!(r1 < r10 && r10 < mr);
}

#[test]
fn repeated_runs_are_byte_identical() {
    let f = Fixture::new();
    let a = f.train("a", &["--tasks", "source,popularity", "--seed", "4"]);
    let b = f.train("b", &["--tasks", "source,popularity", "--seed", "4"]);
    for file in ["model.ckpt", "report.json"] {
        assert_eq!(std::fs::read(a.join(file)).unwrap(), std::fs::read(b.join(file)).unwrap(), "{file}");
    }
    let c = f.train("c", &["--tasks", "source,popularity", "--seed", "5"]);
    assert_ne!(std::fs::read(a.join("model.ckpt")).unwrap(), std::fs::read(c.join("model.ckpt")).unwrap());
}

#[test]
fn shallow_baseline_trains_and_evaluates() {
    let f = Fixture::new();
    let out = f.train("sh", &["--task", "source", "--model", "shallow"]);
    let r = json(&out.join("report.json"));
    assert_eq!(r["model"], "shallow");
    let ev = f.path("ev");
    let ck = out.join("model.ckpt");
    let mut a = vec!["eval", "--checkpoint", s(&ck), "--out", s(&ev)];
    a.extend(f.args(&[]));
    ok(&a);
    assert_eq!(json(&ev.join("eval.json"))["metrics"][0]["task"], "source");
}

#[test]
fn caption_pipeline_writes_captions() {
    let f = Fixture::new();
    let out = f.train(
        "cap",
        &[
            "--task",
            "caption",
            "--set",
            "caption_iterations=20",
            "--set",
            "caption_hidden=8",
            "--set",
            "caption_embed=8",
            "--set",
            "caption_min_count=1",
        ],
    );
    let cdir = f.path("gen");
    let ck = out.join("model.ckpt");
    let mut a = vec!["caption", "--checkpoint", s(&ck), "--out", s(&cdir), "--beam", "2"];
    a.extend(f.args(&[]));
    ok(&a);
    let lines = std::fs::read_to_string(cdir.join("captions.jsonl")).unwrap();
    let first: Value = serde_json::from_str(lines.lines().next().unwrap()).unwrap();
    assert!(first["id"].is_string() && first["tokens"].is_array() && first["log_prob"].is_number());
    let r = json(&cdir.join("report.json"));
    assert!(r["metrics"][0]["BLEU-4"].is_number());
}

#[test]
fn gradcheck_filters_and_flags_faults() {
    let o = ok(&["gradcheck", "--only", "cca_loss"]);
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("cca_loss") && !text.contains("gcd_loss"));
    let o = run(&["gradcheck", "--only", "gcd_loss", "--inject-fault", "gcd-sign"]);
    assert_eq!(o.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&o.stderr).contains("gcd_loss"));
    assert_eq!(code(&["gradcheck", "--only", "nope"]), 2);
}

#[test]
fn train_requires_a_task() {
    let f = Fixture::new();
    let mut a = vec!["train"];
    a.extend(f.args(&[]));
    assert_eq!(code(&a), 2);
}
