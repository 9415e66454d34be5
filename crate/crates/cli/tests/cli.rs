use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn sentvae(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sentvae"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawning sentvae")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited by signal")
}

fn ok(args: &[&str]) -> Output {
    let out = sentvae(args);
    assert_eq!(
        code(&out),
        0,
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny_config(dir: &Path) -> PathBuf {
    let cfg = serde_json::json!({
        "n1": 2, "n2": 2, "n3": 2,
        "z_size": 2, "d_model": 8, "heads": 2,
        "enc_layers": 1, "dec_layers": 1,
        "train_size": 60, "test_size": 10,
        "batch_size": 16, "max_steps": 6,
        "warmup_steps": 2, "anneal_steps": 2,
        "eval_every_epochs": 1, "log_every": 1,
        "eval_base_count": 3, "eval_resamples": 2,
        "seed": 5,
        "output_dir": dir.join("run"),
    });
    let path = dir.join("tiny.json");
    fs::write(&path, cfg.to_string()).unwrap();
    path
}

const EXTERNAL: &str = r#"{"couple_id":7,"lv_index":2,"original_tokens":["a","dog","runs"],"modified_tokens":["a","cat","runs"],"original":{"status":"PARSED","root_label":"VERB","root_children":["nsubj"],"all_labels":["det","nsubj","root"],"role_spans":{"ARG0":[0,2],"V":[2,3]}},"modified":{"status":"PARSED","root_label":"VERB","root_children":["nsubj"],"all_labels":["det","nsubj","root"],"role_spans":{"ARG0":[0,2],"V":[2,3]}}}"#;

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn exit_codes() {
    assert_eq!(code(&sentvae(&["--help"])), 0);
    assert_eq!(code(&sentvae(&["--version"])), 0);
    assert_eq!(code(&sentvae(&[])), 1);
    assert_eq!(code(&sentvae(&["frobnicate"])), 1);
    assert_eq!(code(&sentvae(&["sample", "--bogus"])), 1);

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"n1": 4, "no_such_key": 1}"#).unwrap();
    let out = sentvae(&["--config", s(&bad), "selfcheck", "--base-count", "2"]);
    assert_eq!(code(&out), 1);

    let zero = dir.path().join("zero.json");
    fs::write(&zero, r#"{"n1": 0}"#).unwrap();
    assert_eq!(code(&sentvae(&["--config", s(&zero), "selfcheck"])), 1);
    assert_eq!(code(&sentvae(&["--threads", "0", "selfcheck", "--base-count", "2"])), 1);

    let missing = dir.path().join("nope.bin");
    let out = sentvae(&["sample", "--checkpoint", s(&missing), "--out", s(&dir.path().join("o.txt"))]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));

    let garbage = dir.path().join("garbage.bin");
    fs::write(&garbage, b"not a checkpoint").unwrap();
    let out = sentvae(&["sample", "--checkpoint", s(&garbage), "--out", s(&dir.path().join("o.txt"))]);
    assert_ne!(code(&out), 0);
}

#[test]
fn selfcheck_recovers_the_planted_mapping() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("selfcheck.json");
    ok(&["selfcheck", "--base-count", "20", "--resamples", "4", "--out", s(&out)]);
    let report = read_json(&out);
    assert_eq!(report["passed"], Value::Bool(true));
}

#[test]
fn generate_corpus_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    ok(&["--config", s(&cfg), "generate-corpus", "--out", s(&a)]);
    ok(&["--config", s(&cfg), "generate-corpus", "--out", s(&b)]);
    ok(&["--config", s(&cfg), "--seed", "6", "generate-corpus", "--out", s(&c)]);
    let train = fs::read_to_string(a.join("train.jsonl")).unwrap();
    assert_eq!(train.lines().count(), 60);
    assert_eq!(fs::read_to_string(a.join("test.jsonl")).unwrap().lines().count(), 10);
    assert_eq!(train, fs::read_to_string(b.join("train.jsonl")).unwrap());
    assert_ne!(train, fs::read_to_string(c.join("train.jsonl")).unwrap());
}

#[test]
fn train_then_manipulate_and_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = tiny_config(d);
    let run = d.join("run");
    ok(&["--config", s(&cfg), "train"]);
    for f in ["train.jsonl", "test.jsonl", "run_config.json", "train_summary.json", "train_report.csv", "checkpoint_latest.bin"] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    let summary = read_json(&run.join("train_summary.json"));
    assert!(summary["steps"].as_u64().unwrap() <= 6);
    let csv = fs::read_to_string(run.join("train_report.csv")).unwrap();
    assert!(csv.starts_with("step,recon_nll,kl1,kl2,kl3,kl_max,branch_recon_rate,alpha,beta,perplexity"));
    let ck = run.join("checkpoint_latest.bin");
    let ck = s(&ck);

    let (s1, s2) = (d.join("s1.txt"), d.join("s2.txt"));
    ok(&["--config", s(&cfg), "sample", "--checkpoint", ck, "--count", "4", "--out", s(&s1)]);
    ok(&["--config", s(&cfg), "sample", "--checkpoint", ck, "--count", "4", "--out", s(&s2)]);
    let sampled = fs::read_to_string(&s1).unwrap();
    assert_eq!(sampled, fs::read_to_string(&s2).unwrap());
    assert!(!sampled.is_empty());
    let t = d.join("t.txt");
    ok(&["--config", s(&cfg), "sample", "--checkpoint", ck, "--count", "3", "--temperature", "0.7", "--out", s(&t)]);

    let sentence = fs::read_to_string(run.join("train.jsonl")).unwrap();
    let first: Value = serde_json::from_str(sentence.lines().next().unwrap()).unwrap();
    let words: Vec<&str> = first["tokens"].as_array().unwrap().iter().map(|w| w.as_str().unwrap()).collect();
    let text = words.join(" ");

    let r = d.join("resample.jsonl");
    ok(&["--config", s(&cfg), "resample", "--checkpoint", ck, "--lv", "1", "--count", "2", "--bases", "2", "--out", s(&r)]);
    assert!(r.exists());
    let r2 = d.join("resample2.jsonl");
    ok(&[
        "--config", s(&cfg), "resample", "--checkpoint", ck, "--lv", "3", "--sentence", &text, "--repropagate", "--out", s(&r2),
    ]);
    assert!(r2.exists());
    let out = sentvae(&["--config", s(&cfg), "resample", "--checkpoint", ck, "--lv", "99", "--out", s(&r2)]);
    assert_eq!(code(&out), 1);

    let sw = d.join("swap.json");
    ok(&["swap", "--checkpoint", ck, "--first", &text, "--second", "the cat sleeps", "--lv", "0", "--out", s(&sw)]);
    assert!(sw.exists());

    let ev = d.join("eval");
    ok(&["--config", s(&cfg), "evaluate", "--checkpoint", ck, "--out", s(&ev)]);
    let names: Vec<String> = fs::read_dir(&ev)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    assert!(names.contains(&"top_influencers.json".to_string()));
    assert!(names.contains(&"diff_records.jsonl".to_string()));
    assert!(names.iter().filter(|n| n.ends_with(".csv")).count() >= 2, "{names:?}");
    let records = fs::read_to_string(ev.join("diff_records.jsonl")).unwrap();
    assert_eq!(records.lines().count(), 3 * 2 * 6);

    let couples = d.join("couples.jsonl");
    fs::write(&couples, format!("{EXTERNAL}\n")).unwrap();
    let ext = d.join("eval_ext");
    ok(&["evaluate", "--external", s(&couples), "--out", s(&ext)]);
    assert_eq!(fs::read_to_string(ext.join("diff_records.jsonl")).unwrap().lines().count(), 1);
    fs::write(&couples, format!("{EXTERNAL}\n{{\"couple_id\": 1}}\n")).unwrap();
    let out = sentvae(&["evaluate", "--external", s(&couples), "--out", s(&ext)]);
    assert_eq!(code(&out), 1);

    let att = d.join("attention.json");
    ok(&["attention", "--checkpoint", ck, "--sentence", &text, "--out", s(&att)]);
    let report = read_json(&att);
    let rows = report["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 6);
    let cols = report["columns"].as_array().unwrap().len();
    assert_eq!(cols, words.len() + 3);
    for row in rows {
        let w: Vec<f64> = row["weights"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
        assert_eq!(w.len(), cols);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-4);
    }
}
