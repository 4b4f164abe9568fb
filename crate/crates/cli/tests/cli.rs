use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn pslu(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pslu"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn pslu")
}

fn ok(args: &[&str]) {
    let out = pslu(args);
    assert!(out.status.success(), "pslu {args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// Encoder small enough for debug-speed CLI runs.
const TINY: &str = r#"{
  "model": {"kind": "transformer", "d_model": 16, "n_heads": 2, "d_ff": 32, "n_layers": 1, "max_seq_len": 32},
  "finetune": {"epochs": 3, "batch_size": 8}
}"#;

#[test]
fn stats_of_three_utterances() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = write(dir.path(), "c.tsv", "u1\tMusic\ta b a\nu2\tMusic\tb c\nu3\tWeather\ta\n");
    let out = dir.path().join("stats.json");
    ok(&["stats", "--in", s(&corpus), "--top-k", "2", "--out", s(&out)]);
    let v = json(&out);
    assert_eq!(v["phone_freq"], serde_json::json!({"a": 3, "b": 2, "c": 1}));
    assert_eq!(v["label_counts"], serde_json::json!({"Music": 2, "Weather": 1}));
    assert_eq!(v["mean_length"], serde_json::json!(2.0));
    assert_eq!(v["top_k"], serde_json::json!([["a", 3], ["b", 2]]));
}

#[test]
fn synth_finetune_eval_twice_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write(d, "cfg.json", TINY);
    for (name, seed) in [("train", "1"), ("dev", "2"), ("test", "3")] {
        ok(&["synth", "--seed", seed, "--out", s(&d.join(format!("{name}.tsv")))]);
    }
    let run = |tag: &str| {
        let ckpt = d.join(format!("{tag}.ckpt"));
        let report = d.join(format!("{tag}.json"));
        ok(&[
            "finetune",
            "--config",
            s(&cfg),
            "--seed",
            "4",
            "--train",
            s(&d.join("train.tsv")),
            "--dev",
            s(&d.join("dev.tsv")),
            "--out",
            s(&ckpt),
        ]);
        ok(&["eval", "--ckpt", s(&ckpt), "--test", s(&d.join("test.tsv")), "--out", s(&report)]);
        (std::fs::read(ckpt).unwrap(), std::fs::read(report).unwrap())
    };
    let (ckpt_a, report_a) = run("a");
    let (ckpt_b, report_b) = run("b");
    assert_eq!(ckpt_a, ckpt_b);
    assert_eq!(report_a, report_b);

    let v: Value = serde_json::from_slice(&report_a).unwrap();
    assert_eq!(v["n"], 64);
    assert_eq!(v["classes"].as_array().unwrap().len(), 4);
    assert_eq!(v["classes"][0]["label"], "class0");
    let history = std::fs::read_to_string(d.join("a.ckpt.history.csv")).unwrap();
    assert_eq!(history.lines().next(), Some("epoch,train_loss,dev_acc,dev_macro_f1"));
    assert_eq!(history.lines().count(), 4);
}

/// 128 labelled and 2000 unlabelled utterances from one task with
/// signature variants, topic phones and label noise.
#[test]
fn pretrained_init_starts_fine_tuning_lower() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let task = r#""variants": 4, "topic_phones": 4, "topic_rate": 0.5, "noise": 0.1, "min_len": 6, "max_len": 12"#;
    let labelled = write(d, "labelled.json", &format!(r#"{{"per_class": 32, {task}}}"#));
    let unlabelled = write(d, "unlabelled.json", &format!(r#"{{"per_class": 500, "unlabeled": true, {task}}}"#));
    let cfg = write(
        d,
        "cfg.json",
        r#"{
  "model": {"kind": "transformer", "d_model": 32, "n_heads": 4, "d_ff": 64, "n_layers": 2, "max_seq_len": 64},
  "pretrain": {"epochs": 5},
  "finetune": {"epochs": 1, "batch_size": 8}
}"#,
    );
    let (train, dev, mlm) = (d.join("train.tsv"), d.join("dev.tsv"), d.join("mlm.tsv"));
    ok(&["synth", "--spec", s(&labelled), "--seed", "101", "--out", s(&train)]);
    ok(&["synth", "--spec", s(&labelled), "--seed", "102", "--out", s(&dev)]);
    ok(&["synth", "--spec", s(&unlabelled), "--seed", "300", "--out", s(&mlm)]);

    for model in ["transformer", "baseline"] {
        let pre = d.join(format!("pre-{model}.ckpt"));
        ok(&["pretrain", "--config", s(&cfg), "--model", model, "--corpus", s(&mlm), "--out", s(&pre)]);
        let curve = std::fs::read_to_string(d.join(format!("pre-{model}.ckpt.loss.csv"))).unwrap();
        assert!(curve.starts_with("step,loss\n"), "{curve:.40}");

        let first_loss = |init: Option<&Path>, tag: &str| -> f64 {
            let out = d.join(format!("{tag}-{model}.ckpt"));
            let mut args = vec![
                "finetune",
                "--config",
                s(&cfg),
                "--model",
                model,
                "--train",
                s(&train),
                "--dev",
                s(&dev),
                "--out",
                s(&out),
            ];
            if let Some(p) = init {
                args.extend(["--init", s(p)]);
            }
            ok(&args);
            let history = std::fs::read_to_string(d.join(format!("{tag}-{model}.ckpt.history.csv"))).unwrap();
            let row = history.lines().nth(1).unwrap();
            row.split(',').nth(1).unwrap().parse().unwrap()
        };
        let pretrained = first_loss(Some(&pre), "ft");
        let scratch = first_loss(None, "sc");
        assert!(pretrained < scratch, "{model}: pretrained {pretrained} vs scratch {scratch}");
    }
}

#[test]
fn invalid_config_fails_without_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = d.join("d.tsv");
    ok(&["synth", "--out", s(&data)]);
    let out = d.join("m.ckpt");
    for (text, needle) in [
        (r#"{"finetune": {"batch_size": 0}}"#, "batch_size"),
        (r#"{"model": {"kind": "baseline", "lstm_hiden": 3}}"#, "lstm_hiden"),
        (r#"{"optimizer": {"lr": -1.0}}"#, "lr"),
    ] {
        let cfg = write(d, "bad.json", text);
        let res = pslu(&["finetune", "--config", s(&cfg), "--train", s(&data), "--dev", s(&data), "--out", s(&out)]);
        assert!(!res.status.success());
        let stderr = String::from_utf8_lossy(&res.stderr);
        assert!(stderr.contains(needle), "{needle}: {stderr}");
        assert!(!out.exists());
        assert!(!d.join("m.ckpt.history.csv").exists());
    }
}

#[test]
fn prep_rebalances_published_split_sizes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut text = String::new();
    for (label, counts) in [
        ("Map", [5093, 921, 1578]),
        ("Music", [2189, 381, 676]),
        ("Weather", [341, 378, 2660]),
        ("Video", [205, 195, 1641]),
    ] {
        for (split, n) in ["train", "dev", "test"].into_iter().zip(counts) {
            for i in 0..n {
                text.push_str(&format!("{label}-{split}-{i}\t{label}\ta b\t{split}\n"));
            }
        }
    }
    let corpus = write(d, "all.tsv", &text);
    let targets = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/catslu_targets.json");
    let out = d.join("splits");
    std::fs::create_dir(&out).unwrap();
    ok(&["prep", "--in", s(&corpus), "--targets", s(&targets), "--out", s(&out)]);

    let counts: BTreeMap<String, BTreeMap<String, usize>> =
        serde_json::from_str(&std::fs::read_to_string(out.join("counts.json")).unwrap()).unwrap();
    let expected: BTreeMap<String, BTreeMap<String, usize>> = serde_json::from_value(serde_json::json!({
        "Navigation": {"train": 2934, "dev": 666, "test": 1109},
        "Music": {"train": 1524, "dev": 251, "test": 463},
        "Weather": {"train": 1463, "dev": 211, "test": 417},
        "Video": {"train": 1004, "dev": 163, "test": 487}
    }))
    .unwrap();
    assert_eq!(counts, expected);
    let train = std::fs::read_to_string(out.join("train.tsv")).unwrap();
    assert_eq!(train.lines().count(), 2934 + 1524 + 1463 + 1004);
    assert!(train.lines().all(|l| l.split('\t').count() == 3));
}

#[test]
fn predict_labels_every_input_with_known_classes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write(d, "cfg.json", TINY);
    let data = d.join("d.tsv");
    ok(&["synth", "--out", s(&data)]);
    let ckpt = d.join("m.ckpt");
    ok(&["finetune", "--config", s(&cfg), "--epochs", "1", "--train", s(&data), "--dev", s(&data), "--out", s(&ckpt)]);

    let unlabelled = write(d, "u.tsv", "x1\t-\tp00 p01 p02\nx2\t-\tp05\n");
    let pred = d.join("pred.tsv");
    ok(&["predict", "--ckpt", s(&ckpt), "--in", s(&unlabelled), "--out", s(&pred)]);
    let lines: Vec<Vec<String>> = std::fs::read_to_string(&pred)
        .unwrap()
        .lines()
        .map(|l| l.split('\t').map(String::from).collect())
        .collect();
    assert_eq!(lines.len(), 2);
    for (row, (id, phones)) in lines.iter().zip([("x1", "p00 p01 p02"), ("x2", "p05")]) {
        assert_eq!(row.len(), 3);
        assert_eq!(row[0], id);
        assert!(["class0", "class1", "class2", "class3"].contains(&row[1].as_str()), "{row:?}");
        assert_eq!(row[2], phones);
    }
}

#[test]
fn refuses_to_overwrite_an_input() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = d.join("d.tsv");
    ok(&["synth", "--out", s(&data)]);
    let before = std::fs::read(&data).unwrap();
    let res = pslu(&["stats", "--in", s(&data), "--out", s(&data)]);
    assert!(!res.status.success());
    assert!(String::from_utf8_lossy(&res.stderr).contains("overwrite"));
    assert_eq!(std::fs::read(&data).unwrap(), before);
}

#[test]
fn missing_input_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.tsv");
    let res = pslu(&["stats", "--in", s(&missing), "--out", s(&dir.path().join("o.json"))]);
    assert!(!res.status.success());
    assert!(String::from_utf8_lossy(&res.stderr).contains("nope.tsv"));
}
