use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use emotag_core::corpus::write_dataset;
use emotag_core::synthetic::keyword_corpus;

const CONFIG: &str = r#"
[run]
seed = 11

[paths]
output_dir = "out"
train = "train.tsv"
val = "val.tsv"
test = "test.tsv"
weak = "weak.csv"
votes = "votes.csv"

[model]
embed_dim = 16
conv_filters = 8
lstm_units = 8
dense_units = 16

[training]
batch_size = 32
max_epochs = 3
learning_rate = 0.005

[thresholds]
grid_step = 0.05
"#;

fn emotag(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_emotag"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn emotag")
}

fn ok(dir: &Path, args: &[&str]) {
    let out = emotag(dir, args);
    assert!(
        out.status.success(),
        "emotag {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn workspace(config: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let corpus = keyword_corpus(240, 60, 60, 3);
    for (name, samples) in [("train.tsv", &corpus.train), ("val.tsv", &corpus.val), ("test.tsv", &corpus.test)] {
        let mut buf = Vec::new();
        write_dataset(&mut buf, samples).unwrap();
        fs::write(dir.path().join(name), buf).unwrap();
    }
    let mut weak = String::from("text");
    for j in 0..28 {
        weak.push_str(&format!(",p{j}"));
    }
    weak.push('\n');
    for (i, label) in [(0, 3usize), (1, 5), (2, 9)] {
        let mut row = format!("weak sample {i} kw{label}x0");
        for j in 0..28 {
            row.push_str(if j == label { ",0.9" } else { ",0.01" });
        }
        weak.push_str(&row);
        weak.push('\n');
    }
    fs::write(dir.path().join("weak.csv"), weak).unwrap();
    fs::write(dir.path().join("votes.csv"), "sample_id,annotator_id,labels\n1,1,5\n1,2,5\n1,3,6\n").unwrap();
    fs::write(dir.path().join("run.toml"), config).unwrap();
    dir
}

fn run_pipeline(dir: &Path) {
    let c = ["--config", "run.toml"];
    for step in [
        vec!["preprocess"],
        vec!["balance"],
        vec!["train", "--balanced"],
        vec!["tune-thresholds"],
        vec!["evaluate", "--svg"],
        vec!["predict"],
        vec!["report"],
    ] {
        let mut args: Vec<&str> = step.clone();
        args.extend(c);
        ok(dir, &args);
    }
}

fn out(dir: &Path) -> PathBuf {
    dir.join("out")
}

#[test]
fn full_pipeline_writes_headed_artifacts() {
    let ws = workspace(CONFIG);
    run_pipeline(ws.path());
    let o = out(ws.path());
    let names = [
        "tokenizer.tsv",
        "train.enc.tsv",
        "val.enc.tsv",
        "test.enc.tsv",
        "label_distribution.csv",
        "word_frequency.csv",
        "train.balanced.enc.tsv",
        "balance_summary.csv",
        "history.csv",
        "thresholds.csv",
        "metrics_test.csv",
        "per_label_test.csv",
        "predictions_test.csv",
        "ranked_test.tsv",
        "report.md",
    ];
    for name in names {
        let text = fs::read_to_string(o.join(name)).unwrap();
        let first = text.lines().next().unwrap();
        assert!(first.starts_with("# emotag format_version=1 config_sha256="), "{name}: {first}");
        assert!(first.ends_with("seed=11"), "{name}: {first}");
    }
    assert!(o.join("model.ckpt").exists());
    let svg = fs::read_to_string(o.join("f1_test.svg")).unwrap();
    assert!(svg.starts_with("<!-- emotag format_version=1"));
    assert_eq!(svg.matches("<rect").count(), 28);

    let history = fs::read_to_string(o.join("history.csv")).unwrap();
    assert_eq!(history.lines().nth(1), Some("epoch,train_loss,val_loss,seconds"));
    assert_eq!(history.lines().count(), 2 + 3);

    let thresholds = fs::read_to_string(o.join("thresholds.csv")).unwrap();
    assert_eq!(thresholds.lines().count(), 2 + 28);

    let ranked = fs::read_to_string(o.join("ranked_test.tsv")).unwrap();
    assert_eq!(ranked.lines().count(), 2 + 60);
}

#[test]
fn evaluating_predictions_matches_in_process_evaluation() {
    let ws = workspace(CONFIG);
    run_pipeline(ws.path());
    let o = out(ws.path());
    let direct = fs::read_to_string(o.join("metrics_test.csv")).unwrap();
    let direct_labels = fs::read_to_string(o.join("per_label_test.csv")).unwrap();
    ok(
        ws.path(),
        &["evaluate", "--config", "run.toml", "--predictions", "out/predictions_test.csv"],
    );
    assert_eq!(fs::read_to_string(o.join("metrics_test.csv")).unwrap(), direct);
    assert_eq!(fs::read_to_string(o.join("per_label_test.csv")).unwrap(), direct_labels);
}

fn without_seconds(history: &str) -> String {
    history
        .lines()
        .map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head).to_string())
        .collect::<Vec<_>>()
        .join("\n")
}

#[test]
fn same_config_and_seed_give_identical_outputs() {
    let a = workspace(CONFIG);
    let b = workspace(CONFIG);
    run_pipeline(a.path());
    run_pipeline(b.path());
    let mut names: Vec<_> = fs::read_dir(out(a.path()))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert!(names.len() >= 15);
    for name in names {
        let x = fs::read(out(a.path()).join(&name)).unwrap();
        let y = fs::read(out(b.path()).join(&name)).unwrap();
        if name == "history.csv" || name == "report.md" {
            let (x, y) = (String::from_utf8(x).unwrap(), String::from_utf8(y).unwrap());
            assert_eq!(without_seconds(&x), without_seconds(&y), "{name}");
        } else {
            assert!(x == y, "{name} differs between runs");
        }
    }
}

#[test]
fn fixed_threshold_and_no_attention_flags() {
    let ws = workspace(CONFIG);
    let c = ["--config", "run.toml"];
    ok(ws.path(), &["preprocess", c[0], c[1]]);
    ok(ws.path(), &["train", "--no-attention", "--epochs", "1", c[0], c[1]]);
    let params = emotag_core::netcore::load_checkpoint(out(ws.path()).join("model.ckpt")).unwrap();
    assert!(!params.config.use_attention);
    assert!(params.weights.attention.is_none());
    ok(ws.path(), &["evaluate", "--threshold", "0.5", c[0], c[1]]);
    let per_label = fs::read_to_string(out(ws.path()).join("per_label_test.csv")).unwrap();
    let rows: Vec<&str> = per_label.lines().skip(2).collect();
    assert_eq!(rows.len(), 28);
    assert!(rows.iter().all(|r| r.split(',').nth(1) == Some("0.50")));
}

#[test]
fn predict_ranks_raw_text_lines() {
    let ws = workspace(CONFIG);
    let c = ["--config", "run.toml"];
    ok(ws.path(), &["preprocess", c[0], c[1]]);
    ok(ws.path(), &["train", "--epochs", "1", c[0], c[1]]);
    fs::write(ws.path().join("lines.txt"), "kw3x0 w1 w2\n\nKW5X0 and w7!\n").unwrap();
    ok(ws.path(), &["predict", "--input", "lines.txt", "--threshold", "0.5", c[0], c[1]]);
    let ranked = fs::read_to_string(out(ws.path()).join("ranked_input.tsv")).unwrap();
    let rows: Vec<&str> = ranked.lines().skip(2).collect();
    assert_eq!(rows.len(), 2);
    assert!(rows[1].ends_with("KW5X0 and w7!"));
    for r in rows {
        let f: Vec<&str> = r.split('\t').collect();
        assert!(f[1] == "ok" || f[1] == "below_threshold");
        let n = f[2].matches(": ").count();
        assert!((1..=4).contains(&n), "{r}");
    }
}

#[test]
fn exit_codes() {
    let ws = workspace(CONFIG);
    let code = |args: &[&str]| emotag(ws.path(), args).status.code();
    assert_eq!(code(&["--help"]), Some(0));
    assert_eq!(code(&["frobnicate"]), Some(1));
    assert_eq!(code(&["preprocess"]), Some(1));

    fs::write(ws.path().join("noseed.toml"), "[paths]\noutput_dir = \"out\"\n").unwrap();
    let out = emotag(ws.path(), &["preprocess", "--config", "noseed.toml"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("run.seed"));

    fs::write(
        ws.path().join("nofile.toml"),
        "[run]\nseed = 1\n[paths]\noutput_dir = \"out\"\ntrain = \"missing.tsv\"\nval = \"val.tsv\"\ntest = \"test.tsv\"\n",
    )
    .unwrap();
    assert_eq!(code(&["preprocess", "--config", "nofile.toml"]), Some(2));
    // Training before preprocessing is a data error.
    assert_eq!(code(&["train", "--config", "run.toml"]), Some(2));
}
