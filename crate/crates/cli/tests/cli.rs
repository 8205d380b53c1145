use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use kdlab_cli::checkpoint::Checkpoint;
use kdlab_core::tensor::Tensor;

fn kdlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kdlab")).args(args).output().expect("spawn kdlab")
}

fn ok(args: &[&str]) -> String {
    let out = kdlab(args);
    assert!(
        out.status.success(),
        "kdlab {} exited {:?}: {}",
        args.join(" "),
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read(p: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(p.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", p.as_ref().display()))
}

const SMALL: [&str; 6] = ["--set", "model.hidden=16", "--set", "model.ffn=32", "--set", "model.heads=2"];

/// A small corpus, tokenizer and teacher checkpoint.
struct Kd {
    corpus: PathBuf,
    tokenizer: PathBuf,
    teacher: PathBuf,
}

fn kd_fixture(root: &Path) -> Kd {
    let data = root.join("data");
    ok(&["toy-data", "--kind", "kd", "--out-dir", s(&data), "--set", "kd.documents=60"]);
    let corpus = data.join("corpus.txt");
    let tk = root.join("tok");
    ok(&["tokenizer-train", "--corpus", s(&corpus), "--vocab-size", "120", "--out-dir", s(&tk)]);
    let tokenizer = tk.join("tokenizer");
    let t = root.join("teacher");
    let mut args = vec!["pretrain-mlm", "--out-dir", s(&t), "--corpus", s(&corpus), "--tokenizer", s(&tokenizer)];
    args.extend(["--max-steps", "8", "--set", "train.eval_every=4"]);
    args.extend(SMALL);
    ok(&args);
    Kd { corpus, tokenizer, teacher: t.join("model.tdlm") }
}

#[test]
fn resolved_config_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let kd = kd_fixture(dir.path());
    let a = dir.path().join("teacher");
    let b = dir.path().join("rerun");
    ok(&["pretrain-mlm", "--config", s(&a.join("config.json")), "--out-dir", s(&b)]);
    for f in ["model.tdlm", "curve.csv"] {
        assert_eq!(read(a.join(f)), read(b.join(f)), "{f}");
    }
    let echoed = String::from_utf8(read(b.join("config.json"))).unwrap();
    assert_eq!(echoed, String::from_utf8(read(a.join("config.json"))).unwrap().replace(s(&a), s(&b)));
    let tree: serde_json::Value = serde_json::from_str(&echoed).unwrap();
    assert!(tree["train"].get("seed").is_none(), "nested seeds follow the top-level seed");
    assert_eq!(tree["corpus"].as_str(), Some(s(&kd.corpus)));
}

#[test]
fn zero_step_distillation_keeps_the_student() {
    let dir = tempfile::tempdir().unwrap();
    let kd = kd_fixture(dir.path());
    let out = dir.path().join("distill");
    ok(&[
        "distill", "--out-dir", s(&out), "--corpus", s(&kd.corpus), "--tokenizer", s(&kd.tokenizer), "--teacher",
        s(&kd.teacher), "--student", s(&kd.teacher), "--max-steps", "0",
    ]);
    assert_eq!(read(out.join("model.tdlm")), read(&kd.teacher));
}

#[test]
fn uniform_model_perplexity_is_the_vocabulary_size() {
    let dir = tempfile::tempdir().unwrap();
    let kd = kd_fixture(dir.path());
    let mut ck = Checkpoint::load(&kd.teacher).unwrap();
    ck.params.final_ln_gain = Tensor::zeros(ck.params.final_ln_gain.shape());
    ck.params.final_ln_bias = Tensor::zeros(ck.params.final_ln_bias.shape());
    ck.params.mlm_bias = Tensor::zeros(ck.params.mlm_bias.shape());
    let uniform = dir.path().join("uniform.tdlm");
    ck.save(&uniform).unwrap();
    let out = dir.path().join("eval");
    ok(&[
        "eval-ppl", "--out-dir", s(&out), "--corpus", s(&kd.corpus), "--tokenizer", s(&kd.tokenizer), "--checkpoint",
        s(&uniform),
    ]);
    let csv = String::from_utf8(read(out.join("eval.csv"))).unwrap();
    let row: Vec<f64> = csv.lines().nth(1).unwrap().split(',').map(|x| x.parse().unwrap()).collect();
    assert!((row[2] - ck.config.vocab_size as f64).abs() < 1e-9, "{csv}");
}

#[test]
fn gradcheck_passes_and_reports_every_check() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("gc");
    let stdout = ok(&["gradcheck", "--out-dir", s(&out)]);
    assert!(stdout.contains("transformer_directional"));
    let csv = String::from_utf8(read(out.join("gradcheck.csv"))).unwrap();
    assert!(csv.starts_with("check,max_rel_error,gated,pass\n"));
    assert!(csv.lines().skip(1).filter(|l| l.contains(",true,")).all(|l| l.ends_with(",true")));
}

#[test]
fn usage_errors_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(kdlab(&["gradcheck", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(kdlab(&["no-such-command"]).status.code(), Some(2));
    let out = dir.path().join("x");
    let r = kdlab(&["gradcheck", "--out-dir", s(&out), "--set", "nope=1"]);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("unknown config key nope"));
    let r = kdlab(&["pretrain-mlm", "--out-dir", s(&out), "--set", "train.seed=3"]);
    assert_ne!(r.status.code(), Some(0), "nested seeds follow the top-level seed");
}

#[test]
fn locked_output_directory_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join(".kdlab.lock"), "").unwrap();
    let r = kdlab(&["gradcheck", "--out-dir", s(dir.path())]);
    assert_ne!(r.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&r.stderr).contains("locked"));
}

#[test]
fn wsd_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("wsd");
    ok(&["toy-data", "--kind", "wsd", "--out-dir", s(&d), "--set", "wsd.lemmas=4", "--set", "wsd.max_senses=3"]);
    let (text, inventory) = (d.join("text.txt"), d.join("inventory.jsonl"));
    let (train, test) = (d.join("train.jsonl"), d.join("test.jsonl"));
    let tk = dir.path().join("tok");
    ok(&["tokenizer-train", "--corpus", s(&text), "--vocab-size", "150", "--out-dir", s(&tk)]);
    let tok = tk.join("tokenizer");
    let base = dir.path().join("base");
    let mut args = vec!["pretrain-mlm", "--out-dir", s(&base), "--corpus", s(&text)];
    args.extend(["--tokenizer", s(&tok), "--max-steps", "4"]);
    args.extend(SMALL);
    ok(&args);
    let (base_ck, trained) = (base.join("model.tdlm"), dir.path().join("trained"));
    let trained_ck = trained.join("model.tdlm");
    let common = ["--tokenizer", s(&tok), "--inventory", s(&inventory)];
    let mut args = vec!["wsd-train", "--out-dir", s(&trained), "--checkpoint", s(&base_ck)];
    args.extend(common);
    args.extend(["--instances", s(&train), "--objective", "lmgc-m", "--epochs", "1"]);
    ok(&args);
    let eval = dir.path().join("eval");
    let mut args = vec!["wsd-eval", "--out-dir", s(&eval), "--checkpoint", s(&trained_ck)];
    args.extend(common);
    args.extend(["--instances", s(&test)]);
    ok(&args);
    let report = String::from_utf8(read(eval.join("report.csv"))).unwrap();
    assert_eq!(report.lines().count(), 2, "{report}");
    assert!(report.lines().nth(1).unwrap().starts_with("test,"));
}

#[test]
fn mpp_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("mpp");
    ok(&["toy-data", "--kind", "mpp", "--out-dir", s(&d), "--set", "mpp.paragraphs=40", "--set", "mpp.dim=8"]);
    let syn = dir.path().join("synth");
    ok(&[
        "mpp-synth", "--out-dir", s(&syn), "--paragraphs", s(&d.join("paragraphs.jsonl")), "--synonyms",
        s(&d.join("synonyms.txt")), "--ratio", "0.19",
    ]);
    let mut features = Vec::new();
    for split in ["train", "test"] {
        let out = dir.path().join(format!("features-{split}"));
        ok(&[
            "mpp-features", "--out-dir", s(&out), "--vectors", s(&d.join("vectors.txt")), "--paragraphs",
            s(&syn.join(format!("{split}.jsonl"))),
        ]);
        features.push(out.join("features.csv"));
    }
    let split = ["--train", s(&features[0]), "--test", s(&features[1])];
    for clf in ["lr", "nb", "svm"] {
        let out = dir.path().join(format!("train-{clf}"));
        let mut args = vec!["mpp-train", "--out-dir", s(&out), "--classifier", clf];
        args.extend(split);
        ok(&args);
        let metrics = String::from_utf8(read(out.join("metrics.csv"))).unwrap();
        assert!(metrics.starts_with("train_f1,test_f1\n"));
    }
    let grid = dir.path().join("grid");
    let mut args = vec!["mpp-gridsearch", "--out-dir", s(&grid), "--classifier", "svm"];
    args.extend(split);
    ok(&args);
    let csv = String::from_utf8(read(grid.join("grid.csv"))).unwrap();
    assert_eq!(csv.lines().count(), 1 + 12);
}
