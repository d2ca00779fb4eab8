use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "data.n_cases=120",
    "data.n_findings=4",
    "data.min_count=1",
    "vision.d_feat=16",
    "vision.regions=3",
    "model.d_model=16",
    "model.heads=2",
    "model.d_ff=32",
    "mvco.d_proj=16",
    "cmc.d_sem=8",
    "pretrain.epochs=2",
    "pretrain.warmup_steps=10",
    "rl.epochs=1",
];

fn mvreport(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_mvreport")).args(args).output().unwrap();
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn with_tiny(mut args: Vec<&str>) -> Vec<&str> {
    for s in TINY {
        args.push("--set");
        args.push(s);
    }
    args
}

fn golden(f: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/data/golden").join(f)
}

#[test]
fn score_writes_bundle() {
    let dir = tempfile::tempdir().unwrap();
    let json = dir.path().join("scores.json");
    let (h, r) = (golden("hyp.txt"), golden("ref.txt"));
    let out = mvreport(&[
        "score",
        "--hyp",
        h.to_str().unwrap(),
        "--ref",
        r.to_str().unwrap(),
        "--out",
        json.to_str().unwrap(),
    ]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("BLEU-4"));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(json).unwrap()).unwrap();
    let b4 = v["bleu4"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&b4));
}

#[test]
fn score_rejects_length_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let h = dir.path().join("h.txt");
    std::fs::write(&h, "a b\n").unwrap();
    let r = golden("ref.txt");
    let out = Command::new(env!("CARGO_BIN_EXE_mvreport"))
        .args(["score", "--hyp", h.to_str().unwrap(), "--ref", r.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(!out.status.success());
}

fn pipeline(dir: &Path) {
    let d = |s: &str| dir.join(s).to_str().unwrap().to_string();
    let (data, train, rl, eval, export) = (d("data"), d("train"), d("rl"), d("eval.json"), d("export"));
    mvreport(&with_tiny(vec!["prepare-data", "--out", &data]));
    for f in ["manifest.jsonl", "split.json", "vocab.json"] {
        assert!(dir.join("data").join(f).exists(), "{f}");
    }
    mvreport(&with_tiny(vec!["train", "--out", &train]));
    let ck = d("train/last.json");
    mvreport(&["rl-finetune", "--checkpoint", &ck, "--out", &rl]);
    let out = mvreport(&["evaluate", "--checkpoint", &ck, "--views", "both,frontal", "--out", &eval]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("relative BLEU-4 gap both vs frontal"));
    mvreport(&["export", "similarity-matrices", "--checkpoint", &ck, "--out", &export]);
    mvreport(&["export", "semantic-embeddings", "--checkpoint", &ck, "--out", &export]);
}

#[test]
fn full_pipeline_is_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    pipeline(a.path());
    pipeline(b.path());
    for f in [
        "train/record.json",
        "train/epochs.csv",
        "train/last.json",
        "rl/record.json",
        "rl/rl_last.json",
        "eval.json",
        "export/semantic_embeddings.csv",
        "export/similarity_frontal_pred.csv",
    ] {
        let (x, y) = (std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap());
        assert_eq!(x, y, "{f} differs between runs");
    }
}

#[test]
fn mismatched_config_is_refused_without_force() {
    let dir = tempfile::tempdir().unwrap();
    let train = dir.path().join("train");
    mvreport(&with_tiny(vec!["train", "--out", train.to_str().unwrap()]));
    let ck = train.join("last.json");
    let mut args = with_tiny(vec!["evaluate", "--checkpoint", ck.to_str().unwrap()]);
    args.extend(["--set", "model.d_model=24"]);
    let out = Command::new(env!("CARGO_BIN_EXE_mvreport")).args(&args).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).to_lowercase().contains("checkpoint"));
}
