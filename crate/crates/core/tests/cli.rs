use std::fs;
use std::path::Path;
use std::process::Command;

use textssl::cli::{run, RESOLVED_CONFIG};

const SMALL: &str = "\
image_width = 128
batch_size = 4
queue_capacity = 64
proj_dim = 16
block_width_px = 8
n_samples = 24
lexicon_size = 10
epochs = 1
probe_epochs = 2
seed = 3
";

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_textssl"))
}

fn args(list: &[&str]) -> Vec<String> {
    std::iter::once("textssl")
        .chain(list.iter().copied())
        .map(String::from)
        .collect()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let out = bin().arg("train-everything").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("category=usage"), "{err}");
    assert!(err.contains("Usage"), "{err}");
}

#[test]
fn invalid_override_and_missing_input_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["render-masks", "--out", p(dir.path()), "--set", "mask_ratio=1.5"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error: category=validation"), "{err}");

    let missing = dir.path().join("nothing-here");
    let code = run(args(&["pretrain", "--data", p(&missing), "--out", p(dir.path())]));
    assert_eq!(code, 2);
}

#[test]
fn corrupt_checkpoint_is_a_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.txt");
    fs::write(&cfg, SMALL).unwrap();
    let data = dir.path().join("d");
    assert_eq!(run(args(&["gen-data", "--config", p(&cfg), "--out", p(&data)])), 0);
    let bad = dir.path().join("bad.ckpt");
    fs::write(&bad, "TEXTSSL-CKPT 1\nstep 0\n").unwrap();
    let out = bin()
        .args([
            "probe",
            "--config",
            p(&cfg),
            "--data",
            p(&data),
            "--out",
            p(&dir.path().join("p")),
        ])
        .args(["--checkpoint", p(&bad)])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: category=integrity"));
}

#[test]
fn render_masks_writes_three_images() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(args(&["render-masks", "--seed", "5", "--out", p(dir.path())])), 0);
    for name in ["patch.png", "block.png", "combined.png", RESOLVED_CONFIG] {
        assert!(dir.path().join(name).exists(), "{name}");
    }
    let img = image::open(dir.path().join("combined.png")).unwrap().to_luma8();
    assert_eq!((img.width(), img.height()), (128, 32));
    let resolved = fs::read_to_string(dir.path().join(RESOLVED_CONFIG)).unwrap();
    assert!(resolved.contains("seed = 5"));
}

#[test]
fn pipeline_and_replay_from_resolved_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.txt");
    fs::write(&cfg, SMALL).unwrap();
    let data = dir.path().join("d");
    let run_dir = dir.path().join("r");
    assert_eq!(run(args(&["gen-data", "--config", p(&cfg), "--out", p(&data)])), 0);
    assert!(data.join("index.tsv").exists());

    let code = run(args(&[
        "pretrain",
        "--config",
        p(&cfg),
        "--data",
        p(&data),
        "--out",
        p(&run_dir),
        "--levels",
        "frame,word",
        "--mask",
        "block",
        "--mask-ratio",
        "0.5",
    ]));
    assert_eq!(code, 0);
    let metrics = fs::read_to_string(run_dir.join("metrics.tsv")).unwrap();
    assert!(metrics.lines().count() > 0);
    assert!(metrics.lines().all(|l| l.split('\t').count() == 6));
    let ckpt = run_dir.join("epoch-001.ckpt");
    assert!(ckpt.exists());

    // The snapshot alone reproduces the run.
    let replay = dir.path().join("replay");
    let resolved = run_dir.join(RESOLVED_CONFIG);
    assert_eq!(
        run(args(&[
            "pretrain",
            "--config",
            p(&resolved),
            "--data",
            p(&data),
            "--out",
            p(&replay)
        ])),
        0
    );
    assert_eq!(fs::read(replay.join("metrics.tsv")).unwrap(), metrics.as_bytes());

    let probe_dir = dir.path().join("p");
    let code = run(args(&[
        "probe",
        "--config",
        p(&resolved),
        "--data",
        p(&data),
        "--out",
        p(&probe_dir),
        "--checkpoint",
        p(&ckpt),
    ]));
    assert_eq!(code, 0);
    let record = fs::read_to_string(probe_dir.join("probe_result.txt")).unwrap();
    assert!(record.contains("word_accuracy="), "{record}");

    let emb_dir = dir.path().join("e");
    let code = run(args(&[
        "export-embeddings",
        "--config",
        p(&resolved),
        "--data",
        p(&data),
        "--out",
        p(&emb_dir),
        "--checkpoint",
        p(&ckpt),
        "--tap",
        "projector",
        "--split",
        "train",
    ]));
    assert_eq!(code, 0);
    let rows = fs::read_to_string(emb_dir.join("embeddings.tsv")).unwrap();
    let header = rows.lines().next().unwrap();
    assert_eq!(header.split('\t').count(), 3 + 16);
}
