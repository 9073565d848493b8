use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 5
stats = "estimate"
steps = 4
batch_size = 4
clip_frames = 32
checkpoint_every = 2
probe_seeds = [0]

[encoder]
depth = 1
dim = 16
heads = 2
mlp_ratio = 2.0
patch_f = 16
patch_t = 8

[predictor]
depth = 1
dim = 8
heads = 2
mlp_ratio = 2.0

[data.synth]
n_classes = 2
clips_per_class = 6
duration_s = 0.5
"#;

fn m2d(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_m2d")).args(args).output().unwrap()
}

fn arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_config(dir: &Path, text: &str) -> std::path::PathBuf {
    let p = dir.join("run.toml");
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn pretrain_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = m2d(&["pretrain", "--config", arg(&cfg), "--out", arg(out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        assert!(String::from_utf8_lossy(&o.stdout).contains("trained 4 steps"));
    }
    for f in ["metrics.jsonl", "checkpoint.m2d", "checkpoint-00000002.m2d"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn extract_and_probe_write_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let run = dir.path().join("run");
    assert!(m2d(&["pretrain", "--config", arg(&cfg), "--out", arg(&run)]).status.success());
    let ck = run.join("checkpoint.m2d");

    let feats = dir.path().join("feats");
    let o = m2d(&["extract", "--config", arg(&cfg), "--checkpoint", arg(&ck), "--out", arg(&feats)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["frames.m2df", "clips.m2df", "manifest.tsv"] {
        assert!(feats.join(f).is_file(), "{f}");
    }
    let manifest = std::fs::read_to_string(feats.join("manifest.tsv")).unwrap();
    assert!(manifest.lines().filter(|l| !l.starts_with('#') && !l.is_empty()).count() >= 12);

    let probe = dir.path().join("probe");
    let o = m2d(&["probe", "--config", arg(&cfg), "--checkpoint", arg(&ck), "--out", arg(&probe)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let lines = std::fs::read_to_string(probe.join("probe.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 1);
    assert!(lines.contains("\"accuracy\""));
}

#[test]
fn pretrain_x_without_offline_section_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let o = m2d(&["pretrain-x", "--config", arg(&cfg), "--out", arg(&dir.path().join("x"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("error"));
}

#[test]
fn bad_input_fails() {
    assert!(!m2d(&["frobnicate"]).status.success());
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "mask_ratio = 1.5\n");
    assert_eq!(m2d(&["pretrain", "--config", arg(&cfg)]).status.code(), Some(2));
    let missing = dir.path().join("none.m2d");
    let o = m2d(&["probe", "--checkpoint", arg(&missing), "--out", arg(dir.path())]);
    assert_eq!(o.status.code(), Some(3));
}
