use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"{
  "dataset": {"synthetic": {"count": 30}},
  "ddpm": {"train": {"steps": 5}},
  "baseline": {"epochs": 1},
  "diffyolo": {"epochs": 1}
}"#;

fn diffyolo(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_diffyolo")).current_dir(dir).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&diffyolo(d, &["--help"])), 0);
    assert_eq!(code(&diffyolo(d, &["frobnicate"])), 1);
    assert_eq!(code(&diffyolo(d, &["detect-train", "--mode", "sideways", "--out", "x"])), 1);

    fs::write(d.join("typo.json"), r#"{"ddpm": {"unet": {"base_chanels": 8}}}"#).unwrap();
    let o = diffyolo(d, &["--config", "typo.json", "run"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("ddpm.unet.base_chanels"), "{}", stderr(&o));

    fs::write(d.join("stride.json"), r#"{"detector": {"injection": {"stride": 4}}}"#).unwrap();
    let o = diffyolo(d, &["--config", "stride.json", "run"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("detector.injection.stride"), "{}", stderr(&o));

    let o = diffyolo(d, &["noise-gen", "--kind", "poisson", "--sigma", "0.1", "--in", ".", "--out", "o"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("--sigma"));
    assert_eq!(code(&diffyolo(d, &["evaluate", "--ckpt", "c", "--noise", "blur", "--out", "r.json"])), 1);
}

#[test]
fn stage_failures_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("junk.ckpt"), b"not a checkpoint").unwrap();
    let o = diffyolo(d, &["evaluate", "--ckpt", "junk.ckpt", "--out", "r.json"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn stepwise_commands_chain_and_guard_provenance() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("small.json"), SMALL).unwrap();
    let ok = |args: &[&str]| {
        let mut full = vec!["--config", "small.json"];
        full.extend_from_slice(args);
        let o = diffyolo(d, &full);
        assert_eq!(code(&o), 0, "{args:?}: {}", stderr(&o));
        String::from_utf8_lossy(&o.stdout).into_owned()
    };

    let text = ok(&["run", "--out", "run"]);
    assert!(text.contains("condition: none"));
    assert_eq!(fs::read_dir(d.join("run/eval")).unwrap().count(), 8);

    ok(&["noise-gen", "--kind", "gaussian", "--sigma", "0.1", "--in", "run/data/images", "--out", "noisy"]);
    assert_eq!(fs::read_dir(d.join("noisy")).unwrap().count(), fs::read_dir(d.join("run/data/images")).unwrap().count());

    ok(&["--seed", "5", "ddpm-train", "--out", "ddpm.ckpt"]);
    ok(&["feature-cache", "--data", "run/data/images", "--ddpm", "ddpm.ckpt", "--out", "feats"]);
    ok(&["detect-train", "--mode", "baseline", "--out", "base.ckpt"]);
    ok(&["detect-train", "--mode", "diffyolo", "--init", "base.ckpt", "--features", "feats/manifest.json", "--out", "diff.ckpt"]);
    ok(&["evaluate", "--ckpt", "base.ckpt", "--noise", "gaussian:sigma=0.1,seed=3", "--out", "b.json"]);
    ok(&["evaluate", "--ckpt", "diff.ckpt", "--ddpm", "ddpm.ckpt", "--noise", "gaussian:sigma=0.1,seed=3", "--out", "d.json"]);
    let text = ok(&["report", "--pair", "b.json", "d.json", "--out", "cmp"]);
    assert!(text.contains("condition: gaussian"));
    assert!(d.join("cmp/comparison.csv").is_file());

    // the run trained its diffusion model with another seed, so these features are refused
    let o = diffyolo(
        d,
        &["--config", "small.json", "detect-train", "--mode", "diffyolo", "--init", "base.ckpt", "--features", "feats", "--ddpm", "run/ddpm/ddpm.ckpt", "--out", "x.ckpt"],
    );
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    let o = diffyolo(d, &["--config", "small.json", "evaluate", "--ckpt", "diff.ckpt", "--out", "x.json"]);
    assert_eq!(code(&o), 1);
}
