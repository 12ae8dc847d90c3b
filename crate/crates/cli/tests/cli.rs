//! End-to-end tests of the binary: every subcommand, the manifest contract,
//! exit codes, seed precedence, and run-to-run determinism.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_xrfunfold"));
    // Tests control seeding explicitly; a stray environment override would
    // make them flaky.
    c.env_remove("XRFUNFOLD_SEED");
    c
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("xrfunfold-cli-{}-{name}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = bin().args(["synth", "--no-such-flag"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = bin().arg("not-a-command").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn runtime_failures_exit_one() {
    let dir = scratch("exit1");
    let out = bin()
        .args([
            "downsample",
            "--in",
            p(&dir.join("missing.xrfc")),
            "--factor",
            "2",
            "--out",
            p(&dir.join("out.xrfc")),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
}

#[test]
fn full_pipeline_round_trip() {
    let dir = scratch("pipeline");
    let truth = dir.join("truth.xrfc");
    let guide = dir.join("guide.xrfc");
    let lr = dir.join("lr.xrfc");
    let ck = dir.join("model.xrfk");
    let rec = dir.join("recon.xrfc");
    let csv = dir.join("report.csv");

    ok(&bin()
        .args([
            "synth",
            "--spectral-channels", "4",
            "--height", "8",
            "--width", "8",
            "--regions", "5",
            "--seed", "11",
            "--out-y", p(&truth),
            "--out-z", p(&guide),
        ])
        .output()
        .unwrap());
    ok(&bin()
        .args(["downsample", "--in", p(&truth), "--factor", "2", "--out", p(&lr)])
        .output()
        .unwrap());
    ok(&bin()
        .args([
            "train",
            "--lr-xrf", p(&lr),
            "--hr-rgb", p(&guide),
            "--factor", "2",
            "--out-checkpoint", p(&ck),
            "--code-atoms", "4",
            "--num-layers", "1",
            "--pretrain-steps", "3",
            "--adversarial-steps", "2",
            "--patch-size", "4",
            "--batch-size", "2",
            "--seed", "12",
            "--log-every", "0",
        ])
        .output()
        .unwrap());
    ok(&bin()
        .args([
            "reconstruct",
            "--lr-xrf", p(&lr),
            "--hr-rgb", p(&guide),
            "--checkpoint", p(&ck),
            "--factor", "2",
            "--out", p(&rec),
        ])
        .output()
        .unwrap());
    ok(&bin()
        .args([
            "evaluate",
            "--pred", p(&rec),
            "--truth", p(&truth),
            "--label", "unfolded",
            "--out-csv", p(&csv),
            "--baseline", p(&lr),
            "--factor", "2",
        ])
        .output()
        .unwrap());

    // Every artifact exists, and each primary output carries its manifest
    // (the guide shares synth's manifest, written beside out-y).
    for f in [&truth, &guide, &lr, &ck, &rec, &csv] {
        assert!(f.exists(), "{} missing", f.display());
    }
    for primary in [&truth, &lr, &ck, &rec, &csv] {
        let mut m = primary.file_name().unwrap().to_os_string();
        m.push(".manifest");
        let manifest = primary.with_file_name(m);
        assert!(manifest.exists(), "{} missing", manifest.display());
        let text = std::fs::read_to_string(&manifest).unwrap();
        assert!(text.contains("version = "), "manifest lacks tool version");
    }

    // Per-channel maps came out beside the reconstruction.
    for c in 0..4 {
        assert!(dir.join(format!("recon-ch{c}.pgm")).exists());
    }

    // The report holds a header plus the two rows, numbers parseable.
    let report = std::fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = report.lines().collect();
    assert_eq!(lines[0], "dataset,method,rmse,psnr");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("truth,unfolded,"));
    assert!(lines[2].starts_with("truth,bilinear,"));
    for row in &lines[1..] {
        let psnr: f64 = row.rsplit(',').next().unwrap().parse().unwrap();
        assert!(psnr.is_finite() && psnr > 0.0);
    }

    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn training_is_deterministic_across_processes() {
    let dir = scratch("determinism");
    let truth = dir.join("truth.xrfc");
    let guide = dir.join("guide.xrfc");
    let lr = dir.join("lr.xrfc");

    ok(&bin()
        .args([
            "synth",
            "--spectral-channels", "3",
            "--height", "8",
            "--width", "8",
            "--regions", "4",
            "--seed", "21",
            "--out-y", p(&truth),
            "--out-z", p(&guide),
        ])
        .output()
        .unwrap());
    ok(&bin()
        .args(["downsample", "--in", p(&truth), "--factor", "2", "--out", p(&lr)])
        .output()
        .unwrap());

    let train = |out: &Path| {
        ok(&bin()
            .args([
                "train",
                "--lr-xrf", p(&lr),
                "--hr-rgb", p(&guide),
                "--factor", "2",
                "--out-checkpoint", p(out),
                "--code-atoms", "4",
                "--num-layers", "1",
                "--pretrain-steps", "2",
                "--adversarial-steps", "2",
                "--patch-size", "4",
                "--batch-size", "2",
                "--seed", "22",
                "--log-every", "0",
            ])
            .output()
            .unwrap());
    };
    let (ck_a, ck_b) = (dir.join("a.xrfk"), dir.join("b.xrfk"));
    train(&ck_a);
    train(&ck_b);
    assert_eq!(std::fs::read(&ck_a).unwrap(), std::fs::read(&ck_b).unwrap());

    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn seed_precedence_flag_config_env_default() {
    let dir = scratch("seeds");
    let spec = dir.join("spec.cfg");
    std::fs::write(&spec, "height = 8\nwidth = 8\nregions = 3\nseed = 7\n").unwrap();

    let synth = |extra_args: &[&str], env: Option<&str>, tag: &str| -> Vec<u8> {
        let y = dir.join(format!("{tag}-y.xrfc"));
        let z = dir.join(format!("{tag}-z.xrfc"));
        let mut c = bin();
        c.args(["synth", "--out-y", p(&y), "--out-z", p(&z)]);
        c.args(extra_args);
        if let Some(v) = env {
            c.env("XRFUNFOLD_SEED", v);
        }
        ok(&c.output().unwrap());
        std::fs::read(&y).unwrap()
    };

    let spec_s = p(&spec).to_string();
    let from_file = synth(&["--spec", &spec_s], None, "file");
    let flag_wins = synth(&["--spec", &spec_s, "--seed", "9"], None, "flag");
    let env_loses_to_file = synth(&["--spec", &spec_s], Some("9"), "envfile");
    let env_used = synth(&["--height", "8", "--width", "8", "--regions", "3"], Some("7"), "env");

    assert_ne!(from_file, flag_wins, "explicit flag must override the file seed");
    assert_eq!(from_file, env_loses_to_file, "environment must not override the file seed");
    assert_eq!(from_file, env_used, "environment seed must apply when nothing else sets one");

    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn config_file_drives_training_and_flags_override() {
    let dir = scratch("config");
    let truth = dir.join("truth.xrfc");
    let guide = dir.join("guide.xrfc");
    let lr = dir.join("lr.xrfc");
    ok(&bin()
        .args([
            "synth",
            "--spectral-channels", "3",
            "--height", "8",
            "--width", "8",
            "--regions", "4",
            "--seed", "31",
            "--out-y", p(&truth),
            "--out-z", p(&guide),
        ])
        .output()
        .unwrap());
    ok(&bin()
        .args(["downsample", "--in", p(&truth), "--factor", "2", "--out", p(&lr)])
        .output()
        .unwrap());

    let cfg = dir.join("train.cfg");
    std::fs::write(
        &cfg,
        "code_atoms = 4\nnum_layers = 1\npretrain_steps = 2\nadversarial_steps = 1\n\
         patch_size = 4\nbatch_size = 2\nseed = 32\n",
    )
    .unwrap();
    let ck = dir.join("model.xrfk");
    ok(&bin()
        .args([
            "train",
            "--lr-xrf", p(&lr),
            "--hr-rgb", p(&guide),
            "--factor", "2",
            "--config", p(&cfg),
            "--out-checkpoint", p(&ck),
            "--adversarial-steps", "2", // flag overrides the file's 1
            "--log-every", "0",
        ])
        .output()
        .unwrap());

    let manifest = std::fs::read_to_string(dir.join("model.xrfk.manifest")).unwrap();
    assert!(manifest.contains("adversarial_steps = 2"), "flag should win:\n{manifest}");
    assert!(manifest.contains("pretrain_steps = 2"));
    assert!(manifest.contains("seed = 32"));

    // A typo in the config file is a hard error, not a silent default.
    std::fs::write(&cfg, "code_atms = 4\n").unwrap();
    let out = bin()
        .args([
            "train",
            "--lr-xrf", p(&lr),
            "--hr-rgb", p(&guide),
            "--factor", "2",
            "--config", p(&cfg),
            "--out-checkpoint", p(&ck),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("code_atms"));

    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn gradcheck_smoke_run_passes() {
    let out = bin()
        .args(["gradcheck", "--seed", "5", "--instances", "1"])
        .output()
        .unwrap();
    ok(&out);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("families within"), "unexpected output:\n{text}");
}

#[test]
fn train_manifest_replays_to_identical_checkpoint() {
    let dir = scratch("replay");
    let truth = dir.join("truth.xrfc");
    let guide = dir.join("guide.xrfc");
    let lr = dir.join("lr.xrfc");
    let first = dir.join("first.xrfk");
    let second = dir.join("second.xrfk");

    ok(&bin()
        .args([
            "synth",
            "--spectral-channels", "4",
            "--height", "8",
            "--width", "8",
            "--regions", "5",
            "--seed", "21",
            "--out-y", p(&truth),
            "--out-z", p(&guide),
        ])
        .output()
        .unwrap());
    ok(&bin()
        .args(["downsample", "--in", p(&truth), "--factor", "2", "--out", p(&lr)])
        .output()
        .unwrap());
    ok(&bin()
        .args([
            "train",
            "--lr-xrf", p(&lr),
            "--hr-rgb", p(&guide),
            "--factor", "2",
            "--code-atoms", "4",
            "--num-layers", "1",
            "--pretrain-steps", "3",
            "--adversarial-steps", "2",
            "--patch-size", "4",
            "--batch-size", "2",
            "--seed", "33",
            "--out-checkpoint", p(&first),
        ])
        .output()
        .unwrap());

    // The manifest alone must restore every knob, including the factor;
    // only input/output paths are given again.
    ok(&bin()
        .args([
            "train",
            "--lr-xrf", p(&lr),
            "--hr-rgb", p(&guide),
            "--config", p(&dir.join("first.xrfk.manifest")),
            "--out-checkpoint", p(&second),
        ])
        .output()
        .unwrap());

    let a = std::fs::read(&first).unwrap();
    let b = std::fs::read(&second).unwrap();
    assert_eq!(a, b, "manifest replay diverged from the original run");

    std::fs::remove_dir_all(&dir).unwrap();
}
