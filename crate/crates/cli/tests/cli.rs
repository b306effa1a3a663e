//! Drives the `sdpcert` binary through temporary run directories.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const DATA: &str = "synth_classes = 3\nsynth_dim = 8\nsynth_count = 240\nsynth_seed = 7\n";
const HELD_OUT: &str =
    "synth_classes = 3\nsynth_dim = 8\nsynth_count = 240\nsynth_seed = 7\nskip = 180\n";

fn run(dir: &Path, cmd: &str, name: &str, body: &str) -> Output {
    let cfg = dir.join(name);
    fs::write(&cfg, body).unwrap();
    Command::new(env!("CARGO_BIN_EXE_sdpcert"))
        .arg(cmd)
        .arg(&cfg)
        .output()
        .unwrap()
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn read(p: impl AsRef<Path>) -> String {
    fs::read_to_string(p).unwrap()
}

/// Column `col` of every data row.
fn column(csv: &str, col: &str) -> Vec<f64> {
    let mut lines = csv.lines();
    let idx = lines
        .next()
        .unwrap()
        .split(',')
        .position(|c| c == col)
        .unwrap();
    lines
        .map(|l| l.split(',').nth(idx).unwrap().parse().unwrap())
        .collect()
}

fn train_sdp(dir: &Path, out_dir: &str) {
    ok(run(
        dir,
        "train",
        &format!("{out_dir}.cfg"),
        &format!(
            "{DATA}limit = 180\nobjective = sdp_dual\nloss = hinge\nlambda = 0.05\nhidden = 12\nepochs = 8\nbatch_size = 32\nlr = 0.01\nseed = 1\ncheckpoint_every = 4\nout_dir = {out_dir}\n"
        ),
    ));
}

#[test]
fn normal_training_fits_synthetic_data() {
    let t = TempDir::new().unwrap();
    let stdout = ok(run(
        t.path(),
        "train",
        "t.cfg",
        &format!("{DATA}objective = normal\nloss = hinge\nhidden = 16\nepochs = 30\nlr = 0.01\nbatch_size = 16\nout_dir = run\n"),
    ));
    assert!(stdout.contains("weight_hash"));
    let errors = column(&read(t.path().join("run/train_log.csv")), "clean_error");
    assert_eq!(errors.len(), 30);
    assert_eq!(*errors.last().unwrap(), 0.0);
    assert!(t.path().join("run/weights.bin").exists());
    assert!(!t.path().join("run/certificate.json").exists());
}

#[test]
fn zero_lambda_log_equals_normal_log() {
    let t = TempDir::new().unwrap();
    let common = format!("{DATA}loss = hinge\nhidden = 10\nepochs = 4\nlr = 0.01\nseed = 3\n");
    ok(run(
        t.path(),
        "train",
        "a.cfg",
        &format!("{common}objective = normal\nout_dir = a\n"),
    ));
    ok(run(
        t.path(),
        "train",
        "b.cfg",
        &format!("{common}objective = sdp_dual\nlambda = 0\nout_dir = b\n"),
    ));
    assert_eq!(
        read(t.path().join("a/train_log.csv")),
        read(t.path().join("b/train_log.csv"))
    );
    assert_eq!(
        fs::read(t.path().join("a/weights.bin")).unwrap(),
        fs::read(t.path().join("b/weights.bin")).unwrap()
    );
}

#[test]
fn missing_dataset_fails_without_outputs() {
    let t = TempDir::new().unwrap();
    let out = run(
        t.path(),
        "train",
        "t.cfg",
        "images = nope-images\nlabels = nope-labels\nobjective = normal\nepochs = 1\nout_dir = run\n",
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("t.cfg:1"));
    assert!(!t.path().join("run").exists());
}

#[test]
fn config_errors_name_the_line() {
    let t = TempDir::new().unwrap();
    for (body, line) in [
        ("objective = normal\nepochs = lots\nout_dir = x\n", ":2"),
        ("objective = normal\nepochs = 1\nepochs = 2\n", ":3"),
        ("objective = normal\n\n\nepochs = 1\nout_dir = x\nsynth_classes = 2\nsynth_dim = 2\nsynth_count = 4\nfrobnicate = 1\n", ":9"),
        ("objective = fancy\n", ":1"),
        ("just words\n", ":1"),
    ] {
        let out = run(t.path(), "train", "bad.cfg", body);
        assert_eq!(out.status.code(), Some(1), "{body}");
        let err = String::from_utf8_lossy(&out.stderr);
        assert!(err.contains(&format!("bad.cfg{line}")), "{body}: {err}");
    }
    let out = Command::new(env!("CARGO_BIN_EXE_sdpcert"))
        .arg("nonsense")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn certify_attack_report_pipeline() {
    let t = TempDir::new().unwrap();
    let dir = t.path();
    train_sdp(dir, "run");
    assert!(dir.join("run/checkpoints/epoch_0004.bin").exists());
    assert!(dir.join("run/certificate.json").exists());

    ok(run(
        dir,
        "certify",
        "c.cfg",
        &format!("{HELD_OUT}weights = run/weights.bin\nepsilons = 0, 0.05, 0.1\ndual_steps = 300\nout_dir = cert\n"),
    ));
    let bounds = read(dir.join("cert/bounds.csv"));
    let clean = column(&bounds, "clean_error");
    let sdp = column(&bounds, "sdp_error");
    let spectral = column(&bounds, "spectral_error");
    let frobenius = column(&bounds, "frobenius_error");
    assert_eq!(sdp[0], clean[0]);
    assert_eq!(spectral[0], clean[0]);
    for r in 0..3 {
        assert!(spectral[r] <= frobenius[r]);
        assert!(sdp[r] >= clean[r]);
    }

    ok(run(
        dir,
        "attack",
        "a.cfg",
        &format!("{HELD_OUT}weights = run/weights.bin\nepsilons = 0, 0.05, 0.1\nattacks = fgsm, pgd\nout_dir = atk\n"),
    ));
    let summary = read(dir.join("atk/attack_summary.csv"));
    assert!(summary.starts_with("weight_hash,data_hash,attack,epsilon,clean_error,error\n"));
    let errs = column(&summary, "error");
    let cleans = column(&summary, "clean_error");
    // Rows: fgsm at each radius, then pgd at each radius.
    assert_eq!(errs[0], cleans[0]);
    assert_eq!(errs[3], cleans[3]);
    for eps in ["0.05", "0.1"] {
        // Every example FGSM breaks, PGD breaks too.
        let f = column(
            &read(dir.join(format!("atk/attack_fgsm_eps{eps}.csv"))),
            "attacked_correct",
        );
        let p = column(
            &read(dir.join(format!("atk/attack_pgd_eps{eps}.csv"))),
            "attacked_correct",
        );
        assert!(f.iter().zip(&p).all(|(f, p)| p <= f), "eps {eps}");
    }

    let report_cfg = format!(
        "{HELD_OUT}weights = run/weights.bin\ncertificate = cert/certificate.json\nattack_summary = atk/attack_summary.csv\nout = report.csv\n"
    );
    let stdout = ok(run(dir, "report", "r.cfg", &report_cfg));
    assert!(stdout.starts_with("epsilon,clean_error,attack_error,certified_error,sandwich\n"));
    assert!(!stdout.contains("VIOLATED"));

    // A certificate whose claimed bounds were lowered must be refused.
    let cert = read(dir.join("cert/certificate.json"));
    let mut json: serde_json::Value = serde_json::from_str(&cert).unwrap();
    let v = json["pairs"][0]["dual_value"].as_f64().unwrap();
    json["pairs"][0]["dual_value"] = serde_json::json!(v * 0.5);
    fs::write(dir.join("cert/certificate.json"), json.to_string()).unwrap();
    let out = run(dir, "report", "r.cfg", &report_cfg);
    assert_eq!(
        out.status.code(),
        Some(2),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    fs::write(dir.join("cert/certificate.json"), &cert).unwrap();

    // Attack results for other data do not match.
    let other = report_cfg.replace("synth_seed = 7", "synth_seed = 8");
    let out = run(dir, "report", "r2.cfg", &other);
    assert_eq!(out.status.code(), Some(2));

    // Different weights do not match either.
    train_sdp(dir, "other");
    let out = run(
        dir,
        "report",
        "r3.cfg",
        &report_cfg.replace("run/weights.bin", "other/checkpoints/epoch_0004.bin"),
    );
    assert_ne!(out.status.code(), Some(0));
}

#[test]
fn runs_are_deterministic() {
    let t = TempDir::new().unwrap();
    train_sdp(t.path(), "one");
    train_sdp(t.path(), "two");
    for f in ["train_log.csv", "certificate.json"] {
        assert_eq!(
            read(t.path().join("one").join(f)),
            read(t.path().join("two").join(f)),
            "{f}"
        );
    }
    assert_eq!(
        fs::read(t.path().join("one/checkpoint.bin")).unwrap(),
        fs::read(t.path().join("two/checkpoint.bin")).unwrap()
    );
}
