use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "--train-count",
    "300",
    "--test-count",
    "30",
    "--k",
    "16",
    "--k2",
    "3",
    "--svm-epochs",
    "3",
    "--occlusion",
    "0,0.33",
];

fn fastrec(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fastrec"))
        .args(args)
        .env_remove("RUST_BACKTRACE")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = fastrec(args);
    assert!(
        out.status.success(),
        "fastrec {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn with_tiny<'a>(head: &[&'a str]) -> Vec<&'a str> {
    head.iter().copied().chain(TINY.iter().copied()).collect()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn train_then_eval_with_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let art = dir.path().join("art");
    ok(&with_tiny(&["train", "--out", path(&art)]));
    for f in [
        "dictionary.bin",
        "store.bin",
        "memory.bin",
        "bank.bin",
        "manifest.txt",
    ] {
        assert!(art.join(f).is_file(), "{f} missing");
    }

    let traj = dir.path().join("traj.jsonl");
    let stdout = ok(&with_tiny(&[
        "eval",
        "--artifacts",
        path(&art),
        "--trajectory",
        path(&traj),
        "--scheme",
        "wta,average",
    ]));
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines[0], "occlusion,config,feedforward_accuracy,accuracy");
    assert_eq!(lines.len(), 1 + 2 * 2);

    let records: Vec<serde_json::Value> = fs::read_to_string(&traj)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(records.len(), 30 * 2 * 2);
    let first = &records[0];
    for key in ["image", "occlusion", "truth", "label", "config", "records"] {
        assert!(first.get(key).is_some(), "trajectory line lacks `{key}`");
    }
    // three iterations plus the final readout
    assert_eq!(first["records"].as_array().unwrap().len(), 4);
    assert_eq!(first["records"][0]["alpha"], 0.5);
    assert_eq!(first["records"][1]["alpha"], 0.25);
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.conf");
    fs::write(
        &cfg,
        "# tiny run\nk = 16\niterations = 2\nsvm_epochs = 3\nalpha = 0.25\n",
    )
    .unwrap();
    let out = dir.path().join("sweep");
    ok(&[
        "--config",
        path(&cfg),
        "sweep",
        "--out",
        path(&out),
        "--train-count",
        "300",
        "--test-count",
        "30",
        "--k2",
        "3",
        "--occlusion",
        "0.33",
        "--iterations",
        "1",
        "--m",
        "2",
    ]);
    let manifest = fs::read_to_string(out.join("manifest.txt")).unwrap();
    for line in ["k = 16", "iterations = 1", "alpha = 0.25", "hypotheses = 2"] {
        assert!(
            manifest.lines().any(|l| l == line),
            "manifest lacks `{line}`:\n{manifest}"
        );
    }
}

#[test]
fn sweep_is_reproducible_and_writes_plots() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let first = ok(&with_tiny(&[
        "sweep",
        "--out",
        path(&a),
        "--scheme",
        "wta,ncs",
    ]));
    ok(&with_tiny(&[
        "sweep",
        "--out",
        path(&b),
        "--scheme",
        "wta,ncs",
    ]));
    let csv = fs::read(a.join("results.csv")).unwrap();
    assert_eq!(csv, fs::read(b.join("results.csv")).unwrap());
    assert_eq!(first.as_bytes(), &csv[..]);
    // 2 occlusions x (feedforward + 2 schemes)
    assert_eq!(first.lines().count(), 1 + 6);
    assert!(a.join("timing.csv").is_file());
    assert!(a.join("plots/occlusion_accuracy.tsv").is_file());
}

#[test]
fn toy_table_has_one_row_per_grid_point() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("toy.csv");
    let stdout = ok(&[
        "toy",
        "--trials",
        "2000",
        "--distortion",
        "0,2",
        "--alpha",
        "1,inf",
        "--exact-step",
        "0.1",
        "--out",
        path(&out),
    ]);
    assert_eq!(stdout, fs::read_to_string(&out).unwrap());
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines.len(), 1 + 4);
    assert!(lines[0].starts_with("distortion,alpha,trials,error_before"));
    assert!(lines[4].starts_with("2,inf,2000,"));
}

#[test]
fn rbm_baseline_rows_and_saved_model() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("rbm");
    let model = dir.path().join("rbm.bin");
    let stdout = ok(&with_tiny(&[
        "rbm-baseline",
        "--out",
        path(&out),
        "--save-model",
        path(&model),
        "--rbm-hidden",
        "16",
        "--rbm-epochs",
        "2",
        "--gibbs-epochs",
        "0,1",
    ]));
    // 2 occlusions x 2 Gibbs settings
    assert_eq!(stdout.lines().count(), 1 + 4);
    assert!(stdout.lines().skip(1).all(|l| l.starts_with("rbm,")));
    assert!(model.is_file());
}

#[test]
fn timing_writes_a_fit_per_configuration() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("timing");
    let stdout = ok(&[
        "timing",
        "--out",
        path(&out),
        "--k2",
        "2,3",
        "--train-count",
        "300",
        "--test-count",
        "30",
        "--k",
        "16",
        "--svm-epochs",
        "3",
    ]);
    assert!(stdout.contains("R^2 ="));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("timing_report.json")).unwrap()).unwrap();
    let fits = report["fits"].as_array().unwrap();
    assert_eq!(fits.len(), 1);
    // m * T distance evaluations per unit of K2
    assert_eq!(
        fits[0]["distance_evals"]["slope"].as_f64().unwrap().round(),
        9.0
    );
}

#[test]
fn unwritable_output_dir_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, "not a directory").unwrap();
    let out = fastrec(&with_tiny(&["sweep", "--out", path(&blocker.join("sub"))]));
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("output directory"), "{stderr}");
}

#[test]
fn unknown_setting_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.conf");
    fs::write(&cfg, "k = 16\nwarp-speed = 9\n").unwrap();
    let out = fastrec(&[
        "--config",
        path(&cfg),
        "sweep",
        "--out",
        path(&dir.path().join("o")),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("warp-speed"));
}
