//! Command-line behaviour: exit codes, output files, reproducibility.

use std::fs;
use std::path::Path;

fn cpr(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("cpr").chain(args.iter().copied());
    let code = cpr_cli::run(argv, &mut out, &mut err);
    (
        code,
        String::from_utf8(out).unwrap(),
        String::from_utf8(err).unwrap(),
    )
}

fn ok(args: &[&str]) -> String {
    let (code, out, err) = cpr(args);
    assert_eq!(code, 0, "{args:?}\nstdout:\n{out}\nstderr:\n{err}");
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SMALL: &[&str] = &[
    "--n",
    "30",
    "--width",
    "32",
    "--height",
    "32",
    "--object-scale",
    "8",
    "--translation-range",
    "4",
];

fn synth_small(dir: &Path, seed: &str) {
    let mut args = vec!["synth", "--out", p(dir), "--seed", seed];
    args.extend_from_slice(SMALL);
    ok(&args);
}

fn value(out: &str, key: &str) -> f64 {
    out.lines()
        .find_map(|l| l.strip_prefix(key).map(|v| v.trim().parse().unwrap()))
        .unwrap_or_else(|| panic!("no {key} in\n{out}"))
}

#[test]
fn missing_required_option_is_an_input_error() {
    let (code, _, err) = cpr(&["synth"]);
    assert_eq!(code, 2);
    assert!(err.contains("--out"), "{err}");
    let (code, _, _) = cpr(&["train", "--out", "x.cbp"]);
    assert_eq!(code, 2);
    let (code, _, err) = cpr(&["train", "--data", "/nonexistent/cpr-data", "--out", "x.cbp"]);
    assert_eq!(code, 2);
    assert!(err.contains("/nonexistent/cpr-data"), "{err}");
    let (code, _, _) = cpr(&["bogus"]);
    assert_eq!(code, 2);
    let (code, _, _) = cpr(&["synth", "--out", "x", "--n", "many"]);
    assert_eq!(code, 2);
}

#[test]
fn zero_stages_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth_small(&data, "1");
    let (code, _, err) = cpr(&[
        "train",
        "--data",
        p(&data),
        "--out",
        p(&dir.path().join("m.cbp")),
        "--stages",
        "0",
    ]);
    assert_eq!(code, 2, "{err}");
}

#[test]
fn config_file_and_flag_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(
        &cfg,
        format!(
            "n = 12\nwidth = 32\nheight = 32\nout = {}\n",
            p(&dir.path().join("a"))
        ),
    )
    .unwrap();
    let out = ok(&["synth", "--config", p(&cfg), "--n", "7"]);
    assert!(out.contains("wrote 7 "), "{out}");
    assert!(dir.path().join("a/img_00006.pgm").exists());
    fs::write(&cfg, "nonsense = 1\n").unwrap();
    assert_eq!(cpr(&["synth", "--config", p(&cfg)]).0, 2);
}

#[test]
fn kind_mismatch_and_corrupt_model_are_input_errors() {
    let dir = tempfile::tempdir().unwrap();
    let sim = dir.path().join("sim");
    synth_small(&sim, "1");
    let lm = dir.path().join("lm");
    let mut args = vec!["synth", "--out", p(&lm), "--kind", "landmark"];
    args.extend_from_slice(SMALL);
    ok(&args);
    let model = dir.path().join("m.cbp");
    ok(&[
        "train",
        "--data",
        p(&sim),
        "--out",
        p(&model),
        "--stages",
        "2",
        "--n-aug",
        "1",
    ]);
    let metrics = dir.path().join("e.csv");
    let (code, _, err) = cpr(&[
        "eval",
        "--data",
        p(&lm),
        "--model",
        p(&model),
        "--metrics",
        p(&metrics),
    ]);
    assert_eq!(code, 2, "{err}");
    assert!(
        err.contains("similarity") && err.contains("landmark"),
        "{err}"
    );
    let (code, _, _) = cpr(&[
        "finetune",
        "--data",
        p(&lm),
        "--model",
        p(&model),
        "--out",
        p(&dir.path().join("f.cbp")),
        "--history",
        p(&dir.path().join("h.csv")),
    ]);
    assert_eq!(code, 2);

    let bytes = fs::read(&model).unwrap();
    let broken = dir.path().join("broken.cbp");
    fs::write(&broken, &bytes[..bytes.len() - 3]).unwrap();
    let (code, _, err) = cpr(&[
        "eval",
        "--data",
        p(&sim),
        "--model",
        p(&broken),
        "--metrics",
        p(&metrics),
    ]);
    assert_eq!(code, 2);
    assert!(err.contains("broken.cbp"), "{err}");
    let mut bad = bytes.clone();
    bad[0] = b'X';
    fs::write(&broken, &bad).unwrap();
    assert_eq!(
        cpr(&[
            "eval",
            "--data",
            p(&sim),
            "--model",
            p(&broken),
            "--metrics",
            p(&metrics)
        ])
        .0,
        2
    );
}

#[test]
fn zero_learning_rate_leaves_model_file_identical() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth_small(&data, "2");
    let model = dir.path().join("m.cbp");
    ok(&[
        "train",
        "--data",
        p(&data),
        "--out",
        p(&model),
        "--stages",
        "2",
        "--n-aug",
        "2",
    ]);
    let tuned = dir.path().join("t.cbp");
    let hist = dir.path().join("h.csv");
    ok(&[
        "finetune",
        "--data",
        p(&data),
        "--model",
        p(&model),
        "--out",
        p(&tuned),
        "--history",
        p(&hist),
        "--lr",
        "0",
        "--epochs",
        "2",
    ]);
    assert_eq!(fs::read(&model).unwrap(), fs::read(&tuned).unwrap());
    let csv = fs::read_to_string(&hist).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "epoch,mean_train_loss");
    assert_eq!(lines.len(), 3);
}

#[test]
fn repeated_runs_produce_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        let root = dir.path().join(run);
        let data = root.join("data");
        synth_small(&data, "3");
        let model = root.join("m.cbp");
        let train_out = ok(&[
            "train",
            "--data",
            p(&data),
            "--out",
            p(&model),
            "--stages",
            "3",
            "--n-aug",
            "2",
        ]);
        let tuned = root.join("t.cbp");
        let hist = root.join("h.csv");
        ok(&[
            "finetune",
            "--data",
            p(&data),
            "--model",
            p(&model),
            "--out",
            p(&tuned),
            "--history",
            p(&hist),
            "--epochs",
            "2",
            "--batch-size",
            "8",
            "--workers",
            if run == "a" { "1" } else { "3" },
        ]);
        let strip = |s: String| {
            s.lines()
                .filter(|l| !l.starts_with("# time:") && !l.starts_with("wrote"))
                .collect::<Vec<_>>()
                .join("\n")
        };
        let mut files = Vec::new();
        for f in [
            "data/manifest.txt",
            "data/img_00000.pgm",
            "data/img_00029.pgm",
            "m.cbp",
            "t.cbp",
            "h.csv",
        ] {
            files.push(fs::read(root.join(f)).unwrap());
        }
        outputs.push((strip(train_out), files));
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn eval_agrees_with_training_report() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth_small(&data, "4");
    let model = dir.path().join("m.cbp");
    let out = ok(&[
        "train",
        "--data",
        p(&data),
        "--out",
        p(&model),
        "--stages",
        "3",
        "--n-aug",
        "2",
    ]);
    let metrics = dir.path().join("e.csv");
    let eval = ok(&[
        "eval",
        "--data",
        p(&data),
        "--model",
        p(&model),
        "--metrics",
        p(&metrics),
    ]);
    let train_nme = value(&out, "final_mean_normalized_error");
    let eval_nme = value(&eval, "mean_normalized_error");
    assert!(
        (train_nme - eval_nme).abs() <= 1e-12 * train_nme.max(1e-300),
        "{train_nme} vs {eval_nme}"
    );
    // Stage-0 error is the error of predicting the mean pose.
    let stage0: f64 = out
        .lines()
        .nth(1)
        .unwrap()
        .split_whitespace()
        .nth(2)
        .unwrap()
        .parse()
        .unwrap();
    assert!(stage0 > eval_nme);

    let csv = fs::read_to_string(&metrics).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("sample_index,normalized_error"));
    let errs: Vec<f64> = lines
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    assert_eq!(errs.len(), 30);
    let mean = errs.iter().sum::<f64>() / 30.0;
    assert!((mean - eval_nme).abs() <= 1e-12 * eval_nme);
}

#[test]
fn untrained_model_scores_the_mean_pose() {
    use cpr::cascade::{mean_pose, prepare_samples};
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth_small(&data, "5");
    let ds = cpr::load_dataset(&data).unwrap();
    let spec = cpr::FeatureSpec::random(
        &ds.pose,
        &cpr::FeatureConfig {
            num_points: 4,
            ..Default::default()
        },
    )
    .unwrap();
    let samples = prepare_samples(&ds, &spec).unwrap();
    let mean = mean_pose(&samples, 4);
    let model = cpr::CascadeModel::identity(ds.pose, spec, 2, mean.clone()).unwrap();
    let path = dir.path().join("zero.cbp");
    cpr::save_model(&model, &path).unwrap();
    let metrics = dir.path().join("e.csv");
    let eval = ok(&[
        "eval",
        "--data",
        p(&data),
        "--model",
        p(&path),
        "--metrics",
        p(&metrics),
    ]);
    let expect = samples
        .iter()
        .map(|s| {
            ds.pose
                .normalized_error(&mean, &s.p_true, s.norm_const)
                .unwrap()
        })
        .sum::<f64>()
        / samples.len() as f64;
    assert!((value(&eval, "mean_normalized_error") - expect).abs() <= 1e-15);
}

#[test]
fn gradcheck_passes_and_catches_injected_fault() {
    let out = ok(&["gradcheck", "--draws", "4"]);
    assert!(out.contains("gradient check passed"), "{out}");
    let (code, out, err) = cpr(&["gradcheck", "--draws", "4", "--inject-fault", "negate-db"]);
    assert_eq!(code, 5, "{out}");
    assert!(err.contains("b1"), "{err}");
    assert!(!err.contains("W1"), "{err}");
}

#[test]
fn help_exits_cleanly() {
    let (code, out, _) = cpr(&["--help"]);
    assert_eq!(code, 0);
    assert!(out.contains("finetune"));
}

#[test]
fn binary_reports_exit_code() {
    let status = std::process::Command::new(env!("CARGO_BIN_EXE_cpr"))
        .arg("synth")
        .output()
        .unwrap();
    assert_eq!(status.status.code(), Some(2));
}
