use std::fs;
use std::path::Path;

use polytax_cli::{manifest_header, run, MANIFEST};

fn polytax(args: &[&str]) -> (i32, String, String) {
    let mut out = vec![];
    let mut err = vec![];
    let argv = std::iter::once("polytax").chain(args.iter().copied());
    let code = run(argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn value<'a>(text: &'a str, key: &str) -> &'a str {
    text.lines()
        .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix(": ")))
        .unwrap_or_else(|| panic!("no {key} in {text}"))
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn verify_oracle_passes() {
    let (code, out, _) = polytax(&["verify", "--suite", "oracle"]);
    assert_eq!(code, 0);
    assert!(out.contains("oracle/factored-vs-full: pass"));
    assert!(out.ends_with("summary: passed=1 failed=0\n"));
}

#[test]
fn unknown_suite_and_flag_are_usage_errors() {
    assert_eq!(polytax(&["verify", "--suite", "bogus"]).0, 2);
    assert_eq!(polytax(&["verify", "--suite", "oracle", "--frobnicate"]).0, 2);
    assert_eq!(polytax(&["count-params", "--arch", "resnet99"]).0, 2);
}

#[test]
fn count_params_table_rounding() {
    for (arch, rounded) in [
        ("resnet18-cifar100", "11.2"),
        ("resnet34-cifar100", "21.3"),
        ("resnet18-imagenet", "11.7"),
    ] {
        let (code, out, _) = polytax(&["count-params", "--arch", arch]);
        assert_eq!(code, 0);
        assert_eq!(value(&out, "params_millions"), rounded);
    }
}

#[test]
fn count_params_from_descriptor_file() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("tiny.arch");
    fs::write(&f, "input 3\nblock kind=pdc degree=2 out=4\nhead classes=2\n").unwrap();
    let (code, out, err) = polytax(&["count-params", "--arch", p(&f)]);
    assert_eq!(code, 0, "{err}");
    // beta 4, one 3x4 factor for degree 1 and two for degree 2, a 4x2 head with bias
    assert_eq!(value(&out, "params"), "50");
}

#[test]
fn make_dataset_modes() {
    let dir = tempfile::tempdir().unwrap();
    let base = dir.path().join("b.pdcd");
    let (code, out, _) = polytax(&["make-dataset", "--synth", "8", "500", "1", "--out", p(&base)]);
    assert_eq!(code, 0);
    assert_eq!(value(&out, "class_counts"), "500,500");

    let lim = dir.path().join("l.pdcd");
    let (code, out, _) = polytax(&["make-dataset", "--limit", "50", "--in", p(&base), "--out", p(&lim)]);
    assert_eq!(code, 0);
    assert_eq!(value(&out, "class_counts"), "50,50");

    let lt = dir.path().join("t.pdcd");
    let (code, out, _) = polytax(&["make-dataset", "--longtail", "10", "--in", p(&base), "--out", p(&lt)]);
    assert_eq!(code, 0);
    assert_eq!(value(&out, "imbalance_factor"), "10");

    let (code, _, err) = polytax(&["make-dataset", "--limit", "501", "--in", p(&base), "--out", p(&lim)]);
    assert_eq!(code, 2);
    assert!(!err.is_empty());
    assert_eq!(polytax(&["make-dataset", "--limit", "5", "--out", p(&lim)]).0, 2);
}

#[test]
fn train_eval_report_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("s.pdcd");
    let runs = dir.path().join("runs");
    assert_eq!(
        polytax(&["make-dataset", "--synth", "3", "20", "2", "--out", p(&data)]).0,
        0
    );
    let (code, out, err) = polytax(&[
        "train",
        "--arch",
        "pdc2-d3-w4-k2",
        "--data",
        p(&data),
        "--epochs",
        "4",
        "--batch",
        "8",
        "--lr",
        "0.01",
        "--repeats",
        "2",
        "--out-dir",
        p(&runs),
        "--tag",
        "tiny",
    ]);
    assert_eq!(code, 0, "{err}");
    assert_eq!(value(&out, "runs"), "2");

    let csv = fs::read_to_string(runs.join("tiny_seed0.csv")).unwrap();
    assert!(csv.starts_with("epoch,lr,train_loss,train_acc,eval_acc\n"));
    assert_eq!(csv.lines().count(), 5);
    let last_acc = csv.lines().last().unwrap().rsplit(',').next().unwrap().to_string();

    let ckpt = runs.join("tiny_seed0.ckpt");
    let (code, out, err) = polytax(&[
        "eval",
        "--arch",
        "pdc2-d3-w4-k2",
        "--checkpoint",
        p(&ckpt),
        "--data",
        p(&data),
    ]);
    assert_eq!(code, 0, "{err}");
    assert_eq!(value(&out, "accuracy"), last_acc);

    let manifest = fs::read_to_string(runs.join(MANIFEST)).unwrap();
    assert_eq!(manifest.lines().next(), Some(manifest_header()));
    assert_eq!(manifest.lines().count(), 3);

    let (code, out, err) = polytax(&["report", "--runs", p(&runs)]);
    assert_eq!(code, 0, "{err}");
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], "samples_per_class,imbalance_factor,runs,mean_acc,std_acc");
    assert_eq!(lines.len(), 2);
    assert!(lines[1].starts_with("20,1,2,"));

    // a rerun replaces rows instead of appending
    polytax(&[
        "train",
        "--arch",
        "pdc2-d3-w4-k2",
        "--data",
        p(&data),
        "--epochs",
        "4",
        "--batch",
        "8",
        "--lr",
        "0.01",
        "--out-dir",
        p(&runs),
        "--tag",
        "tiny",
    ]);
    assert_eq!(fs::read_to_string(runs.join(MANIFEST)).unwrap().lines().count(), 3);
}

#[test]
fn zero_lr_keeps_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("s.pdcd");
    assert_eq!(
        polytax(&["make-dataset", "--synth", "3", "10", "4", "--out", p(&data)]).0,
        0
    );
    for (lr, out) in [("0", "a"), ("0", "b")] {
        let (code, _, err) = polytax(&[
            "train",
            "--arch",
            "affine-d3-k2",
            "--data",
            p(&data),
            "--epochs",
            "3",
            "--lr",
            lr,
            "--out-dir",
            p(&dir.path().join(out)),
        ]);
        assert_eq!(code, 0, "{err}");
    }
    let ckpt = dir.path().join("a").join("affine-d3-k2_seed0.ckpt");
    let trained = polytax_core::trainer::load_checkpoint(&ckpt).unwrap();
    let spec = polytax_core::netzoo::parse_arch("affine-d3-k2").unwrap();
    let init = polytax_core::netzoo::build_network(&spec, 0).unwrap();
    for (name, t) in trained {
        assert_eq!(init.param_value(&name), Some(&t), "{name}");
    }
}

#[test]
fn shape_mismatch_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("s.pdcd");
    assert_eq!(
        polytax(&["make-dataset", "--synth", "3", "10", "4", "--out", p(&data)]).0,
        0
    );
    let (code, _, err) = polytax(&[
        "train",
        "--arch",
        "affine-d5-k2",
        "--data",
        p(&data),
        "--epochs",
        "1",
        "--out-dir",
        p(dir.path()),
    ]);
    assert_eq!(code, 2);
    assert!(err.contains("shape"), "{err}");
}

#[test]
fn report_rejects_empty_and_malformed_dirs() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(polytax(&["report", "--runs", p(dir.path())]).0, 2);
    fs::write(dir.path().join(MANIFEST), format!("{}\n", manifest_header())).unwrap();
    assert_eq!(polytax(&["report", "--runs", p(dir.path())]).0, 2);
    fs::write(dir.path().join(MANIFEST), format!("{}\nx,0,a.csv\n", manifest_header())).unwrap();
    assert_eq!(polytax(&["report", "--runs", p(dir.path())]).0, 2);
}

#[test]
fn config_file_supplies_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("v.cfg");
    fs::write(&cfg, "suite = se-identity\nseed = 3\n").unwrap();
    let (code, out, _) = polytax(&["--config", p(&cfg), "verify"]);
    assert_eq!(code, 0);
    assert!(out.contains("se-identity/superdiagonal: pass"));
}
