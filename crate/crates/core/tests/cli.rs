//! End-to-end CLI tests: every subcommand through real files, manifest
//! re-runnability, help/default listings, and error reporting.

use std::path::Path;
use std::process::Command;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_osteoforge")
}

fn run_in(dir: &Path, args: &[&str]) -> std::process::Output {
    Command::new(bin())
        .args(args)
        .current_dir(dir)
        .output()
        .expect("command runs")
}

fn run_ok(dir: &Path, args: &[&str]) -> String {
    let out = run_in(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn help_lists_every_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_ok(dir.path(), &["--help"]);
    for sub in ["phantom", "drr", "pairs", "train", "predict", "enhance", "eval", "gradcheck"] {
        assert!(out.contains(sub), "--help missing {sub}");
    }
}

#[test]
fn help_shows_module_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let drr_help = run_ok(dir.path(), &["drr", "--help"]);
    assert!(drr_help.contains("0.2"), "mu_water default missing");
    assert!(drr_help.contains("0.02"), "beta default missing");
    let train_help = run_ok(dir.path(), &["train", "--help"]);
    for needle in ["0.001", "100", "8", "30", "0.5", "0.3"] {
        assert!(train_help.contains(needle), "train default {needle} missing");
    }
    let enhance_help = run_ok(dir.path(), &["enhance", "--help"]);
    assert!(enhance_help.contains("0.5"), "fusion weight default missing");
}

#[test]
fn drr_on_empty_phantom_is_all_zero() {
    let dir = tempfile::tempdir().unwrap();
    run_ok(dir.path(), &["phantom", "--out", "v", "--name", "air", "--empty"]);
    run_ok(
        dir.path(),
        &["drr", "--volume", "v/air.vol.json", "--out", "air", "--emit-raw"],
    );
    let img = osteoforge::projector::load_image(dir.path().join("air.img.json")).unwrap();
    assert!(img.pixels().iter().all(|&p| p == 0.0));
    let raw = osteoforge::projector::load_image(dir.path().join("air.raw.img.json")).unwrap();
    assert!(raw.pixels().iter().all(|&p| p == 1.0));
    assert!(dir.path().join("air.manifest.json").exists());
    assert!(dir.path().join("v/run_manifest.json").exists());
}

#[test]
fn commands_rerun_bit_identically() {
    let dir = tempfile::tempdir().unwrap();
    let phantom = [
        "phantom", "--out", "a", "--name", "p", "--seed", "5", "--nodules", "2",
    ];
    run_ok(dir.path(), &phantom);
    let mut second = phantom;
    second[2] = "b";
    run_ok(dir.path(), &second);
    for file in ["p.vol.json", "p.vol.raw", "p.nod.json"] {
        let a = std::fs::read(dir.path().join("a").join(file)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(file)).unwrap();
        assert_eq!(a, b, "{file} differs across reruns");
    }
    run_ok(dir.path(), &["drr", "--volume", "a/p.vol.json", "--out", "d1"]);
    run_ok(dir.path(), &["drr", "--volume", "a/p.vol.json", "--out", "d2"]);
    assert_eq!(
        std::fs::read(dir.path().join("d1.img.raw")).unwrap(),
        std::fs::read(dir.path().join("d2.img.raw")).unwrap()
    );
}

#[test]
fn full_pipeline_through_files() {
    let dir = tempfile::tempdir().unwrap();
    for i in 0..4 {
        run_ok(
            dir.path(),
            &[
                "phantom", "--out", "vols", "--name", &format!("c{i}"),
                "--seed", &i.to_string(), "--nodules", "1",
            ],
        );
    }
    run_ok(dir.path(), &["pairs", "--volumes", "vols", "--out", "pairs"]);
    assert!(dir.path().join("pairs/dataset.json").exists());

    run_ok(
        dir.path(),
        &[
            "train", "--dataset", "pairs/dataset.json", "--out", "model",
            "--input-size", "64", "--base-filters", "4", "--depth", "2",
            "--epochs", "1", "--batch-size", "2", "--seed", "3",
        ],
    );
    assert!(dir.path().join("model.wts.json").exists());
    assert!(dir.path().join("model.history.jsonl").exists());

    // Epochs 0 leaves the freshly initialized weights untouched.
    run_ok(
        dir.path(),
        &[
            "train", "--dataset", "pairs/dataset.json", "--out", "zero",
            "--input-size", "64", "--base-filters", "4", "--depth", "2",
            "--epochs", "0", "--batch-size", "2", "--seed", "3",
        ],
    );
    let cfg = osteoforge::unet::embedded_config(dir.path().join("zero.wts.json"))
        .unwrap()
        .unwrap();
    let fresh = osteoforge::unet::build(&cfg).unwrap();
    let loaded = osteoforge::unet::load_weights(dir.path().join("zero.wts.json"), &cfg).unwrap();
    assert_eq!(fresh, loaded, "epochs 0 must keep the initial weights");

    run_ok(
        dir.path(),
        &[
            "predict", "--model", "model.wts.json",
            "--image", "pairs/c0.src.img.json", "--out", "bone", "--pgm",
        ],
    );
    let bone = osteoforge::projector::load_image(dir.path().join("bone.img.json")).unwrap();
    assert_eq!(bone.range(), osteoforge::projector::RangeTag::Unit);
    assert!(dir.path().join("bone.pgm").exists());

    run_ok(
        dir.path(),
        &[
            "enhance", "--model", "model.wts.json",
            "--image", "pairs/c0.src.img.json", "--out", "enh",
            "--weight", "0.0",
        ],
    );
    // Weight 0 fusion returns the input radiograph exactly (modulo one f32
    // quantization on write, which the source file already carries).
    let src = osteoforge::projector::load_image(dir.path().join("pairs/c0.src.img.json")).unwrap();
    let enh = osteoforge::projector::load_image(dir.path().join("enh.img.json")).unwrap();
    assert_eq!(src.pixels(), enh.pixels());

    let table = run_ok(
        dir.path(),
        &[
            "eval", "--model", "model.wts.json", "--dataset", "pairs/dataset.json",
            "--out", "report", "--scales", "3",
        ],
    );
    assert!(table.contains("RMSE"));
    assert!(table.contains("MSSIM"));
    let report: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("report.report.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(report["per_image"].as_array().unwrap().len(), 4);
}

#[test]
fn errors_name_the_problem_and_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let missing = run_in(dir.path(), &["drr", "--volume", "nope.vol.json", "--out", "x"]);
    assert!(!missing.status.success());
    assert!(String::from_utf8_lossy(&missing.stderr).contains("nope.vol.json"));

    let bad_flag = run_in(dir.path(), &["drr", "--volume", "v", "--out", "x", "--bogus"]);
    assert!(!bad_flag.status.success());

    run_ok(dir.path(), &["phantom", "--out", "v", "--name", "p", "--empty"]);
    let bad_window = run_in(
        dir.path(),
        &[
            "pairs", "--volumes", "v", "--out", "p", "--lo", "700", "--hi", "300",
        ],
    );
    assert!(!bad_window.status.success());
    assert!(String::from_utf8_lossy(&bad_window.stderr).contains("lo"));
}

#[test]
fn gradcheck_subcommand_reports_every_op() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_ok(dir.path(), &["gradcheck"]);
    for op in ["conv2d", "maxpool2", "tanh", "reduce_l1", "unet end-to-end"] {
        assert!(out.contains(op), "gradcheck output missing {op}");
    }
    assert!(out.lines().all(|l| !l.starts_with("FAIL")));
}

#[test]
fn thread_env_is_honored() {
    let dir = tempfile::tempdir().unwrap();
    run_ok(dir.path(), &["phantom", "--out", "v", "--name", "p", "--seed", "1"]);
    let out = Command::new(bin())
        .args(["pairs", "--volumes", "v", "--out", "p1"])
        .env(osteoforge::cli::THREADS_ENV, "1")
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success());
    run_ok(dir.path(), &["pairs", "--volumes", "v", "--out", "p2", "--deterministic"]);
    assert_eq!(
        std::fs::read(dir.path().join("p1/p.src.img.raw")).unwrap(),
        std::fs::read(dir.path().join("p2/p.src.img.raw")).unwrap()
    );
}
