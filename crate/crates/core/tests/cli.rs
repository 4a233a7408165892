use std::path::Path;
use std::process::{Command, Output};

use histoclass::classifier::{init_mlp, MlpModel};
use histoclass::dataset::load_manifest;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_histoclass"))
}

fn run(dir: &Path, args: &[&str]) -> Output {
    let out = bin().current_dir(dir).args(args).output().unwrap();
    if !out.status.success() {
        eprintln!("{args:?}\n{}", String::from_utf8_lossy(&out.stderr));
    }
    out
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert_eq!(out.status.code(), Some(0), "{args:?}");
    String::from_utf8(out.stdout).unwrap()
}

fn fixture(dir: &Path, per_class: &str) {
    ok(dir, &["fixture", "--out", "fx", "--seed", "3", "--per-class", per_class]);
    ok(dir, &["fit-target", "--image", "fx/images/benign_0000.png", "--method", "reinhard", "--out", "target.meta"]);
}

#[test]
fn normalize_writes_one_output_per_image() {
    let t = tempfile::tempdir().unwrap();
    fixture(t.path(), "1");
    let stdout = ok(
        t.path(),
        &["normalize", "--manifest", "fx/manifest.csv", "--method", "reinhard", "--target", "target.meta", "--out", "n"],
    );
    assert_eq!(stdout.lines().filter(|l| l.starts_with("ok")).count(), 4);
    let m = load_manifest(&t.path().join("n/manifest.csv")).unwrap();
    assert_eq!(m.len(), 4);
    assert!(m.entries.iter().all(|e| m.resolve(e).exists()));
}

#[test]
fn missing_target_is_a_usage_error() {
    let t = tempfile::tempdir().unwrap();
    fixture(t.path(), "1");
    let out = run(t.path(), &["normalize", "--manifest", "fx/manifest.csv", "--method", "macenko", "--out", "n"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--target"));
    assert_eq!(run(t.path(), &["no-such-command"]).status.code(), Some(2));
    assert_eq!(run(t.path(), &["normalize", "--method", "none"]).status.code(), Some(2));
}

#[test]
fn method_none_copies_bytes() {
    let t = tempfile::tempdir().unwrap();
    fixture(t.path(), "1");
    ok(t.path(), &["normalize", "--manifest", "fx/manifest.csv", "--method", "none", "--out", "n"]);
    let src = load_manifest(&t.path().join("fx/manifest.csv")).unwrap();
    let dst = load_manifest(&t.path().join("n/manifest.csv")).unwrap();
    for (a, b) in src.entries.iter().zip(&dst.entries) {
        assert_eq!(std::fs::read(src.resolve(a)).unwrap(), std::fs::read(dst.resolve(b)).unwrap());
    }
}

#[test]
fn keep_going_skips_unreadable_images() {
    let t = tempfile::tempdir().unwrap();
    fixture(t.path(), "1");
    std::fs::write(t.path().join("fx/images/insitu_0000.png"), b"\x89PNG\r\n\x1a\n broken").unwrap();
    let args = ["normalize", "--manifest", "fx/manifest.csv", "--method", "reinhard", "--target", "target.meta", "--out", "n"];
    assert_eq!(run(t.path(), &args).status.code(), Some(1));

    let mut with = args.to_vec();
    with.push("--keep-going");
    let stdout = ok(t.path(), &with);
    assert!(stdout.contains("FAILED  insitu_0000"));
    assert_eq!(load_manifest(&t.path().join("n/manifest.csv")).unwrap().len(), 3);
}

#[test]
fn zero_epoch_checkpoint_is_the_initialization() {
    let t = tempfile::tempdir().unwrap();
    fixture(t.path(), "2");
    ok(t.path(), &["extract", "--manifest", "fx/manifest.csv", "--out", "d"]);
    ok(t.path(), &["train", "--manifest", "d/manifest.csv", "--epochs", "0", "--seed", "9", "--out", "m"]);
    let m = MlpModel::load(&t.path().join("m")).unwrap();
    assert_eq!(m, init_mlp(56, 9).unwrap());
}

const STAGE_FLAGS: [&str; 8] = ["--multiplicity", "3", "--augment-seed", "4", "--epochs", "40", "--seed", "2"];

fn stage_by_stage(dir: &Path) {
    ok(dir, &["normalize", "--manifest", "fx/manifest.csv", "--method", "reinhard", "--target", "target.meta", "--resize", "64x64", "--out", "s/normalized"]);
    ok(dir, &["augment", "--manifest", "s/normalized/manifest.csv", "--multiplicity", "3", "--augment-seed", "4", "--out", "s/augmented"]);
    ok(dir, &["extract", "--manifest", "s/augmented/manifest.csv", "--out", "s/descriptors"]);
    ok(dir, &["train", "--manifest", "s/descriptors/manifest.csv", "--epochs", "40", "--seed", "2", "--out", "s/model"]);
    ok(dir, &["evaluate", "--manifest", "s/descriptors/manifest.csv", "--model", "s/model", "--out", "s/report"]);
}

#[test]
fn pipeline_equals_stage_composition_and_is_repeatable() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    fixture(d, "6");
    let mut args = vec!["pipeline", "--manifest", "fx/manifest.csv", "--method", "reinhard", "--target", "target.meta", "--out", "p"];
    args.extend(STAGE_FLAGS);
    let printed = ok(d, &args);
    stage_by_stage(d);

    for f in ["report/report.txt", "report/report.csv", "model/w1.hdt", "model/b2.hdt", "model/history.csv"] {
        let a = std::fs::read(d.join("p").join(f)).unwrap();
        let b = std::fs::read(d.join("s").join(f)).unwrap();
        assert_eq!(a, b, "{f}");
    }
    assert_eq!(printed.as_bytes(), std::fs::read(d.join("p/report/report.txt")).unwrap());

    let before = std::fs::read(d.join("p/model/w1.hdt")).unwrap();
    ok(d, &args);
    assert_eq!(std::fs::read(d.join("p/model/w1.hdt")).unwrap(), before);
    assert_eq!(
        std::fs::read(d.join("p/report/report.txt")).unwrap(),
        std::fs::read(d.join("s/report/report.txt")).unwrap()
    );

    // worker count does not change results
    let mut one = args.clone();
    one.extend(["--jobs", "1"]);
    *one.iter_mut().find(|a| **a == "p").unwrap() = "p1";
    ok(d, &one);
    assert_eq!(std::fs::read(d.join("p1/model/w1.hdt")).unwrap(), before);
}

#[test]
fn config_file_supplies_defaults_and_flags_win() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    fixture(d, "2");
    std::fs::write(
        d.join("run.toml"),
        "manifest = \"fx/manifest.csv\"\nstain_method = \"reinhard\"\ntarget = \"target.meta\"\n\
         multiplicity = 2\nout = \"from-config\"\n\n[train]\nmax_epochs = 3\nseed = 5\n",
    )
    .unwrap();
    ok(d, &["--config", "run.toml", "pipeline"]);
    let hist = std::fs::read_to_string(d.join("from-config/model/history.csv")).unwrap();
    assert_eq!(hist.lines().count(), 1 + 3);

    ok(d, &["--config", "run.toml", "pipeline", "--epochs", "2", "--out", "from-flags"]);
    let hist = std::fs::read_to_string(d.join("from-flags/model/history.csv")).unwrap();
    assert_eq!(hist.lines().count(), 1 + 2);
    let meta = std::fs::read_to_string(d.join("from-flags/model/model.meta")).unwrap();
    assert!(meta.contains("seed = 5"));

    std::fs::write(d.join("bad.toml"), "colour = 1\n").unwrap();
    assert_eq!(run(d, &["--config", "bad.toml", "pipeline"]).status.code(), Some(2));
}
