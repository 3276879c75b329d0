use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sss-bathy"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn small_config(dir: &Path) {
    fs::write(
        dir.join("small.cfg"),
        "# 24 m square, two lines per set\n\
         terrain.ncols = 49\nterrain.nrows = 49\nterrain.rocks = 2\n\
         survey.lines_per_set = 2\nsurvey.max_range = 16\nwindows.width = 32\nwindows.height = 4\n\
         recon.epochs = 2\nrecon.width = 16\nrecon.depth = 3\n\
         train.epochs = 1\n",
    )
    .unwrap();
}

#[test]
fn missing_config_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["--config", "nope.cfg", "generate", "--out", "g.grd"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.cfg"));
    let out = run(dir.path(), &["generate"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn unknown_key_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["--set", "recon.epoch=3", "generate", "--out", "g.grd"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown key"));
}

#[test]
fn generate_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    assert!(run(dir.path(), &["generate", "--out", "a.grd"]).status.success());
    assert!(run(dir.path(), &["generate", "--out", "b.grd"]).status.success());
    let a = fs::read_to_string(dir.path().join("a.grd")).unwrap();
    assert_eq!(a, fs::read_to_string(dir.path().join("b.grd")).unwrap());
    assert!(a.starts_with("ncols 128\nnrows 128\n"));
}

#[test]
fn pipeline_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_config(d);
    let c = ["--config", "small.cfg"];
    let ok = |args: &[&str]| {
        let all: Vec<&str> = c.iter().chain(args).copied().collect();
        let out = run(d, &all);
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        out
    };
    ok(&["generate", "--out", "g.grd"]);
    ok(&["simulate", "--grid", "g.grd", "--out", "s.sss"]);
    let survey = fs::read_to_string(d.join("s.sss")).unwrap();
    assert_eq!(survey.lines().filter(|l| l.starts_with("LINE ")).count(), 4);

    let out = run(d, &["--config", "small.cfg", "--set", "estimator=gt-normals", "reconstruct", "--survey", "s.sss", "--out-dir", "r"]);
    assert_eq!(out.status.code(), Some(1), "gt-normals without a grid");
    let out = run(d, &["--config", "small.cfg", "--set", "estimator=learned", "reconstruct", "--survey", "s.sss", "--out-dir", "r"]);
    assert_eq!(out.status.code(), Some(1), "learned without an estimator file");
    fs::write(d.join("bad.bsn"), b"XXXX").unwrap();
    let out = run(
        d,
        &["--config", "small.cfg", "--set", "estimator=learned", "reconstruct", "--survey", "s.sss", "--out-dir", "r", "--estimator-file", "bad.bsn"],
    );
    assert_eq!(out.status.code(), Some(2), "invalid estimator file");

    ok(&["--set", "estimator=gt-normals", "reconstruct", "--survey", "s.sss", "--grid", "g.grd", "--out-dir", "r"]);
    for f in ["model.srn", "bathymetry.grd", "coverage.grd", "recon_log.csv"] {
        assert!(d.join("r").join(f).is_file(), "{f}");
    }
    let log = fs::read_to_string(d.join("r/recon_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 3, "header plus configured epochs");

    ok(&["evaluate", "--recon", "r/bathymetry.grd", "--gt", "g.grd", "--mask", "r/coverage.grd", "--out", "rep"]);
    let csv = fs::read_to_string(d.join("rep.csv")).unwrap();
    assert!(csv.starts_with("cells,mae,std,cs,cs_cells\n"));
    assert!(d.join("rep_pdf.csv").is_file());

    let out = ok(&["evaluate", "--recon", "g.grd", "--gt", "g.grd", "--out", "self"]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("MAE             : 0.0000"));
    let row = fs::read_to_string(d.join("self.csv")).unwrap();
    assert_eq!(row.lines().nth(1).unwrap().split(',').nth(1), Some("0.000000000"));

    let shifted = fs::read_to_string(d.join("g.grd")).unwrap().replace("xllcorner 0", "xllcorner 0.5");
    fs::write(d.join("shifted.grd"), shifted).unwrap();
    let out = run(d, &["evaluate", "--recon", "shifted.grd", "--gt", "g.grd", "--out", "x"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("0.5"), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn drape_and_train_estimator() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_config(d);
    let c = |extra: &[&str]| -> Output {
        let all: Vec<&str> = ["--config", "small.cfg"].iter().chain(extra).copied().collect();
        run(d, &all)
    };
    assert!(c(&["generate", "--out", "g.grd"]).status.success());
    assert!(c(&["simulate", "--grid", "g.grd", "--out", "s.sss"]).status.success());
    assert!(c(&["drape", "--grid", "g.grd", "--survey", "s.sss", "--out", "d.txt"]).status.success());
    let out = c(&["train-estimator", "--draped", "d.txt", "--out", "e.bsn", "--log", "tl.csv"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = c(&["train-estimator", "--draped", "d.txt", "--out", "e2.bsn", "--resume", "e.bsn"]);
    assert!(out.status.success());
    let log = fs::read_to_string(d.join("tl.csv")).unwrap();
    assert!(log.starts_with("epoch,train_loss,val_loss,val_mae,val_rel,val_rmse,val_delta1"));

    fs::write(d.join("empty.txt"), "SSS-DRAPED 1\n").unwrap();
    let out = c(&["train-estimator", "--draped", "empty.txt", "--out", "x.bsn"]);
    assert_eq!(out.status.code(), Some(2));
}
