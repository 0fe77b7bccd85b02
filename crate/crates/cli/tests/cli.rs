//! End-to-end tests of the `cdl` binary.

use std::path::Path;
use std::process::{Command, Output};

use cdl_core::sim::SimConfig;
use cdl_core::train::TrainConfig;

const SUBCOMMANDS: [&str; 7] = ["simulate", "train", "encode", "gradcheck", "eval-filters", "sort", "report"];

fn cdl(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cdl"))
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// A small dataset plus train config that run in well under a second.
fn fixture(dir: &Path) {
    let sim = SimConfig {
        n_filters: 2,
        filter_len: 8,
        firing_rate_hz: 60.0,
        ..SimConfig::four_neuron(120, 40, Some(15.0), 2)
    };
    cdl_core::io::write_json(dir.join("sim.json"), &sim).unwrap();
    let train = TrainConfig {
        batch_size: 8,
        epochs: 2,
        ..TrainConfig::default()
    };
    cdl_core::io::write_json(dir.join("train.json"), &train).unwrap();
    let o = cdl(dir, &["simulate", "--config", "sim.json", "--out", "d.crsd"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn help_output_matches_snapshots() {
    let dir = tempfile::tempdir().unwrap();
    let snapshots = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/snapshots");
    let update = std::env::var_os("UPDATE_SNAPSHOTS").is_some();
    let mut pages = vec![("cdl".to_string(), vec!["--help"])];
    pages.extend(
        SUBCOMMANDS
            .iter()
            .map(|s| (format!("cdl_{}", s.replace('-', "_")), vec![*s, "--help"])),
    );
    for (name, args) in pages {
        let o = cdl(dir.path(), &args);
        assert_eq!(code(&o), 0);
        let got = String::from_utf8(o.stdout).unwrap();
        let path = snapshots.join(format!("{name}.txt"));
        if update {
            std::fs::write(&path, &got).unwrap();
            continue;
        }
        let want = std::fs::read_to_string(&path).unwrap_or_else(|_| panic!("missing {}; rerun with UPDATE_SNAPSHOTS=1", path.display()));
        assert_eq!(
            got,
            want,
            "help for `{}` changed; rerun with UPDATE_SNAPSHOTS=1 if intended",
            args.join(" ")
        );
    }
}

#[test]
fn full_pipeline_runs() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    fixture(p);
    let steps: [&[&str]; 7] = [
        &[
            "train",
            "--dataset",
            "d.crsd",
            "--config",
            "train.json",
            "--init-err-db",
            "-3",
            "--out",
            "f.crsf",
            "--history",
            "h.csv",
            "--checkpoint-dir",
            "ckpt",
        ],
        &["encode", "--dataset", "d.crsd", "--filters", "f.crsf", "--out", "codes.csv"],
        &["eval-filters", "--filters", "f.crsf", "--truth", "d.crsd", "--out", "m.csv"],
        &[
            "sort",
            "--dataset",
            "d.crsd",
            "--filters",
            "f.crsf",
            "--thresholds",
            "0.1,0.5,1",
            "--out",
            "s.csv",
        ],
        &["report", "--dataset", "d.crsd", "--filters", "f.crsf", "--history", "h.csv"],
        &["gradcheck", "--seed", "4", "--instances", "2", "--out", "g.csv"],
        &[
            "--threads",
            "1",
            "train",
            "--dataset",
            "d.crsd",
            "--config",
            "train.json",
            "--filters",
            "2",
            "--filter-len",
            "8",
            "--out",
            "k.crsf",
        ],
    ];
    for s in steps {
        let o = cdl(p, s);
        assert_eq!(code(&o), 0, "`cdl {}`: {}", s.join(" "), stderr(&o));
    }
    assert!(p.join("ckpt/epoch_001.crsf").exists() && p.join("ckpt/epoch_002.crsf").exists());
    let sort = std::fs::read_to_string(p.join("s.csv")).unwrap();
    assert_eq!(sort.lines().count(), 4);
    assert!(sort.starts_with("threshold,true_miss,false_alarm"));
    let hist = std::fs::read_to_string(p.join("h.csv")).unwrap();
    assert_eq!(hist.lines().count(), 3);
    let filters = cdl_core::io::read_filters(p.join("f.crsf")).unwrap();
    assert_eq!(filters.filters.n_filters(), 2);
}

#[test]
fn raw_input_trains() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    fixture(p);
    let data = cdl_core::io::read_dataset(p.join("d.crsd")).unwrap();
    let bytes: Vec<u8> = data.samples().iter().flat_map(|v| (*v as f32).to_le_bytes()).collect();
    std::fs::write(p.join("s.f32"), bytes).unwrap();
    let fs = data.fs_hz.to_string();
    let o = cdl(
        p,
        &[
            "train",
            "--raw",
            "s.f32",
            "--dtype",
            "f32",
            "--fs",
            &fs,
            "--window-len",
            "120",
            "--config",
            "train.json",
            "--filters",
            "2",
            "--filter-len",
            "8",
            "--out",
            "f.crsf",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn exit_codes_follow_the_error_kind() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    fixture(p);
    // Usage errors.
    assert_eq!(
        code(&cdl(p, &["train", "--dataset", "d.crsd", "--out", "f.crsf", "--epochs", "0"])),
        1
    );
    assert_eq!(code(&cdl(p, &["simulate", "--bogus"])), 1);
    assert_eq!(code(&cdl(p, &[])), 1);
    assert_eq!(code(&cdl(p, &["--threads", "0", "report", "--dataset", "d.crsd"])), 1);
    // Help and version are not errors.
    assert_eq!(code(&cdl(p, &["--version"])), 0);
    // Data and validation errors.
    let o = cdl(p, &["report", "--dataset", "missing.crsd"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("missing.crsd"));
    std::fs::write(p.join("junk.crsd"), b"not a dataset").unwrap();
    assert_eq!(code(&cdl(p, &["report", "--dataset", "junk.crsd"])), 2);
    std::fs::write(p.join("odd.f64"), [0u8; 12]).unwrap();
    let raw = [
        "train",
        "--raw",
        "odd.f64",
        "--fs",
        "1000",
        "--window-len",
        "4",
        "--filters",
        "1",
        "--filter-len",
        "2",
        "--out",
        "x",
    ];
    assert_eq!(code(&cdl(p, &raw)), 2);
    std::fs::write(p.join("bad.json"), r#"{"epochs": 1, "no_such_field": 3}"#).unwrap();
    assert_eq!(
        code(&cdl(
            p,
            &["train", "--dataset", "d.crsd", "--config", "bad.json", "--out", "f.crsf"]
        )),
        2
    );
}

#[test]
fn deterministic_runs_are_byte_identical() {
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path();
        fixture(p);
        let o = cdl(
            p,
            &[
                "--deterministic",
                "train",
                "--dataset",
                "d.crsd",
                "--config",
                "train.json",
                "--init-err-db",
                "-3",
                "--out",
                "f.crsf",
                "--history",
                "h.csv",
            ],
        );
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        (
            std::fs::read(p.join("f.crsf")).unwrap(),
            std::fs::read(p.join("h.csv")).unwrap(),
            o.stdout,
        )
    };
    assert_eq!(run(), run());
}
