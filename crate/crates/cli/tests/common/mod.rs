#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

pub const BIN: &str = env!("CARGO_BIN_EXE_medconv");

pub fn medconv<I, S>(args: I) -> Output
where
    I: IntoIterator<Item = S>,
    S: AsRef<std::ffi::OsStr>,
{
    Command::new(BIN).args(args).output().expect("spawn medconv")
}

/// Runs and panics with stderr on a nonzero exit.
pub fn medconv_ok<I, S>(args: I) -> String
where
    I: IntoIterator<Item = S>,
    S: AsRef<std::ffi::OsStr>,
{
    let out = medconv(args);
    assert!(
        out.status.success(),
        "medconv failed ({:?}): {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

pub fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Small 12³ phantoms so the CLI tests stay fast.
pub const SMALL_PHANTOMS: &str = r#"{
  "dims": [12, 12, 12],
  "semi_axis_min": [3.0, 3.0, 2.5],
  "semi_axis_max": [4.0, 4.0, 3.5]
}"#;

/// A reduced-width network on 16³ inputs, two short epochs.
pub const SMALL_TRAIN: &str = r#"{
  "model": {
    "stem_channels": 2,
    "stage_channels": [1, 2, 2, 2],
    "bottleneck_expansion": 2,
    "input_shape": [1, 16, 16, 16]
  },
  "preprocess": { "out_dims": [16, 16, 16] },
  "optimizer": { "lr": 0.01 },
  "epochs": 2,
  "batch_size": 8,
  "log_eval": false
}"#;

pub fn write(path: &Path, text: &str) {
    std::fs::write(path, text).unwrap();
}

/// Generates `n` small phantoms under `dir/data` and returns the manifest path.
pub fn small_dataset(dir: &Path, n: usize) -> std::path::PathBuf {
    let cfg = dir.join("phantoms.json");
    write(&cfg, SMALL_PHANTOMS);
    let data = dir.join("data");
    medconv_ok([
        "gen-data".as_ref(),
        "--config".as_ref(),
        cfg.as_os_str(),
        "--out".as_ref(),
        data.as_os_str(),
        "--n".as_ref(),
        n.to_string().as_ref(),
    ]);
    data.join("manifest.csv")
}

/// Header-keyed rows of a stamped CSV artifact.
pub fn read_csv(path: &Path) -> (String, Vec<Vec<(String, String)>>) {
    let text = std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    let mut lines = text.lines();
    let hash = lines.next().unwrap().strip_prefix("# config_hash=").expect("stamped").to_string();
    let header: Vec<String> = lines.next().unwrap().split(',').map(String::from).collect();
    let rows = lines
        .map(|l| header.iter().cloned().zip(l.split(',').map(String::from)).collect())
        .collect();
    (hash, rows)
}

pub fn field(row: &[(String, String)], key: &str) -> String {
    row.iter().find(|(k, _)| k == key).unwrap_or_else(|| panic!("no column {key}")).1.clone()
}
