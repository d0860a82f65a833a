//! Run-directory files. Every CSV artifact starts with a
//! `# config_hash=<hex>` line.

use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use medconv_core::data::Split;
use medconv_core::metrics::{read_reports_csv, write_reports_csv, MetricsReport};
use medconv_core::scores::LogitsMatrix;

use crate::exit::{config_error, data_error};

pub const CHECKPOINT: &str = "checkpoint.mckp";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const METRICS_CSV: &str = "metrics.csv";
pub const METRICS_MD: &str = "metrics.md";
const LOCK: &str = "run.lock";
const HASH_PREFIX: &str = "# config_hash=";

pub fn logits_file(split: Split) -> String {
    format!("logits_{split}.csv")
}

/// Exclusive claim on a run directory, released on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> anyhow::Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
        let path = dir.join(LOCK);
        OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| config_error(format!("run directory {} is locked ({}): {e}", dir.display(), path.display())))?;
        Ok(Self { path })
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

pub fn stamp(hash: &str, body: &str) -> String {
    format!("{HASH_PREFIX}{hash}\n{body}")
}

/// Splits a stamped file into its hash and the remaining text.
pub fn unstamp(text: &str) -> anyhow::Result<(&str, &str)> {
    let Some(rest) = text.strip_prefix(HASH_PREFIX) else {
        bail!(data_error("artifact has no config_hash line"));
    };
    let (hash, body) = rest.split_once('\n').unwrap_or((rest, ""));
    Ok((hash.trim(), body))
}

pub fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn read_text(path: &Path) -> anyhow::Result<String> {
    fs::read_to_string(path).map_err(|e| data_error(format!("cannot read {}: {e}", path.display())))
}

/// Cached eval-split logits with their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct CachedLogits {
    pub config_hash: String,
    pub logits: LogitsMatrix,
    pub labels: Vec<usize>,
}

impl CachedLogits {
    pub fn to_csv(&self) -> String {
        let cols = self.logits.cols();
        let mut s = String::from("index,label");
        for c in 0..cols {
            s.push_str(&format!(",logit_{c}"));
        }
        s.push('\n');
        for (i, (row, label)) in self.logits.iter_rows().zip(&self.labels).enumerate() {
            s.push_str(&format!("{i},{label}"));
            for v in row {
                s.push_str(&format!(",{v}"));
            }
            s.push('\n');
        }
        stamp(&self.config_hash, &s)
    }

    pub fn save(&self, path: &Path) -> anyhow::Result<()> {
        write_text(path, &self.to_csv())
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = read_text(path)?;
        let (hash, body) = unstamp(&text).with_context(|| path.display().to_string())?;
        let bad = |m: String| data_error(format!("{}: {m}", path.display()));
        let mut lines = body.lines();
        let header = lines.next().ok_or_else(|| bad("empty logits file".into()))?;
        let cols = header.split(',').count().saturating_sub(2);
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for (i, line) in lines.enumerate() {
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != cols + 2 {
                return Err(bad(format!("row {i} has {} cells, expected {}", cells.len(), cols + 2)));
            }
            labels.push(cells[1].parse().map_err(|_| bad(format!("row {i}: bad label")))?);
            for c in &cells[2..] {
                data.push(c.parse::<f64>().map_err(|_| bad(format!("row {i}: bad logit {c:?}")))?);
            }
        }
        let logits = LogitsMatrix::new(labels.len(), cols, data).map_err(|e| bad(e.to_string()))?;
        Ok(Self {
            config_hash: hash.to_string(),
            logits,
            labels,
        })
    }
}

pub fn write_reports(dir: &Path, stem: &str, hash: &str, rows: &[(String, MetricsReport)]) -> anyhow::Result<()> {
    let mut csv = Vec::new();
    write_reports_csv(&mut csv, rows)?;
    let csv = String::from_utf8(csv).expect("utf-8 csv");
    write_text(&dir.join(format!("{stem}.csv")), &stamp(hash, &csv))?;
    let md = format!(
        "<!-- config_hash={hash} -->\n{}",
        medconv_core::metrics::reports_markdown(rows)
    );
    write_text(&dir.join(format!("{stem}.md")), &md)
}

pub fn read_reports(path: &Path) -> anyhow::Result<(String, Vec<(String, MetricsReport)>)> {
    let text = read_text(path)?;
    let (hash, body) = unstamp(&text).with_context(|| path.display().to_string())?;
    let rows = read_reports_csv(body.as_bytes()).with_context(|| path.display().to_string())?;
    Ok((hash.to_string(), rows))
}
