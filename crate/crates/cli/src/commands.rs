//! The `gen-data`, `eval`, `sweep` and `report` commands.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::Context;
use medconv_core::calibration::{fixed_tau1_grid, sweep_tau, tenths_descending, tied_grid, SweepMode, SweepTable};
use medconv_core::data::{generate_phantoms, largest_remainder, Manifest, PhantomConfig, Split};
use medconv_core::metrics::MetricsReport;
use medconv_core::model::{load_checkpoint, read_checkpoint_header, ModelConfig};

use crate::artifacts::{self, stamp, write_text, CachedLogits};
use crate::config::{RunRecord, TrainConfig};
use crate::exit::{config_error, data_error};
use crate::train::{calibrated_report, load_manifest, load_split, predict_all};

/// Writes phantoms plus `manifest.csv` into `out` and returns the manifest
/// with its per-class counts.
pub fn gen_data(config: Option<&Path>, out: &Path, n: usize, seed: Option<u64>) -> anyhow::Result<(Manifest, Vec<usize>)> {
    let mut cfg = match config {
        Some(p) => PhantomConfig::from_json_file(p)
            .map_err(|e| config_error(format!("phantom config {}: {e}", p.display())))?,
        None => PhantomConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate().map_err(|e| config_error(e.to_string()))?;
    let manifest = generate_phantoms(&cfg, n, out)?;
    let counts = largest_remainder(n, &cfg.proportions);
    Ok((manifest, counts))
}

/// Names the fields of two model configs that differ.
pub fn config_diff(a: &ModelConfig, b: &ModelConfig) -> Vec<String> {
    let (va, vb) = (serde_json::to_value(a).unwrap(), serde_json::to_value(b).unwrap());
    let (Some(ma), Some(mb)) = (va.as_object(), vb.as_object()) else {
        return vec!["<model>".into()];
    };
    ma.iter().filter(|(k, v)| mb.get(*k) != Some(v)).map(|(k, _)| k.clone()).collect()
}

#[derive(Debug, Clone)]
pub struct EvalArgs {
    pub run: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub config: Option<PathBuf>,
    pub split: Split,
    pub tau1: f64,
    pub tau2: f64,
    pub calibrate: bool,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub report: MetricsReport,
    pub used_cache: bool,
    pub stem: String,
}

fn tau_tag(t: f64) -> String {
    format!("{t}").replace('.', "p")
}

/// Evaluates a trained run, reusing cached logits whose hash matches the
/// checkpoint.
pub fn eval(args: &EvalArgs) -> anyhow::Result<EvalOutcome> {
    let ckpt = args.checkpoint.clone().unwrap_or_else(|| args.run.join(artifacts::CHECKPOINT));
    let header = read_checkpoint_header(&ckpt)?;
    if let Some(cfg_path) = &args.config {
        let cfg = TrainConfig::load(cfg_path)?;
        let diff = config_diff(&cfg.model, &header.config);
        if !diff.is_empty() {
            return Err(config_error(format!(
                "config {} does not match checkpoint {}: differing model fields {}",
                cfg_path.display(),
                ckpt.display(),
                diff.join(", ")
            )));
        }
    }
    let record = RunRecord::load(&args.run)?;
    let hash = header.meta.get("config_hash").cloned().unwrap_or_else(|| record.config_hash.clone());
    let cache_path = args.run.join(artifacts::logits_file(args.split));
    let cached = match CachedLogits::load(&cache_path) {
        Ok(c) if c.config_hash == hash && args.manifest.is_none() => Some(c),
        _ => None,
    };
    let used_cache = cached.is_some();
    let cached = match cached {
        Some(c) => c,
        None => {
            let manifest_path = args.manifest.clone().unwrap_or_else(|| record.config.manifest.clone());
            let (manifest, _) = load_manifest(&manifest_path)?;
            let data = load_split(&manifest, args.split, &record.config.preprocess)?;
            if data.volumes.is_empty() {
                return Err(data_error(format!("{} split is empty", args.split)));
            }
            let (net, _) = load_checkpoint(&ckpt)?;
            let c = CachedLogits {
                config_hash: hash.clone(),
                logits: predict_all(&net, &data.volumes)?,
                labels: data.labels,
            };
            c.save(&cache_path)?;
            c
        }
    };
    let report = if args.calibrate {
        calibrated_report(&cached, &record.train_counts, args.tau1, args.tau2)?
    } else {
        medconv_core::calibration::report_for(&cached.logits.softmax(), &cached.labels)?
    };
    let stem = if args.calibrate {
        format!("eval_{}_tau1-{}_tau2-{}", args.split, tau_tag(args.tau1), tau_tag(args.tau2))
    } else {
        format!("eval_{}_uncalibrated", args.split)
    };
    let out = args.out.clone().unwrap_or_else(|| args.run.clone());
    std::fs::create_dir_all(&out).with_context(|| format!("cannot create {}", out.display()))?;
    artifacts::write_reports(&out, &stem, &hash, &[(record.run_name.clone(), report.clone())])?;
    Ok(EvalOutcome { report, used_cache, stem })
}

/// `a:b:step` (inclusive) or a comma-separated list.
pub fn parse_grid(spec: &str) -> anyhow::Result<Vec<f64>> {
    let bad = || config_error(format!("bad grid {spec:?}: use a:b:step or a comma-separated list"));
    let parts: Vec<&str> = spec.split(':').collect();
    let values = if parts.len() == 3 {
        let [a, b, s] = [parts[0], parts[1], parts[2]].map(|p| p.trim().parse::<f64>());
        let (a, b, s) = (a.map_err(|_| bad())?, b.map_err(|_| bad())?, s.map_err(|_| bad())?);
        if !(s > 0.0 && b >= a) {
            return Err(bad());
        }
        // Integer stepping keeps grid points exact multiples of the step.
        let n = ((b - a) / s + 1e-9).floor() as usize;
        (0..=n).map(|k| a + k as f64 * s).collect()
    } else {
        spec.split(',')
            .filter(|s| !s.trim().is_empty())
            .map(|s| s.trim().parse::<f64>().map_err(|_| bad()))
            .collect::<anyhow::Result<Vec<_>>>()?
    };
    if values.is_empty() {
        return Err(config_error("temperature grid is empty"));
    }
    Ok(values)
}

#[derive(Debug, Clone)]
pub struct SweepArgs {
    pub run: PathBuf,
    pub logits: Option<PathBuf>,
    pub split: Split,
    pub mode: SweepMode,
    pub tau1: f64,
    pub grid: Option<String>,
    pub out: Option<PathBuf>,
}

pub fn sweep(args: &SweepArgs) -> anyhow::Result<(SweepTable, PathBuf)> {
    let record = RunRecord::load(&args.run)?;
    let path = args.logits.clone().unwrap_or_else(|| args.run.join(artifacts::logits_file(args.split)));
    let cached = CachedLogits::load(&path)?;
    let values = match &args.grid {
        Some(g) => parse_grid(g)?,
        None => match args.mode {
            SweepMode::Tied => parse_grid("0.25:2:0.25")?,
            SweepMode::FixedTau1 => tenths_descending(),
        },
    };
    let grid = match args.mode {
        SweepMode::Tied => tied_grid(&values),
        SweepMode::FixedTau1 => fixed_tau1_grid(args.tau1, &values),
    };
    let table = sweep_tau(&cached.logits, &cached.labels, &record.train_counts, &grid, args.mode)?;
    let out = args.out.clone().unwrap_or_else(|| args.run.clone());
    std::fs::create_dir_all(&out).with_context(|| format!("cannot create {}", out.display()))?;
    let stem = match args.mode {
        SweepMode::Tied => format!("sweep_{}_tied", args.split),
        SweepMode::FixedTau1 => format!("sweep_{}_fixed_tau1", args.split),
    };
    let csv_path = out.join(format!("{stem}.csv"));
    write_text(&csv_path, &stamp(&cached.config_hash, &table.to_csv()))?;
    write_text(
        &out.join(format!("{stem}.md")),
        &format!("<!-- config_hash={} -->\n{}", cached.config_hash, table.to_markdown()),
    )?;
    Ok((table, csv_path))
}

/// One row of the comparison table.
#[derive(Debug, Clone)]
pub struct ReportRow {
    pub name: String,
    pub hash: String,
    pub report: MetricsReport,
}

#[derive(Debug, Clone, Default)]
pub struct Comparison {
    pub rows: Vec<ReportRow>,
    pub warnings: Vec<String>,
}

/// Merges run directories into one table. Duplicate hashes collapse to one
/// row; a hash shared by different configs is an error.
pub fn report(run_dirs: &[PathBuf], out: &Path) -> anyhow::Result<Comparison> {
    if run_dirs.is_empty() {
        return Err(config_error("report needs at least one run directory"));
    }
    let mut cmp = Comparison::default();
    let mut seen: BTreeMap<String, TrainConfig> = BTreeMap::new();
    for dir in run_dirs {
        let loaded = RunRecord::load(dir).and_then(|rec| {
            let (hash, rows) = artifacts::read_reports(&dir.join(artifacts::METRICS_CSV))?;
            Ok((rec, hash, rows))
        });
        let (rec, hash, rows) = match loaded {
            Ok(v) => v,
            Err(e) => {
                cmp.warnings.push(format!("skipping {}: {e:#}", dir.display()));
                continue;
            }
        };
        let Some((_, report)) = rows.into_iter().next() else {
            cmp.warnings.push(format!("skipping {}: empty metrics", dir.display()));
            continue;
        };
        let mut clean = rec.config.clone();
        clean.manifest = PathBuf::new();
        clean.out_dir = PathBuf::new();
        if let Some(prev) = seen.get(&hash) {
            if prev != &clean {
                return Err(data_error(format!(
                    "config hash {hash} is shared by runs with different configs ({})",
                    dir.display()
                )));
            }
            continue;
        }
        seen.insert(hash.clone(), clean);
        cmp.rows.push(ReportRow {
            name: rec.run_name,
            hash,
            report,
        });
    }
    std::fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    write_text(&out.join("comparison.csv"), &comparison_csv(&cmp.rows))?;
    write_text(&out.join("comparison.md"), &comparison_markdown(&cmp.rows))?;
    Ok(cmp)
}

const COMPARISON_HEADER: &str = "name,config_hash,accuracy,sensitivity,specificity,f1,roc_auc,delta_accuracy";

fn metric_cells(r: &MetricsReport) -> [f64; 5] {
    [r.accuracy, r.micro_sensitivity, r.micro_specificity, r.f1_weighted, r.roc_auc_macro_ovr]
}

/// Deltas are accuracy differences from the first row.
fn comparison_csv(rows: &[ReportRow]) -> String {
    let mut s = format!("{COMPARISON_HEADER}\n");
    let base = rows.first().map(|r| r.report.accuracy);
    for r in rows {
        let _ = write!(s, "{},{}", r.name, r.hash);
        for v in metric_cells(&r.report) {
            let _ = write!(s, ",{v}");
        }
        let _ = writeln!(s, ",{}", r.report.accuracy - base.unwrap_or(0.0));
    }
    s
}

fn comparison_markdown(rows: &[ReportRow]) -> String {
    let mut s = String::from(
        "| Model | Accuracy | Sensitivity | Specificity | F1 | AUC | Δ Accuracy |\n|---|---|---|---|---|---|---|\n",
    );
    let base = rows.first().map(|r| r.report.accuracy).unwrap_or(0.0);
    for r in rows {
        let _ = write!(s, "| {} ", r.name);
        for v in metric_cells(&r.report) {
            let _ = write!(s, "| {:.2} ", 100.0 * v);
        }
        let _ = writeln!(s, "| {:+.2} |", 100.0 * (r.report.accuracy - base));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_specs() {
        let g = parse_grid("0.25:2:0.25").unwrap();
        assert_eq!(g.len(), 8);
        assert_eq!(g[7], 2.0);
        assert_eq!(parse_grid("1.0, 0.5").unwrap(), vec![1.0, 0.5]);
        assert!(parse_grid("").is_err());
        assert!(parse_grid("2:1:0.5").is_err());
    }

    #[test]
    fn diff_names_fields() {
        let a = ModelConfig::micro();
        let mut b = a.clone();
        b.num_classes = 4;
        b.stem_channels = 4;
        let d = config_diff(&a, &b);
        assert!(d.contains(&"num_classes".to_string()) && d.contains(&"stem_channels".to_string()));
        assert!(config_diff(&a, &a).is_empty());
    }
}
