//! Post-hoc per-class temperature scaling and temperature sweeps over cached
//! logits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{build_report, confusion_matrix, MetricsReport};
use crate::scores::{LogitsMatrix, ProbabilityMatrix, ScoreMatrix};

/// Per-class temperatures: the head class gets `tau1`, every other class `tau2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TauAssignment {
    taus: Vec<f64>,
    head_class: usize,
    tau1: f64,
    tau2: f64,
}

impl TauAssignment {
    pub fn taus(&self) -> &[f64] {
        &self.taus
    }

    pub fn head_class(&self) -> usize {
        self.head_class
    }

    pub fn tau1(&self) -> f64 {
        self.tau1
    }

    pub fn tau2(&self) -> f64 {
        self.tau2
    }
}

fn check_tau(name: &str, tau: f64) -> Result<()> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::InvalidArgument(format!("{name} must be positive and finite, got {tau}")));
    }
    Ok(())
}

/// The head class is the one with the largest training count, lowest index
/// on ties.
pub fn assign_taus(counts: &[usize], tau1: f64, tau2: f64) -> Result<TauAssignment> {
    check_tau("tau1", tau1)?;
    check_tau("tau2", tau2)?;
    if counts.is_empty() {
        return Err(Error::InvalidArgument("no class counts".into()));
    }
    let head_class = counts
        .iter()
        .enumerate()
        .fold(0, |best, (i, &n)| if n > counts[best] { i } else { best });
    let taus = (0..counts.len()).map(|c| if c == head_class { tau1 } else { tau2 }).collect();
    Ok(TauAssignment {
        taus,
        head_class,
        tau1,
        tau2,
    })
}

/// `softmax(z_c / tau_c)` per row.
pub fn adjust_logits(logits: &LogitsMatrix, taus: &TauAssignment) -> Result<ProbabilityMatrix> {
    if logits.cols() != taus.taus.len() {
        return Err(Error::LengthMismatch(format!(
            "{} logit columns but {} temperatures",
            logits.cols(),
            taus.taus.len()
        )));
    }
    Ok(logits.map_columns(|c, z| z / taus.taus[c]).softmax())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepMode {
    /// Every grid point has `tau1 == tau2`.
    Tied,
    /// `tau1` is the same at every grid point; `tau2` varies.
    FixedTau1,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub tau1: f64,
    pub tau2: f64,
    pub accuracy: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub f1: f64,
    pub roc_auc: f64,
}

impl SweepRow {
    fn new(tau1: f64, tau2: f64, r: &MetricsReport) -> Self {
        Self {
            tau1,
            tau2,
            accuracy: r.accuracy,
            sensitivity: r.micro_sensitivity,
            specificity: r.micro_specificity,
            f1: r.f1_weighted,
            roc_auc: r.roc_auc_macro_ovr,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub mode: SweepMode,
    pub rows: Vec<SweepRow>,
}

pub const SWEEP_HEADER: [&str; 7] = ["tau1", "tau2", "accuracy", "sensitivity", "specificity", "f1", "roc_auc"];

impl SweepTable {
    pub fn to_csv(&self) -> String {
        let mut s = SWEEP_HEADER.join(",");
        s.push('\n');
        for r in &self.rows {
            let cells = [r.tau1, r.tau2, r.accuracy, r.sensitivity, r.specificity, r.f1, r.roc_auc];
            s.push_str(&cells.map(|v| v.to_string()).join(","));
            s.push('\n');
        }
        s
    }

    /// Percent values with two decimals.
    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        match self.mode {
            SweepMode::Tied => s.push_str("| τ | Accuracy | Sensitivity | Specificity | F1 | AUC |\n|---|---|---|---|---|---|\n"),
            SweepMode::FixedTau1 => s.push_str(
                "| τ1 | τ2 | Accuracy | Sensitivity | Specificity | F1 | AUC |\n|---|---|---|---|---|---|---|\n",
            ),
        }
        for r in &self.rows {
            let lead = match self.mode {
                SweepMode::Tied => format!("| {} ", r.tau1),
                SweepMode::FixedTau1 => format!("| {} | {} ", r.tau1, r.tau2),
            };
            s.push_str(&lead);
            for v in [r.accuracy, r.sensitivity, r.specificity, r.f1, r.roc_auc] {
                s.push_str(&format!("| {:.2} ", 100.0 * v));
            }
            s.push_str("|\n");
        }
        s
    }
}

/// Grid of `(t, t)` points.
pub fn tied_grid(values: &[f64]) -> Vec<(f64, f64)> {
    values.iter().map(|&t| (t, t)).collect()
}

/// Grid of `(tau1, t)` points.
pub fn fixed_tau1_grid(tau1: f64, tau2: &[f64]) -> Vec<(f64, f64)> {
    tau2.iter().map(|&t| (tau1, t)).collect()
}

/// `1.0, 0.9, ..., 0.1`.
pub fn tenths_descending() -> Vec<f64> {
    (1..=10).rev().map(|k| k as f64 / 10.0).collect()
}

/// Evaluates every grid point on the same cached logits. Head class and
/// temperatures come from `counts`, which must be training-split counts.
pub fn sweep_tau(
    logits: &LogitsMatrix,
    labels: &[usize],
    counts: &[usize],
    grid: &[(f64, f64)],
    mode: SweepMode,
) -> Result<SweepTable> {
    let Some(&(first_tau1, _)) = grid.first() else {
        return Err(Error::InvalidArgument("temperature grid is empty".into()));
    };
    if counts.len() != logits.cols() {
        return Err(Error::LengthMismatch(format!(
            "{} class counts for {} logit columns",
            counts.len(),
            logits.cols()
        )));
    }
    for &(t1, t2) in grid {
        let ok = match mode {
            SweepMode::Tied => t1 == t2,
            SweepMode::FixedTau1 => t1 == first_tau1,
        };
        if !ok {
            return Err(Error::InvalidArgument(format!("grid point ({t1}, {t2}) violates {mode:?} mode")));
        }
    }
    let rows = grid
        .iter()
        .map(|&(t1, t2)| {
            let probs = adjust_logits(logits, &assign_taus(counts, t1, t2)?)?;
            let report = report_for(&probs, labels)?;
            Ok(SweepRow::new(t1, t2, &report))
        })
        .collect::<Result<_>>()?;
    Ok(SweepTable { mode, rows })
}

/// Report computed from probabilities: predictions are row argmaxes, AUC
/// ranks the probabilities themselves.
pub fn report_for(probs: &ScoreMatrix, labels: &[usize]) -> Result<MetricsReport> {
    let cm = confusion_matrix(&probs.argmax(), labels, probs.cols())?;
    build_report(&cm, probs, labels)
}
