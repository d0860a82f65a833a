//! Cross-entropy and class-balanced cross-entropy on top of the tape.

use medconv_tensor::{Element, Tape, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Positive per-class loss weights plus the counts they were derived from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    weights: Vec<f64>,
    /// Counts used by [`inverse_freq_weights`]; empty for hand-set weights.
    counts: Vec<usize>,
}

impl ClassWeights {
    pub fn uniform(classes: usize) -> Self {
        Self {
            weights: vec![1.0; classes],
            counts: Vec::new(),
        }
    }

    pub fn from_vec(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidArgument("class weights are empty".into()));
        }
        if let Some((c, w)) = weights.iter().enumerate().find(|(_, w)| !(w.is_finite() && **w > 0.0)) {
            return Err(Error::InvalidArgument(format!("class {c} weight {w} is not positive and finite")));
        }
        Ok(Self {
            weights,
            counts: Vec::new(),
        })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn num_classes(&self) -> usize {
        self.weights.len()
    }

    /// Multiplies every weight by `k > 0`.
    pub fn scaled(&self, k: f64) -> Result<Self> {
        let mut out = Self::from_vec(self.weights.iter().map(|w| w * k).collect())?;
        out.counts = self.counts.clone();
        Ok(out)
    }

    /// Average weight seen by a training sample: `sum_c f_c w_c` with the
    /// derivation frequencies. Exactly 1 for inverse-frequency weights.
    pub fn sample_mean(&self) -> Option<f64> {
        let n: usize = self.counts.iter().sum();
        (n > 0).then(|| {
            self.counts
                .iter()
                .zip(&self.weights)
                .map(|(&c, w)| c as f64 * w)
                .sum::<f64>()
                / n as f64
        })
    }

    fn per_sample<T: Element>(&self, labels: &[usize]) -> Result<Vec<T>> {
        labels
            .iter()
            .enumerate()
            .map(|(row, &l)| {
                self.weights
                    .get(l)
                    .map(|&w| T::from_f64_lossy(w))
                    .ok_or(Error::LabelOutOfRange {
                        row,
                        label: l,
                        classes: self.weights.len(),
                    })
            })
            .collect()
    }
}

/// `w_c = N / (C * n_c)` with `N` the total count and `C` the class count.
pub fn inverse_freq_weights(counts: &[usize]) -> Result<ClassWeights> {
    if counts.is_empty() {
        return Err(Error::InvalidArgument("no classes".into()));
    }
    if let Some(class) = counts.iter().position(|&n| n == 0) {
        return Err(Error::ZeroClassCount { class });
    }
    let total: usize = counts.iter().sum();
    let c = counts.len() as f64;
    Ok(ClassWeights {
        weights: counts.iter().map(|&n| total as f64 / (c * n as f64)).collect(),
        counts: counts.to_vec(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    #[default]
    Ce,
    Balce,
}

/// How class scores become a per-sample loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossVariant {
    /// Softmax over classes, negative log-likelihood of the label.
    #[default]
    Softmax,
    /// Independent sigmoid per class, summed binary cross-entropy.
    BinaryPerClass,
}

/// A scalar loss on the tape plus its per-sample terms.
#[derive(Debug, Clone)]
pub struct LossValue {
    pub var: Var,
    pub value: f64,
    pub per_sample: Vec<f64>,
}

fn check_labels<T: Element>(tape: &Tape<T>, logits: Var, labels: &[usize]) -> Result<usize> {
    let shape = tape.value(logits).shape();
    if shape.len() != 2 || shape[1] < 2 {
        return Err(Error::InvalidArgument(format!("logits must be N x C with C >= 2, got {shape:?}")));
    }
    if labels.len() != shape[0] {
        return Err(Error::LengthMismatch(format!("{} logit rows but {} labels", shape[0], labels.len())));
    }
    let classes = shape[1];
    if let Some((row, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
        return Err(Error::LabelOutOfRange { row, label, classes });
    }
    Ok(classes)
}

fn finish<T: Element>(tape: &Tape<T>, var: Var, rows: Vec<T>) -> LossValue {
    LossValue {
        value: tape.value(var).item().as_f64(),
        per_sample: rows.into_iter().map(Element::as_f64).collect(),
        var,
    }
}

fn softmax_loss<T: Element>(tape: &mut Tape<T>, logits: Var, labels: &[usize], w: Vec<T>) -> Result<LossValue> {
    let logp = tape.log_softmax(logits)?;
    let (var, rows) = tape.weighted_nll(logp, labels, &w)?;
    Ok(finish(tape, var, rows))
}

/// Mean of `-log_softmax(z_i)[y_i]`.
pub fn cross_entropy<T: Element>(tape: &mut Tape<T>, logits: Var, labels: &[usize]) -> Result<LossValue> {
    check_labels(tape, logits, labels)?;
    softmax_loss(tape, logits, labels, vec![T::one(); labels.len()])
}

/// Mean of `w_{y_i} * -log_softmax(z_i)[y_i]`, divided by the sample count.
pub fn balanced_cross_entropy<T: Element>(
    tape: &mut Tape<T>,
    logits: Var,
    labels: &[usize],
    weights: &ClassWeights,
) -> Result<LossValue> {
    let classes = check_labels(tape, logits, labels)?;
    check_weight_count(weights, classes)?;
    let w = weights.per_sample(labels)?;
    softmax_loss(tape, logits, labels, w)
}

/// Mean of `w_{y_i} * sum_c BCE(sigmoid(z_ic), [y_i == c])`.
pub fn binary_balanced_cross_entropy<T: Element>(
    tape: &mut Tape<T>,
    logits: Var,
    labels: &[usize],
    weights: &ClassWeights,
) -> Result<LossValue> {
    let classes = check_labels(tape, logits, labels)?;
    check_weight_count(weights, classes)?;
    let w = weights.per_sample(labels)?;
    let (var, rows) = tape.weighted_bce_with_logits(logits, labels, &w)?;
    Ok(finish(tape, var, rows))
}

fn check_weight_count(weights: &ClassWeights, classes: usize) -> Result<()> {
    if weights.num_classes() != classes {
        return Err(Error::LengthMismatch(format!(
            "{} class weights for {classes} logit columns",
            weights.num_classes()
        )));
    }
    Ok(())
}

/// Training objective selected by configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Objective {
    pub variant: LossVariant,
    /// Uniform for plain cross-entropy.
    pub weights: ClassWeights,
}

impl Objective {
    /// Derives the weights from training-split counts; `Balce` fails on any
    /// zero count.
    pub fn new(kind: LossKind, variant: LossVariant, train_counts: &[usize]) -> Result<Self> {
        let weights = match kind {
            LossKind::Ce => ClassWeights::uniform(train_counts.len()),
            LossKind::Balce => inverse_freq_weights(train_counts)?,
        };
        Ok(Self { variant, weights })
    }

    pub fn apply<T: Element>(&self, tape: &mut Tape<T>, logits: Var, labels: &[usize]) -> Result<LossValue> {
        match self.variant {
            LossVariant::Softmax => balanced_cross_entropy(tape, logits, labels, &self.weights),
            LossVariant::BinaryPerClass => binary_balanced_cross_entropy(tape, logits, labels, &self.weights),
        }
    }
}
