use crate::element::Element;
use crate::error::{mismatch, Result, TensorError};

pub(crate) fn check_targets<T>(n: usize, c: usize, labels: &[usize], weights: &[T], op: &'static str) -> Result<()> {
    if labels.len() != n || weights.len() != n {
        return Err(mismatch(
            op,
            format!("{n} rows but {} labels and {} sample weights", labels.len(), weights.len()),
        ));
    }
    if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= c) {
        return Err(TensorError::InvalidArgument {
            op,
            detail: format!("label {l} at row {i} is outside 0..{c}"),
        });
    }
    Ok(())
}

/// Per-row `-w_i * logp[i, y_i]`.
pub(crate) fn nll_rows<T: Element>(c: usize, logp: &[T], labels: &[usize], weights: &[T]) -> Vec<T> {
    labels
        .iter()
        .zip(weights)
        .enumerate()
        .map(|(i, (&y, &w))| -w * logp[i * c + y])
        .collect()
}

pub(crate) fn nll_backward<T: Element>(c: usize, labels: &[usize], weights: &[T], g: T) -> Vec<T> {
    let n = T::from_usize(labels.len()).unwrap();
    let mut dx = vec![T::zero(); labels.len() * c];
    for (i, (&y, &w)) in labels.iter().zip(weights).enumerate() {
        dx[i * c + y] = -w * g / n;
    }
    dx
}

/// Per-row `w_i * sum_c BCE(sigmoid(z_ic), [y_i == c])`, stable for large |z|.
pub(crate) fn bce_rows<T: Element>(c: usize, z: &[T], labels: &[usize], weights: &[T]) -> Vec<T> {
    labels
        .iter()
        .zip(weights)
        .enumerate()
        .map(|(i, (&y, &w))| {
            let s: T = (0..c)
                .map(|j| {
                    let v = z[i * c + j];
                    let t = if j == y { T::one() } else { T::zero() };
                    v.max(T::zero()) - v * t + (-v.abs()).exp().ln_1p()
                })
                .sum();
            w * s
        })
        .collect()
}

pub(crate) fn bce_backward<T: Element>(c: usize, z: &[T], labels: &[usize], weights: &[T], g: T) -> Vec<T> {
    let n = T::from_usize(labels.len()).unwrap();
    let mut dx = vec![T::zero(); z.len()];
    for (i, (&y, &w)) in labels.iter().zip(weights).enumerate() {
        for j in 0..c {
            let v = z[i * c + j];
            let sig = T::one() / (T::one() + (-v).exp());
            let t = if j == y { T::one() } else { T::zero() };
            dx[i * c + j] = w * (sig - t) * g / n;
        }
    }
    dx
}
