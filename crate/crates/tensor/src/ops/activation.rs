use crate::element::Element;
use crate::error::{mismatch, Result};

pub(crate) fn relu_forward<T: Element>(x: &[T]) -> Vec<T> {
    x.iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect()
}

/// Gradient passes only where the input was strictly positive.
pub(crate) fn relu_backward<T: Element>(x: &[T], g: &[T]) -> Vec<T> {
    x.iter()
        .zip(g)
        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
        .collect()
}

pub(crate) fn rows(shape: &[usize], op: &'static str) -> Result<(usize, usize)> {
    if shape.len() != 2 || shape[1] < 2 {
        return Err(mismatch(op, format!("expected N x C with C >= 2, got {shape:?}")));
    }
    Ok((shape[0], shape[1]))
}

pub fn log_softmax_row<T: Element>(row: &[T], out: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
    out.iter_mut().zip(row).for_each(|(o, &v)| *o = v - lse);
}

pub(crate) fn log_softmax_forward<T: Element>(c: usize, x: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (row, dst) in x.chunks(c).zip(out.chunks_mut(c)) {
        log_softmax_row(row, dst);
    }
    out
}

/// `dx = g - softmax * sum(g)` per row, using the saved log-probabilities.
pub(crate) fn log_softmax_backward<T: Element>(c: usize, out: &[T], g: &[T]) -> Vec<T> {
    let mut dx = vec![T::zero(); out.len()];
    for ((lp, gr), dst) in out.chunks(c).zip(g.chunks(c)).zip(dx.chunks_mut(c)) {
        let total: T = gr.iter().copied().sum();
        for j in 0..c {
            dst[j] = gr[j] - lp[j].exp() * total;
        }
    }
    dx
}
