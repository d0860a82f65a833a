//! Reductions with a fixed eight-lane accumulation order, so results are
//! deterministic and the loops vectorize.

use crate::element::Element;

const LANES: usize = 8;

#[inline]
fn fold<T: Element>(acc: [T; LANES]) -> T {
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]))
}

pub(crate) fn sum<T: Element>(x: &[T]) -> T {
    let mut acc = [T::zero(); LANES];
    let chunks = x.chunks_exact(LANES);
    let tail = chunks.remainder();
    for c in chunks {
        for l in 0..LANES {
            acc[l] += c[l];
        }
    }
    tail.iter().fold(fold(acc), |s, &v| s + v)
}

pub(crate) fn dot<T: Element>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); LANES];
    let ca = a.chunks_exact(LANES);
    let cb = b.chunks_exact(LANES);
    let tail = ca.remainder().iter().zip(cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..LANES {
            acc[l] += x[l] * y[l];
        }
    }
    tail.fold(fold(acc), |s, (&x, &y)| s + x * y)
}

/// Sum of squared deviations from `mu`.
pub(crate) fn sq_dev<T: Element>(x: &[T], mu: T) -> T {
    let mut acc = [T::zero(); LANES];
    let chunks = x.chunks_exact(LANES);
    let tail = chunks.remainder();
    for c in chunks {
        for l in 0..LANES {
            let d = c[l] - mu;
            acc[l] += d * d;
        }
    }
    tail.iter().fold(fold(acc), |s, &v| s + (v - mu) * (v - mu))
}
