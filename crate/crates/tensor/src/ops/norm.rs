//! Per-channel batch normalization over every axis except `C` (axis 1).

use crate::element::Element;
use crate::error::{mismatch, Result, TensorError};
use crate::ops::reduce;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

/// Running mean and variance carried between training steps.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Element> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }
}

pub enum NormMode<'a, T> {
    /// Normalize with batch statistics and fold them into `running`.
    Train {
        running: &'a mut RunningStats<T>,
        momentum: T,
    },
    /// Normalize with the stored running statistics.
    Eval { running: &'a RunningStats<T> },
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct NormDims {
    pub n: usize,
    pub c: usize,
    pub inner: usize,
}

impl NormDims {
    pub fn new(shape: &[usize], gamma: usize, beta: usize) -> Result<Self> {
        const OP: &str = "batch_norm3d";
        if shape.len() < 2 {
            return Err(mismatch(OP, format!("input needs a channel axis, got {shape:?}")));
        }
        let c = shape[1];
        if gamma != c || beta != c {
            return Err(mismatch(
                OP,
                format!("input has {c} channels, gamma {gamma}, beta {beta}"),
            ));
        }
        Ok(Self {
            n: shape[0],
            c,
            inner: shape[2..].iter().product(),
        })
    }

    fn count(&self) -> usize {
        self.n * self.inner
    }

    /// Range of flat indices holding channel `c` of sample `n`.
    fn span(&self, n: usize, c: usize) -> std::ops::Range<usize> {
        let base = (n * self.c + c) * self.inner;
        base..base + self.inner
    }
}

pub(crate) fn check_eps<T: Element>(eps: T) -> Result<()> {
    if !(eps > T::zero()) {
        return Err(TensorError::InvalidArgument {
            op: "batch_norm3d",
            detail: format!("eps must be positive, got {eps}"),
        });
    }
    Ok(())
}

pub(crate) struct NormForward<T> {
    pub out: Vec<T>,
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
}

/// Returns the normalized output plus the biased batch mean and variance.
pub(crate) fn forward_train<T: Element>(
    dims: &NormDims,
    x: &[T],
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> (NormForward<T>, Vec<T>, Vec<T>) {
    let m = T::from_usize(dims.count()).unwrap();
    let mut mean = vec![T::zero(); dims.c];
    let mut var = vec![T::zero(); dims.c];
    for c in 0..dims.c {
        let s = (0..dims.n).fold(T::zero(), |acc, n| acc + reduce::sum(&x[dims.span(n, c)]));
        mean[c] = s / m;
        let ss = (0..dims.n).fold(T::zero(), |acc, n| acc + reduce::sq_dev(&x[dims.span(n, c)], mean[c]));
        var[c] = ss / m;
    }
    let fwd = normalize(dims, x, gamma, beta, &mean, &var, eps);
    (fwd, mean, var)
}

pub(crate) fn normalize<T: Element>(
    dims: &NormDims,
    x: &[T],
    gamma: &[T],
    beta: &[T],
    mean: &[T],
    var: &[T],
    eps: T,
) -> NormForward<T> {
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); x.len()];
    let mut out = vec![T::zero(); x.len()];
    for c in 0..dims.c {
        let (mu, is, g, b) = (mean[c], inv_std[c], gamma[c], beta[c]);
        for n in 0..dims.n {
            let r = dims.span(n, c);
            for ((h, o), &v) in xhat[r.clone()].iter_mut().zip(&mut out[r.clone()]).zip(&x[r]) {
                *h = (v - mu) * is;
                *o = g * *h + b;
            }
        }
    }
    NormForward { out, xhat, inv_std }
}

pub(crate) fn update_running<T: Element>(
    dims: &NormDims,
    running: &mut RunningStats<T>,
    momentum: T,
    mean: &[T],
    biased_var: &[T],
) {
    let m = dims.count();
    let correction = if m > 1 {
        T::from_usize(m).unwrap() / T::from_usize(m - 1).unwrap()
    } else {
        T::one()
    };
    let keep = T::one() - momentum;
    for c in 0..dims.c {
        running.mean[c] = keep * running.mean[c] + momentum * mean[c];
        running.var[c] = keep * running.var[c] + momentum * biased_var[c] * correction;
    }
}

pub(crate) struct NormGrads<T> {
    pub input: Vec<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

pub(crate) fn backward<T: Element>(
    dims: &NormDims,
    xhat: &[T],
    inv_std: &[T],
    gamma: &[T],
    grad_out: &[T],
    batch_stats: bool,
) -> NormGrads<T> {
    let m = T::from_usize(dims.count()).unwrap();
    let mut d_input = vec![T::zero(); xhat.len()];
    let mut d_gamma = vec![T::zero(); dims.c];
    let mut d_beta = vec![T::zero(); dims.c];
    for c in 0..dims.c {
        let (mut sum_g, mut sum_gx) = (T::zero(), T::zero());
        for n in 0..dims.n {
            let r = dims.span(n, c);
            sum_g += reduce::sum(&grad_out[r.clone()]);
            sum_gx += reduce::dot(&grad_out[r.clone()], &xhat[r]);
        }
        d_beta[c] = sum_g;
        d_gamma[c] = sum_gx;
        let scale = gamma[c] * inv_std[c];
        let (mean_g, mean_gx) = if batch_stats {
            (sum_g / m, sum_gx / m)
        } else {
            (T::zero(), T::zero())
        };
        for n in 0..dims.n {
            let r = dims.span(n, c);
            for ((d, &g), &h) in d_input[r.clone()].iter_mut().zip(&grad_out[r.clone()]).zip(&xhat[r]) {
                *d = scale * (g - mean_g - h * mean_gx);
            }
        }
    }
    NormGrads {
        input: d_input,
        gamma: d_gamma,
        beta: d_beta,
    }
}
