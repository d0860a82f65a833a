//! Parameter update rules over a flat list of tensors with matching
//! gradient buffers.

use medconv_tensor::{Element, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Sam,
    Schedulefree,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    /// L2 coefficient added to the gradient in the momentum update.
    pub weight_decay: f64,
    /// SAM neighbourhood radius.
    pub rho: f64,
    /// Schedule-free interpolation between `z` and `x`.
    pub beta: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 0.0,
            rho: 0.05,
            beta: 0.9,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad(format!("lr must be finite and nonnegative, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be nonnegative, got {}", self.weight_decay));
        }
        if !(self.rho.is_finite() && self.rho >= 0.0) {
            return bad(format!("rho must be nonnegative, got {}", self.rho));
        }
        if !(0.0..1.0).contains(&self.beta) {
            return bad(format!("beta must lie in [0, 1), got {}", self.beta));
        }
        if self.kind == OptimizerKind::Schedulefree && self.lr <= 0.0 {
            return bad("schedule-free needs lr > 0".into());
        }
        Ok(())
    }
}

fn check_grads<T: Element>(params: &[Tensor<T>], grads: &[Vec<T>]) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::LengthMismatch(format!(
            "{} parameters but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.numel() != g.len() {
            return Err(Error::LengthMismatch(format!(
                "parameter {i} has {} values but its gradient has {}",
                p.numel(),
                g.len()
            )));
        }
    }
    Ok(())
}

fn check_finite<T: Element>(grads: &[Vec<T>]) -> Result<()> {
    if grads.iter().flatten().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("gradient".into()));
    }
    Ok(())
}

/// `v <- mu v + g + wd w; w <- w - lr v`.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    lr: T,
    momentum: T,
    weight_decay: T,
    velocity: Vec<Vec<T>>,
}

impl<T: Element> Sgd<T> {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self {
            lr: T::from_f64_lossy(lr),
            momentum: T::from_f64_lossy(momentum),
            weight_decay: T::zero(),
            velocity: Vec::new(),
        }
    }

    pub fn with_weight_decay(mut self, wd: f64) -> Self {
        self.weight_decay = T::from_f64_lossy(wd);
        self
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = T::from_f64_lossy(lr);
    }

    pub fn velocity(&self) -> &[Vec<T>] {
        &self.velocity
    }

    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Vec<T>]) -> Result<()> {
        check_grads(params, grads)?;
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![T::zero(); p.numel()]).collect();
        } else if self.velocity.len() != params.len() {
            return Err(Error::LengthMismatch("parameter list changed between steps".into()));
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            if v.len() != g.len() {
                return Err(Error::LengthMismatch("parameter shape changed between steps".into()));
            }
            for ((w, &g), v) in p.data_mut().iter_mut().zip(g).zip(v.iter_mut()) {
                *v = self.momentum * *v + g + self.weight_decay * *w;
                *w -= self.lr * *v;
            }
        }
        Ok(())
    }
}

/// Loss and gradients at the given parameters.
pub type LossAndGrads<T> = (f64, Vec<Vec<T>>);

/// Sharpness-aware step: gradient taken at `w + rho g / |g|`, applied at `w`
/// through momentum SGD.
#[derive(Debug, Clone)]
pub struct Sam<T> {
    rho: f64,
    inner: Sgd<T>,
}

impl<T: Element> Sam<T> {
    pub fn new(lr: f64, momentum: f64, rho: f64) -> Self {
        Self {
            rho,
            inner: Sgd::new(lr, momentum),
        }
    }

    pub fn with_weight_decay(mut self, wd: f64) -> Self {
        self.inner = self.inner.with_weight_decay(wd);
        self
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.inner.set_lr(lr);
    }

    /// Calls `loss_grad` once, or twice when the gradient is nonzero and
    /// `rho > 0`. Returns the loss at the unperturbed point.
    pub fn step<F>(&mut self, params: &mut [Tensor<T>], mut loss_grad: F) -> Result<f64>
    where
        F: FnMut(&[Tensor<T>]) -> Result<LossAndGrads<T>>,
    {
        let (loss, grads) = loss_grad(params)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("loss {loss}")));
        }
        check_grads(params, &grads)?;
        check_finite(&grads)?;
        let norm = grads.iter().flatten().map(|g| g.as_f64().powi(2)).sum::<f64>().sqrt();
        if self.rho == 0.0 || norm == 0.0 {
            self.inner.step(params, &grads)?;
            return Ok(loss);
        }
        let saved: Vec<Vec<T>> = params.iter().map(|p| p.data().to_vec()).collect();
        let scale = T::from_f64_lossy(self.rho / norm);
        for (p, g) in params.iter_mut().zip(&grads) {
            for (w, &g) in p.data_mut().iter_mut().zip(g) {
                *w += scale * g;
            }
        }
        let perturbed = loss_grad(params);
        for (p, s) in params.iter_mut().zip(&saved) {
            p.data_mut().copy_from_slice(s);
        }
        let (sharp_loss, sharp_grads) = perturbed?;
        if !sharp_loss.is_finite() {
            return Err(Error::NonFinite(format!("perturbed loss {sharp_loss}")));
        }
        check_grads(params, &sharp_grads)?;
        check_finite(&sharp_grads)?;
        self.inner.step(params, &sharp_grads)?;
        Ok(loss)
    }
}

/// Schedule-free averaging. Gradients are taken at
/// `y = (1 - beta) z + beta x`; `x` is the iterate to evaluate.
#[derive(Debug, Clone)]
pub struct ScheduleFree<T> {
    lr: T,
    beta: T,
    z: Vec<Vec<T>>,
    x: Vec<Vec<T>>,
    t: u64,
}

impl<T: Element> ScheduleFree<T> {
    /// Starts with `z = x = params`.
    pub fn new(params: &[Tensor<T>], lr: f64, beta: f64) -> Self {
        let start: Vec<Vec<T>> = params.iter().map(|p| p.data().to_vec()).collect();
        Self {
            lr: T::from_f64_lossy(lr),
            beta: T::from_f64_lossy(beta),
            z: start.clone(),
            x: start,
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn z(&self) -> &[Vec<T>] {
        &self.z
    }

    pub fn x(&self) -> &[Vec<T>] {
        &self.x
    }

    fn check(&self, params: &[Tensor<T>]) -> Result<()> {
        if params.len() != self.z.len() || params.iter().zip(&self.z).any(|(p, z)| p.numel() != z.len()) {
            return Err(Error::LengthMismatch("parameters do not match schedule-free state".into()));
        }
        Ok(())
    }

    /// Writes the gradient point `y` into `params`.
    pub fn load_gradient_point(&self, params: &mut [Tensor<T>]) -> Result<()> {
        self.check(params)?;
        let keep = T::one() - self.beta;
        for ((p, z), x) in params.iter_mut().zip(&self.z).zip(&self.x) {
            for ((w, &z), &x) in p.data_mut().iter_mut().zip(z).zip(x) {
                *w = keep * z + self.beta * x;
            }
        }
        Ok(())
    }

    /// Writes the averaged iterate `x` into `params`.
    pub fn load_average(&self, params: &mut [Tensor<T>]) -> Result<()> {
        self.check(params)?;
        for (p, x) in params.iter_mut().zip(&self.x) {
            p.data_mut().copy_from_slice(x);
        }
        Ok(())
    }

    /// Applies a gradient taken at `y` and leaves the next `y` in `params`.
    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Vec<T>]) -> Result<()> {
        self.check(params)?;
        check_grads(params, grads)?;
        check_finite(grads)?;
        let c = T::one() / T::from_u64(self.t + 1).unwrap();
        for ((z, x), g) in self.z.iter_mut().zip(&mut self.x).zip(grads) {
            for ((z, x), &g) in z.iter_mut().zip(x.iter_mut()).zip(g) {
                *z -= self.lr * g;
                *x = (T::one() - c) * *x + c * *z;
            }
        }
        self.t += 1;
        self.load_gradient_point(params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(w: f64) -> Vec<Tensor<f64>> {
        vec![Tensor::from_vec(&[1], vec![w]).unwrap()]
    }

    #[test]
    fn sgd_rejects_shape_mismatch() {
        let mut p = scalar(1.0);
        let mut opt = Sgd::new(0.1, 0.9);
        assert!(opt.step(&mut p, &[vec![1.0, 2.0]]).is_err());
        assert!(opt.step(&mut p, &[]).is_err());
    }

    #[test]
    fn weight_decay_adds_l2_gradient() {
        let mut p = scalar(2.0);
        let mut opt = Sgd::new(0.1, 0.0).with_weight_decay(0.5);
        opt.step(&mut p, &[vec![0.0]]).unwrap();
        assert!((p[0].data()[0] - 1.9).abs() < 1e-15);
    }

    #[test]
    fn sam_rejects_nonfinite_loss() {
        let mut p = scalar(1.0);
        let mut opt = Sam::new(0.1, 0.0, 0.1);
        let res = opt.step(&mut p, |_| Ok((f64::NAN, vec![vec![1.0]])));
        assert!(matches!(res, Err(Error::NonFinite(_))));
    }

    #[test]
    fn config_validation() {
        assert!(OptimConfig::default().validate().is_ok());
        let c = OptimConfig {
            beta: 1.0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let c = OptimConfig {
            kind: OptimizerKind::Schedulefree,
            lr: 0.0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }
}
