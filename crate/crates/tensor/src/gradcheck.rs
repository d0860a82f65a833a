//! Central finite-difference checking of tape gradients at 64-bit.

use crate::error::{Result, TensorError};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Denominator floor of the relative error.
pub const REL_FLOOR: f64 = 1e-8;

/// Relative disagreement between an analytic and a numeric derivative.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / REL_FLOOR.max(analytic.abs() + numeric.abs())
}

fn evaluate<F>(program: &F, points: &[Tensor<f64>], track: bool) -> Result<(Tape<f64>, Vec<Var>, Var)>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = points
        .iter()
        .map(|p| if track { tape.param(p.clone()) } else { tape.constant(p.clone()) })
        .collect();
    let root = program(&mut tape, &vars)?;
    if !tape.value(root).is_scalar() {
        return Err(TensorError::NonScalarRoot(tape.value(root).shape().to_vec()));
    }
    Ok((tape, vars, root))
}

/// Max relative error between tape gradients of a scalar program and
/// central differences with the given step, over every coordinate of every
/// input.
///
/// Points closer than `step` to a ReLU kink give meaningless numeric
/// derivatives; callers should check [`Tape::relu_margin`] first.
pub fn grad_check_many<F>(program: F, points: &[Tensor<f64>], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let (mut tape, vars, root) = evaluate(&program, points, true)?;
    tape.backward(root)?;
    let mut worst = 0.0f64;
    let mut probe: Vec<Tensor<f64>> = points.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = tape.grad(*var).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; points[i].numel()]);
        for (j, &a) in analytic.iter().enumerate() {
            let origin = points[i].data()[j];
            probe[i].data_mut()[j] = origin + step;
            let plus = evaluate(&program, &probe, false)?;
            probe[i].data_mut()[j] = origin - step;
            let minus = evaluate(&program, &probe, false)?;
            probe[i].data_mut()[j] = origin;
            let numeric = (plus.0.value(plus.2).item() - minus.0.value(minus.2).item()) / (2.0 * step);
            worst = worst.max(relative_error(a, numeric));
        }
    }
    Ok(worst)
}

/// Single-input form of [`grad_check_many`].
pub fn grad_check<F>(program: F, point: &Tensor<f64>, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    grad_check_many(|tape, vars| program(tape, vars[0]), std::slice::from_ref(point), step)
}
