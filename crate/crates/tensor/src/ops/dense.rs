use crate::element::Element;
use crate::error::{mismatch, Result};

pub(crate) fn check(input: &[usize], weight: &[usize], bias: Option<&[usize]>) -> Result<(usize, usize, usize)> {
    const OP: &str = "linear";
    if input.len() != 2 || weight.len() != 2 {
        return Err(mismatch(OP, format!("input {input:?} and weight {weight:?} must be 2-D")));
    }
    let (n, f, o) = (input[0], input[1], weight[0]);
    if weight[1] != f {
        return Err(mismatch(OP, format!("input has {f} features but weight expects {}", weight[1])));
    }
    if let Some(b) = bias {
        if b != [o] {
            return Err(mismatch(OP, format!("bias shape {b:?} does not match {o} outputs")));
        }
    }
    Ok((n, f, o))
}

pub(crate) fn forward<T: Element>(n: usize, f: usize, o: usize, x: &[T], w: &[T], b: Option<&[T]>) -> Vec<T> {
    let mut out = vec![T::zero(); n * o];
    if let Some(b) = b {
        out.chunks_mut(o).for_each(|row| row.copy_from_slice(b));
    }
    let beta = if b.is_some() { T::one() } else { T::zero() };
    // out[N,O] = x[N,F] * wᵀ
    T::gemm(n, f, o, T::one(), x, f, 1, w, 1, f, beta, &mut out, o, 1);
    out
}

pub(crate) fn backward_input<T: Element>(n: usize, f: usize, o: usize, w: &[T], g: &[T]) -> Vec<T> {
    let mut dx = vec![T::zero(); n * f];
    T::gemm(n, o, f, T::one(), g, o, 1, w, f, 1, T::zero(), &mut dx, f, 1);
    dx
}

pub(crate) fn backward_weight<T: Element>(n: usize, f: usize, o: usize, x: &[T], g: &[T]) -> Vec<T> {
    let mut dw = vec![T::zero(); o * f];
    // dw[O,F] = gᵀ[O,N] * x[N,F]
    T::gemm(o, n, f, T::one(), g, 1, o, x, f, 1, T::zero(), &mut dw, f, 1);
    dw
}

pub(crate) fn backward_bias<T: Element>(o: usize, g: &[T]) -> Vec<T> {
    let mut db = vec![T::zero(); o];
    for row in g.chunks(o) {
        db.iter_mut().zip(row).for_each(|(a, &b)| *a += b);
    }
    db
}
