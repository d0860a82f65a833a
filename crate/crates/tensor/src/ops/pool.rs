use crate::element::Element;
use crate::error::{mismatch, Result, TensorError};
use crate::ops::conv::Conv3dGeometry;
use crate::ops::reduce;

pub(crate) fn global_avg_forward<T: Element>(shape: &[usize], x: &[T]) -> Result<(Vec<usize>, Vec<T>)> {
    if shape.len() != 5 {
        return Err(mismatch("global_avg_pool3d", format!("expected N,C,D,H,W, got {shape:?}")));
    }
    let spatial: usize = shape[2..].iter().product();
    let denom = T::from_usize(spatial).unwrap();
    let out = x
        .chunks(spatial)
        .map(|v| reduce::sum(v) / denom)
        .collect();
    Ok((vec![shape[0], shape[1]], out))
}

pub(crate) fn global_avg_backward<T: Element>(shape: &[usize], grad_out: &[T]) -> Vec<T> {
    let spatial: usize = shape[2..].iter().product();
    let denom = T::from_usize(spatial).unwrap();
    grad_out
        .iter()
        .flat_map(|&g| std::iter::repeat_n(g / denom, spatial))
        .collect()
}

/// Max pooling with padded taps excluded. Returns output shape, values, and
/// the flat input index each output was taken from.
pub(crate) fn max_forward<T: Element>(
    shape: &[usize],
    x: &[T],
    kernel: [usize; 3],
    geom: Conv3dGeometry,
) -> Result<(Vec<usize>, Vec<T>, Vec<usize>)> {
    const OP: &str = "max_pool3d";
    if shape.len() != 5 {
        return Err(mismatch(OP, format!("expected N,C,D,H,W, got {shape:?}")));
    }
    let mut out_ext = [0; 3];
    for a in 0..3 {
        if geom.pad[a] >= kernel[a] {
            return Err(TensorError::InvalidArgument {
                op: OP,
                detail: format!("padding {} must be smaller than the window {}", geom.pad[a], kernel[a]),
            });
        }
        out_ext[a] = Conv3dGeometry::output_extent(shape[2 + a], kernel[a], geom.stride[a], geom.pad[a])
            .ok_or_else(|| TensorError::EmptyOutput {
                op: OP,
                detail: format!("axis {a}: window {} exceeds padded extent", kernel[a]),
            })?;
    }
    let (d, h, w) = (shape[2], shape[3], shape[4]);
    let [od, oh, ow] = out_ext;
    let planes = shape[0] * shape[1];
    let mut out = Vec::with_capacity(planes * od * oh * ow);
    let mut arg = Vec::with_capacity(out.capacity());
    for p in 0..planes {
        let base = p * d * h * w;
        for z in 0..od {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut best = T::neg_infinity();
                    let mut best_i = usize::MAX;
                    for a in 0..kernel[0] {
                        let iz = (z * geom.stride[0] + a) as isize - geom.pad[0] as isize;
                        if iz < 0 || iz >= d as isize {
                            continue;
                        }
                        for b in 0..kernel[1] {
                            let iy = (y * geom.stride[1] + b) as isize - geom.pad[1] as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for c in 0..kernel[2] {
                                let ix = (xo * geom.stride[2] + c) as isize - geom.pad[2] as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let i = base + (iz as usize * h + iy as usize) * w + ix as usize;
                                // strict > keeps the first maximum, which fixes tie routing
                                if x[i] > best || best_i == usize::MAX {
                                    best = x[i];
                                    best_i = i;
                                }
                            }
                        }
                    }
                    out.push(best);
                    arg.push(best_i);
                }
            }
        }
    }
    Ok((vec![shape[0], shape[1], od, oh, ow], out, arg))
}

pub(crate) fn max_backward<T: Element>(input_len: usize, argmax: &[usize], grad_out: &[T]) -> Vec<T> {
    let mut dx = vec![T::zero(); input_len];
    for (&i, &g) in argmax.iter().zip(grad_out) {
        dx[i] += g;
    }
    dx
}
