//! 3D cross-correlation lowered to GEMM through an im2col buffer.
//!
//! Zero padding, no kernel flip. The column buffer for one sample is a
//! `K x P` matrix with `K = Cin*kd*kh*kw` rows and `P = D'*H'*W'` columns.

use crate::element::Element;
use crate::error::{mismatch, Result, TensorError};
use crate::ops::reduce;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Conv3dGeometry {
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl Conv3dGeometry {
    pub fn new(stride: [usize; 3], pad: [usize; 3]) -> Self {
        Self { stride, pad }
    }

    pub fn uniform(stride: usize, pad: usize) -> Self {
        Self::new([stride; 3], [pad; 3])
    }

    /// Output extent along one axis, `None` when the kernel does not fit.
    pub fn output_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
        let padded = input + 2 * pad;
        if stride == 0 || kernel == 0 || kernel > padded {
            return None;
        }
        Some((padded - kernel) / stride + 1)
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvDims {
    pub n: usize,
    pub cin: usize,
    pub input: [usize; 3],
    pub cout: usize,
    pub kernel: [usize; 3],
    pub output: [usize; 3],
    pub geom: Conv3dGeometry,
}

impl ConvDims {
    pub fn new(input_shape: &[usize], kernel_shape: &[usize], geom: Conv3dGeometry) -> Result<Self> {
        const OP: &str = "conv3d";
        if input_shape.len() != 5 {
            return Err(mismatch(OP, format!("input must be N,C,D,H,W, got {input_shape:?}")));
        }
        if kernel_shape.len() != 5 {
            return Err(mismatch(OP, format!("kernel must be Cout,Cin,kd,kh,kw, got {kernel_shape:?}")));
        }
        if input_shape[1] != kernel_shape[1] {
            return Err(mismatch(
                OP,
                format!(
                    "input has {} channels but kernel expects {}",
                    input_shape[1], kernel_shape[1]
                ),
            ));
        }
        if geom.stride.contains(&0) {
            return Err(TensorError::InvalidArgument {
                op: OP,
                detail: format!("stride must be >= 1, got {:?}", geom.stride),
            });
        }
        let mut output = [0; 3];
        for axis in 0..3 {
            let (i, k) = (input_shape[2 + axis], kernel_shape[2 + axis]);
            output[axis] = Conv3dGeometry::output_extent(i, k, geom.stride[axis], geom.pad[axis])
                .ok_or_else(|| TensorError::EmptyOutput {
                    op: OP,
                    detail: format!(
                        "axis {axis}: kernel {k} exceeds padded extent {}",
                        i + 2 * geom.pad[axis]
                    ),
                })?;
        }
        Ok(Self {
            n: input_shape[0],
            cin: input_shape[1],
            input: [input_shape[2], input_shape[3], input_shape[4]],
            cout: kernel_shape[0],
            kernel: [kernel_shape[2], kernel_shape[3], kernel_shape[4]],
            output,
            geom,
        })
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.n, self.cout, self.output[0], self.output[1], self.output[2]]
    }

    fn rows(&self) -> usize {
        self.cin * self.kernel.iter().product::<usize>()
    }

    fn cols(&self) -> usize {
        self.output.iter().product()
    }

    fn sample_len(&self) -> usize {
        self.cin * self.input.iter().product::<usize>()
    }

    /// 1x1x1, stride 1, no padding: the input sample already is the column matrix.
    fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.geom.stride == [1, 1, 1] && self.geom.pad == [0, 0, 0]
    }
}

/// Output positions `lo..hi` along one axis whose input index
/// `o * stride + off - pad` lands inside `0..inp`.
#[inline]
fn valid_range(out: usize, inp: usize, stride: usize, pad: usize, off: usize) -> (usize, usize) {
    let lo = if pad > off { (pad - off).div_ceil(stride) } else { 0 };
    let hi = if inp + pad > off {
        ((inp + pad - off - 1) / stride + 1).min(out)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Calls `f(dst_offset, src_offset, count)` for every contiguous run of valid
/// taps in one column-matrix row; the source advances by the x stride.
#[inline]
fn for_each_run(dims: &ConvDims, mut f: impl FnMut(usize, usize, usize, usize, usize)) {
    let [d, h, w] = dims.input;
    let [kd, kh, kw] = dims.kernel;
    let [od, oh, ow] = dims.output;
    let [sd, sh, sw] = dims.geom.stride;
    let [pd, ph, pw] = dims.geom.pad;
    let mut row = 0;
    for ci in 0..dims.cin {
        let chan = ci * d * h * w;
        for a in 0..kd {
            let (zlo, zhi) = valid_range(od, d, sd, pd, a);
            for b in 0..kh {
                let (ylo, yhi) = valid_range(oh, h, sh, ph, b);
                for c in 0..kw {
                    let (xlo, xhi) = valid_range(ow, w, sw, pw, c);
                    if xlo < xhi {
                        for oz in zlo..zhi {
                            let iz = oz * sd + a - pd;
                            for oy in ylo..yhi {
                                let iy = oy * sh + b - ph;
                                let src = chan + (iz * h + iy) * w + xlo * sw + c - pw;
                                let dst = (oz * oh + oy) * ow + xlo;
                                f(row, dst, src, xhi - xlo, sw);
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Writes only the in-bounds slots; `col` must start zeroed and be reused
/// only with the same `dims`, so padding slots stay zero.
fn im2col<T: Element>(dims: &ConvDims, sample: &[T], col: &mut [T]) {
    let p = dims.cols();
    for_each_run(dims, |row, dst, src, len, step| {
        let out = &mut col[row * p + dst..row * p + dst + len];
        if step == 1 {
            out.copy_from_slice(&sample[src..src + len]);
        } else {
            for (i, o) in out.iter_mut().enumerate() {
                *o = sample[src + i * step];
            }
        }
    });
}

fn col2im<T: Element>(dims: &ConvDims, col: &[T], sample_grad: &mut [T]) {
    let p = dims.cols();
    for_each_run(dims, |row, dst, src, len, step| {
        let from = &col[row * p + dst..row * p + dst + len];
        if step == 1 {
            for (g, &v) in sample_grad[src..src + len].iter_mut().zip(from) {
                *g += v;
            }
        } else {
            for (i, &v) in from.iter().enumerate() {
                sample_grad[src + i * step] += v;
            }
        }
    });
}

pub(crate) fn forward<T: Element>(dims: &ConvDims, input: &[T], kernel: &[T], bias: Option<&[T]>) -> Vec<T> {
    let (k, p) = (dims.rows(), dims.cols());
    let out_len = dims.cout * p;
    let mut out = vec![T::zero(); dims.n * out_len];
    let mut col = if dims.is_pointwise() { Vec::new() } else { vec![T::zero(); k * p] };
    for n in 0..dims.n {
        let sample = &input[n * dims.sample_len()..(n + 1) * dims.sample_len()];
        let dst = &mut out[n * out_len..(n + 1) * out_len];
        if let Some(b) = bias {
            for (co, row) in dst.chunks_mut(p).enumerate() {
                row.fill(b[co]);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        let cols: &[T] = if dims.is_pointwise() {
            sample
        } else {
            im2col(dims, sample, &mut col);
            &col
        };
        T::gemm(dims.cout, k, p, T::one(), kernel, k, 1, cols, p, 1, beta, dst, p, 1);
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub kernel: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub(crate) fn backward<T: Element>(
    dims: &ConvDims,
    input: &[T],
    kernel: &[T],
    grad_out: &[T],
    need: [bool; 3],
) -> ConvGrads<T> {
    let (k, p) = (dims.rows(), dims.cols());
    let out_len = dims.cout * p;
    let mut d_input = need[0].then(|| vec![T::zero(); input.len()]);
    let mut d_kernel = need[1].then(|| vec![T::zero(); kernel.len()]);
    let mut d_bias = need[2].then(|| vec![T::zero(); dims.cout]);
    let pointwise = dims.is_pointwise();
    let mut col = if pointwise || !need[1] { Vec::new() } else { vec![T::zero(); k * p] };
    let mut d_col = if pointwise || !need[0] { Vec::new() } else { vec![T::zero(); k * p] };

    for n in 0..dims.n {
        let sample = &input[n * dims.sample_len()..(n + 1) * dims.sample_len()];
        let g = &grad_out[n * out_len..(n + 1) * out_len];
        if let Some(db) = d_bias.as_mut() {
            for (co, row) in g.chunks(p).enumerate() {
                db[co] += reduce::sum(row);
            }
        }
        if let Some(dk) = d_kernel.as_mut() {
            let cols: &[T] = if pointwise {
                sample
            } else {
                im2col(dims, sample, &mut col);
                &col
            };
            // dK[Cout,K] += G[Cout,P] * colsᵀ
            T::gemm(dims.cout, p, k, T::one(), g, p, 1, cols, 1, p, T::one(), dk, k, 1);
        }
        if let Some(dx) = d_input.as_mut() {
            let dst = &mut dx[n * dims.sample_len()..(n + 1) * dims.sample_len()];
            // dcols[K,P] = Kᵀ * G
            if pointwise {
                T::gemm(k, dims.cout, p, T::one(), kernel, 1, k, g, p, 1, T::zero(), dst, p, 1);
            } else {
                T::gemm(k, dims.cout, p, T::one(), kernel, 1, k, g, p, 1, T::zero(), &mut d_col, p, 1);
                col2im(dims, &d_col, dst);
            }
        }
    }
    ConvGrads {
        input: d_input,
        kernel: d_kernel,
        bias: d_bias,
    }
}
