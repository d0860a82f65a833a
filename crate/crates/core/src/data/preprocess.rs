//! Intensity windowing, mask-driven cropping and resampling.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::volume::Volume;
use crate::error::{Error, Result};

pub const DEFAULT_WINDOW_LEVEL: f64 = 300.0;
pub const DEFAULT_WINDOW_WIDTH: f64 = 1500.0;

/// Clamps to `[level - width/2, level + width/2]` and maps that range onto `[0, 1]`.
pub fn window_intensity(vol: &Volume, level: f64, width: f64) -> Result<Volume> {
    if !(width.is_finite() && width > 0.0) || !level.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "window needs finite level and width > 0, got level {level} width {width}"
        )));
    }
    let lo = level - width / 2.0;
    let hi = level + width / 2.0;
    Ok(vol.map(|v| ((v as f64).clamp(lo, hi) - lo) as f32 / width as f32))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interp {
    #[default]
    Trilinear,
    Nearest,
}

/// Per-axis `(x, y, z)` index ranges of the mask bounding box grown by `pad`
/// and clamped to the volume. Mask voxels count as set when above 0.5.
pub fn crop_box(mask: &Volume, pad: usize) -> Result<[Range<usize>; 3]> {
    let dims = mask.dims();
    let mut lo = dims;
    let mut hi = [0usize; 3];
    let mut any = false;
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                if mask.get(x, y, z) > 0.5 {
                    any = true;
                    for (a, i) in [x, y, z].into_iter().enumerate() {
                        lo[a] = lo[a].min(i);
                        hi[a] = hi[a].max(i);
                    }
                }
            }
        }
    }
    if !any {
        return Err(Error::EmptyMask);
    }
    Ok(std::array::from_fn(|a| lo[a].saturating_sub(pad)..(hi[a] + pad + 1).min(dims[a])))
}

fn extract(vol: &Volume, region: &[Range<usize>; 3]) -> Volume {
    let dims = [region[0].len(), region[1].len(), region[2].len()];
    let mut values = Vec::with_capacity(dims.iter().product());
    for z in region[2].clone() {
        for y in region[1].clone() {
            let start = vol.index(region[0].start, y, z);
            values.extend_from_slice(&vol.values()[start..start + dims[0]]);
        }
    }
    Volume::from_parts(dims, values, vol.spacing())
}

/// Source coordinate of output voxel `i` under voxel-centre alignment.
#[inline]
fn source(i: usize, n_in: usize, n_out: usize) -> f64 {
    (i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5
}

/// Resamples to `out_dims` (`dx, dy, dz`). Samples falling outside the
/// source contribute 0.
pub fn resample(vol: &Volume, out_dims: [usize; 3], interp: Interp) -> Result<Volume> {
    if out_dims.contains(&0) {
        return Err(Error::InvalidArgument(format!("output dims must be positive, got {out_dims:?}")));
    }
    let spacing = vol.spacing().map(|s| {
        std::array::from_fn(|a| s[a] * vol.dims()[a] as f32 / out_dims[a] as f32)
    });
    if out_dims == vol.dims() {
        return Ok(Volume::from_parts(out_dims, vol.values().to_vec(), spacing));
    }
    let d = vol.dims();
    let mut values = Vec::with_capacity(out_dims.iter().product());
    match interp {
        Interp::Nearest => {
            let pick = |i: usize, a: usize| ((source(i, d[a], out_dims[a]) + 0.5).floor().max(0.0) as usize).min(d[a] - 1);
            for z in 0..out_dims[2] {
                for y in 0..out_dims[1] {
                    for x in 0..out_dims[0] {
                        values.push(vol.get(pick(x, 0), pick(y, 1), pick(z, 2)));
                    }
                }
            }
        }
        Interp::Trilinear => {
            // Per axis: the two neighbours with their weights, None when outside.
            let taps = |a: usize| -> Vec<[(Option<usize>, f64); 2]> {
                (0..out_dims[a])
                    .map(|i| {
                        let s = source(i, d[a], out_dims[a]);
                        let f = s.floor();
                        let t = s - f;
                        let at = |k: f64| (k >= 0.0 && k < d[a] as f64).then_some(k as usize);
                        [(at(f), 1.0 - t), (at(f + 1.0), t)]
                    })
                    .collect()
            };
            let (tx, ty, tz) = (taps(0), taps(1), taps(2));
            for wz in &tz {
                for wy in &ty {
                    for wx in &tx {
                        let mut acc = 0.0f64;
                        for &(z, fz) in wz {
                            let Some(z) = z else { continue };
                            for &(y, fy) in wy {
                                let Some(y) = y else { continue };
                                for &(x, fx) in wx {
                                    let Some(x) = x else { continue };
                                    acc += fz * fy * fx * vol.get(x, y, z) as f64;
                                }
                            }
                        }
                        values.push(acc as f32);
                    }
                }
            }
        }
    }
    Ok(Volume::from_parts(out_dims, values, spacing))
}

/// Crops to the padded mask bounding box, then resamples to `out_dims`.
pub fn mask_crop(vol: &Volume, mask: &Volume, pad: usize, out_dims: [usize; 3], interp: Interp) -> Result<Volume> {
    if mask.dims() != vol.dims() {
        return Err(Error::LengthMismatch(format!(
            "mask dims {:?} differ from volume dims {:?}",
            mask.dims(),
            vol.dims()
        )));
    }
    let region = crop_box(mask, pad)?;
    resample(&extract(vol, &region), out_dims, interp)
}

/// Windowing, then (when a mask is given) mask-crop, then resampling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub window_level: f64,
    pub window_width: f64,
    pub crop_pad: usize,
    /// Model input extent `(dx, dy, dz)`.
    pub out_dims: [usize; 3],
    pub interp: Interp,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            window_level: DEFAULT_WINDOW_LEVEL,
            window_width: DEFAULT_WINDOW_WIDTH,
            crop_pad: 2,
            out_dims: [24, 24, 24],
            interp: Interp::Trilinear,
        }
    }
}

pub fn preprocess(vol: &Volume, mask: Option<&Volume>, cfg: &PreprocessConfig) -> Result<Volume> {
    let windowed = window_intensity(vol, cfg.window_level, cfg.window_width)?;
    match mask {
        Some(m) => mask_crop(&windowed, m, cfg.crop_pad, cfg.out_dims, cfg.interp),
        None => resample(&windowed, cfg.out_dims, cfg.interp),
    }
}
