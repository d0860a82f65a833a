//! Scalar volumes and the `MCVL` file format.
//!
//! Layout: magic `MCVL`, u32 version (1), u32 dx, dy, dz, u32 dtype code
//! (1 = little-endian f32), optionally three f32 spacings in mm, then the
//! voxels with index `((z * dy) + y) * dx + x`. All integers little-endian.
//! Spacing presence is implied by the payload length.

use std::fs;
use std::path::Path;

use medconv_tensor::{Element, Tensor};

use crate::error::{Error, IoContext, Result};

const MAGIC: &[u8; 4] = b"MCVL";
const VERSION: u32 = 1;
const DTYPE_F32: u32 = 1;
const HEADER: usize = 24;

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    values: Vec<f32>,
    spacing: Option<[f32; 3]>,
}

impl Volume {
    /// `dims` is `(dx, dy, dz)`.
    pub fn new(dims: [usize; 3], values: Vec<f32>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::InvalidArgument(format!("volume dims must be positive, got {dims:?}")));
        }
        let n = dims.iter().product::<usize>();
        if values.len() != n {
            return Err(Error::LengthMismatch(format!(
                "volume {dims:?} needs {n} voxels, got {}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("volume voxel".into()));
        }
        Ok(Self {
            dims,
            values,
            spacing: None,
        })
    }

    pub fn filled(dims: [usize; 3], value: f32) -> Result<Self> {
        Self::new(dims, vec![value; dims.iter().product()])
    }

    pub fn with_spacing(mut self, spacing: [f32; 3]) -> Self {
        self.spacing = Some(spacing);
        self
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn spacing(&self) -> Option<[f32; 3]> {
        self.spacing
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[0] + x
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.values[self.index(x, y, z)]
    }

    pub(crate) fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            dims: self.dims,
            values: self.values.iter().map(|&v| f(v)).collect(),
            spacing: self.spacing,
        }
    }

    pub(crate) fn from_parts(dims: [usize; 3], values: Vec<f32>, spacing: Option<[f32; 3]>) -> Self {
        debug_assert_eq!(values.len(), dims.iter().product::<usize>());
        Self { dims, values, spacing }
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.values
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().map(|&v| v as f64).sum::<f64>() / self.values.len() as f64
    }

    /// Shape `[1, dz, dy, dx]`, the channel-first layout the model expects.
    pub fn to_tensor<T: Element>(&self) -> Result<Tensor<T>> {
        let [dx, dy, dz] = self.dims;
        Ok(Tensor::from_vec(
            &[1, dz, dy, dx],
            self.values.iter().map(|&v| T::from_f64_lossy(v as f64)).collect(),
        )?)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(HEADER + 12 + 4 * self.values.len());
        buf.extend_from_slice(MAGIC);
        for w in [VERSION, self.dims[0] as u32, self.dims[1] as u32, self.dims[2] as u32, DTYPE_F32] {
            buf.extend_from_slice(&w.to_le_bytes());
        }
        if let Some(s) = self.spacing {
            for v in s {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        for v in &self.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::BadMagic {
                path: path.into(),
                expected: "MCVL",
            });
        }
        if bytes.len() < HEADER {
            return Err(Error::Truncated {
                path: path.into(),
                expected: HEADER,
                actual: bytes.len(),
            });
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
        let unsupported = |what, value| Error::Unsupported {
            path: path.into(),
            what,
            value,
        };
        if word(0) != VERSION {
            return Err(unsupported("volume version", word(0)));
        }
        if word(4) != DTYPE_F32 {
            return Err(unsupported("dtype code", word(4)));
        }
        let dims = [word(1) as usize, word(2) as usize, word(3) as usize];
        if dims.contains(&0) {
            return Err(Error::PayloadMismatch {
                path: path.into(),
                detail: format!("zero extent in dims {dims:?}"),
            });
        }
        let n = dims.iter().product::<usize>();
        let payload = &bytes[HEADER..];
        let (spacing, voxels) = if payload.len() == 4 * n {
            (None, payload)
        } else if payload.len() == 4 * n + 12 {
            let f = |i: usize| f32::from_le_bytes(payload[4 * i..4 * i + 4].try_into().unwrap());
            (Some([f(0), f(1), f(2)]), &payload[12..])
        } else if payload.len() < 4 * n {
            return Err(Error::Truncated {
                path: path.into(),
                expected: HEADER + 4 * n,
                actual: bytes.len(),
            });
        } else {
            return Err(Error::PayloadMismatch {
                path: path.into(),
                detail: format!(
                    "dims {dims:?} imply {} payload bytes (or {} with spacing), found {}",
                    4 * n,
                    4 * n + 12,
                    payload.len()
                ),
            });
        };
        let values: Vec<f32> = voxels
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("voxel in {}", path.display())));
        }
        Ok(Self { dims, values, spacing })
    }
}

pub fn save_volume(vol: &Volume, path: &Path) -> Result<()> {
    fs::write(path, vol.to_bytes()).at(path)
}

pub fn load_volume(path: &Path) -> Result<Volume> {
    let bytes = fs::read(path).at(path)?;
    Volume::from_bytes(&bytes, path)
}
