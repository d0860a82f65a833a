//! Stacking preprocessed volumes into `[B, 1, D, H, W]` tensors.

use medconv_tensor::{Element, Tensor};

use super::volume::Volume;
use crate::error::{Error, Result};

pub fn stack_batch<T: Element>(vols: &[&Volume]) -> Result<Tensor<T>> {
    let Some(first) = vols.first() else {
        return Err(Error::InvalidArgument("empty batch".into()));
    };
    let [dx, dy, dz] = first.dims();
    let mut data = Vec::with_capacity(vols.len() * first.len());
    for v in vols {
        if v.dims() != first.dims() {
            return Err(Error::LengthMismatch(format!("batch mixes {:?} and {:?} volumes", first.dims(), v.dims())));
        }
        data.extend(v.values().iter().map(|&x| T::from_f64_lossy(x as f64)));
    }
    Ok(Tensor::from_vec(&[vols.len(), 1, dz, dy, dx], data)?)
}
