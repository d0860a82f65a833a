//! Random flips, shifted crops and intensity jitter, plus per-class policies
//! that augment rarer classes more often.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::manifest::ClassStats;
use super::volume::Volume;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugPolicy {
    /// Probability that a sample is augmented at all.
    pub prob: f64,
    /// Each axis is flipped with probability 1/2.
    pub flip: bool,
    /// Maximum translation in voxels per axis; borders replicate.
    pub shift: usize,
    /// `x -> a x + b` with `a` in [0.9, 1.1] and `b` in [-0.05, 0.05].
    pub jitter: bool,
}

impl Default for AugPolicy {
    fn default() -> Self {
        Self {
            prob: 0.3,
            flip: true,
            shift: 2,
            jitter: true,
        }
    }
}

impl AugPolicy {
    pub fn disabled() -> Self {
        Self {
            prob: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.prob) {
            return Err(Error::Config(format!("augmentation prob must lie in [0, 1], got {}", self.prob)));
        }
        Ok(())
    }
}

/// Mirrors axis 0 (x), 1 (y) or 2 (z).
pub fn flip_axis(vol: &Volume, axis: usize) -> Volume {
    let d = vol.dims();
    let mut values = Vec::with_capacity(vol.len());
    for z in 0..d[2] {
        for y in 0..d[1] {
            for x in 0..d[0] {
                let mut p = [x, y, z];
                p[axis] = d[axis] - 1 - p[axis];
                values.push(vol.get(p[0], p[1], p[2]));
            }
        }
    }
    Volume::from_parts(d, values, vol.spacing())
}

/// Output voxel `p` reads input `p + offset`, clamped to the volume.
pub fn shift_replicate(vol: &Volume, offset: [isize; 3]) -> Volume {
    let d = vol.dims();
    let src = |i: usize, a: usize| (i as isize + offset[a]).clamp(0, d[a] as isize - 1) as usize;
    let mut values = Vec::with_capacity(vol.len());
    for z in 0..d[2] {
        for y in 0..d[1] {
            for x in 0..d[0] {
                values.push(vol.get(src(x, 0), src(y, 1), src(z, 2)));
            }
        }
    }
    Volume::from_parts(d, values, vol.spacing())
}

pub fn augment_sample<R: Rng>(vol: &Volume, policy: &AugPolicy, rng: &mut R) -> Volume {
    if !rng.random_bool(policy.prob.clamp(0.0, 1.0)) {
        return vol.clone();
    }
    let mut out = vol.clone();
    if policy.flip {
        for axis in 0..3 {
            if rng.random_bool(0.5) {
                out = flip_axis(&out, axis);
            }
        }
    }
    if policy.shift > 0 {
        let s = policy.shift as i64;
        let offset: [isize; 3] = std::array::from_fn(|_| rng.random_range(-s..=s) as isize);
        if offset != [0, 0, 0] {
            out = shift_replicate(&out, offset);
        }
    }
    if policy.jitter {
        let a = rng.random_range(0.9f32..=1.1);
        let b = rng.random_range(-0.05f32..=0.05);
        out = out.map(|v| a * v + b);
    }
    out
}

/// `p_c = min(1, base * (1 - f_c) / (1 - f_head))`: the most frequent class
/// keeps the base probability and rarer classes are augmented more often.
pub fn balanced_augment_policy(stats: &ClassStats, base: &AugPolicy) -> Vec<AugPolicy> {
    let freqs = stats.frequencies();
    let f_head = freqs.iter().copied().fold(0.0, f64::max);
    freqs
        .iter()
        .map(|&f| {
            let prob = if f_head >= 1.0 || f >= f_head {
                base.prob
            } else {
                (base.prob * (1.0 - f) / (1.0 - f_head)).min(1.0)
            };
            AugPolicy { prob, ..base.clone() }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp() -> Volume {
        Volume::new([3, 2, 2], (0..12).map(|i| i as f32).collect()).unwrap()
    }

    #[test]
    fn flip_moves_voxels() {
        let f = flip_axis(&ramp(), 0);
        assert_eq!(f.get(0, 0, 0), 2.0);
        assert_eq!(flip_axis(&ramp(), 2).get(0, 0, 0), 6.0);
    }

    #[test]
    fn shift_replicates_border() {
        let s = shift_replicate(&ramp(), [1, 0, 0]);
        assert_eq!(&s.values()[..3], &[1.0, 2.0, 2.0]);
    }

    #[test]
    fn zero_prob_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let v = ramp();
        assert_eq!(augment_sample(&v, &AugPolicy::disabled(), &mut rng), v);
    }

    #[test]
    fn prob_bounds_checked() {
        let p = AugPolicy {
            prob: 1.5,
            ..Default::default()
        };
        assert!(p.validate().is_err());
    }
}
