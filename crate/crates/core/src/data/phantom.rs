//! Synthetic long-tailed vertebral-body phantoms.
//!
//! Each phantom is a rotated, displaced ellipsoid in soft-tissue background.
//! A thin cortical shell surrounds a trabecular interior whose mean density
//! depends on the class. Every draw for sample `i` comes from the keyed stream
//! `(seed, Phantom, 0, i)`, so a given index always yields the same volume.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::manifest::{Manifest, SampleRecord, Split, DEFAULT_CLASS_NAMES};
use super::rng::{keyed_rng, Purpose};
use super::volume::{save_volume, Volume};
use crate::error::{Error, IoContext, Result};

/// Generator parameters; every field has a default.
///
/// Defaults put the class trabecular means 100 HU and 30 HU apart with a
/// 20 HU between-subject spread, so the mean interior density alone
/// separates the classes at roughly 90% accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    /// `(dx, dy, dz)` of the written volumes.
    pub dims: [usize; 3],
    pub class_names: Vec<String>,
    pub proportions: Vec<f64>,
    /// Per-class mean of the cortical shell, HU.
    pub cortical_mean: Vec<f64>,
    /// Per-class mean of the trabecular interior, HU.
    pub trabecular_mean: Vec<f64>,
    /// Between-subject standard deviation of the cortical mean.
    pub cortical_sd: f64,
    /// Between-subject standard deviation of the trabecular mean.
    pub trabecular_sd: f64,
    /// Per-voxel Gaussian noise.
    pub noise_sigma: f64,
    pub background_mean: f64,
    /// Shell thickness in voxels.
    pub shell_thickness: f64,
    /// Semi-axis ranges in voxels, drawn uniformly per axis.
    pub semi_axis_min: [f64; 3],
    pub semi_axis_max: [f64; 3],
    /// Maximum centre displacement from the grid centre, voxels.
    pub max_offset: f64,
    /// Maximum tilt about the x and y axes, radians; rotation about z is free.
    pub max_tilt: f64,
    pub test_fraction: f64,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            dims: [32, 32, 32],
            class_names: DEFAULT_CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
            proportions: vec![0.60, 0.25, 0.15],
            cortical_mean: vec![650.0, 600.0, 575.0],
            trabecular_mean: vec![200.0, 100.0, 70.0],
            cortical_sd: 25.0,
            trabecular_sd: 20.0,
            noise_sigma: 60.0,
            background_mean: 40.0,
            shell_thickness: 1.5,
            semi_axis_min: [9.0, 7.0, 6.0],
            semi_axis_max: [12.0, 10.0, 9.0],
            max_offset: 2.0,
            max_tilt: 0.3,
            test_fraction: 0.2,
            val_fraction: 0.0,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn num_classes(&self) -> usize {
        self.proportions.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let c = self.proportions.len();
        if c < 2 {
            return bad(format!("need at least 2 classes, got {c}"));
        }
        for (name, len) in [
            ("class_names", self.class_names.len()),
            ("cortical_mean", self.cortical_mean.len()),
            ("trabecular_mean", self.trabecular_mean.len()),
        ] {
            if len != c {
                return bad(format!("{name} has {len} entries for {c} proportions"));
            }
        }
        if self.proportions.iter().any(|&p| !(p.is_finite() && p > 0.0)) {
            return bad(format!("proportions must be positive, got {:?}", self.proportions));
        }
        let total: f64 = self.proportions.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return bad(format!("proportions sum to {total}, expected 1"));
        }
        if let Some(d) = self.dims.iter().find(|&&d| d < 8) {
            return bad(format!("every dimension must be at least 8, got {d}"));
        }
        let nonneg = [
            ("cortical_sd", self.cortical_sd),
            ("trabecular_sd", self.trabecular_sd),
            ("noise_sigma", self.noise_sigma),
            ("max_offset", self.max_offset),
            ("max_tilt", self.max_tilt),
        ];
        if let Some((name, v)) = nonneg.iter().find(|(_, v)| !(v.is_finite() && *v >= 0.0)) {
            return bad(format!("{name} must be finite and nonnegative, got {v}"));
        }
        if !(self.shell_thickness.is_finite() && self.shell_thickness > 0.0) {
            return bad(format!("shell_thickness must be positive, got {}", self.shell_thickness));
        }
        for a in 0..3 {
            let (lo, hi) = (self.semi_axis_min[a], self.semi_axis_max[a]);
            if !(lo > self.shell_thickness && lo <= hi && hi.is_finite()) {
                return bad(format!("semi-axis range {a} is [{lo}, {hi}]"));
            }
        }
        let fr = [self.test_fraction, self.val_fraction];
        if fr.iter().any(|f| !(0.0..1.0).contains(f)) || fr.iter().sum::<f64>() >= 1.0 {
            return bad(format!("test/val fractions {fr:?} must be in [0, 1) and leave training samples"));
        }
        Ok(())
    }
}

/// Rounds `total * weights` to integers summing to `total`: floors first,
/// then one extra unit to the largest remainders, lowest index on ties.
pub fn largest_remainder(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    if weights.is_empty() || sum <= 0.0 {
        return vec![0; weights.len()];
    }
    let exact: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut out: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let short = total.saturating_sub(out.iter().sum());
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().cycle().take(short) {
        out[i] += 1;
    }
    out
}

/// One phantom volume and its body mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub volume: Volume,
    pub mask: Volume,
    pub label: usize,
}

fn rotation(yaw: f64, tilt_x: f64, tilt_y: f64) -> [[f64; 3]; 3] {
    let (sz, cz) = yaw.sin_cos();
    let (sx, cx) = tilt_x.sin_cos();
    let (sy, cy) = tilt_y.sin_cos();
    let rz = [[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]];
    let rx = [[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]];
    let ry = [[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]];
    let mul = |a: [[f64; 3]; 3], b: [[f64; 3]; 3]| {
        let mut m = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
            }
        }
        m
    };
    mul(rz, mul(ry, rx))
}

/// Draws sample `index` of class `label`.
pub fn render_phantom(cfg: &PhantomConfig, index: u64, label: usize) -> Result<Phantom> {
    if label >= cfg.num_classes() {
        return Err(Error::LabelOutOfRange {
            row: index as usize,
            label,
            classes: cfg.num_classes(),
        });
    }
    let mut rng = keyed_rng(cfg.seed, Purpose::Phantom, 0, index);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut axes = [0.0; 3];
    for a in 0..3 {
        axes[a] = rng.random_range(cfg.semi_axis_min[a]..=cfg.semi_axis_max[a]);
    }
    let yaw = rng.random_range(0.0..std::f64::consts::TAU);
    let tilt = [
        rng.random_range(-cfg.max_tilt..=cfg.max_tilt),
        rng.random_range(-cfg.max_tilt..=cfg.max_tilt),
    ];
    let rot = rotation(yaw, tilt[0], tilt[1]);
    let mut centre = [0.0; 3];
    for (a, c) in centre.iter_mut().enumerate() {
        *c = (cfg.dims[a] as f64 - 1.0) / 2.0 + rng.random_range(-cfg.max_offset..=cfg.max_offset);
    }
    let cortical = cfg.cortical_mean[label] + cfg.cortical_sd * std_normal.sample(&mut rng);
    let trabecular = cfg.trabecular_mean[label] + cfg.trabecular_sd * std_normal.sample(&mut rng);
    // A point is in the shell when it lies inside the ellipsoid but outside
    // the one shrunk by the shell thickness along every axis.
    let inner = axes.map(|a| a - cfg.shell_thickness);

    let [dx, dy, dz] = cfg.dims;
    let n = dx * dy * dz;
    let mut values = Vec::with_capacity(n);
    let mut mask = Vec::with_capacity(n);
    for z in 0..dz {
        for y in 0..dy {
            for x in 0..dx {
                let d = [x as f64 - centre[0], y as f64 - centre[1], z as f64 - centre[2]];
                // Body frame: apply the transpose of the rotation.
                let b: [f64; 3] = std::array::from_fn(|i| (0..3).map(|k| rot[k][i] * d[k]).sum());
                let q = |s: [f64; 3]| (0..3).map(|i| (b[i] / s[i]).powi(2)).sum::<f64>();
                let (base, inside) = if q(axes) > 1.0 {
                    (cfg.background_mean, false)
                } else if q(inner) > 1.0 {
                    (cortical, true)
                } else {
                    (trabecular, true)
                };
                let noise = cfg.noise_sigma * std_normal.sample(&mut rng);
                values.push((base + noise) as f32);
                mask.push(if inside { 1.0 } else { 0.0 });
            }
        }
    }
    Ok(Phantom {
        volume: Volume::new(cfg.dims, values)?.with_spacing([1.0; 3]),
        mask: Volume::new(cfg.dims, mask)?.with_spacing([1.0; 3]),
        label,
    })
}

/// Labels and splits for `n` samples: class counts by largest remainder,
/// labels shuffled, then each class split by largest remainder of its count.
pub fn plan_phantoms(cfg: &PhantomConfig, n: usize) -> Result<Vec<(usize, Split)>> {
    cfg.validate()?;
    let c = cfg.num_classes();
    if n < c {
        return Err(Error::InvalidArgument(format!("need at least {c} phantoms, got {n}")));
    }
    let counts = largest_remainder(n, &cfg.proportions);
    if let Some(class) = counts.iter().position(|&k| k == 0) {
        return Err(Error::ZeroClassCount { class });
    }
    let mut labels: Vec<usize> = counts.iter().enumerate().flat_map(|(l, &k)| vec![l; k]).collect();
    labels.shuffle(&mut keyed_rng(cfg.seed, Purpose::Split, 0, 0));
    let train_fraction = 1.0 - cfg.test_fraction - cfg.val_fraction;
    let per_class: Vec<Vec<usize>> = counts
        .iter()
        .map(|&k| largest_remainder(k, &[train_fraction, cfg.val_fraction, cfg.test_fraction]))
        .collect();
    let mut seen = vec![0; c];
    Ok(labels
        .into_iter()
        .map(|l| {
            let i = seen[l];
            seen[l] += 1;
            let [tr, va, _] = per_class[l][..] else { unreachable!() };
            let split = if i < tr {
                Split::Train
            } else if i < tr + va {
                Split::Val
            } else {
                Split::Test
            };
            (l, split)
        })
        .collect())
}

/// Writes `volumes/case_NNNN.mcvl`, `masks/case_NNNN.mcvl` and `manifest.csv`
/// under `out_dir`.
pub fn generate_phantoms(cfg: &PhantomConfig, n: usize, out_dir: &Path) -> Result<Manifest> {
    let plan = plan_phantoms(cfg, n)?;
    for sub in ["volumes", "masks"] {
        let dir = out_dir.join(sub);
        std::fs::create_dir_all(&dir).at(&dir)?;
    }
    let mut records = Vec::with_capacity(n);
    for (i, &(label, split)) in plan.iter().enumerate() {
        let p = render_phantom(cfg, i as u64, label)?;
        let name = format!("case_{i:04}.mcvl");
        let vol_rel = PathBuf::from("volumes").join(&name);
        let mask_rel = PathBuf::from("masks").join(&name);
        save_volume(&p.volume, &out_dir.join(&vol_rel))?;
        save_volume(&p.mask, &out_dir.join(&mask_rel))?;
        records.push(SampleRecord {
            path: vol_rel,
            mask_path: Some(mask_rel),
            label,
            class_name: cfg.class_names[label].clone(),
            split,
        });
    }
    let manifest = Manifest::new(cfg.class_names.clone(), records, out_dir.to_path_buf())?;
    manifest.save(&out_dir.join("manifest.csv"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rounding_examples() {
        assert_eq!(largest_remainder(200, &[0.6, 0.25, 0.15]), vec![120, 50, 30]);
        assert_eq!(largest_remainder(750, &[0.6, 0.25, 0.15]), vec![450, 188, 112]);
        assert_eq!(largest_remainder(188, &[0.8, 0.0, 0.2]), vec![150, 0, 38]);
        assert_eq!(largest_remainder(3, &[1.0, 1.0, 1.0, 1.0]), vec![1, 1, 1, 0]);
    }

    #[test]
    fn default_split_sizes() {
        let plan = plan_phantoms(&PhantomConfig::default(), 750).unwrap();
        let test = plan.iter().filter(|p| p.1 == Split::Test).count();
        assert_eq!((plan.len() - test, test), (600, 150));
    }

    #[test]
    fn validation() {
        assert!(PhantomConfig::default().validate().is_ok());
        let c = PhantomConfig {
            proportions: vec![0.5, 0.4, 0.2],
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let c = PhantomConfig {
            dims: [7, 32, 32],
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let c: std::result::Result<PhantomConfig, _> = serde_json::from_str(r#"{"seed": 3}"#);
        assert_eq!(c.unwrap().seed, 3);
    }

    #[test]
    fn mask_covers_the_body() {
        let p = render_phantom(&PhantomConfig::default(), 0, 0).unwrap();
        let inside = p.mask.values().iter().filter(|&&m| m > 0.5).count();
        // Ellipsoid volume is at least 4/3 pi 9 7 6 voxels.
        assert!(inside > 1400 && inside < 32 * 32 * 32 / 2, "{inside}");
    }
}
