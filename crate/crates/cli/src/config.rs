//! Training configuration, overrides from flags, run naming and hashing.

use std::path::{Path, PathBuf};

use anyhow::Context;
use medconv_core::data::{AugPolicy, PreprocessConfig, Split, DEFAULT_WINDOW_LEVEL, DEFAULT_WINDOW_WIDTH};
use medconv_core::losses::{LossKind, LossVariant};
use medconv_core::model::ModelConfig;
use medconv_core::optimizers::{OptimConfig, OptimizerKind};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::exit::config_error;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub loss: LossKind,
    pub loss_variant: LossVariant,
    pub optimizer: OptimConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub oversample: bool,
    /// Apply `aug_policy` to every class.
    pub augment: bool,
    /// Per-class policy derived from `aug_policy`; rarer classes more often.
    pub balaug: bool,
    pub aug_policy: AugPolicy,
    pub preprocess: PreprocessConfig,
    pub tau1: f64,
    pub tau2: f64,
    /// Split evaluated after training and monitored in the log.
    pub eval_split: Split,
    /// Evaluate `eval_split` after every epoch for the log; never used to
    /// pick weights.
    pub log_eval: bool,
    /// After the last step, replace the running norm statistics with an
    /// equal-weight average over the training split at the final weights.
    pub recompute_norms: bool,
    pub manifest: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::micro(),
            loss: LossKind::Ce,
            loss_variant: LossVariant::Softmax,
            optimizer: OptimConfig::default(),
            epochs: 20,
            batch_size: 16,
            seed: 0,
            oversample: false,
            augment: false,
            balaug: false,
            aug_policy: AugPolicy::default(),
            preprocess: PreprocessConfig::default(),
            tau1: 1.0,
            tau2: 1.0,
            eval_split: Split::Test,
            log_eval: true,
            recompute_norms: true,
            manifest: PathBuf::from("manifest.csv"),
            out_dir: PathBuf::from("run"),
        }
    }
}

/// Flag values that replace config fields when present.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub tau1: Option<f64>,
    pub tau2: Option<f64>,
    pub loss: Option<LossKind>,
    pub optimizer: Option<OptimizerKind>,
    pub oversample: bool,
    pub balaug: bool,
    pub window_level: Option<f64>,
    pub window_width: Option<f64>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub manifest: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl TrainConfig {
    /// Reads a JSON config; relative manifest and output paths resolve
    /// against the config file's directory.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_error(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: Self = serde_json::from_str(&text)
            .map_err(|e| config_error(format!("invalid config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.manifest, &mut cfg.out_dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = o.tau1 {
            self.tau1 = v;
        }
        if let Some(v) = o.tau2 {
            self.tau2 = v;
        }
        if let Some(v) = o.loss {
            self.loss = v;
        }
        if let Some(v) = o.optimizer {
            self.optimizer.kind = v;
        }
        self.oversample |= o.oversample;
        self.balaug |= o.balaug;
        if let Some(v) = o.window_level {
            self.preprocess.window_level = v;
        }
        if let Some(v) = o.window_width {
            self.preprocess.window_width = v;
        }
        if let Some(v) = o.epochs {
            self.epochs = v;
        }
        if let Some(v) = o.batch_size {
            self.batch_size = v;
        }
        if let Some(v) = &o.manifest {
            self.manifest = v.clone();
        }
        if let Some(v) = &o.out {
            self.out_dir = v.clone();
        }
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        let fail = |m: String| Err(config_error(m));
        self.model.validate().map_err(|e| config_error(e.to_string()))?;
        self.optimizer.validate().map_err(|e| config_error(e.to_string()))?;
        self.aug_policy.validate().map_err(|e| config_error(e.to_string()))?;
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if self.epochs == 0 {
            return fail("epochs must be at least 1".into());
        }
        for (name, t) in [("tau1", self.tau1), ("tau2", self.tau2)] {
            if !(t.is_finite() && t > 0.0) {
                return fail(format!("{name} must be positive, got {t}"));
            }
        }
        if !(self.preprocess.window_width > 0.0) {
            return fail(format!("window width must be positive, got {}", self.preprocess.window_width));
        }
        let [dx, dy, dz] = self.preprocess.out_dims;
        if self.model.input_shape != [1, dz, dy, dx] {
            return fail(format!(
                "model input shape {:?} does not match preprocessed volumes [1, {dz}, {dy}, {dx}]",
                self.model.input_shape
            ));
        }
        Ok(())
    }

    /// Row name built from the model tag and every switch that departs from
    /// the baseline.
    pub fn run_name(&self) -> String {
        let mut name = self.model.tag();
        if self.loss == LossKind::Balce {
            name.push_str("+balce");
        }
        if self.loss_variant == LossVariant::BinaryPerClass {
            name.push_str("+binary");
        }
        match self.optimizer.kind {
            OptimizerKind::Sgd => {}
            OptimizerKind::Sam => name.push_str("+sam"),
            OptimizerKind::Schedulefree => name.push_str("+schedulefree"),
        }
        if self.oversample {
            name.push_str("+oversample");
        }
        if self.augment && !self.balaug {
            name.push_str("+aug");
        }
        if self.balaug {
            name.push_str("+balaug");
        }
        if self.preprocess.window_level != DEFAULT_WINDOW_LEVEL || self.preprocess.window_width != DEFAULT_WINDOW_WIDTH {
            name.push_str("+windows");
        }
        // No commas: names are CSV cells.
        for (flag, t) in [("tau1", self.tau1), ("tau2", self.tau2)] {
            if t != 1.0 {
                name.push_str(&format!("+{flag}={t}"));
            }
        }
        name
    }

    /// Hash of everything that determines the results: the config with its
    /// paths blanked, plus the manifest contents.
    pub fn hash(&self, manifest_bytes: &[u8]) -> String {
        let mut clean = self.clone();
        clean.manifest = PathBuf::new();
        clean.out_dir = PathBuf::new();
        let json = serde_json::to_vec(&clean).expect("config serializes");
        let mut h = Sha256::new();
        h.update(&json);
        h.update(Sha256::digest(manifest_bytes));
        hex16(&h.finalize())
    }
}

fn hex16(bytes: &[u8]) -> String {
    bytes[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// The archived effective config of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub run_name: String,
    pub class_names: Vec<String>,
    pub train_counts: Vec<usize>,
    pub config: TrainConfig,
}

pub const RUN_RECORD: &str = "run.json";

impl RunRecord {
    pub fn load(run_dir: &Path) -> anyhow::Result<Self> {
        let path = run_dir.join(RUN_RECORD);
        let text = std::fs::read_to_string(&path).with_context(|| format!("cannot read {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("invalid run record {}", path.display()))
    }

    pub fn save(&self, run_dir: &Path) -> anyhow::Result<()> {
        let path = run_dir.join(RUN_RECORD);
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, text + "\n").with_context(|| format!("cannot write {}", path.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn naming_follows_switches() {
        let mut c = TrainConfig::default();
        assert_eq!(c.run_name(), "medconv-micro");
        c.loss = LossKind::Balce;
        c.oversample = true;
        assert_eq!(c.run_name(), "medconv-micro+balce+oversample");
        c.tau2 = 0.5;
        assert_eq!(c.run_name(), "medconv-micro+balce+oversample+tau2=0.5");
    }

    #[test]
    fn hash_ignores_paths_but_not_settings() {
        let a = TrainConfig::default();
        let mut b = a.clone();
        b.out_dir = "elsewhere".into();
        b.manifest = "other/manifest.csv".into();
        assert_eq!(a.hash(b"m"), b.hash(b"m"));
        assert_ne!(a.hash(b"m"), a.hash(b"n"));
        b.seed = 1;
        assert_ne!(a.hash(b"m"), b.hash(b"m"));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut c = TrainConfig::default();
        c.preprocess.out_dims = [16, 16, 16];
        assert!(c.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }
}
