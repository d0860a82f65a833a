//! Configurable 3D residual classifier built from bottleneck blocks.
//!
//! Layout: stem (conv stride 2, norm, relu, optional max-pool), four stages
//! of bottleneck blocks where the first block of stages 2-4 downsamples by
//! stride 2 with a projection shortcut, then global average pooling and a
//! linear head.

mod checkpoint;

pub use checkpoint::{load_checkpoint, read_checkpoint_header, save_checkpoint, CheckpointHeader, TensorEntry};

use medconv_tensor::{Conv3dGeometry, Element, NormMode, RunningStats, Tape, Tensor, Var, DEFAULT_EPS, DEFAULT_MOMENTUM};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub stage_blocks: [usize; 4],
    pub stem_channels: usize,
    /// Bottleneck width per stage; block output is `width * bottleneck_expansion`.
    pub stage_channels: [usize; 4],
    pub bottleneck_expansion: usize,
    pub num_classes: usize,
    /// `C, D, H, W` of one input sample.
    pub input_shape: [usize; 4],
    pub stem_kernel: usize,
    /// Stride-2 3x3x3 max-pool after the stem.
    pub stem_pool: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::micro()
    }
}

impl ModelConfig {
    /// Desk-scale variant: one block per stage, 24³ single-channel input.
    pub fn micro() -> Self {
        Self {
            stage_blocks: [1, 1, 1, 1],
            stem_channels: 8,
            stage_channels: [8, 16, 32, 64],
            bottleneck_expansion: 4,
            num_classes: 3,
            input_shape: [1, 24, 24, 24],
            stem_kernel: 3,
            stem_pool: false,
        }
    }

    /// The ResNet-50 layout inflated to 3D.
    pub fn resnet50(num_classes: usize, input_shape: [usize; 4]) -> Self {
        Self {
            stage_blocks: [3, 4, 6, 3],
            stem_channels: 64,
            stage_channels: [64, 128, 256, 512],
            bottleneck_expansion: 4,
            num_classes,
            input_shape,
            stem_kernel: 7,
            stem_pool: true,
        }
    }

    /// Short architecture tag used in run names.
    pub fn tag(&self) -> String {
        let layout = |c: &Self| (c.stage_blocks, c.stem_channels, c.stage_channels, c.bottleneck_expansion, c.stem_kernel, c.stem_pool);
        if layout(self) == layout(&Self::micro()) {
            "medconv-micro".into()
        } else if layout(self) == layout(&Self::resnet50(self.num_classes, self.input_shape)) {
            "medconv-r50".into()
        } else {
            "medconv-custom".into()
        }
    }

    fn stem_geometry(&self) -> Conv3dGeometry {
        Conv3dGeometry::uniform(2, self.stem_kernel / 2)
    }

    /// Checks every invariant and returns the spatial extent after the stem
    /// and after each stage.
    pub fn validate(&self) -> Result<Vec<[usize; 3]>> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_classes < 2 {
            return bad(format!("num_classes must be at least 2, got {}", self.num_classes));
        }
        if self.input_shape.contains(&0) {
            return bad(format!("input_shape extents must be positive, got {:?}", self.input_shape));
        }
        if self.stage_blocks.contains(&0) {
            return bad(format!("stage_blocks must be positive, got {:?}", self.stage_blocks));
        }
        if self.stem_channels == 0 || self.stage_channels.contains(&0) || self.bottleneck_expansion == 0 {
            return bad("channel counts and bottleneck_expansion must be positive".into());
        }
        if self.stem_kernel == 0 {
            return bad("stem_kernel must be positive".into());
        }
        // A stride-s step nominally divides the extent by s, so it needs at
        // least s voxels along every axis even though padding would keep the
        // convolution output nonempty.
        let step = |ext: [usize; 3], k: usize, s: usize, p: usize, what: &str| -> Result<[usize; 3]> {
            if ext.iter().any(|&e| e / s == 0) {
                return Err(Error::Config(format!(
                    "{what}: stride {s} reduces spatial extent {ext:?} to 0 for input_shape {:?}",
                    self.input_shape
                )));
            }
            let mut out = [0; 3];
            for a in 0..3 {
                out[a] = Conv3dGeometry::output_extent(ext[a], k, s, p).ok_or_else(|| {
                    Error::Config(format!(
                        "{what}: spatial extent {:?} reaches 0 for input_shape {:?}",
                        ext, self.input_shape
                    ))
                })?;
            }
            Ok(out)
        };
        let input = [self.input_shape[1], self.input_shape[2], self.input_shape[3]];
        let g = self.stem_geometry();
        let mut ext = step(input, self.stem_kernel, 2, g.pad[0], "stem")?;
        if self.stem_pool {
            ext = step(ext, 3, 2, 1, "stem pool")?;
        }
        let mut extents = vec![ext];
        for stage in 0..4 {
            let stride = if stage == 0 { 1 } else { 2 };
            ext = step(ext, 3, stride, 1, &format!("stage {}", stage + 1))?;
            extents.push(ext);
        }
        Ok(extents)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy)]
struct ConvNorm {
    kernel: usize,
    gamma: usize,
    beta: usize,
    norm: usize,
    geom: Conv3dGeometry,
}

#[derive(Debug, Clone)]
struct Bottleneck {
    reduce: ConvNorm,
    spatial: ConvNorm,
    expand: ConvNorm,
    shortcut: Option<ConvNorm>,
}

/// Tape handles produced by one forward pass.
pub struct Forward {
    pub logits: Var,
    /// One handle per network parameter, in registry order.
    pub params: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct Network<T: Element = f32> {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor<T>>,
    norm_names: Vec<String>,
    norms: Vec<RunningStats<T>>,
    stem: ConvNorm,
    stages: Vec<Vec<Bottleneck>>,
    head_weight: usize,
    head_bias: usize,
}

struct Builder<T: Element> {
    rng: ChaCha8Rng,
    names: Vec<String>,
    params: Vec<Tensor<T>>,
    norm_names: Vec<String>,
    norms: Vec<RunningStats<T>>,
}

impl<T: Element> Builder<T> {
    fn push(&mut self, name: String, tensor: Tensor<T>) -> usize {
        self.names.push(name);
        self.params.push(tensor);
        self.params.len() - 1
    }

    /// He-normal weights: std = sqrt(2 / fan_in).
    fn he(&mut self, shape: &[usize], fan_in: usize) -> Result<Tensor<T>> {
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::from_f64_lossy(normal.sample(&mut self.rng))).collect();
        Ok(Tensor::from_vec(shape, data)?)
    }

    fn conv_norm(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Result<ConvNorm> {
        let w = self.he(&[cout, cin, k, k, k], cin * k * k * k)?;
        let kernel = self.push(format!("{name}.conv.weight"), w);
        let gamma = self.push(format!("{name}.norm.gamma"), Tensor::ones(&[cout])?);
        let beta = self.push(format!("{name}.norm.beta"), Tensor::zeros(&[cout])?);
        self.norm_names.push(format!("{name}.norm"));
        self.norms.push(RunningStats::new(cout));
        Ok(ConvNorm {
            kernel,
            gamma,
            beta,
            norm: self.norms.len() - 1,
            geom: Conv3dGeometry::uniform(stride, k / 2),
        })
    }
}

enum Norms<'a, T> {
    /// Batch statistics folded into the running ones with this momentum.
    Update(&'a mut [RunningStats<T>], T),
    Frozen(&'a [RunningStats<T>]),
}

struct Runner<'a, T: Element> {
    tape: &'a mut Tape<T>,
    vars: Vec<Var>,
    norms: Norms<'a, T>,
}

impl<T: Element> Runner<'_, T> {
    fn conv_norm(&mut self, x: Var, cn: &ConvNorm, relu: bool) -> Result<Var> {
        let y = self.tape.conv3d(x, self.vars[cn.kernel], None, cn.geom)?;
        let eps = T::from_f64_lossy(DEFAULT_EPS);
        let (g, b) = (self.vars[cn.gamma], self.vars[cn.beta]);
        let y = match &mut self.norms {
            Norms::Update(stats, momentum) => self.tape.batch_norm3d(
                y,
                g,
                b,
                eps,
                NormMode::Train {
                    running: &mut stats[cn.norm],
                    momentum: *momentum,
                },
            )?,
            Norms::Frozen(stats) => self.tape.batch_norm3d(y, g, b, eps, NormMode::Eval { running: &stats[cn.norm] })?,
        };
        Ok(if relu { self.tape.relu(y) } else { y })
    }

    fn block(&mut self, x: Var, block: &Bottleneck) -> Result<Var> {
        let h = self.conv_norm(x, &block.reduce, true)?;
        let h = self.conv_norm(h, &block.spatial, true)?;
        let h = self.conv_norm(h, &block.expand, false)?;
        let skip = match &block.shortcut {
            Some(proj) => self.conv_norm(x, proj, false)?,
            None => x,
        };
        let sum = self.tape.add(h, skip)?;
        Ok(self.tape.relu(sum))
    }
}

/// Builds a network with He-normal conv/linear weights, unit norm scales, zero
/// norm shifts and zero head bias. Deterministic in `seed`.
pub fn build_model<T: Element>(config: &ModelConfig, seed: u64) -> Result<Network<T>> {
    config.validate()?;
    let mut b = Builder {
        rng: ChaCha8Rng::seed_from_u64(seed),
        names: Vec::new(),
        params: Vec::new(),
        norm_names: Vec::new(),
        norms: Vec::new(),
    };
    let cin = config.input_shape[0];
    let stem = b.conv_norm("stem", cin, config.stem_channels, config.stem_kernel, 2)?;
    let mut channels = config.stem_channels;
    let mut stages = Vec::with_capacity(4);
    for (s, (&blocks, &width)) in config.stage_blocks.iter().zip(&config.stage_channels).enumerate() {
        let out = width * config.bottleneck_expansion;
        let mut stage = Vec::with_capacity(blocks);
        for i in 0..blocks {
            let stride = if i == 0 && s > 0 { 2 } else { 1 };
            let name = format!("stage{}.block{}", s + 1, i);
            let reduce = b.conv_norm(&format!("{name}.conv1"), channels, width, 1, 1)?;
            let spatial = b.conv_norm(&format!("{name}.conv2"), width, width, 3, stride)?;
            let expand = b.conv_norm(&format!("{name}.conv3"), width, out, 1, 1)?;
            let shortcut = if stride != 1 || channels != out {
                Some(b.conv_norm(&format!("{name}.shortcut"), channels, out, 1, stride)?)
            } else {
                None
            };
            stage.push(Bottleneck {
                reduce,
                spatial,
                expand,
                shortcut,
            });
            channels = out;
        }
        stages.push(stage);
    }
    let hw = b.he(&[config.num_classes, channels], channels)?;
    let head_weight = b.push("head.weight".into(), hw);
    let head_bias = b.push("head.bias".into(), Tensor::zeros(&[config.num_classes])?);
    Ok(Network {
        config: config.clone(),
        names: b.names,
        params: b.params,
        norm_names: b.norm_names,
        norms: b.norms,
        stem,
        stages,
        head_weight,
        head_bias,
    })
}

impl<T: Element> Network<T> {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn norm_names(&self) -> &[String] {
        &self.norm_names
    }

    pub fn norms(&self) -> &[RunningStats<T>] {
        &self.norms
    }

    pub fn norms_mut(&mut self) -> &mut [RunningStats<T>] {
        &mut self.norms
    }

    /// Exact number of trainable scalars.
    pub fn count_params(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    pub fn cast<U: Element>(&self) -> Network<U> {
        let cast_vec = |v: &[T]| v.iter().map(|x| U::from_f64_lossy(x.as_f64())).collect();
        Network {
            config: self.config.clone(),
            names: self.names.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
            norm_names: self.norm_names.clone(),
            norms: self
                .norms
                .iter()
                .map(|r| RunningStats {
                    mean: cast_vec(&r.mean),
                    var: cast_vec(&r.var),
                })
                .collect(),
            stem: self.stem,
            stages: self.stages.clone(),
            head_weight: self.head_weight,
            head_bias: self.head_bias,
        }
    }

    fn check_batch(&self, batch: &Tensor<T>) -> Result<()> {
        let s = batch.shape();
        if s.len() != 5 || s[1..] != self.config.input_shape {
            return Err(Error::InvalidArgument(format!(
                "batch shape {s:?} does not match N x {:?}",
                self.config.input_shape
            )));
        }
        Ok(())
    }

    /// Runs the network on `batch`. Train mode normalizes with batch
    /// statistics and updates the running statistics; eval mode reads them.
    pub fn forward(&mut self, tape: &mut Tape<T>, batch: Tensor<T>, mode: Mode) -> Result<Forward> {
        let params = std::mem::take(&mut self.params);
        let out = self.forward_with(tape, &params, batch, mode);
        self.params = params;
        out
    }

    /// Like [`Network::forward`] but reads the weights from `params`, given
    /// in registry order. Running statistics still live in the network.
    pub fn forward_with(&mut self, tape: &mut Tape<T>, params: &[Tensor<T>], batch: Tensor<T>, mode: Mode) -> Result<Forward> {
        if params.len() != self.names.len() {
            return Err(Error::LengthMismatch(format!(
                "{} parameters given to a network with {}",
                params.len(),
                self.names.len()
            )));
        }
        match mode {
            Mode::Eval => {
                self.check_batch(&batch)?;
                let x = tape.constant(batch);
                let vars = register(tape, params, true);
                let runner = Runner {
                    tape,
                    vars,
                    norms: Norms::Frozen(&self.norms),
                };
                run(
                    runner,
                    x,
                    &self.config,
                    &self.stem,
                    &self.stages,
                    self.head_weight,
                    self.head_bias,
                )
            }
            Mode::Train => {
                self.check_batch(&batch)?;
                let x = tape.constant(batch);
                let vars = register(tape, params, true);
                let runner = Runner {
                    tape,
                    vars,
                    norms: Norms::Update(&mut self.norms, T::from_f64_lossy(DEFAULT_MOMENTUM)),
                };
                run(
                    runner,
                    x,
                    &self.config,
                    &self.stem,
                    &self.stages,
                    self.head_weight,
                    self.head_bias,
                )
            }
        }
    }

    /// Replaces every running statistic with the equal-weight average of the
    /// batch statistics the current weights produce on `batches`. Returns the
    /// number of batches seen; with none the statistics are left alone.
    pub fn recompute_norm_stats<I>(&mut self, batches: I) -> Result<usize>
    where
        I: IntoIterator<Item = Tensor<T>>,
    {
        let mut seen = 0;
        for batch in batches {
            self.check_batch(&batch)?;
            let mut tape = Tape::new();
            let x = tape.constant(batch);
            let vars = register(&mut tape, &self.params, false);
            let momentum = T::one() / T::from_usize(seen + 1).unwrap();
            let runner = Runner {
                tape: &mut tape,
                vars,
                norms: Norms::Update(&mut self.norms, momentum),
            };
            run(runner, x, &self.config, &self.stem, &self.stages, self.head_weight, self.head_bias)?;
            seen += 1;
        }
        Ok(seen)
    }

    /// Eval-mode forward; never mutates the network. `track_grads` controls
    /// whether parameters are recorded as trainable leaves.
    pub fn forward_eval(&self, tape: &mut Tape<T>, batch: Tensor<T>, track_grads: bool) -> Result<Forward> {
        self.check_batch(&batch)?;
        let x = tape.constant(batch);
        let vars = register(tape, &self.params, track_grads);
        let runner = Runner {
            tape,
            vars,
            norms: Norms::Frozen(&self.norms),
        };
        run(
            runner,
            x,
            &self.config,
            &self.stem,
            &self.stages,
            self.head_weight,
            self.head_bias,
        )
    }

    /// Runs the network on parameters and input already recorded on `tape`,
    /// so gradients flow to both. `params` follows registry order.
    pub fn forward_vars(&mut self, tape: &mut Tape<T>, params: Vec<Var>, input: Var, mode: Mode) -> Result<Var> {
        if params.len() != self.names.len() {
            return Err(Error::LengthMismatch(format!(
                "{} parameter handles for a network with {}",
                params.len(),
                self.names.len()
            )));
        }
        self.check_batch(tape.value(input))?;
        let norms = match mode {
            Mode::Train => Norms::Update(&mut self.norms, T::from_f64_lossy(DEFAULT_MOMENTUM)),
            Mode::Eval => Norms::Frozen(&self.norms),
        };
        let runner = Runner {
            tape,
            vars: params,
            norms,
        };
        let fwd = run(
            runner,
            input,
            &self.config,
            &self.stem,
            &self.stages,
            self.head_weight,
            self.head_bias,
        )?;
        Ok(fwd.logits)
    }

    /// Eval-mode logits `[N, num_classes]`.
    pub fn predict(&self, batch: Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let fwd = self.forward_eval(&mut tape, batch, false)?;
        let logits = tape.value(fwd.logits).clone();
        if !logits.all_finite() {
            return Err(Error::NonFinite("model produced non-finite logits".into()));
        }
        Ok(logits)
    }

    /// Runs one bottleneck block in eval mode on a standalone input.
    pub fn eval_block(&self, stage: usize, block: usize, input: Tensor<T>) -> Result<Tensor<T>> {
        let spec = self
            .stages
            .get(stage)
            .and_then(|s| s.get(block))
            .ok_or_else(|| Error::InvalidArgument(format!("no block {block} in stage {stage}")))?;
        let mut tape = Tape::new();
        let vars = register(&mut tape, &self.params, false);
        let mut runner = Runner {
            tape: &mut tape,
            vars,
            norms: Norms::Frozen(&self.norms),
        };
        let x = runner.tape.constant(input);
        let y = runner.block(x, spec)?;
        Ok(tape.value(y).clone())
    }

    /// Registry indices of the conv weights and norm shifts/scales on every
    /// block's main (non-shortcut) branch.
    pub fn main_branch_params(&self, stage: usize, block: usize) -> Option<Vec<usize>> {
        let b = self.stages.get(stage)?.get(block)?;
        Some(
            [b.reduce, b.spatial, b.expand]
                .iter()
                .flat_map(|cn| [cn.kernel, cn.gamma, cn.beta])
                .collect(),
        )
    }

    pub fn has_projection(&self, stage: usize, block: usize) -> Option<bool> {
        Some(self.stages.get(stage)?.get(block)?.shortcut.is_some())
    }
}

fn register<T: Element>(tape: &mut Tape<T>, params: &[Tensor<T>], track: bool) -> Vec<Var> {
    params
        .iter()
        .map(|p| if track { tape.param(p.clone()) } else { tape.constant(p.clone()) })
        .collect()
}

fn run<T: Element>(
    mut r: Runner<'_, T>,
    x: Var,
    config: &ModelConfig,
    stem: &ConvNorm,
    stages: &[Vec<Bottleneck>],
    head_weight: usize,
    head_bias: usize,
) -> Result<Forward> {
    let mut h = r.conv_norm(x, stem, true)?;
    if config.stem_pool {
        h = r.tape.max_pool3d(h, [3, 3, 3], Conv3dGeometry::uniform(2, 1))?;
    }
    for stage in stages {
        for block in stage {
            h = r.block(h, block)?;
        }
    }
    let pooled = r.tape.global_avg_pool3d(h)?;
    let logits = r.tape.linear(pooled, r.vars[head_weight], Some(r.vars[head_bias]))?;
    Ok(Forward { logits, params: r.vars })
}
