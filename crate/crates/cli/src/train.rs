//! Data preparation, the training loop and batched inference.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use anyhow::Context;
use medconv_core::calibration::{adjust_logits, assign_taus, report_for};
use medconv_core::data::{
    augment_sample, balanced_augment_policy, class_stats, keyed_rng, load_volume, oversample_indices, preprocess,
    stack_batch, AugPolicy, ClassStats, Manifest, PreprocessConfig, Purpose, Split, Volume,
};
use medconv_core::losses::Objective;
use medconv_core::model::{build_model, save_checkpoint, Mode, Network};
use medconv_core::optimizers::{OptimizerKind, Sam, ScheduleFree, Sgd};
use medconv_core::scores::{LogitsMatrix, ScoreMatrix};
use medconv_core::tensor::{Tape, Tensor};

use crate::artifacts::{self, CachedLogits, RunLock};
use crate::config::{RunRecord, TrainConfig};
use crate::exit::{config_error, data_error, numeric_error};

const EVAL_BATCH: usize = 32;

/// Preprocessed volumes of one split, in manifest order.
#[derive(Debug, Clone)]
pub struct SplitData {
    pub volumes: Vec<Volume>,
    pub labels: Vec<usize>,
}

pub fn load_split(manifest: &Manifest, split: Split, pre: &PreprocessConfig) -> anyhow::Result<SplitData> {
    let mut volumes = Vec::new();
    let mut labels = Vec::new();
    for i in manifest.indices(split) {
        let rec = &manifest.records()[i];
        let path = manifest.resolve(&rec.path);
        let vol = load_volume(&path)?;
        let mask = rec
            .mask_path
            .as_ref()
            .map(|m| load_volume(&manifest.resolve(m)))
            .transpose()?;
        let out = preprocess(&vol, mask.as_ref(), pre).with_context(|| format!("preprocessing {}", path.display()))?;
        volumes.push(out);
        labels.push(rec.label);
    }
    Ok(SplitData { volumes, labels })
}

pub fn load_manifest(path: &Path) -> anyhow::Result<(Manifest, Vec<u8>)> {
    let bytes = std::fs::read(path).map_err(|e| data_error(format!("cannot read manifest {}: {e}", path.display())))?;
    let manifest = Manifest::load(path)?;
    Ok((manifest, bytes))
}

/// Eval-mode logits for every volume, in order.
pub fn predict_all(net: &Network<f32>, vols: &[Volume]) -> anyhow::Result<LogitsMatrix> {
    let classes = net.config().num_classes;
    let mut out = ScoreMatrix::new(0, classes, Vec::new())?;
    for chunk in vols.chunks(EVAL_BATCH) {
        let refs: Vec<&Volume> = chunk.iter().collect();
        let logits = net.predict(stack_batch(&refs)?)?;
        out.extend(&ScoreMatrix::from_tensor(&logits)?)?;
    }
    Ok(out)
}

enum Stepper {
    Sgd(Sgd<f32>),
    Sam(Sam<f32>),
    Free(ScheduleFree<f32>),
}

fn grads_of(tape: &mut Tape<f32>, params: &[medconv_core::tensor::Var], net: &Network<f32>) -> Vec<Vec<f32>> {
    params
        .iter()
        .zip(net.params())
        .map(|(&v, p)| tape.take_grad(v).unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect()
}

struct StepResult {
    loss: f64,
    preds: Vec<usize>,
}

fn train_step(
    net: &mut Network<f32>,
    stepper: &mut Stepper,
    objective: &Objective,
    batch: Tensor<f32>,
    labels: &[usize],
) -> anyhow::Result<StepResult> {
    let mut preds = Vec::new();
    let forward_backward = |net: &mut Network<f32>, params: Option<&[Tensor<f32>]>| -> medconv_core::Result<(f64, Vec<Vec<f32>>, Vec<usize>)> {
        let mut tape = Tape::new();
        let fwd = match params {
            Some(p) => net.forward_with(&mut tape, p, batch.clone(), Mode::Train)?,
            None => net.forward(&mut tape, batch.clone(), Mode::Train)?,
        };
        let p = ScoreMatrix::from_tensor(tape.value(fwd.logits)).map(|s| s.argmax()).unwrap_or_default();
        let loss = objective.apply(&mut tape, fwd.logits, labels)?;
        if !loss.value.is_finite() {
            return Ok((loss.value, Vec::new(), p));
        }
        tape.backward(loss.var)?;
        Ok((loss.value, grads_of(&mut tape, &fwd.params, net), p))
    };
    let loss = match stepper {
        Stepper::Sgd(opt) => {
            let (loss, grads, p) = forward_backward(net, None)?;
            preds = p;
            if loss.is_finite() {
                opt.step(net.params_mut(), &grads)?;
            }
            loss
        }
        Stepper::Free(opt) => {
            let (loss, grads, p) = forward_backward(net, None)?;
            preds = p;
            if loss.is_finite() {
                opt.step(net.params_mut(), &grads)?;
            }
            loss
        }
        Stepper::Sam(opt) => {
            let mut params = net.params().to_vec();
            let mut calls = 0;
            let mut first_norms = None;
            let result = opt.step(&mut params, |q| {
                calls += 1;
                let (loss, grads, p) = forward_backward(net, Some(q))?;
                if calls == 1 {
                    preds = p;
                    first_norms = Some(net.norms().to_vec());
                }
                Ok((loss, grads))
            });
            // Running statistics come from the unperturbed pass only.
            if let Some(n) = first_norms {
                net.norms_mut().clone_from_slice(&n);
            }
            match result {
                Ok(loss) => {
                    net.params_mut().clone_from_slice(&params);
                    loss
                }
                Err(medconv_core::Error::NonFinite(_)) => f64::NAN,
                Err(e) => return Err(e.into()),
            }
        }
    };
    Ok(StepResult { loss, preds })
}

/// Runs `f` with the schedule-free average loaded, then restores the
/// gradient point.
fn with_eval_weights<R>(
    net: &mut Network<f32>,
    stepper: &Stepper,
    f: impl FnOnce(&Network<f32>) -> anyhow::Result<R>,
) -> anyhow::Result<R> {
    match stepper {
        Stepper::Free(opt) => {
            opt.load_average(net.params_mut())?;
            let out = f(net);
            opt.load_gradient_point(net.params_mut())?;
            out
        }
        _ => f(net),
    }
}

fn recall_per_class(preds: &[usize], labels: &[usize], classes: usize) -> Vec<Option<f64>> {
    (0..classes)
        .map(|c| {
            let support = labels.iter().filter(|&&l| l == c).count();
            let hit = preds.iter().zip(labels).filter(|(&p, &l)| l == c && p == c).count();
            (support > 0).then(|| hit as f64 / support as f64)
        })
        .collect()
}

fn log_row(log: &mut String, epoch: usize, split: &str, loss: f64, preds: &[usize], labels: &[usize], classes: usize) {
    let acc = preds.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len().max(1) as f64;
    let _ = write!(log, "{epoch},{split},{loss},{acc}");
    for r in recall_per_class(preds, labels, classes) {
        match r {
            Some(v) => {
                let _ = write!(log, ",{v}");
            }
            None => log.push(','),
        }
    }
    log.push('\n');
}

/// What a finished training run leaves behind.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub record: RunRecord,
    pub eval_logits: CachedLogits,
    pub report: medconv_core::metrics::MetricsReport,
}

/// Full training run into `cfg.out_dir`: checkpoint, log, cached logits and
/// calibrated report on the eval split.
pub fn run_training(cfg: &TrainConfig) -> anyhow::Result<TrainOutcome> {
    cfg.validate()?;
    let (manifest, manifest_bytes) = load_manifest(&cfg.manifest)?;
    let classes = manifest.num_classes();
    if cfg.model.num_classes != classes {
        return Err(config_error(format!(
            "model has {} classes but the manifest has {classes}",
            cfg.model.num_classes
        )));
    }
    let stats: ClassStats = class_stats(&manifest, Split::Train)?;
    let objective = Objective::new(cfg.loss, cfg.loss_variant, stats.counts())
        .context("deriving loss weights from the training split")?;
    let hash = cfg.hash(&manifest_bytes);
    let out = &cfg.out_dir;
    let _lock = RunLock::acquire(out)?;
    let record = RunRecord {
        config_hash: hash.clone(),
        run_name: cfg.run_name(),
        class_names: manifest.classes().to_vec(),
        train_counts: stats.counts().to_vec(),
        config: cfg.clone(),
    };
    record.save(out)?;

    let train = load_split(&manifest, Split::Train, &cfg.preprocess)?;
    let eval = load_split(&manifest, cfg.eval_split, &cfg.preprocess)?;
    if eval.volumes.is_empty() {
        return Err(data_error(format!("{} split is empty", cfg.eval_split)));
    }
    let policies: Vec<AugPolicy> = if cfg.balaug {
        balanced_augment_policy(&stats, &cfg.aug_policy)
    } else if cfg.augment {
        vec![cfg.aug_policy.clone(); classes]
    } else {
        vec![AugPolicy::disabled(); classes]
    };

    let mut net: Network<f32> = build_model(&cfg.model, cfg.seed)?;
    let o = &cfg.optimizer;
    let mut stepper = match o.kind {
        OptimizerKind::Sgd => Stepper::Sgd(Sgd::new(o.lr, o.momentum).with_weight_decay(o.weight_decay)),
        OptimizerKind::Sam => Stepper::Sam(Sam::new(o.lr, o.momentum, o.rho).with_weight_decay(o.weight_decay)),
        OptimizerKind::Schedulefree => Stepper::Free(ScheduleFree::new(net.params(), o.lr, o.beta)),
    };

    let mut log = String::from("epoch,split,loss,accuracy");
    for name in manifest.classes() {
        let _ = write!(log, ",recall_{name}");
    }
    log.push('\n');

    for epoch in 0..cfg.epochs {
        let order = oversample_indices(&train.labels, classes, cfg.seed, epoch as u64, cfg.oversample)?;
        let mut loss_sum = 0.0;
        let mut seen_preds = Vec::with_capacity(order.len());
        let mut seen_labels = Vec::with_capacity(order.len());
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let start = b * cfg.batch_size;
            let vols: Vec<Volume> = chunk
                .iter()
                .enumerate()
                .map(|(k, &i)| {
                    let policy = &policies[train.labels[i]];
                    if policy.prob > 0.0 {
                        let mut rng = keyed_rng(cfg.seed, Purpose::Augment, epoch as u64, (start + k) as u64);
                        augment_sample(&train.volumes[i], policy, &mut rng)
                    } else {
                        train.volumes[i].clone()
                    }
                })
                .collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| train.labels[i]).collect();
            let refs: Vec<&Volume> = vols.iter().collect();
            let res = train_step(&mut net, &mut stepper, &objective, stack_batch(&refs)?, &labels)?;
            if !res.loss.is_finite() {
                return Err(numeric_error(format!(
                    "non-finite training loss at epoch {epoch}, batch {b}, lr {:e}",
                    o.lr
                )));
            }
            loss_sum += res.loss * labels.len() as f64;
            seen_preds.extend(res.preds);
            seen_labels.extend(labels);
        }
        log_row(&mut log, epoch, "train", loss_sum / order.len() as f64, &seen_preds, &seen_labels, classes);
        if cfg.log_eval {
            let logits = with_eval_weights(&mut net, &stepper, |n| predict_all(n, &eval.volumes))?;
            let loss = mean_nll(&logits, &eval.labels);
            log_row(&mut log, epoch, &cfg.eval_split.to_string(), loss, &logits.argmax(), &eval.labels, classes);
        }
    }
    if let Stepper::Free(opt) = &stepper {
        opt.load_average(net.params_mut())?;
    }
    if cfg.recompute_norms {
        let batches = train
            .volumes
            .chunks(cfg.batch_size)
            .map(|c| stack_batch(&c.iter().collect::<Vec<_>>()))
            .collect::<medconv_core::Result<Vec<_>>>()?;
        net.recompute_norm_stats(batches)?;
    }
    artifacts::write_text(&out.join(artifacts::TRAIN_LOG), &artifacts::stamp(&hash, &log))?;
    let mut meta = BTreeMap::new();
    meta.insert("config_hash".to_string(), hash.clone());
    meta.insert("run_name".to_string(), record.run_name.clone());
    save_checkpoint(&net, &out.join(artifacts::CHECKPOINT), &meta)?;

    if cfg.eval_split != Split::Val && !manifest.indices(Split::Val).is_empty() {
        let val = load_split(&manifest, Split::Val, &cfg.preprocess)?;
        let cached = CachedLogits {
            config_hash: hash.clone(),
            logits: predict_all(&net, &val.volumes)?,
            labels: val.labels,
        };
        cached.save(&out.join(artifacts::logits_file(Split::Val)))?;
    }
    let eval_logits = CachedLogits {
        config_hash: hash.clone(),
        logits: predict_all(&net, &eval.volumes)?,
        labels: eval.labels,
    };
    eval_logits.save(&out.join(artifacts::logits_file(cfg.eval_split)))?;
    let report = calibrated_report(&eval_logits, &record.train_counts, cfg.tau1, cfg.tau2)?;
    artifacts::write_reports(out, "metrics", &hash, &[(record.run_name.clone(), report.clone())])?;
    Ok(TrainOutcome {
        record,
        eval_logits,
        report,
    })
}

pub fn calibrated_report(
    cached: &CachedLogits,
    train_counts: &[usize],
    tau1: f64,
    tau2: f64,
) -> anyhow::Result<medconv_core::metrics::MetricsReport> {
    let taus = assign_taus(train_counts, tau1, tau2)?;
    let probs = adjust_logits(&cached.logits, &taus)?;
    Ok(report_for(&probs, &cached.labels)?)
}

fn mean_nll(logits: &LogitsMatrix, labels: &[usize]) -> f64 {
    let probs = logits.softmax();
    let total: f64 = probs.iter_rows().zip(labels).map(|(r, &l)| -r[l].max(f64::MIN_POSITIVE).ln()).sum();
    total / labels.len().max(1) as f64
}
