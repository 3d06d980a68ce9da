//! Two-phase training: per-modality branch pretraining, then the mixed branch
//! and its decoders on top of frozen RGB and flow branches.

mod checkpoint;
mod optim;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, PhaseTag};
pub use optim::{cosine_lr, AdamW, Optimizer, Sgd};

use crate::autograd::Var;
use crate::branch::branch_forward;
use crate::config::ModelConfig;
use crate::data::{sample_window, Batch, FeatureBundle, Modality};
use crate::error::{PamfnError, Result};
use crate::network::{check_batch, model_forward, Model, LATE_PREFIX, MIXED_PREFIX};
use crate::params::ParamStore;
use crate::session::{apply_bn_updates, Session};
use crate::tensor::Matrix;

/// Phase-1 optimizer settings (momentum gradient descent).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Phase1Config {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for Phase1Config {
    fn default() -> Self {
        Self {
            epochs: 250,
            lr: 0.01,
            batch_size: 32,
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }
}

/// Phase-2 optimizer settings (Adam with decoupled weight decay).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Phase2Config {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Step-size multiplier of the final regression layer.
    pub head_lr_multiplier: f64,
}

impl Default for Phase2Config {
    fn default() -> Self {
        Self {
            epochs: 400,
            lr: 5e-4,
            batch_size: 32,
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            head_lr_multiplier: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub phase1: Phase1Config,
    pub phase2: Phase2Config,
    /// Training clip length in segments.
    pub window: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            phase1: Phase1Config::default(),
            phase2: Phase2Config::default(),
            window: 70,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(PamfnError::Config(m.into()));
        let p1 = &self.phase1;
        let p2 = &self.phase2;
        if p1.epochs == 0 || p2.epochs == 0 {
            return err("epochs must be positive");
        }
        if p1.batch_size == 0 || p2.batch_size == 0 {
            return err("batch_size must be positive");
        }
        if !(p1.lr >= 0.0 && p2.lr >= 0.0 && p1.lr.is_finite() && p2.lr.is_finite()) {
            return err("learning rates must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&p1.momentum) || !(0.0..1.0).contains(&p2.beta1) || !(0.0..1.0).contains(&p2.beta2) {
            return err("momentum and beta coefficients must lie in [0, 1)");
        }
        if p1.weight_decay < 0.0 || p2.weight_decay < 0.0 || !(p2.eps > 0.0) || !(p2.head_lr_multiplier >= 0.0) {
            return err("weight decay, eps and head_lr_multiplier must be non-negative (eps positive)");
        }
        if self.window == 0 {
            return err("window must be at least 1");
        }
        Ok(())
    }
}

/// `mean((pred − y)²)`.
pub fn mse_loss(pred: &[f64], target: &[f64]) -> f64 {
    assert_eq!(pred.len(), target.len(), "prediction/label count mismatch");
    assert!(!pred.is_empty(), "empty batch");
    pred.iter().zip(target).map(|(p, y)| (p - y).powi(2)).sum::<f64>() / pred.len() as f64
}

/// Graph version of [`mse_loss`] for a `B × 1` score.
pub fn mse_loss_var(s: &mut Session, score: Var, labels: &[f64]) -> Var {
    let y = s.graph.constant(Matrix::from_vec(labels.len(), 1, labels.to_vec()).expect("label column"));
    let diff = s.graph.sub(score, y);
    let sq = s.graph.mul(diff, diff);
    s.graph.mean_all(sq)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

pub fn write_loss_csv(path: &Path, log: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| PamfnError::format(path, e.to_string()))?;
    for r in log {
        w.serialize(r).map_err(|e| PamfnError::format(path, e.to_string()))?;
    }
    w.flush().map_err(|e| PamfnError::io(path, e))
}

/// Final-epoch and lowest-training-loss checkpoints plus the loss curve.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub last: Checkpoint,
    pub best: Checkpoint,
    pub log: Vec<EpochRecord>,
}

/// Rng stream per training job, so runs do not share random draws.
fn job_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

struct LoopSpec<'a> {
    epochs: usize,
    batch_size: usize,
    window: usize,
    frozen: &'a [&'a str],
    model: &'a ModelConfig,
}

fn train_loop(
    store: &mut ParamStore,
    data: &[FeatureBundle],
    spec: &LoopSpec,
    opt: &mut dyn Optimizer,
    lr_for: &dyn Fn(usize, &str) -> f64,
    rng: &mut ChaCha8Rng,
    forward: &dyn Fn(&mut Session, &Batch) -> Var,
    mut on_best: impl FnMut(usize, &ParamStore),
) -> Result<Vec<EpochRecord>> {
    if data.is_empty() {
        return Err(PamfnError::Validation("training split is empty".into()));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = Vec::with_capacity(spec.epochs);
    let mut best = f64::INFINITY;
    for epoch in 0..spec.epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        for chunk in order.chunks(spec.batch_size) {
            let windows: Vec<FeatureBundle> = chunk.iter().map(|&i| sample_window(&data[i], spec.window, rng)).collect();
            let batch = Batch::from_bundles(&windows)?;
            check_batch(spec.model, &batch)?;
            let (loss, grads, bn) = {
                let mut s = Session::train(store, rng).with_frozen(spec.frozen);
                let score = forward(&mut s, &batch);
                let loss = mse_loss_var(&mut s, score, &batch.labels);
                let g = s.graph.backward(loss);
                (s.graph.scalar(loss), s.param_grads(&g), s.take_bn_updates())
            };
            if !loss.is_finite() {
                return Err(PamfnError::Divergence { epoch: epoch + 1, loss });
            }
            opt.step(store, &grads, &|name| lr_for(epoch, name));
            apply_bn_updates(store, &bn, spec.model.bn_momentum);
            clamp_temperatures(store, spec.model);
            if !store.all_finite() {
                return Err(PamfnError::Divergence { epoch: epoch + 1, loss: f64::NAN });
            }
            total += loss * chunk.len() as f64;
        }
        let loss = total / data.len() as f64;
        let lr = lr_for(epoch, "");
        log::debug!("epoch {} lr {lr:.3e} loss {loss:.6}", epoch + 1);
        log.push(EpochRecord { epoch: epoch + 1, lr, loss });
        if loss < best {
            best = loss;
            on_best(epoch + 1, store);
        }
    }
    Ok(log)
}

fn clamp_temperatures(store: &mut ParamStore, cfg: &ModelConfig) {
    let names: Vec<String> = store.names().filter(|n| n.ends_with(".tau")).map(str::to_string).collect();
    for n in names {
        for t in store.get_mut(&n).unwrap().data_mut() {
            *t = t.clamp(cfg.tau_min, cfg.tau_max);
        }
    }
}

fn is_temperature(name: &str) -> bool {
    name.ends_with(".tau")
}

fn is_final_head(name: &str) -> bool {
    name.starts_with(&format!("{MIXED_PREFIX}.head.")) || name.starts_with(&format!("{LATE_PREFIX}.head."))
}

/// Phase 1: trains one modality branch (embedding, stages, head) alone.
pub fn pretrain_branch(
    modality: Modality,
    train: &[FeatureBundle],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    model_cfg.validate()?;
    cfg.validate()?;
    let prefix = format!("{}.", modality.name());
    let full = Model::init(model_cfg.clone(), cfg.seed)?;
    let mut store = ParamStore::new();
    store.copy_prefix_from(&full.params, &prefix);

    let p1 = &cfg.phase1;
    let mut rng = job_rng(cfg.seed, 1 + modality.index() as u64);
    let mut opt = Sgd::new(p1.momentum, p1.weight_decay);
    let spec = LoopSpec {
        epochs: p1.epochs,
        batch_size: p1.batch_size,
        window: cfg.window,
        frozen: &[],
        model: model_cfg,
    };
    let forward = |s: &mut Session, b: &Batch| {
        let raw = s.graph.constant(b.features(modality).clone());
        branch_forward(s, modality.name(), raw, b.seq_len, model_cfg).score
    };
    let lr_for = |epoch: usize, _: &str| cosine_lr(p1.lr, epoch, p1.epochs);
    let mut best = None;
    let log = train_loop(&mut store, train, &spec, &mut opt, &lr_for, &mut rng, &forward, |e, s| {
        best = Some((e, s.clone()));
    })?;
    let ckpt = |epoch, params, rng| Checkpoint::new(PhaseTag::Pretrain, Some(modality), epoch, model_cfg.clone(), cfg.clone(), params, rng);
    let (best_epoch, best_params) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        best: ckpt(best_epoch, best_params, rng.clone()),
        last: ckpt(p1.epochs, store, rng),
        log,
    })
}

/// Prefixes excluded from phase-2 optimization.
pub const PHASE2_FROZEN: [&str; 2] = ["rgb.", "flow."];

fn phase2_loop(
    model: &mut Model,
    train: &[FeatureBundle],
    cfg: &TrainConfig,
    frozen: &[&str],
    phase: PhaseTag,
    stream: u64,
) -> Result<TrainOutcome> {
    let p2 = &cfg.phase2;
    let mut rng = job_rng(cfg.seed, stream);
    let mut opt = AdamW::new(p2.beta1, p2.beta2, p2.eps, p2.weight_decay, is_temperature);
    let model_cfg = model.config.clone();
    let spec = LoopSpec {
        epochs: p2.epochs,
        batch_size: p2.batch_size,
        window: cfg.window,
        frozen,
        model: &model_cfg,
    };
    let forward = |s: &mut Session, b: &Batch| model_forward(s, &model_cfg, b);
    let lr_for = |epoch: usize, name: &str| {
        let lr = cosine_lr(p2.lr, epoch, p2.epochs);
        if is_final_head(name) {
            lr * p2.head_lr_multiplier
        } else {
            lr
        }
    };
    let mut best = None;
    let log = train_loop(&mut model.params, train, &spec, &mut opt, &lr_for, &mut rng, &forward, |e, s| {
        best = Some((e, s.clone()));
    })?;
    let ckpt = |epoch, params, rng| Checkpoint::new(phase, None, epoch, model_cfg.clone(), cfg.clone(), params, rng);
    let (best_epoch, best_params) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        best: ckpt(best_epoch, best_params, rng.clone()),
        last: ckpt(p2.epochs, model.params.clone(), rng),
        log,
    })
}

/// Phase 2: loads the three pretrained branches, freezes RGB and flow, and
/// trains the audio branch, the mixed branch, both decoders and the fusion
/// module (or the late-fusion layers of a baseline).
pub fn train_mixed(
    train: &[FeatureBundle],
    branches: [&Checkpoint; 3],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    model_cfg.validate()?;
    cfg.validate()?;
    let mut model = Model::init(model_cfg.clone(), cfg.seed)?;
    for (m, ckpt) in Modality::ALL.into_iter().zip(branches) {
        if ckpt.phase != PhaseTag::Pretrain || ckpt.modality != Some(m) {
            return Err(PamfnError::Config(format!(
                "expected a pretrained {m} branch checkpoint, found phase {:?} for {:?}",
                ckpt.phase, ckpt.modality
            )));
        }
        ckpt.check_model(model_cfg)?;
        let prefix = format!("{}.", m.name());
        let mut reference = ParamStore::new();
        reference.copy_prefix_from(&model.params, &prefix);
        let mut incoming = ParamStore::new();
        incoming.copy_prefix_from(&ckpt.params, &prefix);
        incoming.check_layout(&reference)?;
        model.params.copy_prefix_from(&ckpt.params, &prefix);
    }
    phase2_loop(&mut model, train, cfg, &PHASE2_FROZEN, PhaseTag::Mixed, 4)
}

/// Both phases merged: everything trains jointly from initialization with the
/// phase-2 optimizer and only the final score's loss.
pub fn train_one_stage(train: &[FeatureBundle], model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    model_cfg.validate()?;
    cfg.validate()?;
    let mut model = Model::init(model_cfg.clone(), cfg.seed)?;
    phase2_loop(&mut model, train, cfg, &[], PhaseTag::OneStage, 5)
}
