//! Two-phase optimization: masked-Huber pretraining of the reference head,
//! then growth-loss fine-tuning of the prediction head on a frozen backbone.

mod optim;
mod schedule;

use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

pub use optim::{clip_gradients, grad_norm, OptimizerState};
pub use schedule::{lr_at, Phase, PhaseConfig};

use crate::data::{LabelGrid, PatchFile};
use crate::error::{Error, Result};
use crate::grid::Cube;
use crate::growth::{pseudo_label_cube, DisturbanceMap, GrowthConfig};
use crate::model::{Model, PREDICTION_PREFIX};
use crate::nn::{Checkpoint, Float, Graph, ParamStore, Tensor};

/// Mean Huber penalty over the valid voxels of `labels`.
pub fn huber_loss_masked(pred: &[f64], labels: &LabelGrid, delta: f64) -> Result<f64> {
    if pred.len() != labels.heights.len() {
        return Err(Error::shape(
            "huber",
            format!("{} predictions for {} label voxels", pred.len(), labels.heights.len()),
        ));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for ((p, l), v) in pred.iter().zip(&labels.heights).zip(&labels.valid) {
        if *v {
            let r = (p - *l as f64).abs();
            total += if r <= delta { 0.5 * r * r } else { delta * (r - 0.5 * delta) };
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::InvalidArgument("huber loss over an empty mask".into()));
    }
    Ok(total / count as f64)
}

/// One pretraining example: input stack plus sparse labels.
#[derive(Debug, Clone)]
pub struct Sample<T> {
    pub input: Tensor<T>,
    pub target: Arc<Vec<T>>,
    pub mask: Arc<Vec<bool>>,
}

impl<T: Float> Sample<T> {
    pub fn new(input: Tensor<T>, labels: &LabelGrid) -> Result<Self> {
        if !labels.valid.iter().any(|v| *v) {
            return Err(Error::InvalidArgument("sample has no valid labels".into()));
        }
        Ok(Sample {
            input,
            target: Arc::new(labels.heights.iter().map(|h| T::of(*h as f64)).collect()),
            mask: Arc::new(labels.valid.clone()),
        })
    }

    pub fn from_patch(p: &PatchFile) -> Result<Self> {
        Self::new(p.input.cast(), &p.labels)
    }
}

/// Fine-tuning example. The backbone and reference head are frozen, so their
/// outputs and the pseudo-labels derived from them are computed once.
#[derive(Debug, Clone)]
pub struct FinetuneSample<T> {
    pub features: Tensor<T>,
    pub reference: Tensor<T>,
    pub pseudo: Arc<Vec<T>>,
    pub disturbance: DisturbanceMap,
}

/// Pseudo-labels of a `[Y, H, W]` reference output.
pub fn pseudo_targets<T: Float>(reference: &Tensor<T>, growth: &GrowthConfig) -> Result<(Vec<T>, DisturbanceMap)> {
    let [y, h, w] = reference.shape[..] else {
        return Err(Error::shape("pseudo_labels", format!("reference {:?}, expected [Y, H, W]", reference.shape)));
    };
    let cube = Cube::new(y, h, w, reference.data.iter().map(|v| v.as_f64()).collect())?;
    let (pseudo, dist) = pseudo_label_cube(&cube, growth)?;
    Ok((pseudo.data.iter().map(|v| T::of(*v)).collect(), dist))
}

pub fn prepare_finetune<T: Float>(
    model: &Model,
    store: &ParamStore<T>,
    inputs: &[Tensor<T>],
    growth: &GrowthConfig,
) -> Result<Vec<FinetuneSample<T>>> {
    inputs
        .par_iter()
        .map(|x| {
            let (features, reference) = model.features_and_reference(store, x)?;
            let (pseudo, disturbance) = pseudo_targets(&reference, growth)?;
            Ok(FinetuneSample {
                features,
                reference,
                pseudo: Arc::new(pseudo),
                disturbance,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub phase: Phase,
    pub loss: f64,
    pub lr: f64,
}

type Grads<T> = Vec<Option<Vec<T>>>;

/// Averages per-sample gradients in batch order, clips and applies one update.
fn apply<T: Float>(
    store: &mut ParamStore<T>,
    state: &mut OptimizerState<T>,
    per_sample: Vec<(f64, Grads<T>)>,
    cfg: &PhaseConfig,
    step: usize,
) -> Result<StepRecord> {
    let lr = lr_at(step, cfg)?;
    let n = per_sample.len();
    let inv = T::of(1.0 / n as f64);
    let mut grads: Grads<T> = vec![None; store.len()];
    let mut loss = 0.0;
    for (l, g) in per_sample {
        loss += l / n as f64;
        for (slot, g) in grads.iter_mut().zip(g) {
            let Some(g) = g else { continue };
            match slot {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, x)| *a += *x * inv),
                None => *slot = Some(g.iter().map(|x| *x * inv).collect()),
            }
        }
    }
    if !loss.is_finite() {
        return Err(Error::Numerical(format!("non-finite loss at step {step}")));
    }
    clip_gradients(store, &mut grads, cfg.grad_clip)?;
    state.update(store, &grads, lr, cfg);
    Ok(StepRecord {
        step,
        phase: cfg.phase,
        loss,
        lr,
    })
}

fn check_batch<S>(batch: &[S], cfg: &PhaseConfig, phase: Phase) -> Result<()> {
    if cfg.phase != phase {
        return Err(Error::Config(format!("{} step with a {} config", phase, cfg.phase)));
    }
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    Ok(())
}

/// Forward through the reference head only, masked Huber, backward, clip,
/// AdamW update at `lr_at(step)`.
pub fn pretrain_step<T: Float>(
    model: &Model,
    store: &mut ParamStore<T>,
    state: &mut OptimizerState<T>,
    batch: &[&Sample<T>],
    cfg: &PhaseConfig,
    step: usize,
) -> Result<StepRecord> {
    check_batch(batch, cfg, Phase::Pretrain)?;
    let frozen: &ParamStore<T> = store;
    let per_sample = batch
        .par_iter()
        .map(|s| {
            let mut g = Graph::new();
            let x = g.input(s.input.clone());
            let f = model.features(&mut g, frozen, x)?;
            let r = model.reference_head(&mut g, frozen, f)?;
            let loss = g.huber_masked(r, s.target.clone(), s.mask.clone(), cfg.huber_delta)?;
            let grads = g.backward(loss)?;
            let mut buf = vec![None; frozen.len()];
            grads.accumulate_into(frozen, &mut buf);
            Ok((g.value(loss).item().as_f64(), buf))
        })
        .collect::<Result<Vec<_>>>()?;
    apply(store, state, per_sample, cfg, step)
}

/// Freezes everything but the prediction head.
pub fn freeze_backbone<T: Float>(store: &mut ParamStore<T>) {
    store.freeze_all_except(&[PREDICTION_PREFIX]);
}

/// Growth loss of the prediction head against cached pseudo-labels; only the
/// prediction head is updated.
pub fn finetune_step<T: Float>(
    model: &Model,
    store: &mut ParamStore<T>,
    state: &mut OptimizerState<T>,
    batch: &[&FinetuneSample<T>],
    cfg: &PhaseConfig,
    step: usize,
) -> Result<StepRecord> {
    check_batch(batch, cfg, Phase::Finetune)?;
    if let Some((_, p)) = store
        .iter()
        .find(|(_, p)| !p.frozen && !p.name.starts_with(PREDICTION_PREFIX))
    {
        return Err(Error::Config(format!(
            "fine-tuning requires a frozen backbone, but `{}` is trainable",
            p.name
        )));
    }
    let years = model.config().years;
    let frozen: &ParamStore<T> = store;
    let per_sample = batch
        .par_iter()
        .map(|s| {
            let mut g = Graph::new();
            let f = g.input(s.features.clone());
            let p = model.prediction_head(&mut g, frozen, f)?;
            let loss = g.growth_distance(p, s.pseudo.clone(), years, cfg.growth.norm)?;
            let grads = g.backward(loss)?;
            let mut buf = vec![None; frozen.len()];
            grads.accumulate_into(frozen, &mut buf);
            Ok((g.value(loss).item().as_f64(), buf))
        })
        .collect::<Result<Vec<_>>>()?;
    apply(store, state, per_sample, cfg, step)
}

/// Mean growth loss of the current prediction head over the samples.
pub fn finetune_loss<T: Float>(model: &Model, store: &ParamStore<T>, samples: &[FinetuneSample<T>], growth: &GrowthConfig) -> Result<f64> {
    let years = model.config().years;
    let losses = samples
        .par_iter()
        .map(|s| {
            let mut g = Graph::new();
            let f = g.input(s.features.clone());
            let p = model.prediction_head(&mut g, store, f)?;
            let loss = g.growth_distance(p, s.pseudo.clone(), years, growth.norm)?;
            Ok(g.value(loss).item().as_f64())
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
}

/// Mean masked Huber loss of the reference head over the samples.
pub fn pretrain_loss<T: Float>(model: &Model, store: &ParamStore<T>, samples: &[Sample<T>], delta: f64) -> Result<f64> {
    let losses = samples
        .par_iter()
        .map(|s| {
            let mut g = Graph::new();
            let x = g.input(s.input.clone());
            let f = model.features(&mut g, store, x)?;
            let r = model.reference_head(&mut g, store, f)?;
            let loss = g.huber_masked(r, s.target.clone(), s.mask.clone(), delta)?;
            Ok(g.value(loss).item().as_f64())
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
}

/// Sample indices of a step. Each epoch visits every sample once in an order
/// drawn from a generator seeded with `seed` and the epoch number, so any step
/// can be reproduced without replaying earlier ones.
pub fn batch_indices(seed: u64, step: usize, batch_size: usize, n: usize) -> Vec<usize> {
    let mut perm: Option<(usize, Vec<usize>)> = None;
    (0..batch_size)
        .map(|j| {
            let k = step * batch_size + j;
            let epoch = k / n;
            if perm.as_ref().map(|(e, _)| *e) != Some(epoch) {
                let mut idx: Vec<usize> = (0..n).collect();
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
                idx.shuffle(&mut rng);
                perm = Some((epoch, idx));
            }
            perm.as_ref().unwrap().1[k % n]
        })
        .collect()
}

/// Runs steps `start..end` of a pretraining schedule, calling `after` once per step.
#[allow(clippy::too_many_arguments)]
pub fn run_pretrain<T: Float>(
    model: &Model,
    store: &mut ParamStore<T>,
    state: &mut OptimizerState<T>,
    samples: &[Sample<T>],
    cfg: &PhaseConfig,
    seed: u64,
    steps: std::ops::Range<usize>,
    mut after: impl FnMut(&StepRecord, &ParamStore<T>, &OptimizerState<T>) -> Result<()>,
) -> Result<Vec<StepRecord>> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no training samples".into()));
    }
    let mut log = Vec::with_capacity(steps.len());
    for step in steps {
        let idx = batch_indices(seed, step, cfg.batch_size, samples.len());
        let batch: Vec<&Sample<T>> = idx.iter().map(|&i| &samples[i]).collect();
        let rec = pretrain_step(model, store, state, &batch, cfg, step)?;
        after(&rec, store, state)?;
        log.push(rec);
    }
    Ok(log)
}

/// Fine-tuning counterpart of [`run_pretrain`].
#[allow(clippy::too_many_arguments)]
pub fn run_finetune<T: Float>(
    model: &Model,
    store: &mut ParamStore<T>,
    state: &mut OptimizerState<T>,
    samples: &[FinetuneSample<T>],
    cfg: &PhaseConfig,
    seed: u64,
    steps: std::ops::Range<usize>,
    mut after: impl FnMut(&StepRecord, &ParamStore<T>, &OptimizerState<T>) -> Result<()>,
) -> Result<Vec<StepRecord>> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no training samples".into()));
    }
    let mut log = Vec::with_capacity(steps.len());
    for step in steps {
        let idx = batch_indices(seed, step, cfg.batch_size, samples.len());
        let batch: Vec<&FinetuneSample<T>> = idx.iter().map(|&i| &samples[i]).collect();
        let rec = finetune_step(model, store, state, &batch, cfg, step)?;
        after(&rec, store, state)?;
        log.push(rec);
    }
    Ok(log)
}

const MOMENT_M: &str = "optimizer/m/";
const MOMENT_V: &str = "optimizer/v/";

/// Parameters plus optimizer moments; `next_step` is the first step a resumed
/// run executes.
pub fn training_checkpoint<T: Float>(
    store: &ParamStore<T>,
    state: &OptimizerState<T>,
    phase: Phase,
    next_step: usize,
) -> Checkpoint<T> {
    let mut ck = Checkpoint::from_store(store);
    for (id, p) in store.iter() {
        let shape = &p.tensor.shape;
        ck.push(format!("{MOMENT_M}{}", p.name), Tensor { shape: shape.clone(), data: state.m[id.0].clone() });
        ck.push(format!("{MOMENT_V}{}", p.name), Tensor { shape: shape.clone(), data: state.v[id.0].clone() });
    }
    ck.meta = json!({
        "phase": phase,
        "next_step": next_step,
        "optimizer_step": state.step,
        "weight_decay": state.weight_decay,
    });
    ck
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
struct TrainingMeta {
    phase: Phase,
    next_step: usize,
    optimizer_step: u64,
    weight_decay: f64,
}

/// Loads parameter values into `store` (keeping its frozen flags) and returns
/// the optimizer state, phase and next step.
pub fn restore_training<T: Float>(ck: &Checkpoint<T>, store: &mut ParamStore<T>) -> Result<(OptimizerState<T>, Phase, usize)> {
    let params = ck.to_store(|n| !n.starts_with("optimizer/"));
    store.load_values_from(&params)?;
    let meta: TrainingMeta = serde_json::from_value(ck.meta.clone())
        .map_err(|e| Error::Format(format!("checkpoint lacks training metadata: {e}")))?;
    let mut state = OptimizerState::new(store, meta.weight_decay);
    state.step = meta.optimizer_step;
    for (id, p) in store.iter() {
        for (prefix, buf) in [(MOMENT_M, &mut state.m[id.0]), (MOMENT_V, &mut state.v[id.0])] {
            let t = ck
                .get(&format!("{prefix}{}", p.name))
                .ok_or_else(|| Error::Format(format!("checkpoint lacks {prefix}{}", p.name)))?;
            if t.len() != buf.len() {
                return Err(Error::shape(p.name.clone(), "optimizer moment size mismatch"));
            }
            buf.clone_from(&t.data);
        }
    }
    Ok((state, meta.phase, meta.next_step))
}

/// Writes `step,phase,loss,lr` rows.
pub fn write_loss_csv(path: impl AsRef<Path>, records: &[StepRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_loss_csv(path: impl AsRef<Path>) -> Result<Vec<StepRecord>> {
    let mut rdr = csv::Reader::from_path(path)?;
    rdr.deserialize().map(|r| r.map_err(Error::from)).collect()
}
