//! `pretrain` and `finetune`.

use std::path::{Path, PathBuf};

use anyhow::Context;
use canopy_core::data::PatchFile;
use canopy_core::model::{Model, ModelConfig};
use canopy_core::nn::{Checkpoint, ParamStore, Tensor};
use canopy_core::training::{
    finetune_loss, freeze_backbone, prepare_finetune, pretrain_loss, restore_training, run_finetune, run_pretrain,
    training_checkpoint, write_loss_csv, OptimizerState, Phase, PhaseConfig, Sample, StepRecord,
};
use clap::Args;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::manifest::{create_dir, load_config, patch_files, RunManifest};
use crate::Usage;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Full,
    Desk,
    Tiny,
}

impl Preset {
    pub fn config(&self) -> ModelConfig {
        match self {
            Preset::Full => ModelConfig::full_scale(),
            Preset::Desk => ModelConfig::desk(),
            Preset::Tiny => ModelConfig::tiny(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum ModelSpec {
    Preset(Preset),
    Config(ModelConfig),
}

impl ModelSpec {
    fn resolve(&self) -> anyhow::Result<ModelConfig> {
        let cfg = match self {
            ModelSpec::Preset(p) => p.config(),
            ModelSpec::Config(c) => c.clone(),
        };
        cfg.validate().map_err(|e| Usage(format!("model config: {e}")))?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub model: ModelSpec,
    pub training: PhaseConfig,
    #[serde(default)]
    pub checkpoint_every: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    pub training: PhaseConfig,
    #[serde(default)]
    pub checkpoint_every: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    /// Pretrain config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Directory of patch files (`*.cnpy`).
    #[arg(long)]
    data: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Seeds the weight initialization and the batch order.
    #[arg(long)]
    seed: u64,
    /// Continue from a pretraining checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stop before this step instead of at the end of the schedule.
    #[arg(long)]
    until: Option<usize>,
    /// Report the loss on stderr every this many steps (0 = quiet).
    #[arg(long, default_value_t = 25)]
    log_every: usize,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    /// Fine-tune config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Directory of patch files (`*.cnpy`).
    #[arg(long)]
    data: PathBuf,
    /// Pretraining checkpoint to start from, or fine-tuning checkpoint to resume.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Seeds the batch order.
    #[arg(long)]
    seed: u64,
    /// Confirms that everything but the prediction head stays frozen.
    #[arg(long)]
    freeze_backbone: bool,
    #[arg(long)]
    until: Option<usize>,
    #[arg(long, default_value_t = 25)]
    log_every: usize,
}

#[derive(Debug, Serialize)]
struct Summary {
    phase: Phase,
    start_step: usize,
    end_step: usize,
    initial_loss: f64,
    final_loss: f64,
    parameter_checksum: String,
    backbone_checksum_before: String,
    backbone_checksum_after: String,
}

fn hex(v: u64) -> String {
    format!("{v:016x}")
}

fn check_phase(cfg: &PhaseConfig, want: Phase) -> anyhow::Result<()> {
    if cfg.phase != want {
        anyhow::bail!(Usage(format!("training.phase is {}, this command runs {want}", cfg.phase)));
    }
    cfg.validate().map_err(|e| Usage(format!("training config: {e}")))?;
    Ok(())
}

fn step_range(start: usize, until: Option<usize>, total: usize) -> anyhow::Result<std::ops::Range<usize>> {
    let end = until.unwrap_or(total);
    if end > total || end < start {
        anyhow::bail!(Usage(format!("--until {end} outside {start}..={total}")));
    }
    Ok(start..end)
}

/// Patches of a directory, checked against the model's input shape.
pub fn load_patches(dir: &Path, cfg: &ModelConfig) -> anyhow::Result<Vec<(PathBuf, PatchFile)>> {
    let want = [cfg.channels, cfg.timesteps, cfg.height, cfg.width];
    patch_files(dir)?
        .into_iter()
        .map(|path| {
            let p = PatchFile::read(&path).with_context(|| format!("reading patch {}", path.display()))?;
            if p.input.shape != want || p.labels.years != cfg.years {
                anyhow::bail!(canopy_core::Error::Shape {
                    stage: "patch_embed".into(),
                    detail: format!(
                        "{}: input {:?} with {} label years, model expects {:?} with {} years",
                        path.display(),
                        p.input.shape,
                        p.labels.years,
                        want,
                        cfg.years
                    ),
                });
            }
            Ok((path, p))
        })
        .collect()
}

/// A training checkpoint that also records the architecture and the seed.
fn checkpoint(
    store: &ParamStore<f32>,
    state: &OptimizerState<f32>,
    phase: Phase,
    next: usize,
    cfg: &ModelConfig,
    seed: u64,
) -> Checkpoint<f32> {
    let mut ck = training_checkpoint(store, state, phase, next);
    ck.meta["model"] = json!(cfg);
    ck.meta["seed"] = json!(seed);
    ck
}

pub fn checkpoint_model(ck: &Checkpoint<f32>) -> anyhow::Result<ModelConfig> {
    let v = ck
        .meta
        .get("model")
        .ok_or_else(|| canopy_core::Error::Format("checkpoint does not record its model config".into()))?;
    Ok(serde_json::from_value(v.clone()).map_err(|e| canopy_core::Error::Format(format!("checkpoint model config: {e}")))?)
}

fn checkpoint_phase(ck: &Checkpoint<f32>) -> anyhow::Result<Phase> {
    let v = ck
        .meta
        .get("phase")
        .ok_or_else(|| canopy_core::Error::Format("checkpoint does not record its phase".into()))?;
    Ok(serde_json::from_value(v.clone()).map_err(|e| canopy_core::Error::Format(e.to_string()))?)
}

fn check_seed(ck: &Checkpoint<f32>, seed: u64) -> anyhow::Result<()> {
    match ck.meta.get("seed").and_then(|v| v.as_u64()) {
        Some(s) if s != seed => {
            anyhow::bail!(Usage(format!("checkpoint was trained with --seed {s}, resuming needs the same seed")))
        }
        _ => Ok(()),
    }
}

/// Writes checkpoints, the loss log and logs progress while steps run.
struct Reporter<'a> {
    out: &'a Path,
    every: Option<usize>,
    log_every: usize,
    cfg: &'a ModelConfig,
    seed: u64,
    phase: Phase,
    outputs: Vec<PathBuf>,
}

impl Reporter<'_> {
    fn after(&mut self, rec: &StepRecord, store: &ParamStore<f32>, state: &OptimizerState<f32>) -> canopy_core::Result<()> {
        if self.log_every > 0 && rec.step % self.log_every == 0 {
            eprintln!("[{}] step {:>6}  loss {:.5}  lr {:.3e}", self.phase, rec.step, rec.loss, rec.lr);
        }
        if let Some(k) = self.every.filter(|k| *k > 0) {
            if (rec.step + 1) % k == 0 {
                let path = self.out.join(format!("checkpoint_step_{:06}.ckpt", rec.step + 1));
                checkpoint(store, state, self.phase, rec.step + 1, self.cfg, self.seed).save(&path)?;
                self.outputs.push(path);
            }
        }
        Ok(())
    }
}

fn finish_outputs(
    out: &Path,
    ck: Checkpoint<f32>,
    log: &[StepRecord],
    summary: &Summary,
    mut outputs: Vec<PathBuf>,
) -> anyhow::Result<Vec<PathBuf>> {
    let ck_path = out.join("checkpoint.ckpt");
    ck.save(&ck_path)?;
    let loss_path = out.join("loss.csv");
    write_loss_csv(&loss_path, log)?;
    let summary_path = out.join("summary.json");
    std::fs::write(&summary_path, serde_json::to_string_pretty(summary)? + "\n")?;
    outputs.extend([ck_path, loss_path, summary_path]);
    Ok(outputs)
}

pub fn pretrain(a: PretrainArgs, argv: &[String]) -> anyhow::Result<()> {
    let manifest = RunManifest::start("pretrain", argv).config(Some(&a.config)).seed(a.seed);
    let cfg: PretrainConfig = load_config(&a.config)?;
    let model_cfg = cfg.model.resolve()?;
    check_phase(&cfg.training, Phase::Pretrain)?;
    let patches = load_patches(&a.data, &model_cfg)?;
    let samples = patches
        .iter()
        .map(|(path, p)| Sample::from_patch(p).with_context(|| format!("patch {}", path.display())))
        .collect::<anyhow::Result<Vec<Sample<f32>>>>()?;

    let (model, mut store) = Model::new::<f32>(&model_cfg, a.seed)?;
    let (mut state, start) = match &a.resume {
        None => (OptimizerState::new(&store, cfg.training.weight_decay), 0),
        Some(path) => {
            let ck = Checkpoint::<f32>::load(path).with_context(|| format!("loading {}", path.display()))?;
            if checkpoint_model(&ck)? != model_cfg {
                anyhow::bail!(Usage("checkpoint model config differs from the config file".into()));
            }
            check_seed(&ck, a.seed)?;
            let (state, phase, next) = restore_training(&ck, &mut store)?;
            if phase != Phase::Pretrain {
                anyhow::bail!(Usage(format!("cannot resume pretraining from a {phase} checkpoint")));
            }
            (state, next)
        }
    };
    let steps = step_range(start, a.until, cfg.training.total_steps)?;
    create_dir(&a.out)?;

    let backbone = hex(store.checksum(|p| !p.name.starts_with(canopy_core::model::PREDICTION_PREFIX)));
    let delta = cfg.training.huber_delta;
    let initial_loss = pretrain_loss(&model, &store, &samples, delta)?;
    let mut rep = Reporter {
        out: &a.out,
        every: cfg.checkpoint_every,
        log_every: a.log_every,
        cfg: &model_cfg,
        seed: a.seed,
        phase: Phase::Pretrain,
        outputs: Vec::new(),
    };
    let log = run_pretrain(&model, &mut store, &mut state, &samples, &cfg.training, a.seed, steps.clone(), |r, s, st| {
        rep.after(r, s, st)
    })?;
    let final_loss = pretrain_loss(&model, &store, &samples, delta)?;
    eprintln!("pretrain: loss {initial_loss:.5} -> {final_loss:.5} over steps {steps:?}");

    let summary = Summary {
        phase: Phase::Pretrain,
        start_step: steps.start,
        end_step: steps.end,
        initial_loss,
        final_loss,
        parameter_checksum: hex(store.checksum(|_| true)),
        backbone_checksum_before: backbone,
        backbone_checksum_after: hex(store.checksum(|p| !p.name.starts_with(canopy_core::model::PREDICTION_PREFIX))),
    };
    let ck = checkpoint(&store, &state, Phase::Pretrain, steps.end, &model_cfg, a.seed);
    let outputs = finish_outputs(&a.out, ck, &log, &summary, rep.outputs)?;
    let mut manifest = manifest;
    manifest.inputs = patches.into_iter().map(|(p, _)| p).chain(a.resume).collect();
    manifest.outputs = outputs;
    manifest.finish(a.out.join("manifest.json"))
}

pub fn finetune(a: FinetuneArgs, argv: &[String]) -> anyhow::Result<()> {
    if !a.freeze_backbone {
        anyhow::bail!(Usage(
            "fine-tuning updates only the prediction head; pass --freeze-backbone to confirm".into()
        ));
    }
    let manifest = RunManifest::start("finetune", argv).config(Some(&a.config)).seed(a.seed);
    let cfg: FinetuneConfig = load_config(&a.config)?;
    check_phase(&cfg.training, Phase::Finetune)?;
    let ck = Checkpoint::<f32>::load(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let model_cfg = checkpoint_model(&ck)?;
    let patches = load_patches(&a.data, &model_cfg)?;

    let (model, mut store) = Model::new::<f32>(&model_cfg, 0)?;
    freeze_backbone(&mut store);
    let (mut state, start) = match checkpoint_phase(&ck)? {
        Phase::Pretrain => {
            store.load_values_from(&ck.to_store(|n| !n.starts_with("optimizer/")))?;
            (OptimizerState::new(&store, cfg.training.weight_decay), 0)
        }
        Phase::Finetune => {
            check_seed(&ck, a.seed)?;
            let (state, _, next) = restore_training(&ck, &mut store)?;
            (state, next)
        }
    };
    let steps = step_range(start, a.until, cfg.training.total_steps)?;
    create_dir(&a.out)?;

    let frozen = |s: &ParamStore<f32>| hex(s.checksum(|p| p.frozen));
    let before = frozen(&store);
    let inputs: Vec<Tensor<f32>> = patches.iter().map(|(_, p)| p.input.clone()).collect();
    let samples = prepare_finetune(&model, &store, &inputs, &cfg.training.growth)?;
    drop(inputs);
    let growth = &cfg.training.growth;
    let initial_loss = finetune_loss(&model, &store, &samples, growth)?;
    let mut rep = Reporter {
        out: &a.out,
        every: cfg.checkpoint_every,
        log_every: a.log_every,
        cfg: &model_cfg,
        seed: a.seed,
        phase: Phase::Finetune,
        outputs: Vec::new(),
    };
    let log = run_finetune(&model, &mut store, &mut state, &samples, &cfg.training, a.seed, steps.clone(), |r, s, st| {
        rep.after(r, s, st)
    })?;
    let final_loss = finetune_loss(&model, &store, &samples, growth)?;
    let after = frozen(&store);
    eprintln!("finetune: growth loss {initial_loss:.5} -> {final_loss:.5}; backbone {before} -> {after}");
    if before != after {
        anyhow::bail!(crate::NumericalFailure("frozen parameters changed during fine-tuning".into()));
    }

    let summary = Summary {
        phase: Phase::Finetune,
        start_step: steps.start,
        end_step: steps.end,
        initial_loss,
        final_loss,
        parameter_checksum: hex(store.checksum(|_| true)),
        backbone_checksum_before: before,
        backbone_checksum_after: after,
    };
    let ck = checkpoint(&store, &state, Phase::Finetune, steps.end, &model_cfg, a.seed);
    let outputs = finish_outputs(&a.out, ck, &log, &summary, rep.outputs)?;
    let mut manifest = manifest;
    manifest.inputs = patches.into_iter().map(|(p, _)| p).chain([a.checkpoint]).collect();
    manifest.outputs = outputs;
    manifest.finish(a.out.join("manifest.json"))
}
