//! Config schema documentation shown by `--help`. All configs are JSON and
//! unknown keys are rejected.

pub const OVERVIEW: &str = "\
Canopy-height time-series toolkit.

Typical pipeline:
  canopy synth     --config world.json --out data --patches 16 --seed 7
  canopy pretrain  --config pretrain.json --data data --out runs/pre --seed 1
  canopy finetune  --config finetune.json --data data --checkpoint runs/pre/checkpoint.ckpt \\
                   --out runs/ft --seed 1 --freeze-backbone
  canopy predict   --checkpoint runs/ft/checkpoint.ckpt --data data --out runs/pred
  canopy evaluate  --pred runs/pred/patch_0000.cnpy --labels data/patch_0000.cnpy --out runs/eval

Every command that writes files also writes manifest.json (command, config,
seed, inputs, outputs, version, timestamps) next to them.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
Run `canopy <command> --help` for the config schema of each command.";

pub const WORLD: &str = "\
World config (JSON object; every key optional, defaults shown):
  rows, cols               48, 48      patch size in pixels
  years                    3           number of yearly heights
  base_height              [3, 30]     first-year height range (m)
  growth_slope             [0.2, 2.0]  growth-rate range (m/yr), within [0, 3]
  slope_height_coupling    true        tall stands grow slower than short ones
  disturbance_probability  0.25        chance that a square block is disturbed
  disturbance_block        8           side of a disturbance block (pixels)
  residual_fraction        [0, 0.8]    post-disturbance height, as a fraction of
                                       the largest height that still counts as a disturbance
  min_pre_height           12          minimum height before a disturbance (m)
  noise_std                0.02        channel noise in normalized units
  label_sparsity           0.9         fraction of (pixel, year) sites without a label
  pixel_size               10          meters
  seed                     0           ignored: patch i uses a seed derived from --seed and i

Each patch is written as patch_NNNN.cnpy holding the arrays input (18 x 12Y x H x W),
labels, mask and truth (Y x H x W).";

pub const MODEL: &str = "\
Model config (JSON object):
  channels, timesteps, height, width, years, embed_dim   required
  depths_enc [4], depths_dec [4] (execution order), heads [4]   required
  window_t, window_s, reduce_time [3]                          required
  ffn_ratio 4, norm_groups 8, height_scale 1.0                 optional
Presets: full (84x96x96, E=72), desk (36x48x48, E=8), tiny (8x8x8, E=8).";

pub const PRETRAIN: &str = concat!(
    "Pretrain config (JSON object):\n",
    "  model: {\"preset\": \"desk\"} or {\"config\": { model config }}\n",
    "  training: {...}\n\n",
    "Details:\n",
    "  training: {\n",
    "    phase          \"pretrain\" | \"finetune\"   must match the command\n",
    "    max_lr         peak learning rate (linear warmup, then cosine decay)\n",
    "    total_steps    length of the schedule\n",
    "    batch_size\n",
    "    warmup_fraction 0.3, grad_clip 1.0, huber_delta 1.0, weight_decay 0.01,\n",
    "    betas [0.9, 0.999], eps 1e-8                          optional\n",
    "  }\n",
    "  checkpoint_every  optional; also write checkpoint_step_NNNNNN.ckpt every k steps\n\n",
    "Outputs: checkpoint.ckpt, loss.csv (step,phase,loss,lr), summary.json, manifest.json.\n",
    "--until N stops after step N-1 of the schedule; --resume continues from a checkpoint."
);

pub const FINETUNE: &str = concat!(
    "Fine-tune config (JSON object):\n",
    "  training: {...}   phase must be \"finetune\"\n",
    "  checkpoint_every  optional\n\n",
    "The model architecture comes from the checkpoint. --checkpoint may be a\n",
    "pretraining checkpoint (start at step 0) or a fine-tuning checkpoint (resume).\n",
    "Only the prediction head is trained; --freeze-backbone must be given to confirm.\n",
    "Outputs: checkpoint.ckpt, loss.csv, summary.json (backbone checksums), manifest.json."
);

pub const GROWTH: &str = "\
Growth config (JSON object; every key optional, defaults shown):
  s_min 0, s_max 3          admissible growth slopes (m/yr)
  drop_fraction 0.5         a disturbance keeps at most this fraction of the height
  drop_absolute 4           and removes at least this many meters
  low_threshold 10          the series must fall to this height within two years
  pool_size 3               side of the min-pool window
  norm \"l2\" | \"l1\"         norm of the growth loss";
