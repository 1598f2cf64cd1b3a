//! Temporal-Swin-Unet: a hierarchical window-attention U-net mapping a monthly
//! multi-sensor stack `C×T×H×W` to yearly heights `2×Y×H×W` (reference and
//! prediction head).

mod check;
mod config;
mod layers;
pub mod window;

pub use check::{linear_grad_check, model_grad_check};
pub use config::ModelConfig;

use std::fmt::Write as _;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{Float, Graph, ParamStore, Tensor, Var};
use layers::{
    channels_first_map, channels_last_map, AttnPlan, Builder, Conv, Linear, Norm, PatchExpand, SwinBlock,
    TemporalDownsample, TemporalSkip,
};

/// Parameter-name prefix of the prediction head; everything else is backbone
/// or reference head.
pub const PREDICTION_PREFIX: &str = "head_pred/";
/// Parameter-name prefix of the reference head.
pub const REFERENCE_PREFIX: &str = "head_ref/";

/// Reference and prediction heights, each `Y×H×W`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutput<T> {
    pub reference: Tensor<T>,
    pub prediction: Tensor<T>,
}

impl<T: Float> ModelOutput<T> {
    /// The two heads stacked into `2×Y×H×W`.
    pub fn stacked(&self) -> Tensor<T> {
        let mut data = self.reference.data.clone();
        data.extend_from_slice(&self.prediction.data);
        let mut shape = vec![2];
        shape.extend_from_slice(&self.reference.shape);
        Tensor { shape, data }
    }
}

/// One named stage of the forward pass and the shape it produces.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Stage {
    pub name: String,
    pub shape: Vec<usize>,
}

/// Per-stage shapes of the forward pass, derived from the config alone.
pub fn shape_ladder(cfg: &ModelConfig) -> Result<Vec<Stage>> {
    cfg.validate()?;
    let mut st = Vec::new();
    let mut push = |name: String, shape: Vec<usize>| st.push(Stage { name, shape });
    push("input".into(), vec![cfg.channels, cfg.timesteps, cfg.height, cfg.width]);
    push("patch_embed".into(), token_shape(cfg, cfg.timesteps, 0).to_vec());
    for l in 0..4 {
        push(format!("encoder{}", l + 1), token_shape(cfg, cfg.enc_time(l), l).to_vec());
        if l < 3 {
            push(format!("downsample{}", l + 1), token_shape(cfg, cfg.enc_time(l + 1), l + 1).to_vec());
        }
    }
    for i in 0..4 {
        let level = 3 - i;
        push(format!("decoder{}/skip", i + 1), token_shape(cfg, cfg.years, level).to_vec());
        if i < 3 {
            push(format!("decoder{}/expand", i + 1), token_shape(cfg, cfg.years, level - 1).to_vec());
        } else {
            push(format!("decoder{}", i + 1), token_shape(cfg, cfg.years, 0).to_vec());
        }
    }
    push("reference_head".into(), vec![cfg.years, cfg.height, cfg.width]);
    push("prediction_head".into(), vec![cfg.years, cfg.height, cfg.width]);
    push("output".into(), vec![2, cfg.years, cfg.height, cfg.width]);
    Ok(st)
}

fn token_shape(cfg: &ModelConfig, t: usize, level: usize) -> [usize; 4] {
    let (h, w) = cfg.extent(level);
    [t, h, w, cfg.dim(level)]
}

fn fmt_shape(shape: &[usize]) -> String {
    let parts: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
    format!("({})", parts.join(", "))
}

/// Text rendering of [`shape_ladder`], one `stage: (dims)` line per stage; the
/// final line gives the stacked output as `2×Y×H×W`.
pub fn describe(cfg: &ModelConfig) -> Result<String> {
    let ladder = shape_ladder(cfg)?;
    let mut out = String::new();
    for s in &ladder {
        if s.name == "output" {
            let dims: Vec<String> = s.shape.iter().map(|d| d.to_string()).collect();
            let _ = writeln!(out, "output: {}", dims.join("×"));
        } else {
            let _ = writeln!(out, "{}: {}", s.name, fmt_shape(&s.shape));
        }
    }
    Ok(out)
}

struct EncoderLayer {
    blocks: Vec<SwinBlock>,
    down: Option<TemporalDownsample>,
}

struct DecoderLayer {
    skip: TemporalSkip,
    blocks: Vec<SwinBlock>,
    expand: Option<PatchExpand>,
}

struct PredictionHead {
    conv1: Conv,
    norm1: Norm,
    conv2: Conv,
    norm2: Norm,
    out: Conv,
}

/// The network structure; parameters live in a separate [`ParamStore`].
pub struct Model {
    cfg: ModelConfig,
    ladder: Vec<Stage>,
    embed: Linear,
    embed_map: Arc<Vec<u32>>,
    encoder: Vec<EncoderLayer>,
    decoder: Vec<DecoderLayer>,
    final_norm: Norm,
    reference: Linear,
    prediction: PredictionHead,
    head_map: Arc<Vec<u32>>,
}

impl Model {
    /// Builds the model and a freshly initialized parameter store.
    pub fn new<T: Float>(cfg: &ModelConfig, seed: u64) -> Result<(Model, ParamStore<T>)> {
        let ladder = shape_ladder(cfg)?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder {
            store: &mut store,
            rng: &mut rng,
        };
        let e = cfg.embed_dim;
        let max_window = [cfg.window_t, cfg.window_s, cfg.window_s];
        let embed = b.linear("patch_embed", cfg.channels, e, true);
        let embed_map = channels_last_map([cfg.channels, cfg.timesteps, cfg.height, cfg.width]);

        let blocks = |b: &mut Builder<T, ChaCha8Rng>, name: &str, depth: usize, shape: [usize; 4], heads: usize| {
            let grid = [shape[0], shape[1], shape[2]];
            let plans = [false, true].map(|shifted| Arc::new(AttnPlan::new(grid, max_window, shifted, heads, shape[3])));
            (0..depth)
                .map(|i| {
                    SwinBlock::build(b, &format!("{name}/block{i}"), shape[3], cfg.ffn_ratio, plans[i % 2].clone())
                })
                .collect::<Vec<_>>()
        };

        let mut encoder = Vec::with_capacity(4);
        for l in 0..4 {
            let shape = token_shape(cfg, cfg.enc_time(l), l);
            let name = format!("enc{}", l + 1);
            let bl = blocks(&mut b, &name, cfg.depths_enc[l], shape, cfg.heads[l]);
            let down = if l < 3 {
                Some(TemporalDownsample::build(
                    &mut b,
                    &format!("{name}/downsample"),
                    shape,
                    cfg.years,
                    cfg.enc_time(l + 1),
                )?)
            } else {
                None
            };
            encoder.push(EncoderLayer { blocks: bl, down });
        }

        let mut decoder = Vec::with_capacity(4);
        for i in 0..4 {
            let level = 3 - i;
            let shape = token_shape(cfg, cfg.years, level);
            let name = format!("dec{}", i + 1);
            let skip = TemporalSkip::build(
                &mut b,
                &format!("{name}/skip"),
                shape,
                cfg.enc_time(level),
                cfg.heads[level],
                cfg.ffn_ratio,
            )?;
            let bl = blocks(&mut b, &name, cfg.depths_dec[i], shape, cfg.heads[level]);
            let expand = if i < 3 {
                Some(PatchExpand::build(&mut b, &format!("{name}/expand"), shape)?)
            } else {
                None
            };
            decoder.push(DecoderLayer { skip, blocks: bl, expand });
        }
        let final_norm = b.norm("final_norm", e);
        let reference = b.linear("head_ref/proj", e, 1, true);
        let prediction = PredictionHead {
            conv1: b.conv("head_pred/conv1", e, e, 3),
            norm1: b.norm("head_pred/norm1", e),
            conv2: b.conv("head_pred/conv2", e, e, 3),
            norm2: b.norm("head_pred/norm2", e),
            out: b.conv("head_pred/out", e, 1, 1),
        };
        let head_map = channels_first_map([cfg.years, cfg.height, cfg.width, e]);
        let model = Model {
            cfg: cfg.clone(),
            ladder,
            embed,
            embed_map,
            encoder,
            decoder,
            final_norm,
            reference,
            prediction,
            head_map,
        };
        Ok((model, store))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn ladder(&self) -> &[Stage] {
        &self.ladder
    }

    fn check_stage<T: Float>(&self, g: &Graph<T>, name: &str, v: Var) -> Result<()> {
        let expected = self
            .ladder
            .iter()
            .find(|s| s.name == name)
            .map(|s| s.shape.as_slice())
            .unwrap_or(&[]);
        if g.shape(v) != expected {
            return Err(Error::shape(
                name,
                format!("produced {:?}, expected {:?}", g.shape(v), expected),
            ));
        }
        Ok(())
    }

    /// Per-voxel linear projection of `x: [C, T, H, W]` to tokens `[T, H, W, E]`.
    pub fn patch_embed<T: Float>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        let expected = &self.ladder[0].shape;
        if g.shape(x) != expected.as_slice() {
            let stage = if g.shape(x).first() != expected.first() {
                "patch_embed: channel count"
            } else {
                "input"
            };
            return Err(Error::shape(
                stage,
                format!("input {:?}, model expects {:?}", g.shape(x), expected),
            ));
        }
        let cfg = &self.cfg;
        let tokens = g.gather(
            x,
            self.embed_map.clone(),
            &[cfg.timesteps, cfg.height, cfg.width, cfg.channels],
        )?;
        let out = self.embed.apply(g, s, tokens)?;
        self.check_stage(g, "patch_embed", out)?;
        Ok(out)
    }

    /// Backbone up to the final decoder norm: `[C, T, H, W]` → `[Y, H, W, E]`.
    pub fn features<T: Float>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        let mut h = self.patch_embed(g, s, x)?;
        let mut skips = Vec::with_capacity(4);
        for (l, layer) in self.encoder.iter().enumerate() {
            for blk in &layer.blocks {
                h = blk.forward(g, s, h)?;
            }
            self.check_stage(g, &format!("encoder{}", l + 1), h)?;
            skips.push(h);
            if let Some(down) = &layer.down {
                h = down.forward(g, s, h)?;
                self.check_stage(g, &format!("downsample{}", l + 1), h)?;
            }
        }
        for (i, layer) in self.decoder.iter().enumerate() {
            h = layer.skip.forward(g, s, h, skips[3 - i])?;
            self.check_stage(g, &format!("decoder{}/skip", i + 1), h)?;
            for blk in &layer.blocks {
                h = blk.forward(g, s, h)?;
            }
            if let Some(expand) = &layer.expand {
                h = expand.forward(g, s, h)?;
                self.check_stage(g, &format!("decoder{}/expand", i + 1), h)?;
            } else {
                self.check_stage(g, &format!("decoder{}", i + 1), h)?;
            }
        }
        self.final_norm.layer(g, s, h)
    }

    /// Per-voxel linear `E → 1` of the final features: `[Y, H, W]` heights.
    pub fn reference_head<T: Float>(&self, g: &mut Graph<T>, s: &ParamStore<T>, feats: Var) -> Result<Var> {
        let cfg = &self.cfg;
        let r = self.reference.apply(g, s, feats)?;
        let r = g.reshape(r, &[cfg.years, cfg.height, cfg.width])?;
        Ok(g.scale(r, T::of(cfg.height_scale)))
    }

    /// conv3 → GN → ReLU → conv3 → GN → ReLU → conv1, all same-padded: `[Y, H, W]` heights.
    pub fn prediction_head<T: Float>(&self, g: &mut Graph<T>, s: &ParamStore<T>, feats: Var) -> Result<Var> {
        let cfg = &self.cfg;
        let shape = [cfg.embed_dim, cfg.years, cfg.height, cfg.width];
        let p = &self.prediction;
        let x = g.gather(feats, self.head_map.clone(), &shape)?;
        let x = p.conv1.apply(g, s, x)?;
        let x = p.norm1.group(g, s, x, cfg.norm_groups)?;
        let x = g.relu(x);
        let x = p.conv2.apply(g, s, x)?;
        let x = p.norm2.group(g, s, x, cfg.norm_groups)?;
        let x = g.relu(x);
        let x = p.out.apply(g, s, x)?;
        let x = g.reshape(x, &[cfg.years, cfg.height, cfg.width])?;
        Ok(g.scale(x, T::of(cfg.height_scale)))
    }

    /// Both heads on `x: [C, T, H, W]`; returns `(reference, prediction)` nodes.
    pub fn forward<T: Float>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var) -> Result<(Var, Var)> {
        let f = self.features(g, s, x)?;
        let r = self.reference_head(g, s, f)?;
        let p = self.prediction_head(g, s, f)?;
        Ok((r, p))
    }

    /// Inference on one input stack.
    pub fn predict<T: Float>(&self, s: &ParamStore<T>, x: &Tensor<T>) -> Result<ModelOutput<T>> {
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let (r, p) = self.forward(&mut g, s, xv)?;
        let out = ModelOutput {
            reference: g.value(r).clone(),
            prediction: g.value(p).clone(),
        };
        if !(out.reference.all_finite() && out.prediction.all_finite()) {
            return Err(Error::Numerical("model produced non-finite heights".into()));
        }
        Ok(out)
    }

    /// Backbone features and reference heights without building the prediction head.
    pub fn features_and_reference<T: Float>(
        &self,
        s: &ParamStore<T>,
        x: &Tensor<T>,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let f = self.features(&mut g, s, xv)?;
        let r = self.reference_head(&mut g, s, f)?;
        Ok((g.value(f).clone(), g.value(r).clone()))
    }
}
