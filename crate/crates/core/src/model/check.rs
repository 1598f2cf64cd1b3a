//! Whole-model finite-difference checks in 64-bit mode.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Model, ModelConfig};
use crate::error::Result;
use crate::nn::{grad_check, GradCheckOptions, GradCheckReport, ParamStore, Tensor};

/// Gradient check of the full model on a random input. The scalar probed is a
/// random linear functional of both heads, so every parameter contributes.
///
/// Weight matrices (other than the prediction head) and relative-position
/// tables are scaled up by 10 first: with the 0.02-std initialization the
/// normalizations are near-degenerate and central differences are dominated
/// by round-off.
pub fn model_grad_check(cfg: &ModelConfig, seed: u64, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let (model, mut store) = Model::new::<f64>(cfg, seed)?;
    for (_, p) in store.iter_mut() {
        if p.decay && !p.name.starts_with(super::PREDICTION_PREFIX) || p.name.ends_with("rel_pos_table") {
            p.tensor.data.iter_mut().for_each(|v| *v *= 10.0);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let x = Tensor::from_fn(&[cfg.channels, cfg.timesteps, cfg.height, cfg.width], |_| {
        rng.random_range(-1.0..1.0)
    });
    let out = [cfg.years, cfg.height, cfg.width];
    let wr = Tensor::from_fn(&out, |_| rng.random_range(-1.0..1.0));
    let wp = Tensor::from_fn(&out, |_| rng.random_range(-1.0..1.0));
    grad_check(
        &store,
        |s, g| {
            let xv = g.input(x.clone());
            let (r, p) = model.forward(g, s, xv)?;
            let (a, b) = (g.input(wr.clone()), g.input(wp.clone()));
            let r = g.mul(r, a)?;
            let p = g.mul(p, b)?;
            let r = g.sum(r);
            let p = g.sum(p);
            g.add(r, p)
        },
        opts,
    )
}

/// Gradient check of a single affine layer `8 → 4`; the trivial baseline.
pub fn linear_grad_check(seed: u64, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f64>::new();
    let w = store.add("w", Tensor::from_fn(&[8, 4], |_| rng.random_range(-1.0..1.0)), true);
    let b = store.add("b", Tensor::from_fn(&[4], |_| rng.random_range(-1.0..1.0)), false);
    let x = Tensor::from_fn(&[5, 8], |_| rng.random_range(-1.0..1.0));
    let probe = Tensor::from_fn(&[5, 4], |_| rng.random_range(-1.0..1.0));
    grad_check(
        &store,
        |s, g| {
            let xv = g.input(x.clone());
            let (wv, bv) = (g.param(s, w), g.param(s, b));
            let y = g.linear(xv, wv, Some(bv))?;
            let pv = g.input(probe.clone());
            let m = g.mul(y, pv)?;
            Ok(g.sum(m))
        },
        opts,
    )
}
