use crate::error::{Error, Result};
use crate::nn::{Float, ParamStore};

use super::schedule::PhaseConfig;

/// Decoupled-weight-decay Adam moments, one buffer per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    /// Number of updates applied so far.
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub weight_decay: f64,
}

impl<T: Float> OptimizerState<T> {
    pub fn new(store: &ParamStore<T>, weight_decay: f64) -> Self {
        let zeros = || store.iter().map(|(_, p)| vec![T::zero(); p.tensor.len()]).collect();
        OptimizerState {
            step: 0,
            m: zeros(),
            v: zeros(),
            weight_decay,
        }
    }

    /// One update of every non-frozen parameter that has a gradient.
    pub fn update(&mut self, store: &mut ParamStore<T>, grads: &[Option<Vec<T>>], lr: f64, cfg: &PhaseConfig) {
        self.step += 1;
        let [b1, b2] = cfg.betas;
        let t = self.step as i32;
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let (b1t, b2t) = (T::of(b1), T::of(b2));
        let (one_b1, one_b2) = (T::of(1.0 - b1), T::of(1.0 - b2));
        let step_size = T::of(lr / c1);
        let c2_sqrt = T::of(c2.sqrt());
        let eps = T::of(cfg.eps);
        let decay = T::of(1.0 - lr * self.weight_decay);
        for (id, p) in store.iter_mut() {
            let Some(g) = &grads[id.0] else { continue };
            if p.frozen {
                continue;
            }
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let apply_decay = p.decay && self.weight_decay > 0.0;
            for (((w, g), m), v) in p.tensor.data.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1t * *m + one_b1 * *g;
                *v = b2t * *v + one_b2 * *g * *g;
                if apply_decay {
                    *w *= decay;
                }
                *w -= step_size * *m / ((*v).sqrt() / c2_sqrt + eps);
            }
        }
    }
}

/// Global L2 norm over all gradients.
pub fn grad_norm<T: Float>(grads: &[Option<Vec<T>>]) -> f64 {
    grads
        .iter()
        .flatten()
        .flat_map(|g| g.iter())
        .map(|x| x.as_f64() * x.as_f64())
        .sum::<f64>()
        .sqrt()
}

/// Rescales all gradients by `bound/‖g‖₂` when the global norm exceeds `bound`.
/// Returns the norm before clipping.
pub fn clip_gradients<T: Float>(store: &ParamStore<T>, grads: &mut [Option<Vec<T>>], bound: f64) -> Result<f64> {
    for (id, g) in grads.iter().enumerate() {
        if let Some(g) = g {
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFiniteGradient(store.get(crate::nn::ParamId(id)).name.clone()));
            }
        }
    }
    let norm = grad_norm(grads);
    if norm > bound {
        let s = T::of(bound / norm);
        for g in grads.iter_mut().flatten() {
            g.iter_mut().for_each(|x| *x *= s);
        }
    }
    Ok(norm)
}
