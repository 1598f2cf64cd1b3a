//! Central finite-difference verification of [`Graph::backward`].

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub step: f64,
    /// Coordinates checked per parameter tensor; tensors at most this large are checked exhaustively.
    pub coords_per_param: usize,
    /// Random whole-model directions checked in addition to coordinates.
    pub projections: usize,
    /// Denominator floor of the relative error.
    pub abs_floor: f64,
    /// Additional floor relative to the largest analytic gradient component, so
    /// that coordinates with (near-)zero gradient are judged against the
    /// problem's scale instead of round-off noise.
    pub scale_floor: f64,
    pub seed: u64,
    /// Perturbs the analytic gradient before comparing (negative control).
    pub corrupt_gradient: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            coords_per_param: 4,
            projections: 4,
            abs_floor: 1e-7,
            scale_floor: 1e-6,
            seed: 0,
            corrupt_gradient: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checks: usize,
    /// Description of the check with the largest error.
    pub worst: String,
}

fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn eval<F>(store: &ParamStore<f64>, f: &F) -> Result<f64>
where
    F: Fn(&ParamStore<f64>, &mut Graph<f64>) -> Result<Var>,
{
    let mut g = Graph::new();
    let root = f(store, &mut g)?;
    let v = g.value(root).item();
    if !v.is_finite() {
        return Err(Error::Numerical(format!("non-finite evaluation {v}")));
    }
    Ok(v)
}

/// Compares reverse-mode gradients of the scalar built by `f` against central
/// differences, per sampled coordinate of every trainable parameter and along
/// random directions through the whole parameter space.
pub fn grad_check<F>(store: &ParamStore<f64>, f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore<f64>, &mut Graph<f64>) -> Result<Var>,
{
    let mut g = Graph::new();
    let root = f(store, &mut g)?;
    let grads = g.backward(root)?;
    let mut analytic: Vec<Option<Vec<f64>>> = vec![None; store.len()];
    grads.accumulate_into(store, &mut analytic);
    let trainable: Vec<ParamId> = store
        .iter()
        .filter(|(_, p)| !p.frozen)
        .map(|(id, _)| id)
        .collect();
    let analytic: Vec<Vec<f64>> = (0..store.len())
        .map(|i| {
            let mut a = analytic[i]
                .take()
                .unwrap_or_else(|| vec![0.0; store.get(ParamId(i)).tensor.len()]);
            if opts.corrupt_gradient {
                for (j, v) in a.iter_mut().enumerate() {
                    *v = *v * 1.5 + if j % 2 == 0 { 1e-3 } else { -1e-3 };
                }
            }
            a
        })
        .collect();

    let largest = trainable
        .iter()
        .flat_map(|id| analytic[id.0].iter())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = opts.abs_floor.max(opts.scale_floor * largest);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checks: 0,
        worst: String::new(),
    };
    let mut work = store.clone();
    let h = opts.step;
    for &id in &trainable {
        let n = store.get(id).tensor.len();
        let coords: Vec<usize> = if n <= opts.coords_per_param {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, opts.coords_per_param).into_vec();
            c.sort_unstable();
            c
        };
        for c in coords {
            let orig = work.get(id).tensor.data[c];
            work.get_mut(id).tensor.data[c] = orig + h;
            let plus = eval(&work, &f)?;
            work.get_mut(id).tensor.data[c] = orig - h;
            let minus = eval(&work, &f)?;
            work.get_mut(id).tensor.data[c] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let err = rel_error(analytic[id.0][c], numeric, floor);
            report.checks += 1;
            if err > report.max_rel_error || report.worst.is_empty() {
                report.max_rel_error = err.max(report.max_rel_error);
                report.worst = format!(
                    "{}[{}]: analytic {:.6e}, numeric {:.6e}",
                    store.get(id).name,
                    c,
                    analytic[id.0][c],
                    numeric
                );
            }
        }
    }
    for k in 0..opts.projections {
        let dirs: Vec<Vec<f64>> = trainable
            .iter()
            .map(|&id| {
                (0..store.get(id).tensor.len())
                    .map(|_| StandardNormal.sample(&mut rng))
                    .collect()
            })
            .collect();
        let norm = dirs.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        let shift = |work: &mut ParamStore<f64>, sign: f64| {
            for (&id, d) in trainable.iter().zip(&dirs) {
                let base = &store.get(id).tensor.data;
                let t = &mut work.get_mut(id).tensor.data;
                for i in 0..t.len() {
                    t[i] = base[i] + sign * h * d[i] / norm;
                }
            }
        };
        shift(&mut work, 1.0);
        let plus = eval(&work, &f)?;
        shift(&mut work, -1.0);
        let minus = eval(&work, &f)?;
        shift(&mut work, 0.0);
        let numeric = (plus - minus) / (2.0 * h);
        let directional: f64 = trainable
            .iter()
            .zip(&dirs)
            .map(|(&id, d)| {
                analytic[id.0]
                    .iter()
                    .zip(d)
                    .map(|(a, v)| a * v / norm)
                    .sum::<f64>()
            })
            .sum();
        let err = rel_error(directional, numeric, floor);
        report.checks += 1;
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst = format!(
                "projection {k}: analytic {:.6e}, numeric {:.6e}",
                directional, numeric
            );
        }
    }
    Ok(report)
}
