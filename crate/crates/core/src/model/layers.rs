//! Building blocks of the temporal U-net. Every layer keeps the ids of its
//! parameters plus the precomputed index maps for its fixed input geometry, so
//! a forward pass only records graph operations.

use std::sync::Arc;

use rand::Rng;

use super::window::WindowPlan;
use crate::error::{Error, Result};
use crate::nn::{trunc_normal, AttnMask, Float, Graph, ParamId, ParamStore, Tensor, Var, GATHER_ZERO};

pub(crate) const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

/// Registers parameters under a slash-separated prefix.
pub(crate) struct Builder<'a, T: Float, R: Rng> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut R,
}

impl<T: Float, R: Rng> Builder<'_, T, R> {
    fn weight(&mut self, name: String, shape: &[usize], std: f64) -> ParamId {
        let t = trunc_normal(self.rng, shape, std);
        self.store.add(name, t, true)
    }

    fn zeros(&mut self, name: String, shape: &[usize]) -> ParamId {
        self.store.add(name, Tensor::zeros(shape), false)
    }

    fn ones(&mut self, name: String, shape: &[usize]) -> ParamId {
        self.store.add(name, Tensor::full(shape, T::one()), false)
    }

    pub fn linear(&mut self, name: &str, k: usize, m: usize, bias: bool) -> Linear {
        Linear {
            w: self.weight(format!("{name}/weight"), &[k, m], INIT_STD),
            b: bias.then(|| self.zeros(format!("{name}/bias"), &[m])),
        }
    }

    pub fn norm(&mut self, name: &str, dim: usize) -> Norm {
        Norm {
            gamma: self.ones(format!("{name}/gamma"), &[dim]),
            beta: self.zeros(format!("{name}/beta"), &[dim]),
        }
    }

    pub fn conv(&mut self, name: &str, c_in: usize, c_out: usize, k: usize) -> Conv {
        let fan_in = (c_in * k * k * k) as f64;
        Conv {
            w: self.weight(format!("{name}/weight"), &[c_out, c_in, k, k, k], fan_in.recip().sqrt()),
            b: self.zeros(format!("{name}/bias"), &[c_out]),
        }
    }

    pub fn table(&mut self, name: &str, shape: &[usize]) -> ParamId {
        let t = trunc_normal(self.rng, shape, INIT_STD);
        self.store.add(name, t, false)
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn apply<T: Float>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(s, self.w);
        let b = self.b.map(|b| g.param(s, b));
        g.linear(x, w, b)
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    pub fn layer<T: Float>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        let (ga, be) = (g.param(s, self.gamma), g.param(s, self.beta));
        g.layer_norm(x, ga, be, LN_EPS)
    }

    pub fn group<T: Float>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var, groups: usize) -> Result<Var> {
        let (ga, be) = (g.param(s, self.gamma), g.param(s, self.beta));
        g.group_norm(x, groups, ga, be, LN_EPS)
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Conv {
    pub w: ParamId,
    pub b: ParamId,
}

impl Conv {
    pub fn apply<T: Float>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        let (w, b) = (g.param(s, self.w), g.param(s, self.b));
        g.conv3d(x, w, Some(b))
    }
}

/// Pre-norm feed-forward residual branch.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Mlp {
    pub norm: Norm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn build<T: Float, R: Rng>(b: &mut Builder<T, R>, name: &str, dim: usize, ratio: usize) -> Self {
        Mlp {
            norm: b.norm(&format!("{name}/norm2"), dim),
            fc1: b.linear(&format!("{name}/mlp/fc1"), dim, dim * ratio, true),
            fc2: b.linear(&format!("{name}/mlp/fc2"), dim * ratio, dim, true),
        }
    }

    /// `x + fc2(gelu(fc1(norm(x))))`.
    pub fn residual<T: Float>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.norm.layer(g, s, x)?;
        let h = self.fc1.apply(g, s, h)?;
        let h = g.gelu(h);
        let h = self.fc2.apply(g, s, h)?;
        g.add(x, h)
    }
}

/// Gather maps of windowed multi-head attention over one token grid.
#[derive(Debug)]
pub(crate) struct AttnPlan {
    pub window: WindowPlan,
    pub heads: usize,
    pub head_dim: usize,
    /// Maps from `qkv: [tokens, 3, heads, d]` to `[windows, heads, N, d]`.
    pub qkv_maps: [Arc<Vec<u32>>; 3],
    /// Map from `[windows, heads, N, d]` back to `[tokens, heads·d]`.
    pub merge: Arc<Vec<u32>>,
    /// Map from the table `[rows, heads]` to `[heads, N, N]`.
    pub bias_map: Arc<Vec<u32>>,
    pub mask: Option<AttnMask>,
}

impl AttnPlan {
    pub fn new(grid: [usize; 3], max_window: [usize; 3], shifted: bool, heads: usize, dim: usize) -> Self {
        let window = WindowPlan::new(grid, max_window, shifted);
        let d = dim / heads;
        let n = window.window_len;
        let nw = window.n_windows;
        let qkv_maps = [0, 1, 2].map(|which| {
            let mut m = Vec::with_capacity(nw * heads * n * d);
            for w in 0..nw {
                for h in 0..heads {
                    for i in 0..n {
                        let tok = window.slots[w * n + i];
                        for c in 0..d {
                            m.push(if tok == GATHER_ZERO {
                                GATHER_ZERO
                            } else {
                                (((tok as usize * 3 + which) * heads + h) * d + c) as u32
                            });
                        }
                    }
                }
            }
            Arc::new(m)
        });
        let mut merge = Vec::with_capacity(window.n_tokens() * dim);
        for &slot in &window.token_slot {
            let (w, i) = (slot as usize / n, slot as usize % n);
            for h in 0..heads {
                for c in 0..d {
                    merge.push((((w * heads + h) * n + i) * d + c) as u32);
                }
            }
        }
        let mut bias_map = Vec::with_capacity(heads * n * n);
        for h in 0..heads {
            for &r in &window.rel_index {
                bias_map.push(r * heads as u32 + h as u32);
            }
        }
        let mask = window.needs_mask.then(|| AttnMask {
            q_groups: window.groups.clone(),
            k_groups: window.groups.clone(),
        });
        AttnPlan {
            window,
            heads,
            head_dim: d,
            qkv_maps,
            merge: Arc::new(merge),
            bias_map: Arc::new(bias_map),
            mask,
        }
    }
}

/// Pre-norm (shifted) window attention block followed by a feed-forward block.
#[derive(Debug)]
pub(crate) struct SwinBlock {
    norm1: Norm,
    qkv: Linear,
    proj: Linear,
    table: ParamId,
    mlp: Mlp,
    plan: Arc<AttnPlan>,
}

impl SwinBlock {
    pub fn build<T: Float, R: Rng>(
        b: &mut Builder<T, R>,
        name: &str,
        dim: usize,
        ffn_ratio: usize,
        plan: Arc<AttnPlan>,
    ) -> Self {
        let rows = WindowPlan::table_rows(plan.window.max_window);
        SwinBlock {
            norm1: b.norm(&format!("{name}/norm1"), dim),
            qkv: b.linear(&format!("{name}/attn/qkv"), dim, 3 * dim, true),
            proj: b.linear(&format!("{name}/attn/proj"), dim, dim, true),
            table: b.table(&format!("{name}/attn/rel_pos_table"), &[rows, plan.heads]),
            mlp: Mlp::build(b, name, dim, ffn_ratio),
            plan,
        }
    }

    #[cfg(test)]
    pub fn proj(&self) -> Linear {
        self.proj
    }

    #[cfg(test)]
    pub fn mlp(&self) -> Mlp {
        self.mlp
    }

    /// `x: [T, H, W, E]` → same shape.
    pub fn forward<T: Float>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        let p = &self.plan;
        let shape = g.shape(x).to_vec();
        let expected = [p.window.grid[0], p.window.grid[1], p.window.grid[2], p.heads * p.head_dim];
        if shape != expected {
            return Err(Error::shape(
                "swin_block",
                format!("tokens {:?}, block built for {:?}", shape, expected),
            ));
        }
        let h = self.norm1.layer(g, s, x)?;
        let qkv = self.qkv.apply(g, s, h)?;
        let attn_shape = [p.window.n_windows, p.heads, p.window.window_len, p.head_dim];
        let q = g.gather(qkv, p.qkv_maps[0].clone(), &attn_shape)?;
        let k = g.gather(qkv, p.qkv_maps[1].clone(), &attn_shape)?;
        let v = g.gather(qkv, p.qkv_maps[2].clone(), &attn_shape)?;
        let table = g.param(s, self.table);
        let n = p.window.window_len;
        let bias = g.gather(table, p.bias_map.clone(), &[p.heads, n, n])?;
        let a = g.attention(q, k, v, Some(bias), p.mask.as_ref())?;
        let merged = g.gather(a, p.merge.clone(), &shape)?;
        let o = self.proj.apply(g, s, merged)?;
        let x = g.add(x, o)?;
        self.mlp.residual(g, s, x)
    }
}

/// Year-wise temporal projection followed by 2×2 patch merging.
#[derive(Debug)]
pub(crate) struct TemporalDownsample {
    proj: ParamId,
    norm: Norm,
    reduction: ParamId,
    in_shape: [usize; 4],
    years: usize,
    t_out: usize,
    year_map: Arc<Vec<u32>>,
    merge_map: Arc<Vec<u32>>,
}

impl TemporalDownsample {
    pub fn build<T: Float, R: Rng>(
        b: &mut Builder<T, R>,
        name: &str,
        in_shape: [usize; 4],
        years: usize,
        t_out: usize,
    ) -> Result<Self> {
        let [t_in, h, w, e] = in_shape;
        if t_in % years != 0 || t_out % years != 0 || h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(
                "temporal_downsample",
                format!("{:?} to {} timesteps over {} years", in_shape, t_out, years),
            ));
        }
        let (k_in, k_out) = (t_in / years, t_out / years);
        let mut year_map = Vec::with_capacity(t_in * h * w * e);
        for y in 0..years {
            for px in 0..h * w {
                for j in 0..k_in {
                    let t = y * k_in + j;
                    for c in 0..e {
                        year_map.push(((t * h * w + px) * e + c) as u32);
                    }
                }
            }
        }
        let (h2, w2) = (h / 2, w / 2);
        let mut merge_map = Vec::with_capacity(t_out * h2 * w2 * 4 * e);
        for t in 0..t_out {
            let (y, j) = (t / k_out, t % k_out);
            for r in 0..h2 {
                for c in 0..w2 {
                    for q in 0..4 {
                        let (dr, dc) = (q % 2, q / 2);
                        let px = (2 * r + dr) * w + 2 * c + dc;
                        for ch in 0..e {
                            merge_map.push((((y * h * w + px) * k_out + j) * e + ch) as u32);
                        }
                    }
                }
            }
        }
        Ok(TemporalDownsample {
            proj: b.weight(format!("{name}/temporal/weight"), &[k_in * e, k_out * e], INIT_STD),
            norm: b.norm(&format!("{name}/norm"), 4 * e),
            reduction: b.weight(format!("{name}/reduction/weight"), &[4 * e, 2 * e], INIT_STD),
            in_shape,
            years,
            t_out,
            year_map: Arc::new(year_map),
            merge_map: Arc::new(merge_map),
        })
    }

    #[cfg(test)]
    pub fn out_shape(&self) -> [usize; 4] {
        let [_, h, w, e] = self.in_shape;
        [self.t_out, h / 2, w / 2, 2 * e]
    }

    /// Year-wise projection only: `[T_in, H, W, E]` → `[Y, H, W, (T_out/Y)·E]`.
    pub fn project_years<T: Float>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        let [t_in, h, w, e] = self.in_shape;
        if g.shape(x) != self.in_shape {
            return Err(Error::shape(
                "temporal_downsample",
                format!("tokens {:?}, expected {:?}", g.shape(x), self.in_shape),
            ));
        }
        let grouped = g.gather(x, self.year_map.clone(), &[self.years, h, w, t_in / self.years * e])?;
        let wt = g.param(s, self.proj);
        g.linear(grouped, wt, None)
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        let [_, h, w, e] = self.in_shape;
        let y = self.project_years(g, s, x)?;
        let merged = g.gather(y, self.merge_map.clone(), &[self.t_out, h / 2, w / 2, 4 * e])?;
        let merged = self.norm.layer(g, s, merged)?;
        let red = g.param(s, self.reduction);
        g.linear(merged, red, None)
    }

    #[cfg(test)]
    pub fn proj_id(&self) -> ParamId {
        self.proj
    }
}

/// Lets every yearly decoder token attend to itself and the same-year encoder
/// tokens of its level; only the decoder token is kept.
#[derive(Debug)]
pub(crate) struct TemporalSkip {
    norm1: Norm,
    q: Linear,
    kv: Linear,
    proj: Linear,
    pos_bias: ParamId,
    mlp: Mlp,
    dec_shape: [usize; 4],
    enc_time: usize,
    heads: usize,
    seq_len: usize,
    kv_maps: [Arc<Vec<u32>>; 2],
}

impl TemporalSkip {
    #[allow(clippy::too_many_arguments)]
    pub fn build<T: Float, R: Rng>(
        b: &mut Builder<T, R>,
        name: &str,
        dec_shape: [usize; 4],
        enc_time: usize,
        heads: usize,
        ffn_ratio: usize,
    ) -> Result<Self> {
        let [years, h, w, e] = dec_shape;
        if enc_time % years != 0 || e % heads != 0 {
            return Err(Error::shape(
                "temporal_skip",
                format!("{} encoder timesteps over {} years, {} dims over {} heads", enc_time, years, e, heads),
            ));
        }
        let per_year = enc_time / years;
        let seq_len = 1 + per_year;
        let d = e / heads;
        let pixels = h * w;
        let p_total = years * pixels;
        let kv_maps = [0, 1].map(|which| {
            let mut m = Vec::with_capacity(p_total * heads * seq_len * d);
            for y in 0..years {
                for px in 0..pixels {
                    let p = y * pixels + px;
                    for hh in 0..heads {
                        for l in 0..seq_len {
                            let base = if l == 0 {
                                p * 2 * e
                            } else {
                                let tok = (y * per_year + l - 1) * pixels + px;
                                (p_total + tok) * 2 * e
                            };
                            for c in 0..d {
                                m.push((base + which * e + hh * d + c) as u32);
                            }
                        }
                    }
                }
            }
            Arc::new(m)
        });
        Ok(TemporalSkip {
            norm1: b.norm(&format!("{name}/norm1"), e),
            q: b.linear(&format!("{name}/attn/q"), e, e, true),
            kv: b.linear(&format!("{name}/attn/kv"), e, 2 * e, true),
            proj: b.linear(&format!("{name}/attn/proj"), e, e, true),
            pos_bias: b.table(&format!("{name}/attn/pos_bias"), &[heads, 1, seq_len]),
            mlp: Mlp::build(b, name, e, ffn_ratio),
            dec_shape,
            enc_time,
            heads,
            seq_len,
            kv_maps,
        })
    }

    #[cfg(test)]
    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    #[cfg(test)]
    pub fn proj(&self) -> Linear {
        self.proj
    }

    #[cfg(test)]
    pub fn mlp(&self) -> Mlp {
        self.mlp
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, s: &ParamStore<T>, dec: Var, enc: Var) -> Result<Var> {
        let [years, h, w, e] = self.dec_shape;
        let enc_shape = [self.enc_time, h, w, e];
        if g.shape(dec) != self.dec_shape || g.shape(enc) != enc_shape {
            return Err(Error::shape(
                "temporal_skip",
                format!(
                    "decoder {:?} / encoder {:?}, expected {:?} / {:?}",
                    g.shape(dec),
                    g.shape(enc),
                    self.dec_shape,
                    enc_shape
                ),
            ));
        }
        let p_total = years * h * w;
        let d = e / self.heads;
        let dn = self.norm1.layer(g, s, dec)?;
        let en = self.norm1.layer(g, s, enc)?;
        let q = self.q.apply(g, s, dn)?;
        let q = g.reshape(q, &[p_total, self.heads, 1, d])?;
        let kv_dec = self.kv.apply(g, s, dn)?;
        let kv_enc = self.kv.apply(g, s, en)?;
        let kv = g.concat(&[kv_dec, kv_enc]);
        let kv_shape = [p_total, self.heads, self.seq_len, d];
        let k = g.gather(kv, self.kv_maps[0].clone(), &kv_shape)?;
        let v = g.gather(kv, self.kv_maps[1].clone(), &kv_shape)?;
        let bias = g.param(s, self.pos_bias);
        let a = g.attention(q, k, v, Some(bias), None)?;
        let a = g.reshape(a, &self.dec_shape)?;
        let o = self.proj.apply(g, s, a)?;
        let x = g.add(dec, o)?;
        self.mlp.residual(g, s, x)
    }
}

/// Linear `E → 2E` followed by a 2×2 rearrangement into `E/2`-wide tokens.
#[derive(Debug)]
pub(crate) struct PatchExpand {
    w: ParamId,
    in_shape: [usize; 4],
    map: Arc<Vec<u32>>,
}

impl PatchExpand {
    pub fn build<T: Float, R: Rng>(b: &mut Builder<T, R>, name: &str, in_shape: [usize; 4]) -> Result<Self> {
        let [t, h, w, e] = in_shape;
        if e % 2 != 0 {
            return Err(Error::shape("patch_expand", format!("odd embedding width {e}")));
        }
        let half = e / 2;
        let (h2, w2) = (2 * h, 2 * w);
        let mut map = Vec::with_capacity(t * h2 * w2 * half);
        for tt in 0..t {
            for r in 0..h2 {
                for c in 0..w2 {
                    let q = (r % 2) * 2 + c % 2;
                    let src = (tt * h + r / 2) * w + c / 2;
                    for ch in 0..half {
                        map.push((src * 2 * e + q * half + ch) as u32);
                    }
                }
            }
        }
        Ok(PatchExpand {
            w: b.weight(format!("{name}/weight"), &[e, 2 * e], INIT_STD),
            in_shape,
            map: Arc::new(map),
        })
    }

    pub fn out_shape(&self) -> [usize; 4] {
        let [t, h, w, e] = self.in_shape;
        [t, 2 * h, 2 * w, e / 2]
    }

    #[cfg(test)]
    pub fn weight_id(&self) -> ParamId {
        self.w
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        if g.shape(x) != self.in_shape {
            return Err(Error::shape(
                "patch_expand",
                format!("tokens {:?}, expected {:?}", g.shape(x), self.in_shape),
            ));
        }
        let w = g.param(s, self.w);
        let y = g.linear(x, w, None)?;
        g.gather(y, self.map.clone(), &self.out_shape())
    }
}

/// Index map permuting `[A, B, C, D]` to `[D, A, B, C]` (tokens to channel-first).
pub(crate) fn channels_first_map(shape: [usize; 4]) -> Arc<Vec<u32>> {
    crate::nn::permute_index(&shape, &[3, 0, 1, 2]).0
}

/// Index map permuting `[C, T, H, W]` to `[T, H, W, C]`.
pub(crate) fn channels_last_map(shape: [usize; 4]) -> Arc<Vec<u32>> {
    crate::nn::permute_index(&shape, &[1, 2, 3, 0]).0
}
