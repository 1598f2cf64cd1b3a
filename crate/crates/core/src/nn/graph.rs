//! Reverse-mode differentiation over a Wengert list.
//!
//! A [`Graph`] records every value produced during one forward pass together with
//! the operation that produced it. [`Graph::backward`] walks the list in reverse
//! and accumulates gradients into every node that depends on a trainable leaf.

use std::sync::Arc;

use super::kernels::{self, AttnDims, ConvDims};
use super::params::{ParamId, ParamStore};
use super::{Float, Tensor};
use crate::error::{Error, Result};
use crate::growth::LossNorm;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Index value in a gather map that produces a zero.
pub const GATHER_ZERO: u32 = u32::MAX;

/// Attention visibility: a key is visible to a query iff both carry the same group id.
#[derive(Debug, Clone)]
pub struct AttnMask {
    pub q_groups: Arc<Vec<u16>>,
    pub k_groups: Arc<Vec<u16>>,
}

enum Op<T> {
    Leaf,
    Param(ParamId),
    Reshape(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    Relu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    Gather {
        x: Var,
        index: Arc<Vec<u32>>,
    },
    Concat(Vec<Var>),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        bias: Option<Var>,
        dims: AttnDims,
        probs: Vec<T>,
    },
    Conv3d {
        x: Var,
        w: Var,
        b: Option<Var>,
        dims: ConvDims,
    },
    Sum(Var),
    SumSquares(Var),
    Huber {
        pred: Var,
        target: Arc<Vec<T>>,
        mask: Arc<Vec<bool>>,
        delta: T,
        count: usize,
    },
    GrowthDistance {
        pred: Var,
        pseudo: Arc<Vec<T>>,
        years: usize,
        norm: LossNorm,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Tape of one forward computation.
pub struct Graph<T: Float> {
    nodes: Vec<Node<T>>,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_shape(stage: &str, ok: bool, detail: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::shape(stage, detail()))
    }
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; receives no gradient.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, false)
    }

    /// Leaf whose gradient is reported by [`Gradients::wrt`] when `requires_grad`.
    pub fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Parameter leaf; frozen parameters enter the graph as constants.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let p = store.get(id);
        self.nodes.push(Node {
            value: p.tensor.clone(),
            op: Op::Param(id),
            needs_grad: !p.frozen,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Softmax weights saved by an attention node, `[B, heads, Nq, Nk]`.
    pub fn attention_probs(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    /// Affine map over the last axis: `x: [..., K]`, `w: [K, M]`, `b: [M]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        check_shape("linear", ws.len() == 2 && xs.last() == Some(&ws[0]), || {
            format!("input {:?} vs weight {:?}", xs, ws)
        })?;
        let (k, m) = (ws[0], ws[1]);
        if let Some(b) = b {
            let bs = self.shape(b);
            check_shape("linear", bs == [m], || format!("bias {:?} for {} outputs", bs, m))?;
        }
        let rows = self.value(x).len() / k;
        let mut out = vec![T::zero(); rows * m];
        if let Some(b) = b {
            let bias = &self.value(b).data;
            for r in 0..rows {
                out[r * m..(r + 1) * m].copy_from_slice(bias);
            }
        }
        kernels::matmul_acc(&self.value(x).data, &self.value(w).data, &mut out, rows, k, m);
        let mut shape = xs;
        *shape.last_mut().unwrap() = m;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(Tensor { shape, data: out }, Op::Linear { x, w, b }, &inputs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        check_shape("add", self.shape(a) == self.shape(b), || {
            format!("{:?} + {:?}", self.shape(a), self.shape(b))
        })?;
        let data = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(x, y)| *x + *y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor { shape, data }, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        check_shape("mul", self.shape(a) == self.shape(b), || {
            format!("{:?} * {:?}", self.shape(a), self.shape(b))
        })?;
        let data = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(x, y)| *x * *y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor { shape, data }, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let t = self.value(a);
        let out = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|v| *v * s).collect(),
        };
        self.push(out, Op::Scale(a, s), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|&v| kernels::gelu(v)).collect(),
        };
        self.push(out, Op::Gelu(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|&v| v.max(T::zero())).collect(),
        };
        self.push(out, Op::Relu(a), &[a])
    }

    /// Normalizes over the last axis, then applies `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(Error::InvalidArgument(format!("layer_norm eps must be positive, got {eps}")));
        }
        let d = self.value(x).last_dim();
        check_shape(
            "layer_norm",
            self.shape(gamma) == [d] && self.shape(beta) == [d],
            || format!("affine {:?} for rows of {}", self.shape(gamma), d),
        )?;
        let xv = self.value(x);
        let mut out = vec![T::zero(); xv.len()];
        let (mean, rstd) = kernels::normalize_rows(&xv.data, d, T::of(eps), &mut out);
        let g = &self.value(gamma).data;
        let b = &self.value(beta).data;
        for row in out.chunks_mut(d) {
            for i in 0..d {
                row[i] = row[i] * g[i] + b[i];
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            Tensor { shape, data: out },
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    /// Group normalization of a channel-first tensor `x: [C, ...]`.
    pub fn group_norm(
        &mut self,
        x: Var,
        groups: usize,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = *shape.first().ok_or_else(|| Error::shape("group_norm", "scalar input"))?;
        if groups == 0 || c % groups != 0 {
            return Err(Error::shape(
                "group_norm",
                format!("{c} channels not divisible into {groups} groups"),
            ));
        }
        if !(eps > 0.0) {
            return Err(Error::InvalidArgument(format!("group_norm eps must be positive, got {eps}")));
        }
        check_shape(
            "group_norm",
            self.shape(gamma) == [c] && self.shape(beta) == [c],
            || format!("affine {:?} for {} channels", self.shape(gamma), c),
        )?;
        let xv = self.value(x);
        let spatial = xv.len() / c;
        let group_len = spatial * c / groups;
        let mut out = vec![T::zero(); xv.len()];
        let (mean, rstd) = kernels::normalize_rows(&xv.data, group_len, T::of(eps), &mut out);
        let g = &self.value(gamma).data;
        let b = &self.value(beta).data;
        for ch in 0..c {
            for v in &mut out[ch * spatial..(ch + 1) * spatial] {
                *v = *v * g[ch] + b[ch];
            }
        }
        Ok(self.push(
            Tensor { shape, data: out },
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    /// `out[i] = x[index[i]]`, or zero where `index[i] == GATHER_ZERO`.
    pub fn gather(&mut self, x: Var, index: Arc<Vec<u32>>, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        check_shape("gather", n == index.len(), || {
            format!("{} indices for shape {:?}", index.len(), shape)
        })?;
        let src = &self.value(x).data;
        let mut data = Vec::with_capacity(n);
        for &i in index.iter() {
            if i == GATHER_ZERO {
                data.push(T::zero());
            } else {
                let v = src.get(i as usize).ok_or_else(|| {
                    Error::shape("gather", format!("index {} out of {}", i, src.len()))
                })?;
                data.push(*v);
            }
        }
        let out = Tensor {
            shape: shape.to_vec(),
            data,
        };
        Ok(self.push(out, Op::Gather { x, index }, &[x]))
    }

    /// Flat concatenation of the parts' data.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let mut data = Vec::new();
        for p in parts {
            data.extend_from_slice(&self.value(*p).data);
        }
        let shape = vec![data.len()];
        self.push(Tensor { shape, data }, Op::Concat(parts.to_vec()), parts)
    }

    /// Scaled dot-product attention with `q: [B,h,Nq,d]`, `k, v: [B,h,Nk,d]`,
    /// optional additive `bias: [h,Nq,Nk]` and visibility mask.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        bias: Option<Var>,
        mask: Option<&AttnMask>,
    ) -> Result<Var> {
        let qs = self.shape(q).to_vec();
        let ks = self.shape(k).to_vec();
        let vs = self.shape(v).to_vec();
        check_shape("attention", qs.len() == 4 && ks.len() == 4, || {
            format!("q {:?}, k {:?}", qs, ks)
        })?;
        check_shape(
            "attention",
            ks == vs && qs[0] == ks[0] && qs[1] == ks[1] && qs[3] == ks[3],
            || format!("q {:?}, k {:?}, v {:?}", qs, ks, vs),
        )?;
        let dims = AttnDims {
            batch: qs[0],
            heads: qs[1],
            nq: qs[2],
            nk: ks[2],
            dim: qs[3],
        };
        if let Some(b) = bias {
            let bs = self.shape(b);
            check_shape("attention", bs == [dims.heads, dims.nq, dims.nk], || {
                format!("bias {:?}", bs)
            })?;
        }
        if let Some(m) = mask {
            check_shape(
                "attention",
                m.q_groups.len() == dims.batch * dims.nq && m.k_groups.len() == dims.batch * dims.nk,
                || "mask groups do not match the batch".into(),
            )?;
        }
        let mut probs = vec![T::zero(); dims.batch * dims.heads * dims.nq * dims.nk];
        let mut out = vec![T::zero(); dims.batch * dims.heads * dims.nq * dims.dim];
        kernels::attention_forward(
            dims,
            &self.value(q).data,
            &self.value(k).data,
            &self.value(v).data,
            bias.map(|b| self.value(b).data.as_slice()),
            mask.map(|m| m.q_groups.as_slice()),
            mask.map(|m| m.k_groups.as_slice()),
            &mut probs,
            &mut out,
        );
        let inputs: Vec<Var> = [Some(q), Some(k), Some(v), bias].into_iter().flatten().collect();
        Ok(self.push(
            Tensor {
                shape: qs,
                data: out,
            },
            Op::Attention {
                q,
                k,
                v,
                bias,
                dims,
                probs,
            },
            &inputs,
        ))
    }

    /// Same-padded 3D cross-correlation: `x: [Cin,T,H,W]`, `w: [Cout,Cin,kT,kH,kW]`.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        check_shape("conv3d", xs.len() == 4 && ws.len() == 5 && ws[1] == xs[0], || {
            format!("input {:?} vs kernel {:?}", xs, ws)
        })?;
        if ws[2..].iter().any(|k| k % 2 == 0) {
            return Err(Error::shape(
                "conv3d",
                format!("kernel extents {:?} must be odd", &ws[2..]),
            ));
        }
        let dims = ConvDims {
            c_in: xs[0],
            c_out: ws[0],
            t: xs[1],
            h: xs[2],
            w: xs[3],
            kt: ws[2],
            kh: ws[3],
            kw: ws[4],
        };
        let vol = dims.t * dims.h * dims.w;
        let mut out = vec![T::zero(); dims.c_out * vol];
        if let Some(b) = b {
            let bs = self.shape(b);
            check_shape("conv3d", bs == [dims.c_out], || format!("bias {:?}", bs))?;
            for (co, &bv) in self.value(b).data.iter().enumerate() {
                out[co * vol..(co + 1) * vol].iter_mut().for_each(|o| *o = bv);
            }
        }
        kernels::conv3d_forward(dims, &self.value(x).data, &self.value(w).data, &mut out);
        let shape = vec![dims.c_out, dims.t, dims.h, dims.w];
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(Tensor { shape, data: out }, Op::Conv3d { x, w, b, dims }, &inputs))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let s = self.sum(x);
        self.scale(s, T::one() / T::of(n as f64))
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().map(|v| *v * *v).sum::<T>();
        self.push(Tensor::scalar(s), Op::SumSquares(x), &[x])
    }

    /// Mean Huber penalty over voxels where `mask` is set.
    pub fn huber_masked(
        &mut self,
        pred: Var,
        target: Arc<Vec<T>>,
        mask: Arc<Vec<bool>>,
        delta: f64,
    ) -> Result<Var> {
        let n = self.value(pred).len();
        check_shape("huber", target.len() == n && mask.len() == n, || {
            format!("{} predictions, {} targets, {} mask", n, target.len(), mask.len())
        })?;
        let count = mask.iter().filter(|m| **m).count();
        if count == 0 {
            return Err(Error::InvalidArgument("huber loss over an empty mask".into()));
        }
        let delta = T::of(delta);
        let half = T::of(0.5);
        let p = &self.value(pred).data;
        let mut total = T::zero();
        for i in 0..n {
            if mask[i] {
                let r = (p[i] - target[i]).abs();
                total += if r <= delta {
                    half * r * r
                } else {
                    delta * (r - half * delta)
                };
            }
        }
        let value = total / T::of(count as f64);
        Ok(self.push(
            Tensor::scalar(value),
            Op::Huber {
                pred,
                target,
                mask,
                delta,
                count,
            },
            &[pred],
        ))
    }

    /// Mean over pixels of `(1/Y)·‖pseudo − pred‖` with `pred: [Y, P]` year-major.
    pub fn growth_distance(
        &mut self,
        pred: Var,
        pseudo: Arc<Vec<T>>,
        years: usize,
        norm: LossNorm,
    ) -> Result<Var> {
        let n = self.value(pred).len();
        check_shape("growth_loss", years > 0 && n % years == 0 && pseudo.len() == n, || {
            format!("{} predictions, {} pseudo-labels, {} years", n, pseudo.len(), years)
        })?;
        let pixels = n / years;
        let p = &self.value(pred).data;
        let mut total = T::zero();
        for px in 0..pixels {
            let mut acc = T::zero();
            for y in 0..years {
                let d = p[y * pixels + px] - pseudo[y * pixels + px];
                acc += match norm {
                    LossNorm::L2 => d * d,
                    LossNorm::L1 => d.abs(),
                };
            }
            total += match norm {
                LossNorm::L2 => acc.sqrt(),
                LossNorm::L1 => acc,
            };
        }
        let value = total / T::of((years * pixels) as f64);
        Ok(self.push(
            Tensor::scalar(value),
            Op::GrowthDistance {
                pred,
                pseudo,
                years,
                norm,
            },
            &[pred],
        ))
    }

    /// Gradients of the scalar `root` with respect to every node that needs one.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("root must be a scalar, got shape {:?}", rv.shape),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(vec![T::one()]);
        let mut acc = Accumulator {
            grads: &mut grads,
            nodes: &self.nodes,
        };
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let g = match acc.grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.backward_node(node, &g, &mut acc);
            if matches!(node.op, Op::Leaf | Op::Param(_)) {
                acc.grads[i] = Some(g);
            }
        }
        let params = self
            .nodes
            .iter()
            .take(root.0 + 1)
            .map(|n| match n.op {
                Op::Param(id) => Some(id),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, params })
    }

    fn backward_node(&self, node: &Node<T>, g: &[T], acc: &mut Accumulator<'_, T>) {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Reshape(x) => acc.add(*x, || g.to_vec()),
            Op::Linear { x, w, b } => {
                let (k, m) = (val(*w).shape[0], val(*w).shape[1]);
                let rows = val(*x).len() / k;
                acc.add(*x, || {
                    let mut dx = vec![T::zero(); rows * k];
                    kernels::matmul_grad_input(g, &val(*w).data, &mut dx, rows, k, m);
                    dx
                });
                acc.add(*w, || {
                    let mut dw = vec![T::zero(); k * m];
                    kernels::matmul_grad_weight(&val(*x).data, g, &mut dw, rows, k, m);
                    dw
                });
                if let Some(b) = b {
                    acc.add(*b, || {
                        let mut db = vec![T::zero(); m];
                        for row in g.chunks(m) {
                            for (d, &v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                        db
                    });
                }
            }
            Op::Add(a, b) => {
                acc.add(*a, || g.to_vec());
                acc.add(*b, || g.to_vec());
            }
            Op::Mul(a, b) => {
                acc.add(*a, || g.iter().zip(&val(*b).data).map(|(d, y)| *d * *y).collect());
                acc.add(*b, || g.iter().zip(&val(*a).data).map(|(d, x)| *d * *x).collect());
            }
            Op::Scale(a, s) => acc.add(*a, || g.iter().map(|d| *d * *s).collect()),
            Op::Gelu(a) => acc.add(*a, || {
                g.iter()
                    .zip(&val(*a).data)
                    .map(|(d, &x)| *d * kernels::gelu_grad(x))
                    .collect()
            }),
            Op::Relu(a) => acc.add(*a, || {
                g.iter()
                    .zip(&val(*a).data)
                    .map(|(d, &x)| if x > T::zero() { *d } else { T::zero() })
                    .collect()
            }),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            } => {
                let xv = &val(*x).data;
                let d = val(*gamma).len();
                let gam = &val(*gamma).data;
                let xhat_row = |r: usize, buf: &mut [T]| {
                    for i in 0..d {
                        buf[i] = (xv[r * d + i] - mean[r]) * rstd[r];
                    }
                };
                let rows = xv.len() / d;
                let mut xhat = vec![T::zero(); d];
                acc.add(*x, || {
                    let mut dx = vec![T::zero(); xv.len()];
                    let mut dxhat = vec![T::zero(); d];
                    for r in 0..rows {
                        xhat_row(r, &mut xhat);
                        for i in 0..d {
                            dxhat[i] = g[r * d + i] * gam[i];
                        }
                        kernels::normalize_row_backward(
                            &xhat,
                            &dxhat,
                            rstd[r],
                            &mut dx[r * d..(r + 1) * d],
                        );
                    }
                    dx
                });
                acc.add(*gamma, || {
                    let mut dg = vec![T::zero(); d];
                    for r in 0..rows {
                        xhat_row(r, &mut xhat);
                        for i in 0..d {
                            dg[i] += g[r * d + i] * xhat[i];
                        }
                    }
                    dg
                });
                acc.add(*beta, || {
                    let mut db = vec![T::zero(); d];
                    for row in g.chunks(d) {
                        for (o, &v) in db.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    db
                });
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean,
                rstd,
            } => {
                let xv = &val(*x).data;
                let c = val(*gamma).len();
                let spatial = xv.len() / c;
                let per_group = c / groups;
                let gam = &val(*gamma).data;
                let xhat: Vec<T> = xv
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| {
                        let grp = i / spatial / per_group;
                        (v - mean[grp]) * rstd[grp]
                    })
                    .collect();
                acc.add(*x, || {
                    let dxhat: Vec<T> = g
                        .iter()
                        .enumerate()
                        .map(|(i, &d)| d * gam[i / spatial])
                        .collect();
                    let mut dx = vec![T::zero(); xv.len()];
                    let glen = per_group * spatial;
                    for grp in 0..*groups {
                        let r = grp * glen..(grp + 1) * glen;
                        kernels::normalize_row_backward(
                            &xhat[r.clone()],
                            &dxhat[r.clone()],
                            rstd[grp],
                            &mut dx[r],
                        );
                    }
                    dx
                });
                acc.add(*gamma, || {
                    (0..c)
                        .map(|ch| {
                            let r = ch * spatial..(ch + 1) * spatial;
                            kernels::dot(&g[r.clone()], &xhat[r])
                        })
                        .collect()
                });
                acc.add(*beta, || {
                    (0..c)
                        .map(|ch| g[ch * spatial..(ch + 1) * spatial].iter().copied().sum())
                        .collect()
                });
            }
            Op::Gather { x, index } => acc.add(*x, || {
                let mut dx = vec![T::zero(); val(*x).len()];
                for (&i, &d) in index.iter().zip(g) {
                    if i != GATHER_ZERO {
                        dx[i as usize] += d;
                    }
                }
                dx
            }),
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = val(*p).len();
                    acc.add(*p, || g[off..off + n].to_vec());
                    off += n;
                }
            }
            Op::Attention {
                q,
                k,
                v,
                bias,
                dims,
                probs,
            } => {
                let mut dq = vec![T::zero(); val(*q).len()];
                let mut dk = vec![T::zero(); val(*k).len()];
                let mut dv = vec![T::zero(); val(*v).len()];
                let mut dbias = bias.map(|b| vec![T::zero(); val(b).len()]);
                kernels::attention_backward(
                    *dims,
                    &val(*q).data,
                    &val(*k).data,
                    &val(*v).data,
                    probs,
                    g,
                    &mut dq,
                    &mut dk,
                    &mut dv,
                    dbias.as_deref_mut(),
                );
                acc.add(*q, || dq);
                acc.add(*k, || dk);
                acc.add(*v, || dv);
                if let (Some(b), Some(db)) = (bias, dbias) {
                    acc.add(*b, || db);
                }
            }
            Op::Conv3d { x, w, b, dims } => {
                let need_x = acc.wants(*x);
                let need_w = acc.wants(*w);
                let mut dx = need_x.then(|| vec![T::zero(); val(*x).len()]);
                let mut dw = need_w.then(|| vec![T::zero(); val(*w).len()]);
                if need_x || need_w {
                    kernels::conv3d_backward(
                        *dims,
                        &val(*x).data,
                        &val(*w).data,
                        g,
                        dx.as_deref_mut(),
                        dw.as_deref_mut(),
                    );
                }
                if let Some(dx) = dx {
                    acc.add(*x, || dx);
                }
                if let Some(dw) = dw {
                    acc.add(*w, || dw);
                }
                if let Some(b) = b {
                    let vol = dims.t * dims.h * dims.w;
                    acc.add(*b, || g.chunks(vol).map(|c| c.iter().copied().sum()).collect());
                }
            }
            Op::Sum(x) => acc.add(*x, || vec![g[0]; val(*x).len()]),
            Op::SumSquares(x) => acc.add(*x, || {
                val(*x).data.iter().map(|v| T::of(2.0) * *v * g[0]).collect()
            }),
            Op::Huber {
                pred,
                target,
                mask,
                delta,
                count,
            } => acc.add(*pred, || {
                let scale = g[0] / T::of(*count as f64);
                val(*pred)
                    .data
                    .iter()
                    .enumerate()
                    .map(|(i, &p)| {
                        if !mask[i] {
                            return T::zero();
                        }
                        let r = p - target[i];
                        let d = if r.abs() <= *delta {
                            r
                        } else {
                            *delta * r.signum()
                        };
                        d * scale
                    })
                    .collect()
            }),
            Op::GrowthDistance {
                pred,
                pseudo,
                years,
                norm,
            } => acc.add(*pred, || {
                let p = &val(*pred).data;
                let pixels = p.len() / years;
                let scale = g[0] / T::of((years * pixels) as f64);
                let mut dp = vec![T::zero(); p.len()];
                for px in 0..pixels {
                    match norm {
                        LossNorm::L2 => {
                            let mut ss = T::zero();
                            for y in 0..*years {
                                let d = p[y * pixels + px] - pseudo[y * pixels + px];
                                ss += d * d;
                            }
                            let nrm = ss.sqrt();
                            if nrm > T::zero() {
                                for y in 0..*years {
                                    let i = y * pixels + px;
                                    dp[i] = scale * (p[i] - pseudo[i]) / nrm;
                                }
                            }
                        }
                        LossNorm::L1 => {
                            for y in 0..*years {
                                let i = y * pixels + px;
                                let d = p[i] - pseudo[i];
                                dp[i] = if d == T::zero() { T::zero() } else { scale * d.signum() };
                            }
                        }
                    }
                }
                dp
            }),
        }
    }
}

struct Accumulator<'a, T> {
    grads: &'a mut Vec<Option<Vec<T>>>,
    nodes: &'a [Node<T>],
}

impl<T: Float> Accumulator<'_, T> {
    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn add(&mut self, v: Var, contribution: impl FnOnce() -> Vec<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let c = contribution();
        match &mut self.grads[v.0] {
            Some(existing) => {
                for (e, x) in existing.iter_mut().zip(c) {
                    *e += x;
                }
            }
            slot @ None => *slot = Some(c),
        }
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    params: Vec<Option<ParamId>>,
}

impl<T: Float> Gradients<T> {
    /// Gradient of a leaf created with `requires_grad` (or any trainable parameter node).
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradients per parameter, summed over every node that references it.
    pub fn param_grads(&self) -> Vec<(ParamId, &[T])> {
        self.params
            .iter()
            .zip(&self.grads)
            .filter_map(|(p, g)| match (p, g) {
                (Some(id), Some(g)) => Some((*id, g.as_slice())),
                _ => None,
            })
            .collect()
    }

    /// Adds this pass's parameter gradients into a dense per-parameter buffer.
    pub fn accumulate_into(&self, store: &ParamStore<T>, buffers: &mut [Option<Vec<T>>]) {
        for (id, g) in self.param_grads() {
            let slot = &mut buffers[id.0];
            match slot {
                Some(b) => b.iter_mut().zip(g).for_each(|(a, x)| *a += *x),
                None => {
                    debug_assert_eq!(g.len(), store.get(id).tensor.len());
                    *slot = Some(g.to_vec())
                }
            }
        }
    }
}
