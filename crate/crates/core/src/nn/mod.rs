//! Dense tensors with reverse-mode differentiation: just enough substrate for
//! the temporal U-net and its training loops.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod params;
mod scalar;
mod tensor;

pub use checkpoint::Checkpoint;
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use graph::{AttnMask, Gradients, Graph, Var, GATHER_ZERO};
pub use params::{trunc_normal, ParamId, ParamStore, Parameter};
pub use scalar::Float;
pub use tensor::Tensor;

use std::sync::Arc;

use crate::error::Result;

/// Index map permuting a row-major tensor of `shape` by `axes`
/// (output axis `i` is input axis `axes[i]`).
pub fn permute_index(shape: &[usize], axes: &[usize]) -> (Arc<Vec<u32>>, Vec<usize>) {
    let rank = shape.len();
    debug_assert_eq!(axes.len(), rank);
    let mut strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let out_strides: Vec<usize> = axes.iter().map(|&a| strides[a]).collect();
    let n: usize = shape.iter().product();
    let mut index = Vec::with_capacity(n);
    let mut pos = vec![0usize; rank];
    for _ in 0..n {
        index.push(pos.iter().zip(&out_strides).map(|(p, s)| p * s).sum::<usize>() as u32);
        for ax in (0..rank).rev() {
            pos[ax] += 1;
            if pos[ax] < out_shape[ax] {
                break;
            }
            pos[ax] = 0;
        }
    }
    (Arc::new(index), out_shape)
}

impl<T: Float> Graph<T> {
    /// Axis permutation.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let (index, shape) = permute_index(self.shape(x), axes);
        self.gather(x, index, &shape)
    }

    /// Attention within one window with `q, k, v: [tokens, heads, dim]` and
    /// optional bias `[heads, tokens, tokens]`; returns `[tokens, heads, dim]`.
    pub fn windowed_attention(&mut self, q: Var, k: Var, v: Var, bias: Option<Var>) -> Result<Var> {
        let to_blocks = |g: &mut Self, x: Var| -> Result<Var> {
            let s = g.shape(x).to_vec();
            if s.len() != 3 {
                return Err(crate::Error::shape(
                    "windowed_attention",
                    format!("expected [tokens, heads, dim], got {:?}", s),
                ));
            }
            let p = g.permute(x, &[1, 0, 2])?;
            g.reshape(p, &[1, s[1], s[0], s[2]])
        };
        let (qb, kb, vb) = (to_blocks(self, q)?, to_blocks(self, k)?, to_blocks(self, v)?);
        let out = self.attention(qb, kb, vb, bias, None)?;
        let s = self.shape(out).to_vec();
        let out = self.reshape(out, &[s[1], s[2], s[3]])?;
        self.permute(out, &[1, 0, 2])
    }
}
