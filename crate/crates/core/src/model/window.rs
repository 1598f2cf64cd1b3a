//! 3D window partitioning with optional cyclic shift.
//!
//! Tokens live on a `T×H×W` grid. Along each axis the window is clamped to the
//! grid extent; an axis longer than its window but not a multiple of it is
//! padded at the end. With `shifted`, every axis longer than its window is
//! cyclically displaced by half the window. Each window slot carries a group
//! id so that attention never mixes tokens from different sides of a wrapped
//! boundary, and padding slots are excluded altogether.

use std::sync::Arc;

use crate::nn::kernels::PAD_GROUP;
use crate::nn::GATHER_ZERO;

#[derive(Debug, Clone)]
pub struct WindowPlan {
    pub grid: [usize; 3],
    /// Effective window extents.
    pub window: [usize; 3],
    /// Configured window extents; sizes the relative-position table.
    pub max_window: [usize; 3],
    pub shift: [usize; 3],
    pub padded: [usize; 3],
    pub n_windows: usize,
    pub window_len: usize,
    /// Token index of every window slot (window-major), `GATHER_ZERO` for padding.
    pub slots: Vec<u32>,
    /// Slot holding each token.
    pub token_slot: Vec<u32>,
    /// Attention group id of every slot.
    pub groups: Arc<Vec<u16>>,
    /// Relative-position table row for every `(query, key)` pair inside a window.
    pub rel_index: Vec<u32>,
    /// Whether any slot is padding or the groups differ within a window.
    pub needs_mask: bool,
}

impl WindowPlan {
    pub fn new(grid: [usize; 3], max_window: [usize; 3], shifted: bool) -> Self {
        let mut window = [0; 3];
        let mut shift = [0; 3];
        let mut padded = [0; 3];
        let mut counts = [0; 3];
        for a in 0..3 {
            window[a] = max_window[a].min(grid[a]).max(1);
            shift[a] = if shifted && grid[a] > max_window[a] {
                max_window[a] / 2
            } else {
                0
            };
            counts[a] = grid[a].div_ceil(window[a]);
            padded[a] = counts[a] * window[a];
        }
        let n_windows = counts.iter().product::<usize>();
        let window_len = window.iter().product::<usize>();
        let n_tokens = grid.iter().product::<usize>();

        let mut slots = Vec::with_capacity(n_windows * window_len);
        let mut groups = Vec::with_capacity(n_windows * window_len);
        let mut token_slot = vec![0u32; n_tokens];
        let mut needs_mask = false;
        for wt in 0..counts[0] {
            for wh in 0..counts[1] {
                for ww in 0..counts[2] {
                    let first_group = groups.len();
                    for lt in 0..window[0] {
                        for lh in 0..window[1] {
                            for lw in 0..window[2] {
                                let shifted_pos = [
                                    wt * window[0] + lt,
                                    wh * window[1] + lh,
                                    ww * window[2] + lw,
                                ];
                                let mut orig = [0; 3];
                                let mut group = 0u16;
                                let mut pad = false;
                                for a in 0..3 {
                                    let p = shifted_pos[a] + shift[a];
                                    if p >= padded[a] {
                                        group |= 1 << a;
                                    }
                                    orig[a] = p % padded[a];
                                    pad |= orig[a] >= grid[a];
                                }
                                if pad {
                                    slots.push(GATHER_ZERO);
                                    groups.push(PAD_GROUP);
                                    needs_mask = true;
                                } else {
                                    let tok = (orig[0] * grid[1] + orig[1]) * grid[2] + orig[2];
                                    token_slot[tok] = slots.len() as u32;
                                    slots.push(tok as u32);
                                    groups.push(group);
                                }
                            }
                        }
                    }
                    let g = &groups[first_group..];
                    needs_mask |= g.iter().any(|x| *x != g[0]);
                }
            }
        }

        let span = [
            2 * max_window[0] - 1,
            2 * max_window[1] - 1,
            2 * max_window[2] - 1,
        ];
        let local = |i: usize| {
            let lw = i % window[2];
            let lh = (i / window[2]) % window[1];
            let lt = i / (window[1] * window[2]);
            [lt, lh, lw]
        };
        let mut rel_index = Vec::with_capacity(window_len * window_len);
        for i in 0..window_len {
            let a = local(i);
            for j in 0..window_len {
                let b = local(j);
                let d: Vec<usize> = (0..3).map(|x| a[x] + max_window[x] - 1 - b[x]).collect();
                rel_index.push(((d[0] * span[1] + d[1]) * span[2] + d[2]) as u32);
            }
        }

        WindowPlan {
            grid,
            window,
            max_window,
            shift,
            padded,
            n_windows,
            window_len,
            slots,
            token_slot,
            groups: Arc::new(groups),
            rel_index,
            needs_mask,
        }
    }

    /// Rows of the relative-position bias table for the configured window.
    pub fn table_rows(max_window: [usize; 3]) -> usize {
        max_window.iter().map(|w| 2 * w - 1).product()
    }

    pub fn n_tokens(&self) -> usize {
        self.grid.iter().product()
    }

    /// Window-major copy of `tokens: [T·H·W, dim]`, zero-filled at padding slots.
    pub fn partition<T: Copy + Default>(&self, tokens: &[T], dim: usize) -> Vec<T> {
        let mut out = vec![T::default(); self.slots.len() * dim];
        for (s, &tok) in self.slots.iter().enumerate() {
            if tok != GATHER_ZERO {
                let t = tok as usize;
                out[s * dim..(s + 1) * dim].copy_from_slice(&tokens[t * dim..(t + 1) * dim]);
            }
        }
        out
    }

    /// Inverse of [`partition`](Self::partition).
    pub fn reverse<T: Copy + Default>(&self, windows: &[T], dim: usize) -> Vec<T> {
        let mut out = vec![T::default(); self.n_tokens() * dim];
        for (t, &s) in self.token_slot.iter().enumerate() {
            let s = s as usize;
            out[t * dim..(t + 1) * dim].copy_from_slice(&windows[s * dim..(s + 1) * dim]);
        }
        out
    }

    /// Whether slot `j` is visible from slot `i` (both in the same window).
    pub fn visible(&self, i: usize, j: usize) -> bool {
        i / self.window_len == j / self.window_len
            && self.groups[j] != PAD_GROUP
            && self.groups[i] == self.groups[j]
    }
}
