//! Slice-level forward and backward kernels used by the graph.

use super::Float;

#[inline]
pub fn dot<T: Float>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let (xa, xb) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for l in 0..8 {
            acc[l] += xa[l] * xb[l];
        }
    }
    let mut s = T::zero();
    for i in chunks * 8..a.len() {
        s += a[i] * b[i];
    }
    for v in acc {
        s += v;
    }
    s
}

#[inline]
pub fn axpy<T: Float>(alpha: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for (o, &v) in y.iter_mut().zip(x) {
        *o += alpha * v;
    }
}

/// Rows processed per block by the matrix kernels. Within a block operands are
/// transposed so that every inner loop runs along the (long) row axis.
const ROW_BLOCK: usize = 128;

/// Transposes rows `r0..r0+n` of `src: [rows, cols]` into `out: [cols, n]`.
#[inline]
fn gather_block<T: Float>(src: &[T], cols: usize, r0: usize, n: usize, out: &mut [T]) {
    for r in 0..n {
        let row = &src[(r0 + r) * cols..(r0 + r + 1) * cols];
        for (c, &v) in row.iter().enumerate() {
            out[c * n + r] = v;
        }
    }
}

/// Adds the transposed block `blk: [cols, n]` onto rows `r0..r0+n` of `dst: [rows, cols]`.
#[inline]
fn scatter_block<T: Float>(blk: &[T], cols: usize, r0: usize, n: usize, dst: &mut [T]) {
    for r in 0..n {
        let row = &mut dst[(r0 + r) * cols..(r0 + r + 1) * cols];
        for (c, o) in row.iter_mut().enumerate() {
            *o += blk[c * n + r];
        }
    }
}

/// `out[r, :] += x[r, :] · w` with `x: [rows, k]`, `w: [k, m]`.
pub fn matmul_acc<T: Float>(x: &[T], w: &[T], out: &mut [T], rows: usize, k: usize, m: usize) {
    let mut xt = vec![T::zero(); k * ROW_BLOCK];
    let mut ot = vec![T::zero(); m * ROW_BLOCK];
    for r0 in (0..rows).step_by(ROW_BLOCK) {
        let n = ROW_BLOCK.min(rows - r0);
        gather_block(x, k, r0, n, &mut xt);
        let ot = &mut ot[..m * n];
        ot.iter_mut().for_each(|v| *v = T::zero());
        for kk in 0..k {
            let xr = &xt[kk * n..(kk + 1) * n];
            for mm in 0..m {
                axpy(w[kk * m + mm], xr, &mut ot[mm * n..(mm + 1) * n]);
            }
        }
        scatter_block(ot, m, r0, n, out);
    }
}

/// `dx[r, kk] += Σ_m dy[r, m] · w[kk, m]`.
pub fn matmul_grad_input<T: Float>(
    dy: &[T],
    w: &[T],
    dx: &mut [T],
    rows: usize,
    k: usize,
    m: usize,
) {
    let mut dyt = vec![T::zero(); m * ROW_BLOCK];
    let mut dxt = vec![T::zero(); k * ROW_BLOCK];
    for r0 in (0..rows).step_by(ROW_BLOCK) {
        let n = ROW_BLOCK.min(rows - r0);
        gather_block(dy, m, r0, n, &mut dyt);
        let dxt = &mut dxt[..k * n];
        dxt.iter_mut().for_each(|v| *v = T::zero());
        for kk in 0..k {
            let o = &mut dxt[kk * n..(kk + 1) * n];
            for mm in 0..m {
                axpy(w[kk * m + mm], &dyt[mm * n..(mm + 1) * n], o);
            }
        }
        scatter_block(dxt, k, r0, n, dx);
    }
}

/// `dw[kk, :] += Σ_r x[r, kk] · dy[r, :]`.
pub fn matmul_grad_weight<T: Float>(
    x: &[T],
    dy: &[T],
    dw: &mut [T],
    rows: usize,
    k: usize,
    m: usize,
) {
    let mut xt = vec![T::zero(); k * ROW_BLOCK];
    let mut dyt = vec![T::zero(); m * ROW_BLOCK];
    for r0 in (0..rows).step_by(ROW_BLOCK) {
        let n = ROW_BLOCK.min(rows - r0);
        gather_block(x, k, r0, n, &mut xt);
        gather_block(dy, m, r0, n, &mut dyt);
        for kk in 0..k {
            let xr = &xt[kk * n..(kk + 1) * n];
            for mm in 0..m {
                dw[kk * m + mm] += dot(xr, &dyt[mm * n..(mm + 1) * n]);
            }
        }
    }
}

/// Normalizes each `dim`-long row; returns per-row mean and reciprocal std.
pub fn normalize_rows<T: Float>(
    x: &[T],
    dim: usize,
    eps: T,
    out: &mut [T],
) -> (Vec<T>, Vec<T>) {
    let rows = x.len() / dim;
    let mut means = Vec::with_capacity(rows);
    let mut rstds = Vec::with_capacity(rows);
    let n = T::of(dim as f64);
    for r in 0..rows {
        let row = &x[r * dim..(r + 1) * dim];
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let rstd = T::one() / (var + eps).sqrt();
        for (o, &v) in out[r * dim..(r + 1) * dim].iter_mut().zip(row) {
            *o = (v - mean) * rstd;
        }
        means.push(mean);
        rstds.push(rstd);
    }
    (means, rstds)
}

/// Backward of row normalization given `dxhat = dy · gamma` for one row.
pub fn normalize_row_backward<T: Float>(xhat: &[T], dxhat: &[T], rstd: T, dx: &mut [T]) {
    let n = T::of(xhat.len() as f64);
    let sum_d = dxhat.iter().copied().sum::<T>();
    let sum_dx = dot(dxhat, xhat);
    for i in 0..xhat.len() {
        dx[i] += rstd / n * (n * dxhat[i] - sum_d - xhat[i] * sum_dx);
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// `tanh` through a single `exp`; markedly cheaper than the libm routine.
#[inline]
fn fast_tanh<T: Float>(u: T) -> T {
    let two = T::of(2.0);
    T::one() - two / ((two * u).exp() + T::one())
}

#[inline]
pub fn gelu<T: Float>(x: T) -> T {
    let c = T::of(GELU_C);
    let k = T::of(0.044715);
    let half = T::of(0.5);
    half * x * (T::one() + fast_tanh(c * (x + k * x * x * x)))
}

#[inline]
pub fn gelu_grad<T: Float>(x: T) -> T {
    let c = T::of(GELU_C);
    let k = T::of(0.044715);
    let half = T::of(0.5);
    let t = fast_tanh(c * (x + k * x * x * x));
    let dinner = c * (T::one() + T::of(3.0) * k * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * dinner
}

/// Sentinel in attention group ids marking padding tokens.
pub const PAD_GROUP: u16 = u16::MAX;

/// Layout of one attention problem: `batch` independent (window, head) blocks.
#[derive(Debug, Clone, Copy)]
pub struct AttnDims {
    pub batch: usize,
    pub heads: usize,
    pub nq: usize,
    pub nk: usize,
    pub dim: usize,
}

/// Transposes a `[rows, cols]` block into `out: [cols, rows]`.
#[inline]
fn transpose_into<T: Float>(src: &[T], rows: usize, cols: usize, out: &mut [T]) {
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
}

/// Scaled dot-product attention forward. `q: [B,h,Nq,d]`, `k, v: [B,h,Nk,d]`,
/// `bias: [h,Nq,Nk]`, groups `[B,Nq]` / `[B,Nk]`: a key is visible to a query
/// only if both carry the same group id and the key is not padding.
/// Writes `probs: [B,h,Nq,Nk]` and `out: [B,h,Nq,d]`.
#[allow(clippy::too_many_arguments)]
pub fn attention_forward<T: Float>(
    dims: AttnDims,
    q: &[T],
    k: &[T],
    v: &[T],
    bias: Option<&[T]>,
    q_groups: Option<&[u16]>,
    k_groups: Option<&[u16]>,
    probs: &mut [T],
    out: &mut [T],
) {
    let AttnDims {
        batch,
        heads,
        nq,
        nk,
        dim,
    } = dims;
    let scale = T::one() / T::of(dim as f64).sqrt();
    let mut kt = vec![T::zero(); dim * nk];
    let mut vt = vec![T::zero(); dim * nk];
    let mut visible = vec![true; nq * nk];
    for b in 0..batch {
        if let (Some(qg), Some(kg)) = (q_groups, k_groups) {
            let qg = &qg[b * nq..(b + 1) * nq];
            let kg = &kg[b * nk..(b + 1) * nk];
            for i in 0..nq {
                for j in 0..nk {
                    visible[i * nk + j] = kg[j] != PAD_GROUP && qg[i] == kg[j];
                }
            }
        }
        for h in 0..heads {
            let blk = b * heads + h;
            let qb = &q[blk * nq * dim..(blk + 1) * nq * dim];
            transpose_into(&k[blk * nk * dim..(blk + 1) * nk * dim], nk, dim, &mut kt);
            transpose_into(&v[blk * nk * dim..(blk + 1) * nk * dim], nk, dim, &mut vt);
            let pb = &mut probs[blk * nq * nk..(blk + 1) * nq * nk];
            let ob = &mut out[blk * nq * dim..(blk + 1) * nq * dim];
            for i in 0..nq {
                let row = &mut pb[i * nk..(i + 1) * nk];
                match bias {
                    Some(bias) => row.copy_from_slice(&bias[(h * nq + i) * nk..(h * nq + i + 1) * nk]),
                    None => row.iter_mut().for_each(|r| *r = T::zero()),
                }
                for c in 0..dim {
                    axpy(qb[i * dim + c] * scale, &kt[c * nk..(c + 1) * nk], row);
                }
                let vis = &visible[i * nk..(i + 1) * nk];
                let mut max = T::neg_infinity();
                for (r, &ok) in row.iter().zip(vis) {
                    if ok && *r > max {
                        max = *r;
                    }
                }
                let orow = &mut ob[i * dim..(i + 1) * dim];
                if max == T::neg_infinity() {
                    // Padding query with nothing to attend to.
                    row.iter_mut().for_each(|r| *r = T::zero());
                    orow.iter_mut().for_each(|o| *o = T::zero());
                    continue;
                }
                let mut sum = T::zero();
                for (r, &ok) in row.iter_mut().zip(vis) {
                    *r = if ok { (*r - max).exp() } else { T::zero() };
                    sum += *r;
                }
                let inv = T::one() / sum;
                row.iter_mut().for_each(|r| *r *= inv);
                for (c, o) in orow.iter_mut().enumerate() {
                    *o = dot(row, &vt[c * nk..(c + 1) * nk]);
                }
            }
        }
    }
}

/// Backward of [`attention_forward`]; accumulates into the provided gradients.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward<T: Float>(
    dims: AttnDims,
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    dout: &[T],
    dq: &mut [T],
    dk: &mut [T],
    dv: &mut [T],
    mut dbias: Option<&mut [T]>,
) {
    let AttnDims {
        batch,
        heads,
        nq,
        nk,
        dim,
    } = dims;
    let scale = T::one() / T::of(dim as f64).sqrt();
    let mut kt = vec![T::zero(); dim * nk];
    let mut vt = vec![T::zero(); dim * nk];
    let mut dkt = vec![T::zero(); dim * nk];
    let mut dvt = vec![T::zero(); dim * nk];
    let mut ds = vec![T::zero(); nk];
    for b in 0..batch {
        for h in 0..heads {
            let blk = b * heads + h;
            let qo = blk * nq * dim;
            let ko = blk * nk * dim;
            transpose_into(&k[ko..ko + nk * dim], nk, dim, &mut kt);
            transpose_into(&v[ko..ko + nk * dim], nk, dim, &mut vt);
            dkt.iter_mut().for_each(|x| *x = T::zero());
            dvt.iter_mut().for_each(|x| *x = T::zero());
            let pb = &probs[blk * nq * nk..(blk + 1) * nq * nk];
            for i in 0..nq {
                let p = &pb[i * nk..(i + 1) * nk];
                let dor = &dout[qo + i * dim..qo + (i + 1) * dim];
                // dP = dO · Vᵀ and dVᵀ += dO ⊗ P, both along the key axis.
                ds.iter_mut().for_each(|x| *x = T::zero());
                for c in 0..dim {
                    let g = dor[c];
                    axpy(g, &vt[c * nk..(c + 1) * nk], &mut ds);
                    axpy(g, p, &mut dvt[c * nk..(c + 1) * nk]);
                }
                let weighted = dot(&ds, p);
                for j in 0..nk {
                    ds[j] = p[j] * (ds[j] - weighted);
                }
                if let Some(db) = dbias.as_deref_mut() {
                    let dbr = &mut db[(h * nq + i) * nk..(h * nq + i + 1) * nk];
                    for (o, &s) in dbr.iter_mut().zip(&ds) {
                        *o += s;
                    }
                }
                let qi = &q[qo + i * dim..qo + (i + 1) * dim];
                let dqi = &mut dq[qo + i * dim..qo + (i + 1) * dim];
                for c in 0..dim {
                    dqi[c] += scale * dot(&ds, &kt[c * nk..(c + 1) * nk]);
                    axpy(scale * qi[c], &ds, &mut dkt[c * nk..(c + 1) * nk]);
                }
            }
            for j in 0..nk {
                for c in 0..dim {
                    dk[ko + j * dim + c] += dkt[c * nk + j];
                    dv[ko + j * dim + c] += dvt[c * nk + j];
                }
            }
        }
    }
}

/// Geometry of a same-padded 3D convolution in channel-first layout.
#[derive(Debug, Clone, Copy)]
pub struct ConvDims {
    pub c_in: usize,
    pub c_out: usize,
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub kt: usize,
    pub kh: usize,
    pub kw: usize,
}

impl ConvDims {
    fn volume(&self) -> usize {
        self.t * self.h * self.w
    }
}

/// Valid output range along one axis for kernel offset `o` (centered kernel).
#[inline]
fn span(extent: usize, o: usize, half: usize) -> (usize, usize, isize) {
    let shift = o as isize - half as isize;
    let lo = (-shift).max(0) as usize;
    let hi = (extent as isize - shift).min(extent as isize).max(0) as usize;
    (lo, hi.max(lo), shift)
}

/// Visits every (output row, input row, kernel weight index) triple of the convolution.
fn for_each_tap(
    d: ConvDims,
    mut f: impl FnMut(usize, usize, usize, usize),
) {
    let (ht, hh, hw) = (d.kt / 2, d.kh / 2, d.kw / 2);
    for ot in 0..d.kt {
        let (t0, t1, st) = span(d.t, ot, ht);
        for oh in 0..d.kh {
            let (h0, h1, sh) = span(d.h, oh, hh);
            for ow in 0..d.kw {
                let (w0, w1, sw) = span(d.w, ow, hw);
                if w0 >= w1 {
                    continue;
                }
                let tap = (ot * d.kh + oh) * d.kw + ow;
                for t in t0..t1 {
                    let it = (t as isize + st) as usize;
                    for hy in h0..h1 {
                        let ih = (hy as isize + sh) as usize;
                        let out_row = (t * d.h + hy) * d.w;
                        let in_row = (it * d.h + ih) * d.w;
                        f(
                            tap,
                            out_row + w0,
                            (in_row as isize + w0 as isize + sw) as usize,
                            w1 - w0,
                        );
                    }
                }
            }
        }
    }
}

/// `out[co] += Σ_ci w[co,ci] ⋆ x[ci]`, zero padding, output extents equal input extents.
pub fn conv3d_forward<T: Float>(d: ConvDims, x: &[T], w: &[T], out: &mut [T]) {
    let vol = d.volume();
    let taps = d.kt * d.kh * d.kw;
    for_each_tap(d, |tap, o, i, len| {
        for co in 0..d.c_out {
            for ci in 0..d.c_in {
                let wv = w[(co * d.c_in + ci) * taps + tap];
                if wv == T::zero() {
                    continue;
                }
                let src = &x[ci * vol + i..ci * vol + i + len];
                axpy(wv, src, &mut out[co * vol + o..co * vol + o + len]);
            }
        }
    });
}

pub fn conv3d_backward<T: Float>(
    d: ConvDims,
    x: &[T],
    w: &[T],
    dout: &[T],
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
) {
    let vol = d.volume();
    let taps = d.kt * d.kh * d.kw;
    for_each_tap(d, |tap, o, i, len| {
        for co in 0..d.c_out {
            let g = &dout[co * vol + o..co * vol + o + len];
            for ci in 0..d.c_in {
                let widx = (co * d.c_in + ci) * taps + tap;
                if let Some(dx) = dx.as_deref_mut() {
                    axpy(w[widx], g, &mut dx[ci * vol + i..ci * vol + i + len]);
                }
                if let Some(dw) = dw.as_deref_mut() {
                    dw[widx] += dot(g, &x[ci * vol + i..ci * vol + i + len]);
                }
            }
        }
    });
}
