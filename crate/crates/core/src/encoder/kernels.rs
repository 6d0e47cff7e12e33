//! Forward and backward kernels shared by the tape and the cached inference path.

use super::tensor::{gemm, Float, View, ViewMut};

pub(crate) const LN_EPS: f64 = 1e-5;

/// Layer normalization of every row; returns per-row `(mean, 1/std)`.
pub(crate) fn layer_norm_rows<F: Float>(
    x: &[F],
    cols: usize,
    g: &[F],
    b: &[F],
    out: &mut [F],
) -> (Vec<F>, Vec<F>) {
    let rows = x.len() / cols;
    let n = F::of(cols as f64);
    let eps = F::of(LN_EPS);
    let mut means = Vec::with_capacity(rows);
    let mut rstds = Vec::with_capacity(rows);
    for (xr, yr) in x.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        let mean = xr.iter().copied().sum::<F>() / n;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
        let rstd = F::one() / (var + eps).sqrt();
        for j in 0..cols {
            yr[j] = (xr[j] - mean) * rstd * g[j] + b[j];
        }
        means.push(mean);
        rstds.push(rstd);
    }
    (means, rstds)
}

pub(crate) fn layer_norm_backward<F: Float>(
    x: &[F],
    cols: usize,
    g: &[F],
    means: &[F],
    rstds: &[F],
    dy: &[F],
    dx: &mut [F],
    dg: &mut [F],
    db: &mut [F],
) {
    let n = F::of(cols as f64);
    for (r, ((xr, dyr), dxr)) in x
        .chunks_exact(cols)
        .zip(dy.chunks_exact(cols))
        .zip(dx.chunks_exact_mut(cols))
        .enumerate()
    {
        let (mean, rstd) = (means[r], rstds[r]);
        let mut sum_dxhat = F::zero();
        let mut sum_dxhat_xhat = F::zero();
        for j in 0..cols {
            let xhat = (xr[j] - mean) * rstd;
            let dxhat = dyr[j] * g[j];
            dg[j] += dyr[j] * xhat;
            db[j] += dyr[j];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat;
        }
        let m1 = sum_dxhat / n;
        let m2 = sum_dxhat_xhat / n;
        for j in 0..cols {
            let xhat = (xr[j] - mean) * rstd;
            dxr[j] += rstd * (dyr[j] * g[j] - m1 - xhat * m2);
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub(crate) fn gelu<F: Float>(x: F) -> F {
    let c = F::of(GELU_C);
    let a = F::of(GELU_A);
    let half = F::of(0.5);
    half * x * (F::one() + (c * (x + a * x * x * x)).tanh())
}

pub(crate) fn gelu_grad<F: Float>(x: F) -> F {
    let c = F::of(GELU_C);
    let a = F::of(GELU_A);
    let half = F::of(0.5);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let du = c * (F::one() + F::of(3.0) * a * x * x);
    half * (F::one() + t) + half * x * (F::one() - t * t) * du
}

/// Strided operand of the attention kernel: `rows` rows of width `d`
/// starting at `data[0]`, consecutive rows `rs` apart.
#[derive(Clone, Copy)]
pub(crate) struct Rows<'a, F> {
    pub data: &'a [F],
    pub rows: usize,
    pub rs: usize,
}

impl<'a, F> Rows<'a, F> {
    fn head(&self, h: usize, dh: usize) -> View<'a, F> {
        View::new(&self.data[h * dh..], self.rows, dh, self.rs, 1)
    }
}

/// Causal multi-head attention for `q.rows` queries at absolute positions
/// `offset..offset + q.rows` against `k.rows = offset + q.rows` keys.
/// Writes `q.rows x d` into `out` and returns the attention weights,
/// `heads x q.rows x k.rows`, with masked entries exactly zero.
pub(crate) fn attention_forward<F: Float>(
    q: Rows<'_, F>,
    k: Rows<'_, F>,
    v: Rows<'_, F>,
    offset: usize,
    d: usize,
    heads: usize,
    out: &mut [F],
) -> Vec<F> {
    let (lq, lk) = (q.rows, k.rows);
    assert_eq!(lk, offset + lq, "attention key length");
    let dh = d / heads;
    let scale = F::of(1.0 / (dh as f64).sqrt());
    let mut probs = vec![F::zero(); heads * lq * lk];
    for h in 0..heads {
        let p = &mut probs[h * lq * lk..(h + 1) * lq * lk];
        gemm(
            scale,
            q.head(h, dh),
            k.head(h, dh).t(),
            F::zero(),
            ViewMut::new(p, lq, lk, lk, 1),
        );
        for i in 0..lq {
            let row = &mut p[i * lk..(i + 1) * lk];
            let last = offset + i;
            let m = row[..=last].iter().copied().fold(F::neg_infinity(), F::max);
            let mut s = F::zero();
            for x in &mut row[..=last] {
                *x = (*x - m).exp();
                s += *x;
            }
            let inv = F::one() / s;
            for x in &mut row[..=last] {
                *x *= inv;
            }
            for x in &mut row[last + 1..] {
                *x = F::zero();
            }
        }
        gemm(
            F::one(),
            View::new(p, lq, lk, lk, 1),
            v.head(h, dh),
            F::zero(),
            ViewMut::new(&mut out[h * dh..], lq, dh, d, 1),
        );
    }
    probs
}

/// Backward of [`attention_forward`] for the full-sequence case (`offset = 0`)
/// on a packed `L x 3d` qkv buffer. Accumulates into `dqkv`.
pub(crate) fn attention_backward<F: Float>(
    qkv: &[F],
    probs: &[F],
    dout: &[F],
    l: usize,
    d: usize,
    heads: usize,
    dqkv: &mut [F],
) {
    let dh = d / heads;
    let scale = F::of(1.0 / (dh as f64).sqrt());
    let w = 3 * d;
    let mut dp = vec![F::zero(); l * l];
    for h in 0..heads {
        let p = &probs[h * l * l..(h + 1) * l * l];
        let p_view = View::new(p, l, l, l, 1);
        let d_o = View::new(&dout[h * dh..], l, dh, d, 1);
        let q_h = View::new(&qkv[h * dh..], l, dh, w, 1);
        let k_h = View::new(&qkv[d + h * dh..], l, dh, w, 1);
        let v_h = View::new(&qkv[2 * d + h * dh..], l, dh, w, 1);
        gemm(F::one(), d_o, v_h.t(), F::zero(), ViewMut::new(&mut dp, l, l, l, 1));
        gemm(
            F::one(),
            p_view.t(),
            d_o,
            F::one(),
            ViewMut::new(&mut dqkv[2 * d + h * dh..], l, dh, w, 1),
        );
        // dS = P * (dP - rowsum(P * dP)) * scale, in place of dP.
        for i in 0..l {
            let pr = &p[i * l..(i + 1) * l];
            let dr = &mut dp[i * l..(i + 1) * l];
            let dot: F = pr[..=i].iter().zip(&dr[..=i]).map(|(&a, &b)| a * b).sum();
            for j in 0..l {
                dr[j] = if j <= i { pr[j] * (dr[j] - dot) * scale } else { F::zero() };
            }
        }
        let ds = View::new(&dp, l, l, l, 1);
        gemm(
            F::one(),
            ds,
            k_h,
            F::one(),
            ViewMut::new(&mut dqkv[h * dh..], l, dh, w, 1),
        );
        gemm(
            F::one(),
            ds.t(),
            q_h,
            F::one(),
            ViewMut::new(&mut dqkv[d + h * dh..], l, dh, w, 1),
        );
    }
}

/// Softmax over the entries where `mask` is true (all entries when `None`);
/// excluded entries get probability exactly 0.
pub(crate) fn masked_softmax<F: Float>(logits: &[F], mask: Option<&[bool]>) -> Vec<F> {
    let ok = |i: usize| mask.is_none_or(|m| m[i]);
    let m = logits
        .iter()
        .enumerate()
        .filter(|&(i, _)| ok(i))
        .map(|(_, &x)| x)
        .fold(F::neg_infinity(), F::max);
    let mut out: Vec<F> = logits
        .iter()
        .enumerate()
        .map(|(i, &x)| if ok(i) { (x - m).exp() } else { F::zero() })
        .collect();
    let s: F = out.iter().copied().sum();
    for x in &mut out {
        *x /= s;
    }
    out
}
