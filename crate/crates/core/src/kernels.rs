//! Row-at-a-time multi-head attention kernels.
//!
//! Heads are narrow (16 columns at the default size), where general matrix
//! multiplication spends most of its time packing. These loops keep one
//! score row in L1 and are compiled twice: once for the baseline target and
//! once with AVX2 enabled, picked at runtime. Both builds perform the same
//! floating-point operations in the same order, so results are identical.

/// Sizes of one attention call: `n` queries, `m` keys, `d` columns split into `heads`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct AttnShape {
    pub n: usize,
    pub m: usize,
    pub d: usize,
    pub heads: usize,
}

/// `exp(x)` for `x <= 0`, including `-inf`; within a few ulp of `f64::exp`.
///
/// Branch-free so it vectorizes.
#[inline(always)]
pub(crate) fn exp_nonpositive(x: f64) -> f64 {
    const LN2_HI: f64 = 6.931_471_803_691_238_164_9e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
    // Adding 2^52 leaves an integer in the low mantissa bits.
    const SHIFTER: f64 = 4_503_599_627_370_496.0;
    let x = x.max(-708.0);
    let k = (x * std::f64::consts::LOG2_E).round();
    let r = (x - k * LN2_HI) - k * LN2_LO;
    // Taylor series to degree 13 on |r| <= ln2 / 2.
    let mut p = 1.0 / 6_227_020_800.0;
    for c in [
        1.0 / 479_001_600.0,
        1.0 / 39_916_800.0,
        1.0 / 3_628_800.0,
        1.0 / 362_880.0,
        1.0 / 40_320.0,
        1.0 / 5_040.0,
        1.0 / 720.0,
        1.0 / 120.0,
        1.0 / 24.0,
        1.0 / 6.0,
        0.5,
        1.0,
        1.0,
    ] {
        p = p * r + c;
    }
    let scale = f64::from_bits((k + 1023.0 + SHIFTER).to_bits() << 52);
    if x <= -708.0 {
        0.0
    } else {
        p * scale
    }
}

#[inline(always)]
fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Dot product with four interleaved partial sums, so it vectorizes while
/// keeping a fixed summation order.
#[inline(always)]
fn dot(x: &[f64], y: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (xc, yc) = (x.chunks_exact(4), y.chunks_exact(4));
    let (xr, yr) = (xc.remainder(), yc.remainder());
    for (a, b) in xc.zip(yc) {
        for l in 0..4 {
            acc[l] += a[l] * b[l];
        }
    }
    let tail: f64 = xr.iter().zip(yr).map(|(a, b)| a * b).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `y = Σ_l a[l] · rows[l]` for `rows: [a.len(), y.len()]`.
#[inline(always)]
fn combine_rows(a: &[f64], rows: &[f64], y: &mut [f64]) {
    let m = y.len();
    for (yi, xi) in y.iter_mut().zip(&rows[..m]) {
        *yi = a[0] * xi;
    }
    for (l, &al) in a.iter().enumerate().skip(1) {
        axpy(al, &rows[l * m..(l + 1) * m], y);
    }
}

/// One row of probabilities: `softmax(q_i · kᵀ)` with blocked keys removed.
#[inline(always)]
fn probs_row(qi: &[f64], kt: &[f64], blocked: Option<&[bool]>, p: &mut [f64]) {
    combine_rows(qi, kt, p);
    if let Some(b) = blocked {
        for (x, &bl) in p.iter_mut().zip(b) {
            *x = if bl { f64::NEG_INFINITY } else { *x };
        }
    }
    let max = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        p.fill(0.0);
        return;
    }
    for x in p.iter_mut() {
        *x = exp_nonpositive(*x - max);
    }
    let inv = 1.0 / p.iter().sum::<f64>();
    p.iter_mut().for_each(|x| *x *= inv);
}

/// Copies head columns `c..c + hd` of `x: [rows, d]` into `[hd, rows]`.
fn transpose_head(x: &[f64], rows: usize, d: usize, c: usize, hd: usize, out: &mut [f64]) {
    for j in 0..rows {
        for l in 0..hd {
            out[l * rows + j] = x[j * d + c + l];
        }
    }
}

#[inline(always)]
fn forward_impl(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    s: AttnShape,
    blocked: Option<&[bool]>,
    out: &mut [f64],
    mut probs: Option<&mut [f64]>,
) {
    let AttnShape { n, m, d, heads } = s;
    let hd = d / heads;
    let (mut kt, mut vt) = (vec![0.0; hd * m], vec![0.0; hd * m]);
    let mut row = vec![0.0; m];
    for h in 0..heads {
        let c = h * hd;
        transpose_head(k, m, d, c, hd, &mut kt);
        transpose_head(v, m, d, c, hd, &mut vt);
        for i in 0..n {
            let p = match probs.as_deref_mut() {
                Some(all) => &mut all[(h * n + i) * m..(h * n + i + 1) * m],
                None => &mut row[..],
            };
            probs_row(&q[i * d + c..i * d + c + hd], &kt, blocked.map(|b| &b[i * m..(i + 1) * m]), p);
            for l in 0..hd {
                out[i * d + c + l] = dot(&vt[l * m..(l + 1) * m], p);
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
#[inline(always)]
fn backward_impl(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    s: AttnShape,
    probs: &[f64],
    g: &[f64],
    dq: &mut [f64],
    dk: &mut [f64],
    dv: &mut [f64],
) {
    let AttnShape { n, m, d, heads } = s;
    let hd = d / heads;
    let (mut kt, mut vt) = (vec![0.0; hd * m], vec![0.0; hd * m]);
    let (mut dkt, mut dvt) = (vec![0.0; hd * m], vec![0.0; hd * m]);
    let mut ds = vec![0.0; m];
    for h in 0..heads {
        let c = h * hd;
        transpose_head(k, m, d, c, hd, &mut kt);
        transpose_head(v, m, d, c, hd, &mut vt);
        dkt.fill(0.0);
        dvt.fill(0.0);
        for i in 0..n {
            let p = &probs[(h * n + i) * m..(h * n + i + 1) * m];
            let qi = &q[i * d + c..i * d + c + hd];
            let gi = &g[i * d + c..i * d + c + hd];
            combine_rows(gi, &vt, &mut ds);
            let pd = dot(&ds, p);
            for (x, &pj) in ds.iter_mut().zip(p) {
                *x = pj * (*x - pd);
            }
            for l in 0..hd {
                dq[i * d + c + l] = dot(&kt[l * m..(l + 1) * m], &ds);
                axpy(qi[l], &ds, &mut dkt[l * m..(l + 1) * m]);
                axpy(gi[l], p, &mut dvt[l * m..(l + 1) * m]);
            }
        }
        for j in 0..m {
            for l in 0..hd {
                dk[j * d + c + l] = dkt[l * m + j];
                dv[j * d + c + l] = dvt[l * m + j];
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
mod avx2 {
    use super::*;

    #[target_feature(enable = "avx2")]
    pub(super) unsafe fn forward(
        q: &[f64],
        k: &[f64],
        v: &[f64],
        s: AttnShape,
        blocked: Option<&[bool]>,
        out: &mut [f64],
        probs: Option<&mut [f64]>,
    ) {
        forward_impl(q, k, v, s, blocked, out, probs)
    }

    #[allow(clippy::too_many_arguments)]
    #[target_feature(enable = "avx2")]
    pub(super) unsafe fn backward(
        q: &[f64],
        k: &[f64],
        v: &[f64],
        s: AttnShape,
        probs: &[f64],
        g: &[f64],
        dq: &mut [f64],
        dk: &mut [f64],
        dv: &mut [f64],
    ) {
        backward_impl(q, k, v, s, probs, g, dq, dk, dv)
    }
}

fn use_avx2() -> bool {
    #[cfg(target_arch = "x86_64")]
    {
        std::arch::is_x86_feature_detected!("avx2")
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        false
    }
}

/// `out[i, head h] = Σ_j softmax_j(q_i,h · k_j,h) v_j,h`.
/// When `probs` is given it receives the probabilities as `[heads, n, m]`.
pub(crate) fn attention_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    s: AttnShape,
    blocked: Option<&[bool]>,
    out: &mut [f64],
    probs: Option<&mut [f64]>,
) {
    #[cfg(target_arch = "x86_64")]
    if use_avx2() {
        // SAFETY: AVX2 support was detected at runtime.
        return unsafe { avx2::forward(q, k, v, s, blocked, out, probs) };
    }
    forward_impl(q, k, v, s, blocked, out, probs)
}

/// Vector-Jacobian product of [`attention_forward`].
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    s: AttnShape,
    probs: &[f64],
    g: &[f64],
    dq: &mut [f64],
    dk: &mut [f64],
    dv: &mut [f64],
) {
    #[cfg(target_arch = "x86_64")]
    if use_avx2() {
        // SAFETY: AVX2 support was detected at runtime.
        return unsafe { avx2::backward(q, k, v, s, probs, g, dq, dk, dv) };
    }
    backward_impl(q, k, v, s, probs, g, dq, dk, dv)
}
