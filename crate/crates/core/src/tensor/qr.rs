//! Householder QR with a fixed `diag(R) ≥ 0` sign convention, and the
//! reverse-mode pass through its reflections.
//!
//! The factorization applies `n − 1` reflections `H_k = I − 2 v_k v_kᵀ`
//! (each `v_k` supported on rows `k..n`) so that
//! `H_{n−2} ⋯ H_0 · A = R_raw`, then accumulates `Q_raw = H_0 ⋯ H_{n−2}`
//! backwards. Finally rows of `R_raw` and columns of `Q_raw` are flipped by
//! `D = diag(sign(R_raw))`, which makes the factorization unique for
//! nonsingular `A`.
//!
//! [`qr_backward`] differentiates `A ↦ Q` by walking the same reflections in
//! reverse: first through the accumulation of `Q`, collecting the adjoint of
//! every `v_k`, then back through the triangularization sweep, undoing each
//! reflection to recover the intermediate `R` instead of storing all of them.

use super::flops::{FlopCounter, FlopTag};
use super::matrix::{dot, Matrix};
use crate::error::{Error, Result};

/// One Householder reflection and the data needed to differentiate it.
#[derive(Debug, Clone, PartialEq)]
pub struct Reflector {
    /// Unit vector on rows `k..n`.
    pub v: Vec<f64>,
    /// Column `k` (rows `k..n`) before the reflection was applied.
    x: Vec<f64>,
    /// `sign(x[0])`, with `sign(0) = +1`.
    sign: f64,
    x_norm: f64,
    u_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QrFactors {
    pub q: Matrix,
    pub r: Matrix,
    /// Reflection `k` is `None` when column `k` was already zero below the diagonal
    /// block and no reflection was applied.
    pub householder_vectors: Vec<Option<Reflector>>,
    /// Diagonal of the sign-fixing matrix `D`.
    signs: Vec<f64>,
}

impl QrFactors {
    pub fn n(&self) -> usize {
        self.q.rows()
    }
}

/// Householder QR of a square matrix with `diag(r) ≥ 0`.
pub fn householder_qr(a: &Matrix, flops: &FlopCounter) -> Result<QrFactors> {
    if !a.is_square() {
        return Err(Error::dim("householder_qr", "square matrix", format!("{}x{}", a.rows(), a.cols())));
    }
    let n = a.rows();
    if n == 0 {
        return Err(Error::invalid("householder_qr needs n >= 1"));
    }
    if !a.all_finite() {
        return Err(Error::invalid("householder_qr input has non-finite entries"));
    }

    let mut r = a.clone();
    let mut reflectors = Vec::with_capacity(n.saturating_sub(1));
    let mut work = vec![0.0; n];
    let mut count = 0u64;

    for k in 0..n.saturating_sub(1) {
        let m = n - k;
        let x = r.col(k)[k..].to_vec();
        let x_norm = dot(&x, &x).sqrt();
        count += m as u64;
        if x_norm == 0.0 {
            reflectors.push(None);
            continue;
        }
        let sign = if x[0] < 0.0 { -1.0 } else { 1.0 };
        let mut v = x.clone();
        v[0] += sign * x_norm;
        let u_norm = dot(&v, &v).sqrt();
        for vi in &mut v {
            *vi /= u_norm;
        }
        count += m as u64;

        // Columns k+1.. : R[k.., j] -= 2 v (vᵀ R[k.., j]).
        apply_reflection(&mut r, &v, k, k + 1, &mut work);
        count += 2 * (m * (m - 1)) as u64;
        r[(k, k)] = -sign * x_norm;
        for i in k + 1..n {
            r[(i, k)] = 0.0;
        }

        reflectors.push(Some(Reflector {
            v,
            x,
            sign,
            x_norm,
            u_norm,
        }));
    }

    // Q_raw = H_0 H_1 ⋯ H_{n−2}, accumulated from the right.
    let mut q = Matrix::identity(n);
    for (k, refl) in reflectors.iter().enumerate().rev() {
        if let Some(refl) = refl {
            apply_reflection(&mut q, &refl.v, k, k, &mut work);
            let m = (n - k) as u64;
            count += 2 * m * m;
        }
    }

    let signs: Vec<f64> = (0..n).map(|i| if r[(i, i)] < 0.0 { -1.0 } else { 1.0 }).collect();
    for (i, &s) in signs.iter().enumerate() {
        if s < 0.0 {
            for v in r.row_mut(i) {
                *v = -*v;
            }
            for row in 0..n {
                q[(row, i)] = -q[(row, i)];
            }
        }
    }

    flops.record(FlopTag::Qr, count);
    Ok(QrFactors {
        q,
        r,
        householder_vectors: reflectors,
        signs,
    })
}

/// `M[k.., c0..] ← (I − 2vvᵀ) M[k.., c0..]`, with `v` living on rows `k..`.
fn apply_reflection(m: &mut Matrix, v: &[f64], k: usize, c0: usize, work: &mut [f64]) {
    let n_cols = m.cols();
    let w = &mut work[c0..n_cols];
    w.fill(0.0);
    for (off, &vi) in v.iter().enumerate() {
        let row = &m.row(k + off)[c0..];
        for (wj, &rj) in w.iter_mut().zip(row) {
            *wj += vi * rj;
        }
    }
    for (off, &vi) in v.iter().enumerate() {
        let row = &mut m.row_mut(k + off)[c0..];
        let f = 2.0 * vi;
        for (rj, &wj) in row.iter_mut().zip(w.iter()) {
            *rj -= f * wj;
        }
    }
}

/// `(I − 2vvᵀ) M` restricted to rows and columns `k..n` of a square matrix.
fn reflect_block(m: &mut Matrix, v: &[f64], k: usize, work: &mut [f64]) {
    apply_reflection(m, v, k, k, work);
}

/// Gradient of a scalar loss with respect to the QR input, given `∂L/∂Q`.
pub fn qr_backward(factors: &QrFactors, grad_q: &Matrix, flops: &FlopCounter) -> Result<Matrix> {
    let n = factors.n();
    if grad_q.shape() != (n, n) {
        return Err(Error::dim(
            "qr_backward",
            format!("{n}x{n}"),
            format!("{}x{}", grad_q.rows(), grad_q.cols()),
        ));
    }
    let d = &factors.signs;
    let refls = &factors.householder_vectors;
    let mut work = vec![0.0; n];
    let mut count = 0u64;

    // Q_raw = Q·D, and its adjoint is G·D.
    let mut g_bar = grad_q.clone();
    let mut q_cur = factors.q.clone();
    for row in 0..n {
        for j in 0..n {
            g_bar[(row, j)] *= d[j];
            q_cur[(row, j)] *= d[j];
        }
    }

    // Pass 1: Q^(k) = H_k Q^(k+1) for k = 0..n−2, where Q^(0) = Q_raw.
    let mut v_bar: Vec<Vec<f64>> = refls
        .iter()
        .map(|r| r.as_ref().map_or_else(Vec::new, |r| vec![0.0; r.v.len()]))
        .collect();
    for (k, refl) in refls.iter().enumerate() {
        let Some(refl) = refl else { continue };
        let v = &refl.v;
        let m = n - k;
        // Q^(k+1) = H_k Q^(k); only the trailing block is non-trivial.
        reflect_block(&mut q_cur, v, k, &mut work);
        let mut w = vec![0.0; m];
        let mut y = vec![0.0; m];
        for (a, &vi) in v.iter().enumerate() {
            let q_row = &q_cur.row(k + a)[k..];
            let g_row = &g_bar.row(k + a)[k..];
            for j in 0..m {
                w[j] += q_row[j] * vi;
                y[j] += g_row[j] * vi;
            }
        }
        let vb = &mut v_bar[k];
        for (a, vb_a) in vb.iter_mut().enumerate() {
            let q_row = &q_cur.row(k + a)[k..];
            let g_row = &g_bar.row(k + a)[k..];
            *vb_a += -2.0 * (dot(g_row, &w) + dot(q_row, &y));
        }
        // Adjoint of Q^(k+1) is H_k times the adjoint of Q^(k).
        reflect_block(&mut g_bar, v, k, &mut work);
        count += 6 * (m * m) as u64;
    }

    // Pass 2: back through R^(k+1) = H_k R^(k), starting from R_raw = D·R.
    let mut r_cur = factors.r.clone();
    for (i, &s) in d.iter().enumerate() {
        if s < 0.0 {
            for v in r_cur.row_mut(i) {
                *v = -*v;
            }
        }
    }
    let mut r_bar = Matrix::zeros(n, n);
    for k in (0..refls.len()).rev() {
        let Some(refl) = &refls[k] else { continue };
        let v = &refl.v;
        let m = n - k;
        let c0 = k + 1;
        let width = n - c0;

        // Undo the reflection on the trailing columns to recover R^(k).
        apply_reflection(&mut r_cur, v, k, c0, &mut work);
        for (a, &xa) in refl.x.iter().enumerate() {
            r_cur[(k + a, k)] = xa;
        }

        // B = R^(k)[k.., k+1..], Ȳ = R̄^(k+1)[k.., k+1..].
        let mut bt_v = vec![0.0; width];
        let mut yt_v = vec![0.0; width];
        for (a, &va) in v.iter().enumerate() {
            let b_row = &r_cur.row(k + a)[c0..];
            let y_row = &r_bar.row(k + a)[c0..];
            for j in 0..width {
                bt_v[j] += b_row[j] * va;
                yt_v[j] += y_row[j] * va;
            }
        }
        let vb = &mut v_bar[k];
        for (a, vb_a) in vb.iter_mut().enumerate() {
            let b_row = &r_cur.row(k + a)[c0..];
            let y_row = &r_bar.row(k + a)[c0..];
            *vb_a += -2.0 * (dot(y_row, &bt_v) + dot(b_row, &yt_v));
        }
        apply_reflection(&mut r_bar, v, k, c0, &mut work);

        // v = u/‖u‖ with u = x + sign·‖x‖·e₁.
        let v_dot_vb = dot(v, vb);
        let u_bar: Vec<f64> = vb
            .iter()
            .zip(v)
            .map(|(&b, &vi)| (b - vi * v_dot_vb) / refl.u_norm)
            .collect();
        let shift = refl.sign * u_bar[0] / refl.x_norm;
        for (a, (&ub, &xa)) in u_bar.iter().zip(&refl.x).enumerate() {
            r_bar[(k + a, k)] += ub + shift * xa;
        }
        count += 6 * (m * width) as u64 + 2 * m as u64;
    }

    flops.record(FlopTag::QrBackward, count);
    Ok(r_bar)
}
