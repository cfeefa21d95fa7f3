//! Finite-difference helpers shared by the gradient tests and the acceptance run.
#![allow(dead_code)]

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rotocal::tensor::{householder_qr, FlopCounter, Matrix};

pub fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

/// Central differences of `f` at every entry of `a`.
pub fn fd_grad(a: &Matrix, h: f64, f: impl Fn(&Matrix) -> f64) -> Matrix {
    let mut g = Matrix::zeros(a.rows(), a.cols());
    let mut probe = a.clone();
    for i in 0..a.rows() {
        for j in 0..a.cols() {
            let orig = probe[(i, j)];
            probe[(i, j)] = orig + h;
            let up = f(&probe);
            probe[(i, j)] = orig - h;
            let down = f(&probe);
            probe[(i, j)] = orig;
            g[(i, j)] = (up - down) / (2.0 * h);
        }
    }
    g
}

/// `max|a − b| / max|b|`.
pub fn rel_err(analytic: &Matrix, numeric: &Matrix) -> f64 {
    analytic.max_abs_diff(numeric).unwrap() / numeric.max_abs().max(1e-300)
}

pub fn q_of(a: &Matrix) -> Matrix {
    householder_qr(a, &FlopCounter::new()).unwrap().q
}

pub fn frob_inner(a: &Matrix, b: &Matrix) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}
