//! Walsh–Hadamard matrices and their randomized, orthonormal variant.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::matrix::Matrix;
use crate::error::{Error, Result};

/// Unnormalized Sylvester–Hadamard matrix, `H[i][j] = (−1)^popcount(i & j)`.
pub fn walsh_hadamard(n: usize) -> Result<Matrix> {
    if n == 0 || !n.is_power_of_two() {
        return Err(Error::UnsupportedDimension(n));
    }
    Ok(Matrix::from_fn(n, n, |i, j| {
        if (i & j).count_ones() % 2 == 0 {
            1.0
        } else {
            -1.0
        }
    }))
}

/// Random sign vector `D` used by [`random_hadamard`].
pub fn random_signs(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
        .collect()
}

/// `(1/√n)·H_n·diag(d)` for an explicit sign vector.
pub fn hadamard_with_signs(signs: &[f64]) -> Result<Matrix> {
    let n = signs.len();
    let h = walsh_hadamard(n)?;
    let s = 1.0 / (n as f64).sqrt();
    Ok(Matrix::from_fn(n, n, |i, j| h[(i, j)] * signs[j] * s))
}

/// Orthogonal `(1/√n)·H_n·D` with `D = diag(±1)` drawn from `seed`.
pub fn random_hadamard(n: usize, seed: u64) -> Result<Matrix> {
    if n == 0 || !n.is_power_of_two() {
        return Err(Error::UnsupportedDimension(n));
    }
    hadamard_with_signs(&random_signs(n, seed))
}

/// In-place unnormalized fast Walsh–Hadamard transform; `x ← H_n x`.
pub fn fwht(x: &mut [f64]) -> Result<()> {
    let n = x.len();
    if n == 0 || !n.is_power_of_two() {
        return Err(Error::UnsupportedDimension(n));
    }
    let mut h = 1;
    while h < n {
        for block in x.chunks_exact_mut(2 * h) {
            let (lo, hi) = block.split_at_mut(h);
            for (a, b) in lo.iter_mut().zip(hi.iter_mut()) {
                let (s, d) = (*a + *b, *a - *b);
                *a = s;
                *b = d;
            }
        }
        h *= 2;
    }
    Ok(())
}
