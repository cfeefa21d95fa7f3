//! Dense linear algebra: matrices, Householder QR and its backward pass,
//! Hadamard construction, and multiply-add accounting.

mod flops;
mod hadamard;
mod matrix;
mod qr;

pub use flops::{FlopCounter, FlopTag};
pub use hadamard::{fwht, hadamard_with_signs, random_hadamard, random_signs, walsh_hadamard};
pub use matrix::{dot, norm2, Matrix};
pub use qr::{householder_qr, qr_backward, QrFactors, Reflector};

use crate::error::{Error, Result};

/// Euclidean norm of `x` before and after applying the rotation `r`.
pub fn norm_preservation_check(r: &Matrix, x: &[f64]) -> Result<(f64, f64)> {
    if !r.is_square() || r.cols() != x.len() {
        return Err(Error::dim(
            "norm_preservation_check",
            format!("{n}x{n} rotation", n = x.len()),
            format!("{}x{}", r.rows(), r.cols()),
        ));
    }
    Ok((norm2(x), norm2(&r.matvec(x)?)))
}
