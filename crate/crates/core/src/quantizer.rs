//! Per-token asymmetric fake quantization, outlier counting, and the
//! quantization error of a rotation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantScheme {
    PerTokenAsymmetric,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantConfig {
    pub bits: u8,
    pub scheme: QuantScheme,
}

impl QuantConfig {
    pub fn new(bits: u8) -> Result<Self> {
        let cfg = Self {
            bits,
            scheme: QuantScheme::PerTokenAsymmetric,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=8).contains(&self.bits) {
            return Err(Error::invalid(format!("bits must be in [2, 8], got {}", self.bits)));
        }
        Ok(())
    }

    /// Largest integer code, `2^bits − 1`.
    pub fn qmax(&self) -> f64 {
        ((1u32 << self.bits) - 1) as f64
    }
}

impl Default for QuantConfig {
    fn default() -> Self {
        Self {
            bits: 4,
            scheme: QuantScheme::PerTokenAsymmetric,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantResult {
    pub dequantized: Matrix,
    pub per_token_scale: Vec<f64>,
    pub per_token_zero: Vec<i64>,
    pub mse: f64,
}

/// Low mantissa bits cleared from every scale.
const SCALE_DROPPED_BITS: u32 = 9;

/// Truncates `s` to a 44-bit mantissa. With at most 8-bit codes every
/// dequantized value `(k − z)·s` is then exact in f64, so quantizing a
/// dequantized row recovers the same scale and returns it bit for bit.
fn snap_scale(s: f64) -> f64 {
    if !s.is_normal() {
        return s;
    }
    f64::from_bits(s.to_bits() & !((1u64 << SCALE_DROPPED_BITS) - 1))
}

/// Quantization grid of one token row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct RowGrid {
    pub min: f64,
    pub max: f64,
    pub scale: f64,
    pub zero: f64,
    /// Constant rows pass through untouched.
    pub constant: bool,
}

impl RowGrid {
    pub fn of(row: &[f64], qmax: f64) -> Self {
        let (min, max) = row
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        if max <= min {
            return Self {
                min,
                max,
                scale: 1.0,
                zero: 0.0,
                constant: true,
            };
        }
        let scale = snap_scale((max - min) / qmax);
        let zero = (-min / scale).round_ties_even();
        Self {
            min,
            max,
            scale,
            zero,
            constant: false,
        }
    }

    /// Integer code before clamping.
    #[inline]
    pub fn code(&self, x: f64) -> f64 {
        (x / self.scale).round_ties_even() + self.zero
    }

    #[inline]
    pub fn dequantize(&self, x: f64, qmax: f64) -> f64 {
        if self.constant {
            return x;
        }
        (self.code(x).clamp(0.0, qmax) - self.zero) * self.scale
    }
}

/// Quantize-then-dequantize every token row with its own min/max grid.
pub fn fake_quantize(x: &Matrix, cfg: &QuantConfig) -> Result<QuantResult> {
    cfg.validate()?;
    if !x.all_finite() {
        return Err(Error::invalid("fake_quantize input has non-finite entries"));
    }
    let qmax = cfg.qmax();
    let mut dequantized = Matrix::zeros(x.rows(), x.cols());
    let mut per_token_scale = Vec::with_capacity(x.rows());
    let mut per_token_zero = Vec::with_capacity(x.rows());
    let mut sq_err = 0.0;
    for (i, row) in x.iter_rows().enumerate() {
        let grid = RowGrid::of(row, qmax);
        per_token_scale.push(grid.scale);
        per_token_zero.push(grid.zero as i64);
        let out = dequantized.row_mut(i);
        let mut row_err = 0.0;
        for (o, &v) in out.iter_mut().zip(row) {
            *o = grid.dequantize(v, qmax);
            let d = *o - v;
            row_err += d * d;
        }
        sq_err += row_err;
    }
    let n = (x.rows() * x.cols()).max(1) as f64;
    Ok(QuantResult {
        dequantized,
        per_token_scale,
        per_token_zero,
        mse: sq_err / n,
    })
}

/// Per-token number of entries with `|x| > tau`.
pub fn count_outliers(x: &Matrix, tau: f64) -> Result<Vec<usize>> {
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("outlier threshold must be > 0, got {tau}")));
    }
    Ok(x.iter_rows().map(|row| row.iter().filter(|v| v.abs() > tau).count()).collect())
}

pub fn total_outliers(x: &Matrix, tau: f64) -> Result<u64> {
    Ok(count_outliers(x, tau)?.iter().map(|&c| c as u64).sum())
}

/// Default outlier threshold: 4 × RMS of the batch.
pub fn default_outlier_threshold(x: &Matrix) -> f64 {
    let n = x.data().len().max(1) as f64;
    4.0 * (x.data().iter().map(|v| v * v).sum::<f64>() / n).sqrt()
}

/// Mean squared error of `fake_quantize(x·r)`, measured in the rotated space.
pub fn quant_error_of_rotation(x: &Matrix, r: &Matrix, cfg: &QuantConfig) -> Result<f64> {
    if !r.is_square() || r.rows() != x.cols() {
        return Err(Error::dim(
            "quant_error_of_rotation",
            format!("{n}x{n} rotation", n = x.cols()),
            format!("{}x{}", r.rows(), r.cols()),
        ));
    }
    let err = r.orthogonality_error();
    if err > 1e-8 {
        return Err(Error::invalid(format!("rotation is not orthogonal (‖RᵀR − I‖_F = {err:e})")));
    }
    Ok(fake_quantize(&x.matmul(r)?, cfg)?.mse)
}
