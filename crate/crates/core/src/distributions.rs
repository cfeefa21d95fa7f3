//! Laplace activation model, the CDF transform that maps it to a uniform
//! distribution, seeded synthetic activations, and moment statistics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::calibrator::{ActivationBatch, BatchSource, Dtype};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Zero-location Laplace distribution with scale `b`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LaplaceModel {
    b: f64,
}

impl LaplaceModel {
    pub fn new(b: f64) -> Result<Self> {
        if !(b.is_finite() && b > 0.0) {
            return Err(Error::invalid(format!("Laplace scale must be > 0, got {b}")));
        }
        Ok(Self { b })
    }

    pub fn mu(&self) -> f64 {
        0.0
    }

    pub fn b(&self) -> f64 {
        self.b
    }

    /// Maximum-likelihood scale: mean absolute deviation from the median.
    /// The location is still pinned to zero.
    pub fn fit(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("cannot fit a Laplace scale to no data"));
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let median = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
        };
        let b = values.iter().map(|v| (v - median).abs()).sum::<f64>() / n as f64;
        Self::new(b)
    }

    pub fn variance(&self) -> f64 {
        2.0 * self.b * self.b
    }
}

pub fn laplace_pdf(model: &LaplaceModel, x: f64) -> f64 {
    (-x.abs() / model.b).exp() / (2.0 * model.b)
}

pub fn laplace_cdf(model: &LaplaceModel, x: f64) -> f64 {
    if x <= 0.0 {
        0.5 * (x / model.b).exp()
    } else {
        1.0 - 0.5 * (-x / model.b).exp()
    }
}

/// Maps `Laplace(0, b)` onto `Uniform(−τ, τ)`: `τ·(2·F(x) − 1)`.
pub fn uniformize(model: &LaplaceModel, tau: f64, x: f64) -> f64 {
    if x <= 0.0 {
        tau * (x / model.b).exp_m1()
    } else {
        -tau * (-x / model.b).exp_m1()
    }
}

/// One inverse-CDF Laplace draw from a uniform variate on the open interval.
fn laplace_inverse_cdf(b: f64, u: f64) -> f64 {
    if u < 0.5 {
        b * (2.0 * u).ln()
    } else {
        -b * (2.0 * (1.0 - u)).ln()
    }
}

/// `t × c` i.i.d. Laplace draws via the inverse CDF, fully determined by `seed`.
pub fn sample_laplace(model: &LaplaceModel, t: usize, c: usize, seed: u64) -> Result<ActivationBatch> {
    if t == 0 || c == 0 {
        return Err(Error::invalid(format!("sample_laplace needs t, c >= 1 (got {t}x{c})")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..t * c)
        .map(|_| {
            let mut u: f64 = rng.random();
            while u == 0.0 {
                u = rng.random();
            }
            laplace_inverse_cdf(model.b, u)
        })
        .collect();
    ActivationBatch::new(
        Matrix::new(t, c, data)?,
        BatchSource::Synthetic,
        format!("laplace(b={})", model.b),
        Dtype::F64,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentSummary {
    pub mean: f64,
    /// Unbiased sample variance.
    pub variance: f64,
    /// `m₄/m₂² − 3` from central moments; `None` when the variance is zero.
    pub excess_kurtosis: Option<f64>,
    pub sample_count: usize,
}

pub fn moments_of(values: &[f64]) -> Result<MomentSummary> {
    let n = values.len();
    if n < 2 {
        return Err(Error::invalid(format!("moments need at least 2 samples, got {n}")));
    }
    let nf = n as f64;
    let mean = values.iter().sum::<f64>() / nf;
    let (mut m2, mut m4) = (0.0, 0.0);
    for &v in values {
        let d = v - mean;
        let d2 = d * d;
        m2 += d2;
        m4 += d2 * d2;
    }
    let variance = m2 / (nf - 1.0);
    let (m2, m4) = (m2 / nf, m4 / nf);
    let excess_kurtosis = (m2 > 0.0).then(|| m4 / (m2 * m2) - 3.0);
    Ok(MomentSummary {
        mean,
        variance,
        excess_kurtosis,
        sample_count: n,
    })
}

/// Moments over every value in the batch.
pub fn moments(x: &ActivationBatch) -> Result<MomentSummary> {
    moments_of(x.tokens.data())
}

/// Kolmogorov–Smirnov distance between the empirical CDF of `samples` and
/// `Uniform(lo, hi)`.
pub fn ks_statistic_uniform(samples: &[f64], lo: f64, hi: f64) -> f64 {
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    sorted
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = ((x - lo) / (hi - lo)).clamp(0.0, 1.0);
            let above = (i + 1) as f64 / n - f;
            let below = f - i as f64 / n;
            above.max(below)
        })
        .fold(0.0, f64::max)
}
