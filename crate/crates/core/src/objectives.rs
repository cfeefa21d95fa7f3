//! Calibration objectives over rotated activations `O = X·R`.
//!
//! Every objective is a mean over tokens of a per-token score, and each
//! comes with its analytic gradient `∂L/∂O`. The gradient with respect to
//! the rotation is then `Xᵀ·∂L/∂O`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quantizer::{QuantConfig, RowGrid};
use crate::tensor::Matrix;

/// Tokens with population variance at or below this are rejected by the kurtosis objective.
pub const KURTOSIS_MIN_VARIANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum ObjectiveKind {
    Whip,
    Variance,
    Kurtosis,
    QuantLoss { quant_cfg: QuantConfig },
}

impl ObjectiveKind {
    /// The four objectives in reporting order; the quantization loss uses `quant_cfg`.
    pub fn all(quant_cfg: QuantConfig) -> [ObjectiveKind; 4] {
        [
            ObjectiveKind::Whip,
            ObjectiveKind::Variance,
            ObjectiveKind::Kurtosis,
            ObjectiveKind::QuantLoss { quant_cfg },
        ]
    }

    pub fn name(&self) -> &'static str {
        match self {
            ObjectiveKind::Whip => "whip",
            ObjectiveKind::Variance => "variance",
            ObjectiveKind::Kurtosis => "kurtosis",
            ObjectiveKind::QuantLoss { .. } => "quant_loss",
        }
    }

    pub fn quant_cfg(&self) -> Option<&QuantConfig> {
        match self {
            ObjectiveKind::QuantLoss { quant_cfg } => Some(quant_cfg),
            _ => None,
        }
    }

    pub fn loss(&self, o: &Matrix) -> Result<f64> {
        match self {
            ObjectiveKind::Whip => Ok(whip_loss(o)),
            ObjectiveKind::Variance => Ok(variance_loss(o)),
            ObjectiveKind::Kurtosis => kurtosis_loss(o),
            ObjectiveKind::QuantLoss { quant_cfg } => quant_objective(o, quant_cfg),
        }
    }

    /// Loss and `∂L/∂O`.
    pub fn loss_and_grad(&self, o: &Matrix) -> Result<(f64, Matrix)> {
        match self {
            ObjectiveKind::Whip => Ok(whip_loss_and_grad(o)),
            ObjectiveKind::Variance => Ok(variance_loss_and_grad(o)),
            ObjectiveKind::Kurtosis => kurtosis_loss_and_grad(o),
            ObjectiveKind::QuantLoss { quant_cfg } => quant_objective_and_grad(o, quant_cfg),
        }
    }
}

impl fmt::Display for ObjectiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ObjectiveKind {
    type Err = Error;

    /// Parses `whip`, `variance`, `kurtosis` or `quant_loss` (4-bit); `quant-loss` is accepted too.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "whip" => Ok(ObjectiveKind::Whip),
            "variance" => Ok(ObjectiveKind::Variance),
            "kurtosis" => Ok(ObjectiveKind::Kurtosis),
            "quant_loss" | "quant-loss" => Ok(ObjectiveKind::QuantLoss {
                quant_cfg: QuantConfig::default(),
            }),
            other => Err(Error::invalid(format!("unknown objective '{other}'"))),
        }
    }
}

fn mean_over_tokens(o: &Matrix, per_token: impl Fn(&[f64]) -> f64) -> f64 {
    let t = o.rows().max(1) as f64;
    o.iter_rows().map(per_token).sum::<f64>() / t
}

/// Mean over tokens of `Σᵢ exp(−|oᵢ|)`.
pub fn whip_loss(o: &Matrix) -> f64 {
    mean_over_tokens(o, |row| row.iter().map(|v| (-v.abs()).exp()).sum())
}

pub fn whip_loss_and_grad(o: &Matrix) -> (f64, Matrix) {
    let t = o.rows().max(1) as f64;
    let mut grad = Matrix::zeros(o.rows(), o.cols());
    let mut total = 0.0;
    for (i, row) in o.iter_rows().enumerate() {
        let g = grad.row_mut(i);
        let mut acc = 0.0;
        for (gj, &v) in g.iter_mut().zip(row) {
            let e = (-v.abs()).exp();
            acc += e;
            // Subgradient 0 at the kink.
            *gj = if v > 0.0 {
                -e / t
            } else if v < 0.0 {
                e / t
            } else {
                0.0
            };
        }
        total += acc;
    }
    (total / t, grad)
}

fn row_mean(row: &[f64]) -> f64 {
    row.iter().sum::<f64>() / row.len() as f64
}

fn population_variance(row: &[f64]) -> f64 {
    let mu = row_mean(row);
    row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / row.len() as f64
}

/// Mean over tokens of the population variance.
pub fn variance_loss(o: &Matrix) -> f64 {
    mean_over_tokens(o, population_variance)
}

pub fn variance_loss_and_grad(o: &Matrix) -> (f64, Matrix) {
    let t = o.rows().max(1) as f64;
    let c = o.cols() as f64;
    let mut grad = Matrix::zeros(o.rows(), o.cols());
    for (i, row) in o.iter_rows().enumerate() {
        let mu = row_mean(row);
        for (gj, &v) in grad.row_mut(i).iter_mut().zip(row) {
            *gj = 2.0 * (v - mu) / (c * t);
        }
    }
    (variance_loss(o), grad)
}

struct CentralMoments {
    m2: f64,
    m3: f64,
    m4: f64,
    mean: f64,
}

fn central_moments(row: &[f64]) -> CentralMoments {
    let c = row.len() as f64;
    let mean = row_mean(row);
    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    for &v in row {
        let d = v - mean;
        let d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
    }
    CentralMoments {
        m2: m2 / c,
        m3: m3 / c,
        m4: m4 / c,
        mean,
    }
}

fn check_kurtosis_rows(o: &Matrix) -> Result<Vec<CentralMoments>> {
    o.iter_rows()
        .enumerate()
        .map(|(i, row)| {
            let m = central_moments(row);
            if m.m2 <= KURTOSIS_MIN_VARIANCE {
                Err(Error::invalid(format!(
                    "token {i} has near-zero variance {:e}; kurtosis undefined",
                    m.m2
                )))
            } else {
                Ok(m)
            }
        })
        .collect()
}

/// Mean over tokens of the excess kurtosis `m₄/m₂² − 3` (population moments).
pub fn kurtosis_loss(o: &Matrix) -> Result<f64> {
    let moments = check_kurtosis_rows(o)?;
    let t = o.rows().max(1) as f64;
    Ok(moments.iter().map(|m| m.m4 / (m.m2 * m.m2) - 3.0).sum::<f64>() / t)
}

pub fn kurtosis_loss_and_grad(o: &Matrix) -> Result<(f64, Matrix)> {
    let moments = check_kurtosis_rows(o)?;
    let t = o.rows().max(1) as f64;
    let c = o.cols() as f64;
    let mut grad = Matrix::zeros(o.rows(), o.cols());
    let mut total = 0.0;
    for (i, (row, m)) in o.iter_rows().zip(&moments).enumerate() {
        total += m.m4 / (m.m2 * m.m2) - 3.0;
        let inv_m2_sq = 1.0 / (m.m2 * m.m2);
        let coeff_m2 = 2.0 * m.m4 / (m.m2 * m.m2 * m.m2);
        for (gj, &v) in grad.row_mut(i).iter_mut().zip(row) {
            let d = v - m.mean;
            let dm4 = 4.0 * (d * d * d - m.m3) / c;
            let dm2 = 2.0 * d / c;
            *gj = (dm4 * inv_m2_sq - coeff_m2 * dm2) / t;
        }
    }
    Ok((total / t, grad))
}

/// Fake-quantization mean squared error of `o`.
pub fn quant_objective(o: &Matrix, cfg: &QuantConfig) -> Result<f64> {
    Ok(crate::quantizer::fake_quantize(o, cfg)?.mse)
}

/// Quantization loss with a straight-through estimator.
///
/// Rounding is treated as the identity, clamping passes no gradient, and
/// the row scale `(max − min)/qmax` and zero-point stay differentiable
/// through the row extremes. Inside the clamp range the direct term then
/// cancels, so only the row extremes (through the scale) and clamped
/// entries receive gradient.
pub fn quant_objective_and_grad(o: &Matrix, cfg: &QuantConfig) -> Result<(f64, Matrix)> {
    cfg.validate()?;
    if !o.all_finite() {
        return Err(Error::invalid("quant objective input has non-finite entries"));
    }
    let qmax = cfg.qmax();
    let n = (o.rows() * o.cols()).max(1) as f64;
    let mut grad = Matrix::zeros(o.rows(), o.cols());
    let mut sq_err = 0.0;
    for (i, row) in o.iter_rows().enumerate() {
        let grid = RowGrid::of(row, qmax);
        if grid.constant {
            continue;
        }
        let (mut argmin, mut argmax) = (0, 0);
        for (j, &v) in row.iter().enumerate() {
            if v < row[argmin] {
                argmin = j;
            }
            if v > row[argmax] {
                argmax = j;
            }
        }
        let g = grad.row_mut(i);
        let mut d_scale = 0.0;
        let mut d_min_direct = 0.0;
        for (j, &v) in row.iter().enumerate() {
            let code = grid.code(v);
            let clamped = code.clamp(0.0, qmax);
            let deq = (clamped - grid.zero) * grid.scale;
            let resid = deq - v;
            sq_err += resid * resid;
            if code == clamped {
                let u = v / grid.scale;
                d_scale += resid * (u.round_ties_even() - u);
            } else {
                d_scale += resid * ((clamped - grid.zero) - grid.min / grid.scale);
                d_min_direct += resid;
                g[j] -= 2.0 * resid / n;
            }
        }
        g[argmax] += 2.0 * d_scale / (qmax * n);
        g[argmin] += 2.0 * (d_min_direct - d_scale / qmax) / n;
    }
    Ok((sq_err / n, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(t: usize, c: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(t, c, |_, _| rng.random_range(-3.0..3.0))
    }

    /// Central differences of `f` at every entry of `o`.
    fn finite_diff(o: &Matrix, h: f64, f: impl Fn(&Matrix) -> f64) -> Matrix {
        let mut g = Matrix::zeros(o.rows(), o.cols());
        let mut p = o.clone();
        for idx in 0..o.data().len() {
            let orig = p.data()[idx];
            p.data_mut()[idx] = orig + h;
            let up = f(&p);
            p.data_mut()[idx] = orig - h;
            let down = f(&p);
            p.data_mut()[idx] = orig;
            g.data_mut()[idx] = (up - down) / (2.0 * h);
        }
        g
    }

    fn rel_err(a: &Matrix, b: &Matrix) -> f64 {
        a.sub(b).unwrap().frobenius_norm() / b.frobenius_norm().max(1e-300)
    }

    #[test]
    fn whip_worked_values() {
        assert_eq!(whip_loss(&Matrix::zeros(1, 128)), 128.0);
        let ln2 = 2f64.ln();
        let o = Matrix::new(1, 2, vec![ln2, -ln2]).unwrap();
        assert!((whip_loss(&o) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn whip_gradient_matches_fd() {
        for seed in 0..10 {
            let o = random(5, 12, seed);
            let (l, g) = whip_loss_and_grad(&o);
            assert_eq!(l, whip_loss(&o));
            let fd = finite_diff(&o, 1e-6, whip_loss);
            assert!(rel_err(&g, &fd) < 1e-6, "seed {seed}");
        }
    }

    #[test]
    fn whip_subgradient_zero_at_origin() {
        let (_, g) = whip_loss_and_grad(&Matrix::zeros(2, 3));
        assert_eq!(g, Matrix::zeros(2, 3));
    }

    #[test]
    fn variance_worked_values() {
        assert_eq!(variance_loss(&Matrix::new(1, 3, vec![2.0; 3]).unwrap()), 0.0);
        assert_eq!(variance_loss(&Matrix::new(1, 2, vec![1.0, -1.0]).unwrap()), 1.0);
    }

    #[test]
    fn variance_gradient_matches_fd() {
        for seed in 0..10 {
            let o = random(4, 9, seed);
            let (_, g) = variance_loss_and_grad(&o);
            let fd = finite_diff(&o, 1e-5, variance_loss);
            assert!(rel_err(&g, &fd) < 1e-6, "seed {seed}");
        }
    }

    #[test]
    fn kurtosis_worked_values() {
        let o = Matrix::new(1, 4, vec![1.0, -1.0, 1.0, -1.0]).unwrap();
        assert!((kurtosis_loss(&o).unwrap() + 2.0).abs() < 1e-12);
        assert!(kurtosis_loss(&Matrix::new(1, 3, vec![0.5; 3]).unwrap()).is_err());
    }

    #[test]
    fn kurtosis_of_gaussian_token_near_zero() {
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let o = Matrix::from_fn(1, 200_000, |_, _| StandardNormal.sample(&mut rng));
        assert!(kurtosis_loss(&o).unwrap().abs() < 0.05);
    }

    #[test]
    fn kurtosis_gradient_matches_fd() {
        for seed in 0..10 {
            let o = random(3, 10, seed);
            let (l, g) = kurtosis_loss_and_grad(&o).unwrap();
            assert!((l - kurtosis_loss(&o).unwrap()).abs() < 1e-14);
            let fd = finite_diff(&o, 1e-5, |p| kurtosis_loss(p).unwrap());
            assert!(rel_err(&g, &fd) < 1e-5, "seed {seed}");
        }
    }

    #[test]
    fn quant_objective_zero_on_grid() {
        let cfg = QuantConfig::new(3).unwrap();
        let row: Vec<f64> = (0..8).map(|i| -1.0 + 0.25 * i as f64).collect();
        let o = Matrix::new(1, 8, row).unwrap();
        let (l, _) = quant_objective_and_grad(&o, &cfg).unwrap();
        assert_eq!(l, 0.0);
        let x = random(3, 16, 2);
        let deq = crate::quantizer::fake_quantize(&x, &cfg).unwrap().dequantized;
        assert_eq!(quant_objective(&deq, &cfg).unwrap(), 0.0);
    }

    #[test]
    fn quant_objective_value_matches_fake_quantize() {
        let cfg = QuantConfig::new(4).unwrap();
        let o = random(6, 32, 9);
        let (l, _) = quant_objective_and_grad(&o, &cfg).unwrap();
        assert!((l - quant_objective(&o, &cfg).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn quant_ste_interior_gradient_vanishes_and_smoothed_fd_agrees() {
        // Away from the row extremes the STE gradient is exactly zero; the
        // true loss, averaged over a full rounding cell, has no trend either.
        let cfg = QuantConfig::new(4).unwrap();
        let o = random(1, 64, 4);
        let (_, g) = quant_objective_and_grad(&o, &cfg).unwrap();
        let grid = RowGrid::of(o.row(0), cfg.qmax());
        let h = 0.1 * grid.scale;
        let (lo, hi) = (grid.min, grid.max);
        let mut checked = 0;
        for j in 0..64 {
            let v = o.row(0)[j];
            if v == lo || v == hi || v - lo < 2.0 * grid.scale || hi - v < 2.0 * grid.scale {
                continue;
            }
            assert_eq!(g.row(0)[j], 0.0);
            // Smoothed central difference: average over offsets spanning one cell.
            let steps = 50;
            let mut avg = 0.0;
            let mut p = o.clone();
            for k in 0..steps {
                let base = v + grid.scale * (k as f64 / steps as f64 - 0.5);
                p.data_mut()[j] = base + h;
                let up = quant_objective(&p, &cfg).unwrap();
                p.data_mut()[j] = base - h;
                let down = quant_objective(&p, &cfg).unwrap();
                avg += (up - down) / (2.0 * h);
            }
            avg /= steps as f64;
            // One-cell average of the sawtooth slope is ~0 compared to its peak 2·scale/N.
            let peak = grid.scale / 64.0;
            assert!(avg.abs() < 0.15 * peak, "j={j} avg={avg} peak={peak}");
            checked += 1;
        }
        assert!(checked > 20);
    }

    #[test]
    fn quant_ste_scale_gradient_tracks_smoothed_trend() {
        // Moving the row maximum stretches the grid. Averaged over many
        // grid phases the loss grows like C·s²/12, and the STE gradient at
        // the maximum follows that trend.
        let cfg = QuantConfig::new(4).unwrap();
        let c = 4096;
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut row: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
        row[0] = -1.5;
        row[1] = 1.5;
        let o = Matrix::new(1, c, row).unwrap();
        let (_, g) = quant_objective_and_grad(&o, &cfg).unwrap();
        let grid = RowGrid::of(o.row(0), cfg.qmax());
        let h = 0.1 * grid.scale;
        let mut p = o.clone();
        let (mut sum, steps) = (0.0, 40);
        for k in 0..steps {
            let base = 1.5 + grid.scale * (k as f64 / steps as f64);
            p.data_mut()[1] = base + h;
            let up = quant_objective(&p, &cfg).unwrap();
            p.data_mut()[1] = base - h;
            let down = quant_objective(&p, &cfg).unwrap();
            sum += (up - down) / (2.0 * h);
        }
        let trend = sum / steps as f64;
        let analytic = g.row(0)[1];
        assert!(analytic > 0.0 && trend > 0.0);
        assert!((analytic - trend).abs() / trend < 0.35, "analytic {analytic} trend {trend}");
    }

    #[test]
    fn objective_names_round_trip() {
        for kind in ObjectiveKind::all(QuantConfig::default()) {
            assert_eq!(kind.name().parse::<ObjectiveKind>().unwrap(), kind);
        }
        assert!("kl_top".parse::<ObjectiveKind>().is_err());
    }

    proptest! {
        #[test]
        fn whip_sign_and_permutation_invariant(row in prop::collection::vec(-5.0f64..5.0, 2..24), flip in any::<u64>()) {
            let base = whip_loss(&Matrix::new(1, row.len(), row.clone()).unwrap());
            let flipped: Vec<f64> = row.iter().enumerate()
                .map(|(i, &v)| if flip >> (i % 64) & 1 == 1 { -v } else { v })
                .collect();
            let mut rev = flipped.clone();
            rev.reverse();
            let other = whip_loss(&Matrix::new(1, rev.len(), rev).unwrap());
            prop_assert!((base - other).abs() < 1e-12);
        }

        #[test]
        fn whip_decreases_moving_away_from_zero(row in prop::collection::vec(-5.0f64..5.0, 1..16), idx in any::<prop::sample::Index>(), step in 1e-3f64..1.0) {
            let j = idx.index(row.len());
            let before = whip_loss(&Matrix::new(1, row.len(), row.clone()).unwrap());
            let mut moved = row.clone();
            moved[j] += if moved[j] >= 0.0 { step } else { -step };
            let after = whip_loss(&Matrix::new(1, moved.len(), moved).unwrap());
            prop_assert!(after < before);
        }
    }
}
