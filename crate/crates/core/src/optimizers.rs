//! Optimizers that keep the rotation orthogonal.
//!
//! QR-Orth steppers update an unconstrained latent matrix `Z` with an
//! ordinary flat-space rule and read the rotation off as the Q factor of
//! `Z`, so orthogonality holds by construction. Cayley SGD updates the
//! rotation directly with a momentum step retracted by an iterated Cayley
//! transform.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{householder_qr, qr_backward, FlopCounter, FlopTag, Matrix, QrFactors};

/// Drift `‖RᵀR − I‖_F` beyond which a Cayley state is re-orthogonalized.
pub const CAYLEY_DRIFT_LIMIT: f64 = 1e-3;
/// Cayley states are re-orthogonalized unconditionally this often.
pub const CAYLEY_REORTH_PERIOD: u64 = 500;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerVariant {
    QrSgd,
    QrMomentumSgd,
    QrAdam,
    CayleySgd,
}

impl OptimizerVariant {
    pub fn name(self) -> &'static str {
        match self {
            OptimizerVariant::QrSgd => "qr_sgd",
            OptimizerVariant::QrMomentumSgd => "qr_momentum_sgd",
            OptimizerVariant::QrAdam => "qr_adam",
            OptimizerVariant::CayleySgd => "cayley_sgd",
        }
    }

    pub fn is_qr(self) -> bool {
        !matches!(self, OptimizerVariant::CayleySgd)
    }
}

impl fmt::Display for OptimizerVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OptimizerVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "qr_sgd" => Ok(OptimizerVariant::QrSgd),
            "qr_momentum_sgd" => Ok(OptimizerVariant::QrMomentumSgd),
            "qr_adam" => Ok(OptimizerVariant::QrAdam),
            "cayley_sgd" => Ok(OptimizerVariant::CayleySgd),
            _ => Err(Error::invalid(format!("unknown optimizer '{s}'"))),
        }
    }
}

/// Cayley retraction settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CayleyParams {
    /// Step-size guard: `α ≤ 2q/(‖W‖_F + eps)`.
    pub q: f64,
    /// Fixed-point iterations of the Cayley transform.
    pub s: usize,
    pub eps: f64,
}

impl Default for CayleyParams {
    fn default() -> Self {
        Self { q: 0.5, s: 2, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerKind {
    pub variant: OptimizerVariant,
    pub lr: f64,
    pub momentum_beta: f64,
    pub cayley: CayleyParams,
}

impl OptimizerKind {
    pub fn new(variant: OptimizerVariant, lr: f64) -> Self {
        let momentum_beta = match variant {
            OptimizerVariant::QrSgd => 0.0,
            _ => 0.9,
        };
        Self {
            variant,
            lr,
            momentum_beta,
            cayley: CayleyParams::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::invalid(format!("learning rate must be > 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum_beta) {
            return Err(Error::invalid(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum_beta
            )));
        }
        let c = &self.cayley;
        if !(c.q > 0.0 && c.eps > 0.0 && c.s >= 1) {
            return Err(Error::invalid("cayley parameters need q > 0, eps > 0, s >= 1"));
        }
        Ok(())
    }
}

impl Default for OptimizerKind {
    fn default() -> Self {
        Self::new(OptimizerVariant::QrSgd, 1e-3)
    }
}

/// Rotation being optimized plus the bookkeeping of its stepper.
#[derive(Debug, Clone)]
pub struct RotationState {
    z: Option<Matrix>,
    factors: Option<QrFactors>,
    r: Matrix,
    momentum: Option<Matrix>,
    adam_moments: Option<(Matrix, Matrix)>,
    step_count: u64,
    reorthogonalizations: u64,
}

impl RotationState {
    /// QR-Orth state with latent `z0`; the rotation is the Q factor of `z0`.
    pub fn qr_orth(z0: Matrix, flops: &FlopCounter) -> Result<Self> {
        let factors = householder_qr(&z0, flops)?;
        Ok(Self {
            r: factors.q.clone(),
            z: Some(z0),
            factors: Some(factors),
            momentum: None,
            adam_moments: None,
            step_count: 0,
            reorthogonalizations: 0,
        })
    }

    /// Cayley state starting at the orthogonal `r0`.
    pub fn cayley(r0: Matrix) -> Result<Self> {
        if !r0.is_square() {
            return Err(Error::dim("RotationState::cayley", "square", format!("{}x{}", r0.rows(), r0.cols())));
        }
        let err = r0.orthogonality_error();
        if err > 1e-6 {
            return Err(Error::invalid(format!("Cayley start is not orthogonal (drift {err:e})")));
        }
        Ok(Self {
            z: None,
            factors: None,
            r: r0,
            momentum: None,
            adam_moments: None,
            step_count: 0,
            reorthogonalizations: 0,
        })
    }

    /// Initial state for `kind` from an orthogonal starting matrix.
    pub fn for_optimizer(init: Matrix, kind: &OptimizerKind, flops: &FlopCounter) -> Result<Self> {
        if kind.variant.is_qr() {
            Self::qr_orth(init, flops)
        } else {
            Self::cayley(init)
        }
    }

    pub fn r(&self) -> &Matrix {
        &self.r
    }

    pub fn into_r(self) -> Matrix {
        self.r
    }

    pub fn z(&self) -> Option<&Matrix> {
        self.z.as_ref()
    }

    pub fn momentum(&self) -> Option<&Matrix> {
        self.momentum.as_ref()
    }

    pub fn adam_moments(&self) -> Option<(&Matrix, &Matrix)> {
        self.adam_moments.as_ref().map(|(m, v)| (m, v))
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn reorthogonalizations(&self) -> u64 {
        self.reorthogonalizations
    }

    pub fn dim(&self) -> usize {
        self.r.rows()
    }

    fn check_grad(&self, grad_r: &Matrix) -> Result<()> {
        if grad_r.shape() != self.r.shape() {
            return Err(Error::dim(
                "optimizer step",
                format!("{}x{}", self.r.rows(), self.r.cols()),
                format!("{}x{}", grad_r.rows(), grad_r.cols()),
            ));
        }
        if !grad_r.all_finite() {
            return Err(Error::NonFiniteGradient { step: self.step_count });
        }
        Ok(())
    }
}

/// Dispatches to [`qr_orth_step`] or [`cayley_sgd_step`] by variant.
pub fn step(state: &mut RotationState, grad_r: &Matrix, kind: &OptimizerKind, flops: &FlopCounter) -> Result<()> {
    if kind.variant.is_qr() {
        qr_orth_step(state, grad_r, kind, flops)
    } else {
        cayley_sgd_step(state, grad_r, kind, flops)
    }
}

/// One QR-Orth update: back-propagate `∂L/∂R` to the latent, step the latent,
/// and re-derive the rotation from its QR factorization.
pub fn qr_orth_step(state: &mut RotationState, grad_r: &Matrix, kind: &OptimizerKind, flops: &FlopCounter) -> Result<()> {
    if !kind.variant.is_qr() {
        return Err(Error::invalid(format!("{} is not a QR-Orth optimizer", kind.variant)));
    }
    state.check_grad(grad_r)?;
    let (Some(z), Some(factors)) = (state.z.as_mut(), state.factors.as_ref()) else {
        return Err(Error::invalid("state has no latent matrix; it was built for Cayley SGD"));
    };
    let grad_z = qr_backward(factors, grad_r, flops)?;
    if !grad_z.all_finite() {
        return Err(Error::NonFiniteGradient { step: state.step_count });
    }

    let lr = kind.lr;
    match kind.variant {
        OptimizerVariant::QrSgd => z.axpy(-lr, &grad_z)?,
        OptimizerVariant::QrMomentumSgd => {
            let m = state
                .momentum
                .get_or_insert_with(|| Matrix::zeros(grad_z.rows(), grad_z.cols()));
            for (mi, &g) in m.data_mut().iter_mut().zip(grad_z.data()) {
                *mi = kind.momentum_beta * *mi + g;
            }
            z.axpy(-lr, m)?;
        }
        OptimizerVariant::QrAdam => {
            let (m, v) = state.adam_moments.get_or_insert_with(|| {
                (
                    Matrix::zeros(grad_z.rows(), grad_z.cols()),
                    Matrix::zeros(grad_z.rows(), grad_z.cols()),
                )
            });
            let t = (state.step_count + 1) as i32;
            let c1 = 1.0 - ADAM_BETA1.powi(t);
            let c2 = 1.0 - ADAM_BETA2.powi(t);
            let zd = z.data_mut();
            for (((zi, mi), vi), &g) in zd
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(grad_z.data())
            {
                *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * g;
                *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * g * g;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *zi -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
        OptimizerVariant::CayleySgd => unreachable!("rejected above"),
    }

    if !z.all_finite() {
        return Err(Error::NonFiniteState { step: state.step_count });
    }
    let factors = householder_qr(z, flops)?;
    if !factors.q.all_finite() {
        return Err(Error::NonFiniteState { step: state.step_count });
    }
    state.r = factors.q.clone();
    state.factors = Some(factors);
    state.step_count += 1;
    Ok(())
}

/// One Cayley SGD step with momentum.
///
/// ```text
/// M ← βM − G
/// Ŵ ← M Xᵀ − ½ X (Xᵀ M Xᵀ)
/// W ← Ŵ − Ŵᵀ
/// M ← W X
/// α ← min(lr, 2q / (‖W‖_F + ε))
/// Y ← X + α M;  repeat s times: Y ← X + (α/2) W (X + Y)
/// X ← Y
/// ```
pub fn cayley_sgd_step(
    state: &mut RotationState,
    grad_r: &Matrix,
    kind: &OptimizerKind,
    flops: &FlopCounter,
) -> Result<()> {
    if kind.variant != OptimizerVariant::CayleySgd {
        return Err(Error::invalid(format!("{} is not Cayley SGD", kind.variant)));
    }
    state.check_grad(grad_r)?;
    let x = &state.r;
    let n = x.rows();
    let params = kind.cayley;

    let m = state.momentum.get_or_insert_with(|| Matrix::zeros(n, n));
    for (mi, &g) in m.data_mut().iter_mut().zip(grad_r.data()) {
        *mi = kind.momentum_beta * *mi - g;
    }

    let xt = x.transpose();
    let m_xt = m.matmul_counted(&xt, flops, FlopTag::Cayley)?;
    let inner = x.t_matmul(&m_xt)?;
    flops.record(FlopTag::Cayley, (n * n * n) as u64);
    let proj = x.matmul_counted(&inner, flops, FlopTag::Cayley)?;
    let mut w_hat = m_xt;
    w_hat.axpy(-0.5, &proj)?;
    let w = w_hat.sub(&w_hat.transpose())?;

    *m = w.matmul_counted(x, flops, FlopTag::Cayley)?;
    let alpha = kind.lr.min(2.0 * params.q / (w.frobenius_norm() + params.eps));

    let mut y = x.clone();
    y.axpy(alpha, m)?;
    for _ in 0..params.s {
        let sum = x.add(&y)?;
        let mut next = x.clone();
        next.axpy(alpha / 2.0, &w.matmul_counted(&sum, flops, FlopTag::Cayley)?)?;
        y = next;
    }

    state.step_count += 1;
    if !y.all_finite() {
        return Err(Error::NonFiniteState { step: state.step_count - 1 });
    }
    let drift = y.orthogonality_error();
    if drift > CAYLEY_DRIFT_LIMIT || state.step_count.is_multiple_of(CAYLEY_REORTH_PERIOD) {
        if drift > CAYLEY_DRIFT_LIMIT {
            log::warn!(
                "cayley drift {drift:e} at step {} exceeds {CAYLEY_DRIFT_LIMIT:e}; re-orthogonalizing",
                state.step_count
            );
        } else {
            log::info!("periodic re-orthogonalization at step {}", state.step_count);
        }
        y = householder_qr(&y, &FlopCounter::new())?.q;
        state.reorthogonalizations += 1;
    }
    state.r = y;
    Ok(())
}

/// Per-step multiply-add counts of one QR-Orth step and one Cayley step at size `n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlopRatioReport {
    pub n: usize,
    pub qr_flops: u64,
    pub cayley_extra_flops: u64,
    pub ratio: f64,
}

/// Runs one step of each optimizer on a fixed synthetic gradient and reads
/// the counters: QR factorization work against the extra Cayley work.
pub fn flop_ratio_report(n: usize) -> Result<FlopRatioReport> {
    if n < 32 {
        return Err(Error::invalid(format!("flop ratio needs n >= 32, got {n}")));
    }
    // Non-power-of-two sizes start from the identity.
    let init = if n.is_power_of_two() {
        crate::tensor::random_hadamard(n, 0)?
    } else {
        Matrix::identity(n)
    };
    let grad = Matrix::from_fn(n, n, |i, j| (((i * 31 + j * 17) % 13) as f64 - 6.0) * 1e-3);

    let qr_counter = FlopCounter::new();
    let qr_kind = OptimizerKind::new(OptimizerVariant::QrSgd, 1e-3);
    let mut qr_state = RotationState::qr_orth(init.clone(), &FlopCounter::new())?;
    qr_orth_step(&mut qr_state, &grad, &qr_kind, &qr_counter)?;

    let cayley_counter = FlopCounter::new();
    let cayley_kind = OptimizerKind::new(OptimizerVariant::CayleySgd, 1e-3);
    let mut cayley_state = RotationState::cayley(init)?;
    cayley_sgd_step(&mut cayley_state, &grad, &cayley_kind, &cayley_counter)?;

    let qr_flops = qr_counter.get(FlopTag::Qr);
    let cayley_extra_flops = cayley_counter.get(FlopTag::Cayley);
    Ok(FlopRatioReport {
        n,
        qr_flops,
        cayley_extra_flops,
        ratio: cayley_extra_flops as f64 / qr_flops as f64,
    })
}
