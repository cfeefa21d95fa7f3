//! End-to-end rotation calibration: sample tokens, start from a random
//! Hadamard rotation, and run mini-batch optimization of the chosen
//! objective on `O = X·R`.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::ObjectiveKind;
use crate::optimizers::{self, OptimizerKind, RotationState};
use crate::quantizer::{default_outlier_threshold, fake_quantize, total_outliers, QuantConfig};
use crate::tensor::{random_hadamard, FlopCounter, FlopTag, Matrix};

/// Loss growth over `DIVERGENCE_FACTOR × max(|initial|, DIVERGENCE_FLOOR)` aborts a run.
pub const DIVERGENCE_FACTOR: f64 = 10.0;
pub const DIVERGENCE_FLOOR: f64 = 1.0;
/// Relative objective change below which a run is flagged as stalled.
pub const STALL_THRESHOLD: f64 = 0.05;
/// A returned rotation must satisfy `‖RᵀR − I‖_F` below this.
pub const FINAL_ORTHOGONALITY_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchSource {
    Synthetic,
    File,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dtype {
    F32,
    F64,
}

/// `T × C` activation tokens (one token per row) with provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationBatch {
    pub tokens: Matrix,
    pub source: BatchSource,
    pub layer_label: String,
    pub dtype_of_origin: Dtype,
}

impl ActivationBatch {
    pub fn new(tokens: Matrix, source: BatchSource, layer_label: impl Into<String>, dtype: Dtype) -> Result<Self> {
        if tokens.rows() == 0 || tokens.cols() == 0 {
            return Err(Error::invalid(format!(
                "activation batch must be at least 1x1, got {}x{}",
                tokens.rows(),
                tokens.cols()
            )));
        }
        if !tokens.all_finite() {
            return Err(Error::invalid("activation batch has non-finite entries"));
        }
        Ok(Self {
            tokens,
            source,
            layer_label: layer_label.into(),
            dtype_of_origin: dtype,
        })
    }

    pub fn synthetic(tokens: Matrix) -> Result<Self> {
        Self::new(tokens, BatchSource::Synthetic, "synthetic", Dtype::F64)
    }

    pub fn num_tokens(&self) -> usize {
        self.tokens.rows()
    }

    pub fn channels(&self) -> usize {
        self.tokens.cols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutlierThreshold {
    /// 4 × RMS of the unrotated batch.
    Auto,
    Fixed(f64),
}

impl OutlierThreshold {
    pub fn resolve(&self, x: &Matrix) -> f64 {
        match *self {
            OutlierThreshold::Auto => default_outlier_threshold(x),
            OutlierThreshold::Fixed(t) => t,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationConfig {
    pub objective: ObjectiveKind,
    pub optimizer: OptimizerKind,
    /// Optional cap on optimizer steps; `None` runs every epoch to completion.
    pub max_iters: Option<usize>,
    pub token_sample_ratio: f64,
    pub seed: u64,
    pub batch_size: usize,
    pub epochs: usize,
    pub tau_outlier: OutlierThreshold,
    /// Quantizer used for the before/after error metrics.
    pub eval_quant: QuantConfig,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            objective: ObjectiveKind::Whip,
            optimizer: OptimizerKind::default(),
            max_iters: None,
            token_sample_ratio: 0.10,
            seed: 0,
            batch_size: 64,
            epochs: 10,
            tau_outlier: OutlierThreshold::Auto,
            eval_quant: QuantConfig::default(),
        }
    }
}

impl CalibrationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be ≥ 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be ≥ 1"));
        }
        if self.max_iters == Some(0) {
            return Err(Error::invalid("max iterations must be ≥ 1"));
        }
        if !(self.token_sample_ratio > 0.0 && self.token_sample_ratio <= 1.0) {
            return Err(Error::invalid(format!(
                "token sample ratio must be in (0, 1], got {}",
                self.token_sample_ratio
            )));
        }
        if let OutlierThreshold::Fixed(t) = self.tau_outlier {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::invalid(format!("outlier threshold must be > 0, got {t}")));
            }
        }
        if let Some(q) = self.objective.quant_cfg() {
            q.validate()?;
        }
        self.eval_quant.validate()?;
        self.optimizer.validate()
    }
}

// JSON has no NaN or infinity; serde_json writes them as null. Partial
// reports from diverged runs carry such values, so null reads back as NaN.
fn nan_if_null<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
}

fn nan_if_null_seq<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Vec<f64>, D::Error> {
    let v = Vec::<Option<f64>>::deserialize(d)?;
    Ok(v.into_iter().map(|x| x.unwrap_or(f64::NAN)).collect())
}

/// Outlier count and quantization error of the full batch under one rotation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RotationMetrics {
    pub outliers: u64,
    #[serde(deserialize_with = "nan_if_null")]
    pub quant_mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    /// Mini-batch loss evaluated before each optimizer step.
    #[serde(deserialize_with = "nan_if_null_seq")]
    pub loss_trace: Vec<f64>,
    /// Objective on the whole sampled calibration set at the initial and final rotation.
    #[serde(deserialize_with = "nan_if_null")]
    pub objective_initial: f64,
    #[serde(deserialize_with = "nan_if_null")]
    pub objective_final: f64,
    #[serde(deserialize_with = "nan_if_null")]
    pub relative_loss_change: f64,
    /// Set when `relative_loss_change` is below the stall threshold.
    pub loss_stalled: bool,
    pub tau_outlier: f64,
    /// Metrics without rotation, at the initial random-Hadamard rotation, and after calibration.
    pub identity: RotationMetrics,
    pub before: RotationMetrics,
    pub after: RotationMetrics,
    pub flops: BTreeMap<String, u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_time_seconds: Option<f64>,
    #[serde(deserialize_with = "nan_if_null")]
    pub final_orthogonality_error: f64,
    pub reorthogonalizations: u64,
    pub sampled_tokens: usize,
    pub config_echo: CalibrationConfig,
}

impl CalibrationReport {
    pub fn steps(&self) -> usize {
        self.loss_trace.len()
    }
}

/// Number of tokens kept by [`token_sampling`]: `⌈ratio·T⌉`, at least one.
pub fn sampled_count(t: usize, ratio: f64) -> usize {
    // Guard against 0.1·30 = 3.0000000000000004 rounding up to 4.
    let exact = ratio * t as f64;
    let k = (exact - exact * 1e-12).ceil() as usize;
    k.clamp(1, t)
}

/// Uniform subset of `⌈ratio·T⌉` distinct tokens, kept in their original order.
pub fn token_sampling(x: &ActivationBatch, ratio: f64, seed: u64) -> Result<ActivationBatch> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::invalid(format!("token sample ratio must be in (0, 1], got {ratio}")));
    }
    let t = x.num_tokens();
    let k = sampled_count(t, ratio);
    if k == t {
        return Ok(x.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = index::sample(&mut rng, t, k).into_vec();
    picked.sort_unstable();
    Ok(ActivationBatch {
        tokens: x.tokens.select_rows(&picked),
        source: x.source,
        layer_label: x.layer_label.clone(),
        dtype_of_origin: x.dtype_of_origin,
    })
}

fn metrics(x: &Matrix, r: Option<&Matrix>, tau: f64, q: &QuantConfig) -> Result<RotationMetrics> {
    let rotated;
    let o = match r {
        Some(r) => {
            rotated = x.matmul(r)?;
            &rotated
        }
        None => x,
    };
    Ok(RotationMetrics {
        outliers: total_outliers(o, tau)?,
        quant_mse: fake_quantize(o, q)?.mse,
    })
}

// Keeps the shuffling stream apart from the token-sampling stream.
const SHUFFLE_STREAM: u64 = 0x5ee_d0fb_a7c4;

/// Runs the calibration loop and returns the learned rotation with its report.
pub fn calibrate(x: &ActivationBatch, cfg: &CalibrationConfig) -> Result<(Matrix, CalibrationReport)> {
    cfg.validate()?;
    let c = x.channels();
    if !c.is_power_of_two() {
        return Err(Error::invalid(format!(
            "channel count {c} must be a power of two for Hadamard initialization"
        )));
    }
    let start = Instant::now();
    let flops = FlopCounter::new();

    let sampled = token_sampling(x, cfg.token_sample_ratio, cfg.seed)?;
    let xs = &sampled.tokens;
    let r0 = random_hadamard(c, cfg.seed)?;
    let mut state = RotationState::for_optimizer(r0.clone(), &cfg.optimizer, &flops)?;

    let tau = cfg.tau_outlier.resolve(&x.tokens);
    let objective_initial = cfg.objective.loss(&xs.matmul(&r0)?)?;

    let mut order: Vec<usize> = (0..xs.rows()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ SHUFFLE_STREAM);
    let mut trace = Vec::new();
    let mut first_loss = None;
    let max_iters = cfg.max_iters.unwrap_or(usize::MAX);

    let partial = |trace: &[f64], state: &RotationState, flops: &FlopCounter| CalibrationReport {
        loss_trace: trace.to_vec(),
        objective_initial,
        objective_final: f64::NAN,
        relative_loss_change: f64::NAN,
        loss_stalled: false,
        tau_outlier: tau,
        identity: RotationMetrics { outliers: 0, quant_mse: f64::NAN },
        before: RotationMetrics { outliers: 0, quant_mse: f64::NAN },
        after: RotationMetrics { outliers: 0, quant_mse: f64::NAN },
        flops: flops.snapshot(),
        wall_time_seconds: Some(start.elapsed().as_secs_f64()),
        final_orthogonality_error: state.r().orthogonality_error(),
        reorthogonalizations: state.reorthogonalizations(),
        sampled_tokens: xs.rows(),
        config_echo: *cfg,
    };

    'epochs: for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            if trace.len() >= max_iters {
                break 'epochs;
            }
            let xb = xs.select_rows(chunk);
            let o = xb.matmul_counted(state.r(), &flops, FlopTag::Matmul)?;
            let (loss, grad_o) = cfg.objective.loss_and_grad(&o)?;
            let reference = *first_loss.get_or_insert(loss);
            let diverged = !loss.is_finite()
                || loss.abs() > DIVERGENCE_FACTOR * f64::abs(reference).max(DIVERGENCE_FLOOR);
            trace.push(loss);
            if diverged {
                return Err(Error::Divergence {
                    step: trace.len() - 1,
                    loss,
                    partial: Box::new(partial(&trace, &state, &flops)),
                });
            }
            let grad_r = xb.t_matmul(&grad_o)?;
            flops.record(FlopTag::Matmul, (xb.rows() * c * c) as u64);
            match optimizers::step(&mut state, &grad_r, &cfg.optimizer, &flops) {
                Err(Error::NonFiniteGradient { .. } | Error::NonFiniteState { .. }) => {
                    return Err(Error::Divergence {
                        step: trace.len() - 1,
                        loss,
                        partial: Box::new(partial(&trace, &state, &flops)),
                    });
                }
                other => other?,
            }
        }
    }

    let r = state.r().clone();
    let final_orthogonality_error = r.orthogonality_error();
    if final_orthogonality_error >= FINAL_ORTHOGONALITY_TOL {
        return Err(Error::invalid(format!(
            "calibrated rotation lost orthogonality ({final_orthogonality_error:e})"
        )));
    }
    let objective_final = cfg.objective.loss(&xs.matmul(&r)?)?;
    if !objective_final.is_finite() {
        return Err(Error::Divergence {
            step: trace.len(),
            loss: objective_final,
            partial: Box::new(partial(&trace, &state, &flops)),
        });
    }
    let relative_loss_change = if objective_initial != 0.0 {
        (objective_final - objective_initial).abs() / objective_initial.abs()
    } else {
        (objective_final - objective_initial).abs()
    };

    let report = CalibrationReport {
        loss_trace: trace,
        objective_initial,
        objective_final,
        relative_loss_change,
        loss_stalled: relative_loss_change < STALL_THRESHOLD,
        tau_outlier: tau,
        identity: metrics(&x.tokens, None, tau, &cfg.eval_quant)?,
        before: metrics(&x.tokens, Some(&r0), tau, &cfg.eval_quant)?,
        after: metrics(&x.tokens, Some(&r), tau, &cfg.eval_quant)?,
        flops: flops.snapshot(),
        wall_time_seconds: Some(start.elapsed().as_secs_f64()),
        final_orthogonality_error,
        reorthogonalizations: state.reorthogonalizations(),
        sampled_tokens: xs.rows(),
        config_echo: *cfg,
    };
    Ok((r, report))
}

/// Calibrates once per objective with otherwise identical settings.
///
/// Runs execute concurrently; results come back in [`ObjectiveKind::all`]
/// order and a failing objective does not abort the others.
pub fn compare_objectives(
    x: &ActivationBatch,
    cfg_base: &CalibrationConfig,
) -> Result<Vec<(ObjectiveKind, Result<CalibrationReport>)>> {
    cfg_base.validate()?;
    let quant_cfg = cfg_base.objective.quant_cfg().copied().unwrap_or(cfg_base.eval_quant);
    Ok(ObjectiveKind::all(quant_cfg)
        .into_par_iter()
        .map(|objective| {
            let cfg = CalibrationConfig { objective, ..*cfg_base };
            (objective, calibrate(x, &cfg).map(|(_, report)| report))
        })
        .collect())
}
