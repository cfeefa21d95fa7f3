//! Learned rotations that reshape activation distributions for low-bit
//! integer quantization.
//!
//! A rotation `R` is optimized so that the rotated activations `X·R` are
//! close to uniform, which shrinks the per-token quantization range. The
//! rotation is kept orthogonal either by parameterizing it as the Q factor
//! of an unconstrained latent matrix (optimized with any flat-space
//! stepper) or by Cayley SGD on the orthogonal group. Because `R` is
//! orthogonal it can be folded into the surrounding transformer weights;
//! [`invariance`] verifies that on a toy block.

pub mod calibrator;
pub mod distributions;
pub mod error;
pub mod invariance;
pub mod io;
pub mod objectives;
pub mod optimizers;
pub mod quantizer;
pub mod tensor;

pub use calibrator::{
    calibrate, compare_objectives, token_sampling, ActivationBatch, BatchSource, CalibrationConfig,
    CalibrationReport, Dtype,
};
pub use error::{Error, Result};
pub use objectives::ObjectiveKind;
pub use optimizers::{OptimizerKind, OptimizerVariant, RotationState};
pub use quantizer::QuantConfig;
pub use tensor::{FlopCounter, FlopTag, Matrix};
