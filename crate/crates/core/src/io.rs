//! Binary tensor files and JSON calibration reports.
//!
//! Tensor file layout (little-endian):
//!
//! ```text
//! offset  size  field
//! 0       8     magic "ROTOCAL1"
//! 8       1     dtype (0 = f32, 1 = f64)
//! 9       1     ndim (always 2)
//! 10      8     rows (u64)
//! 18      8     cols (u64)
//! 26      …     row-major payload
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::calibrator::{ActivationBatch, BatchSource, CalibrationReport, Dtype};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const MAGIC: &[u8; 8] = b"ROTOCAL1";
pub const HEADER_LEN: usize = 26;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

impl Dtype {
    fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::F64),
            other => Err(Error::Format(format!("unknown dtype code {other}"))),
        }
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// Serializes `m` in the tensor file layout. `F32` narrows every value.
pub fn encode_tensor(m: &Matrix, dtype: Dtype) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + m.data().len() * dtype.size());
    out.extend_from_slice(MAGIC);
    out.push(dtype.code());
    out.push(2);
    out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
    match dtype {
        Dtype::F32 => m.data().iter().for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
        Dtype::F64 => m.data().iter().for_each(|&v| out.extend_from_slice(&v.to_le_bytes())),
    }
    out
}

pub fn decode_tensor(bytes: &[u8]) -> Result<(Matrix, Dtype)> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format(format!("file too short for header ({} bytes)", bytes.len())));
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::Format("bad magic, expected ROTOCAL1".into()));
    }
    let dtype = Dtype::from_code(bytes[8])?;
    if bytes[9] != 2 {
        return Err(Error::Format(format!("ndim must be 2, got {}", bytes[9])));
    }
    let rows = u64::from_le_bytes(bytes[10..18].try_into().unwrap());
    let cols = u64::from_le_bytes(bytes[18..26].try_into().unwrap());
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(dtype.size() as u64))
        .ok_or_else(|| Error::Format(format!("shape {rows}x{cols} overflows")))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() as u64 != expected {
        return Err(Error::Format(format!(
            "payload is {} bytes, expected {expected} for {rows}x{cols}",
            payload.len()
        )));
    }
    let data: Vec<f64> = match dtype {
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        Dtype::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    let m = Matrix::new(rows as usize, cols as usize, data).map_err(|e| Error::Format(e.to_string()))?;
    Ok((m, dtype))
}

pub fn write_tensor(path: &Path, m: &Matrix, dtype: Dtype) -> Result<()> {
    fs::write(path, encode_tensor(m, dtype)).map_err(io_err(path))
}

pub fn read_tensor(path: &Path) -> Result<(Matrix, Dtype)> {
    decode_tensor(&fs::read(path).map_err(io_err(path))?)
}

/// Reads a tensor file as a batch of activation tokens.
pub fn read_activations(path: &Path) -> Result<ActivationBatch> {
    let (m, dtype) = read_tensor(path)?;
    let label = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    ActivationBatch::new(m, BatchSource::File, label, dtype)
}

/// On-disk calibration report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    pub tool: String,
    pub tool_version: String,
    #[serde(flatten)]
    pub report: CalibrationReport,
}

impl ReportFile {
    pub fn new(report: CalibrationReport) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            report,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(io_err(path))
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path).map_err(io_err(path))?)
    }
}
