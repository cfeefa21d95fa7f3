//! Multiply-add accounting for the dense kernels.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

/// Label attached to each recorded batch of multiply-adds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum FlopTag {
    /// Householder QR forward pass (reflections applied to R and Q).
    Qr,
    /// Reverse-mode pass through the Householder reflections.
    QrBackward,
    /// Work the Cayley retraction adds on top of a plain SGD update.
    Cayley,
    /// Plain matrix products (activations times rotation, gradients).
    Matmul,
}

impl FlopTag {
    pub const ALL: [FlopTag; 4] = [FlopTag::Qr, FlopTag::QrBackward, FlopTag::Cayley, FlopTag::Matmul];

    pub fn label(self) -> &'static str {
        match self {
            FlopTag::Qr => "qr",
            FlopTag::QrBackward => "qr_backward",
            FlopTag::Cayley => "cayley",
            FlopTag::Matmul => "matmul",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

/// Thread-safe multiply-add counter, one monotone cell per [`FlopTag`].
#[derive(Debug, Default)]
pub struct FlopCounter {
    cells: [AtomicU64; 4],
}

impl FlopCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&self, tag: FlopTag, multiply_adds: u64) {
        self.cells[tag.index()].fetch_add(multiply_adds, Ordering::Relaxed);
    }

    pub fn get(&self, tag: FlopTag) -> u64 {
        self.cells[tag.index()].load(Ordering::Relaxed)
    }

    pub fn total(&self) -> u64 {
        FlopTag::ALL.iter().map(|&t| self.get(t)).sum()
    }

    /// Label-keyed copy of the current counts.
    pub fn snapshot(&self) -> BTreeMap<String, u64> {
        FlopTag::ALL
            .iter()
            .map(|&t| (t.label().to_string(), self.get(t)))
            .collect()
    }
}

impl Clone for FlopCounter {
    fn clone(&self) -> Self {
        let out = FlopCounter::new();
        for tag in FlopTag::ALL {
            out.record(tag, self.get(tag));
        }
        out
    }
}
