//! Denoisers: the trait the samplers call, a trainable MLP, and an analytic
//! Gaussian oracle.

mod adam;
mod checkpoint;
mod embed;
mod mlp;
mod oracle;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{Checkpoint, CheckpointError, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use embed::time_embed;
pub use mlp::{ForwardCache, Gradients, MlpConfig, MlpDenoiser};
pub use oracle::{Coupling, OracleDenoiser};

use thiserror::Error;

use crate::diffusion::Frame;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("dimension mismatch in {what}: got {got}, expected {expected}")]
    Dim { what: &'static str, got: usize, expected: usize },
    #[error("style id {style} outside 0..{count}")]
    Style { style: usize, count: usize },
    #[error("AR(1) coefficient must satisfy |phi| < 1 (got {0})")]
    NonStationary(f64),
    #[error("noise level {level} outside 0..={max}")]
    Level { level: usize, max: usize },
    #[error("non-finite gradient at optimizer step {step}")]
    NonFiniteGradient { step: u64 },
}

/// Everything a denoiser sees for one window: noised context, the noised
/// window with per-frame levels, per-position conditioning and a style id.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserInput {
    pub context: Vec<Frame>,
    /// True noise level of each context frame (0 for clean, 1 otherwise).
    pub context_levels: Vec<usize>,
    pub window: Vec<Frame>,
    /// Base-schedule level of each window frame.
    pub levels: Vec<usize>,
    /// One conditioning vector per context and window position, in order.
    pub cond: Vec<Vec<f64>>,
    pub style: Option<usize>,
}

impl DenoiserInput {
    pub fn span(&self) -> usize {
        self.context.len() + self.window.len()
    }

    pub fn validate(&self, frame_dim: usize, cond_dim: usize) -> Result<(), ModelError> {
        if self.levels.len() != self.window.len() {
            return Err(ModelError::Dim { what: "window levels", got: self.levels.len(), expected: self.window.len() });
        }
        if self.context_levels.len() != self.context.len() {
            return Err(ModelError::Dim {
                what: "context levels",
                got: self.context_levels.len(),
                expected: self.context.len(),
            });
        }
        if self.cond.len() != self.span() {
            return Err(ModelError::Dim { what: "conditioning length", got: self.cond.len(), expected: self.span() });
        }
        for f in self.context.iter().chain(&self.window) {
            if f.len() != frame_dim {
                return Err(ModelError::Dim { what: "frame", got: f.len(), expected: frame_dim });
            }
        }
        for c in &self.cond {
            if c.len() != cond_dim {
                return Err(ModelError::Dim { what: "conditioning vector", got: c.len(), expected: cond_dim });
            }
        }
        Ok(())
    }
}

/// Predicts the clean window `x0` from a noised window.
pub trait Denoiser {
    fn frame_dim(&self) -> usize;

    /// Clean estimate for every window frame (context frames are inputs only).
    fn denoise(&self, input: &DenoiserInput) -> Result<Vec<Frame>, ModelError>;
}

impl<D: Denoiser + ?Sized> Denoiser for &D {
    fn frame_dim(&self) -> usize {
        (**self).frame_dim()
    }

    fn denoise(&self, input: &DenoiserInput) -> Result<Vec<Frame>, ModelError> {
        (**self).denoise(input)
    }
}

/// Wraps a denoiser with a fixed amount of extra arithmetic per call so that
/// the denoiser dominates sampling cost (used by the speed benchmarks).
#[derive(Debug, Clone)]
pub struct PaddedDenoiser<D> {
    pub inner: D,
    /// Multiply-add iterations burned per call.
    pub work: u64,
}

impl<D: Denoiser> Denoiser for PaddedDenoiser<D> {
    fn frame_dim(&self) -> usize {
        self.inner.frame_dim()
    }

    fn denoise(&self, input: &DenoiserInput) -> Result<Vec<Frame>, ModelError> {
        let mut acc = 1.0f64;
        for i in 0..self.work {
            acc = std::hint::black_box(acc * 0.999_999_9 + (i & 7) as f64 * 1e-12);
        }
        std::hint::black_box(acc);
        self.inner.denoise(input)
    }
}
