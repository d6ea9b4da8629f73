//! Sequences on disk and in memory, synthetic corpora, normalization and the
//! engine configuration file.

mod config;
mod format;
mod normalize;
mod synth;

pub use config::{ConfigError, EngineConfig, LadderStage, CONFIG_KEYS};
pub use format::{export_csv, load_sequence, read_sequence, save_sequence, write_sequence, HEADER_LEN, SEQUENCE_MAGIC, SEQUENCE_VERSION};
pub use normalize::Normalizer;
pub use synth::{gen_ar1_corpus, gen_toy_corpus, ToyCorpus, ToyParams};

use thiserror::Error;

use crate::diffusion::Frame;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic bytes {0:?} (expected \"RSTM\")")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    Version(u32),
    #[error("truncated sequence file: expected {expected} bytes, found {actual}")]
    Truncated { expected: u64, actual: u64 },
    #[error("sequence file has {extra} trailing bytes after the declared payload")]
    TrailingBytes { extra: u64 },
    #[error("invalid header: {0}")]
    Header(String),
    #[error("non-finite value at element {0}")]
    NonFinite(usize),
    #[error("invalid sequence: {0}")]
    Invalid(String),
}

/// A pose stream with its per-frame conditioning.
///
/// Values are kept in single precision, matching the on-disk format, so
/// save/load round-trips are exact.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceStore {
    pub dim: usize,
    pub cond_dim: usize,
    pub style: u32,
    pub fps: f32,
    /// Row-major `L x dim`.
    pub frames: Vec<f32>,
    /// Row-major `L x cond_dim`.
    pub cond: Vec<f32>,
}

impl SequenceStore {
    pub fn new(dim: usize, cond_dim: usize, style: u32, fps: f32, frames: Vec<f32>, cond: Vec<f32>) -> Result<Self, DataError> {
        if dim == 0 || cond_dim == 0 {
            return Err(DataError::Invalid(format!("dim ({dim}) and cond_dim ({cond_dim}) must be positive")));
        }
        if frames.len() % dim != 0 || cond.len() % cond_dim != 0 || frames.len() / dim != cond.len() / cond_dim {
            return Err(DataError::Invalid("frames and conditioning lengths disagree".into()));
        }
        if let Some(i) = frames.iter().chain(&cond).position(|v| !v.is_finite()) {
            return Err(DataError::NonFinite(i));
        }
        Ok(SequenceStore { dim, cond_dim, style, fps, frames, cond })
    }

    /// Build from double-precision rows (values are rounded to `f32`).
    pub fn from_rows(frames: &[Frame], cond: &[Vec<f64>], style: u32, fps: f32) -> Result<Self, DataError> {
        let dim = frames.first().map_or(0, |f| f.len());
        let cond_dim = cond.first().map_or(0, |c| c.len());
        if frames.iter().any(|f| f.len() != dim) || cond.iter().any(|c| c.len() != cond_dim) {
            return Err(DataError::Invalid("ragged rows".into()));
        }
        Self::new(
            dim,
            cond_dim,
            style,
            fps,
            frames.iter().flatten().map(|&v| v as f32).collect(),
            cond.iter().flatten().map(|&v| v as f32).collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.frames.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn frame(&self, i: usize) -> &[f32] {
        &self.frames[i * self.dim..(i + 1) * self.dim]
    }

    pub fn cond_row(&self, i: usize) -> &[f32] {
        &self.cond[i * self.cond_dim..(i + 1) * self.cond_dim]
    }

    pub fn frame_f64(&self, i: usize) -> Frame {
        self.frame(i).iter().map(|&v| v as f64).collect()
    }

    pub fn cond_f64(&self, i: usize) -> Vec<f64> {
        self.cond_row(i).iter().map(|&v| v as f64).collect()
    }

    pub fn frames_f64(&self) -> Vec<Frame> {
        (0..self.len()).map(|i| self.frame_f64(i)).collect()
    }

    pub fn cond_rows_f64(&self) -> Vec<Vec<f64>> {
        (0..self.len()).map(|i| self.cond_f64(i)).collect()
    }

    /// Sub-sequence `range` of frames and conditioning.
    pub fn slice(&self, range: std::ops::Range<usize>) -> SequenceStore {
        SequenceStore {
            dim: self.dim,
            cond_dim: self.cond_dim,
            style: self.style,
            fps: self.fps,
            frames: self.frames[range.start * self.dim..range.end * self.dim].to_vec(),
            cond: self.cond[range.start * self.cond_dim..range.end * self.cond_dim].to_vec(),
        }
    }
}
