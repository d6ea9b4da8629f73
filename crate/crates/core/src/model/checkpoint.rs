//! `RDCK` model checkpoints.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic "RDCK" | u32 version
//! u32 frame_dim, cond_dim, n_styles, span, time_dim, hidden, depth
//! u32 levels, n_cont | f64 beta1, betaT | u64 optimizer steps
//! u32 layer count, then (u32 out, u32 in) per layer
//! f64 normalizer mean[frame_dim], std[frame_dim]
//! u32 idle pose count, then f64 idle[count][frame_dim]
//! u64 parameter count, then f64 parameters (layer by layer: weights row-major, biases)
//! ```
//!
//! A human-readable `<path>.manifest` is written next to the binary.

use std::io::Write;
use std::path::{Path, PathBuf};

use thiserror::Error;

use super::mlp::{MlpConfig, MlpDenoiser};
use crate::data::Normalizer;
use crate::diffusion::Frame;
use crate::rng::CounterRng;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"RDCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic bytes {0:?} (expected \"RDCK\")")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("truncated checkpoint at byte {0}")]
    Truncated(usize),
    #[error("checkpoint has {0} trailing bytes")]
    TrailingBytes(usize),
    #[error("inconsistent checkpoint: {0}")]
    Shape(String),
}

/// A trained denoiser plus everything needed to stream from it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: MlpDenoiser,
    pub levels: usize,
    pub beta1: f64,
    pub beta_t: f64,
    /// Context length the model was last trained with.
    pub n_cont: usize,
    pub normalizer: Normalizer,
    /// Idle pose per style, in normalized space.
    pub idle: Vec<Frame>,
}

impl Checkpoint {
    pub fn window(&self) -> usize {
        self.model.config.span - self.n_cont
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.model.config;
        let mut b = Vec::new();
        b.extend_from_slice(&CHECKPOINT_MAGIC);
        let u32s = [
            CHECKPOINT_VERSION,
            c.frame_dim as u32,
            c.cond_dim as u32,
            c.n_styles as u32,
            c.span as u32,
            c.time_dim as u32,
            c.hidden as u32,
            c.depth as u32,
            self.levels as u32,
            self.n_cont as u32,
        ];
        for v in u32s {
            b.extend_from_slice(&v.to_le_bytes());
        }
        b.extend_from_slice(&self.beta1.to_le_bytes());
        b.extend_from_slice(&self.beta_t.to_le_bytes());
        b.extend_from_slice(&self.model.steps.to_le_bytes());
        let shapes = self.model.shapes();
        b.extend_from_slice(&(shapes.len() as u32).to_le_bytes());
        for (o, i) in &shapes {
            b.extend_from_slice(&(*o as u32).to_le_bytes());
            b.extend_from_slice(&(*i as u32).to_le_bytes());
        }
        for v in self.normalizer.mean.iter().chain(&self.normalizer.std) {
            b.extend_from_slice(&v.to_le_bytes());
        }
        b.extend_from_slice(&(self.idle.len() as u32).to_le_bytes());
        for v in self.idle.iter().flatten() {
            b.extend_from_slice(&v.to_le_bytes());
        }
        b.extend_from_slice(&(self.model.param_count() as u64).to_le_bytes());
        for v in self.model.params() {
            b.extend_from_slice(&v.to_le_bytes());
        }
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
        if magic != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic(magic));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version(version));
        }
        let config = MlpConfig {
            frame_dim: r.u32()? as usize,
            cond_dim: r.u32()? as usize,
            n_styles: r.u32()? as usize,
            span: r.u32()? as usize,
            time_dim: r.u32()? as usize,
            hidden: r.u32()? as usize,
            depth: r.u32()? as usize,
        };
        let levels = r.u32()? as usize;
        let n_cont = r.u32()? as usize;
        let beta1 = r.f64()?;
        let beta_t = r.f64()?;
        let steps = r.u64()?;
        if config.frame_dim == 0 || config.span == 0 || config.depth == 0 || config.hidden == 0 {
            return Err(CheckpointError::Shape("zero-sized model dimension".into()));
        }
        if n_cont >= config.span {
            return Err(CheckpointError::Shape(format!("context {n_cont} leaves no window in span {}", config.span)));
        }
        let n_layers = r.u32()? as usize;
        let expected = config.layer_shapes();
        if n_layers != expected.len() {
            return Err(CheckpointError::Shape(format!("{n_layers} layers, config implies {}", expected.len())));
        }
        for &(o, i) in &expected {
            let (ro, ri) = (r.u32()? as usize, r.u32()? as usize);
            if (ro, ri) != (o, i) {
                return Err(CheckpointError::Shape(format!("layer {ro}x{ri}, config implies {o}x{i}")));
            }
        }
        let d = config.frame_dim;
        let mean = r.f64s(d)?;
        let std = r.f64s(d)?;
        let n_idle = r.u32()? as usize;
        let idle = (0..n_idle).map(|_| r.f64s(d)).collect::<Result<Vec<_>, _>>()?;
        let count = r.u64()?;
        let mut model = MlpDenoiser::new(config, &mut CounterRng::from_seed(0), true);
        if count != model.param_count() as u64 {
            return Err(CheckpointError::Shape(format!("{count} parameters, config implies {}", model.param_count())));
        }
        let params = r.f64s(count as usize)?;
        if r.pos != bytes.len() {
            return Err(CheckpointError::TrailingBytes(bytes.len() - r.pos));
        }
        model.set_flat_params(&params);
        model.steps = steps;
        Ok(Checkpoint { model, levels, beta1, beta_t, n_cont, normalizer: Normalizer { mean, std }, idle })
    }

    pub fn manifest(&self) -> String {
        let c = &self.model.config;
        let mut s = String::new();
        let mut line = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        line("format", format!("RDCK v{CHECKPOINT_VERSION}"));
        line("frame_dim", c.frame_dim.to_string());
        line("cond_dim", c.cond_dim.to_string());
        line("n_styles", c.n_styles.to_string());
        line("span", c.span.to_string());
        line("n_cont", self.n_cont.to_string());
        line("N", self.window().to_string());
        line("time_dim", c.time_dim.to_string());
        line("hidden", c.hidden.to_string());
        line("depth", c.depth.to_string());
        line("T", self.levels.to_string());
        line("beta1", self.beta1.to_string());
        line("betaT", self.beta_t.to_string());
        line("steps", self.model.steps.to_string());
        line("parameters", self.model.param_count().to_string());
        let shapes: Vec<String> = self.model.shapes().iter().map(|(o, i)| format!("{o}x{i}")).collect();
        line("layers", shapes.join(","));
        s
    }

    pub fn manifest_path(path: &Path) -> PathBuf {
        let mut p = path.as_os_str().to_owned();
        p.push(".manifest");
        PathBuf::from(p)
    }

    /// Write the binary and its manifest.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        let path = path.as_ref();
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(&self.to_bytes())?;
        f.flush()?;
        std::fs::write(Self::manifest_path(path), self.manifest())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(CheckpointError::Truncated(self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, CheckpointError> {
        let raw = self.take(n.checked_mul(8).ok_or(CheckpointError::Truncated(self.pos))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let cfg = MlpConfig { frame_dim: 3, cond_dim: 2, n_styles: 2, span: 5, time_dim: 4, hidden: 7, depth: 2 };
        let mut model = MlpDenoiser::new(cfg, &mut CounterRng::from_seed(9), false);
        model.steps = 42;
        Checkpoint {
            model,
            levels: 50,
            beta1: 4e-5,
            beta_t: 2e-2,
            n_cont: 2,
            normalizer: Normalizer { mean: vec![0.1, -0.2, 0.3], std: vec![1.5, 0.5, 2.0] },
            idle: vec![vec![0.0, 1.0, 2.0], vec![-1.0, 0.25, 1e-300]],
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.rdck");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        let bits = |c: &Checkpoint| c.model.params().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&ck));
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), ck.to_bytes());
        let manifest = std::fs::read_to_string(Checkpoint::manifest_path(&path)).unwrap();
        assert!(manifest.contains("parameters = "));
        assert!(manifest.contains("N = 3"));
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let b = sample().to_bytes();
        assert!(matches!(Checkpoint::from_bytes(&b[..b.len() - 1]), Err(CheckpointError::Truncated(_))));
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(CheckpointError::BadMagic(_))));
        let mut bad = b.clone();
        bad[4] = 2;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(CheckpointError::Version(2))));
        let mut bad = b.clone();
        bad.push(0);
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(CheckpointError::TrailingBytes(1))));
        for cut in 0..b.len().min(200) {
            assert!(Checkpoint::from_bytes(&b[..cut]).is_err());
        }
    }
}
