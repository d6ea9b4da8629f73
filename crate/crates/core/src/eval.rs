//! Distribution and reconstruction metrics over raw pose features.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use thiserror::Error;

use crate::diffusion::Frame;
use crate::rng::CounterRng;

/// Eigenvalues below `-EIG_TOL` make a covariance invalid; those in
/// `[-EIG_TOL, 0)` are rounding noise and are clipped to zero.
const EIG_TOL: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("need at least {need} frames, got {got}")]
    TooFew { need: usize, got: usize },
    #[error("dimension mismatch: {a} vs {b}")]
    Dim { a: usize, b: usize },
    #[error("cannot compare {a:?} with {b:?} features")]
    Kind { a: FeatureKind, b: FeatureKind },
    #[error("matrix square root failed: eigenvalue {0} is below -1e-8")]
    NegativeEigenvalue(f64),
    #[error("length mismatch: {a} vs {b} frames")]
    Length { a: usize, b: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureKind {
    /// Poses as they are.
    Geometric,
    /// Frame-to-frame differences.
    Kinetic,
}

pub fn features(frames: &[Frame], kind: FeatureKind) -> Vec<Frame> {
    match kind {
        FeatureKind::Geometric => frames.to_vec(),
        FeatureKind::Kinetic => frames.windows(2).map(|w| w[1].iter().zip(&w[0]).map(|(a, b)| a - b).collect()).collect(),
    }
}

/// Sample mean and covariance of geometric or kinetic features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDistribution {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub count: usize,
    pub kind: FeatureKind,
}

impl FeatureDistribution {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

pub fn fit_distribution(frames: &[Frame], kind: FeatureKind) -> Result<FeatureDistribution, EvalError> {
    if frames.len() < 2 {
        return Err(EvalError::TooFew { need: 2, got: frames.len() });
    }
    let feats = features(frames, kind);
    let d = feats[0].len();
    if let Some(f) = feats.iter().find(|f| f.len() != d) {
        return Err(EvalError::Dim { a: d, b: f.len() });
    }
    let n = feats.len();
    let mut mean = DVector::zeros(d);
    for f in &feats {
        mean += DVector::from_column_slice(f);
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for f in &feats {
        let c = DVector::from_column_slice(f) - &mean;
        cov += &c * c.transpose();
    }
    // Unbiased when possible; a single kinetic feature has no spread estimate.
    cov /= (n.max(2) - 1) as f64;
    if n < d + 1 {
        log::warn!("{n} samples for {d} dimensions: covariance is rank deficient");
    }
    Ok(FeatureDistribution { mean, cov, count: n, kind })
}

fn clipped_eigen(m: DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>, EvalError> {
    let sym = (&m + m.transpose()) * 0.5;
    let mut eig = SymmetricEigen::new(sym);
    for v in eig.eigenvalues.iter_mut() {
        if *v < -EIG_TOL {
            return Err(EvalError::NegativeEigenvalue(*v));
        }
        *v = v.max(0.0);
    }
    Ok(eig)
}

/// Square root of a symmetric positive semi-definite matrix.
pub fn sqrtm_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>, EvalError> {
    let eig = clipped_eigen(m.clone())?;
    let root = eig.eigenvalues.map(f64::sqrt);
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&root) * eig.eigenvectors.transpose())
}

/// Fréchet distance between the Gaussians fitted to two feature sets:
/// `|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2))`.
///
/// The trace of `(S_a S_b)^(1/2)` is taken as the trace of the symmetric
/// root of `S_a^(1/2) S_b S_a^(1/2)`, which has the same eigenvalues.
pub fn frechet_distance(a: &FeatureDistribution, b: &FeatureDistribution) -> Result<f64, EvalError> {
    if a.dim() != b.dim() {
        return Err(EvalError::Dim { a: a.dim(), b: b.dim() });
    }
    if a.kind != b.kind {
        return Err(EvalError::Kind { a: a.kind, b: b.kind });
    }
    let diff = (&a.mean - &b.mean).norm_squared();
    let ra = sqrtm_psd(&a.cov)?;
    let inner = &ra * &b.cov * &ra;
    let cross: f64 = clipped_eigen(inner)?.eigenvalues.iter().map(|v| v.sqrt()).sum();
    Ok((diff + a.cov.trace() + b.cov.trace() - 2.0 * cross).max(0.0))
}

/// Fit both sequences and return their Fréchet distance.
pub fn frechet_frames(a: &[Frame], b: &[Frame], kind: FeatureKind) -> Result<f64, EvalError> {
    frechet_distance(&fit_distribution(a, kind)?, &fit_distribution(b, kind)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairSampling {
    /// Every unordered pair `i < j`.
    All,
    /// `count` pairs of distinct indices drawn uniformly.
    Sampled { count: usize },
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Mean pairwise L2 distance between features.
pub fn diversity(frames: &[Frame], kind: FeatureKind, pairs: PairSampling, rng: &mut CounterRng) -> Result<f64, EvalError> {
    let need = if kind == FeatureKind::Kinetic { 3 } else { 2 };
    if frames.len() < need {
        return Err(EvalError::TooFew { need, got: frames.len() });
    }
    let f = features(frames, kind);
    let n = f.len();
    Ok(match pairs {
        PairSampling::All => {
            let mut sum = 0.0;
            for i in 0..n {
                for j in i + 1..n {
                    sum += dist(&f[i], &f[j]);
                }
            }
            sum / (n * (n - 1) / 2) as f64
        }
        PairSampling::Sampled { count } => {
            let mut sum = 0.0;
            for _ in 0..count {
                let i = rng.range_inclusive(0, n - 1);
                let mut j = rng.range_inclusive(0, n - 2);
                if j >= i {
                    j += 1;
                }
                sum += dist(&f[i], &f[j]);
            }
            sum / count.max(1) as f64
        }
    })
}

/// `(MSE_s, MSE_k)`: mean per-frame squared error of poses and of first
/// differences.
pub fn mse_static_kinetic(pred: &[Frame], reference: &[Frame]) -> Result<(f64, f64), EvalError> {
    if pred.len() != reference.len() {
        return Err(EvalError::Length { a: pred.len(), b: reference.len() });
    }
    if pred.len() < 2 {
        return Err(EvalError::TooFew { need: 2, got: pred.len() });
    }
    let sq = |a: &[Frame], b: &[Frame]| a.iter().zip(b).map(|(x, y)| dist(x, y).powi(2)).sum::<f64>() / a.len() as f64;
    let pk = features(pred, FeatureKind::Kinetic);
    let rk = features(reference, FeatureKind::Kinetic);
    Ok((sq(pred, reference), sq(&pk, &rk)))
}

/// All six metrics for a generated sequence against a reference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    pub fd_g: f64,
    pub fd_k: f64,
    pub div_g: f64,
    pub div_k: f64,
    /// Only defined for equal-length sequences.
    pub mse: Option<(f64, f64)>,
}

pub fn evaluate(generated: &[Frame], reference: &[Frame], pairs: PairSampling, rng: &mut CounterRng) -> Result<MetricReport, EvalError> {
    Ok(MetricReport {
        fd_g: frechet_frames(generated, reference, FeatureKind::Geometric)?,
        fd_k: frechet_frames(generated, reference, FeatureKind::Kinetic)?,
        div_g: diversity(generated, FeatureKind::Geometric, pairs, rng)?,
        div_k: diversity(generated, FeatureKind::Kinetic, pairs, rng)?,
        mse: if generated.len() == reference.len() { Some(mse_static_kinetic(generated, reference)?) } else { None },
    })
}

/// Per-feature sample variance pooled over features.
pub fn pooled_variance(frames: &[Frame]) -> f64 {
    let d = frames.first().map_or(0, |f| f.len());
    let n = frames.len() as f64;
    (0..d)
        .map(|k| {
            let m = frames.iter().map(|f| f[k]).sum::<f64>() / n;
            frames.iter().map(|f| (f[k] - m).powi(2)).sum::<f64>() / n
        })
        .sum::<f64>()
        / d.max(1) as f64
}

/// Lag-1 autocorrelation pooled over features.
pub fn pooled_lag1_autocorr(frames: &[Frame]) -> f64 {
    let d = frames.first().map_or(0, |f| f.len());
    let n = frames.len() as f64;
    let (mut num, mut den) = (0.0, 0.0);
    for k in 0..d {
        let m = frames.iter().map(|f| f[k]).sum::<f64>() / n;
        num += frames.windows(2).map(|w| (w[0][k] - m) * (w[1][k] - m)).sum::<f64>();
        den += frames.iter().map(|f| (f[k] - m).powi(2)).sum::<f64>();
    }
    num / den
}
