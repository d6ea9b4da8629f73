//! Gaussian diffusion kernels: forward corruption and the reverse posterior
//! step between two arbitrary levels.

use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::schedule::NoiseSchedule;

/// One pose frame: a fixed-length vector of normalized features.
pub type Frame = Vec<f64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffusionError {
    #[error("noise level {level} outside 0..={max}")]
    Level { level: usize, max: usize },
    #[error("reverse step must go down in level (from {from} to {to})")]
    Direction { from: usize, to: usize },
    #[error("length mismatch: {what} has {got}, expected {expected}")]
    Length { what: &'static str, got: usize, expected: usize },
    #[error("frame {index} at level {level} cannot descend {jump} levels")]
    Underflow { index: usize, level: usize, jump: usize },
    #[error("jump must be at least 1")]
    ZeroJump,
}

/// Reverse-step flavour.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SamplerKind {
    /// Ancestral sampling from the Gaussian posterior.
    #[default]
    Ddpm,
    /// Deterministic implicit update (eta = 0).
    Ddim,
}

impl std::str::FromStr for SamplerKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "ddpm" => Ok(SamplerKind::Ddpm),
            "ddim" => Ok(SamplerKind::Ddim),
            other => Err(format!("unknown sampler '{other}' (expected ddpm or ddim)")),
        }
    }
}

impl std::fmt::Display for SamplerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SamplerKind::Ddpm => "ddpm",
            SamplerKind::Ddim => "ddim",
        })
    }
}

fn check_level(sched: &NoiseSchedule, t: usize) -> Result<(), DiffusionError> {
    if t > sched.levels() {
        return Err(DiffusionError::Level { level: t, max: sched.levels() });
    }
    Ok(())
}

/// Sample `x^t ~ q(x^t | x^0)`.
pub fn forward_noise<R: RngCore + ?Sized>(
    x0: &[f64],
    t: usize,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<Frame, DiffusionError> {
    check_level(sched, t)?;
    if t == 0 {
        return Ok(x0.to_vec());
    }
    let a = sched.alpha_bar(t).sqrt();
    let s = sched.sigma2(t).sqrt();
    Ok(x0
        .iter()
        .map(|&x| {
            let eps: f64 = StandardNormal.sample(rng);
            a * x + s * eps
        })
        .collect())
}

/// A window of frames with their per-frame noise levels.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisedWindow {
    pub frames: Vec<Frame>,
    pub levels: Vec<usize>,
    /// The standard-normal draws used by `forward_noise_window`, when kept.
    pub epsilon: Option<Vec<Frame>>,
}

impl NoisedWindow {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Noise every frame independently at its own level.
///
/// `rng_for(n)` supplies the random stream for frame `n`; the epsilon draws
/// are recorded in the returned window.
pub fn forward_noise_window<F, R>(
    x0s: &[Frame],
    levels: &[usize],
    sched: &NoiseSchedule,
    mut rng_for: F,
) -> Result<NoisedWindow, DiffusionError>
where
    F: FnMut(usize) -> R,
    R: RngCore,
{
    if x0s.len() != levels.len() {
        return Err(DiffusionError::Length { what: "levels", got: levels.len(), expected: x0s.len() });
    }
    let mut frames = Vec::with_capacity(x0s.len());
    let mut epsilon = Vec::with_capacity(x0s.len());
    for (n, (x0, &t)) in x0s.iter().zip(levels).enumerate() {
        check_level(sched, t)?;
        let mut rng = rng_for(n);
        let eps: Frame = (0..x0.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
        let a = sched.alpha_bar(t).sqrt();
        let s = sched.sigma2(t).sqrt();
        frames.push(x0.iter().zip(&eps).map(|(&x, &e)| a * x + s * e).collect());
        epsilon.push(eps);
    }
    Ok(NoisedWindow { frames, levels: levels.to_vec(), epsilon: Some(epsilon) })
}

/// Coefficients of the Gaussian posterior `q(x^to | x^from, x0)`:
/// `mean = c_xhat * x0 + c_xt * x^from`, variance `var`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PosteriorCoefs {
    pub c_xhat: f64,
    pub c_xt: f64,
    pub var: f64,
}

pub fn posterior_coefs(sched: &NoiseSchedule, t_from: usize, t_to: usize) -> Result<PosteriorCoefs, DiffusionError> {
    check_level(sched, t_from)?;
    if t_to >= t_from {
        return Err(DiffusionError::Direction { from: t_from, to: t_to });
    }
    let ab_from = sched.alpha_bar(t_from);
    let ab_to = sched.alpha_bar(t_to);
    let r = ab_from / ab_to;
    let denom = 1.0 - ab_from;
    Ok(PosteriorCoefs {
        c_xhat: ab_to.sqrt() * (1.0 - r) / denom,
        c_xt: r.sqrt() * (1.0 - ab_to) / denom,
        var: ((1.0 - r) * (1.0 - ab_to) / denom).max(0.0),
    })
}

/// Move one frame from `t_from` down to `t_to` given the clean estimate.
///
/// Reaching level 0 returns `xhat` unchanged in both modes.
pub fn posterior_step<R: RngCore + ?Sized>(
    xt: &[f64],
    xhat: &[f64],
    t_from: usize,
    t_to: usize,
    sched: &NoiseSchedule,
    rng: &mut R,
    kind: SamplerKind,
) -> Result<Frame, DiffusionError> {
    if xt.len() != xhat.len() {
        return Err(DiffusionError::Length { what: "xhat", got: xhat.len(), expected: xt.len() });
    }
    let coefs = posterior_coefs(sched, t_from, t_to)?;
    if t_to == 0 {
        return Ok(xhat.to_vec());
    }
    Ok(match kind {
        SamplerKind::Ddpm => {
            let sd = coefs.var.sqrt();
            xt.iter()
                .zip(xhat)
                .map(|(&x, &h)| {
                    let z: f64 = StandardNormal.sample(rng);
                    coefs.c_xhat * h + coefs.c_xt * x + sd * z
                })
                .collect()
        }
        SamplerKind::Ddim => {
            let ab_from = sched.alpha_bar(t_from);
            let ab_to = sched.alpha_bar(t_to);
            let (a_from, s_from) = (ab_from.sqrt(), (1.0 - ab_from).sqrt());
            let (a_to, s_to) = (ab_to.sqrt(), (1.0 - ab_to).sqrt());
            xt.iter()
                .zip(xhat)
                .map(|(&x, &h)| {
                    let eps = (x - a_from * h) / s_from;
                    a_to * h + s_to * eps
                })
                .collect()
        }
    })
}

/// Step every frame of a window down by `jump` levels.
pub fn step_window<F, R>(
    w: &NoisedWindow,
    xhat: &[Frame],
    sched: &NoiseSchedule,
    jump: usize,
    kind: SamplerKind,
    mut rng_for: F,
) -> Result<NoisedWindow, DiffusionError>
where
    F: FnMut(usize) -> R,
    R: RngCore,
{
    if jump == 0 {
        return Err(DiffusionError::ZeroJump);
    }
    if xhat.len() != w.len() || w.levels.len() != w.len() {
        return Err(DiffusionError::Length { what: "xhat", got: xhat.len(), expected: w.len() });
    }
    let mut frames = Vec::with_capacity(w.len());
    let mut levels = Vec::with_capacity(w.len());
    for (n, ((x, h), &t)) in w.frames.iter().zip(xhat).zip(&w.levels).enumerate() {
        if t < jump {
            return Err(DiffusionError::Underflow { index: n, level: t, jump });
        }
        let mut rng = rng_for(n);
        frames.push(posterior_step(x, h, t, t - jump, sched, &mut rng, kind)?);
        levels.push(t - jump);
    }
    Ok(NoisedWindow { frames, levels, epsilon: None })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{CounterRng, RngKey};
    use crate::schedule::BetaShape;

    fn sched() -> NoiseSchedule {
        NoiseSchedule::default_linear(1000).unwrap()
    }

    #[test]
    fn level_zero_is_identity() {
        let s = sched();
        let x = vec![0.3, -1.2, 4.0];
        let mut r = CounterRng::from_seed(1);
        assert_eq!(forward_noise(&x, 0, &s, &mut r).unwrap(), x);
        assert!(forward_noise(&x, 1001, &s, &mut r).is_err());
    }

    #[test]
    fn level_one_variance_monte_carlo() {
        let s = sched();
        let mut r = CounterRng::from_seed(2);
        let n = 100_000;
        let draws: Vec<f64> = (0..n).map(|_| forward_noise(&[0.0], 1, &s, &mut r).unwrap()[0]).collect();
        let var = draws.iter().map(|x| x * x).sum::<f64>() / n as f64;
        assert!((var / 4e-5 - 1.0).abs() < 0.1, "var {var}");
    }

    #[test]
    fn top_level_zero_signal() {
        let s = sched();
        let mut r = CounterRng::from_seed(3);
        let n = 50_000;
        let draws: Vec<f64> = (0..n).map(|_| forward_noise(&[0.0], 1000, &s, &mut r).unwrap()[0]).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.02);
        assert!((var - s.sigma2(1000)).abs() < 0.02);
    }

    #[test]
    fn window_noise_identity_and_lengths() {
        let s = sched();
        let x0 = vec![vec![1.0, 2.0]; 4];
        let w = forward_noise_window(&x0, &[0; 4], &s, |n| RngKey::new(0).derive(n as u64).rng()).unwrap();
        assert_eq!(w.frames, x0);
        assert!(forward_noise_window(&x0, &[0; 3], &s, |_| CounterRng::from_seed(0)).is_err());
    }

    #[test]
    fn fig1_window_variances() {
        // T = N = 5: per-frame variances follow sigma2 of the five-level table.
        let s = NoiseSchedule::build(5, 0.1, 0.5, BetaShape::Linear).unwrap();
        let levels = [1, 2, 3, 4, 5];
        let trials = 100_000;
        let mut sums = [0.0; 5];
        let x0 = vec![vec![0.0]; 5];
        for i in 0..trials {
            let w = forward_noise_window(&x0, &levels, &s, |n| RngKey::new(9).path(&[i, n as u64]).rng()).unwrap();
            for n in 0..5 {
                sums[n] += w.frames[n][0] * w.frames[n][0];
            }
        }
        let mut prev = 0.0;
        for n in 0..5 {
            let v = sums[n] / trials as f64;
            let want = s.sigma2(levels[n]);
            assert!((v / want - 1.0).abs() < 0.1, "frame {n}: {v} vs {want}");
            assert!(v > prev);
            prev = v;
        }
    }

    #[test]
    fn single_step_matches_ddpm_textbook() {
        let s = sched();
        for t in [1usize, 2, 10, 500, 1000] {
            let c = posterior_coefs(&s, t, t - 1).unwrap();
            let ab_t = s.alpha_bar(t);
            let ab_prev = s.alpha_bar(t - 1);
            let want_xhat = s.beta(t) * ab_prev.sqrt() / (1.0 - ab_t);
            let want_xt = s.alpha(t).sqrt() * (1.0 - ab_prev) / (1.0 - ab_t);
            let want_var = (1.0 - ab_prev) * s.beta(t) / (1.0 - ab_t);
            assert!((c.c_xhat - want_xhat).abs() < 1e-12, "t={t}");
            assert!((c.c_xt - want_xt).abs() < 1e-12, "t={t}");
            assert!((c.var - want_var).abs() < 1e-12, "t={t}");
        }
    }

    #[test]
    fn posterior_variance_non_negative_all_pairs() {
        for total in [5usize, 20, 100] {
            let s = NoiseSchedule::default_linear(total).unwrap();
            for from in 1..=total {
                for to in 0..from {
                    let c = posterior_coefs(&s, from, to).unwrap();
                    assert!(c.var >= 0.0 && c.var.is_finite());
                }
            }
        }
    }

    #[test]
    fn clean_endpoint_returns_xhat() {
        let s = sched();
        let xt = vec![0.7, -0.1];
        let xhat = vec![0.123456789, 9.87654321];
        let mut r = CounterRng::from_seed(4);
        for kind in [SamplerKind::Ddpm, SamplerKind::Ddim] {
            for t in [1, 37, 1000] {
                assert_eq!(posterior_step(&xt, &xhat, t, 0, &s, &mut r, kind).unwrap(), xhat);
            }
        }
        assert!(matches!(
            posterior_step(&xt, &xhat, 5, 5, &s, &mut r, SamplerKind::Ddpm),
            Err(DiffusionError::Direction { .. })
        ));
    }

    #[test]
    fn ddim_recovers_forward_point() {
        // If xt was produced from xhat with noise eps, DDIM lands on the
        // same-eps point at the lower level.
        let s = sched();
        let x0 = [0.4, -0.9];
        let eps = [1.3, 0.2];
        let (t, to) = (600, 250);
        let xt: Vec<f64> = x0
            .iter()
            .zip(&eps)
            .map(|(x, e)| s.alpha_bar(t).sqrt() * x + s.sigma2(t).sqrt() * e)
            .collect();
        let mut r = CounterRng::from_seed(0);
        let out = posterior_step(&xt, &x0, t, to, &s, &mut r, SamplerKind::Ddim).unwrap();
        for i in 0..2 {
            let want = s.alpha_bar(to).sqrt() * x0[i] + s.sigma2(to).sqrt() * eps[i];
            assert!((out[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn step_window_bookkeeping() {
        let s = sched();
        let levels: Vec<usize> = (0..100).map(|n| 3 + 10 * n).collect();
        let w = NoisedWindow { frames: vec![vec![0.0]; 100], levels, epsilon: None };
        let xhat = vec![vec![0.0]; 100];
        let out = step_window(&w, &xhat, &s, 1, SamplerKind::Ddpm, |n| RngKey::new(1).derive(n as u64).rng()).unwrap();
        assert_eq!(out.levels, (0..100).map(|n| 2 + 10 * n).collect::<Vec<_>>());

        let w = NoisedWindow { frames: vec![vec![0.0]; 8], levels: vec![4, 4, 4, 4, 8, 8, 8, 8], epsilon: None };
        let out = step_window(&w, &vec![vec![0.0]; 8], &s, 4, SamplerKind::Ddpm, |_| CounterRng::from_seed(1)).unwrap();
        assert_eq!(out.levels, vec![0, 0, 0, 0, 4, 4, 4, 4]);

        let err = step_window(&w, &vec![vec![0.0]; 8], &s, 5, SamplerKind::Ddpm, |_| CounterRng::from_seed(1));
        assert_eq!(err, Err(DiffusionError::Underflow { index: 0, level: 4, jump: 5 }));
    }
}
