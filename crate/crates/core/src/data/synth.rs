//! Synthetic corpora.
//!
//! The toy corpus mimics speech-driven motion: conditioning channels are
//! enveloped sinusoid mixtures, and poses follow a low-passed linear map of
//! the conditioning around a per-style rest pose. The AR(1) corpus has a
//! closed-form law and backs the oracle tests.

use super::{DataError, SequenceStore};
use crate::diffusion::Frame;
use crate::rng::{tag, RngKey};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyParams {
    pub sequences: usize,
    pub len: usize,
    pub dim: usize,
    pub cond_dim: usize,
    pub styles: usize,
    pub fps: f32,
    /// Observation noise standard deviation.
    pub obs_noise: f64,
    /// Cut-off of each of the two cascaded one-pole filters, in Hz.
    pub cutoff_hz: f64,
}

impl Default for ToyParams {
    fn default() -> Self {
        ToyParams {
            sequences: 8,
            len: 2000,
            dim: 12,
            cond_dim: 4,
            styles: 3,
            fps: 20.0,
            obs_noise: 0.02,
            cutoff_hz: 1.5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ToyCorpus {
    pub params: ToyParams,
    pub sequences: Vec<SequenceStore>,
    /// `dim x cond_dim` map from conditioning to pose drive.
    pub mixing: Vec<Vec<f64>>,
    /// Rest pose of each style (the pose under silent conditioning).
    pub rest_poses: Vec<Frame>,
}

impl ToyCorpus {
    /// Pose drive `W u` before filtering, for correlation checks.
    pub fn drive(&self, u: &[f64]) -> Vec<f64> {
        self.mixing.iter().map(|row| row.iter().zip(u).map(|(w, x)| w * x).sum()).collect()
    }
}

pub fn gen_toy_corpus(params: ToyParams, seed: u64) -> Result<ToyCorpus, DataError> {
    let ToyParams { sequences, len, dim, cond_dim, styles, fps, obs_noise, cutoff_hz } = params;
    if sequences == 0 || dim == 0 || cond_dim == 0 || styles == 0 || !(fps > 0.0) {
        return Err(DataError::Invalid("toy corpus sizes must be positive".into()));
    }
    let root = RngKey::new(seed).derive(tag::DATA);
    let mut shared = root.derive(0).rng();
    let gain = 1.5 / (cond_dim as f64).sqrt();
    let mixing: Vec<Vec<f64>> = (0..dim).map(|_| (0..cond_dim).map(|_| shared.standard_normal() * gain).collect()).collect();
    let rest_poses: Vec<Frame> = (0..styles).map(|_| (0..dim).map(|_| shared.standard_normal() * 0.6).collect()).collect();

    let fps = fps as f64;
    let pole = (-2.0 * std::f64::consts::PI * cutoff_hz / fps).exp();
    let tau = 2.0 * std::f64::consts::PI;
    let mut out = Vec::with_capacity(sequences);
    for i in 0..sequences {
        let style = i % styles;
        let mut r = root.path(&[1, i as u64]).rng();
        // Per channel: three partials and an on/off envelope.
        let channels: Vec<([(f64, f64, f64); 3], f64, f64)> = (0..cond_dim)
            .map(|_| {
                let partials = [(); 3].map(|_| {
                    let freq = 0.2 + 1.8 * r.uniform();
                    let amp = 0.3 + 0.7 * r.uniform();
                    (freq, amp, tau * r.uniform())
                });
                (partials, 0.03 + 0.07 * r.uniform(), tau * r.uniform())
            })
            .collect();
        let mut s1 = vec![0.0; dim];
        let mut s2 = vec![0.0; dim];
        let mut frames = Vec::with_capacity(len * dim);
        let mut cond = Vec::with_capacity(len * cond_dim);
        // Warm the filters up so sequences start near steady state.
        let warmup = (4.0 * fps / cutoff_hz).ceil() as usize;
        for step in 0..warmup + len {
            let t = step as f64 / fps;
            let u: Vec<f64> = channels
                .iter()
                .map(|(partials, env_f, env_p)| {
                    let env = 0.5 * (1.0 + (tau * env_f * t + env_p).sin());
                    env * partials.iter().map(|(f, a, p)| a * (tau * f * t + p).sin()).sum::<f64>()
                })
                .collect();
            for k in 0..dim {
                let drive: f64 = mixing[k].iter().zip(&u).map(|(w, x)| w * x).sum();
                s1[k] = pole * s1[k] + (1.0 - pole) * drive;
                s2[k] = pole * s2[k] + (1.0 - pole) * s1[k];
            }
            if step < warmup {
                continue;
            }
            for k in 0..dim {
                let x = rest_poses[style][k] + s2[k] + obs_noise * r.standard_normal();
                frames.push(x as f32);
            }
            cond.extend(u.iter().map(|&v| v as f32));
        }
        out.push(SequenceStore::new(dim, cond_dim, style as u32, fps as f32, frames, cond)?);
    }
    Ok(ToyCorpus { params, sequences: out, mixing, rest_poses })
}

/// Independent stationary AR(1) channels with a single all-zero conditioning
/// channel. Marginal variance is `sigma_x^2 / (1 - phi^2)`.
pub fn gen_ar1_corpus(phi: f64, sigma_x: f64, len: usize, dim: usize, seed: u64) -> Result<SequenceStore, DataError> {
    if !(phi.abs() < 1.0) {
        return Err(DataError::Invalid(format!("AR(1) coefficient must satisfy |phi| < 1, got {phi}")));
    }
    if dim == 0 || !(sigma_x > 0.0) {
        return Err(DataError::Invalid("dim and sigma_x must be positive".into()));
    }
    let stationary_sd = sigma_x / (1.0 - phi * phi).sqrt();
    let mut frames = vec![0f32; len * dim];
    for k in 0..dim {
        let mut r = RngKey::new(seed).path(&[tag::DATA, 2, k as u64]).rng();
        let mut x = stationary_sd * r.standard_normal();
        for i in 0..len {
            if i > 0 {
                x = phi * x + sigma_x * r.standard_normal();
            }
            frames[i * dim + k] = x as f32;
        }
    }
    SequenceStore::new(dim, 1, 0, 20.0, frames, vec![0.0; len])
}
