//! Closed-form posterior-mean denoiser for stationary AR(1) Gaussian frames.
//!
//! Every feature channel is an independent AR(1) process with coefficient
//! `phi`, marginal variance `var` and mean `mean`. A frame at level `t` is
//! observed as `sqrt(ab) x + sqrt(1 - ab) eps`.

use super::{Denoiser, DenoiserInput, ModelError};
use crate::diffusion::Frame;
use crate::schedule::NoiseSchedule;

/// How much of the process structure the oracle uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Coupling {
    /// Each frame shrunk towards the prior mean on its own.
    PerFrame,
    /// Exact conditional mean given every context and window frame.
    Joint,
}

#[derive(Debug, Clone)]
pub struct OracleDenoiser {
    pub phi: f64,
    pub var: f64,
    pub mean: f64,
    pub coupling: Coupling,
    frame_dim: usize,
    sched: NoiseSchedule,
}

// Stand-in noise variance for level-0 (exactly observed) frames.
const CLEAN_NOISE_VAR: f64 = 1e-12;

impl OracleDenoiser {
    /// AR(1) with innovation scale `sigma_x`; marginal variance `sigma_x^2 / (1 - phi^2)`.
    pub fn ar1(phi: f64, sigma_x: f64, frame_dim: usize, sched: NoiseSchedule, coupling: Coupling) -> Result<Self, ModelError> {
        if !(phi.abs() < 1.0) {
            return Err(ModelError::NonStationary(phi));
        }
        let var = sigma_x * sigma_x / (1.0 - phi * phi);
        Ok(OracleDenoiser { phi, var, mean: 0.0, coupling, frame_dim, sched })
    }

    /// AR(1) with unit marginal variance, i.e. data that was standardized.
    pub fn ar1_unit(phi: f64, frame_dim: usize, sched: NoiseSchedule, coupling: Coupling) -> Result<Self, ModelError> {
        let sigma_x = (1.0 - phi * phi).max(0.0).sqrt();
        Self::ar1(phi, sigma_x, frame_dim, sched, coupling)
    }

    /// Posterior-mean multiplier on `x^t` for an isolated frame.
    pub fn shrinkage(&self, t: usize) -> f64 {
        let ab = self.sched.alpha_bar(t);
        ab.sqrt() * self.var / (ab * self.var + self.sched.sigma2(t))
    }

    fn check(&self, t: usize) -> Result<(), ModelError> {
        if t > self.sched.levels() {
            return Err(ModelError::Level { level: t, max: self.sched.levels() });
        }
        Ok(())
    }

    fn per_frame(&self, input: &DenoiserInput) -> Vec<Frame> {
        input
            .window
            .iter()
            .zip(&input.levels)
            .map(|(x, &t)| {
                let k = self.shrinkage(t);
                let a = self.sched.alpha_bar(t).sqrt();
                x.iter().map(|&v| self.mean + k * (v - a * self.mean)).collect()
            })
            .collect()
    }

    /// Gaussian conditioning with the tridiagonal AR(1) prior precision.
    fn joint(&self, input: &DenoiserInput) -> Vec<Frame> {
        let frames: Vec<&Frame> = input.context.iter().chain(&input.window).collect();
        let levels: Vec<usize> = input.context_levels.iter().chain(&input.levels).copied().collect();
        let n = frames.len();
        let q = self.var * (1.0 - self.phi * self.phi);
        let off = -self.phi / q;
        let obs: Vec<(f64, f64)> = levels
            .iter()
            .map(|&t| {
                let ab = self.sched.alpha_bar(t);
                (ab.sqrt(), self.sched.sigma2(t).max(CLEAN_NOISE_VAR))
            })
            .collect();
        let diag: Vec<f64> = (0..n)
            .map(|i| {
                let prior = if n == 1 {
                    1.0 / self.var
                } else if i == 0 || i == n - 1 {
                    1.0 / q
                } else {
                    (1.0 + self.phi * self.phi) / q
                };
                let (a, nv) = obs[i];
                prior + a * a / nv
            })
            .collect();
        let n_cont = input.context.len();
        let mut out = vec![vec![0.0; self.frame_dim]; input.window.len()];
        let mut rhs = vec![0.0; n];
        for k in 0..self.frame_dim {
            for i in 0..n {
                let (a, nv) = obs[i];
                rhs[i] = a * (frames[i][k] - a * self.mean) / nv;
            }
            let dev = solve_symmetric_tridiagonal(&diag, off, &rhs);
            for (j, row) in out.iter_mut().enumerate() {
                row[k] = self.mean + dev[n_cont + j];
            }
        }
        out
    }
}

/// Thomas algorithm for a symmetric tridiagonal system with a constant
/// off-diagonal.
fn solve_symmetric_tridiagonal(diag: &[f64], off: f64, rhs: &[f64]) -> Vec<f64> {
    let n = diag.len();
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    let mut denom = diag[0];
    c[0] = off / denom;
    d[0] = rhs[0] / denom;
    for i in 1..n {
        denom = diag[i] - off * c[i - 1];
        c[i] = off / denom;
        d[i] = (rhs[i] - off * d[i - 1]) / denom;
    }
    let mut x = vec![0.0; n];
    x[n - 1] = d[n - 1];
    for i in (0..n - 1).rev() {
        x[i] = d[i] - c[i] * x[i + 1];
    }
    x
}

impl Denoiser for OracleDenoiser {
    fn frame_dim(&self) -> usize {
        self.frame_dim
    }

    fn denoise(&self, input: &DenoiserInput) -> Result<Vec<Frame>, ModelError> {
        for &t in input.levels.iter().chain(&input.context_levels) {
            self.check(t)?;
        }
        for f in input.context.iter().chain(&input.window) {
            if f.len() != self.frame_dim {
                return Err(ModelError::Dim { what: "frame", got: f.len(), expected: self.frame_dim });
            }
        }
        Ok(match self.coupling {
            Coupling::PerFrame => self.per_frame(input),
            Coupling::Joint if self.phi == 0.0 => self.per_frame(input),
            Coupling::Joint => self.joint(input),
        })
    }
}
