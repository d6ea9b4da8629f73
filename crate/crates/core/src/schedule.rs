//! Noise-level arithmetic: variance tables, per-frame rolling levels, ladder
//! levels, reduced-step remapping and loss weights.
//!
//! Levels are integers in `0..=T`; level 0 is clean data and level `T` is
//! (near) pure noise.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScheduleError {
    #[error("need at least 2 noise levels, got {0}")]
    TooFewLevels(usize),
    #[error("beta range must satisfy 0 < beta1 <= betaT < 1 (got beta1={beta1}, betaT={beta_t})")]
    BetaRange { beta1: f64, beta_t: f64 },
    #[error("beta table must be non-decreasing and inside (0, 1); offending level {0}")]
    BadBeta(usize),
    #[error("T ({total}) is not divisible by N ({window})")]
    WindowNotDivisor { total: usize, window: usize },
    #[error("N ({window}) is not divisible by l ({step})")]
    LadderNotDivisor { window: usize, step: usize },
    #[error("T_r ({reduced}) is not divisible by N ({window})")]
    ReducedNotDivisible { reduced: usize, window: usize },
    #[error("T_r ({reduced}) exceeds T ({total})")]
    ReducedTooLarge { reduced: usize, total: usize },
    #[error("phase {phase} outside 1..={max}")]
    Phase { phase: usize, max: usize },
    #[error("level {level} outside {lo}..={hi}")]
    LevelRange { level: usize, lo: usize, hi: usize },
    #[error("window length must be positive")]
    EmptyWindow,
    #[error("ladder step l={step} > 1 requires one sub-step per shift (T_r = N), got T_r={reduced}, N={window}")]
    LadderNeedsUnitStride { step: usize, reduced: usize, window: usize },
}

/// Shape of the beta table between its end points.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BetaShape {
    #[default]
    Linear,
}

/// Discrete variance schedule over levels `1..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
}

/// Default `beta1`: equals the context-noise variance at level 1.
pub const DEFAULT_BETA_1: f64 = 4e-5;
pub const DEFAULT_BETA_T: f64 = 2e-2;

impl NoiseSchedule {
    pub fn build(levels: usize, beta1: f64, beta_t: f64, shape: BetaShape) -> Result<Self, ScheduleError> {
        if levels < 2 {
            return Err(ScheduleError::TooFewLevels(levels));
        }
        if !(beta1 > 0.0 && beta1 <= beta_t && beta_t < 1.0) {
            return Err(ScheduleError::BetaRange { beta1, beta_t });
        }
        let betas = match shape {
            BetaShape::Linear => {
                let span = (levels - 1) as f64;
                (0..levels)
                    .map(|i| beta1 + (beta_t - beta1) * i as f64 / span)
                    .collect()
            }
        };
        Self::from_betas(betas)
    }

    /// Linear schedule with the engine's default end points.
    pub fn default_linear(levels: usize) -> Result<Self, ScheduleError> {
        Self::build(levels, DEFAULT_BETA_1, DEFAULT_BETA_T, BetaShape::Linear)
    }

    /// Build from an explicit beta table (`betas[0]` is the beta of level 1).
    pub fn from_betas(betas: Vec<f64>) -> Result<Self, ScheduleError> {
        if betas.len() < 2 {
            return Err(ScheduleError::TooFewLevels(betas.len()));
        }
        for (i, &b) in betas.iter().enumerate() {
            let monotone = i == 0 || b >= betas[i - 1];
            if !(b > 0.0 && b < 1.0 && monotone) {
                return Err(ScheduleError::BadBeta(i + 1));
            }
        }
        let mut alpha_bar = Vec::with_capacity(betas.len() + 1);
        alpha_bar.push(1.0);
        let mut acc = 1.0;
        for &b in &betas {
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        Ok(NoiseSchedule { beta: betas, alpha_bar })
    }

    /// Number of noise levels `T`.
    pub fn levels(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        assert!(t >= 1 && t <= self.levels(), "beta level {t} out of range");
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.beta(t)
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// Marginal noise variance `1 - alpha_bar[t]`.
    pub fn sigma2(&self, t: usize) -> f64 {
        1.0 - self.alpha_bar[t]
    }

    /// Signal-to-noise ratio `alpha_bar / (1 - alpha_bar)`; infinite at level 0.
    pub fn snr(&self, t: usize) -> f64 {
        self.alpha_bar[t] / self.sigma2(t)
    }

    pub fn alpha_bar_table(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn beta_table(&self) -> &[f64] {
        &self.beta
    }

    /// Whether the top level is close enough to zero SNR to start sampling
    /// from a standard normal.
    pub fn terminal_snr_ok(&self) -> bool {
        self.alpha_bar[self.levels()] < 1e-4
    }

    pub fn check_level(&self, t: usize) -> Result<(), ScheduleError> {
        if t > self.levels() {
            return Err(ScheduleError::LevelRange { level: t, lo: 0, hi: self.levels() });
        }
        Ok(())
    }
}

/// Per-frame levels of a rolling window: `levels[n] = t0 + n * s`, `s = T / N`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RollingLevels {
    pub window: usize,
    pub step: usize,
    pub phase: usize,
    pub levels: Vec<usize>,
}

impl RollingLevels {
    pub fn new(total: usize, window: usize, phase: usize) -> Result<Self, ScheduleError> {
        let step = rolling_step(total, window)?;
        if phase < 1 || phase > step {
            return Err(ScheduleError::Phase { phase, max: step });
        }
        let levels = (0..window).map(|n| phase + n * step).collect();
        Ok(RollingLevels { window, step, phase, levels })
    }
}

/// `s = T / N`, rejecting windows that do not divide `T`.
pub fn rolling_step(total: usize, window: usize) -> Result<usize, ScheduleError> {
    if window == 0 {
        return Err(ScheduleError::EmptyWindow);
    }
    if total % window != 0 {
        return Err(ScheduleError::WindowNotDivisor { total, window });
    }
    Ok(total / window)
}

/// Block-constant ladder levels with step size `l`.
///
/// Block `k` (frames `k*l .. (k+1)*l`) sits at `t0l + (k+1)*l - 1`, the last
/// level of the corresponding block of the unit-step ladder. Every frame of
/// the block carries the block level, including the final index of the block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LadderLevels {
    pub window: usize,
    pub step: usize,
    pub phase: usize,
    pub block_levels: Vec<usize>,
}

impl LadderLevels {
    pub fn new(window: usize, step: usize, phase: usize) -> Result<Self, ScheduleError> {
        if window == 0 || step == 0 {
            return Err(ScheduleError::EmptyWindow);
        }
        if window % step != 0 {
            return Err(ScheduleError::LadderNotDivisor { window, step });
        }
        if phase < 1 || phase > step {
            return Err(ScheduleError::Phase { phase, max: step });
        }
        let blocks = window / step;
        let block_levels = (0..blocks).map(|k| phase + (k + 1) * step - 1).collect();
        Ok(LadderLevels { window, step, phase, block_levels })
    }

    pub fn frame_level(&self, i: usize) -> usize {
        self.block_levels[i / self.step]
    }

    pub fn per_frame(&self) -> Vec<usize> {
        (0..self.window).map(|i| self.frame_level(i)).collect()
    }

    pub fn top_level(&self) -> usize {
        *self.block_levels.last().expect("ladder has at least one block")
    }

    /// Only `t0l = 1` keeps the top block at exactly `T = N`.
    pub fn exceeds(&self, total: usize) -> bool {
        self.top_level() > total
    }
}

/// Reduced-step sampling: `T_r` levels mapped onto an evenly strided subset
/// of `0..=T` with both end points kept.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReducedSchedule {
    pub total: usize,
    pub reduced: usize,
    pub window: usize,
    /// Denoising sub-steps per window shift, `s_r = T_r / N`.
    pub substeps: usize,
    level_map: Vec<usize>,
}

impl ReducedSchedule {
    pub fn new(total: usize, reduced: usize, window: usize) -> Result<Self, ScheduleError> {
        if window == 0 || reduced == 0 {
            return Err(ScheduleError::EmptyWindow);
        }
        if reduced % window != 0 {
            return Err(ScheduleError::ReducedNotDivisible { reduced, window });
        }
        if reduced > total {
            return Err(ScheduleError::ReducedTooLarge { reduced, total });
        }
        let level_map = (0..=reduced)
            .map(|k| (k * total + reduced / 2) / reduced)
            .collect();
        Ok(ReducedSchedule { total, reduced, window, substeps: reduced / window, level_map })
    }

    /// Base level for reduced level `k`.
    pub fn map(&self, k: usize) -> usize {
        self.level_map[k]
    }

    pub fn level_map(&self) -> &[usize] {
        &self.level_map
    }
}

/// Per-frame loss weight `a(t)`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum LossWeighting {
    #[default]
    Uniform,
    /// `clamp(exp(lambda_t), min, max)` with `lambda_t = log(snr_t)`.
    ClampedSnr { min: f64, max: f64 },
}

impl LossWeighting {
    pub fn weight(&self, sched: &NoiseSchedule, t: usize) -> Result<f64, ScheduleError> {
        if t < 1 || t > sched.levels() {
            return Err(ScheduleError::LevelRange { level: t, lo: 1, hi: sched.levels() });
        }
        Ok(match *self {
            LossWeighting::Uniform => 1.0,
            LossWeighting::ClampedSnr { min, max } => {
                let lambda = (sched.alpha_bar(t) / sched.sigma2(t)).ln();
                lambda.exp().min(max).max(min)
            }
        })
    }
}

/// Result of an exhaustive consistency sweep.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SweepSummary {
    pub cases: usize,
    pub violations: usize,
    /// Levels outside the half-open band `[s*n, s*(n+1))`; these are exactly
    /// the `t0 = s` windows, whose levels sit on the upper edge `s*(n+1)`.
    pub half_open_misses: usize,
}

/// Enumerate every legal `(N, t0, n)` for each total and check the rolling
/// level formula and its band `(s*n, s*(n+1)]`.
pub fn sweep_rolling(totals: &[usize]) -> SweepSummary {
    let mut out = SweepSummary::default();
    for &total in totals {
        for window in (1..=total).filter(|w| total % w == 0) {
            let step = total / window;
            for phase in 1..=step {
                let rl = match RollingLevels::new(total, window, phase) {
                    Ok(rl) => rl,
                    Err(_) => {
                        out.violations += 1;
                        continue;
                    }
                };
                for (n, &t) in rl.levels.iter().enumerate() {
                    out.cases += 1;
                    let in_band = t > step * n && t <= step * (n + 1);
                    if t != phase + n * step || !in_band || t > total {
                        out.violations += 1;
                    }
                    let half_open = t >= step * n && t < step * (n + 1);
                    if !half_open {
                        out.half_open_misses += 1;
                        if phase != step {
                            out.violations += 1;
                        }
                    }
                }
            }
        }
    }
    out
}

/// For each window and ladder step, check that the phase-1 ladder tops out at
/// `N` and that one `l`-level jump takes the bottom block to level 0.
pub fn sweep_ladder(windows: &[usize], steps: &[usize]) -> SweepSummary {
    let mut out = SweepSummary::default();
    for &window in windows {
        for &step in steps {
            if window % step != 0 {
                continue;
            }
            out.cases += 1;
            let ok = LadderLevels::new(window, step, 1)
                .map(|ld| {
                    let frames = ld.per_frame();
                    ld.top_level() == window
                        && frames[..step].iter().all(|&t| t == step)
                        && frames.iter().all(|&t| t >= step)
                })
                .unwrap_or(false);
            if !ok {
                out.violations += 1;
            }
        }
    }
    out
}
