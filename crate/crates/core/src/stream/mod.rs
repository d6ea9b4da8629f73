//! Streaming sampler.
//!
//! The window holds `N` frames whose levels live on the reduced schedule
//! (`T_r` levels, `s_r = T_r / N` sub-steps per shift) and are mapped to the
//! base schedule for the denoiser and the posterior step. The rolling sampler
//! is the ladder sampler with `l = 1`: every call lowers each frame by `l`
//! reduced levels, and once the head block reaches level 0 it is emitted,
//! re-noised into the context and replaced by fresh noise at the tail.
//!
//! Sampling starts from a window of noised idle poses at the pre-roll
//! positions `-N..-1`. Flushing those costs `N / l * s_r` calls (the
//! bootstrap descent, reported separately); every real frame then enters as
//! pure noise and is emitted after exactly `T_r / l` calls.

mod ofs;

pub use ofs::{cosine, ofs_smooth, ofs_sequence};

use std::collections::VecDeque;
use std::time::Instant;

use thiserror::Error;

use crate::data::EngineConfig;
use crate::diffusion::{forward_noise, posterior_step, DiffusionError, Frame, SamplerKind};
use crate::model::{Denoiser, DenoiserInput, ModelError};
use crate::rng::{pos_tag, tag, RngKey};
use crate::schedule::{NoiseSchedule, ReducedSchedule, ScheduleError};

#[derive(Debug, Error)]
pub enum StreamError {
    #[error("invalid stream configuration: {0}")]
    Config(String),
    #[error("conditioning underrun: no vector for frame {index}")]
    CondUnderrun { index: i64 },
    #[error("conditioning vector has {got} entries, expected {expected}")]
    CondDim { got: usize, expected: usize },
    #[error("roll requested before the head block is clean (level {level})")]
    NotReady { level: usize },
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamConfig {
    pub window: usize,
    pub n_cont: usize,
    /// Reduced level count `T_r`.
    pub reduced: usize,
    /// Ladder step size `l`.
    pub ladder: usize,
    pub sampler: SamplerKind,
    /// Smoothing threshold; `None` disables smoothing.
    pub ofs_tau: Option<f64>,
    pub style: Option<usize>,
    pub seed: u64,
}

impl StreamConfig {
    pub fn from_engine(cfg: &EngineConfig) -> Self {
        StreamConfig {
            window: cfg.window,
            n_cont: cfg.n_cont,
            reduced: cfg.reduced_levels,
            ladder: cfg.ladder,
            sampler: cfg.sampler,
            ofs_tau: cfg.ofs.then_some(cfg.tau),
            style: None,
            seed: cfg.seed,
        }
    }

    pub fn validate(&self, sched: &NoiseSchedule) -> Result<ReducedSchedule, StreamError> {
        if self.n_cont == 0 {
            return Err(StreamError::Config("n_cont must be at least 1".into()));
        }
        crate::schedule::rolling_step(sched.levels(), self.window)?;
        let reduced = ReducedSchedule::new(sched.levels(), self.reduced, self.window)?;
        if self.ladder == 0 || self.window % self.ladder != 0 {
            return Err(ScheduleError::LadderNotDivisor { window: self.window, step: self.ladder }.into());
        }
        if self.ladder > 1 && self.reduced != self.window {
            return Err(StreamError::Config(format!(
                "ladder step l = {} needs T_r = N = {}, got T_r = {}",
                self.ladder, self.window, self.reduced
            )));
        }
        if let Some(tau) = self.ofs_tau {
            if !(-1.0..=1.0).contains(&tau) {
                return Err(StreamError::Config(format!("tau must lie in [-1, 1], got {tau}")));
            }
        }
        Ok(reduced)
    }
}

/// What happens when the conditioning runs out.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TailPolicy {
    Error,
    /// Treat missing future conditioning as silence.
    ZeroPad,
}

/// Conditioning stream indexed by absolute frame position. Positions before
/// 0 (the pre-roll) are silent.
#[derive(Debug, Clone)]
pub struct CondSource {
    rows: Vec<Vec<f64>>,
    dim: usize,
    tail: TailPolicy,
}

impl CondSource {
    pub fn new(rows: Vec<Vec<f64>>, dim: usize, tail: TailPolicy) -> Result<Self, StreamError> {
        if let Some(r) = rows.iter().find(|r| r.len() != dim) {
            return Err(StreamError::CondDim { got: r.len(), expected: dim });
        }
        Ok(CondSource { rows, dim, tail })
    }

    /// An all-silent source of unbounded length.
    pub fn silent(dim: usize) -> Self {
        CondSource { rows: Vec::new(), dim, tail: TailPolicy::ZeroPad }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn get(&self, pos: i64) -> Result<Vec<f64>, StreamError> {
        if pos < 0 {
            return Ok(vec![0.0; self.dim]);
        }
        match self.rows.get(pos as usize) {
            Some(r) => Ok(r.clone()),
            None if self.tail == TailPolicy::ZeroPad => Ok(vec![0.0; self.dim]),
            None => Err(StreamError::CondUnderrun { index: pos }),
        }
    }
}

/// Live sampler state. Memory is `O(N + n_cont)` frames.
#[derive(Debug, Clone)]
pub struct StreamState {
    pub window: VecDeque<Frame>,
    /// Reduced-schedule level of each window frame.
    pub levels: VecDeque<usize>,
    /// Denoiser calls each window frame has been through.
    pub visits: VecDeque<u64>,
    pub context: VecDeque<Frame>,
    /// Base-schedule level of each context frame (0 for the clean idle padding).
    pub context_levels: VecDeque<usize>,
    /// Absolute position of the window head.
    pub j: i64,
    pub idle: Frame,
    pub last_emitted: Frame,
    pub emitted: u64,
    pub calls: u64,
}

/// The sampler: denoiser, schedules and configuration bound together.
pub struct Sampler<'a, D: ?Sized> {
    denoiser: &'a D,
    sched: &'a NoiseSchedule,
    reduced: ReducedSchedule,
    cfg: StreamConfig,
    key: RngKey,
}

/// Reduced level of window slot `i` right after a roll.
fn rolled_level(i: usize, substeps: usize, ladder: usize) -> usize {
    substeps * ladder * (i / ladder + 1)
}

impl<'a, D: Denoiser + ?Sized> Sampler<'a, D> {
    pub fn new(denoiser: &'a D, sched: &'a NoiseSchedule, cfg: StreamConfig) -> Result<Self, StreamError> {
        let reduced = cfg.validate(sched)?;
        let key = RngKey::new(cfg.seed);
        Ok(Sampler { denoiser, sched, reduced, cfg, key })
    }

    pub fn config(&self) -> &StreamConfig {
        &self.cfg
    }

    pub fn substeps(&self) -> usize {
        self.reduced.substeps
    }

    /// Window levels after every roll: `s_r (n + 1)` for `l = 1`, the phase-1
    /// ladder for `l > 1`.
    pub fn rolled_levels(&self) -> Vec<usize> {
        (0..self.cfg.window).map(|i| rolled_level(i, self.reduced.substeps, self.cfg.ladder)).collect()
    }

    /// Idle-pose window at the pre-roll positions `-N..-1` and `n_cont`
    /// clean idle context frames.
    pub fn bootstrap(&self, idle: &[f64]) -> Result<StreamState, StreamError> {
        let n = self.cfg.window as i64;
        let mut window = VecDeque::with_capacity(self.cfg.window);
        let mut levels = VecDeque::with_capacity(self.cfg.window);
        for (i, r) in self.rolled_levels().into_iter().enumerate() {
            let pos = -n + i as i64;
            let mut rng = self.key.path(&[tag::BOOTSTRAP, pos_tag(pos)]).rng();
            window.push_back(forward_noise(idle, self.reduced.map(r), self.sched, &mut rng)?);
            levels.push_back(r);
        }
        Ok(StreamState {
            window,
            levels,
            visits: VecDeque::from(vec![0; self.cfg.window]),
            context: VecDeque::from(vec![idle.to_vec(); self.cfg.n_cont]),
            context_levels: VecDeque::from(vec![0; self.cfg.n_cont]),
            j: -n,
            idle: idle.to_vec(),
            last_emitted: idle.to_vec(),
            emitted: 0,
            calls: 0,
        })
    }

    fn input(&self, state: &StreamState, cond: &CondSource) -> Result<DenoiserInput, StreamError> {
        let start = state.j - self.cfg.n_cont as i64;
        let cond = (0..(self.cfg.n_cont + self.cfg.window) as i64)
            .map(|p| cond.get(start + p))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(DenoiserInput {
            context: state.context.iter().cloned().collect(),
            context_levels: state.context_levels.iter().copied().collect(),
            window: state.window.iter().cloned().collect(),
            levels: state.levels.iter().map(|&r| self.reduced.map(r)).collect(),
            cond,
            style: self.cfg.style,
        })
    }

    /// One denoiser call; every window frame descends `l` reduced levels.
    pub fn step_once(&self, state: &mut StreamState, cond: &CondSource) -> Result<(), StreamError> {
        let jump = self.cfg.ladder;
        if let Some(&r) = state.levels.iter().find(|&&r| r < jump) {
            return Err(DiffusionError::Underflow { index: 0, level: r, jump }.into());
        }
        let input = self.input(state, cond)?;
        let xhat = self.denoiser.denoise(&input)?;
        state.calls += 1;
        for i in 0..self.cfg.window {
            let r = state.levels[i];
            let pos = state.j + i as i64;
            let mut rng = self.key.path(&[tag::STEP, pos_tag(pos), r as u64]).rng();
            let (from, to) = (self.reduced.map(r), self.reduced.map(r - jump));
            state.window[i] = posterior_step(&state.window[i], &xhat[i], from, to, self.sched, &mut rng, self.cfg.sampler)?;
            state.levels[i] = r - jump;
            state.visits[i] += 1;
        }
        Ok(())
    }

    /// Emit the clean head block, push it into the context at level 1 and
    /// append fresh noise at the tail. Returns `(position, frame, visits)`
    /// for each emitted frame.
    pub fn roll(&self, state: &mut StreamState) -> Result<Vec<(i64, Frame, u64)>, StreamError> {
        let l = self.cfg.ladder;
        if let Some(&r) = state.levels.iter().take(l).find(|&&r| r != 0) {
            return Err(StreamError::NotReady { level: r });
        }
        let mut block: Vec<Frame> = Vec::with_capacity(l);
        let mut visits = Vec::with_capacity(l);
        for _ in 0..l {
            block.push(state.window.pop_front().expect("window holds N frames"));
            state.levels.pop_front();
            visits.push(state.visits.pop_front().expect("visit counter per frame"));
        }
        if let Some(tau) = self.cfg.ofs_tau {
            block = ofs_smooth(&block, &state.last_emitted, tau);
        }
        let mut out = Vec::with_capacity(l);
        for (i, frame) in block.into_iter().enumerate() {
            let pos = state.j + i as i64;
            let mut rng = self.key.path(&[tag::CONTEXT, pos_tag(pos)]).rng();
            state.context.push_back(forward_noise(&frame, 1, self.sched, &mut rng)?);
            state.context_levels.push_back(1);
            state.context.pop_front();
            state.context_levels.pop_front();
            let tail = pos + self.cfg.window as i64;
            let mut rng = self.key.path(&[tag::FRESH, pos_tag(tail)]).rng();
            state.window.push_back(rng.normal_vec(frame.len()));
            state.levels.push_back(self.reduced.reduced);
            state.visits.push_back(0);
            state.last_emitted = frame.clone();
            out.push((pos, frame, visits[i]));
        }
        state.j += l as i64;
        state.emitted += l as u64;
        debug_assert_eq!(state.levels.iter().copied().collect::<Vec<_>>(), self.rolled_levels());
        Ok(out)
    }

    /// Emit frames `0..frames`, passing each to `sink` in order.
    pub fn run<F: FnMut(i64, &[f64])>(
        &self,
        idle: &[f64],
        cond: &CondSource,
        frames: usize,
        mut sink: F,
    ) -> Result<StreamReport, StreamError> {
        if idle.len() != self.denoiser.frame_dim() {
            return Err(ModelError::Dim { what: "idle pose", got: idle.len(), expected: self.denoiser.frame_dim() }.into());
        }
        let mut state = self.bootstrap(idle)?;
        let substeps = self.reduced.substeps;
        let mut report = StreamReport {
            ladder: self.cfg.ladder,
            reduced: self.cfg.reduced,
            substeps,
            ..StreamReport::default()
        };
        let mut delivered = 0usize;
        let mut steady_start = None;
        while delivered < frames {
            let t = Instant::now();
            for _ in 0..substeps {
                self.step_once(&mut state, cond)?;
            }
            let block = self.roll(&mut state)?;
            let block_secs = t.elapsed().as_secs_f64();
            if block.iter().all(|(pos, _, _)| *pos < 0) {
                report.bootstrap_calls += substeps as u64;
                continue;
            }
            report.denoiser_calls += substeps as u64;
            let start = *steady_start.get_or_insert(t);
            for (pos, frame, visits) in block {
                if pos < 0 || delivered >= frames {
                    continue;
                }
                sink(pos, &frame);
                report.latencies.push(block_secs);
                report.min_visits = if delivered == 0 { visits } else { report.min_visits.min(visits) };
                report.max_visits = report.max_visits.max(visits);
                delivered += 1;
            }
            report.seconds = start.elapsed().as_secs_f64();
        }
        report.frames = delivered;
        Ok(report)
    }
}

/// Counting and timing summary of one streaming run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StreamReport {
    pub ladder: usize,
    pub reduced: usize,
    pub substeps: usize,
    pub frames: usize,
    /// Calls after the pre-roll descent.
    pub denoiser_calls: u64,
    /// Calls spent flushing the idle pre-roll.
    pub bootstrap_calls: u64,
    /// Fewest and most calls any emitted frame went through.
    pub min_visits: u64,
    pub max_visits: u64,
    /// Wall time of the block that produced each frame.
    pub latencies: Vec<f64>,
    /// Wall time after the pre-roll.
    pub seconds: f64,
}

impl StreamReport {
    pub fn calls_per_frame(&self) -> f64 {
        self.denoiser_calls as f64 / self.frames.max(1) as f64
    }

    pub fn fps(&self) -> f64 {
        if self.seconds > 0.0 {
            self.frames as f64 / self.seconds
        } else {
            f64::INFINITY
        }
    }

    pub fn latency_quantile(&self, q: f64) -> f64 {
        if self.latencies.is_empty() {
            return 0.0;
        }
        let mut v = self.latencies.clone();
        v.sort_by(f64::total_cmp);
        let idx = ((v.len() - 1) as f64 * q).round() as usize;
        v[idx]
    }
}

/// Rolling sampler (`l = 1`): collect `frames` frames.
pub fn stream<D: Denoiser + ?Sized>(
    denoiser: &D,
    sched: &NoiseSchedule,
    cond: &CondSource,
    idle: &[f64],
    frames: usize,
    cfg: &StreamConfig,
) -> Result<(Vec<Frame>, StreamReport), StreamError> {
    if cfg.ladder != 1 {
        return Err(StreamError::Config("the rolling sampler uses l = 1; use stream_rdla for ladders".into()));
    }
    collect(denoiser, sched, cond, idle, frames, cfg)
}

/// Ladder sampler: one call per `l` emitted frames. Requires `T_r = N`.
pub fn stream_rdla<D: Denoiser + ?Sized>(
    denoiser: &D,
    sched: &NoiseSchedule,
    cond: &CondSource,
    idle: &[f64],
    frames: usize,
    cfg: &StreamConfig,
) -> Result<(Vec<Frame>, StreamReport), StreamError> {
    if cfg.reduced != cfg.window {
        return Err(StreamError::Config(format!("ladder sampling needs T_r = N = {}, got {}", cfg.window, cfg.reduced)));
    }
    collect(denoiser, sched, cond, idle, frames, cfg)
}

fn collect<D: Denoiser + ?Sized>(
    denoiser: &D,
    sched: &NoiseSchedule,
    cond: &CondSource,
    idle: &[f64],
    frames: usize,
    cfg: &StreamConfig,
) -> Result<(Vec<Frame>, StreamReport), StreamError> {
    let sampler = Sampler::new(denoiser, sched, cfg.clone())?;
    let mut out = Vec::with_capacity(frames);
    let report = sampler.run(idle, cond, frames, |_, f| out.push(f.to_vec()))?;
    Ok((out, report))
}
