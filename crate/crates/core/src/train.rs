//! Rolling-window training, the inertial objective for ladder fine-tuning,
//! and progressive ladder fine-tuning.

use std::time::Instant;

use ndarray::Array2;
use thiserror::Error;

use crate::data::{EngineConfig, LadderStage, Normalizer, SequenceStore};
use crate::diffusion::{forward_noise, Frame};
use crate::model::{Adam, AdamConfig, Denoiser, DenoiserInput, Gradients, MlpConfig, MlpDenoiser, ModelError};
use crate::rng::{tag, CounterRng, RngKey};
use crate::schedule::{LadderLevels, LossWeighting, NoiseSchedule, ReducedSchedule, RollingLevels, ScheduleError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("sequence of length {len} is shorter than n_cont + N = {need}")]
    TooShort { len: usize, need: usize },
    #[error("training data is empty")]
    Empty,
    #[error("non-finite loss at step {step}")]
    NonFinite { step: u64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub batches_per_epoch: usize,
    pub adam: AdamConfig,
    pub dropout: f64,
    pub window: usize,
    pub n_cont: usize,
    /// Ladder step size; 1 trains the plain rolling schedule.
    pub ladder: usize,
    pub inertial_lambda: f64,
    pub weighting: LossWeighting,
    /// Noise context frames at level 1 (otherwise they stay clean).
    pub context_noise: bool,
    pub seed: u64,
}

impl TrainConfig {
    /// Base (rolling, `l = 1`) training settings from the engine config.
    pub fn base(cfg: &EngineConfig) -> Self {
        TrainConfig {
            epochs: cfg.epochs,
            batch_size: cfg.batch_size,
            batches_per_epoch: cfg.batches_per_epoch,
            adam: cfg.adam,
            dropout: cfg.dropout,
            window: cfg.window,
            n_cont: cfg.n_cont,
            ladder: 1,
            inertial_lambda: 0.0,
            weighting: cfg.weighting,
            context_noise: cfg.context_noise,
            seed: cfg.seed,
        }
    }

    /// Settings for one ladder fine-tuning stage.
    pub fn stage(cfg: &EngineConfig, stage: &LadderStage) -> Self {
        TrainConfig {
            epochs: cfg.finetune_epochs,
            adam: AdamConfig { lr: cfg.finetune_lr, ..cfg.adam },
            window: stage.window,
            n_cont: stage.n_cont,
            ladder: stage.step,
            inertial_lambda: cfg.inertial_lambda,
            ..Self::base(cfg)
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.n_cont < 1 {
            return Err(TrainError::Config("n_cont must be at least 1".into()));
        }
        if self.ladder == 0 || self.window % self.ladder != 0 {
            return Err(TrainError::Config(format!("N ({}) is not divisible by l ({})", self.window, self.ladder)));
        }
        if !(self.inertial_lambda >= 0.0) {
            return Err(TrainError::Config("lambda must be non-negative".into()));
        }
        if self.batch_size == 0 || self.batches_per_epoch == 0 {
            return Err(TrainError::Config("batch_size and batches_per_epoch must be positive".into()));
        }
        Ok(())
    }

    pub fn span(&self) -> usize {
        self.n_cont + self.window
    }
}

/// One normalized training sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSeq {
    pub frames: Vec<Frame>,
    pub cond: Vec<Vec<f64>>,
    pub style: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSet {
    pub seqs: Vec<TrainSeq>,
    pub frame_dim: usize,
    pub cond_dim: usize,
    pub n_styles: usize,
}

impl TrainSet {
    pub fn from_stores(stores: &[SequenceStore], norm: &Normalizer) -> Result<Self, TrainError> {
        let first = stores.first().ok_or(TrainError::Empty)?;
        let (frame_dim, cond_dim) = (first.dim, first.cond_dim);
        if stores.iter().any(|s| s.dim != frame_dim || s.cond_dim != cond_dim) {
            return Err(TrainError::Config("sequences disagree on dimensions".into()));
        }
        let seqs = stores
            .iter()
            .map(|s| TrainSeq { frames: norm.normalize_store(s), cond: s.cond_rows_f64(), style: s.style as usize })
            .collect();
        let n_styles = stores.iter().map(|s| s.style as usize + 1).max().unwrap_or(1);
        Ok(TrainSet { seqs, frame_dim, cond_dim, n_styles })
    }

    /// Mean normalized frame of each style, used as its idle pose.
    pub fn idle_poses(&self) -> Vec<Frame> {
        (0..self.n_styles)
            .map(|st| {
                let mut sum = vec![0.0; self.frame_dim];
                let mut n = 0usize;
                for s in self.seqs.iter().filter(|s| s.style == st) {
                    for f in &s.frames {
                        sum.iter_mut().zip(f).for_each(|(a, b)| *a += b);
                        n += 1;
                    }
                }
                sum.iter().map(|v| if n > 0 { v / n as f64 } else { 0.0 }).collect()
            })
            .collect()
    }
}

/// A clean training window with its context and conditioning.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingWindow {
    pub context: Vec<Frame>,
    pub x0: Vec<Frame>,
    /// Conditioning for the `n_cont + N` positions.
    pub cond: Vec<Vec<f64>>,
    /// Index of the first window frame in the sequence.
    pub j: usize,
    /// Phase drawn uniformly from `1..=s`.
    pub t0: usize,
}

/// Draw `j` uniformly from `n_cont..=L-N` and `t0` uniformly from `1..=s`.
pub fn sample_training_window(
    seq: &TrainSeq,
    window: usize,
    n_cont: usize,
    s: usize,
    rng: &mut CounterRng,
) -> Result<TrainingWindow, TrainError> {
    let len = seq.frames.len();
    if len < window + n_cont {
        return Err(TrainError::TooShort { len, need: window + n_cont });
    }
    if s == 0 {
        return Err(TrainError::Config("phase range must be positive".into()));
    }
    let j = rng.range_inclusive(n_cont, len - window);
    let t0 = rng.range_inclusive(1, s);
    Ok(TrainingWindow {
        context: seq.frames[j - n_cont..j].to_vec(),
        x0: seq.frames[j..j + window].to_vec(),
        cond: seq.cond[j - n_cont..j + window].to_vec(),
        j,
        t0,
    })
}

fn length_check(a: usize, b: usize) -> Result<(), TrainError> {
    if a != b {
        return Err(TrainError::Config(format!("length mismatch: {a} predictions for {b} targets")));
    }
    Ok(())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Weighted squared error `sum_n a(t_n) |x0_n - xhat_n|^2`.
pub fn base_loss(
    xhat: &[Frame],
    x0: &[Frame],
    levels: &[usize],
    weighting: LossWeighting,
    sched: &NoiseSchedule,
) -> Result<f64, TrainError> {
    length_check(xhat.len(), x0.len())?;
    length_check(levels.len(), x0.len())?;
    let mut total = 0.0;
    for ((h, x), &t) in xhat.iter().zip(x0).zip(levels) {
        total += weighting.weight(sched, t)? * sq_dist(x, h);
    }
    Ok(total)
}

/// Squared error minus `2 lambda` times the summed inner products of adjacent
/// residuals (pairs `n, n+1` for `n` up to `N-2`). The correlation term is
/// unweighted.
pub fn inertial_loss(xhat: &[Frame], x0: &[Frame], lambda: f64) -> Result<f64, TrainError> {
    length_check(xhat.len(), x0.len())?;
    let r = residuals(xhat, x0);
    let sq: f64 = r.iter().map(|v| v.iter().map(|a| a * a).sum::<f64>()).sum();
    Ok(sq - 2.0 * lambda * adjacent_inner(&r))
}

fn residuals(xhat: &[Frame], x0: &[Frame]) -> Vec<Frame> {
    x0.iter().zip(xhat).map(|(x, h)| x.iter().zip(h).map(|(a, b)| a - b).collect()).collect()
}

fn adjacent_inner(r: &[Frame]) -> f64 {
    r.windows(2).map(|w| w[0].iter().zip(&w[1]).map(|(a, b)| a * b).sum::<f64>()).sum()
}

/// Full objective: weighted squared error minus the inertial reward.
/// Returns the loss and `dL/dxhat`.
pub fn window_loss_grad(
    xhat: &[Frame],
    x0: &[Frame],
    levels: &[usize],
    weighting: LossWeighting,
    lambda: f64,
    sched: &NoiseSchedule,
) -> Result<(f64, Vec<Frame>), TrainError> {
    let mut loss = base_loss(xhat, x0, levels, weighting, sched)?;
    let r = residuals(xhat, x0);
    loss -= 2.0 * lambda * adjacent_inner(&r);
    let n = r.len();
    let mut grad = Vec::with_capacity(n);
    for i in 0..n {
        let a = weighting.weight(sched, levels[i])?;
        let g: Frame = (0..r[i].len())
            .map(|k| {
                let mut v = -2.0 * a * r[i][k];
                if i > 0 {
                    v += 2.0 * lambda * r[i - 1][k];
                }
                if i + 1 < n {
                    v += 2.0 * lambda * r[i + 1][k];
                }
                v
            })
            .collect();
        grad.push(g);
    }
    Ok((loss, grad))
}

/// How training windows are assigned noise levels.
#[derive(Debug, Clone)]
enum LevelPlan {
    Rolling { total: usize, window: usize, step: usize },
    Ladder { step: usize, window: usize, reduced: ReducedSchedule },
}

impl LevelPlan {
    fn new(sched: &NoiseSchedule, cfg: &TrainConfig) -> Result<Self, TrainError> {
        let total = sched.levels();
        if cfg.ladder == 1 {
            let step = crate::schedule::rolling_step(total, cfg.window)?;
            Ok(LevelPlan::Rolling { total, window: cfg.window, step })
        } else {
            let reduced = ReducedSchedule::new(total, cfg.window, cfg.window)?;
            Ok(LevelPlan::Ladder { step: cfg.ladder, window: cfg.window, reduced })
        }
    }

    /// Phase range to draw from.
    fn phases(&self) -> usize {
        match self {
            LevelPlan::Rolling { step, .. } => *step,
            LevelPlan::Ladder { step, .. } => *step,
        }
    }

    /// Base-schedule level of every window frame for `phase`.
    fn levels(&self, phase: usize) -> Result<Vec<usize>, TrainError> {
        match self {
            LevelPlan::Rolling { total, window, step } => {
                let rl = RollingLevels::new(*total, *window, phase)?;
                debug_assert!(rl.levels.iter().enumerate().all(|(n, &t)| t > step * n && t <= step * (n + 1)));
                Ok(rl.levels)
            }
            LevelPlan::Ladder { step, window, reduced } => {
                let ld = LadderLevels::new(*window, *step, phase)?;
                // Phases above 1 push the top block past N; it is held at N.
                Ok(ld.per_frame().into_iter().map(|k| reduced.map(k.min(*window))).collect())
            }
        }
    }
}

/// One training example: the denoiser input and the clean target.
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub input: DenoiserInput,
    pub x0: Vec<Frame>,
}

/// Pick a sequence with probability proportional to its number of legal
/// window positions.
fn pick_sequence(data: &TrainSet, span: usize, window: usize, rng: &mut CounterRng) -> Result<usize, TrainError> {
    let counts: Vec<usize> = data.seqs.iter().map(|s| (s.frames.len() + 1).saturating_sub(span)).collect();
    let total: usize = counts.iter().sum();
    if total == 0 {
        let len = data.seqs.iter().map(|s| s.frames.len()).max().unwrap_or(0);
        return Err(TrainError::TooShort { len, need: span.max(window) });
    }
    let mut u = rng.range_inclusive(0, total - 1);
    for (i, &c) in counts.iter().enumerate() {
        if u < c {
            return Ok(i);
        }
        u -= c;
    }
    unreachable!("draw below total")
}

fn make_example(
    data: &TrainSet,
    cfg: &TrainConfig,
    plan: &LevelPlan,
    sched: &NoiseSchedule,
    key: RngKey,
) -> Result<TrainExample, TrainError> {
    let mut rng = key.derive(0).rng();
    let si = pick_sequence(data, cfg.span(), cfg.window, &mut rng)?;
    let seq = &data.seqs[si];
    let w = sample_training_window(seq, cfg.window, cfg.n_cont, plan.phases(), &mut rng)?;
    let levels = plan.levels(w.t0)?;
    let mut noise = key.derive(1).rng();
    let context_level = if cfg.context_noise { 1 } else { 0 };
    let context = w
        .context
        .iter()
        .map(|f| forward_noise(f, context_level, sched, &mut noise))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| TrainError::Config(e.to_string()))?;
    let window = w
        .x0
        .iter()
        .zip(&levels)
        .map(|(f, &t)| forward_noise(f, t, sched, &mut noise))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| TrainError::Config(e.to_string()))?;
    let input = DenoiserInput {
        context_levels: vec![context_level; context.len()],
        context,
        window,
        levels,
        cond: w.cond,
        style: Some(seq.style),
    };
    Ok(TrainExample { input, x0: w.x0 })
}

/// Settings of the per-batch objective.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveConfig {
    pub n_cont: usize,
    pub weighting: LossWeighting,
    pub lambda: f64,
    pub dropout: f64,
}

/// Mean objective over a batch and its parameter gradients.
pub fn batch_objective(
    model: &MlpDenoiser,
    batch: &[TrainExample],
    obj: &ObjectiveConfig,
    sched: &NoiseSchedule,
    mask_rng: Option<&mut CounterRng>,
) -> Result<(f64, Gradients), TrainError> {
    let d = model.config.frame_dim;
    let inputs: Vec<DenoiserInput> = batch.iter().map(|e| e.input.clone()).collect();
    let x = model.encode_batch(&inputs)?;
    let (out, cache) = model.forward_train(x, obj.dropout, mask_rng);
    let mut d_out = Array2::zeros(out.raw_dim());
    let mut loss = 0.0;
    let scale = 1.0 / batch.len() as f64;
    for (b, ex) in batch.iter().enumerate() {
        let xhat = model.window_frames(out.row(b), obj.n_cont);
        let (l, g) = window_loss_grad(&xhat, &ex.x0, &ex.input.levels, obj.weighting, obj.lambda, sched)?;
        loss += l * scale;
        for (n, gf) in g.iter().enumerate() {
            let p = obj.n_cont + n;
            for k in 0..d {
                d_out[[b, p * d + k]] = gf[k] * scale;
            }
        }
    }
    Ok((loss, model.backward(&cache, &d_out)))
}

/// Build the MLP for a dataset and engine configuration.
pub fn init_model(cfg: &EngineConfig, data: &TrainSet) -> MlpDenoiser {
    let mc = MlpConfig {
        frame_dim: data.frame_dim,
        cond_dim: data.cond_dim,
        n_styles: data.n_styles,
        span: cfg.span(),
        time_dim: cfg.time_dim,
        hidden: cfg.hidden,
        depth: cfg.depth,
    };
    let mut rng = RngKey::new(cfg.seed).derive(tag::INIT).rng();
    MlpDenoiser::new(mc, &mut rng, false)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    pub step_losses: Vec<f64>,
    pub epoch_means: Vec<f64>,
}

impl TrainReport {
    pub fn first_epoch(&self) -> f64 {
        self.epoch_means.first().copied().unwrap_or(f64::NAN)
    }

    pub fn last_epoch(&self) -> f64 {
        self.epoch_means.last().copied().unwrap_or(f64::NAN)
    }
}

/// Per-step progress passed to the logging callback.
#[derive(Debug, Clone, Copy)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    pub seconds: f64,
}

pub fn train_epochs(
    model: &mut MlpDenoiser,
    data: &TrainSet,
    cfg: &TrainConfig,
    sched: &NoiseSchedule,
) -> Result<TrainReport, TrainError> {
    train_epochs_with(model, data, cfg, sched, |_| {})
}

/// Train for `cfg.epochs` epochs; batch losses are means over the batch.
pub fn train_epochs_with<F: FnMut(StepRecord)>(
    model: &mut MlpDenoiser,
    data: &TrainSet,
    cfg: &TrainConfig,
    sched: &NoiseSchedule,
    mut on_step: F,
) -> Result<TrainReport, TrainError> {
    cfg.validate()?;
    if data.seqs.is_empty() {
        return Err(TrainError::Empty);
    }
    if cfg.span() != model.config.span {
        return Err(TrainError::Config(format!(
            "n_cont + N = {} does not match the model span {}",
            cfg.span(),
            model.config.span
        )));
    }
    if !cfg.context_noise {
        log::warn!("context frames are left clean during training (default noises them at level 1)");
    }
    let plan = LevelPlan::new(sched, cfg)?;
    let root = RngKey::new(cfg.seed);
    let mut opt = Adam::new(cfg.adam, model.param_count());
    let mut report = TrainReport::default();
    let start = Instant::now();
    for _ in 0..cfg.epochs {
        let mut epoch_sum = 0.0;
        for _ in 0..cfg.batches_per_epoch {
            let step = model.steps;
            let batch = (0..cfg.batch_size)
                .map(|b| make_example(data, cfg, &plan, sched, root.path(&[tag::TRAIN, step, b as u64])))
                .collect::<Result<Vec<_>, _>>()?;
            for ex in &batch {
                debug_assert!(ex.input.context_levels.iter().all(|&t| t == usize::from(cfg.context_noise)));
            }
            let mut mask_rng = root.path(&[tag::DROPOUT, step]).rng();
            let obj = ObjectiveConfig { n_cont: cfg.n_cont, weighting: cfg.weighting, lambda: cfg.inertial_lambda, dropout: cfg.dropout };
            let (loss, grads) = batch_objective(model, &batch, &obj, sched, Some(&mut mask_rng))?;
            if !loss.is_finite() {
                return Err(TrainError::NonFinite { step: step + 1 });
            }
            opt.step(model, &grads).map_err(|e| match e {
                ModelError::NonFiniteGradient { step } => TrainError::NonFinite { step },
                other => other.into(),
            })?;
            report.step_losses.push(loss);
            epoch_sum += loss;
            on_step(StepRecord { step: model.steps, loss, seconds: start.elapsed().as_secs_f64() });
        }
        report.epoch_means.push(epoch_sum / cfg.batches_per_epoch as f64);
    }
    Ok(report)
}

/// Mean objective of any denoiser over `windows` freshly sampled windows.
pub fn evaluate_loss<D: Denoiser + ?Sized>(
    denoiser: &D,
    data: &TrainSet,
    cfg: &TrainConfig,
    sched: &NoiseSchedule,
    windows: usize,
    seed: u64,
) -> Result<f64, TrainError> {
    cfg.validate()?;
    let plan = LevelPlan::new(sched, cfg)?;
    let root = RngKey::new(seed).derive(tag::EVAL);
    let mut total = 0.0;
    for i in 0..windows {
        let ex = make_example(data, cfg, &plan, sched, root.derive(i as u64))?;
        let xhat = denoiser.denoise(&ex.input)?;
        total += window_loss_grad(&xhat, &ex.x0, &ex.input.levels, cfg.weighting, cfg.inertial_lambda, sched)?.0;
    }
    Ok(total / windows.max(1) as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageReport {
    pub stage: LadderStage,
    pub report: TrainReport,
}

/// Train successive ladder stages, each starting from the previous weights.
pub fn progressive_finetune(
    model: &mut MlpDenoiser,
    data: &TrainSet,
    cfg: &EngineConfig,
    stages: &[LadderStage],
    sched: &NoiseSchedule,
) -> Result<Vec<StageReport>, TrainError> {
    progressive_finetune_with(model, data, cfg, stages, sched, |_, _| {})
}

/// [`progressive_finetune`] with a per-step callback receiving the stage.
pub fn progressive_finetune_with(
    model: &mut MlpDenoiser,
    data: &TrainSet,
    cfg: &EngineConfig,
    stages: &[LadderStage],
    sched: &NoiseSchedule,
    mut on_step: impl FnMut(&LadderStage, StepRecord),
) -> Result<Vec<StageReport>, TrainError> {
    let mut out = Vec::with_capacity(stages.len());
    if let Some(first) = stages.first() {
        if model.steps == 0 {
            log::warn!("ladder fine-tuning from an untrained model (l = {}); base training first is recommended", first.step);
        } else if first.step > 2 {
            log::warn!("ladder schedule starts at l = {} without the intermediate l = 2 stage", first.step);
        }
    }
    for stage in stages {
        let tc = TrainConfig::stage(cfg, stage);
        log::info!("fine-tuning stage l = {}, n_cont = {}, N = {}", stage.step, stage.n_cont, stage.window);
        let report = train_epochs_with(model, data, &tc, sched, |r| on_step(stage, r))?;
        out.push(StageReport { stage: *stage, report });
    }
    Ok(out)
}
