//! Engine configuration: a plain `key = value` text file.
//!
//! `#` starts a comment; blank lines are ignored; keys are case-sensitive and
//! may appear once. `T`, `N` and `n_cont` are required, everything else has a
//! default. See [`CONFIG_KEYS`] for the full list.

use std::collections::HashSet;
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

use crate::diffusion::SamplerKind;
use crate::model::AdamConfig;
use crate::schedule::{LossWeighting, DEFAULT_BETA_1, DEFAULT_BETA_T};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: unknown key '{key}'")]
    UnknownKey { line: usize, key: String },
    #[error("missing required key '{0}'")]
    Missing(&'static str),
    #[error("{first}/{second}: {msg}")]
    Constraint { first: &'static str, second: &'static str, msg: String },
    #[error("{key}: {msg}")]
    Value { key: &'static str, msg: String },
    #[error("cannot read config: {0}")]
    Io(String),
}

/// `(key, default, description)` for every accepted key.
pub const CONFIG_KEYS: &[(&str, &str, &str)] = &[
    ("T", "required", "number of noise levels"),
    ("N", "required", "rolling window length in frames; must divide T"),
    ("n_cont", "required", "context frames prepended to the window"),
    ("beta1", "4e-5", "variance of level 1 (context-noise variance)"),
    ("betaT", "2e-2", "variance of level T"),
    ("T_r", "T", "reduced level count used for sampling; multiple of N"),
    ("l", "1", "ladder step size for sampling; must divide N"),
    ("sampler", "ddpm", "reverse update: ddpm or ddim"),
    ("lambda", "0.1", "inertial-loss weight for ladder training"),
    ("ofs", "false", "enable on-the-fly smoothing of emitted blocks"),
    ("tau", "0.9", "cosine-similarity threshold for smoothing"),
    ("weighting", "uniform", "per-frame loss weight: uniform or clamped_snr"),
    ("lambda_min", "0", "lower clamp of the SNR weight"),
    ("lambda_max", "10", "upper clamp of the SNR weight"),
    ("context_noise", "true", "noise context frames at level 1 during training"),
    ("lr", "1e-3", "learning rate"),
    ("weight_decay", "0.005", "decoupled weight decay"),
    ("dropout", "0.2", "dropout rate on hidden activations"),
    ("adam_beta1", "0.9", "first-moment decay"),
    ("adam_beta2", "0.999", "second-moment decay"),
    ("adam_eps", "1e-8", "optimizer epsilon"),
    ("epochs", "200", "training epochs"),
    ("batch_size", "32", "windows per optimizer step"),
    ("batches_per_epoch", "8", "optimizer steps per epoch"),
    ("hidden", "256", "hidden layer width"),
    ("depth", "3", "number of hidden layers"),
    ("time_dim", "32", "time-embedding size"),
    ("ladder_stages", "", "comma-separated ladder step sizes for progressive fine-tuning, e.g. 2,4"),
    ("ladder_context", "", "context length per fine-tuning stage (defaults to n_cont)"),
    ("finetune_epochs", "100", "epochs per fine-tuning stage"),
    ("finetune_lr", "1e-4", "learning rate during fine-tuning"),
    ("seed", "0", "root random seed"),
];

/// One progressive fine-tuning stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LadderStage {
    pub step: usize,
    pub n_cont: usize,
    /// Window length for this stage; context plus window stays constant.
    pub window: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EngineConfig {
    pub levels: usize,
    pub window: usize,
    pub n_cont: usize,
    pub beta1: f64,
    pub beta_t: f64,
    pub reduced_levels: usize,
    pub ladder: usize,
    pub sampler: SamplerKind,
    pub inertial_lambda: f64,
    pub ofs: bool,
    pub tau: f64,
    pub weighting: LossWeighting,
    pub context_noise: bool,
    pub adam: AdamConfig,
    pub dropout: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub batches_per_epoch: usize,
    pub hidden: usize,
    pub depth: usize,
    pub time_dim: usize,
    pub ladder_stages: Vec<LadderStage>,
    pub finetune_epochs: usize,
    pub finetune_lr: f64,
    pub seed: u64,
}

impl EngineConfig {
    /// Defaults around the three required values (not yet validated).
    pub fn with_required(levels: usize, window: usize, n_cont: usize) -> Self {
        EngineConfig {
            levels,
            window,
            n_cont,
            beta1: DEFAULT_BETA_1,
            beta_t: DEFAULT_BETA_T,
            reduced_levels: levels,
            ladder: 1,
            sampler: SamplerKind::Ddpm,
            inertial_lambda: 0.1,
            ofs: false,
            tau: 0.9,
            weighting: LossWeighting::Uniform,
            context_noise: true,
            adam: AdamConfig::default(),
            dropout: 0.2,
            epochs: 200,
            batch_size: 32,
            batches_per_epoch: 8,
            hidden: 256,
            depth: 3,
            time_dim: 32,
            ladder_stages: Vec::new(),
            finetune_epochs: 100,
            finetune_lr: 1e-4,
            seed: 0,
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| ConfigError::Io(format!("{}: {e}", path.as_ref().display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut entries: Vec<(usize, &str, &str)> = Vec::new();
        let mut seen = HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| ConfigError::Parse { line, msg: format!("expected 'key = value', got '{content}'") })?;
            let (key, value) = (key.trim(), value.trim());
            if !CONFIG_KEYS.iter().any(|(k, _, _)| *k == key) {
                return Err(ConfigError::UnknownKey { line, key: key.to_string() });
            }
            if !seen.insert(key) {
                return Err(ConfigError::Parse { line, msg: format!("duplicate key '{key}'") });
            }
            entries.push((line, key, value));
        }
        let find = |k: &str| entries.iter().find(|(_, key, _)| *key == k).copied();
        let required = |k: &'static str| -> Result<usize, ConfigError> {
            let (line, _, v) = find(k).ok_or(ConfigError::Missing(k))?;
            parse_value(line, k, v)
        };
        let mut cfg = EngineConfig::with_required(required("T")?, required("N")?, required("n_cont")?);
        cfg.reduced_levels = cfg.levels;
        let mut stage_steps: Vec<usize> = Vec::new();
        let mut stage_context: Vec<usize> = Vec::new();
        for &(line, key, value) in &entries {
            match key {
                "T" | "N" | "n_cont" => {}
                "beta1" => cfg.beta1 = parse_value(line, key, value)?,
                "betaT" => cfg.beta_t = parse_value(line, key, value)?,
                "T_r" => cfg.reduced_levels = parse_value(line, key, value)?,
                "l" => cfg.ladder = parse_value(line, key, value)?,
                "sampler" => cfg.sampler = parse_value(line, key, value)?,
                "lambda" => cfg.inertial_lambda = parse_value(line, key, value)?,
                "ofs" => cfg.ofs = parse_value(line, key, value)?,
                "tau" => cfg.tau = parse_value(line, key, value)?,
                "weighting" => {
                    cfg.weighting = match value {
                        "uniform" => LossWeighting::Uniform,
                        "clamped_snr" => LossWeighting::ClampedSnr { min: 0.0, max: 10.0 },
                        other => {
                            return Err(ConfigError::Parse {
                                line,
                                msg: format!("weighting must be 'uniform' or 'clamped_snr', got '{other}'"),
                            })
                        }
                    }
                }
                "lambda_min" | "lambda_max" => {}
                "context_noise" => cfg.context_noise = parse_value(line, key, value)?,
                "lr" => cfg.adam.lr = parse_value(line, key, value)?,
                "weight_decay" => cfg.adam.weight_decay = parse_value(line, key, value)?,
                "dropout" => cfg.dropout = parse_value(line, key, value)?,
                "adam_beta1" => cfg.adam.beta1 = parse_value(line, key, value)?,
                "adam_beta2" => cfg.adam.beta2 = parse_value(line, key, value)?,
                "adam_eps" => cfg.adam.eps = parse_value(line, key, value)?,
                "epochs" => cfg.epochs = parse_value(line, key, value)?,
                "batch_size" => cfg.batch_size = parse_value(line, key, value)?,
                "batches_per_epoch" => cfg.batches_per_epoch = parse_value(line, key, value)?,
                "hidden" => cfg.hidden = parse_value(line, key, value)?,
                "depth" => cfg.depth = parse_value(line, key, value)?,
                "time_dim" => cfg.time_dim = parse_value(line, key, value)?,
                "ladder_stages" => stage_steps = parse_list(line, value)?,
                "ladder_context" => stage_context = parse_list(line, value)?,
                "finetune_epochs" => cfg.finetune_epochs = parse_value(line, key, value)?,
                "finetune_lr" => cfg.finetune_lr = parse_value(line, key, value)?,
                "seed" => cfg.seed = parse_value(line, key, value)?,
                _ => unreachable!("key list checked above"),
            }
        }
        if let LossWeighting::ClampedSnr { ref mut min, ref mut max } = cfg.weighting {
            if let Some((line, k, v)) = find("lambda_min") {
                *min = parse_value(line, k, v)?;
            }
            if let Some((line, k, v)) = find("lambda_max") {
                *max = parse_value(line, k, v)?;
            }
        }
        if !stage_context.is_empty() && stage_context.len() != stage_steps.len() {
            return Err(ConfigError::Constraint {
                first: "ladder_stages",
                second: "ladder_context",
                msg: format!("{} stages but {} context lengths", stage_steps.len(), stage_context.len()),
            });
        }
        cfg.ladder_stages = stage_steps
            .iter()
            .enumerate()
            .map(|(i, &step)| cfg.stage(step, stage_context.get(i).copied().unwrap_or(cfg.n_cont)))
            .collect();
        cfg.validate()?;
        Ok(cfg)
    }

    /// Fine-tuning stage keeping `n_cont + N` fixed.
    pub fn stage(&self, step: usize, n_cont: usize) -> LadderStage {
        let span = self.n_cont + self.window;
        LadderStage { step, n_cont, window: span.saturating_sub(n_cont) }
    }

    pub fn span(&self) -> usize {
        self.n_cont + self.window
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let c = |first, second, msg: String| Err(ConfigError::Constraint { first, second, msg });
        if self.window == 0 {
            return Err(ConfigError::Value { key: "N", msg: "must be positive".into() });
        }
        if self.levels < 2 {
            return Err(ConfigError::Value { key: "T", msg: "must be at least 2".into() });
        }
        if self.levels % self.window != 0 {
            return c("T", "N", format!("T mod N ≠ 0: T ({}) is not divisible by N ({})", self.levels, self.window));
        }
        if self.n_cont == 0 {
            return Err(ConfigError::Value { key: "n_cont", msg: "must be at least 1".into() });
        }
        if !(self.beta1 > 0.0 && self.beta1 <= self.beta_t && self.beta_t < 1.0) {
            return c("beta1", "betaT", format!("need 0 < beta1 <= betaT < 1 (got {}, {})", self.beta1, self.beta_t));
        }
        if self.reduced_levels == 0 || self.reduced_levels % self.window != 0 {
            return c("T_r", "N", format!("T_r mod N ≠ 0: T_r ({}) is not divisible by N ({})", self.reduced_levels, self.window));
        }
        if self.reduced_levels > self.levels {
            return c("T_r", "T", format!("T_r ({}) exceeds T ({})", self.reduced_levels, self.levels));
        }
        if self.ladder == 0 || self.window % self.ladder != 0 {
            return c("N", "l", format!("N mod l ≠ 0: N ({}) is not divisible by l ({})", self.window, self.ladder));
        }
        if self.ladder > 1 && self.reduced_levels != self.window {
            return c(
                "l",
                "T_r",
                format!("ladder step l = {} needs T_r = N ({}), got T_r = {}", self.ladder, self.window, self.reduced_levels),
            );
        }
        if !(self.inertial_lambda >= 0.0) {
            return Err(ConfigError::Value { key: "lambda", msg: "must be non-negative".into() });
        }
        if !(-1.0..=1.0).contains(&self.tau) {
            return Err(ConfigError::Value { key: "tau", msg: format!("must lie in [-1, 1], got {}", self.tau) });
        }
        if let LossWeighting::ClampedSnr { min, max } = self.weighting {
            if !(min >= 0.0 && min <= max) {
                return c("lambda_min", "lambda_max", format!("need 0 <= lambda_min <= lambda_max (got {min}, {max})"));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ConfigError::Value { key: "dropout", msg: "must lie in [0, 1)".into() });
        }
        if self.batch_size == 0 || self.batches_per_epoch == 0 {
            return c("batch_size", "batches_per_epoch", "must both be positive".into());
        }
        if self.hidden == 0 || self.depth == 0 || self.time_dim == 0 {
            return c("hidden", "depth", "network sizes must be positive".into());
        }
        for st in &self.ladder_stages {
            if st.n_cont == 0 || st.n_cont >= self.span() {
                return c("ladder_context", "N", format!("stage context {} leaves no window frames", st.n_cont));
            }
            if st.step == 0 || st.window % st.step != 0 {
                return c(
                    "ladder_stages",
                    "N",
                    format!("stage window {} (n_cont {}) is not divisible by l = {}", st.window, st.n_cont, st.step),
                );
            }
            if st.window > self.levels {
                return c("ladder_context", "T", format!("stage window {} exceeds T ({})", st.window, self.levels));
            }
        }
        Ok(())
    }

    /// Apply `seed` override (from the command line).
    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.seed = s;
        }
        self
    }
}

fn parse_value<T: FromStr>(line: usize, key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value
        .parse::<T>()
        .map_err(|e| ConfigError::Parse { line, msg: format!("bad value '{value}' for '{key}': {e}") })
}

fn parse_list(line: usize, value: &str) -> Result<Vec<usize>, ConfigError> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|e| ConfigError::Parse { line, msg: format!("bad list entry '{s}': {e}") }))
        .collect()
}
