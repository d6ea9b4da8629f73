//! The `rolling` command-line tool.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure, 3 validation
//! failure (a configuration or schedule constraint does not hold).

use std::fmt::Display;
use std::hash::{DefaultHasher, Hasher};
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::data::{
    export_csv, gen_ar1_corpus, gen_toy_corpus, load_sequence, save_sequence, ConfigError, EngineConfig, Normalizer,
    SequenceStore, ToyParams,
};
use crate::diffusion::{Frame, SamplerKind};
use crate::eval::{evaluate, PairSampling};
use crate::model::{Checkpoint, Coupling, Denoiser, OracleDenoiser, PaddedDenoiser};
use crate::rng::{tag, CounterRng, RngKey};
use crate::schedule::{
    sweep_ladder, sweep_rolling, BetaShape, LadderLevels, NoiseSchedule, ReducedSchedule, RollingLevels, ScheduleError,
};
use crate::stream::{CondSource, Sampler, StreamConfig, StreamError, StreamReport, TailPolicy};
use crate::train::{init_model, progressive_finetune_with, train_epochs_with, StepRecord, TrainConfig, TrainError, TrainSet};

#[derive(Debug, Parser)]
#[command(name = "rolling", version, about = "Rolling-window diffusion: data, training, streaming and metrics")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus of sequence files.
    GenData(GenDataArgs),
    /// Train a denoiser on the rolling schedule.
    Train(TrainArgs),
    /// Fine-tune a trained checkpoint through ladder stages.
    FinetuneLadder(FinetuneArgs),
    /// Stream frames from a checkpoint.
    Stream(StreamArgs),
    /// Measure call counts and throughput for several ladder step sizes.
    Bench(BenchArgs),
    /// Compare a generated sequence with a reference.
    Eval(EvalArgs),
    /// Print level tables and run exhaustive schedule checks.
    Verify(VerifyArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CorpusKind {
    Toy,
    Ar1,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Corpus type.
    #[arg(long, value_enum, default_value = "toy")]
    pub kind: CorpusKind,
    /// Output directory (created if missing).
    #[arg(long)]
    pub out: PathBuf,
    /// Number of sequences.
    #[arg(long, default_value_t = 8)]
    pub sequences: usize,
    /// Frames per sequence.
    #[arg(long, default_value_t = 2000)]
    pub len: usize,
    /// Pose features per frame.
    #[arg(long, default_value_t = 12)]
    pub dim: usize,
    /// Conditioning features per frame (toy corpus).
    #[arg(long = "cond-dim", default_value_t = 4)]
    pub cond_dim: usize,
    /// Number of styles (toy corpus).
    #[arg(long, default_value_t = 3)]
    pub styles: usize,
    /// Frame rate (toy corpus).
    #[arg(long, default_value_t = 20.0)]
    pub fps: f32,
    /// AR(1) coefficient (ar1 corpus).
    #[arg(long, default_value_t = 0.9)]
    pub phi: f64,
    /// AR(1) innovation standard deviation (ar1 corpus).
    #[arg(long = "sigma-x", default_value_t = 0.1)]
    pub sigma_x: f64,
    /// Also write a CSV next to each sequence file.
    #[arg(long)]
    pub csv: bool,
    /// Root random seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Engine configuration file.
    #[arg(long)]
    pub config: PathBuf,
    /// Sequence file or directory of `.rstm` files (repeatable).
    #[arg(long, required = true)]
    pub data: Vec<PathBuf>,
    /// Output checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
    /// Override the epoch count from the configuration.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Loss log path (default: `<out>.log`).
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Override the configuration seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    /// Engine configuration file.
    #[arg(long)]
    pub config: PathBuf,
    /// Sequence file or directory of `.rstm` files (repeatable).
    #[arg(long, required = true)]
    pub data: Vec<PathBuf>,
    /// Checkpoint to start from.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Output checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
    /// Ladder step sizes, e.g. `2,4` (default: `ladder_stages` from the configuration).
    #[arg(long, value_delimiter = ',')]
    pub stages: Vec<usize>,
    /// Context length per stage, e.g. `8,28` (default: `ladder_context` or n_cont).
    #[arg(long, value_delimiter = ',')]
    pub context: Vec<usize>,
    /// Override the per-stage epoch count.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Loss log path (default: `<out>.log`).
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Override the configuration seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct StreamArgs {
    /// Trained checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Sequence file whose conditioning drives the stream.
    #[arg(long)]
    pub cond: PathBuf,
    /// Frames to emit (default: the conditioning length).
    #[arg(long)]
    pub frames: Option<usize>,
    /// Ladder step size.
    #[arg(long, default_value_t = 1)]
    pub l: usize,
    /// Reduced level count (default: N when l > 1, otherwise T).
    #[arg(long = "T_r")]
    pub t_r: Option<usize>,
    /// Reverse update.
    #[arg(long, default_value = "ddpm")]
    pub mode: SamplerKind,
    /// Enable on-the-fly smoothing with this cosine threshold.
    #[arg(long = "ofs-tau")]
    pub ofs_tau: Option<f64>,
    /// Style id (default: the conditioning file's style).
    #[arg(long)]
    pub style: Option<usize>,
    /// Output sequence file.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the output as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Random seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Trained checkpoint (default: the analytic AR(1) denoiser).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Conditioning sequence file (default: silence).
    #[arg(long)]
    pub cond: Option<PathBuf>,
    /// Frames per run.
    #[arg(long, default_value_t = 1000)]
    pub frames: usize,
    /// Ladder step sizes to measure; l = 1 is always included as the baseline.
    #[arg(long, value_delimiter = ',', default_value = "1,2,4")]
    pub l: Vec<usize>,
    /// Noise levels of the analytic denoiser's schedule.
    #[arg(long = "T", default_value_t = 1000)]
    pub t: usize,
    /// Window length of the analytic denoiser.
    #[arg(long = "N", default_value_t = 100)]
    pub n: usize,
    /// Context length of the analytic denoiser.
    #[arg(long = "n-cont", default_value_t = 8)]
    pub n_cont: usize,
    /// Pose features of the analytic denoiser.
    #[arg(long, default_value_t = 12)]
    pub dim: usize,
    /// Reduced level count (default: N).
    #[arg(long = "T_r")]
    pub t_r: Option<usize>,
    /// Reverse update.
    #[arg(long, default_value = "ddpm")]
    pub mode: SamplerKind,
    /// Enable on-the-fly smoothing with this cosine threshold.
    #[arg(long = "ofs-tau")]
    pub ofs_tau: Option<f64>,
    /// Repetitions per step size; throughput is the median.
    #[arg(long, default_value_t = 1)]
    pub reps: usize,
    /// Extra arithmetic per denoiser call, to make the denoiser dominate.
    #[arg(long, default_value_t = 0)]
    pub work: u64,
    /// Write the CSV report here.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Random seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Generated sequence file.
    #[arg(long)]
    pub generated: PathBuf,
    /// Reference sequence file.
    #[arg(long)]
    pub reference: PathBuf,
    /// Diversity pairs to sample (default: all pairs).
    #[arg(long)]
    pub pairs: Option<usize>,
    /// Write the CSV report here.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Random seed for pair sampling.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Engine configuration file supplying defaults for the flags below.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Noise levels.
    #[arg(long = "T")]
    pub t: Option<usize>,
    /// Window length.
    #[arg(long = "N")]
    pub n: Option<usize>,
    /// Ladder step size.
    #[arg(long)]
    pub l: Option<usize>,
    /// Reduced level count.
    #[arg(long = "T_r")]
    pub t_r: Option<usize>,
    /// Variance of level 1.
    #[arg(long)]
    pub beta1: Option<f64>,
    /// Variance of level T.
    #[arg(long = "betaT")]
    pub beta_t: Option<f64>,
    /// Print every level instead of an abbreviated table.
    #[arg(long)]
    pub full: bool,
}

/// Failure classes with distinct exit codes.
#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 3,
            CliError::Runtime(_) => 2,
        }
    }
}

impl Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "validation error: {m}"),
            CliError::Runtime(e) => write!(f, "error: {e:#}"),
        }
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io(_) => CliError::Runtime(e.into()),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<ScheduleError> for CliError {
    fn from(e: ScheduleError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<StreamError> for CliError {
    fn from(e: StreamError) -> Self {
        match e {
            StreamError::Config(_) | StreamError::Schedule(_) => CliError::Validation(e.to_string()),
            other => CliError::Runtime(other.into()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) | TrainError::Schedule(_) => CliError::Validation(e.to_string()),
            other => CliError::Runtime(other.into()),
        }
    }
}

type CliResult = Result<(), CliError>;

/// Parse `argv` (including the program name), run, and return the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match dispatch(cli.command, &mut out) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}

pub fn dispatch(cmd: Command, out: &mut dyn Write) -> CliResult {
    match cmd {
        Command::GenData(a) => gen_data(a, out),
        Command::Train(a) => train(a, out),
        Command::FinetuneLadder(a) => finetune(a, out),
        Command::Stream(a) => stream(a, out),
        Command::Bench(a) => bench(a, out),
        Command::Eval(a) => eval(a, out),
        Command::Verify(a) => verify(a, out),
    }
}

fn gen_data(a: GenDataArgs, out: &mut dyn Write) -> CliResult {
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let stores: Vec<SequenceStore> = match a.kind {
        CorpusKind::Toy => {
            let params = ToyParams {
                sequences: a.sequences,
                len: a.len,
                dim: a.dim,
                cond_dim: a.cond_dim,
                styles: a.styles,
                fps: a.fps,
                ..ToyParams::default()
            };
            gen_toy_corpus(params, a.seed).map_err(|e| CliError::Validation(e.to_string()))?.sequences
        }
        CorpusKind::Ar1 => (0..a.sequences)
            .map(|i| {
                let seed = RngKey::new(a.seed).path(&[tag::DATA, i as u64]).raw();
                gen_ar1_corpus(a.phi, a.sigma_x, a.len, a.dim, seed)
            })
            .collect::<Result<_, _>>()
            .map_err(|e| CliError::Validation(e.to_string()))?,
    };
    for (i, s) in stores.iter().enumerate() {
        let path = a.out.join(format!("seq_{i:03}.rstm"));
        save_sequence(&path, s).with_context(|| format!("writing {}", path.display()))?;
        if a.csv {
            let f = std::fs::File::create(path.with_extension("csv"))?;
            export_csv(s, std::io::BufWriter::new(f)).map_err(|e| anyhow!(e))?;
        }
    }
    writeln!(out, "wrote {} sequences of {} frames to {}", stores.len(), a.len, a.out.display())?;
    Ok(())
}

/// Load every sequence named by `paths` (files, or directories of `.rstm`).
pub fn load_corpus(paths: &[PathBuf]) -> anyhow::Result<Vec<SequenceStore>> {
    let mut files = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(p)
                .with_context(|| format!("listing {}", p.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "rstm"))
                .collect();
            found.sort();
            files.extend(found);
        } else {
            files.push(p.clone());
        }
    }
    if files.is_empty() {
        return Err(anyhow!("no sequence files found"));
    }
    files
        .iter()
        .map(|f| load_sequence(f).with_context(|| format!("loading {}", f.display())))
        .collect()
}

fn schedule_for(cfg: &EngineConfig) -> Result<NoiseSchedule, CliError> {
    Ok(NoiseSchedule::build(cfg.levels, cfg.beta1, cfg.beta_t, BetaShape::Linear)?)
}

fn log_path(explicit: &Option<PathBuf>, out: &Path) -> PathBuf {
    explicit.clone().unwrap_or_else(|| {
        let mut p = out.as_os_str().to_owned();
        p.push(".log");
        PathBuf::from(p)
    })
}

struct LossLog {
    w: std::io::BufWriter<std::fs::File>,
    err: Option<std::io::Error>,
}

impl LossLog {
    fn create(path: &Path) -> anyhow::Result<Self> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?);
        writeln!(w, "step loss seconds")?;
        Ok(LossLog { w, err: None })
    }

    fn record(&mut self, r: StepRecord) {
        if self.err.is_none() {
            if let Err(e) = writeln!(self.w, "{} {:.17e} {:.3}", r.step, r.loss, r.seconds) {
                self.err = Some(e);
            }
        }
    }

    fn finish(mut self) -> anyhow::Result<()> {
        if let Some(e) = self.err {
            return Err(e.into());
        }
        self.w.flush()?;
        Ok(())
    }
}

fn train(a: TrainArgs, out: &mut dyn Write) -> CliResult {
    let mut cfg = EngineConfig::load(&a.config)?.with_seed(a.seed);
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    let stores = load_corpus(&a.data)?;
    let norm = Normalizer::fit(&stores);
    let data = TrainSet::from_stores(&stores, &norm)?;
    let sched = schedule_for(&cfg)?;
    let mut model = init_model(&cfg, &data);
    let mut log = LossLog::create(&log_path(&a.log, &a.out))?;
    let report = train_epochs_with(&mut model, &data, &TrainConfig::base(&cfg), &sched, |r| log.record(r))?;
    log.finish()?;
    let ck = Checkpoint {
        model,
        levels: cfg.levels,
        beta1: cfg.beta1,
        beta_t: cfg.beta_t,
        n_cont: cfg.n_cont,
        normalizer: norm,
        idle: data.idle_poses(),
    };
    ck.save(&a.out).map_err(|e| anyhow!(e))?;
    writeln!(
        out,
        "trained {} steps: first-epoch loss {:.6}, final-epoch loss {:.6}; checkpoint {}",
        ck.model.steps,
        report.first_epoch(),
        report.last_epoch(),
        a.out.display()
    )?;
    Ok(())
}

fn finetune(a: FinetuneArgs, out: &mut dyn Write) -> CliResult {
    let mut cfg = EngineConfig::load(&a.config)?.with_seed(a.seed);
    if let Some(e) = a.epochs {
        cfg.finetune_epochs = e;
    }
    let mut ck = Checkpoint::load(&a.checkpoint).map_err(|e| anyhow!(e))?;
    if ck.model.config.span != cfg.span() {
        return Err(CliError::Validation(format!(
            "checkpoint span {} differs from n_cont + N = {} in the configuration",
            ck.model.config.span,
            cfg.span()
        )));
    }
    if !a.stages.is_empty() {
        if !a.context.is_empty() && a.context.len() != a.stages.len() {
            return Err(CliError::Validation("--stages and --context need the same number of entries".into()));
        }
        cfg.ladder_stages =
            a.stages.iter().enumerate().map(|(i, &l)| cfg.stage(l, a.context.get(i).copied().unwrap_or(cfg.n_cont))).collect();
    }
    cfg.validate()?;
    if cfg.ladder_stages.is_empty() {
        return Err(CliError::Validation("no ladder stages given (--stages or ladder_stages)".into()));
    }
    let stores = load_corpus(&a.data)?;
    let data = TrainSet::from_stores(&stores, &ck.normalizer)?;
    let sched = schedule_for(&cfg)?;
    let stages = cfg.ladder_stages.clone();
    let mut log = LossLog::create(&log_path(&a.log, &a.out))?;
    let reports = progressive_finetune_with(&mut ck.model, &data, &cfg, &stages, &sched, |_, r| log.record(r))?;
    if let Some(last) = stages.last() {
        ck.n_cont = last.n_cont;
    }
    log.finish()?;
    ck.save(&a.out).map_err(|e| anyhow!(e))?;
    for r in &reports {
        writeln!(
            out,
            "stage l={} n_cont={} N={}: first-epoch loss {:.6}, final-epoch loss {:.6}",
            r.stage.step,
            r.stage.n_cont,
            r.stage.window,
            r.report.first_epoch(),
            r.report.last_epoch()
        )?;
    }
    writeln!(out, "checkpoint {}", a.out.display())?;
    Ok(())
}

fn stream(a: StreamArgs, out: &mut dyn Write) -> CliResult {
    let ck = Checkpoint::load(&a.checkpoint).map_err(|e| anyhow!(e))?;
    let cond_store = load_sequence(&a.cond).with_context(|| format!("loading {}", a.cond.display()))?;
    if cond_store.cond_dim != ck.model.config.cond_dim {
        return Err(CliError::Validation(format!(
            "conditioning has {} features, the model expects {}",
            cond_store.cond_dim, ck.model.config.cond_dim
        )));
    }
    let frames = a.frames.unwrap_or(cond_store.len());
    if frames > cond_store.len() {
        return Err(CliError::Runtime(anyhow!(
            "requested {frames} frames but the conditioning file has {}",
            cond_store.len()
        )));
    }
    let style = a.style.unwrap_or(cond_store.style as usize);
    let idle = ck
        .idle
        .get(style)
        .cloned()
        .ok_or_else(|| CliError::Validation(format!("style {style} unknown to the checkpoint ({} styles)", ck.idle.len())))?;
    let window = ck.window();
    let sched = NoiseSchedule::build(ck.levels, ck.beta1, ck.beta_t, BetaShape::Linear)?;
    let cfg = StreamConfig {
        window,
        n_cont: ck.n_cont,
        reduced: a.t_r.unwrap_or(if a.l > 1 { window } else { ck.levels }),
        ladder: a.l,
        sampler: a.mode,
        ofs_tau: a.ofs_tau,
        style: Some(style),
        seed: a.seed,
    };
    let cond = CondSource::new(cond_store.cond_rows_f64(), cond_store.cond_dim, TailPolicy::ZeroPad)?;
    let sampler = Sampler::new(&ck.model, &sched, cfg)?;
    let mut emitted: Vec<Frame> = Vec::with_capacity(frames);
    let report = sampler.run(&idle, &cond, frames, |_, f| emitted.push(ck.normalizer.denormalize(f)))?;
    let result = SequenceStore::from_rows(&emitted, &cond_store.cond_rows_f64()[..frames], style as u32, cond_store.fps)
        .map_err(|e| anyhow!(e))?;
    save_sequence(&a.out, &result).map_err(|e| anyhow!(e))?;
    if let Some(p) = &a.csv {
        export_csv(&result, std::io::BufWriter::new(std::fs::File::create(p)?)).map_err(|e| anyhow!(e))?;
    }
    writeln!(out, "{}", summary_line(&report, None))?;
    writeln!(out, "wrote {}", a.out.display())?;
    Ok(())
}

/// Order-sensitive digest of emitted frames.
fn digest(frames: &[Frame]) -> u64 {
    let mut h = DefaultHasher::new();
    for f in frames {
        for v in f {
            h.write_u64(v.to_bits());
        }
    }
    h.finish()
}

/// One measured configuration of the benchmark.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub l: usize,
    pub t_r: usize,
    pub frames: usize,
    pub denoiser_calls: u64,
    pub bootstrap_calls: u64,
    pub calls_per_frame: f64,
    pub fps: f64,
    pub p50_latency: f64,
    pub p95_latency: f64,
    pub speedup_vs_l1: f64,
    pub digest: u64,
}

pub const BENCH_COLUMNS: [&str; 9] =
    ["l", "T_r", "frames", "denoiser_calls", "calls_per_frame", "fps", "p50_latency", "p95_latency", "speedup_vs_l1"];

fn summary_line(r: &StreamReport, speedup: Option<f64>) -> String {
    let mut s = format!(
        "l={} T_r={} frames={} denoiser_calls={} bootstrap_calls={} calls_per_frame={} fps={:.1} p50_latency={:.6} p95_latency={:.6}",
        r.ladder,
        r.reduced,
        r.frames,
        r.denoiser_calls,
        r.bootstrap_calls,
        r.calls_per_frame(),
        r.fps(),
        r.latency_quantile(0.5),
        r.latency_quantile(0.95)
    );
    if let Some(x) = speedup {
        s.push_str(&format!(" speedup_vs_l1={x:.3}"));
    }
    s
}

/// CSV text of a benchmark report.
pub fn bench_report_csv(rows: &[BenchRow]) -> anyhow::Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(BENCH_COLUMNS)?;
    for r in rows {
        w.write_record([
            r.l.to_string(),
            r.t_r.to_string(),
            r.frames.to_string(),
            r.denoiser_calls.to_string(),
            r.calls_per_frame.to_string(),
            format!("{:.3}", r.fps),
            format!("{:.9}", r.p50_latency),
            format!("{:.9}", r.p95_latency),
            format!("{:.4}", r.speedup_vs_l1),
        ])?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

/// Human-readable benchmark report; timing fields vary between runs, the
/// counts and output digests do not.
pub fn bench_report_text(rows: &[BenchRow]) -> String {
    let mut s = String::new();
    for r in rows {
        s.push_str(&format!(
            "l={} T_r={} frames={} denoiser_calls={} bootstrap_calls={} calls_per_frame={} fps={:.1} p50_latency={:.6} p95_latency={:.6} speedup_vs_l1={:.3} digest={:016x}\n",
            r.l,
            r.t_r,
            r.frames,
            r.denoiser_calls,
            r.bootstrap_calls,
            r.calls_per_frame,
            r.fps,
            r.p50_latency,
            r.p95_latency,
            r.speedup_vs_l1,
            r.digest
        ));
    }
    s
}

/// Run the sampler once per step size (`reps` times each) and tabulate.
#[allow(clippy::too_many_arguments)]
pub fn run_bench<D: Denoiser + ?Sized>(
    denoiser: &D,
    sched: &NoiseSchedule,
    cond: &CondSource,
    idle: &[f64],
    base: &StreamConfig,
    ladders: &[usize],
    frames: usize,
    reps: usize,
) -> Result<Vec<BenchRow>, StreamError> {
    let mut ls: Vec<usize> = ladders.to_vec();
    if !ls.contains(&1) {
        ls.insert(0, 1);
    }
    let mut rows: Vec<BenchRow> = Vec::with_capacity(ls.len());
    for &l in &ls {
        let cfg = StreamConfig { ladder: l, ..base.clone() };
        let sampler = Sampler::new(denoiser, sched, cfg)?;
        let mut fps = Vec::with_capacity(reps);
        let mut latencies = Vec::new();
        let mut last = None;
        for _ in 0..reps.max(1) {
            let mut out = Vec::with_capacity(frames);
            let rep = sampler.run(idle, cond, frames, |_, f| out.push(f.to_vec()))?;
            fps.push(rep.fps());
            latencies.extend_from_slice(&rep.latencies);
            last = Some((rep, digest(&out)));
        }
        let (rep, dig) = last.expect("at least one repetition");
        fps.sort_by(f64::total_cmp);
        let pooled = StreamReport { latencies, ..rep.clone() };
        rows.push(BenchRow {
            l,
            t_r: base.reduced,
            frames: rep.frames,
            denoiser_calls: rep.denoiser_calls,
            bootstrap_calls: rep.bootstrap_calls,
            calls_per_frame: rep.calls_per_frame(),
            fps: fps[fps.len() / 2],
            p50_latency: pooled.latency_quantile(0.5),
            p95_latency: pooled.latency_quantile(0.95),
            speedup_vs_l1: 1.0,
            digest: dig,
        });
    }
    let base_fps = rows.iter().find(|r| r.l == 1).map(|r| r.fps).unwrap_or(f64::NAN);
    for r in &mut rows {
        r.speedup_vs_l1 = if r.l == 1 { 1.0 } else { r.fps / base_fps };
    }
    rows.retain(|r| r.l == 1 || ladders.contains(&r.l));
    Ok(rows)
}

fn bench(a: BenchArgs, out: &mut dyn Write) -> CliResult {
    let cond_store = a.cond.as_ref().map(load_sequence).transpose().map_err(|e| anyhow!(e))?;
    let rows = if let Some(path) = &a.checkpoint {
        let ck = Checkpoint::load(path).map_err(|e| anyhow!(e))?;
        let window = ck.window();
        let sched = NoiseSchedule::build(ck.levels, ck.beta1, ck.beta_t, BetaShape::Linear)?;
        let style = cond_store.as_ref().map_or(0, |s| s.style as usize);
        let idle = ck.idle.get(style).cloned().unwrap_or_else(|| vec![0.0; ck.model.config.frame_dim]);
        let cond = match &cond_store {
            Some(s) => CondSource::new(s.cond_rows_f64(), s.cond_dim, TailPolicy::ZeroPad)?,
            None => CondSource::silent(ck.model.config.cond_dim),
        };
        let base = StreamConfig {
            window,
            n_cont: ck.n_cont,
            reduced: a.t_r.unwrap_or(window),
            ladder: 1,
            sampler: a.mode,
            ofs_tau: a.ofs_tau,
            style: Some(style),
            seed: a.seed,
        };
        let d = PaddedDenoiser { inner: &ck.model, work: a.work };
        run_bench(&d, &sched, &cond, &idle, &base, &a.l, a.frames, a.reps)?
    } else {
        let sched = NoiseSchedule::default_linear(a.t)?;
        let oracle = OracleDenoiser::ar1_unit(0.9, a.dim, sched.clone(), Coupling::Joint).map_err(|e| anyhow!(e))?;
        let cond = match &cond_store {
            Some(s) => CondSource::new(s.cond_rows_f64(), s.cond_dim, TailPolicy::ZeroPad)?,
            None => CondSource::silent(1),
        };
        let base = StreamConfig {
            window: a.n,
            n_cont: a.n_cont,
            reduced: a.t_r.unwrap_or(a.n),
            ladder: 1,
            sampler: a.mode,
            ofs_tau: a.ofs_tau,
            style: None,
            seed: a.seed,
        };
        let d = PaddedDenoiser { inner: oracle, work: a.work };
        run_bench(&d, &sched, &cond, &vec![0.0; a.dim], &base, &a.l, a.frames, a.reps)?
    };
    write!(out, "{}", bench_report_text(&rows))?;
    if let Some(p) = &a.csv {
        std::fs::write(p, bench_report_csv(&rows)?).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn eval(a: EvalArgs, out: &mut dyn Write) -> CliResult {
    let gen = load_sequence(&a.generated).with_context(|| format!("loading {}", a.generated.display()))?;
    let reference = load_sequence(&a.reference).with_context(|| format!("loading {}", a.reference.display()))?;
    if gen.dim != reference.dim {
        return Err(CliError::Validation(format!("pose dimensions differ: {} vs {}", gen.dim, reference.dim)));
    }
    let pairs = a.pairs.map_or(PairSampling::All, |count| PairSampling::Sampled { count });
    let mut rng = RngKey::new(a.seed).derive(tag::EVAL).rng();
    let m = evaluate(&gen.frames_f64(), &reference.frames_f64(), pairs, &mut rng).map_err(|e| anyhow!(e))?;
    writeln!(out, "# metrics over raw pose features (no learned feature extractor)")?;
    writeln!(out, "fd_g={:.9}", m.fd_g)?;
    writeln!(out, "fd_k={:.9}", m.fd_k)?;
    writeln!(out, "div_g={:.9}", m.div_g)?;
    writeln!(out, "div_k={:.9}", m.div_k)?;
    if let Some((s, k)) = m.mse {
        writeln!(out, "mse_s={s:.9}")?;
        writeln!(out, "mse_k={k:.9}")?;
    }
    if let Some(p) = &a.csv {
        let mut w = csv::Writer::from_path(p).map_err(|e| anyhow!(e))?;
        w.write_record(["fd_g", "fd_k", "div_g", "div_k", "mse_s", "mse_k"]).map_err(|e| anyhow!(e))?;
        let (s, k) = m.mse.map_or((String::new(), String::new()), |(s, k)| (s.to_string(), k.to_string()));
        w.write_record([m.fd_g.to_string(), m.fd_k.to_string(), m.div_g.to_string(), m.div_k.to_string(), s, k])
            .map_err(|e| anyhow!(e))?;
        w.flush()?;
    }
    Ok(())
}

fn abbreviate(levels: &[usize], full: bool) -> String {
    let text: Vec<String> = levels.iter().map(|t| t.to_string()).collect();
    if full || text.len() <= 12 {
        return text.join(" ");
    }
    format!("{} ... {}", text[..6].join(" "), text[text.len() - 3..].join(" "))
}

fn verify(a: VerifyArgs, out: &mut dyn Write) -> CliResult {
    let base = a.config.as_ref().map(EngineConfig::load).transpose()?;
    let levels = a.t.or(base.as_ref().map(|c| c.levels)).ok_or_else(|| CliError::Validation("--T is required".into()))?;
    let window = a.n.or(base.as_ref().map(|c| c.window)).ok_or_else(|| CliError::Validation("--N is required".into()))?;
    let mut cfg = base.unwrap_or_else(|| EngineConfig::with_required(levels, window, 1));
    cfg.levels = levels;
    cfg.window = window;
    cfg.ladder = a.l.unwrap_or(cfg.ladder);
    cfg.reduced_levels = a.t_r.unwrap_or(if cfg.ladder > 1 { window } else { levels });
    cfg.beta1 = a.beta1.unwrap_or(cfg.beta1);
    cfg.beta_t = a.beta_t.unwrap_or(cfg.beta_t);
    cfg.ladder_stages.clear();
    cfg.validate()?;
    let sched = schedule_for(&cfg)?;
    writeln!(out, "schedule: T={} beta1={} betaT={} (linear)", cfg.levels, cfg.beta1, cfg.beta_t)?;
    writeln!(out, "sigma2[1]={:e} alpha_bar[T]={:e} terminal_snr_ok={}", sched.sigma2(1), sched.alpha_bar(cfg.levels), sched.terminal_snr_ok())?;
    let s = cfg.levels / cfg.window;
    writeln!(out, "rolling: N={} s={}", cfg.window, s)?;
    for t0 in [1, s] {
        let rl = RollingLevels::new(cfg.levels, cfg.window, t0)?;
        writeln!(out, "  t0={t0}: {}", abbreviate(&rl.levels, a.full))?;
    }
    let red = ReducedSchedule::new(cfg.levels, cfg.reduced_levels, cfg.window)?;
    writeln!(out, "reduced: T_r={} s_r={} map: {}", red.reduced, red.substeps, abbreviate(red.level_map(), a.full))?;
    if cfg.ladder > 1 {
        let ld = LadderLevels::new(cfg.window, cfg.ladder, 1)?;
        writeln!(out, "ladder: l={} t0l=1 top={} frames: {}", cfg.ladder, ld.top_level(), abbreviate(&ld.per_frame(), a.full))?;
    }
    let table: Vec<String> = (0..=cfg.levels.min(5))
        .chain(cfg.levels.saturating_sub(2).max(6)..=cfg.levels)
        .map(|t| format!("{t}:{:.6e}", sched.alpha_bar(t)))
        .collect();
    writeln!(out, "alpha_bar: {}", table.join(" "))?;
    let rolling = sweep_rolling(&[10, 20, 100]);
    let ladder = sweep_ladder(&[8, 16, 100], &[2, 4]);
    writeln!(
        out,
        "check rolling (T in 10,20,100): cases={} violations={} half_open_edge={}",
        rolling.cases, rolling.violations, rolling.half_open_misses
    )?;
    writeln!(out, "check ladder (N in 8,16,100; l in 2,4): cases={} violations={}", ladder.cases, ladder.violations)?;
    if rolling.violations + ladder.violations > 0 {
        return Err(CliError::Validation("schedule checks found violations".into()));
    }
    writeln!(out, "ok")?;
    Ok(())
}

/// Deterministic per-seed random stream for callers outside the engine.
pub fn seeded(seed: u64, purpose: u64) -> CounterRng {
    RngKey::new(seed).derive(purpose).rng()
}
