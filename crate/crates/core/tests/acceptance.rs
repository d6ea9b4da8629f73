//! Acceptance suite: one check per criterion, each printing a PASS/FAIL
//! line. Runs without the libtest harness so the lines are always shown.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rolling_diffusion::cli::{bench_report_csv, run_bench, BENCH_COLUMNS};
use rolling_diffusion::data::{gen_toy_corpus, EngineConfig, Normalizer, SequenceStore, ToyParams};
use rolling_diffusion::diffusion::{step_window, Frame, NoisedWindow, SamplerKind};
use rolling_diffusion::eval::{
    diversity, features, frechet_distance, frechet_frames, mse_static_kinetic, pooled_lag1_autocorr, pooled_variance,
    FeatureDistribution, FeatureKind, PairSampling,
};
use rolling_diffusion::model::{Coupling, DenoiserInput, MlpConfig, MlpDenoiser, OracleDenoiser, PaddedDenoiser};
use rolling_diffusion::rng::{CounterRng, RngKey};
use rolling_diffusion::schedule::{
    sweep_ladder, sweep_rolling, BetaShape, LadderLevels, LossWeighting, NoiseSchedule, RollingLevels,
};
use rolling_diffusion::stream::{ofs_sequence, stream, CondSource, Sampler, StreamConfig, TailPolicy};
use rolling_diffusion::train::{
    base_loss, batch_objective, init_model, inertial_loss, progressive_finetune, train_epochs, ObjectiveConfig,
    TrainConfig, TrainExample, TrainSet,
};

/// Outcome of one criterion.
struct Verdict {
    id: &'static str,
    title: &'static str,
    ok: bool,
    detail: String,
}

fn verdict(id: &'static str, title: &'static str, ok: bool, detail: String) -> Verdict {
    Verdict { id, title, ok, detail }
}

fn within(elapsed: Duration, budget_secs: f64) -> bool {
    elapsed.as_secs_f64() < budget_secs
}

fn oracle_cfg(window: usize, n_cont: usize, reduced: usize, ladder: usize, seed: u64) -> StreamConfig {
    StreamConfig { window, n_cont, reduced, ladder, sampler: SamplerKind::Ddpm, ofs_tau: None, style: None, seed }
}

fn criterion_01_rolling_schedule() -> Verdict {
    let start = Instant::now();
    let sweep = sweep_rolling(&[10, 20, 100]);
    // Independent re-derivation of the formula for every legal (T, N, t0).
    let mut formula_errors = 0;
    for total in [10usize, 20, 100] {
        for window in (1..=total).filter(|n| total % n == 0) {
            let s = total / window;
            for t0 in 1..=s {
                let rl = RollingLevels::new(total, window, t0).unwrap();
                formula_errors += rl.levels.iter().enumerate().filter(|&(n, &t)| t != t0 + n * s).count();
            }
        }
    }
    let elapsed = start.elapsed();
    let ok = sweep.violations == 0 && formula_errors == 0 && within(elapsed, 1.0);
    verdict(
        "#1",
        "rolling levels t_n = t0 + n*s",
        ok,
        format!(
            "{} cases, {} formula errors, {} violations of the band (s*n, s*(n+1)], {:?}",
            sweep.cases, formula_errors, sweep.violations, elapsed
        ),
    )
}

/// The band as printed, half-open on the right. With t0 ranging over 1..=s
/// the t0 = s windows sit at s*(n+1) and cannot satisfy it.
fn criterion_01_printed_half_open_band() -> Verdict {
    let sweep = sweep_rolling(&[10, 20, 100]);
    verdict(
        "#1b",
        "rolling levels inside [s*n, s*(n+1))",
        sweep.half_open_misses == 0,
        format!(
            "{} of {} levels on the upper edge s*(n+1), all from t0 = s windows",
            sweep.half_open_misses, sweep.cases
        ),
    )
}

fn criterion_02_ladder_contract() -> Verdict {
    let start = Instant::now();
    let sweep = sweep_ladder(&[8, 16, 100], &[2, 4]);
    let mut failures = Vec::new();
    for n in [8usize, 16, 100] {
        let sched = NoiseSchedule::default_linear(n).unwrap();
        for l in [2usize, 4] {
            let ladder = LadderLevels::new(n, l, 1).unwrap();
            if ladder.top_level() != n {
                failures.push(format!("N={n} l={l}: top {}", ladder.top_level()));
            }
            let mut rng = RngKey::new(7).rng();
            let frames: Vec<Frame> = (0..n).map(|_| rng.normal_vec(3)).collect();
            let xhat: Vec<Frame> = (0..n).map(|_| rng.normal_vec(3)).collect();
            let w = NoisedWindow { frames, levels: ladder.per_frame(), epsilon: None };
            let next = step_window(&w, &xhat, &sched, l, SamplerKind::Ddpm, |i| RngKey::new(i as u64).rng()).unwrap();
            if next.levels[..l].iter().any(|&t| t != 0) || next.frames[..l] != xhat[..l] {
                failures.push(format!("N={n} l={l}: bottom block not clean after one jump"));
            }
        }
    }
    let elapsed = start.elapsed();
    verdict(
        "#2",
        "ladder top level = N and one jump cleans the bottom block",
        sweep.violations == 0 && failures.is_empty() && within(elapsed, 1.0),
        format!("{} cases, failures {:?}, {:?}", sweep.cases, failures, elapsed),
    )
}

fn criterion_03_call_counts() -> Verdict {
    let start = Instant::now();
    let sched = NoiseSchedule::default_linear(1000).unwrap();
    let oracle = OracleDenoiser::ar1_unit(0.9, 12, sched.clone(), Coupling::Joint).unwrap();
    let cond = CondSource::silent(1);
    let rows = run_bench(&oracle, &sched, &cond, &[0.0; 12], &oracle_cfg(100, 8, 100, 1, 3), &[1, 2, 4], 1000, 1).unwrap();
    let expected = [(1usize, 1.0f64), (2, 0.5), (4, 0.25)];
    let mut ok = rows.len() == 3;
    let mut detail = Vec::new();
    for (row, (l, cpf)) in rows.iter().zip(expected) {
        ok &= row.l == l && row.frames == 1000 && row.calls_per_frame == cpf && row.bootstrap_calls as usize == 100 / l;
        detail.push(format!("l={} calls/frame={} bootstrap={}", row.l, row.calls_per_frame, row.bootstrap_calls));
    }
    // The CSV report parses back with the same columns and counts.
    let csv_text = bench_report_csv(&rows).unwrap();
    let mut reader = csv::Reader::from_reader(csv_text.as_bytes());
    ok &= reader.headers().unwrap().iter().eq(BENCH_COLUMNS.iter().copied());
    for (rec, row) in reader.records().zip(&rows) {
        let rec = rec.unwrap();
        ok &= rec[4].parse::<f64>().unwrap() == row.calls_per_frame;
        ok &= rec[3].parse::<u64>().unwrap() == row.denoiser_calls;
    }
    ok &= rows[0].speedup_vs_l1 == 1.0;
    let elapsed = start.elapsed();
    verdict(
        "#3",
        "denoiser calls per frame at T_r = N = 100, M = 1000",
        ok && within(elapsed, 60.0),
        format!("{}; {:?}", detail.join(", "), elapsed),
    )
}

fn criterion_04_relative_speedup() -> Verdict {
    let start = Instant::now();
    let sched = NoiseSchedule::default_linear(1000).unwrap();
    let oracle = OracleDenoiser::ar1_unit(0.9, 12, sched.clone(), Coupling::Joint).unwrap();
    let padded = PaddedDenoiser { inner: oracle, work: 300_000 };
    let cond = CondSource::silent(1);
    let rows = run_bench(&padded, &sched, &cond, &[0.0; 12], &oracle_cfg(100, 8, 100, 1, 4), &[1, 2, 4], 400, 3).unwrap();
    let ratios: Vec<(usize, f64)> = rows.iter().filter(|r| r.l > 1).map(|r| (r.l, r.speedup_vs_l1)).collect();
    let ok = ratios.len() == 2 && ratios.iter().all(|&(l, r)| r >= 0.8 * l as f64);
    let elapsed = start.elapsed();
    verdict(
        "#4",
        "FPS(l)/FPS(1) >= 0.8 l with a dominant denoiser",
        ok && within(elapsed, 120.0),
        format!("{}; {:?}", ratios.iter().map(|(l, r)| format!("l={l}: {r:.2}x")).collect::<Vec<_>>().join(", "), elapsed),
    )
}

fn criterion_05_oracle_recovery() -> Verdict {
    let start = Instant::now();
    let (phi, sigma_x) = (0.9f64, 0.1f64);
    let var = sigma_x * sigma_x / (1.0 - phi * phi);
    let dim = 12;
    let sched = NoiseSchedule::default_linear(1000).unwrap();
    // The sampler works on standardized frames; map back with the marginal scale.
    let norm = Normalizer { mean: vec![0.0; dim], std: vec![var.sqrt(); dim] };
    let oracle = OracleDenoiser::ar1_unit(phi, dim, sched.clone(), Coupling::Joint).unwrap();
    let cfg = oracle_cfg(100, 8, 1000, 1, 5);
    let (frames, _) = stream(&oracle, &sched, &CondSource::silent(1), &vec![0.0; dim], 10_000, &cfg).unwrap();
    let raw: Vec<Frame> = frames.iter().map(|f| norm.denormalize(f)).collect();
    let v = pooled_variance(&raw);
    let rho = pooled_lag1_autocorr(&raw);
    let ok = (v / var - 1.0).abs() <= 0.05 && (rho - phi).abs() <= 0.05;
    let elapsed = start.elapsed();
    verdict(
        "#5",
        "AR(1) oracle stream variance and lag-1 autocorrelation",
        ok && within(elapsed, 120.0),
        format!("variance {v:.5} (target {var:.5}, {:+.2}%), lag-1 {rho:.4}; {elapsed:?}", 100.0 * (v / var - 1.0)),
    )
}

fn criterion_06_gradient_fidelity() -> Verdict {
    let start = Instant::now();
    let cfg = MlpConfig { frame_dim: 4, cond_dim: 3, n_styles: 2, span: 10, time_dim: 8, hidden: 24, depth: 3 };
    let n_cont = 3;
    let sched = NoiseSchedule::default_linear(200).unwrap();
    let key = RngKey::new(6);
    let mut model = MlpDenoiser::new(cfg, &mut key.derive(0).rng(), false);
    let mut rng = key.derive(1).rng();
    let batch: Vec<TrainExample> = (0..4)
        .map(|b| TrainExample {
            input: DenoiserInput {
                context: (0..n_cont).map(|_| rng.normal_vec(4)).collect(),
                context_levels: vec![1; n_cont],
                window: (0..7).map(|_| rng.normal_vec(4)).collect(),
                levels: (0..7).map(|_| rng.range_inclusive(1, 200)).collect(),
                cond: (0..10).map(|_| rng.normal_vec(3)).collect(),
                style: Some(b % 2),
            },
            x0: (0..7).map(|_| rng.normal_vec(4)).collect(),
        })
        .collect();
    let obj = ObjectiveConfig { n_cont, weighting: LossWeighting::Uniform, lambda: 0.1, dropout: 0.0 };
    let analytic = batch_objective(&model, &batch, &obj, &sched, None).unwrap().1.flat();
    let h = 1e-5;
    let mut pick = key.derive(2).rng();
    let mut worst: f64 = 0.0;
    let count = 128;
    for _ in 0..count {
        let i = pick.range_inclusive(0, model.param_count() - 1);
        let p = model.param(i);
        model.set_param(i, p + h);
        let up = batch_objective(&model, &batch, &obj, &sched, None).unwrap().0;
        model.set_param(i, p - h);
        let down = batch_objective(&model, &batch, &obj, &sched, None).unwrap().0;
        model.set_param(i, p);
        let numeric = (up - down) / (2.0 * h);
        let scale = analytic[i].abs().max(numeric.abs());
        worst = worst.max(if scale < 1e-8 { (analytic[i] - numeric).abs() } else { (analytic[i] - numeric).abs() / scale });
    }
    let elapsed = start.elapsed();
    verdict(
        "#6",
        "MLP gradient vs central differences with inertial term (lambda = 0.1)",
        worst < 1e-4 && within(elapsed, 30.0),
        format!("{count} parameters, max relative error {worst:.2e}; {elapsed:?}"),
    )
}

/// `alpha_bar` by direct cumulative product of linearly spaced betas.
fn reference_alpha_bar(levels: usize, b1: f64, bt: f64) -> Vec<f64> {
    let mut ab = vec![1.0];
    for t in 1..=levels {
        let beta = b1 + (bt - b1) * (t - 1) as f64 / (levels - 1) as f64;
        ab.push(ab[t - 1] * (1.0 - beta));
    }
    ab
}

fn criterion_07_loss_identities() -> Verdict {
    let start = Instant::now();
    let sched = NoiseSchedule::build(1000, 4e-5, 2e-2, BetaShape::Linear).unwrap();
    let mut rng = RngKey::new(7).rng();
    let mut worst_identity: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.range_inclusive(1, 20);
        let d = rng.range_inclusive(1, 8);
        let xhat: Vec<Frame> = (0..n).map(|_| rng.normal_vec(d)).collect();
        let x0: Vec<Frame> = (0..n).map(|_| rng.normal_vec(d)).collect();
        let base = base_loss(&xhat, &x0, &vec![1; n], LossWeighting::Uniform, &sched).unwrap();
        let inertial = inertial_loss(&xhat, &x0, 0.0).unwrap();
        worst_identity = worst_identity.max((base - inertial).abs() / base.abs().max(f64::MIN_POSITIVE));
    }
    let ab = reference_alpha_bar(1000, 4e-5, 2e-2);
    let mut worst_weight: f64 = 0.0;
    let mut corners_hit = true;
    for (min, max) in [(0.001, 1.0), (0.0, 10.0)] {
        let w = LossWeighting::ClampedSnr { min, max };
        let table: Vec<f64> = (1..=1000).map(|t| w.weight(&sched, t).unwrap()).collect();
        for (i, &v) in table.iter().enumerate() {
            let t = i + 1;
            let expected = (ab[t] / (1.0 - ab[t])).clamp(min, max);
            worst_weight = worst_weight.max((v - expected).abs() / expected.max(1e-300));
        }
        corners_hit &= table[0] == max;
        if min > 0.0 {
            corners_hit &= table[999] == min;
        }
    }
    let elapsed = start.elapsed();
    let ok = worst_identity <= 4.0 * f64::EPSILON && worst_weight < 1e-9 && corners_hit && within(elapsed, 1.0);
    verdict(
        "#7",
        "inertial(lambda = 0) = base loss; clamped-SNR weights",
        ok,
        format!("identity rel. error {worst_identity:.1e}, weight rel. error {worst_weight:.1e}, clamps reached {corners_hit}; {elapsed:?}"),
    )
}

struct Toy {
    cfg: EngineConfig,
    sched: NoiseSchedule,
    norm: Normalizer,
    data: TrainSet,
    held: Vec<SequenceStore>,
}

fn toy() -> &'static Toy {
    static TOY: OnceLock<Toy> = OnceLock::new();
    TOY.get_or_init(|| {
        let cfg = EngineConfig::load(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.conf")).unwrap();
        let sched = NoiseSchedule::build(cfg.levels, cfg.beta1, cfg.beta_t, BetaShape::Linear).unwrap();
        let corpus = gen_toy_corpus(ToyParams::default(), cfg.seed).unwrap();
        let (train, held) = corpus.sequences.split_at(6);
        let norm = Normalizer::fit(train);
        let data = TrainSet::from_stores(train, &norm).unwrap();
        Toy { cfg, sched, norm, data, held: held.to_vec() }
    })
}

/// Base model trained with the toy configuration (context noise on).
fn toy_base() -> &'static (MlpDenoiser, f64, f64) {
    static BASE: OnceLock<(MlpDenoiser, f64, f64)> = OnceLock::new();
    BASE.get_or_init(|| {
        let toy = toy();
        let mut model = init_model(&toy.cfg, &toy.data);
        let report = train_epochs(&mut model, &toy.data, &TrainConfig::base(&toy.cfg), &toy.sched).unwrap();
        (model, report.first_epoch(), report.last_epoch())
    })
}

/// Pooled geometric FD of generated sequences (one per held-out conditioning
/// track) against the pooled held-out frames.
fn held_out_fd(model: &MlpDenoiser, ladder: usize, n_cont: usize) -> f64 {
    let toy = toy();
    let window = model.config.span - n_cont;
    let idle = toy.data.idle_poses();
    let mut generated = Vec::new();
    let mut reference = Vec::new();
    for (i, held) in toy.held.iter().enumerate() {
        let cfg = StreamConfig {
            window,
            n_cont,
            reduced: if ladder > 1 { window } else { toy.cfg.levels },
            ladder,
            sampler: toy.cfg.sampler,
            ofs_tau: None,
            style: Some(held.style as usize),
            seed: 100 + i as u64,
        };
        let cond = CondSource::new(held.cond_rows_f64(), held.cond_dim, TailPolicy::ZeroPad).unwrap();
        let sampler = Sampler::new(model, &toy.sched, cfg).unwrap();
        sampler.run(&idle[held.style as usize], &cond, held.len(), |_, f| generated.push(toy.norm.denormalize(f))).unwrap();
        reference.extend(held.frames_f64());
    }
    frechet_frames(&generated, &reference, FeatureKind::Geometric).unwrap()
}

fn criterion_08_training_smoke() -> Verdict {
    let start = Instant::now();
    let toy = toy();
    let (trained, first, last) = toy_base();
    let untrained = init_model(&toy.cfg, &toy.data);
    let fd_trained = held_out_fd(trained, 1, toy.cfg.n_cont);
    let fd_untrained = held_out_fd(&untrained, 1, toy.cfg.n_cont);
    let clean_cfg = EngineConfig { context_noise: false, ..toy.cfg.clone() };
    let mut clean = init_model(&clean_cfg, &toy.data);
    train_epochs(&mut clean, &toy.data, &TrainConfig::base(&clean_cfg), &toy.sched).unwrap();
    let fd_clean = held_out_fd(&clean, 1, toy.cfg.n_cont);
    let elapsed = start.elapsed();
    let ok = *last <= 0.5 * first && fd_trained < fd_untrained && fd_trained <= fd_clean && within(elapsed, 600.0);
    verdict(
        "#8",
        "toy training: loss halves, FD improves, context noise helps",
        ok,
        format!(
            "loss {first:.3} -> {last:.3} ({:.2}x); FD_g trained {fd_trained:.4} vs untrained {fd_untrained:.4}; \
             clean-context FD_g {fd_clean:.4}; {elapsed:?}",
            last / first
        ),
    )
}

fn criterion_09_progressive_finetuning() -> Verdict {
    let start = Instant::now();
    let toy = toy();
    let stage = toy.cfg.stage(2, toy.cfg.n_cont);
    let mut finetuned = toy_base().0.clone();
    progressive_finetune(&mut finetuned, &toy.data, &toy.cfg, &[stage], &toy.sched).unwrap();
    // From scratch at l = 2 with the same total number of steps at the base learning rate.
    let mut scratch = init_model(&toy.cfg, &toy.data);
    let mut tc = TrainConfig::stage(&toy.cfg, &stage);
    tc.epochs = toy.cfg.epochs + toy.cfg.finetune_epochs;
    tc.adam = TrainConfig::base(&toy.cfg).adam;
    train_epochs(&mut scratch, &toy.data, &tc, &toy.sched).unwrap();
    let fd_ft = held_out_fd(&finetuned, 2, stage.n_cont);
    let fd_scratch = held_out_fd(&scratch, 2, stage.n_cont);
    let elapsed = start.elapsed();
    verdict(
        "#9",
        "fine-tuned l = 2 beats from-scratch l = 2",
        fd_ft < fd_scratch && within(elapsed, 600.0),
        format!("FD_g fine-tuned {fd_ft:.4} vs scratch {fd_scratch:.4}; {elapsed:?}"),
    )
}

fn gaussian(mean: &[f64], cov: &[f64], kind: FeatureKind) -> FeatureDistribution {
    let d = mean.len();
    FeatureDistribution {
        mean: nalgebra::DVector::from_column_slice(mean),
        cov: nalgebra::DMatrix::from_row_slice(d, d, cov),
        count: 100,
        kind,
    }
}

fn criterion_10_metric_self_tests() -> Verdict {
    let start = Instant::now();
    let g = FeatureKind::Geometric;
    let a = gaussian(&[0.3, -1.0, 2.0], &[2.0, 0.3, 0.1, 0.3, 1.0, -0.2, 0.1, -0.2, 0.5], g);
    let identical = frechet_distance(&a, &a).unwrap();
    let eye = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
    let shifted = frechet_distance(&gaussian(&[1.0, 2.0, 3.0], &eye, g), &gaussian(&[0.0, 0.0, 5.0], &eye, g)).unwrap();
    let scalar = frechet_distance(&gaussian(&[0.0], &[1.0], g), &gaussian(&[0.0], &[4.0], g)).unwrap();
    let fd_ok = identical.abs() < 1e-8 && (shifted - 9.0).abs() < 1e-8 && (scalar - 1.0).abs() < 1e-8;

    let mut rng = RngKey::new(10).rng();
    let x: Vec<Frame> = (0..200).map(|_| rng.normal_vec(5)).collect();
    let y: Vec<Frame> = (0..200).map(|_| rng.normal_vec(5)).collect();
    let brute_div = |f: &[Frame]| {
        let mut sum = 0.0;
        let mut pairs = 0.0;
        for i in 0..f.len() {
            for j in 0..f.len() {
                if i != j {
                    sum += f[i].iter().zip(&f[j]).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
                    pairs += 1.0;
                }
            }
        }
        sum / pairs
    };
    let brute_mse = |p: &[Frame], q: &[Frame]| {
        let mut sum = 0.0;
        for i in 0..p.len() {
            for k in 0..p[i].len() {
                sum += (p[i][k] - q[i][k]).powi(2);
            }
        }
        sum / p.len() as f64
    };
    let mut unused = CounterRng::from_seed(0);
    let div_g = diversity(&x, g, PairSampling::All, &mut unused).unwrap();
    let div_k = diversity(&x, FeatureKind::Kinetic, PairSampling::All, &mut unused).unwrap();
    let (mse_s, mse_k) = mse_static_kinetic(&x, &y).unwrap();
    let (kx, ky) = (features(&x, FeatureKind::Kinetic), features(&y, FeatureKind::Kinetic));
    let errs = [
        (div_g - brute_div(&x)).abs(),
        (div_k - brute_div(&kx)).abs(),
        (mse_s - brute_mse(&x, &y)).abs(),
        (mse_k - brute_mse(&kx, &ky)).abs(),
    ];
    let brute_ok = errs.iter().all(|&e| e < 1e-10);
    let elapsed = start.elapsed();
    verdict(
        "#10",
        "Fréchet closed forms; diversity and MSE against brute force",
        fd_ok && brute_ok && within(elapsed, 5.0),
        format!("FD identical {identical:.1e}, shifted {shifted:.10}, scalar {scalar:.10}; max brute-force error {:.1e}; {elapsed:?}", errs.iter().cloned().fold(0.0, f64::max)),
    )
}

fn criterion_11_ofs_efficacy() -> Verdict {
    let start = Instant::now();
    let l = 4;
    // Slow drift along a fixed direction, with a jolt on every frame that OFS
    // rewrites (offsets 1 and 3 of each block of four).
    let frames: Vec<Frame> = (0..400)
        .map(|i| {
            let phase = i as f64 * 0.05;
            let jolt = if i % 2 == 0 { 0.15 } else { 0.0 };
            (0..6).map(|k| 1.0 + 0.2 * (phase + k as f64).sin() + jolt).collect()
        })
        .collect();
    let kinetic_var = |f: &[Frame]| pooled_variance(&features(f, FeatureKind::Kinetic));
    let before = kinetic_var(&frames);
    let smoothed = ofs_sequence(&frames, l, 0.9);
    let after = kinetic_var(&smoothed);
    let untouched = ofs_sequence(&frames, l, 1.0) == frames;
    let drop = 1.0 - after / before;
    let elapsed = start.elapsed();
    verdict(
        "#11",
        "OFS lowers first-difference variance at tau = 0.9, leaves tau = 1 alone",
        drop >= 0.3 && untouched && within(elapsed, 1.0),
        format!("variance {before:.5} -> {after:.5} ({:.1}% drop); tau = 1 unchanged: {untouched}; {elapsed:?}", 100.0 * drop),
    )
}

fn rolling(args: &[&str]) -> std::process::Output {
    let out = Command::new(env!("CARGO_BIN_EXE_rolling")).args(args).output().unwrap();
    assert!(out.status.success(), "rolling {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

/// `(step, loss)` columns of a loss log; the wall-clock column is dropped.
fn loss_columns(path: &Path) -> Vec<(String, String)> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| {
            let mut f = l.split_whitespace();
            (f.next().unwrap().to_string(), f.next().unwrap().to_string())
        })
        .collect()
}

/// Deterministic columns of a bench CSV (counts, not timings).
fn bench_counts(path: &Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records().map(|rec| rec.unwrap().iter().take(5).map(str::to_string).collect()).collect()
}

fn digests(stdout: &[u8]) -> Vec<String> {
    String::from_utf8_lossy(stdout).split_whitespace().filter(|w| w.starts_with("digest=")).map(str::to_string).collect()
}

fn criterion_12_determinism() -> Verdict {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name).to_string_lossy().into_owned();
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.conf").to_string_lossy().into_owned();
    rolling(&["gen-data", "--out", &p("data"), "--sequences", "4", "--len", "400", "--seed", "3"]);
    let mut checks = Vec::new();
    for run in ["a", "b"] {
        rolling(&["train", "--config", &config, "--data", &p("data"), "--out", &p(&format!("{run}.ck")), "--epochs", "6", "--seed", "9"]);
        rolling(&[
            "stream", "--checkpoint", &p(&format!("{run}.ck")), "--cond", &p("data/seq_003.rstm"), "--frames", "300",
            "--seed", "4", "--out", &p(&format!("{run}.rstm")), "--csv", &p(&format!("{run}.csv")),
        ]);
    }
    let bytes = |n: &str| std::fs::read(p(n)).unwrap();
    checks.push(("train checkpoint", bytes("a.ck") == bytes("b.ck")));
    checks.push(("train manifest", bytes("a.ck.manifest") == bytes("b.ck.manifest")));
    checks.push(("train loss log", loss_columns(Path::new(&p("a.ck.log"))) == loss_columns(Path::new(&p("b.ck.log")))));
    checks.push(("stream output", bytes("a.rstm") == bytes("b.rstm")));
    checks.push(("stream csv", bytes("a.csv") == bytes("b.csv")));
    let bench = |csv: &str| rolling(&["bench", "--l", "2,4", "--frames", "300", "--seed", "5", "--csv", &p(csv)]).stdout;
    let (out_a, out_b) = (bench("ba.csv"), bench("bb.csv"));
    checks.push(("bench counts", bench_counts(Path::new(&p("ba.csv"))) == bench_counts(Path::new(&p("bb.csv")))));
    checks.push(("bench output digests", digests(&out_a) == digests(&out_b) && digests(&out_a).len() == 3));
    let seed_differs = {
        rolling(&[
            "stream", "--checkpoint", &p("a.ck"), "--cond", &p("data/seq_003.rstm"), "--frames", "300", "--seed", "5",
            "--out", &p("c.rstm"),
        ]);
        bytes("c.rstm") != bytes("a.rstm")
    };
    checks.push(("a different seed changes the stream", seed_differs));
    let eval = rolling(&["eval", "--generated", &p("a.rstm"), "--reference", &p("data/seq_003.rstm")]);
    checks.push(("eval report", String::from_utf8_lossy(&eval.stdout).contains("fd_g=")));
    let elapsed = start.elapsed();
    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    verdict(
        "#12",
        "train, stream and bench are reproducible from the seed",
        failed.is_empty() && within(elapsed, 300.0),
        format!("{} checks, failed {:?}; {elapsed:?}", checks.len(), failed),
    )
}

fn criterion_03_bench_cli() -> Verdict {
    let out = rolling(&["bench", "--l", "4", "--frames", "1000"]);
    let text = String::from_utf8_lossy(&out.stdout);
    let quarter = text.contains("calls_per_frame=0.25");
    let baseline = text.lines().any(|l| l.starts_with("l=1 ") && l.contains("speedup_vs_l1=1.000"));
    verdict(
        "#3b",
        "`bench --l 4 --frames 1000` reports calls_per_frame=0.25",
        quarter && baseline,
        format!("quarter rate {quarter}, l = 1 baseline row {baseline}"),
    )
}

type Criterion = fn() -> Verdict;

const CRITERIA: [(&str, Criterion); 14] = [
    ("#1", criterion_01_rolling_schedule),
    ("#1b", criterion_01_printed_half_open_band),
    ("#2", criterion_02_ladder_contract),
    ("#3", criterion_03_call_counts),
    ("#3b", criterion_03_bench_cli),
    ("#4", criterion_04_relative_speedup),
    ("#5", criterion_05_oracle_recovery),
    ("#6", criterion_06_gradient_fidelity),
    ("#7", criterion_07_loss_identities),
    ("#8", criterion_08_training_smoke),
    ("#9", criterion_09_progressive_finetuning),
    ("#10", criterion_10_metric_self_tests),
    ("#11", criterion_11_ofs_efficacy),
    ("#12", criterion_12_determinism),
];

fn main() {
    // Timing-sensitive checks run alone first; the rest share the machine.
    let (solo, shared): (Vec<_>, Vec<_>) = CRITERIA.iter().partition(|(id, _)| *id == "#4");
    let run = |f: Criterion, id: &'static str| {
        catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            verdict(id, "check panicked", false, msg.unwrap_or_default())
        })
    };
    let mut results: Vec<Verdict> = solo.iter().map(|(id, f)| run(*f, id)).collect();
    results.extend(std::thread::scope(|scope| {
        let handles: Vec<_> = shared.iter().map(|(id, f)| scope.spawn(move || run(*f, id))).collect();
        handles.into_iter().map(|h| h.join().expect("criterion thread")).collect::<Vec<_>>()
    }));
    results.sort_by_key(|v| CRITERIA.iter().position(|(id, _)| *id == v.id));
    let mut failed = 0;
    for v in &results {
        println!("acceptance {:<4} {} {}: {}", v.id, if v.ok { "PASS" } else { "FAIL" }, v.title, v.detail);
        failed += usize::from(!v.ok);
    }
    println!("acceptance: {} passed, {} failed", results.len() - failed, failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
