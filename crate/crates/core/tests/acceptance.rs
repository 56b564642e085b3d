//! Acceptance suite: one line per criterion, non-zero exit if any fails.
//!
//! Run with `cargo test -p samcal --test acceptance`.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use samcal::data::{apply_shift, gen_blobs, split, Dataset, ShiftKind, ShiftSpec};
use samcal::experiment::{default_probe_config, probe_run};
use samcal::losses::LossKind;
use samcal::metrics::{accuracy, ece, ensemble_predict, PredictionSet};
use samcal::mlp::{MlpSpec, ModelParams};
use samcal::optim::{train, train_ensemble, BatchObjective, LrSchedule, Objective, OptimizerKind, TrainConfig};
use samcal::posthoc::{apply_temperature, fit_temperature, pav, temperature_nll};
use samcal::tensor::Tensor;
use samcal::theory::{
    check_theorem1, check_theorem3, default_lambda_grid, geometric_mean, lambda_lower_bound, lemma1_monitor_tail,
    theorem1_suite, theorem2_suite, theorem3_suite, ProbePair,
};

type Criterion = (u32, &'static str, fn() -> Verdict);

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn normal_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

// ---------------------------------------------------------------- 1

const GRAD_LOSSES: [LossKind; 7] = [
    LossKind::CrossEntropy,
    LossKind::Focal { gamma: 0.0 },
    LossKind::Focal { gamma: 1.0 },
    LossKind::Focal { gamma: 2.0 },
    LossKind::CsamOuter { gamma: 0.0 },
    LossKind::CsamOuter { gamma: 1.0 },
    LossKind::CsamOuter { gamma: 2.0 },
];

/// Loss values straight from the formulas, one per entry of `GRAD_LOSSES`.
fn oracle_losses(spec: &MlpSpec, flat: &[f64], x: &Tensor, labels: &[usize]) -> [f64; 7] {
    let model = ModelParams::from_flat(spec, flat.to_vec()).unwrap();
    let logits = model.forward(x).unwrap();
    let k = logits.cols();
    let mut out = [0.0; 7];
    for (i, &y) in labels.iter().enumerate() {
        let row = &logits.data()[i * k..(i + 1) * k];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
        let lp = row[y] - lse;
        let p = lp.exp();
        let vals = [
            -lp,
            -lp,
            -(1.0 - p) * lp,
            -(1.0 - p).powi(2) * lp,
            -lp,
            if p <= 0.5 { -lp } else { -(1.0 + p).powf(-1.0) * lp },
            if p <= 0.5 { -lp } else { -(1.0 + p).powf(-2.0) * lp },
        ];
        for (o, v) in out.iter_mut().zip(vals) {
            *o += v / labels.len() as f64;
        }
    }
    out
}

fn true_probs(spec: &MlpSpec, flat: &[f64], x: &Tensor, labels: &[usize]) -> Vec<f64> {
    let model = ModelParams::from_flat(spec, flat.to_vec()).unwrap();
    let p = model.forward(x).unwrap().softmax().unwrap();
    let k = p.cols();
    labels.iter().enumerate().map(|(i, &y)| p.data()[i * k + y]).collect()
}

fn criterion_gradients() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let h = 1e-6;
    let mut worst = 0.0_f64;
    let mut triples = 0;
    let mut checked = 0usize;
    while triples < 100 {
        let layers = if triples % 10 == 0 {
            vec![8, 32, 32, 4]
        } else {
            let mut l = vec![rng.random_range(1..=8)];
            for _ in 0..rng.random_range(0..=2) {
                l.push(rng.random_range(1..=32));
            }
            l.push(rng.random_range(2..=4));
            l
        };
        let spec = MlpSpec::new(layers, rng.random()).unwrap();
        let mut flat = ModelParams::init(&spec).unwrap().into_flat();
        for v in flat.iter_mut() {
            *v += 0.1 * rng.sample::<f64, _>(StandardNormal);
        }
        let m = rng.random_range(1..=6);
        let x = normal_tensor(&mut rng, m, spec.input_dim());
        let labels: Vec<usize> = (0..m).map(|_| rng.random_range(0..spec.num_classes())).collect();
        // the CSAM outer loss jumps at p_y = 1/2; keep finite differences off it
        if true_probs(&spec, &flat, &x, &labels).iter().any(|p| (p - 0.5).abs() < 1e-3) {
            continue;
        }
        triples += 1;

        let mut obj = BatchObjective {
            spec: &spec,
            features: x.clone(),
            labels: labels.clone(),
        };
        let analytic: Vec<Vec<f64>> = GRAD_LOSSES
            .iter()
            .map(|&l| obj.evaluate(&flat, l).unwrap().grad)
            .collect();
        let mut theta = flat.clone();
        for i in 0..theta.len() {
            let orig = theta[i];
            theta[i] = orig + h;
            let fp = oracle_losses(&spec, &theta, &x, &labels);
            theta[i] = orig - h;
            let fm = oracle_losses(&spec, &theta, &x, &labels);
            theta[i] = orig;
            for l in 0..GRAD_LOSSES.len() {
                let numeric = (fp[l] - fm[l]) / (2.0 * h);
                let a = analytic[l][i];
                worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
                checked += 1;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        worst < 1e-5 && secs < 30.0,
        format!("{triples} triples, {checked} partials, max rel err {worst:.2e}, {secs:.1}s"),
    )
}

// ---------------------------------------------------------------- 2

fn criterion_sam_degeneracy() -> Verdict {
    let ds = gen_blobs(3, 4, 120, 0.5, 0.0, 3).unwrap();
    let spec = MlpSpec::new(vec![4, 16, 3], 9).unwrap();
    let mut sgd = TrainConfig::new(OptimizerKind::Sgd, 0.05, 20, 16);
    sgd.weight_decay = 5e-4;
    sgd.seed = 4;
    let sam = TrainConfig {
        optimizer: OptimizerKind::Sam,
        rho: 0.0,
        ..sgd.clone()
    };
    let a = train(&spec, &ds, None, &sgd).unwrap();
    let b = train(&spec, &ds, None, &sam).unwrap();
    let diff = a
        .params
        .flat()
        .iter()
        .zip(b.params.flat())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    let moved = a
        .params
        .flat()
        .iter()
        .zip(ModelParams::init(&spec).unwrap().flat())
        .any(|(x, y)| x != y);
    verdict(
        diff < 1e-12 && moved && a.is_complete() && b.is_complete(),
        format!("20 epochs, max |theta_sgd - theta_sam| = {diff:e}"),
    )
}

// ---------------------------------------------------------------- 3-5

fn criterion_theorem1() -> Verdict {
    let start = Instant::now();
    let s = theorem1_suite(100_000, 17).unwrap();
    let reversed = check_theorem1(&ProbePair::new(0.3, 0.6).unwrap()).unwrap();
    let secs = start.elapsed().as_secs_f64();
    verdict(
        s.samples == 100_000 && s.violations == 0 && s.min_slack >= -1e-10 && !reversed.holds && secs < 5.0,
        format!(
            "{} samples, {} violations, min slack {:.3e}; p_tilde > p pair slack {:.3e}; {secs:.2}s",
            s.samples, s.violations, s.min_slack, reversed.slack
        ),
    )
}

fn criterion_theorem3() -> Verdict {
    let s = theorem3_suite(100_000, 23).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut mismatches = 0;
    for _ in 0..10_000 {
        let p_tilde = rng.random_range(0.5 + 1e-9..1.0 - 1e-9);
        let p = rng.random_range(p_tilde..1.0 - 1e-9);
        let pair = ProbePair::new(p, p_tilde).unwrap();
        let a = check_theorem3(&pair, 0.0).unwrap();
        let b = check_theorem1(&pair).unwrap();
        if a.slack.to_bits() != b.slack.to_bits() || a.holds != b.holds {
            mismatches += 1;
        }
    }
    verdict(
        s.samples == 100_000 && s.violations == 0 && s.min_slack >= -1e-10 && mismatches == 0,
        format!(
            "{} samples, {} violations, min slack {:.3e}; gamma = 0 mismatches {mismatches}/10000",
            s.samples, s.violations, s.min_slack
        ),
    )
}

fn criterion_theorem2() -> Verdict {
    let s = theorem2_suite(10_000, 16, 31).unwrap();
    // the identity, recomputed here: mean of -ln p over the batch = -ln(geometric mean)
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst = 0.0_f64;
    for _ in 0..10_000 {
        let m = rng.random_range(1..=16);
        let ps: Vec<f64> = (0..m).map(|_| rng.random_range(1e-9..1.0 - 1e-9)).collect();
        let mean_nll = ps.iter().map(|p| -p.ln()).sum::<f64>() / m as f64;
        let g = geometric_mean(&ps).unwrap();
        worst = worst.max((mean_nll + g.ln()).abs());
    }
    verdict(
        s.summary.samples == 10_000 && s.summary.violations == 0 && s.max_identity_error <= 1e-10 && worst <= 1e-10,
        format!(
            "{} in-region batches, {} violations, {} out of region skipped; identity error {:.2e} (suite) {:.2e} (oracle)",
            s.summary.samples, s.summary.violations, s.out_of_region, s.max_identity_error, worst
        ),
    )
}

// ---------------------------------------------------------------- 6

fn criterion_lambda_landscape() -> Verdict {
    let (rhos, pts) = default_lambda_grid();
    let at = |r: f64, p: f64| lambda_lower_bound(r, p).ok();
    let mut breaks = 0;
    let mut lines = 0;
    for &p in &pts {
        lines += 1;
        let vals: Vec<f64> = rhos.iter().filter_map(|&r| at(r, p)).collect();
        breaks += vals.windows(2).filter(|w| w[1] < w[0]).count();
    }
    for &r in &rhos {
        lines += 1;
        let vals: Vec<f64> = pts.iter().filter_map(|&p| at(r, p)).collect();
        breaks += vals.windows(2).filter(|w| w[1] < w[0]).count();
    }
    let zero_col = pts.iter().all(|&p| at(0.0, p) == Some(1.0));
    verdict(
        breaks == 0 && zero_col,
        format!(
            "{}x{} grid, {lines} lines, {breaks} decreases; rho = 0 column all 1: {zero_col}",
            rhos.len(),
            pts.len()
        ),
    )
}

// ---------------------------------------------------------------- 7

/// Definitional ECE: scan every bin and every sample.
fn naive_ece(probs: &[Vec<f64>], labels: &[usize], m: usize) -> f64 {
    let n = probs.len();
    let mut total = 0.0;
    for i in 1..=m {
        let lo = (i - 1) as f64 / m as f64;
        let hi = i as f64 / m as f64;
        let (mut count, mut conf, mut acc) = (0usize, 0.0, 0.0);
        for (row, &y) in probs.iter().zip(labels) {
            let mut pred = 0;
            for j in 1..row.len() {
                if row[j] > row[pred] {
                    pred = j;
                }
            }
            let c = row[pred];
            let inside = (lo < c && c <= hi) || (i == 1 && c == 0.0);
            if inside {
                count += 1;
                conf += c;
                acc += if pred == y { 1.0 } else { 0.0 };
            }
        }
        if count > 0 {
            let gap = acc / count as f64 - conf / count as f64;
            total += (count as f64 / n as f64) * gap.abs();
        }
    }
    total
}

fn criterion_ece_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let n = rng.random_range(1..=50);
        let k = rng.random_range(2..=5);
        let m: usize = rng.random_range(1..=15);
        let probs: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                if k == 2 && rng.random_bool(0.3) {
                    // confidence exactly on a bin edge
                    let c = rng.random_range(m.div_ceil(2)..=m) as f64 / m as f64;
                    vec![c, 1.0 - c]
                } else {
                    let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..1.0f64).powi(3)).collect();
                    let s: f64 = raw.iter().sum();
                    raw.iter().map(|v| v / s).collect()
                }
            })
            .collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let set = PredictionSet::from_probs(Tensor::from_rows(&probs).unwrap(), labels.clone()).unwrap();
        let got = ece(&set, m).unwrap().0;
        if got.to_bits() != naive_ece(&probs, &labels, m).to_bits() {
            mismatches += 1;
        }
    }
    verdict(mismatches == 0, format!("1000 random sets, {mismatches} bitwise mismatches"))
}

// ---------------------------------------------------------------- 8

/// Best non-decreasing fit over every partition into contiguous level sets.
fn brute_isotonic(y: &[f64], w: &[f64]) -> Vec<f64> {
    let n = y.len();
    let mut best: Option<(f64, Vec<f64>)> = None;
    for mask in 0u32..(1 << (n - 1)) {
        let mut fit = Vec::with_capacity(n);
        let mut means = Vec::new();
        let mut start = 0;
        for end in 1..=n {
            if end == n || mask & (1 << (end - 1)) != 0 {
                let ws: f64 = w[start..end].iter().sum();
                let mean = y[start..end].iter().zip(&w[start..end]).map(|(a, b)| a * b).sum::<f64>() / ws;
                means.push(mean);
                fit.extend(std::iter::repeat_n(mean, end - start));
                start = end;
            }
        }
        if means.windows(2).any(|p| p[0] > p[1]) {
            continue;
        }
        let sse: f64 = fit.iter().zip(y).zip(w).map(|((f, a), b)| b * (f - a).powi(2)).sum();
        if best.as_ref().is_none_or(|(s, _)| sse < *s) {
            best = Some((sse, fit));
        }
    }
    best.unwrap().1
}

fn criterion_pav_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut worst = 0.0_f64;
    for t in 0..500 {
        let n = rng.random_range(1..=8);
        let y: Vec<f64> = (0..n)
            .map(|_| if t % 2 == 0 { f64::from(rng.random_range(0..2u8)) } else { rng.random_range(0.0..1.0) })
            .collect();
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..3.0)).collect();
        let fit = pav(&y, &w).unwrap();
        let oracle = brute_isotonic(&y, &w);
        for (a, b) in fit.iter().zip(&oracle) {
            worst = worst.max((a - b).abs());
        }
    }
    verdict(worst <= 1e-8, format!("500 instances, max |pav - brute force| = {worst:.2e}"))
}

// ---------------------------------------------------------------- 9

fn criterion_temperature() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (n, d, k) = (20_000, 3, 3);
    let w = normal_tensor(&mut rng, d, k);
    let x = normal_tensor(&mut rng, n, d);
    let z = x.matmul(&w).unwrap();
    // labels drawn from softmax(z): z is calibrated by construction
    let p = z.softmax().unwrap();
    let labels: Vec<usize> = p
        .row_iter()
        .map(|row| {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            row.iter()
                .position(|&q| {
                    acc += q;
                    u < acc
                })
                .unwrap_or(k - 1)
        })
        .collect();
    let mut details = Vec::new();
    let mut ok = true;
    for c in [2.0, 3.0] {
        let mut sharp = z.clone();
        sharp.data_mut().iter_mut().for_each(|v| *v *= c);
        let set = PredictionSet::from_logits(sharp.clone(), labels.clone()).unwrap();
        let t = fit_temperature(&set).unwrap();
        let fitted = temperature_nll(&sharp, &labels, t.temperature).unwrap();
        let base = temperature_nll(&sharp, &labels, 1.0).unwrap();
        let grid_best = (0..=400)
            .map(|i| 0.5 + i as f64 * 0.01)
            .map(|tt| temperature_nll(&sharp, &labels, tt).unwrap())
            .fold(f64::INFINITY, f64::min);
        let scaled = apply_temperature(&set, &t).unwrap();
        let argmax_kept = scaled.predicted() == set.predicted();
        let rel = (t.temperature - c).abs() / c;
        ok &= rel <= 0.10 && fitted <= base + 1e-9 && fitted <= grid_best + 1e-9 && argmax_kept;
        details.push(format!("c={c}: T={:.4} (rel err {:.3})", t.temperature, rel));
    }
    verdict(ok, details.join(", "))
}

// ---------------------------------------------------------------- 10, 12, 13: toy task

const TOY_SEEDS: u64 = 5;
const TOY_EPOCHS: u32 = 100;

struct ToyTask {
    train: Dataset,
    test: Dataset,
}

fn toy_task() -> &'static ToyTask {
    static TASK: OnceLock<ToyTask> = OnceLock::new();
    TASK.get_or_init(|| {
        let ds = gen_blobs(4, 8, 4000, 0.45, 0.0, 1).unwrap();
        let (train, _val, test) = split(&ds, [0.6, 0.2, 0.2], 1).unwrap();
        ToyTask { train, test }
    })
}

fn toy_config(opt: OptimizerKind, seed: u64) -> TrainConfig {
    let mut c = TrainConfig::new(opt, 0.05, TOY_EPOCHS, 128);
    c.lr_schedule = LrSchedule::Cosine;
    c.seed = seed;
    match opt {
        OptimizerKind::Sgd => {}
        OptimizerKind::Sam => c.rho = 0.05,
        OptimizerKind::Csam => {
            c.rho = 0.05;
            c.gamma = 1.0;
        }
    }
    c
}

fn toy_spec(seed: u64) -> MlpSpec {
    MlpSpec::new(vec![8, 64, 64, 4], seed).unwrap()
}

struct ToyRuns {
    sgd: Vec<ModelParams>,
    sam: Vec<ModelParams>,
    csam: Vec<ModelParams>,
    seconds: f64,
}

fn toy_runs() -> &'static ToyRuns {
    static RUNS: OnceLock<ToyRuns> = OnceLock::new();
    RUNS.get_or_init(|| {
        let task = toy_task();
        let start = Instant::now();
        let run = |opt| {
            (0..TOY_SEEDS)
                .map(|s| {
                    let o = train(&toy_spec(s), &task.train, None, &toy_config(opt, s)).unwrap();
                    assert!(o.is_complete(), "{opt:?} seed {s} diverged");
                    o.params
                })
                .collect::<Vec<_>>()
        };
        let sgd = run(OptimizerKind::Sgd);
        let sam = run(OptimizerKind::Sam);
        let csam = run(OptimizerKind::Csam);
        ToyRuns {
            sgd,
            sam,
            csam,
            seconds: start.elapsed().as_secs_f64(),
        }
    })
}

fn preds_on(model: &ModelParams, ds: &Dataset) -> PredictionSet {
    PredictionSet::from_logits(model.forward(&ds.features).unwrap(), ds.labels.clone()).unwrap()
}

fn ece_acc(model: &ModelParams, ds: &Dataset) -> (f64, f64) {
    let p = preds_on(model, ds);
    (ece(&p, 15).unwrap().0, accuracy(&p))
}

fn criterion_toy_ordering() -> Verdict {
    let runs = toy_runs();
    let test = &toy_task().test;
    let stats = |ms: &[ModelParams]| ms.iter().map(|m| ece_acc(m, test)).collect::<Vec<_>>();
    let (sgd, sam, csam) = (stats(&runs.sgd), stats(&runs.sam), stats(&runs.csam));
    let e = |v: &[(f64, f64)]| v.iter().map(|x| x.0).collect::<Vec<_>>();
    let sam_wins = sgd.iter().zip(&sam).filter(|(a, b)| b.0 < a.0).count();
    let csam_wins = sam.iter().zip(&csam).filter(|(a, b)| b.0 <= a.0).count();
    let (m_sgd, m_sam, m_csam) = (median(e(&sgd)), median(e(&sam)), median(e(&csam)));
    let acc = median(sgd.iter().map(|x| x.1).collect());
    verdict(
        m_sam < m_sgd
            && m_csam <= m_sam
            && sam_wins >= 4
            && csam_wins >= 4
            && (0.75..=0.85).contains(&acc)
            && runs.seconds < 600.0,
        format!(
            "median ECE sgd {m_sgd:.4} sam {m_sam:.4} csam {m_csam:.4}; sam<sgd {sam_wins}/5, csam<=sam {csam_wins}/5; \
             median sgd acc {acc:.3}; {:.0}s",
            runs.seconds
        ),
    )
}

// ---------------------------------------------------------------- 11

fn criterion_lemma1() -> Verdict {
    let cfg = default_probe_config();
    let run = probe_run(&cfg).unwrap();
    let probes = &run.log.probes;
    let total = probes.len();
    let report = lemma1_monitor_tail(probes, cfg.theory.probe_rho, 0.25).unwrap();
    let keep = (total as f64 * 0.25).ceil() as usize;
    let window: Vec<_> = probes[total - keep..].to_vec();
    let expected_frac = window.iter().filter(|p| p.p_tilde <= p.p).count() as f64 / keep as f64;
    let window_ok = report.steps == keep
        && report.first_step == window[0].step
        && report.last_step == probes[total - 1].step
        && (report.frac_decreased - expected_frac).abs() < 1e-12
        && run.is_complete();
    let note = if report.frac_decreased >= 0.9 {
        "meets the expected 0.9"
    } else {
        "below the expected 0.9 (logged, not asserted)"
    };
    verdict(
        window_ok,
        format!(
            "batch size 1, {total} steps, window steps {}..={} ({} probes): p_tilde <= p on {:.3}, {note}",
            report.first_step, report.last_step, report.steps, report.frac_decreased
        ),
    )
}

// ---------------------------------------------------------------- 12

fn criterion_shift() -> Verdict {
    let runs = toy_runs();
    let test = &toy_task().test;
    let mut acc = Vec::new();
    let mut e_sgd = Vec::new();
    let mut e_sam = Vec::new();
    for s in 1..=5 {
        let shifted = apply_shift(test, ShiftSpec::new(ShiftKind::GaussianNoise, s).unwrap(), 11).unwrap();
        let sgd: Vec<(f64, f64)> = runs.sgd.iter().map(|m| ece_acc(m, &shifted)).collect();
        let sam: Vec<(f64, f64)> = runs.sam.iter().map(|m| ece_acc(m, &shifted)).collect();
        acc.push(median(sgd.iter().map(|x| x.1).collect()));
        e_sgd.push(median(sgd.iter().map(|x| x.0).collect()));
        e_sam.push(median(sam.iter().map(|x| x.0).collect()));
    }
    let acc_ok = acc.windows(2).all(|w| w[1] <= w[0]);
    let ece_ok = e_sgd.windows(2).all(|w| w[1] >= w[0]);
    let sam_better = e_sgd.iter().zip(&e_sam).filter(|(a, b)| b <= a).count();
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join("/");
    verdict(
        acc_ok && ece_ok && sam_better >= 4,
        format!(
            "median sgd acc {}; ECE sgd {} sam {}; sam<=sgd at {sam_better}/5",
            fmt(&acc),
            fmt(&e_sgd),
            fmt(&e_sam)
        ),
    )
}

// ---------------------------------------------------------------- 13

fn criterion_ensemble() -> Verdict {
    let task = toy_task();
    let start = Instant::now();
    let mut parts = Vec::new();
    let mut ok = true;
    for opt in [OptimizerKind::Sgd, OptimizerKind::Sam] {
        let mut singles = Vec::new();
        let mut ensembles = Vec::new();
        for trial in 0..5u64 {
            let base = 100 + trial * 5;
            let outs = train_ensemble(&toy_spec(base), &task.train, None, &toy_config(opt, base), 5).unwrap();
            let members: Vec<ModelParams> = outs.into_iter().map(|o| o.params).collect();
            singles.extend(members.iter().map(|m| ece_acc(m, &task.test).0));
            let p = ensemble_predict(&members, &task.test.features, &task.test.labels).unwrap();
            ensembles.push(ece(&p, 15).unwrap().0);
        }
        let (ms, me) = (median(singles), median(ensembles));
        ok &= me < ms;
        parts.push(format!("{}: member {ms:.4} -> ensemble {me:.4}", opt.name()));
    }
    parts.push(format!("{:.0}s", start.elapsed().as_secs_f64()));
    verdict(ok, parts.join(", "))
}

// ---------------------------------------------------------------- 14

const CLI_CONFIG: &str = r#"
[data]
classes = 3
dim = 4
n = 240
overlap = 0.35
seed = 5

[model]
layer_sizes = [4, 12, 3]
seed = 2

[train]
optimizer = "csam"
lr = 0.05
rho = 0.05
gamma = 1.0
epochs = 4
batch_size = 16
seed = 3

[posthoc]
method = "temperature"

[ensemble]
n = 2

[[shift.specs]]
kind = "gaussian_noise"
severity = 3

[sweep]
param = "rho"
values = [0.0, 0.1]
seeds = 2

[theory]
samples = 2000
batches = 200
probe_epochs = 2
"#;

fn samcal(args: &[&str]) -> i32 {
    let out = Command::new(env!("CARGO_BIN_EXE_samcal")).args(args).output().unwrap();
    if !out.status.success() {
        eprintln!("{}", String::from_utf8_lossy(&out.stderr));
    }
    out.status.code().unwrap_or(-1)
}

fn same_files(a: &Path, b: &Path, names: &[&str]) -> Vec<String> {
    names
        .iter()
        .filter(|n| std::fs::read(a.join(n)).ok() != std::fs::read(b.join(n)).ok() || !a.join(n).exists())
        .map(|n| n.to_string())
        .collect()
}

fn criterion_determinism() -> Verdict {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let cfg = root.join("exp.toml");
    std::fs::write(&cfg, CLI_CONFIG).unwrap();
    let cfg = cfg.to_str().unwrap();
    let dir = |name: &str| root.join(name).to_str().unwrap().to_string();
    let mut codes = Vec::new();
    let mut differing = Vec::new();
    for run in ["a", "b"] {
        codes.push(samcal(&["gen-data", "--config", cfg, "--out", &dir(&format!("data_{run}"))]));
        codes.push(samcal(&["train", "--config", cfg, "--out", &dir(&format!("train_{run}")), "--seed", "7"]));
        codes.push(samcal(&["theory", "--config", cfg, "--out", &dir(&format!("theory_{run}")), "--probe"]));
        codes.push(samcal(&["sweep", "--config", cfg, "--out", &dir(&format!("sweep_{run}"))]));
    }
    let single = root.join("single.toml");
    std::fs::write(&single, CLI_CONFIG.replace("n = 2\n", "n = 1\n")).unwrap();
    let single = single.to_str().unwrap();
    codes.push(samcal(&["train", "--config", single, "--out", &dir("single")]));
    let ckpt = dir("single/checkpoint.json");
    let (val, test) = (dir("data_a/val.csv"), dir("data_a/test.csv"));
    for run in ["a", "b"] {
        codes.push(samcal(&["evaluate", "--checkpoint", &ckpt, "--data", &test, "--out", &dir(&format!("eval_{run}"))]));
        codes.push(samcal(&[
            "calibrate",
            "--checkpoint",
            &ckpt,
            "--val",
            &val,
            "--test",
            &test,
            "--method",
            "isotonic",
            "--out",
            &dir(&format!("cal_{run}")),
        ]));
    }
    let pairs: [(&str, &[&str]); 6] = [
        ("data", &["train.csv", "val.csv", "test.csv"]),
        (
            "train",
            &[
                "metrics_train.json",
                "metrics_val.json",
                "metrics_test.json",
                "metrics_test_gaussian_noise_s3.json",
                "calibration_report.json",
                "manifest.json",
                "member0_checkpoint.json",
                "member1_train_log.jsonl",
            ],
        ),
        ("theory", &["theory_summary.json", "lambda_landscape.csv", "probes.csv"]),
        ("sweep", &["sweep.csv"]),
        ("eval", &["metrics_test.json", "reliability_test.csv"]),
        ("cal", &["calibration_report.json", "calibrator.json"]),
    ];
    for (prefix, names) in pairs {
        let a = root.join(format!("{prefix}_a"));
        let b = root.join(format!("{prefix}_b"));
        differing.extend(same_files(&a, &b, names).into_iter().map(|n| format!("{prefix}/{n}")));
    }
    let all_ok = codes.iter().all(|&c| c == 0);
    verdict(
        all_ok && differing.is_empty(),
        format!(
            "{} invocations, exit codes all 0: {all_ok}; differing files: {}",
            codes.len(),
            if differing.is_empty() { "none".to_string() } else { differing.join(", ") }
        ),
    )
}

// ----------------------------------------------------------------

fn main() {
    let criteria: [Criterion; 14] = [
        (1, "gradient correctness", criterion_gradients),
        (2, "SAM with zero radius equals SGD", criterion_sam_degeneracy),
        (3, "single-example entropy inequality", criterion_theorem1),
        (4, "damped entropy inequality", criterion_theorem3),
        (5, "batch entropy inequality", criterion_theorem2),
        (6, "lambda landscape monotone", criterion_lambda_landscape),
        (7, "ECE oracle equivalence", criterion_ece_oracle),
        (8, "PAV oracle", criterion_pav_oracle),
        (9, "temperature recovery", criterion_temperature),
        (10, "toy calibration ordering", criterion_toy_ordering),
        (11, "batch-size-1 probability decay monitor", criterion_lemma1),
        (12, "shift monotonicity", criterion_shift),
        (13, "ensemble effect", criterion_ensemble),
        (14, "determinism", criterion_determinism),
    ];
    let filter: Vec<u32> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect())
        .unwrap_or_default();
    let mut failed = Vec::new();
    for (id, name, f) in criteria {
        if !filter.is_empty() && !filter.contains(&id) {
            continue;
        }
        let v = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            verdict(false, format!("panicked: {msg}"))
        });
        println!("criterion {id:>2} {} {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        if !v.pass {
            failed.push(id);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all criteria passed");
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
