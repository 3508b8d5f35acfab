//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails. Runs without the libtest harness so the lines always
//! reach the output.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use ndarray::{Array2, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use quantile_stack::bounds::{bound_bf, covering_upper_bound, oracle_rhs, BoundInputs, Covering};
use quantile_stack::data::{QuantileSpec, WindowData};
use quantile_stack::loss::{mean_wql, pinball};
use quantile_stack::objective::{
    axis_entropy, axis_range, combine, objective, objective_gradient, weights_from_logits, Alpha,
    L1Target, Logits, WeightAxis,
};
use quantile_stack::optimize::{default_grid, fit_weights, search_alpha, AlphaSearchSpec, FitOptions};
use quantile_stack::pipeline::{run_algorithm1, PipelineConfig, MEAN, MEDIAN, OURS, UNREGULARIZED};
use quantile_stack::synthetic::{
    oracle_gap_experiment, synth_problem, GapConfig, LearnerKind, NoiseMode, SimLearnerSpec, SynthConfig,
};

/// Outcome of one criterion: whether its checks held, and a short summary.
type Outcome = (bool, String);

struct Criterion {
    id: usize,
    name: &'static str,
    budget: Duration,
    run: fn() -> Outcome,
}

fn main() {
    let criteria = [
        Criterion { id: 1, name: "loss oracle", budget: Duration::from_secs(1), run: loss_oracle },
        Criterion { id: 2, name: "gradient check", budget: Duration::from_secs(30), run: gradient_check },
        Criterion { id: 3, name: "simplex and entropy invariants", budget: Duration::from_secs(10), run: simplex_entropy },
        Criterion { id: 4, name: "entropy-limit behavior", budget: Duration::from_secs(120), run: entropy_limit },
        Criterion { id: 5, name: "alpha=0 equivalence", budget: Duration::from_secs(60), run: alpha_zero_equivalence },
        Criterion { id: 6, name: "exact-learner concentration", budget: Duration::from_secs(60), run: exact_learner },
        Criterion { id: 7, name: "grid-oracle equivalence", budget: Duration::from_secs(120), run: grid_oracle },
        Criterion { id: 8, name: "noise-mode comparison vs mean/median", budget: Duration::from_secs(600), run: noise_modes },
        Criterion { id: 9, name: "oracle gap", budget: Duration::from_secs(900), run: oracle_gap },
        Criterion { id: 10, name: "bound calculator", budget: Duration::from_secs(1), run: bound_calculator },
        Criterion { id: 11, name: "determinism of synth runs", budget: Duration::from_secs(300), run: determinism },
    ];

    let mut failed = 0;
    for c in &criteria {
        let start = Instant::now();
        let (ok, detail) = (c.run)();
        let elapsed = start.elapsed();
        let in_budget = elapsed <= c.budget;
        let pass = ok && in_budget;
        if !pass {
            failed += 1;
        }
        println!(
            "criterion {:>2} [{}]: {} ({}; {:.2}s of {}s budget{})",
            c.id,
            c.name,
            if pass { "PASS" } else { "FAIL" },
            detail,
            elapsed.as_secs_f64(),
            c.budget.as_secs(),
            if in_budget { "" } else { ", over budget" }
        );
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

fn q(taus: &[f64]) -> QuantileSpec {
    QuantileSpec::new(taus.to_vec()).unwrap()
}

fn loss_oracle() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut check = |got: f64, want: f64| worst = worst.max((got - want).abs());

    check(pinball(10.0, 8.0, 0.5), 1.0);
    for tau in [0.1, 0.5, 0.9] {
        check(pinball(7.25, 7.25, tau), 0.0);
    }
    check(pinball(0.0, 4.0, 0.1), 3.6);

    let one = q(&[0.5]);
    let pred = Array4::from_elem((1, 1, 1, 1), 8.0).index_axis_move(Axis(0), 0);
    check(mean_wql(pred.view(), Array2::from_elem((1, 1), 10.0).view(), &one).unwrap(), 0.2);

    let two = q(&[0.1, 0.9]);
    let actuals = Array2::from_shape_vec((1, 2), vec![10.0, 20.0]).unwrap();
    let perfect = Array4::from_shape_fn((1, 1, 2, 2), |(_, _, j, _)| actuals[[0, j]]).index_axis_move(Axis(0), 0);
    check(mean_wql(perfect.view(), actuals.view(), &two).unwrap(), 0.0);
    let pred = Array4::from_shape_vec((1, 1, 2, 2), vec![9.0, 11.0, 18.0, 22.0])
        .unwrap()
        .index_axis_move(Axis(0), 0);
    check(mean_wql(pred.view(), actuals.view(), &two).unwrap(), 0.02);

    (worst < 1e-12, format!("7 examples, max abs error {worst:.1e}"))
}

/// A window whose combined forecast stays at least 0.01 from every
/// actual under `theta`, so central differences never straddle a kink.
fn smooth_instance(rng: &mut ChaCha8Rng, m: usize) -> (WindowData, Logits, Alpha) {
    let shape = (m, 3, 4, 3);
    loop {
        let actuals = Array2::from_shape_fn((3, 4), |_| rng.random_range(5.0..15.0));
        let predictions = Array4::from_shape_fn(shape, |(_, i, j, _)| actuals[[i, j]] + rng.random_range(-4.0..4.0));
        let theta = Array4::from_shape_fn(shape, |_| {
            let t: f64 = rng.random_range(0.05..1.5);
            if rng.random_bool(0.5) {
                t
            } else {
                -t
            }
        });
        let theta = Logits::new(theta).unwrap();
        let window = WindowData::new(predictions, actuals).unwrap();
        let combined = combine(&weights_from_logits(&theta), window.predictions.view()).unwrap();
        let margin = combined
            .indexed_iter()
            .map(|((i, j, _), z)| (z - window.actuals[[i, j]]).abs())
            .fold(f64::INFINITY, f64::min);
        if margin > 1e-2 {
            let alpha = Alpha::new([
                rng.random_range(0.0..0.2),
                rng.random_range(0.0..0.2),
                rng.random_range(0.0..0.2),
                rng.random_range(0.0..0.01),
            ])
            .unwrap();
            return (window, theta, alpha);
        }
    }
}

fn gradient_check() -> Outcome {
    let quantiles = QuantileSpec::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let step = 1e-5;
    let mut worst: f64 = 0.0;
    for instance in 0..50 {
        let m = 2 + instance % 3;
        let (window, theta, alpha) = smooth_instance(&mut rng, m);
        let analytic = objective_gradient(&theta, alpha, L1Target::Logits, &window, &quantiles).unwrap();
        let mut diff_sq = 0.0;
        let mut norm_sq = 0.0;
        for (idx, g) in analytic.indexed_iter() {
            let mut plus = theta.array().clone();
            let mut minus = theta.array().clone();
            plus[idx] += step;
            minus[idx] -= step;
            let fp = objective(&Logits::new(plus).unwrap(), alpha, L1Target::Logits, &window, &quantiles).unwrap();
            let fm = objective(&Logits::new(minus).unwrap(), alpha, L1Target::Logits, &window, &quantiles).unwrap();
            let fd = (fp - fm) / (2.0 * step);
            diff_sq += (g - fd).powi(2);
            norm_sq += fd * fd;
        }
        let rel = diff_sq.sqrt() / norm_sq.sqrt().max(1e-300);
        worst = worst.max(rel);
    }
    (worst < 1e-5, format!("50 instances, worst relative error {worst:.2e}"))
}

fn simplex_entropy() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst_sum: f64 = 0.0;
    let mut bound_violations = 0;
    let mut worst_uniform: f64 = 0.0;
    for trial in 0..1000 {
        let shape = (
            rng.random_range(1..=4),
            rng.random_range(1..=4),
            rng.random_range(1..=4),
            rng.random_range(1..=3),
        );
        let scale = if trial % 10 == 0 { 1e3 } else { 5.0 };
        let theta = Logits::new(Array4::from_shape_fn(shape, |_| rng.random_range(-scale..scale))).unwrap();
        let w = weights_from_logits(&theta);
        for lane in w.array().lanes(Axis(0)) {
            worst_sum = worst_sum.max((lane.sum() - 1.0).abs());
        }
        let total = shape.0 * shape.1 * shape.2 * shape.3;
        for axis in WeightAxis::ALL {
            let s = [shape.0, shape.1, shape.2, shape.3][axis.index()];
            let groups = (total / s) as f64;
            let lower = -groups * (s as f64).ln();
            let h = axis_entropy(&w, axis);
            if h > 1e-9 || h < lower - 1e-9 {
                bound_violations += 1;
            }
            // Weights constant along the axis: every learner's logits repeated.
            let flat = Array4::from_shape_fn(shape, |(l, i, j, k)| {
                let mut idx = [l, i, j, k];
                idx[axis.index()] = 0;
                theta.array()[idx]
            });
            let flat = weights_from_logits(&Logits::new(flat).unwrap());
            worst_uniform = worst_uniform.max((axis_entropy(&flat, axis) - lower).abs());
        }
    }
    let ok = worst_sum <= 1e-9 && bound_violations == 0 && worst_uniform <= 1e-9;
    (
        ok,
        format!(
            "1000 tensors, max |row sum - 1| {worst_sum:.1e}, {bound_violations} bound violations, uniform-case error {worst_uniform:.1e}"
        ),
    )
}

fn entropy_limit() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let shape = (3, 5, 4, 3);
    let actuals = Array2::from_shape_fn((5, 4), |_| rng.random_range(5.0..15.0));
    let predictions = Array4::from_shape_fn(shape, |(_, i, j, _)| actuals[[i, j]] + rng.random_range(-3.0..3.0));
    let window = WindowData::new(predictions, actuals).unwrap();
    let quantiles = QuantileSpec::default();
    let ladder = [0.0, 0.1, 1.0, 10.0, 1000.0];
    let mut ok = true;
    let mut details = Vec::new();
    for axis in WeightAxis::ALL {
        let mut ranges = Vec::new();
        for &a in &ladder {
            let mut v = [0.0; 4];
            v[axis.index() - 1] = a;
            let fit = fit_weights(&window, &quantiles, Alpha::new(v).unwrap(), &FitOptions::default()).unwrap();
            ranges.push(axis_range(&fit.weights, axis));
        }
        let monotone = ranges.windows(2).all(|p| p[1] <= p[0]);
        let limit = *ranges.last().unwrap();
        ok &= monotone && limit <= 1e-3;
        details.push(format!("axis {}: {}", axis.index(), ranges.iter().map(|r| format!("{r:.2e}")).collect::<Vec<_>>().join(" ")));
    }
    (ok, format!("ranges over alpha ladder: {}", details.join("; ")))
}

fn alpha_zero_equivalence() -> Outcome {
    let config = SynthConfig {
        noise: Some(NoiseMode::Items),
        ..SynthConfig::default()
    };
    let data = synth_problem(&config, 5).unwrap();
    let pipeline = PipelineConfig {
        search: AlphaSearchSpec::grid_only(vec![Alpha::zero()]),
        ..PipelineConfig::default()
    };
    let result = run_algorithm1(&data.problem, &pipeline).unwrap();
    let unreg = result.unregularized_weights.as_ref().unwrap();
    let weights_equal = result.w_star().array().iter().zip(unreg.array().iter()).all(|(a, b)| a.to_bits() == b.to_bits());
    let ours = result.row(OURS).unwrap();
    let base = result.row(UNREGULARIZED).unwrap();
    let losses_equal = ours.test.mean_wql.to_bits() == base.test.mean_wql.to_bits()
        && ours.val_wql.to_bits() == base.val_wql.to_bits()
        && ours.test.per_quantile == base.test.per_quantile;
    (
        weights_equal && losses_equal,
        format!(
            "weights bit-identical: {weights_equal}, losses bit-identical: {losses_equal} (test {})",
            ours.test.mean_wql
        ),
    )
}

fn exact_learner() -> Outcome {
    let config = SynthConfig {
        learners: vec![
            SimLearnerSpec::new(LearnerKind::Exact, 0.0).unwrap(),
            SimLearnerSpec::new(LearnerKind::Biased { bias: 10.0 }, 0.0).unwrap(),
        ],
        ..SynthConfig::default()
    };
    let data = synth_problem(&config, 17).unwrap();
    let result = run_algorithm1(&data.problem, &PipelineConfig::default()).unwrap();
    let test = result.test_wql(OURS).unwrap();
    let min_weight = result
        .w_star()
        .array()
        .index_axis(Axis(0), 0)
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    (
        test < 1e-4 && min_weight >= 0.99,
        format!("test mean_wql {test:.2e}, smallest exact-learner weight {min_weight:.6}"),
    )
}

fn grid_oracle() -> Outcome {
    let config = SynthConfig {
        noise: Some(NoiseMode::Items),
        ..SynthConfig::default()
    };
    let data = synth_problem(&config, 23).unwrap();
    let [w0, w1, _] = &data.problem.windows;
    let dims = w0.predictions.dim();
    let quantiles = &data.problem.quantiles;
    let grid = default_grid();
    let opts = FitOptions::default();
    let search = search_alpha(&AlphaSearchSpec::grid_only(grid.clone()), w0, w1, quantiles, &opts).unwrap();

    let mut best: Option<(Alpha, f64)> = None;
    let mut worst_diff: f64 = 0.0;
    for (alpha, reported) in grid.iter().zip(&search.evaluations) {
        let fit = fit_weights(w0, quantiles, *alpha, &opts).unwrap();
        let combined = (fit.weights.array() * &w1.predictions).sum_axis(Axis(0));
        let loss = mean_wql(combined.view(), w1.actuals.view(), quantiles).unwrap();
        worst_diff = worst_diff.max((loss - reported.val_wql).abs());
        let better = match best {
            None => true,
            Some((b, bl)) => loss < bl || (loss == bl && alpha.values() < b.values()),
        };
        if better {
            best = Some((*alpha, loss));
        }
    }
    let (oracle_alpha, oracle_loss) = best.unwrap();
    let ok = oracle_alpha == search.best && (oracle_loss - search.best_loss).abs() <= 1e-12 && worst_diff <= 1e-12;
    (
        ok,
        format!(
            "{} grid points on {:?}, argmin {} (oracle {}), max loss difference {worst_diff:.1e}",
            grid.len(),
            dims,
            search.best,
            oracle_alpha
        ),
    )
}

fn noise_modes() -> Outcome {
    let mut ok = true;
    let mut details = Vec::new();
    for mode in NoiseMode::ALL {
        let mut wins = 0;
        for seed in 0..5u64 {
            let config = SynthConfig {
                noise: Some(mode),
                ..SynthConfig::default()
            };
            let data = synth_problem(&config, 100 + seed).unwrap();
            let result = run_algorithm1(&data.problem, &PipelineConfig::default()).unwrap();
            let ours = result.test_wql(OURS).unwrap();
            if ours <= result.test_wql(MEAN).unwrap() && ours <= result.test_wql(MEDIAN).unwrap() {
                wins += 1;
            }
        }
        ok &= wins >= 4;
        details.push(format!("{mode} {wins}/5"));
    }
    (ok, format!("Ours <= mean and median in {}", details.join(", ")))
}

fn oracle_gap() -> Outcome {
    let report = oracle_gap_experiment(&GapConfig::default(), 20, 1000).unwrap();
    let median = report.median_rel_gap();
    let dominance = report.validation_dominance();
    (
        median <= 0.05 && dominance == 20,
        format!(
            "median relative gap {:.4}, {} of 20 within 5%, validation dominance {dominance}/20",
            median,
            report.rows.iter().filter(|r| r.rel_gap <= 0.05).count()
        ),
    )
}

fn example(p: f64) -> BoundInputs {
    BoundInputs {
        bernstein_m: 1.0,
        bernstein_v: 1.0,
        delta: 1.0,
        p,
        n1: 100.0,
        eps: 0.01,
        mean_loss: 1.0,
        covering: Covering::Count(9.0),
    }
}

fn six_digits(x: f64, want: f64) -> bool {
    ((x - want) / want).abs() < 5e-7
}

fn strictly_increasing(values: &[f64]) -> bool {
    values.windows(2).all(|p| p[1] > p[0])
}

fn bound_calculator() -> Outcome {
    let bf1 = bound_bf(&example(1.0)).unwrap();
    let bf2 = bound_bf(&example(2.0)).unwrap();
    let rhs = oracle_rhs(&example(1.0), 0.5, 0).unwrap().total;
    let values = six_digits(bf1, 7.368272) && six_digits(bf2, 40.525497) && six_digits(rhs, 9.270272);

    let ladder = [0.5, 1.0, 2.0, 4.0, 8.0];
    let in_m: Vec<f64> = ladder.iter().map(|&m| bound_bf(&BoundInputs { bernstein_m: m, ..example(1.5) }).unwrap()).collect();
    let in_v: Vec<f64> = ladder.iter().map(|&v| bound_bf(&BoundInputs { bernstein_v: v, ..example(1.5) }).unwrap()).collect();
    let in_n: Vec<f64> = ladder
        .iter()
        .map(|&n| bound_bf(&BoundInputs { covering: Covering::Count(n), ..example(1.5) }).unwrap())
        .collect();
    let in_n1: Vec<f64> = [1e2, 1e3, 1e4, 1e5]
        .iter()
        .map(|&n1| -bound_bf(&BoundInputs { n1, ..example(1.0) }).unwrap())
        .collect();
    let ladders = strictly_increasing(&in_m) && strictly_increasing(&in_v) && strictly_increasing(&in_n) && strictly_increasing(&in_n1);

    let mut vanishing = true;
    for p in [1.0, 1.5, 2.0] {
        let scaled: Vec<f64> = (2..=6)
            .map(|e| {
                let n1 = 10f64.powi(e);
                let eps = n1.powf(-0.6);
                let inputs = BoundInputs {
                    n1,
                    eps,
                    covering: Covering::Count(covering_upper_bound(1.0, 1.0, 4, eps).unwrap()),
                    ..example(p)
                };
                let rhs = oracle_rhs(&inputs, 0.5, 0).unwrap();
                -(rhs.bf_term + rhs.eps_term) / n1
            })
            .collect();
        vanishing &= strictly_increasing(&scaled);
    }
    (
        values && ladders && vanishing,
        format!("B_f {bf1:.6}/{bf2:.6}, rhs {rhs:.6}, ladders {ladders}, o(n1) direction {vanishing}"),
    )
}

fn synth_run(out: &Path) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_qstack"))
        .args(["synth", "--mode", "items", "--seed", "7", "--runs", "2", "--n-items", "10", "--out"])
        .arg(out)
        .output()
        .expect("qstack runs")
}

fn collect_files(dir: &Path, prefix: &Path, out: &mut Vec<(String, Vec<u8>)>) {
    let mut entries: Vec<_> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    entries.sort();
    for path in entries {
        if path.is_dir() {
            collect_files(&path, prefix, out);
        } else {
            let rel = path.strip_prefix(prefix).unwrap().display().to_string();
            out.push((rel, std::fs::read(&path).unwrap()));
        }
    }
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let (ra, rb) = (synth_run(&a), synth_run(&b));
    if !ra.status.success() || !rb.status.success() {
        return (false, format!("synth failed: {}", String::from_utf8_lossy(&ra.stderr)));
    }
    let (mut fa, mut fb) = (Vec::new(), Vec::new());
    collect_files(&a, &a, &mut fa);
    collect_files(&b, &b, &mut fb);
    let same = !fa.is_empty() && fa == fb;
    (same, format!("{} files compared, byte-identical: {same}", fa.len()))
}
