use proptest::prelude::*;
use subscale::alloc::{
    alpha_stability, hyperparam_frontier, optimal_allocation, otr_sweep, AllocBounds, AllocError, Knob,
    StabilityOptions, Trend,
};
use subscale::fit::{fit_records, FitConfig};
use subscale::laws::{ChinchillaParams, LawFamily, LawParams, SubOptimalParams};
use subscale::rng::FixtureRng;
use subscale::runs::{RunSeries, TrainingRun};

/// Argmin of the loss on an evenly spaced grid over ln n; returns the grid
/// index, the grid points and the step.
fn grid_argmin(law: &LawParams, budget: f64, points: usize) -> (usize, Vec<f64>, f64) {
    let (lo, hi) = AllocBounds::default().bracket(budget).unwrap();
    let (a, b) = (lo.ln(), hi.ln());
    let step = (b - a) / (points - 1) as f64;
    let xs: Vec<f64> = (0..points).map(|i| a + step * i as f64).collect();
    let losses: Vec<f64> = xs
        .iter()
        .map(|x| law.eval_nd(x.exp(), budget / (6.0 * x.exp())).unwrap())
        .collect();
    let best = (0..points).fold(0, |best, i| if losses[i] < losses[best] { i } else { best });
    (best, xs, step)
}

fn random_law(rng: &mut FixtureRng) -> LawParams {
    let e_irreducible = rng.uniform_range(0.0, 2.5);
    let lambda_n = 10f64.powf(rng.uniform_range(1.0, 3.0));
    let alpha_n = rng.uniform_range(0.1, 0.6);
    let lambda_d = 10f64.powf(rng.uniform_range(1.0, 3.0));
    let alpha_d = rng.uniform_range(0.1, 0.6);
    if rng.uniform() < 0.5 {
        LawParams::Chinchilla(ChinchillaParams {
            e_irreducible,
            lambda_n,
            alpha_n,
            lambda_d,
            alpha_d,
        })
    } else {
        LawParams::Suboptimal(SubOptimalParams {
            e_irreducible,
            lambda_n,
            alpha_n,
            lambda_d,
            alpha_d,
            k1: rng.uniform_range(0.0, 0.02),
            k2: rng.uniform_range(0.0, 0.02),
        })
    }
}

#[test]
fn reference_law_matches_grid_at_1e20() {
    let law = LawParams::Suboptimal(SubOptimalParams::reference());
    let plan = optimal_allocation(&law, 1e20).unwrap();
    let (best, xs, step) = grid_argmin(&law, 1e20, 2000);
    assert!((plan.n_star.ln() - xs[best]).abs() <= step);
    assert!((6.0 * plan.n_star * plan.d_star / 1e20 - 1.0).abs() < 1e-9);
    assert!(plan.predicted_loss > 0.0);
}

#[test]
fn sweep_is_v_shaped_around_optimum() {
    let law = LawParams::Suboptimal(SubOptimalParams::reference());
    let plan = optimal_allocation(&law, 1e20).unwrap();
    let pts = otr_sweep(&law, 1e20, &[5.0, 20.0, 400.0]).unwrap();
    assert!(pts[1].loss < pts[0].loss && pts[1].loss < pts[2].loss);
    assert!(plan.otr_star > 5.0 && plan.otr_star < 400.0);
    let at_opt = otr_sweep(&law, 1e20, &[plan.otr_star]).unwrap()[0];
    assert!(at_opt.loss <= pts.iter().map(|p| p.loss).fold(f64::INFINITY, f64::min) + 1e-12);
    assert!((at_opt.loss - plan.predicted_loss).abs() < 1e-9);
}

#[test]
fn symmetric_chinchilla_splits_evenly() {
    let law = LawParams::Chinchilla(ChinchillaParams {
        e_irreducible: 1.2,
        lambda_n: 250.0,
        alpha_n: 0.31,
        lambda_d: 250.0,
        alpha_d: 0.31,
    });
    for budget in [1e18, 1e21, 1e24] {
        let plan = optimal_allocation(&law, budget).unwrap();
        assert!((plan.otr_star - 1.0).abs() < 1e-5, "{}", plan.otr_star);
    }
}

fn exact_bins(alphas: &[f64], edges: &[f64]) -> RunSeries {
    let mut records = Vec::new();
    for (b, &alpha) in alphas.iter().enumerate() {
        let otr = (edges[b] * edges[b + 1]).sqrt();
        for (i, n) in [1e8, 3e8, 1e9, 3e9, 7e9].iter().enumerate() {
            let d = (otr * n).round();
            let c = 6.0 * n * d;
            let loss = 40.0 * c.powf(-alpha);
            records.push(TrainingRun::new(format!("b{b}n{i}"), *n as u64, d as u64, loss));
        }
    }
    RunSeries::new(records).unwrap()
}

fn edges(lo: f64, hi: f64, bins: usize) -> Vec<f64> {
    (0..=bins)
        .map(|i| lo * (hi / lo).powf(i as f64 / bins as f64))
        .collect()
}

fn bins_of(edges: &[f64]) -> Vec<(f64, f64)> {
    edges.windows(2).map(|w| (w[0], w[1])).collect()
}

#[test]
fn constant_exponent_in_every_bin() {
    let e = edges(50.0, 1700.0, 30);
    let series = exact_bins(&[0.0521; 30], &e);
    let report = alpha_stability(&series, &bins_of(&e), &StabilityOptions::default()).unwrap();
    assert!((report.mean_alpha - 0.0521).abs() < 1e-6);
    assert!(report.std_alpha < 1e-9);
    assert!(report
        .bins
        .iter()
        .all(|b| (b.alpha - 0.0521).abs() < 1e-9 && b.n_points == 5));
    assert!(report.normality_pass);
    assert_eq!(report.bins_above_threshold, 30);
}

#[test]
fn normal_exponents_pass_moment_test() {
    let e = edges(50.0, 1700.0, 30);
    let mut passes = 0;
    for seed in 0..100 {
        let mut rng = FixtureRng::new(seed);
        let alphas: Vec<f64> = (0..30).map(|_| rng.normal_with(0.0521, 0.002)).collect();
        let report = alpha_stability(&exact_bins(&alphas, &e), &bins_of(&e), &StabilityOptions::default()).unwrap();
        passes += report.normality_pass as usize;
    }
    assert!(passes >= 95, "{passes}");
}

#[test]
fn decreasing_exponents_below_threshold() {
    let e = edges(2.0, 50.0, 8);
    let alphas: Vec<f64> = (0..8).map(|i| 0.09 - 0.004 * i as f64).collect();
    let report = alpha_stability(&exact_bins(&alphas, &e), &bins_of(&e), &StabilityOptions::default()).unwrap();
    assert_eq!(report.trend, Trend::StrictlyDecreasing);
    assert_eq!(report.bins_above_threshold, 0);
}

#[test]
fn alpha_stability_ignores_thread_count() {
    let e = edges(50.0, 1700.0, 12);
    let mut rng = FixtureRng::new(3);
    let alphas: Vec<f64> = (0..12).map(|_| rng.normal_with(0.05, 0.003)).collect();
    let series = exact_bins(&alphas, &e);
    let run = |t| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .unwrap()
            .install(|| alpha_stability(&series, &bins_of(&e), &StabilityOptions::default()).unwrap())
    };
    assert_eq!(run(1), run(4));
}

/// Tokens needed by learning rate `lr` to reach loss `l`: smallest at
/// `lr* = 1e-3 (l / 3)^(-1/alpha)`, growing quadratically in `ln(lr / lr*)`.
fn tokens_needed(lr: f64, l: f64, alpha: f64) -> f64 {
    let lr_star = 1e-3 * (l / 3.0).powf(-1.0 / alpha);
    let d_min = 1e9 * (l / 2.0).powf(-1.0 / 0.3);
    d_min * (0.05 * (lr / lr_star).ln().powi(2)).exp()
}

#[test]
fn frontier_recovers_exponent() {
    let alpha = 0.25;
    let targets: Vec<f64> = (0..20).map(|i| 2.2 * (5.0f64 / 2.2).powf(i as f64 / 19.0)).collect();
    let (lo, hi) = ((1.3e-4f64).ln() - 0.5, (3.5e-3f64).ln() + 0.5);
    let lrs: Vec<f64> = (0..)
        .map(|i| lo + 0.02 * i as f64)
        .take_while(|&x| x <= hi)
        .map(f64::exp)
        .collect();
    let mut records = Vec::new();
    for (j, &lr) in lrs.iter().enumerate() {
        // Easiest target first, so tokens increase along the run.
        for (s, &l) in targets.iter().rev().enumerate() {
            let tokens = tokens_needed(lr, l, alpha).ceil() as u64;
            let mut r = TrainingRun::new(format!("lr{j}"), 1_000_000, tokens, l).with_step(s as u64);
            r.learning_rate = Some(lr);
            records.push(r);
        }
    }
    let series = RunSeries::new(records).unwrap();
    let frontier = hyperparam_frontier(&series, Knob::LearningRate, &targets, 1).unwrap();
    assert!(frontier.warnings.is_empty());
    let points: Vec<TrainingRun> = frontier
        .points
        .iter()
        .map(|p| {
            let mut r = TrainingRun::new("frontier", 1, p.min_tokens, p.target_loss);
            r.learning_rate = Some(p.knob_value);
            r
        })
        .collect();
    let fit = fit_records(&points, LawFamily::PowerLr, &FitConfig::default()).unwrap();
    let LawParams::PowerLr(p) = fit.params else { panic!() };
    assert!((p.alpha / alpha - 1.0).abs() < 0.02, "{}", p.alpha);
}

#[test]
fn frontier_needs_knob_values() {
    let series = RunSeries::new(vec![TrainingRun::new("a", 1, 10, 3.0)]).unwrap();
    assert!(matches!(
        hyperparam_frontier(&series, Knob::BatchSize, &[3.0], 10),
        Err(AllocError::KnobMissing { .. })
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn allocation_matches_grid(seed in any::<u64>(), log_budget in 18.0f64..25.0) {
        let mut rng = FixtureRng::new(seed);
        let law = random_law(&mut rng);
        let budget = 10f64.powf(log_budget);
        let (best, xs, step) = grid_argmin(&law, budget, 2000);
        match optimal_allocation(&law, budget) {
            Ok(plan) => {
                prop_assert!((plan.n_star.ln() - xs[best]).abs() <= step);
                prop_assert!((6.0 * plan.n_star * plan.d_star / budget - 1.0).abs() < 1e-9);
            }
            Err(AllocError::NoInteriorMinimum { .. }) => prop_assert!(best == 0 || best == xs.len() - 1),
            Err(e) => prop_assert!(false, "{e}"),
        }
    }

    #[test]
    fn more_budget_never_hurts(seed in any::<u64>(), log_budget in 18.0f64..24.0) {
        let mut rng = FixtureRng::new(seed);
        let law = random_law(&mut rng);
        let budget = 10f64.powf(log_budget);
        if let (Ok(a), Ok(b)) = (optimal_allocation(&law, budget), optimal_allocation(&law, 2.0 * budget)) {
            prop_assert!(b.predicted_loss <= a.predicted_loss + 1e-12);
        }
    }

    #[test]
    fn frontier_tokens_fall_as_targets_rise(seed in any::<u64>()) {
        let mut rng = FixtureRng::new(seed);
        let mut records = Vec::new();
        for run in 0..4 {
            let mut loss = 5.0;
            for step in 0..30u64 {
                loss *= 1.0 - rng.uniform_range(0.0, 0.05);
                let mut r = TrainingRun::new(format!("r{run}"), 100, 1000 * (step + 1), loss).with_step(step);
                r.batch_size = Some(64 << run);
                records.push(r);
            }
        }
        let series = RunSeries::new(records).unwrap();
        let targets: Vec<f64> = (0..10).map(|i| 4.0 + 0.09 * i as f64).collect();
        let frontier = hyperparam_frontier(&series, Knob::BatchSize, &targets, 10).unwrap();
        for w in frontier.points.windows(2) {
            prop_assert!(w[1].min_tokens <= w[0].min_tokens);
        }
    }
}
