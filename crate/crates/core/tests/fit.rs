use subscale::fit::{compare_laws, fit_law, fit_records, predict, FitConfig, FitError};
use subscale::laws::{LawFamily, LawParams, PowerLawParams, SubOptimalParams};
use subscale::rng::FixtureRng;
use subscale::runs::{compute_flops, split_fit_holdout, RunSeries, TrainingRun};
use subscale::synth::{gen_curves, CurveSpec, Noise, REFERENCE_MODEL_SIZES};

fn reference_grid(noise: Noise, seed: u64) -> RunSeries {
    let spec = CurveSpec::even_checkpoints(
        LawParams::Suboptimal(SubOptimalParams::reference()),
        &REFERENCE_MODEL_SIZES,
        1700.0,
        30,
        noise,
        seed,
    );
    gen_curves(&spec).unwrap()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

/// Ordinary least squares of ln L on ln C; returns (ln lambda, alpha).
fn loglog_oracle(records: &[TrainingRun]) -> (f64, f64) {
    let xs: Vec<f64> = records
        .iter()
        .map(|r| compute_flops(r.model_size as f64, r.tokens as f64).ln())
        .collect();
    let ys: Vec<f64> = records.iter().map(|r| r.loss.ln()).collect();
    let m = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / m;
    let my = ys.iter().sum::<f64>() / m;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    (my - slope * mx, -slope)
}

fn power_fixture(rng: &mut FixtureRng, lambda: f64, alpha: f64, points: usize, sigma: f64) -> Vec<TrainingRun> {
    (0..points)
        .map(|i| {
            let n = 10_000_000 * (1 + i as u64 % 5);
            let d = (1e9 * 10f64.powf(rng.uniform_range(0.0, 3.0))) as u64;
            let c = compute_flops(n as f64, d as f64);
            let loss = lambda * c.powf(-alpha) * (sigma * rng.normal()).exp();
            TrainingRun::new(format!("r{i}"), n, d, loss)
        })
        .collect()
}

#[test]
fn power_law_noiseless_recovery() {
    let mut rng = FixtureRng::new(1);
    let records = power_fixture(&mut rng, 3.0, 0.3, 20, 0.0);
    let fit = fit_records(&records, LawFamily::Power, &FitConfig::default()).unwrap();
    let LawParams::Power(p) = fit.params else { panic!() };
    assert!(rel(p.lambda, 3.0) < 1e-6, "{p:?}");
    assert!(rel(p.alpha, 0.3) < 1e-6, "{p:?}");
    assert!(fit.converged);
}

#[test]
fn power_law_matches_log_regression() {
    let mut rng = FixtureRng::new(2);
    for _ in 0..20 {
        let lambda = 10f64.powf(rng.uniform_range(0.0, 3.0));
        let alpha = rng.uniform_range(0.02, 0.5);
        let records = power_fixture(&mut rng, lambda, alpha, 25, 0.02);
        let fit = fit_records(&records, LawFamily::Power, &FitConfig::default()).unwrap();
        let LawParams::Power(p) = fit.params else { panic!() };
        let (ln_lambda, a) = loglog_oracle(&records);
        assert!(
            (p.lambda.ln() - ln_lambda).abs() < 1e-8,
            "{} vs {ln_lambda}",
            p.lambda.ln()
        );
        assert!((p.alpha - a).abs() < 1e-8, "{} vs {a}", p.alpha);
    }
}

#[test]
fn suboptimal_noiseless_recovery() {
    let series = reference_grid(Noise::None, 0);
    let fit = fit_law(&series, LawFamily::Suboptimal, &FitConfig::default()).unwrap();
    let LawParams::Suboptimal(p) = fit.params else { panic!() };
    let truth = SubOptimalParams::reference();
    assert!(rel(p.alpha_n, truth.alpha_n) < 0.01);
    assert!(rel(p.alpha_d, truth.alpha_d) < 0.01);
    assert!(fit.mape_fit <= 1e-4);
    assert!(fit.converged);
    assert!(fit.objective_trace.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12)));
}

#[test]
fn suboptimal_noisy_recovery() {
    let series = reference_grid(Noise::Lognormal { sigma: 0.01 }, 7);
    let fit = fit_law(&series, LawFamily::Suboptimal, &FitConfig::default()).unwrap();
    let LawParams::Suboptimal(p) = fit.params else { panic!() };
    let truth = SubOptimalParams::reference();
    assert!(rel(p.alpha_n, truth.alpha_n) < 0.05, "{p:?}");
    assert!(rel(p.alpha_d, truth.alpha_d) < 0.05, "{p:?}");
    assert!(fit.converged);
}

#[test]
fn first_quarter_favours_suboptimal_law() {
    let series = reference_grid(Noise::None, 0);
    let (fit_split, holdout) = split_fit_holdout(&series, 0.25).unwrap();
    let config = FitConfig::default();
    let sub = fit_law(&fit_split, LawFamily::Suboptimal, &config).unwrap();
    let chin = fit_law(&fit_split, LawFamily::Chinchilla, &config).unwrap();
    let (_, sub_mape) = predict(&sub.params, &holdout).unwrap();
    let (_, chin_mape) = predict(&chin.params, &holdout).unwrap();
    assert!(sub_mape < chin_mape, "{sub_mape} vs {chin_mape}");
}

#[test]
fn comparison_is_sorted_and_marks_failures() {
    let series = reference_grid(Noise::Lognormal { sigma: 0.005 }, 3);
    let families = [
        LawFamily::Power,
        LawFamily::Chinchilla,
        LawFamily::Suboptimal,
        LawFamily::PowerBatch,
    ];
    let rows = compare_laws(&series, &families, &FitConfig::default(), 0.25).unwrap();
    assert_eq!(rows.len(), 4);
    let last = rows.last().unwrap();
    assert_eq!(last.family, LawFamily::PowerBatch);
    assert!(last.error.is_some());
    let preds: Vec<f64> = rows.iter().filter_map(|r| r.mape_pred).collect();
    assert_eq!(preds.len(), 3);
    assert!(preds.windows(2).all(|w| w[0] <= w[1]));
}

#[test]
fn perfect_fit_predicts_its_own_data() {
    let mut rng = FixtureRng::new(5);
    let records = power_fixture(&mut rng, 3.0, 0.3, 12, 0.0);
    let fit = fit_records(&records, LawFamily::Power, &FitConfig::default()).unwrap();
    let series = RunSeries::new(records).unwrap();
    let (_, mape_pred) = predict(&fit.params, &series).unwrap();
    assert!((mape_pred - fit.mape_fit).abs() < 1e-15);
}

#[test]
fn fit_is_independent_of_thread_count() {
    let series = reference_grid(Noise::Lognormal { sigma: 0.01 }, 11);
    let config = FitConfig::default();
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| fit_law(&series, LawFamily::Suboptimal, &config).unwrap())
    };
    let one = run(1);
    let four = run(4);
    assert_eq!(one.params, four.params);
    assert_eq!(one.residuals, four.residuals);
}

#[test]
fn huber_resists_an_outlier() {
    let mut rng = FixtureRng::new(9);
    let mut records = power_fixture(&mut rng, 3.0, 0.3, 30, 0.001);
    records[4].loss *= 3.0;
    let plain = fit_records(&records, LawFamily::Power, &FitConfig::default()).unwrap();
    let robust = fit_records(
        &records,
        LawFamily::Power,
        &FitConfig {
            robust_delta: Some(1e-3),
            ..FitConfig::default()
        },
    )
    .unwrap();
    let alpha = |r: &subscale::FitResult| match r.params {
        LawParams::Power(PowerLawParams { alpha, .. }) => alpha,
        _ => unreachable!(),
    };
    assert!((alpha(&robust) - 0.3).abs() < (alpha(&plain) - 0.3).abs());
    assert!((alpha(&robust) - 0.3).abs() < 1e-3);
}

#[test]
fn too_few_records() {
    let mut rng = FixtureRng::new(4);
    let records = power_fixture(&mut rng, 3.0, 0.3, 5, 0.0);
    assert!(matches!(
        fit_records(&records, LawFamily::Suboptimal, &FitConfig::default()),
        Err(FitError::InsufficientData { needed: 8, got: 5, .. })
    ));
}
