//! Compute-optimal allocation, OTR sweeps, compute-exponent stability and
//! hyperparameter frontiers.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::laws::{LawError, LawFamily, LawParams};
use crate::runs::{gaussian_smooth, RunSeries, RunsError};

/// Default search range for the model size.
pub const DEFAULT_N_MIN: f64 = 1e6;
pub const DEFAULT_N_MAX: f64 = 1e13;
/// Largest token count considered when bracketing the search.
pub const DEFAULT_D_MAX: f64 = 1e16;
/// Golden-section tolerance on `ln n`.
pub const GOLDEN_TOL: f64 = 1e-6;
/// OTR above which the compute exponent is expected to be stable.
pub const DEFAULT_OTR_THRESHOLD: f64 = 50.0;
pub const DEFAULT_FRONTIER_WINDOW: usize = 10;

const SCAN_POINTS: usize = 2000;

#[derive(Debug, Error)]
pub enum AllocError {
    #[error("budget must be positive and finite, got {0}")]
    InvalidBudget(f64),
    #[error("allocation needs a chinchilla or suboptimal law, got {0}")]
    UnsupportedLaw(LawFamily),
    #[error("loss is monotone over n in [{n_lo:e}, {n_hi:e}]; the minimum sits at the {edge} edge")]
    NoInteriorMinimum { n_lo: f64, n_hi: f64, edge: &'static str },
    #[error("OTR bin ({lo}, {hi}] holds {count} usable records; at least 3 are needed")]
    BinTooSmall { lo: f64, hi: f64, count: usize },
    #[error("run {run_id} has no {knob} value")]
    KnobMissing { run_id: String, knob: Knob },
    #[error("no run reaches target loss {0}")]
    NoRunReachesTarget(f64),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Law(#[from] LawError),
    #[error(transparent)]
    Runs(#[from] RunsError),
}

pub type Result<T, E = AllocError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationPlan {
    pub budget: f64,
    pub n_star: f64,
    pub d_star: f64,
    pub otr_star: f64,
    pub predicted_loss: f64,
    pub law: LawParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AllocBounds {
    pub n_min: f64,
    pub n_max: f64,
    pub d_max: f64,
}

impl Default for AllocBounds {
    fn default() -> Self {
        Self {
            n_min: DEFAULT_N_MIN,
            n_max: DEFAULT_N_MAX,
            d_max: DEFAULT_D_MAX,
        }
    }
}

impl AllocBounds {
    /// Search interval for `n` at the given budget.
    pub fn bracket(&self, budget: f64) -> Result<(f64, f64)> {
        let lo = self.n_min.max(budget / (6.0 * self.d_max));
        let hi = self.n_max;
        if !(lo > 0.0 && lo < hi) {
            return Err(AllocError::InvalidArgument(format!(
                "empty model-size bracket [{lo:e}, {hi:e}] at budget {budget:e}"
            )));
        }
        Ok((lo, hi))
    }
}

fn check_budget(budget: f64) -> Result<()> {
    if budget > 0.0 && budget.is_finite() {
        Ok(())
    } else {
        Err(AllocError::InvalidBudget(budget))
    }
}

/// Predicted loss at `n` with the budget spent on tokens.
pub fn loss_at(law: &LawParams, budget: f64, n: f64) -> Result<f64> {
    Ok(law.eval_nd(n, budget / (6.0 * n))?)
}

pub fn optimal_allocation(law: &LawParams, budget: f64) -> Result<AllocationPlan> {
    optimal_allocation_in(law, budget, &AllocBounds::default())
}

/// Coarse scan over `ln n` to locate the basin, then golden-section refinement
/// between the scan neighbours of the best point.
pub fn optimal_allocation_in(law: &LawParams, budget: f64, bounds: &AllocBounds) -> Result<AllocationPlan> {
    check_budget(budget)?;
    if !matches!(law.family(), LawFamily::Chinchilla | LawFamily::Suboptimal) {
        return Err(AllocError::UnsupportedLaw(law.family()));
    }
    law.validate()?;
    let (n_lo, n_hi) = bounds.bracket(budget)?;
    let (a, b) = (n_lo.ln(), n_hi.ln());
    let f = |x: f64| loss_at(law, budget, x.exp());

    let xs: Vec<f64> = (0..SCAN_POINTS)
        .map(|i| a + (b - a) * i as f64 / (SCAN_POINTS - 1) as f64)
        .collect();
    let mut best = 0;
    let mut best_f = f64::INFINITY;
    for (i, &x) in xs.iter().enumerate() {
        let v = f(x)?;
        if v < best_f {
            best = i;
            best_f = v;
        }
    }
    if best == 0 || best == SCAN_POINTS - 1 {
        return Err(AllocError::NoInteriorMinimum {
            n_lo,
            n_hi,
            edge: if best == 0 { "lower" } else { "upper" },
        });
    }

    let x = golden_section(&f, xs[best - 1], xs[best + 1], GOLDEN_TOL)?;
    let n_star = x.exp();
    let d_star = budget / (6.0 * n_star);
    Ok(AllocationPlan {
        budget,
        n_star,
        d_star,
        otr_star: d_star / n_star,
        predicted_loss: law.eval_nd(n_star, d_star)?,
        law: *law,
    })
}

fn golden_section(f: &impl Fn(f64) -> Result<f64>, mut a: f64, mut b: f64, tol: f64) -> Result<f64> {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = f(c)?;
    let mut fd = f(d)?;
    while b - a > tol {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d)?;
        }
    }
    Ok((a + b) / 2.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub otr: f64,
    pub n: f64,
    pub d: f64,
    pub loss: f64,
}

/// Loss along the budget constraint at each requested OTR, in input order.
pub fn otr_sweep(law: &LawParams, budget: f64, otr_values: &[f64]) -> Result<Vec<SweepPoint>> {
    check_budget(budget)?;
    if let Some(bad) = otr_values.iter().find(|r| !(**r > 0.0 && r.is_finite())) {
        return Err(AllocError::InvalidArgument(format!(
            "OTR values must be positive, got {bad}"
        )));
    }
    otr_values
        .iter()
        .map(|&otr| {
            let n = (budget / (6.0 * otr)).sqrt();
            let d = otr * n;
            Ok(SweepPoint {
                otr,
                n,
                d,
                loss: law.eval_nd(n, d)?,
            })
        })
        .collect()
}

pub fn sweep_csv(points: &[SweepPoint]) -> String {
    let mut out = String::from("otr,n,d,loss\n");
    for p in points {
        out.push_str(&format!("{},{},{},{}\n", p.otr, p.n, p.d, p.loss));
    }
    out
}

/// Log-spaced OTR values from `lo` to `hi` inclusive.
pub fn log_spaced(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    if count < 2 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..count)
        .map(|i| (a + (b - a) * i as f64 / (count - 1) as f64).exp())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilityOptions {
    /// Bins whose lower edge is at or above this OTR enter the summary.
    pub otr_threshold: f64,
    pub significance: f64,
}

impl Default for StabilityOptions {
    fn default() -> Self {
        Self {
            otr_threshold: DEFAULT_OTR_THRESHOLD,
            significance: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinFit {
    /// Half-open OTR range `(lo, hi]`.
    pub otr_range: (f64, f64),
    pub alpha: f64,
    pub lambda: f64,
    pub n_points: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trend {
    StrictlyDecreasing,
    StrictlyIncreasing,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExponentStabilityReport {
    pub bins: Vec<BinFit>,
    /// Number of bins at or above the OTR threshold. When zero, the summary
    /// statistics cover every bin.
    pub bins_above_threshold: usize,
    pub mean_alpha: f64,
    pub std_alpha: f64,
    pub normality_test: String,
    pub normality_stat: f64,
    pub normality_p: f64,
    pub normality_pass: bool,
    /// Direction of the per-bin exponents in bin order.
    pub trend: Trend,
}

/// Closed-form fit of `ln L = ln lambda - alpha ln C`. Returns `(lambda, alpha)`.
pub fn loglog_fit(compute: &[f64], loss: &[f64]) -> Option<(f64, f64)> {
    let m = compute.len() as f64;
    let xs: Vec<f64> = compute.iter().map(|c| c.ln()).collect();
    let ys: Vec<f64> = loss.iter().map(|l| l.ln()).collect();
    let mx = xs.iter().sum::<f64>() / m;
    let my = ys.iter().sum::<f64>() / m;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    if !(sxx > 0.0) {
        return None;
    }
    let slope = sxy / sxx;
    Some(((my - slope * mx).exp(), -slope))
}

/// Jarque-Bera statistic and its asymptotic chi-square(2) p-value.
/// A constant sample is treated as perfectly consistent with normality.
pub fn jarque_bera(sample: &[f64]) -> (f64, f64) {
    let n = sample.len() as f64;
    if sample.len() < 2 {
        return (0.0, 1.0);
    }
    let mean = sample.iter().sum::<f64>() / n;
    let moment = |p: i32| sample.iter().map(|x| (x - mean).powi(p)).sum::<f64>() / n;
    let m2 = moment(2);
    if m2 <= f64::EPSILON * mean.abs().max(1.0) * f64::EPSILON {
        return (0.0, 1.0);
    }
    let skew = moment(3) / m2.powf(1.5);
    let kurt = moment(4) / (m2 * m2);
    let stat = n / 6.0 * (skew * skew + (kurt - 3.0).powi(2) / 4.0);
    (stat, (-stat / 2.0).exp())
}

fn trend_of(values: &[f64]) -> Trend {
    if values.len() < 2 {
        Trend::None
    } else if values.windows(2).all(|w| w[1] < w[0]) {
        Trend::StrictlyDecreasing
    } else if values.windows(2).all(|w| w[1] > w[0]) {
        Trend::StrictlyIncreasing
    } else {
        Trend::None
    }
}

/// Per-bin compute exponents. Each bin is fitted independently by log-log
/// regression of loss on `C = 6ND`.
pub fn alpha_stability(
    series: &RunSeries,
    otr_bins: &[(f64, f64)],
    options: &StabilityOptions,
) -> Result<ExponentStabilityReport> {
    if otr_bins.is_empty() {
        return Err(AllocError::InvalidArgument("no OTR bins given".into()));
    }
    if let Some(&(lo, hi)) = otr_bins.iter().find(|(lo, hi)| !(lo < hi)) {
        return Err(AllocError::InvalidArgument(format!("empty OTR bin ({lo}, {hi}]")));
    }
    let bins = otr_bins
        .par_iter()
        .map(|&(lo, hi)| {
            let (compute, loss): (Vec<f64>, Vec<f64>) = series
                .records()
                .iter()
                .filter(|r| {
                    let otr = r.otr();
                    otr > lo && otr <= hi
                })
                .map(|r| (r.compute(), r.loss))
                .unzip();
            let too_small = AllocError::BinTooSmall {
                lo,
                hi,
                count: compute.len(),
            };
            if compute.len() < 3 {
                return Err(too_small);
            }
            let (lambda, alpha) = loglog_fit(&compute, &loss).ok_or(too_small)?;
            Ok(BinFit {
                otr_range: (lo, hi),
                alpha,
                lambda,
                n_points: compute.len(),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let above: Vec<f64> = bins
        .iter()
        .filter(|b| b.otr_range.0 >= options.otr_threshold)
        .map(|b| b.alpha)
        .collect();
    let summary: Vec<f64> = if above.is_empty() {
        bins.iter().map(|b| b.alpha).collect()
    } else {
        above.clone()
    };
    let m = summary.len() as f64;
    let mean_alpha = summary.iter().sum::<f64>() / m;
    let std_alpha = if summary.len() > 1 {
        (summary.iter().map(|a| (a - mean_alpha).powi(2)).sum::<f64>() / (m - 1.0)).sqrt()
    } else {
        0.0
    };
    let (stat, p) = jarque_bera(&summary);
    let alphas: Vec<f64> = bins.iter().map(|b| b.alpha).collect();
    Ok(ExponentStabilityReport {
        trend: trend_of(&alphas),
        bins,
        bins_above_threshold: above.len(),
        mean_alpha,
        std_alpha,
        normality_test: "jarque_bera".into(),
        normality_stat: stat,
        normality_p: p,
        normality_pass: p > options.significance,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Knob {
    BatchSize,
    LearningRate,
}

impl std::fmt::Display for Knob {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Knob::BatchSize => "batch_size",
            Knob::LearningRate => "learning_rate",
        })
    }
}

impl std::str::FromStr for Knob {
    type Err = AllocError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "batch_size" | "batch" => Ok(Knob::BatchSize),
            "learning_rate" | "lr" => Ok(Knob::LearningRate),
            _ => Err(AllocError::InvalidArgument(format!("unknown knob {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrontierPoint {
    pub target_loss: f64,
    pub knob_value: f64,
    pub min_tokens: u64,
}

/// A (target, knob value) pair whose runs never reached the target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrontierWarning {
    pub target_loss: f64,
    pub knob_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frontier {
    pub knob: Knob,
    pub points: Vec<FrontierPoint>,
    pub warnings: Vec<FrontierWarning>,
}

/// For each target, the knob value whose runs reach the target with the
/// fewest tokens, judged on smoothed losses. Runs shorter than `window` are
/// smoothed with a window of their own length.
pub fn hyperparam_frontier(runs: &RunSeries, knob: Knob, target_losses: &[f64], window: usize) -> Result<Frontier> {
    if window == 0 {
        return Err(AllocError::InvalidArgument("window must be at least 1".into()));
    }
    let value_of = |r: &crate::runs::TrainingRun| match knob {
        Knob::BatchSize => r.batch_size.map(|b| b as f64),
        Knob::LearningRate => r.learning_rate,
    };
    if let Some(r) = runs.records().iter().find(|r| value_of(r).is_none()) {
        return Err(AllocError::KnobMissing {
            run_id: r.run_id.clone(),
            knob,
        });
    }

    // Per knob value: smoothed (tokens, loss) points, token-sorted.
    let mut curves: BTreeMap<u64, (f64, Vec<(u64, f64)>)> = BTreeMap::new();
    for (_, indices) in runs.run_groups() {
        let records: Vec<_> = indices.iter().map(|&i| runs.records()[i].clone()).collect();
        let w = window.min(records.len());
        let smoothed = gaussian_smooth(&RunSeries::new(records)?, w, None)?;
        for r in smoothed.records() {
            let v = value_of(r).unwrap();
            let key = ordered_key(v);
            curves.entry(key).or_insert((v, Vec::new())).1.push((r.tokens, r.loss));
        }
    }
    for (_, points) in curves.values_mut() {
        points.sort_by_key(|p| p.0);
    }
    let mut by_value: Vec<(f64, Vec<(u64, f64)>)> = curves.into_values().collect();
    by_value.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut points = Vec::new();
    let mut warnings = Vec::new();
    for &target in target_losses {
        let mut best: Option<(f64, u64)> = None;
        for (value, curve) in &by_value {
            match curve.iter().find(|p| p.1 <= target) {
                Some(&(tokens, _)) => {
                    if best.is_none_or(|(_, t)| tokens < t) {
                        best = Some((*value, tokens));
                    }
                }
                None => warnings.push(FrontierWarning {
                    target_loss: target,
                    knob_value: *value,
                }),
            }
        }
        let (knob_value, min_tokens) = best.ok_or(AllocError::NoRunReachesTarget(target))?;
        points.push(FrontierPoint {
            target_loss: target,
            knob_value,
            min_tokens,
        });
    }
    Ok(Frontier { knob, points, warnings })
}

/// Total order on finite floats usable as a map key.
fn ordered_key(v: f64) -> u64 {
    let bits = v.to_bits();
    if bits >> 63 == 1 {
        !bits
    } else {
        bits | (1 << 63)
    }
}
