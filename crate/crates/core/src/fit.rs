//! Bounded Levenberg-Marquardt fitting of scaling laws to run records.
//!
//! Residuals are `ln L_pred - ln L_obs` by default. Coefficients (`lambda*`,
//! `p0`, `beta`, `i0`) are optimized on a log scale; everything else is
//! optimized directly and projected onto its bounds. Every start of the
//! multistart grid runs independently, so the starts are evaluated in
//! parallel and the winner is picked by objective with ties going to the
//! earlier grid point.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::laws::{repetition_factor, LawError, LawFamily, LawParams, SubOptimalParams};
use crate::rng::FixtureRng;
use crate::runs::{split_fit_holdout, RunSeries, RunsError, TrainingRun};

#[derive(Debug, Error)]
pub enum FitError {
    #[error("predicted and actual lengths differ ({predicted} vs {actual})")]
    LengthMismatch { predicted: usize, actual: usize },
    #[error("actual value at index {index} is not positive ({value})")]
    NonPositiveActual { index: usize, value: f64 },
    #[error("no values to evaluate")]
    EmptyInput,
    #[error("{family} fit needs at least {needed} records, got {got}")]
    InsufficientData {
        family: LawFamily,
        needed: usize,
        got: usize,
    },
    #[error(transparent)]
    MissingField(#[from] LawError),
    #[error("{family} fit failed from all {starts} starting points")]
    NoConvergence { family: LawFamily, starts: usize },
    #[error("invalid fit configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Runs(#[from] RunsError),
}

pub type Result<T, E = FitError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResidualSpace {
    Log,
    Linear,
}

/// Fitting options. Grid and bound overrides are keyed by parameter name
/// (see [`LawFamily::param_names`]); unnamed parameters use the defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub residual_space: ResidualSpace,
    /// Huber threshold on residuals; `None` for plain least squares.
    pub robust_delta: Option<f64>,
    pub multistart_grid: BTreeMap<String, Vec<f64>>,
    pub bounds: BTreeMap<String, (f64, f64)>,
    pub max_iters: usize,
    /// Relative step size below which an iteration counts as converged.
    pub tolerance: f64,
    pub seed: u64,
    /// Extra starts drawn uniformly inside the bounds from `seed`.
    pub random_starts: usize,
    /// Fit the sub-optimal law with `k1`, `k2` frozen first, then release them.
    pub staged: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            residual_space: ResidualSpace::Log,
            robust_delta: None,
            multistart_grid: BTreeMap::new(),
            bounds: BTreeMap::new(),
            max_iters: 500,
            tolerance: 1e-12,
            seed: 0,
            random_starts: 0,
            staged: true,
        }
    }
}

/// Huber threshold used when robust fitting is switched on without a value.
pub const DEFAULT_HUBER_DELTA: f64 = 1e-3;

/// Default exponent starting points.
pub const DEFAULT_EXPONENT_GRID: [f64; 5] = [0.05, 0.1, 0.2, 0.3, 0.5];

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(FitError::InvalidConfig(msg));
        if !(self.tolerance > 0.0) {
            return bad(format!("tolerance must be positive, got {}", self.tolerance));
        }
        if self.max_iters == 0 {
            return bad("max_iters must be at least 1".into());
        }
        if let Some(delta) = self.robust_delta {
            if !(delta > 0.0) {
                return bad(format!("robust_delta must be positive, got {delta}"));
            }
        }
        for (name, (lo, hi)) in &self.bounds {
            if !(lo < hi) {
                return bad(format!("bounds for `{name}` need lo < hi, got ({lo}, {hi})"));
            }
        }
        for (name, values) in &self.multistart_grid {
            if values.is_empty() {
                return bad(format!("multistart grid for `{name}` is empty"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub family: LawFamily,
    pub params: LawParams,
    pub mape_fit: f64,
    pub mape_pred: Option<f64>,
    pub converged: bool,
    pub n_starts_tried: usize,
    pub best_objective: f64,
    pub iterations: usize,
    /// Residual per fitted record, in the configured residual space.
    pub residuals: Vec<f64>,
    /// Objective after each accepted iteration of the winning start.
    pub objective_trace: Vec<f64>,
}

/// Mean absolute percentage error, as a fraction.
pub fn mape(predicted: &[f64], actual: &[f64]) -> Result<f64> {
    if predicted.len() != actual.len() {
        return Err(FitError::LengthMismatch {
            predicted: predicted.len(),
            actual: actual.len(),
        });
    }
    if actual.is_empty() {
        return Err(FitError::EmptyInput);
    }
    let mut acc = 0.0;
    for (index, (&p, &a)) in predicted.iter().zip(actual).enumerate() {
        if !(a > 0.0) {
            return Err(FitError::NonPositiveActual { index, value: a });
        }
        acc += (p - a).abs() / a;
    }
    Ok(acc / actual.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Scale {
    Log,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Role {
    Coefficient,
    Exponent,
    Offset,
    Steepness,
    /// Not identifiable from the data alone; held at its start value.
    Frozen,
}

fn role(family: LawFamily, name: &str) -> Role {
    match (family, name) {
        (LawFamily::SaturatingPerf, "i0") | (LawFamily::DecayedPerf, "decay") => Role::Frozen,
        (_, "e_irreducible") => Role::Offset,
        (_, "k1") | (_, "k2") => Role::Steepness,
        (_, n) if n.starts_with("alpha") => Role::Exponent,
        _ => Role::Coefficient,
    }
}

struct Setup {
    family: LawFamily,
    names: &'static [&'static str],
    roles: Vec<Role>,
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl Setup {
    fn new(family: LawFamily, data: &[TrainingRun], config: &FitConfig) -> Result<Self> {
        let names = family.param_names();
        let roles: Vec<Role> = names.iter().map(|n| role(family, n)).collect();
        let min_loss = data.iter().map(|r| r.loss).fold(f64::INFINITY, f64::min);
        let mut lo = Vec::new();
        let mut hi = Vec::new();
        for (name, r) in names.iter().zip(&roles) {
            let (l, h) = match config.bounds.get(*name) {
                Some(&b) => b,
                None => match r {
                    Role::Coefficient | Role::Frozen => (1e-12, 1e12),
                    Role::Exponent => (1e-3, 2.0),
                    Role::Offset => (0.0, min_loss * (1.0 - 1e-9)),
                    Role::Steepness => (0.0, 1.0),
                },
            };
            if *r == Role::Coefficient && l <= 0.0 {
                return Err(FitError::InvalidConfig(format!(
                    "lower bound for coefficient `{name}` must be positive"
                )));
            }
            lo.push(l);
            hi.push(h);
        }
        Ok(Self {
            family,
            names,
            roles,
            lo,
            hi,
        })
    }

    fn scale(&self, i: usize) -> Scale {
        match self.roles[i] {
            Role::Coefficient | Role::Frozen => Scale::Log,
            _ => Scale::Identity,
        }
    }

    fn to_internal(&self, natural: &[f64]) -> Vec<f64> {
        natural
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let v = v.clamp(self.lo[i], self.hi[i]);
                match self.scale(i) {
                    Scale::Log => v.ln(),
                    Scale::Identity => v,
                }
            })
            .collect()
    }

    fn to_natural(&self, internal: &[f64]) -> Vec<f64> {
        internal
            .iter()
            .enumerate()
            .map(|(i, &u)| match self.scale(i) {
                Scale::Log => u.exp(),
                Scale::Identity => u,
            })
            .collect()
    }

    fn internal_bounds(&self, i: usize) -> (f64, f64) {
        match self.scale(i) {
            Scale::Log => (self.lo[i].ln(), self.hi[i].ln()),
            Scale::Identity => (self.lo[i], self.hi[i]),
        }
    }
}

struct Problem<'a> {
    setup: &'a Setup,
    records: &'a [TrainingRun],
    space: ResidualSpace,
    delta: Option<f64>,
}

struct Evaluation {
    objective: f64,
    residuals: Vec<f64>,
    /// Row-major `m x p` Jacobian of the residuals in internal coordinates.
    jacobian: Vec<f64>,
}

fn huber(r: f64, delta: f64) -> f64 {
    let a = r.abs();
    if a <= delta {
        0.5 * r * r
    } else {
        delta * (a - 0.5 * delta)
    }
}

impl Problem<'_> {
    fn params(&self, internal: &[f64]) -> LawParams {
        LawParams::from_vec(self.setup.family, &self.setup.to_natural(internal))
    }

    fn objective_of(&self, residuals: &[f64]) -> f64 {
        match self.delta {
            None => 0.5 * residuals.iter().map(|r| r * r).sum::<f64>(),
            Some(delta) => residuals.iter().map(|&r| huber(r, delta)).sum(),
        }
    }

    fn residual(&self, pred: f64, obs: f64) -> Option<f64> {
        let r = match self.space {
            ResidualSpace::Log => {
                if !(pred > 0.0) {
                    return None;
                }
                pred.ln() - obs.ln()
            }
            ResidualSpace::Linear => pred - obs,
        };
        r.is_finite().then_some(r)
    }

    fn residuals(&self, internal: &[f64]) -> Option<Vec<f64>> {
        let params = self.params(internal);
        self.records
            .iter()
            .map(|rec| {
                let pred = params.eval_record(rec).ok()?;
                self.residual(pred, rec.loss)
            })
            .collect()
    }

    fn objective(&self, internal: &[f64]) -> Option<f64> {
        let r = self.residuals(internal)?;
        let f = self.objective_of(&r);
        f.is_finite().then_some(f)
    }

    fn evaluate(&self, internal: &[f64]) -> Option<Evaluation> {
        let params = self.params(internal);
        let natural = self.setup.to_natural(internal);
        let p = internal.len();
        let mut residuals = Vec::with_capacity(self.records.len());
        let mut jacobian = Vec::with_capacity(self.records.len() * p);
        for rec in self.records {
            let (pred, grad) = params.value_and_grad(rec).ok()?;
            let r = self.residual(pred, rec.loss)?;
            let outer = match self.space {
                ResidualSpace::Log => 1.0 / pred,
                ResidualSpace::Linear => 1.0,
            };
            for (j, g) in grad.iter().enumerate() {
                let chain = match self.setup.scale(j) {
                    Scale::Log => natural[j],
                    Scale::Identity => 1.0,
                };
                let v = g * chain * outer;
                if !v.is_finite() {
                    return None;
                }
                jacobian.push(v);
            }
            residuals.push(r);
        }
        let objective = self.objective_of(&residuals);
        objective.is_finite().then_some(Evaluation {
            objective,
            residuals,
            jacobian,
        })
    }
}

#[derive(Debug, Clone)]
struct StartOutcome {
    internal: Vec<f64>,
    objective: f64,
    converged: bool,
    iterations: usize,
    trace: Vec<f64>,
}

/// Projected Levenberg-Marquardt over the parameters flagged in `free`.
fn levenberg_marquardt(
    problem: &Problem<'_>,
    start: Vec<f64>,
    free: &[bool],
    max_iters: usize,
    tol: f64,
    trace: &mut Vec<f64>,
) -> Option<StartOutcome> {
    let setup = problem.setup;
    let p = start.len();
    let mut u = start;
    for (i, v) in u.iter_mut().enumerate() {
        let (lo, hi) = setup.internal_bounds(i);
        *v = v.clamp(lo, hi);
    }
    let mut current = problem.evaluate(&u)?;
    if trace.is_empty() {
        trace.push(current.objective);
    }
    let mut mu = 1e-3;
    let mut converged = false;
    let mut iterations = 0;

    while iterations < max_iters {
        iterations += 1;
        if current.objective == 0.0 {
            converged = true;
            break;
        }
        let (jtj, jtr) = normal_equations(problem, &current, free);
        let active = active_set(problem, &u, &jtr, free);
        if active.is_empty() {
            converged = true;
            break;
        }
        let k = active.len();
        let max_diag = active
            .iter()
            .map(|&i| jtj[i * p + i])
            .fold(0.0f64, f64::max)
            .max(1e-300);

        let mut accepted = None;
        while mu < 1e30 {
            let mut a = vec![0.0; k * k];
            let mut b = vec![0.0; k];
            for (ai, &i) in active.iter().enumerate() {
                b[ai] = -jtr[i];
                for (bi, &j) in active.iter().enumerate() {
                    a[ai * k + bi] = jtj[i * p + j];
                }
                let diag = jtj[i * p + i].max(1e-12 * max_diag);
                a[ai * k + ai] += mu * diag;
            }
            let Some(step) = crate::linalg::solve(a, b) else {
                mu *= 10.0;
                continue;
            };
            let mut trial = u.clone();
            for (ai, &i) in active.iter().enumerate() {
                let (lo, hi) = setup.internal_bounds(i);
                trial[i] = (u[i] + step[ai]).clamp(lo, hi);
            }
            match problem.objective(&trial) {
                Some(f) if f < current.objective => {
                    accepted = Some((trial, f));
                    break;
                }
                _ => mu *= 10.0,
            }
        }
        let Some((trial, _)) = accepted else {
            // No decrease at any damping: a (constrained) minimum to working precision.
            converged = true;
            break;
        };
        let step_norm = trial.iter().zip(&u).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let scale = u.iter().map(|v| v.abs()).fold(0.0, f64::max);
        let Some(next) = problem.evaluate(&trial) else {
            break;
        };
        u = trial;
        current = next;
        trace.push(current.objective);
        mu = (mu * 0.1).max(1e-15);
        if step_norm <= tol * (1.0 + scale) {
            converged = true;
            break;
        }
    }
    if converged {
        polish(problem, &mut u, &mut current, free, trace);
    }
    Some(StartOutcome {
        internal: u,
        objective: current.objective,
        converged,
        iterations,
        trace: trace.clone(),
    })
}

/// `J^T W J` and `J^T W r`, with Huber weights when enabled.
fn normal_equations(problem: &Problem<'_>, current: &Evaluation, free: &[bool]) -> (Vec<f64>, Vec<f64>) {
    let p = free.len();
    let mut jtj = vec![0.0; p * p];
    let mut jtr = vec![0.0; p];
    for (row, &r) in current.residuals.iter().enumerate() {
        let w = match problem.delta {
            Some(delta) if r.abs() > delta => delta / r.abs(),
            _ => 1.0,
        };
        let jr = &current.jacobian[row * p..(row + 1) * p];
        for a in 0..p {
            if !free[a] {
                continue;
            }
            jtr[a] += w * jr[a] * r;
            for b in 0..p {
                if free[b] {
                    jtj[a * p + b] += w * jr[a] * jr[b];
                }
            }
        }
    }
    (jtj, jtr)
}

/// Free variables, minus those pinned at a bound by the descent direction.
fn active_set(problem: &Problem<'_>, u: &[f64], jtr: &[f64], free: &[bool]) -> Vec<usize> {
    (0..u.len())
        .filter(|&i| {
            if !free[i] {
                return false;
            }
            let (lo, hi) = problem.setup.internal_bounds(i);
            let at_lo = u[i] <= lo && jtr[i] > 0.0;
            let at_hi = u[i] >= hi && jtr[i] < 0.0;
            !(at_lo || at_hi)
        })
        .collect()
}

fn gradient_norm(jtr: &[f64], active: &[usize]) -> f64 {
    active.iter().map(|&i| jtr[i].abs()).fold(0.0, f64::max)
}

/// Undamped Gauss-Newton steps taken while they shrink the gradient. Near the
/// minimum the objective is flat to working precision along ill-conditioned
/// directions, so objective comparisons alone stop short of it.
fn polish(problem: &Problem<'_>, u: &mut Vec<f64>, current: &mut Evaluation, free: &[bool], trace: &mut Vec<f64>) {
    for _ in 0..4 {
        let (jtj, jtr) = normal_equations(problem, current, free);
        let active = active_set(problem, u, &jtr, free);
        if active.is_empty() {
            return;
        }
        let k = active.len();
        let mut a = vec![0.0; k * k];
        let mut b = vec![0.0; k];
        for (ai, &i) in active.iter().enumerate() {
            b[ai] = -jtr[i];
            for (bi, &j) in active.iter().enumerate() {
                a[ai * k + bi] = jtj[i * free.len() + j];
            }
        }
        let Some(step) = crate::linalg::solve(a, b) else {
            return;
        };
        let mut trial = u.clone();
        for (ai, &i) in active.iter().enumerate() {
            let (lo, hi) = problem.setup.internal_bounds(i);
            trial[i] = (u[i] + step[ai]).clamp(lo, hi);
        }
        let Some(next) = problem.evaluate(&trial) else {
            return;
        };
        let (_, next_jtr) = normal_equations(problem, &next, free);
        let shrinks = gradient_norm(&next_jtr, &active) < gradient_norm(&jtr, &active);
        let flat = next.objective <= current.objective * (1.0 + 1e-12);
        if !(shrinks && flat) {
            return;
        }
        *u = trial;
        *current = next;
        trace.push(current.objective);
    }
}

fn family_data_check(family: LawFamily, records: &[TrainingRun]) -> Result<()> {
    for rec in records {
        match family {
            LawFamily::PowerBatch if rec.batch_size.is_none() => {
                return Err(LawError::MissingField {
                    family,
                    field: "batch_size",
                }
                .into())
            }
            LawFamily::PowerLr if rec.learning_rate.is_none() => {
                return Err(LawError::MissingField {
                    family,
                    field: "learning_rate",
                }
                .into())
            }
            _ => {}
        }
    }
    Ok(())
}

/// Predictor of the power and decayed families for a record.
fn predictor(family: LawFamily, rec: &TrainingRun) -> f64 {
    match family {
        LawFamily::PowerBatch => rec.batch_size.unwrap_or(1) as f64,
        LawFamily::PowerLr => rec.learning_rate.unwrap_or(1.0),
        LawFamily::SaturatingPerf => rec.tokens as f64,
        _ => rec.compute(),
    }
}

/// Cartesian product of the per-parameter grids, in parameter order.
fn cartesian(axes: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out = vec![Vec::new()];
    for axis in axes {
        let mut next = Vec::with_capacity(out.len() * axis.len());
        for prefix in &out {
            for &v in axis {
                let mut row = prefix.clone();
                row.push(v);
                next.push(row);
            }
        }
        out = next;
    }
    out
}

/// Starting points in natural coordinates. Coefficients without an explicit
/// grid are derived from the data once the other parameters are set.
fn starting_points(setup: &Setup, data: &[TrainingRun], config: &FitConfig) -> Vec<Vec<f64>> {
    let family = setup.family;
    let min_loss = data.iter().map(|r| r.loss).fold(f64::INFINITY, f64::min);
    let reference = SubOptimalParams::reference();
    let mut derived = vec![false; setup.names.len()];
    let axes: Vec<Vec<f64>> = setup
        .names
        .iter()
        .enumerate()
        .map(|(i, name)| {
            if let Some(grid) = config.multistart_grid.get(*name) {
                return grid.clone();
            }
            match setup.roles[i] {
                Role::Exponent => DEFAULT_EXPONENT_GRID.to_vec(),
                Role::Offset => vec![0.9 * min_loss],
                Role::Steepness => vec![if *name == "k1" { reference.k1 } else { reference.k2 }],
                Role::Frozen => vec![1.0],
                Role::Coefficient => {
                    derived[i] = true;
                    vec![f64::NAN]
                }
            }
        })
        .collect();

    let mut starts: Vec<Vec<f64>> = cartesian(&axes)
        .into_iter()
        .map(|mut v| {
            init_coefficients(family, &mut v, &derived, data);
            v
        })
        .collect();

    if config.random_starts > 0 {
        let mut rng = FixtureRng::new(config.seed);
        for _ in 0..config.random_starts {
            let mut v: Vec<f64> = (0..setup.names.len())
                .map(|i| {
                    if setup.roles[i] == Role::Frozen {
                        return axes[i][0];
                    }
                    let (lo, hi) = setup.internal_bounds(i);
                    let u = rng.uniform_range(lo, hi);
                    match setup.scale(i) {
                        Scale::Log => u.exp(),
                        Scale::Identity => u,
                    }
                })
                .collect();
            init_coefficients(family, &mut v, &derived, data);
            starts.push(v);
        }
    }
    starts
}

/// Fills derived coefficients from the data given the other parameters.
fn init_coefficients(family: LawFamily, v: &mut [f64], derived: &[bool], data: &[TrainingRun]) {
    let first = data
        .iter()
        .min_by(|a, b| predictor(family, a).total_cmp(&predictor(family, b)))
        .expect("non-empty data");
    let last = data
        .iter()
        .max_by(|a, b| predictor(family, a).total_cmp(&predictor(family, b)))
        .expect("non-empty data");
    match family {
        LawFamily::Power | LawFamily::PowerBatch | LawFamily::PowerLr => {
            if derived[0] {
                let alpha = v[1];
                let at = |r: &TrainingRun| r.loss.ln() + alpha * predictor(family, r).ln();
                v[0] = (0.5 * (at(first) + at(last))).exp();
            }
        }
        LawFamily::DecayedPerf => {
            if derived[1] {
                let (decay, alpha) = (v[0], v[2]);
                let at = |r: &TrainingRun| (r.loss / decay).ln() - alpha * predictor(family, r).ln();
                v[1] = (0.5 * (at(first) + at(last))).exp();
            }
        }
        LawFamily::SaturatingPerf => {
            let max_perf = data.iter().map(|r| r.loss).fold(0.0, f64::max);
            if derived[0] {
                v[0] = 1.2 * max_perf;
            }
            if derived[1] {
                let (p0, i0, alpha) = (v[0], v[2], v[3]);
                let n = first.tokens as f64;
                let g = if alpha == 0.0 { n } else { n.powf(-alpha) };
                let frac = (first.loss / p0).min(0.99);
                v[1] = (-(1.0 - frac).ln() / (i0 * g)).max(1e-12);
            }
        }
        LawFamily::Chinchilla | LawFamily::Suboptimal => {
            init_additive_coefficients(family, v, derived, data, first);
        }
    }
}

/// For the additive laws, `L - E` is linear in `(lambda_n, lambda_d)` once the
/// exponents and steepness values are fixed, so both are solved by least
/// squares over all records, falling back to an even split of the first
/// record's reducible loss when that gives a non-positive coefficient.
fn init_additive_coefficients(
    family: LawFamily,
    v: &mut [f64],
    derived: &[bool],
    data: &[TrainingRun],
    first: &TrainingRun,
) {
    let (e, alpha_n, alpha_d) = (v[0], v[2], v[4]);
    let (k1, k2) = if family == LawFamily::Suboptimal {
        (v[5], v[6])
    } else {
        (f64::NAN, f64::NAN)
    };
    let basis = |r: &TrainingRun| {
        let n = r.model_size as f64;
        let d = r.tokens as f64;
        let (rn, rd) = if family == LawFamily::Suboptimal {
            (repetition_factor(d / n, k2), repetition_factor(d / n, k1))
        } else {
            (1.0, 1.0)
        };
        (rn * n.powf(-alpha_n), rd * d.powf(-alpha_d))
    };
    let design: Vec<f64> = data
        .iter()
        .flat_map(|r| {
            let (bn, bd) = basis(r);
            [bn, bd]
        })
        .collect();
    let target: Vec<f64> = data.iter().map(|r| r.loss - e).collect();
    let solved = crate::linalg::least_squares(&design, &target, 2).filter(|c| c[0] > 0.0 && c[1] > 0.0);
    let (lambda_n, lambda_d) = match solved {
        Some(c) => (c[0], c[1]),
        None => {
            let (bn, bd) = basis(first);
            let reducible = (first.loss - e).max(1e-6);
            (0.5 * reducible / bn, 0.5 * reducible / bd)
        }
    };
    if derived[1] {
        v[1] = lambda_n;
    }
    if derived[3] {
        v[3] = lambda_d;
    }
}

fn run_start(problem: &Problem<'_>, start: &[f64], config: &FitConfig) -> Option<StartOutcome> {
    let setup = problem.setup;
    let internal = setup.to_internal(start);
    let free: Vec<bool> = setup.roles.iter().map(|r| *r != Role::Frozen).collect();
    let mut trace = Vec::new();
    let staged = config.staged && setup.family == LawFamily::Suboptimal && setup.roles.contains(&Role::Steepness);
    if staged {
        let stage1_free: Vec<bool> = free
            .iter()
            .zip(&setup.roles)
            .map(|(f, r)| *f && *r != Role::Steepness)
            .collect();
        let first = levenberg_marquardt(
            problem,
            internal,
            &stage1_free,
            config.max_iters,
            config.tolerance,
            &mut trace,
        )?;
        let mut second = levenberg_marquardt(
            problem,
            first.internal,
            &free,
            config.max_iters,
            config.tolerance,
            &mut trace,
        )?;
        second.iterations += first.iterations;
        Some(second)
    } else {
        levenberg_marquardt(problem, internal, &free, config.max_iters, config.tolerance, &mut trace)
    }
}

/// Fits `family` to every record of `fit_split`.
pub fn fit_law(fit_split: &RunSeries, family: LawFamily, config: &FitConfig) -> Result<FitResult> {
    fit_records(fit_split.records(), family, config)
}

pub fn fit_records(records: &[TrainingRun], family: LawFamily, config: &FitConfig) -> Result<FitResult> {
    config.validate()?;
    family_data_check(family, records)?;
    let setup = Setup::new(family, records, config)?;
    let n_free = setup.roles.iter().filter(|r| **r != Role::Frozen).count();
    if records.len() < n_free + 1 {
        return Err(FitError::InsufficientData {
            family,
            needed: n_free + 1,
            got: records.len(),
        });
    }
    let problem = Problem {
        setup: &setup,
        records,
        space: config.residual_space,
        delta: config.robust_delta,
    };
    let starts = starting_points(&setup, records, config);
    let outcomes: Vec<Option<StartOutcome>> = starts.par_iter().map(|s| run_start(&problem, s, config)).collect();

    let mut best: Option<&StartOutcome> = None;
    for outcome in outcomes.iter().flatten() {
        if best.is_none_or(|b| outcome.objective < b.objective) {
            best = Some(outcome);
        }
    }
    let best = best.ok_or(FitError::NoConvergence {
        family,
        starts: starts.len(),
    })?;
    let params = problem.params(&best.internal);
    let residuals = problem
        .residuals(&best.internal)
        .expect("winning start has finite residuals");
    let predicted: Vec<f64> = records
        .iter()
        .map(|r| params.eval_record(r))
        .collect::<Result<_, _>>()?;
    let actual: Vec<f64> = records.iter().map(|r| r.loss).collect();
    Ok(FitResult {
        family,
        params,
        mape_fit: mape(&predicted, &actual)?,
        mape_pred: None,
        converged: best.converged,
        n_starts_tried: starts.len(),
        best_objective: best.objective,
        iterations: best.iterations,
        residuals,
        objective_trace: best.trace.clone(),
    })
}

/// Evaluates `params` at each holdout record; returns predictions and MAPE.
pub fn predict(params: &LawParams, holdout: &RunSeries) -> Result<(Vec<f64>, f64)> {
    predict_records(params, holdout.records())
}

pub fn predict_records(params: &LawParams, holdout: &[TrainingRun]) -> Result<(Vec<f64>, f64)> {
    if holdout.is_empty() {
        return Err(FitError::EmptyInput);
    }
    let predicted: Vec<f64> = holdout
        .iter()
        .map(|r| params.eval_record(r))
        .collect::<Result<_, _>>()?;
    let actual: Vec<f64> = holdout.iter().map(|r| r.loss).collect();
    let m = mape(&predicted, &actual)?;
    Ok((predicted, m))
}

/// One row of a law comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub family: LawFamily,
    pub mape_fit: Option<f64>,
    pub mape_pred: Option<f64>,
    pub converged: bool,
    pub params: Option<LawParams>,
    pub n_params: usize,
    pub error: Option<String>,
}

/// Fits each family on the first `split_fraction` of every run and predicts
/// the rest. Rows are sorted by prediction MAPE, then by parameter count;
/// failed rows follow in request order.
pub fn compare_laws(
    series: &RunSeries,
    families: &[LawFamily],
    config: &FitConfig,
    split_fraction: f64,
) -> Result<Vec<ComparisonRow>> {
    let (fit_split, holdout) = split_fit_holdout(series, split_fraction)?;
    let mut rows: Vec<ComparisonRow> = families
        .iter()
        .map(|&family| {
            let attempt = fit_law(&fit_split, family, config).and_then(|fit| {
                let (_, mape_pred) = predict(&fit.params, &holdout)?;
                Ok((fit, mape_pred))
            });
            match attempt {
                Ok((fit, mape_pred)) => ComparisonRow {
                    family,
                    mape_fit: Some(fit.mape_fit),
                    mape_pred: Some(mape_pred),
                    converged: fit.converged,
                    params: Some(fit.params),
                    n_params: family.n_params(),
                    error: None,
                },
                Err(e) => ComparisonRow {
                    family,
                    mape_fit: None,
                    mape_pred: None,
                    converged: false,
                    params: None,
                    n_params: family.n_params(),
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    rows.sort_by(|a, b| match (a.mape_pred, b.mape_pred) {
        (Some(x), Some(y)) => x.total_cmp(&y).then(a.n_params.cmp(&b.n_params)),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => std::cmp::Ordering::Equal,
    });
    Ok(rows)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn params_columns(params: &LawParams) -> Vec<String> {
    params
        .family()
        .param_names()
        .iter()
        .zip(params.to_vec())
        .map(|(n, v)| format!("{n}={v}"))
        .collect()
}

/// CSV with columns `family,mape_fit,mape_pred,converged,params...`; each
/// trailing column holds one `name=value` pair.
pub fn comparison_csv(rows: &[ComparisonRow]) -> String {
    let mut out = String::from("family,mape_fit,mape_pred,converged,params...\n");
    for row in rows {
        let mut cols = vec![
            row.family.name().to_string(),
            fmt_opt(row.mape_fit),
            fmt_opt(row.mape_pred),
            row.converged.to_string(),
        ];
        if let Some(p) = &row.params {
            cols.extend(params_columns(p));
        }
        out.push_str(&cols.join(","));
        out.push('\n');
    }
    out
}

/// Single-row CSV for one fit, same layout as [`comparison_csv`].
pub fn fit_result_csv(result: &FitResult) -> String {
    let mut cols = vec![
        result.family.name().to_string(),
        result.mape_fit.to_string(),
        fmt_opt(result.mape_pred),
        result.converged.to_string(),
    ];
    cols.extend(params_columns(&result.params));
    format!("family,mape_fit,mape_pred,converged,params...\n{}\n", cols.join(","))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::laws::PowerLawParams;

    #[test]
    fn mape_examples() {
        assert_eq!(mape(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        let actual = [2.0, 3.5, 10.0];
        let pred: Vec<f64> = actual.iter().map(|a| 1.1 * a).collect();
        assert!((mape(&pred, &actual).unwrap() - 0.1).abs() < 1e-12);
        assert!((mape(&[2.0, 3.0], &[2.5, 2.0]).unwrap() - 0.35).abs() < 1e-12);
    }

    #[test]
    fn mape_errors() {
        assert!(matches!(
            mape(&[1.0], &[1.0, 2.0]),
            Err(FitError::LengthMismatch { .. })
        ));
        assert!(matches!(
            mape(&[1.0, 1.0], &[1.0, 0.0]),
            Err(FitError::NonPositiveActual { index: 1, .. })
        ));
        assert!(matches!(mape(&[], &[]), Err(FitError::EmptyInput)));
    }

    #[test]
    fn config_validation() {
        let mut cfg = FitConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.bounds.insert("alpha".into(), (1.0, 0.5));
        assert!(cfg.validate().is_err());
        let mut cfg = FitConfig::default();
        cfg.multistart_grid.insert("alpha".into(), vec![]);
        assert!(cfg.validate().is_err());
        let cfg = FitConfig {
            tolerance: 0.0,
            ..FitConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn config_json_defaults() {
        let cfg: FitConfig = serde_json::from_str(r#"{"residual_space":"linear","max_iters":50}"#).unwrap();
        assert_eq!(cfg.residual_space, ResidualSpace::Linear);
        assert_eq!(cfg.max_iters, 50);
        assert_eq!(cfg.tolerance, FitConfig::default().tolerance);
    }

    #[test]
    fn insufficient_data() {
        let recs = vec![TrainingRun::new("a", 10, 10, 3.0), TrainingRun::new("a", 10, 20, 2.9)];
        assert!(matches!(
            fit_records(&recs, LawFamily::Chinchilla, &FitConfig::default()),
            Err(FitError::InsufficientData { needed: 6, got: 2, .. })
        ));
    }

    #[test]
    fn batch_family_requires_field() {
        let recs: Vec<_> = (1..=5).map(|i| TrainingRun::new("a", 10, i * 10, 3.0)).collect();
        assert!(matches!(
            fit_records(&recs, LawFamily::PowerBatch, &FitConfig::default()),
            Err(FitError::MissingField(_))
        ));
    }

    #[test]
    fn predict_empty_is_error() {
        let p = LawParams::Power(PowerLawParams {
            lambda: 1.0,
            alpha: 0.1,
        });
        assert!(matches!(predict_records(&p, &[]), Err(FitError::EmptyInput)));
    }

    #[test]
    fn huber_pieces() {
        assert_eq!(huber(0.5, 1.0), 0.125);
        assert_eq!(huber(3.0, 1.0), 2.5);
    }

    #[test]
    fn cartesian_order() {
        let grid = cartesian(&[vec![1.0, 2.0], vec![3.0], vec![4.0, 5.0]]);
        assert_eq!(
            grid,
            vec![
                vec![1.0, 3.0, 4.0],
                vec![1.0, 3.0, 5.0],
                vec![2.0, 3.0, 4.0],
                vec![2.0, 3.0, 5.0]
            ]
        );
    }
}
