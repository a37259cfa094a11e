//! Closed-form scaling-law evaluators and their parameter gradients.
//!
//! Two unrelated quantities are commonly written `R_D`:
//!
//! - the logistic *repetition factor* of the sub-optimal loss law,
//!   `1 + 1/(1 + exp(-k * OTR))`, modelled by [`SubOptimalParams::k1`]/[`SubOptimalParams::k2`]
//!   and evaluated by [`repetition_factor`];
//! - the density *decay factor* of the performance law `P = R_D * lambda * C^alpha`,
//!   modelled by [`DecayedPerfParams::decay`].
//!
//! They are kept as separate parameter types.
//!
//! The saturating performance law `P(n) = P0 * (1 - exp(-beta * I0 * n^-alpha))`
//! is implemented exactly as written. For `alpha > 0` this makes `P` decrease
//! in `n`, since the information term `I0 * n^-alpha` shrinks; `alpha = 0`
//! selects the low-density regime with linear information gain `I0 * n`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::runs::{compute_flops, TrainingRun};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LawError {
    #[error("record is missing `{field}` required by the {family} law")]
    MissingField { family: LawFamily, field: &'static str },
    #[error("the {family} law cannot be evaluated from (N, D) alone")]
    UnsupportedInput { family: LawFamily },
    #[error("invalid {family} parameters: {reason}")]
    InvalidParams { family: LawFamily, reason: String },
}

/// `lambda * x^(-alpha)`: loss against compute, batch size or learning rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerLawParams {
    pub lambda: f64,
    pub alpha: f64,
}

/// `E + lambda_n * N^(-alpha_n) + lambda_d * D^(-alpha_d)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChinchillaParams {
    pub e_irreducible: f64,
    pub lambda_n: f64,
    pub alpha_n: f64,
    pub lambda_d: f64,
    pub alpha_d: f64,
}

/// Chinchilla form with each term scaled by a logistic repetition factor of
/// the over-training ratio: `k1` steers the data term, `k2` the model term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubOptimalParams {
    pub e_irreducible: f64,
    pub lambda_n: f64,
    pub alpha_n: f64,
    pub lambda_d: f64,
    pub alpha_d: f64,
    pub k1: f64,
    pub k2: f64,
}

impl SubOptimalParams {
    /// Published fit of the sub-optimal law (raw token and parameter counts).
    pub const fn reference() -> Self {
        Self {
            e_irreducible: 1.372,
            lambda_n: 61.929,
            alpha_n: 0.272,
            lambda_d: 455.345,
            alpha_d: 0.289,
            k1: 0.00810,
            k2: 0.00114,
        }
    }

    pub fn as_chinchilla(&self) -> ChinchillaParams {
        ChinchillaParams {
            e_irreducible: self.e_irreducible,
            lambda_n: self.lambda_n,
            alpha_n: self.alpha_n,
            lambda_d: self.lambda_d,
            alpha_d: self.alpha_d,
        }
    }
}

/// `P0 * (1 - exp(-beta * I(n)))` with `I(n) = I0 * n^(-alpha)`, or
/// `I(n) = I0 * n` when `alpha == 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SaturatingPerfParams {
    pub p0: f64,
    pub beta: f64,
    pub i0: f64,
    pub alpha: f64,
}

impl SaturatingPerfParams {
    pub fn is_low_density(&self) -> bool {
        self.alpha == 0.0
    }
}

/// `decay * lambda * C^alpha` with `decay` in (0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayedPerfParams {
    pub decay: f64,
    pub lambda: f64,
    pub alpha: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LawFamily {
    /// Power law in training compute `C = 6ND`.
    Power,
    /// Power law in batch size.
    PowerBatch,
    /// Power law in learning rate.
    PowerLr,
    Chinchilla,
    Suboptimal,
    SaturatingPerf,
    DecayedPerf,
}

impl LawFamily {
    pub const ALL: [LawFamily; 7] = [
        LawFamily::Power,
        LawFamily::PowerBatch,
        LawFamily::PowerLr,
        LawFamily::Chinchilla,
        LawFamily::Suboptimal,
        LawFamily::SaturatingPerf,
        LawFamily::DecayedPerf,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LawFamily::Power => "power",
            LawFamily::PowerBatch => "power_batch",
            LawFamily::PowerLr => "power_lr",
            LawFamily::Chinchilla => "chinchilla",
            LawFamily::Suboptimal => "suboptimal",
            LawFamily::SaturatingPerf => "saturating_perf",
            LawFamily::DecayedPerf => "decayed_perf",
        }
    }

    /// Parameter names in vector order.
    pub fn param_names(self) -> &'static [&'static str] {
        match self {
            LawFamily::Power | LawFamily::PowerBatch | LawFamily::PowerLr => &["lambda", "alpha"],
            LawFamily::Chinchilla => &["e_irreducible", "lambda_n", "alpha_n", "lambda_d", "alpha_d"],
            LawFamily::Suboptimal => &[
                "e_irreducible",
                "lambda_n",
                "alpha_n",
                "lambda_d",
                "alpha_d",
                "k1",
                "k2",
            ],
            LawFamily::SaturatingPerf => &["p0", "beta", "i0", "alpha"],
            LawFamily::DecayedPerf => &["decay", "lambda", "alpha"],
        }
    }

    pub fn n_params(self) -> usize {
        self.param_names().len()
    }
}

impl std::fmt::Display for LawFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for LawFamily {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key = s.trim().to_ascii_lowercase().replace('-', "_");
        let family = match key.as_str() {
            "power" | "openai" | "kaplan" => LawFamily::Power,
            "power_batch" | "batch" => LawFamily::PowerBatch,
            "power_lr" | "lr" | "learning_rate" => LawFamily::PowerLr,
            "chinchilla" | "hoffmann" => LawFamily::Chinchilla,
            "suboptimal" | "sub_optimal" => LawFamily::Suboptimal,
            "saturating_perf" | "saturating" => LawFamily::SaturatingPerf,
            "decayed_perf" | "decayed" => LawFamily::DecayedPerf,
            _ => return Err(format!("unknown law family `{s}`")),
        };
        Ok(family)
    }
}

/// Parameters of any supported law, serialized with a `family` discriminator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum LawParams {
    Power(PowerLawParams),
    PowerBatch(PowerLawParams),
    PowerLr(PowerLawParams),
    Chinchilla(ChinchillaParams),
    Suboptimal(SubOptimalParams),
    SaturatingPerf(SaturatingPerfParams),
    DecayedPerf(DecayedPerfParams),
}

pub fn eval_power(params: &PowerLawParams, x: f64) -> f64 {
    params.lambda * x.powf(-params.alpha)
}

/// `1 + 1/(1 + exp(-k * otr))`, in `[1.5, 2)` for non-negative arguments.
pub fn repetition_factor(otr: f64, k: f64) -> f64 {
    1.0 + logistic(k * otr)
}

fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn eval_chinchilla(params: &ChinchillaParams, n: f64, d: f64) -> f64 {
    params.e_irreducible + params.lambda_n * n.powf(-params.alpha_n) + params.lambda_d * d.powf(-params.alpha_d)
}

pub fn eval_suboptimal(params: &SubOptimalParams, n: f64, d: f64) -> f64 {
    let otr = d / n;
    let r_d = repetition_factor(otr, params.k1);
    let r_n = repetition_factor(otr, params.k2);
    params.e_irreducible
        + params.lambda_n * r_n * n.powf(-params.alpha_n)
        + params.lambda_d * r_d * d.powf(-params.alpha_d)
}

pub fn eval_saturating_perf(params: &SaturatingPerfParams, n_samples: f64) -> f64 {
    let info = information_gain(params, n_samples);
    // -expm1 keeps precision when beta * I is tiny.
    -params.p0 * (-params.beta * info).exp_m1()
}

fn information_gain(params: &SaturatingPerfParams, n: f64) -> f64 {
    if params.is_low_density() {
        params.i0 * n
    } else {
        params.i0 * n.powf(-params.alpha)
    }
}

pub fn eval_decayed_perf(params: &DecayedPerfParams, c: f64) -> f64 {
    params.decay * params.lambda * c.powf(params.alpha)
}

fn power_grad(p: &PowerLawParams, x: f64) -> (f64, Vec<f64>) {
    let base = x.powf(-p.alpha);
    let value = p.lambda * base;
    (value, vec![base, -x.ln() * value])
}

fn suboptimal_grad(p: &SubOptimalParams, n: f64, d: f64) -> (f64, Vec<f64>) {
    let otr = d / n;
    let s_d = logistic(p.k1 * otr);
    let s_n = logistic(p.k2 * otr);
    let (r_d, r_n) = (1.0 + s_d, 1.0 + s_n);
    let pn = n.powf(-p.alpha_n);
    let pd = d.powf(-p.alpha_d);
    let term_n = p.lambda_n * r_n * pn;
    let term_d = p.lambda_d * r_d * pd;
    let value = p.e_irreducible + term_n + term_d;
    let grad = vec![
        1.0,
        r_n * pn,
        -n.ln() * term_n,
        r_d * pd,
        -d.ln() * term_d,
        p.lambda_d * pd * s_d * (1.0 - s_d) * otr,
        p.lambda_n * pn * s_n * (1.0 - s_n) * otr,
    ];
    (value, grad)
}

fn chinchilla_grad(p: &ChinchillaParams, n: f64, d: f64) -> (f64, Vec<f64>) {
    let pn = n.powf(-p.alpha_n);
    let pd = d.powf(-p.alpha_d);
    let term_n = p.lambda_n * pn;
    let term_d = p.lambda_d * pd;
    let value = p.e_irreducible + term_n + term_d;
    (value, vec![1.0, pn, -n.ln() * term_n, pd, -d.ln() * term_d])
}

fn saturating_grad(p: &SaturatingPerfParams, n: f64) -> (f64, Vec<f64>) {
    let g = if p.is_low_density() { n } else { n.powf(-p.alpha) };
    let decay = (-p.beta * p.i0 * g).exp();
    let value = eval_saturating_perf(p, n);
    let common = p.p0 * decay;
    let d_alpha = if p.is_low_density() {
        0.0
    } else {
        common * p.beta * p.i0 * (-n.ln() * g)
    };
    (
        value,
        vec![1.0 - decay, common * p.i0 * g, common * p.beta * g, d_alpha],
    )
}

fn decayed_grad(p: &DecayedPerfParams, c: f64) -> (f64, Vec<f64>) {
    let base = c.powf(p.alpha);
    let value = p.decay * p.lambda * base;
    (value, vec![p.lambda * base, p.decay * base, value * c.ln()])
}

impl LawParams {
    pub fn family(&self) -> LawFamily {
        match self {
            LawParams::Power(_) => LawFamily::Power,
            LawParams::PowerBatch(_) => LawFamily::PowerBatch,
            LawParams::PowerLr(_) => LawFamily::PowerLr,
            LawParams::Chinchilla(_) => LawFamily::Chinchilla,
            LawParams::Suboptimal(_) => LawFamily::Suboptimal,
            LawParams::SaturatingPerf(_) => LawFamily::SaturatingPerf,
            LawParams::DecayedPerf(_) => LawFamily::DecayedPerf,
        }
    }

    /// Parameter values in [`LawFamily::param_names`] order.
    pub fn to_vec(&self) -> Vec<f64> {
        match self {
            LawParams::Power(p) | LawParams::PowerBatch(p) | LawParams::PowerLr(p) => {
                vec![p.lambda, p.alpha]
            }
            LawParams::Chinchilla(p) => {
                vec![p.e_irreducible, p.lambda_n, p.alpha_n, p.lambda_d, p.alpha_d]
            }
            LawParams::Suboptimal(p) => vec![
                p.e_irreducible,
                p.lambda_n,
                p.alpha_n,
                p.lambda_d,
                p.alpha_d,
                p.k1,
                p.k2,
            ],
            LawParams::SaturatingPerf(p) => vec![p.p0, p.beta, p.i0, p.alpha],
            LawParams::DecayedPerf(p) => vec![p.decay, p.lambda, p.alpha],
        }
    }

    /// Inverse of [`LawParams::to_vec`]. Panics if `values` has the wrong length.
    pub fn from_vec(family: LawFamily, values: &[f64]) -> Self {
        assert_eq!(values.len(), family.n_params(), "parameter count for {family}");
        let v = values;
        let power = || PowerLawParams {
            lambda: v[0],
            alpha: v[1],
        };
        match family {
            LawFamily::Power => LawParams::Power(power()),
            LawFamily::PowerBatch => LawParams::PowerBatch(power()),
            LawFamily::PowerLr => LawParams::PowerLr(power()),
            LawFamily::Chinchilla => LawParams::Chinchilla(ChinchillaParams {
                e_irreducible: v[0],
                lambda_n: v[1],
                alpha_n: v[2],
                lambda_d: v[3],
                alpha_d: v[4],
            }),
            LawFamily::Suboptimal => LawParams::Suboptimal(SubOptimalParams {
                e_irreducible: v[0],
                lambda_n: v[1],
                alpha_n: v[2],
                lambda_d: v[3],
                alpha_d: v[4],
                k1: v[5],
                k2: v[6],
            }),
            LawFamily::SaturatingPerf => LawParams::SaturatingPerf(SaturatingPerfParams {
                p0: v[0],
                beta: v[1],
                i0: v[2],
                alpha: v[3],
            }),
            LawFamily::DecayedPerf => LawParams::DecayedPerf(DecayedPerfParams {
                decay: v[0],
                lambda: v[1],
                alpha: v[2],
            }),
        }
    }

    /// Checks the family invariants (positivity, ranges).
    pub fn validate(&self) -> Result<(), LawError> {
        let family = self.family();
        let fail = |reason: String| Err(LawError::InvalidParams { family, reason });
        let values = self.to_vec();
        if values.iter().any(|v| !v.is_finite()) {
            return fail("parameters must be finite".into());
        }
        let names = family.param_names();
        let check_pos = |idx: &[usize]| -> Result<(), LawError> {
            for &i in idx {
                if values[i] <= 0.0 {
                    return Err(LawError::InvalidParams {
                        family,
                        reason: format!("`{}` must be positive, got {}", names[i], values[i]),
                    });
                }
            }
            Ok(())
        };
        match self {
            LawParams::Power(_) | LawParams::PowerBatch(_) | LawParams::PowerLr(_) => check_pos(&[0, 1]),
            LawParams::Chinchilla(p) => {
                check_pos(&[1, 2, 3, 4])?;
                if p.e_irreducible < 0.0 {
                    return fail("`e_irreducible` must be non-negative".into());
                }
                Ok(())
            }
            LawParams::Suboptimal(p) => {
                check_pos(&[1, 2, 3, 4])?;
                if p.e_irreducible < 0.0 || p.k1 < 0.0 || p.k2 < 0.0 {
                    return fail("`e_irreducible`, `k1` and `k2` must be non-negative".into());
                }
                Ok(())
            }
            LawParams::SaturatingPerf(p) => {
                check_pos(&[0, 1, 2])?;
                if p.alpha < 0.0 {
                    return fail("`alpha` must be non-negative".into());
                }
                Ok(())
            }
            LawParams::DecayedPerf(p) => {
                check_pos(&[1, 2])?;
                if !(p.decay > 0.0 && p.decay <= 1.0) {
                    return fail(format!("`decay` must lie in (0, 1], got {}", p.decay));
                }
                Ok(())
            }
        }
    }

    /// Evaluates the law at model size `n` and tokens `d`. Compute-based laws
    /// use `C = 6nd`; the saturating law takes `d` as the sample count.
    pub fn eval_nd(&self, n: f64, d: f64) -> Result<f64, LawError> {
        Ok(match self {
            LawParams::Power(p) => eval_power(p, compute_flops(n, d)),
            LawParams::Chinchilla(p) => eval_chinchilla(p, n, d),
            LawParams::Suboptimal(p) => eval_suboptimal(p, n, d),
            LawParams::SaturatingPerf(p) => eval_saturating_perf(p, d),
            LawParams::DecayedPerf(p) => eval_decayed_perf(p, compute_flops(n, d)),
            LawParams::PowerBatch(_) | LawParams::PowerLr(_) => {
                return Err(LawError::UnsupportedInput { family: self.family() })
            }
        })
    }

    /// Value at a record together with the gradient in parameter-vector order.
    pub fn value_and_grad(&self, rec: &TrainingRun) -> Result<(f64, Vec<f64>), LawError> {
        let n = rec.model_size as f64;
        let d = rec.tokens as f64;
        Ok(match self {
            LawParams::Power(p) => power_grad(p, compute_flops(n, d)),
            LawParams::PowerBatch(p) => power_grad(p, batch_of(rec)?),
            LawParams::PowerLr(p) => power_grad(p, lr_of(rec)?),
            LawParams::Chinchilla(p) => chinchilla_grad(p, n, d),
            LawParams::Suboptimal(p) => suboptimal_grad(p, n, d),
            LawParams::SaturatingPerf(p) => saturating_grad(p, d),
            LawParams::DecayedPerf(p) => decayed_grad(p, compute_flops(n, d)),
        })
    }

    /// Value at a record.
    pub fn eval_record(&self, rec: &TrainingRun) -> Result<f64, LawError> {
        match self {
            LawParams::PowerBatch(p) => Ok(eval_power(p, batch_of(rec)?)),
            LawParams::PowerLr(p) => Ok(eval_power(p, lr_of(rec)?)),
            _ => self.eval_nd(rec.model_size as f64, rec.tokens as f64),
        }
    }

    /// Central finite-difference gradient, for checking the analytic one.
    pub fn numeric_grad(&self, rec: &TrainingRun, rel_step: f64) -> Result<Vec<f64>, LawError> {
        let base = self.to_vec();
        let family = self.family();
        let mut grad = Vec::with_capacity(base.len());
        for i in 0..base.len() {
            let h = rel_step * base[i].abs().max(1e-3);
            let mut up = base.clone();
            let mut down = base.clone();
            up[i] += h;
            down[i] -= h;
            let fu = LawParams::from_vec(family, &up).eval_record(rec)?;
            let fd = LawParams::from_vec(family, &down).eval_record(rec)?;
            grad.push((fu - fd) / (2.0 * h));
        }
        Ok(grad)
    }
}

fn batch_of(rec: &TrainingRun) -> Result<f64, LawError> {
    rec.batch_size.map(|b| b as f64).ok_or(LawError::MissingField {
        family: LawFamily::PowerBatch,
        field: "batch_size",
    })
}

fn lr_of(rec: &TrainingRun) -> Result<f64, LawError> {
    rec.learning_rate.ok_or(LawError::MissingField {
        family: LawFamily::PowerLr,
        field: "learning_rate",
    })
}
