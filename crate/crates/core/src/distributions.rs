//! Densities used by the model zoo, their supports, and the bijections that
//! map constrained supports onto the real line.

use rand::Rng;
use rand_distr::{Distribution as _, Normal, StandardNormal, StudentT};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::graph::Value;

pub(crate) const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Distribution {
    Normal { mean: f64, sd: f64 },
    StudentT { dof: f64, loc: f64, scale: f64 },
    HalfCauchy { scale: f64 },
    Bernoulli { prob: f64 },
    Categorical { probs: Vec<f64> },
    /// Finite mixture of normals. Used where a discrete indicator has been
    /// summed out of a model.
    NormalMixture { weights: Vec<f64>, means: Vec<f64>, sds: Vec<f64> },
}

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::InvalidDistribution(msg()))
    }
}

fn normalize(mut probs: Vec<f64>) -> Result<Vec<f64>> {
    check(!probs.is_empty(), || "empty probability vector".into())?;
    check(probs.iter().all(|p| p.is_finite() && *p >= 0.0), || {
        format!("probabilities must be finite and non-negative: {probs:?}")
    })?;
    let total: f64 = probs.iter().sum();
    check(total > 0.0, || "probabilities sum to zero".into())?;
    probs.iter_mut().for_each(|p| *p /= total);
    Ok(probs)
}

impl Distribution {
    pub fn normal(mean: f64, sd: f64) -> Result<Self> {
        check(mean.is_finite() && sd.is_finite() && sd > 0.0, || {
            format!("Normal(mean={mean}, sd={sd})")
        })?;
        Ok(Self::Normal { mean, sd })
    }

    pub fn student_t(dof: f64, loc: f64, scale: f64) -> Result<Self> {
        check(
            dof.is_finite() && dof > 0.0 && loc.is_finite() && scale.is_finite() && scale > 0.0,
            || format!("StudentT(dof={dof}, loc={loc}, scale={scale})"),
        )?;
        Ok(Self::StudentT { dof, loc, scale })
    }

    pub fn half_cauchy(scale: f64) -> Result<Self> {
        check(scale.is_finite() && scale > 0.0, || format!("HalfCauchy(scale={scale})"))?;
        Ok(Self::HalfCauchy { scale })
    }

    pub fn bernoulli(prob: f64) -> Result<Self> {
        check((0.0..=1.0).contains(&prob), || format!("Bernoulli(prob={prob})"))?;
        Ok(Self::Bernoulli { prob })
    }

    /// Categorical over `0..probs.len()`. The weights are normalized here.
    pub fn categorical(probs: Vec<f64>) -> Result<Self> {
        Ok(Self::Categorical { probs: normalize(probs)? })
    }

    pub fn normal_mixture(weights: Vec<f64>, means: Vec<f64>, sds: Vec<f64>) -> Result<Self> {
        check(weights.len() == means.len() && means.len() == sds.len(), || {
            "mixture parameter lengths differ".into()
        })?;
        check(
            means.iter().all(|m| m.is_finite()) && sds.iter().all(|s| s.is_finite() && *s > 0.0),
            || format!("NormalMixture(means={means:?}, sds={sds:?})"),
        )?;
        Ok(Self::NormalMixture { weights: normalize(weights)?, means, sds })
    }

    pub fn support(&self) -> Support {
        match self {
            Self::Normal { .. } | Self::StudentT { .. } | Self::NormalMixture { .. } => {
                Support::RealLine
            }
            Self::HalfCauchy { .. } => Support::Positive,
            Self::Bernoulli { .. } => Support::Binary,
            Self::Categorical { probs } => Support::Finite(probs.len()),
        }
    }

    /// Natural-log density (continuous) or mass (discrete). Out-of-support
    /// values give negative infinity; values of the wrong kind are an error.
    pub fn log_prob(&self, v: &Value) -> Result<f64> {
        match (self, v) {
            (Self::Normal { mean, sd }, Value::Real(x)) => Ok(normal_lpdf(*x, *mean, *sd)),
            (Self::StudentT { dof, loc, scale }, Value::Real(x)) => {
                let z = (x - loc) / scale;
                Ok(ln_gamma(0.5 * (dof + 1.0))
                    - ln_gamma(0.5 * dof)
                    - 0.5 * (dof * std::f64::consts::PI).ln()
                    - scale.ln()
                    - 0.5 * (dof + 1.0) * (z * z / dof).ln_1p())
            }
            (Self::HalfCauchy { scale }, Value::Real(x)) => {
                if *x <= 0.0 {
                    return Ok(f64::NEG_INFINITY);
                }
                let z = x / scale;
                Ok(std::f64::consts::LN_2
                    - std::f64::consts::PI.ln()
                    - scale.ln()
                    - (z * z).ln_1p())
            }
            (Self::Bernoulli { prob }, Value::Bool(b)) => {
                Ok(if *b { prob.ln() } else { (-prob).ln_1p() })
            }
            (Self::Categorical { probs }, Value::Index(k)) => {
                Ok(probs.get(*k).map_or(f64::NEG_INFINITY, |p| p.ln()))
            }
            (Self::NormalMixture { weights, means, sds }, Value::Real(x)) => {
                let terms: Vec<f64> = weights
                    .iter()
                    .zip(means.iter().zip(sds))
                    .map(|(w, (m, s))| w.ln() + normal_lpdf(*x, *m, *s))
                    .collect();
                Ok(log_sum_exp(&terms))
            }
            (d, v) => Err(Error::TypeMismatch(format!("{v:?} for {d:?}"))),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Value {
        match self {
            Self::Normal { mean, sd } => {
                Value::Real(Normal::new(*mean, *sd).expect("validated").sample(rng))
            }
            Self::StudentT { dof, loc, scale } => {
                let t: f64 = StudentT::new(*dof).expect("validated").sample(rng);
                Value::Real(loc + scale * t)
            }
            Self::HalfCauchy { scale } => {
                // Inverse CDF of the half-Cauchy on (0, 1) draws; never 0.
                let u: f64 = rng.random::<f64>();
                let x = scale * (0.5 * std::f64::consts::PI * u).tan();
                Value::Real(if x > 0.0 { x } else { f64::MIN_POSITIVE })
            }
            Self::Bernoulli { prob } => Value::Bool(rng.random::<f64>() < *prob),
            Self::Categorical { probs } => Value::Index(pick(probs, rng.random::<f64>())),
            Self::NormalMixture { weights, means, sds } => {
                let k = pick(weights, rng.random::<f64>());
                let z: f64 = StandardNormal.sample(rng);
                Value::Real(means[k] + sds[k] * z)
            }
        }
    }

    /// Largest index of a discrete support plus one; `None` for continuous.
    pub fn support_size(&self) -> Option<usize> {
        self.support().size()
    }
}

/// Index of the first cumulative weight exceeding `u`, skipping
/// zero-weight categories when rounding leaves `u` past the total.
fn pick(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(0)
}

pub fn normal_lpdf(x: f64, mean: f64, sd: f64) -> f64 {
    let z = (x - mean) / sd;
    -0.5 * z * z - sd.ln() - LN_SQRT_2PI
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    if m == f64::INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Support {
    RealLine,
    Positive,
    Interval { lo: f64, hi: f64 },
    Binary,
    Finite(usize),
}

impl Support {
    pub fn is_discrete(&self) -> bool {
        matches!(self, Self::Binary | Self::Finite(_))
    }

    pub fn size(&self) -> Option<usize> {
        match self {
            Self::Binary => Some(2),
            Self::Finite(n) => Some(*n),
            _ => None,
        }
    }

    /// The unconstraining bijection for a continuous support.
    pub fn transform(&self) -> Result<Transform> {
        match *self {
            Self::RealLine => Ok(Transform::Identity),
            Self::Positive => Ok(Transform::LogPositive),
            Self::Interval { lo, hi } => {
                if lo < hi {
                    Ok(Transform::LogitInterval { lo, hi })
                } else {
                    Err(Error::InvalidDistribution(format!("interval [{lo}, {hi}]")))
                }
            }
            Self::Binary | Self::Finite(_) => Err(Error::DiscreteTransform),
        }
    }
}

/// Bijection between a constrained support and the real line. `z` denotes
/// the unconstrained coordinate throughout.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Transform {
    Identity,
    LogPositive,
    LogitInterval { lo: f64, hi: f64 },
}

impl Transform {
    pub fn to_unconstrained(&self, x: f64) -> f64 {
        match *self {
            Self::Identity => x,
            Self::LogPositive => x.ln(),
            Self::LogitInterval { lo, hi } => {
                let s = (x - lo) / (hi - lo);
                s.ln() - (-s).ln_1p()
            }
        }
    }

    pub fn from_unconstrained(&self, z: f64) -> f64 {
        match *self {
            Self::Identity => z,
            Self::LogPositive => z.exp(),
            Self::LogitInterval { lo, hi } => lo + (hi - lo) * sigmoid(z),
        }
    }

    /// `log |dx/dz|` evaluated at the constrained point `x`.
    pub fn log_abs_det_jacobian(&self, x: f64) -> f64 {
        match *self {
            Self::Identity => 0.0,
            Self::LogPositive => x.ln(),
            Self::LogitInterval { lo, hi } => ((x - lo) * (hi - x) / (hi - lo)).ln(),
        }
    }

    /// `log |dx/dz|` evaluated at the unconstrained point `z`.
    pub fn log_abs_det_jacobian_z(&self, z: f64) -> f64 {
        match *self {
            Self::Identity => 0.0,
            Self::LogPositive => z,
            Self::LogitInterval { lo, hi } => {
                // log σ(z) + log σ(-z) + log(hi - lo), written to avoid overflow
                (hi - lo).ln() - softplus(z) - softplus(-z)
            }
        }
    }
}

fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}
