//! Application utility functions.
//!
//! Two families model how well an application's QoS target is met at a given
//! rate: a sigmoid for real-time (inelastic) traffic and a normalized logarithm
//! for delay-tolerant (elastic) traffic. Rates are kbps throughout and every
//! logarithm is natural.
//!
//! The sigmoid is the shifted/rescaled logistic
//! `c * (1 / (1 + exp(-a (r - b))) - d)` with `c = (1 + e^{ab}) / e^{ab}` and
//! `d = 1 / (1 + e^{ab})`. Multiplying out gives the equivalent product
//! `(1 - e^{-a r}) * logistic(a (r - b))`, which is what we evaluate: it is
//! exactly zero at the origin and never forms `S - d` for `a*b` in the tens.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Grid resolution used by [`UtilityFunction::validate`].
const VALIDATION_POINTS: usize = 1000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum UtilityError {
    #[error("rate must be a finite non-negative number, got {0}")]
    NegativeRate(f64),
    #[error("marginal log-utility is only defined for rates > 0, got {0}")]
    NonPositiveRate(f64),
    #[error("degenerate observations: rate caps are both {0} kbps")]
    DegenerateObservations(f64),
    #[error("observations out of order: {0}")]
    UnorderedObservations(&'static str),
    #[error("invalid observation: {0}")]
    InvalidObservation(&'static str),
}

/// QoS-satisfaction curve of one application.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum UtilityFunction {
    /// Real-time traffic: slope `a` (1/kbps) and inflection rate `b` (kbps).
    Sigmoidal { a: f64, b: f64 },
    /// Delay-tolerant traffic: growth rate `k` (1/kbps), full satisfaction at `r_max` (kbps).
    Logarithmic { k: f64, r_max: f64 },
}

/// A property a utility function fails to satisfy.
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    /// A shape parameter is zero, negative or not finite.
    NonPositiveParameter { name: &'static str, value: f64 },
    /// `U(0)` differs from zero.
    NonZeroAtOrigin(f64),
    /// `U` decreased between two consecutive grid points.
    NotMonotone { rate: f64 },
    /// `U` left `[0, 1]`.
    Unbounded { rate: f64, value: f64 },
    /// Logarithmic utility does not reach 1 at `r_max`.
    NotNormalized(f64),
}

impl UtilityFunction {
    pub fn sigmoidal(a: f64, b: f64) -> Self {
        Self::Sigmoidal { a, b }
    }

    pub fn logarithmic(k: f64, r_max: f64) -> Self {
        Self::Logarithmic { k, r_max }
    }

    /// `c = (1 + e^{ab}) / e^{ab}`; `None` for logarithmic utilities.
    pub fn c(&self) -> Option<f64> {
        match *self {
            Self::Sigmoidal { a, b } => Some(1.0 + (-a * b).exp()),
            Self::Logarithmic { .. } => None,
        }
    }

    /// `d = 1 / (1 + e^{ab})`; `None` for logarithmic utilities.
    pub fn d(&self) -> Option<f64> {
        match *self {
            Self::Sigmoidal { a, b } => Some(logistic(-a * b)),
            Self::Logarithmic { .. } => None,
        }
    }

    /// Utility `U(r)`.
    ///
    /// The logarithmic branch saturates at 1 for rates above `r_max`, so the
    /// curve stays bounded by 1 on the whole half-line.
    pub fn eval(&self, r: f64) -> Result<f64, UtilityError> {
        check_rate(r)?;
        Ok(match *self {
            Self::Sigmoidal { a, b } => -(-a * r).exp_m1() * logistic(a * (r - b)),
            Self::Logarithmic { k, r_max } => {
                if r >= r_max {
                    1.0
                } else {
                    (k * r).ln_1p() / (k * r_max).ln_1p()
                }
            }
        })
    }

    /// `ln U(r)`, accurate where `U` is within rounding of 1. `-inf` at `r = 0`.
    pub fn ln_eval(&self, r: f64) -> Result<f64, UtilityError> {
        check_rate(r)?;
        Ok(match *self {
            Self::Sigmoidal { a, b } => {
                if r == 0.0 {
                    f64::NEG_INFINITY
                } else {
                    (-(-a * r).exp_m1()).ln() - softplus(-a * (r - b))
                }
            }
            Self::Logarithmic { k, r_max } => {
                if r >= r_max {
                    0.0
                } else {
                    (k * r).ln_1p().ln() - (k * r_max).ln_1p().ln()
                }
            }
        })
    }

    /// `d/dr ln U(r)`, the per-kbps marginal log-utility.
    ///
    /// Strictly positive and strictly decreasing on `(0, r_max)` for the
    /// logarithmic family and on `(0, inf)` for the sigmoid (until it
    /// underflows to 0 far above `b`). The saturated logarithmic branch above
    /// `r_max` has slope 0.
    pub fn marginal_log(&self, r: f64) -> Result<f64, UtilityError> {
        if !(r > 0.0) || !r.is_finite() {
            return Err(UtilityError::NonPositiveRate(r));
        }
        Ok(match *self {
            // a*S*(1-S)/(S-d) rewritten as a/(e^{ar}-1) + a*(1-S)
            Self::Sigmoidal { a, b } => a / (a * r).exp_m1() + a * logistic(-a * (r - b)),
            Self::Logarithmic { k, r_max } => {
                if r > r_max {
                    0.0
                } else {
                    let kr = k * r;
                    k / ((1.0 + kr) * kr.ln_1p())
                }
            }
        })
    }

    /// Inflection rate: `b` for the sigmoid, 0 for the logarithm.
    pub fn inflection(&self) -> f64 {
        match *self {
            Self::Sigmoidal { b, .. } => b,
            Self::Logarithmic { .. } => 0.0,
        }
    }

    /// Upper end of the rate range where the curve carries information:
    /// `max(b, r_max)` as applicable.
    pub fn scale(&self) -> f64 {
        match *self {
            Self::Sigmoidal { b, .. } => b,
            Self::Logarithmic { r_max, .. } => r_max,
        }
    }

    /// Parameter names and values, for checks and diagnostics.
    pub fn params(&self) -> [(&'static str, f64); 2] {
        match *self {
            Self::Sigmoidal { a, b } => [("a", a), ("b", b)],
            Self::Logarithmic { k, r_max } => [("k", k), ("r_max", r_max)],
        }
    }

    pub fn is_valid(&self) -> bool {
        self.validate().is_empty()
    }

    /// Lists every violated utility property; empty iff the curve is usable.
    ///
    /// Parameter positivity is checked first and short-circuits: sampling a
    /// curve with a negative slope only produces follow-on noise.
    pub fn validate(&self) -> Vec<Violation> {
        let params: Vec<Violation> = self
            .params()
            .into_iter()
            .filter(|(_, v)| !(v.is_finite() && *v > 0.0))
            .map(|(name, value)| Violation::NonPositiveParameter { name, value })
            .collect();
        if !params.is_empty() {
            return params;
        }

        let mut out = Vec::new();
        let at_zero = self.eval(0.0).unwrap_or(f64::NAN);
        if !(at_zero.abs() <= 1e-12) {
            out.push(Violation::NonZeroAtOrigin(at_zero));
        }
        if let Self::Logarithmic { r_max, .. } = *self {
            let top = self.eval(r_max).unwrap_or(f64::NAN);
            if !((top - 1.0).abs() <= 1e-12) {
                out.push(Violation::NotNormalized(top));
            }
        }

        let hi = 10.0 * self.scale();
        let mut prev = at_zero;
        for i in 1..=VALIDATION_POINTS {
            let r = hi * i as f64 / VALIDATION_POINTS as f64;
            let u = self.eval(r).unwrap_or(f64::NAN);
            if !(u >= prev) {
                out.push(Violation::NotMonotone { rate: r });
                break;
            }
            if !(0.0..=1.0 + 1e-9).contains(&u) {
                out.push(Violation::Unbounded { rate: r, value: u });
                break;
            }
            prev = u;
        }
        out
    }
}

/// One measured operating point: a rate cap and the fraction of time the
/// application was not buffering under it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QoeObservation {
    pub rate_cap: f64,
    pub satisfaction: f64,
}

impl QoeObservation {
    pub fn new(rate_cap: f64, satisfaction: f64) -> Result<Self, UtilityError> {
        if !(rate_cap > 0.0 && rate_cap.is_finite()) {
            return Err(UtilityError::InvalidObservation("rate_cap must be > 0"));
        }
        if !(0.0..=1.0).contains(&satisfaction) {
            return Err(UtilityError::InvalidObservation(
                "satisfaction must be in [0, 1]",
            ));
        }
        Ok(Self {
            rate_cap,
            satisfaction,
        })
    }
}

/// Two-point sigmoid fit: the inflection sits midway between the two caps and
/// the slope is the satisfaction gain (in percentage points) per kbps.
pub fn fit_sigmoidal(
    low: QoeObservation,
    high: QoeObservation,
) -> Result<UtilityFunction, UtilityError> {
    if low.rate_cap == high.rate_cap {
        return Err(UtilityError::DegenerateObservations(low.rate_cap));
    }
    if low.rate_cap > high.rate_cap {
        return Err(UtilityError::UnorderedObservations(
            "low.rate_cap must be below high.rate_cap",
        ));
    }
    if !(low.satisfaction < high.satisfaction) {
        return Err(UtilityError::UnorderedObservations(
            "low.satisfaction must be below high.satisfaction",
        ));
    }
    let b = 0.5 * (high.rate_cap + low.rate_cap);
    let a = (high.satisfaction * 100.0 - low.satisfaction * 100.0) / (high.rate_cap - low.rate_cap);
    Ok(UtilityFunction::Sigmoidal { a, b })
}

fn check_rate(r: f64) -> Result<(), UtilityError> {
    if r >= 0.0 && r.is_finite() {
        Ok(())
    } else {
        Err(UtilityError::NegativeRate(r))
    }
}

/// `1 / (1 + e^{-x})` without overflow for large `|x|`.
fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)`.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}
