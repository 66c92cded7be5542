//! Mixed time-scale weight sequences and their admissibility constraints.
//!
//! The innovation weight `α_t = a/(t+1)^τ₁` and consensus weight
//! `β_t = b/(t+1)^τ₂` must satisfy `0 < τ₂ ≤ τ₁ ≤ 1` and
//! `τ₁ > τ₂ + 1/(2+ε₁) + 1/2`, where `ε₁` is the noise moment margin. The
//! gain regularizer `γ_t = γ₀/(t+1)^τ_γ` only has to be positive and vanish.

use std::fmt;

use thiserror::Error;

use crate::scalar::Scalar;
use crate::stats::loglog_slope;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightSchedule<T> {
    pub a: T,
    pub b: T,
    pub tau1: T,
    pub tau2: T,
    pub gamma0: T,
    pub tau_gamma: T,
    pub eps1: T,
}

impl<T: Scalar> Default for WeightSchedule<T> {
    fn default() -> Self {
        Self {
            a: T::one(),
            b: T::one(),
            tau1: T::one(),
            tau2: T::lit(0.2),
            gamma0: T::one(),
            tau_gamma: T::lit(0.7),
            eps1: T::lit(6.0),
        }
    }
}

/// Which convergence guarantee a run is validated for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    /// Admissible weights only; agents agree asymptotically.
    Agreement,
    /// Additionally `τ₁ = 1, a ≥ 1`; estimates are strongly consistent.
    Consistency,
    /// Additionally `τ₁ = 1, a = 1`; estimates are asymptotically efficient.
    Efficiency,
}

/// One violated inequality. `slack` is `rhs_side − lhs_side` oriented so that
/// a satisfied constraint would have positive (or zero, for non-strict)
/// slack.
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub constraint: &'static str,
    pub slack: f64,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} (slack {:.6})", self.constraint, self.slack)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScheduleError {
    #[error("weight schedule violates: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    Violations(Vec<Violation>),
}

/// Outcome of a successful validation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleCheck {
    /// `τ₁ − τ₂ − 1/(2+ε₁) − 1/2`, strictly positive.
    pub slack: f64,
    /// Upper bound on agreement exponents: `τ₁ − τ₂ − 1/(2+ε₁)`.
    pub max_agreement_exponent: f64,
}

impl<T: Scalar> WeightSchedule<T> {
    #[inline]
    pub fn alpha(&self, t: u64) -> T {
        self.a / T::lit((t + 1) as f64).powf(self.tau1)
    }

    #[inline]
    pub fn beta(&self, t: u64) -> T {
        self.b / T::lit((t + 1) as f64).powf(self.tau2)
    }

    #[inline]
    pub fn gamma(&self, t: u64) -> T {
        self.gamma0 / T::lit((t + 1) as f64).powf(self.tau_gamma)
    }

    /// `τ₁ − τ₂ − 1/(2+ε₁) − 1/2`.
    pub fn slack(&self) -> f64 {
        let (t1, t2, e) = (
            self.tau1.to_f64_lossy(),
            self.tau2.to_f64_lossy(),
            self.eps1.to_f64_lossy(),
        );
        t1 - (t2 + 1.0 / (2.0 + e) + 0.5)
    }

    /// Validates the weights. With `require_efficiency` the schedule must
    /// also have `τ₁ = 1` and `a = 1`.
    pub fn validate(&self, require_efficiency: bool) -> Result<ScheduleCheck, ScheduleError> {
        self.validate_for(if require_efficiency {
            Regime::Efficiency
        } else {
            Regime::Agreement
        })
    }

    pub fn validate_for(&self, regime: Regime) -> Result<ScheduleCheck, ScheduleError> {
        let f = |v: T| v.to_f64_lossy();
        let (a, b, t1, t2) = (f(self.a), f(self.b), f(self.tau1), f(self.tau2));
        let (g0, tg, e1) = (f(self.gamma0), f(self.tau_gamma), f(self.eps1));
        let mut out = Vec::new();
        let mut need = |ok: bool, constraint, slack| {
            if !ok {
                out.push(Violation { constraint, slack });
            }
        };
        need(a > 0.0, "a > 0", a);
        need(b > 0.0, "b > 0", b);
        need(g0 > 0.0, "gamma0 > 0", g0);
        need(tg > 0.0, "tau_gamma > 0", tg);
        need(e1 > 0.0, "eps1 > 0", e1);
        need(t2 > 0.0, "tau2 > 0", t2);
        need(t2 <= t1, "tau2 <= tau1", t1 - t2);
        need(t1 <= 1.0, "tau1 <= 1", 1.0 - t1);
        let slack = self.slack();
        need(slack > 0.0, "tau1 > tau2 + 1/(2+eps1) + 1/2", slack);
        match regime {
            Regime::Agreement => {}
            Regime::Consistency => {
                need(t1 == 1.0, "tau1 = 1", 1.0 - t1);
                need(a >= 1.0, "a >= 1", a - 1.0);
            }
            Regime::Efficiency => {
                need(t1 == 1.0, "tau1 = 1", 1.0 - t1);
                need(a == 1.0, "a = 1", 1.0 - a);
            }
        }
        if out.is_empty() {
            Ok(ScheduleCheck {
                slack,
                max_agreement_exponent: t1 - t2 - 1.0 / (2.0 + e1),
            })
        } else {
            Err(ScheduleError::Violations(out))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OracleError {
    #[error("invalid exponent or coefficient: {0}")]
    InvalidExponent(&'static str),
}

/// Trace summary of the scalar recursion
/// `z_{t+1} = (1 − a₁/(t+1)^δ₁) z_t + a₂/(t+1)^δ₂`, `z₀ = 1`.
#[derive(Debug, Clone)]
pub struct RecursionTrace {
    /// Log–log slope of `z_t` over the last decade of the horizon;
    /// `-inf` when the iterate reached zero there.
    pub slope: f64,
    /// Largest iterate over the whole horizon.
    pub sup: f64,
    /// Extremes over the last decade.
    pub late_min: f64,
    pub late_max: f64,
    /// Geometrically spaced `(t, z_t)` samples.
    pub samples: Vec<(u64, f64)>,
    /// True when `z` never increased from one step to the next.
    pub nonincreasing: bool,
}

/// Runs the deterministic recursion for `horizon` steps. The contraction
/// coefficient is clamped to `[0, 1]`.
pub fn deterministic_recursion_oracle(
    delta1: f64,
    delta2: f64,
    a1: f64,
    a2: f64,
    horizon: u64,
) -> Result<RecursionTrace, OracleError> {
    if !(0.0..=1.0).contains(&delta1) {
        return Err(OracleError::InvalidExponent("delta1 must lie in [0, 1]"));
    }
    if !(delta2 > 0.0) {
        return Err(OracleError::InvalidExponent("delta2 must be positive"));
    }
    if !(a1 > 0.0) || !(a2 >= 0.0) {
        return Err(OracleError::InvalidExponent("a1 must be positive and a2 nonnegative"));
    }
    if horizon < 10 {
        return Err(OracleError::InvalidExponent("horizon must be at least 10"));
    }
    let late_start = horizon / 10;
    let ratio = 10f64.powf(1.0 / 64.0);
    let mut next_sample = 1.0f64;
    let mut z = 1.0f64;
    let mut sup = z;
    let mut late_min = f64::INFINITY;
    let mut late_max = f64::NEG_INFINITY;
    let mut nonincreasing = true;
    let mut samples = Vec::new();
    for t in 0..horizon {
        let s = (t + 1) as f64;
        let contraction = (1.0 - a1 / s.powf(delta1)).clamp(0.0, 1.0);
        let next = contraction * z + a2 / s.powf(delta2);
        if next > z {
            nonincreasing = false;
        }
        z = next;
        let t_now = t + 1;
        sup = sup.max(z);
        if t_now >= late_start {
            late_min = late_min.min(z);
            late_max = late_max.max(z);
        }
        if t_now as f64 >= next_sample || t_now == horizon {
            samples.push((t_now, z));
            while next_sample <= t_now as f64 {
                next_sample *= ratio;
            }
        }
    }
    let late: Vec<(f64, f64)> = samples
        .iter()
        .filter(|(t, _)| *t >= late_start)
        .map(|&(t, v)| (t as f64, v))
        .collect();
    let slope = if late.iter().all(|&(_, v)| v > 0.0) {
        loglog_slope(&late)
    } else {
        f64::NEG_INFINITY
    };
    Ok(RecursionTrace {
        slope,
        sup,
        late_min,
        late_max,
        samples,
        nonincreasing,
    })
}
