//! Accuracy schedules for the discrete Bayesian flow process.
//!
//! Two closed-form schedules are provided. The log-form schedule
//!
//!   beta(t) = -(4/K) * ln(1 - t + t * exp(-K * beta1 / 4))
//!
//! keeps the expected entropy of the input distribution close to a linear
//! decay in t; the quadratic schedule `beta(t) = t^2 * beta1` is the common
//! baseline. The rate `alpha(t) = dbeta/dt` weights the continuous-time
//! loss, and `beta_one_max` solves for the largest beta(1) such that
//! `alpha(1) <= 32 * beta(1)` under the log-form schedule.

use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    LogForm,
    Quadratic,
}

impl ScheduleKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ScheduleKind::LogForm => "logform",
            ScheduleKind::Quadratic => "quadratic",
        }
    }

    pub fn parse(s: &str) -> Option<ScheduleKind> {
        match s.trim().to_ascii_lowercase().as_str() {
            "logform" | "log-form" | "log" => Some(ScheduleKind::LogForm),
            "quadratic" | "quad" => Some(ScheduleKind::Quadratic),
            _ => None,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ScheduleError {
    #[error("beta(1) must be positive, got {0}")]
    NonPositiveBeta(f64),
    #[error("category count must be at least 2, got {0}")]
    BadCategoryCount(usize),
    #[error("beta(1)={beta_one} exceeds beta(1)_max={cap} for K={k} (log-form cap enforced)")]
    BetaAboveCap { beta_one: f64, cap: f64, k: usize },
    #[error("time {0} outside [0, 1]")]
    TimeOutOfRange(f64),
    #[error("step index {i} outside [1, {n}]")]
    StepIndexOutOfRange { i: usize, n: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleParams {
    kind: ScheduleKind,
    beta_one: f64,
    k_categories: usize,
}

impl ScheduleParams {
    /// Build a schedule, enforcing the log-form cap `beta(1) <= beta_one_max(K)`.
    pub fn new(kind: ScheduleKind, beta_one: f64, k_categories: usize) -> Result<Self, ScheduleError> {
        let p = Self::uncapped(kind, beta_one, k_categories)?;
        if kind == ScheduleKind::LogForm {
            // Tiny slack so beta1 = beta_one_max(K) round-trips through text configs.
            let cap = beta_one_max(k_categories);
            if beta_one > cap * (1.0 + 1e-9) {
                return Err(ScheduleError::BetaAboveCap { beta_one, cap, k: k_categories });
            }
        }
        Ok(p)
    }

    /// Build a schedule without the cap check (ablation values above the cap).
    pub fn uncapped(kind: ScheduleKind, beta_one: f64, k_categories: usize) -> Result<Self, ScheduleError> {
        if !(beta_one > 0.0) || !beta_one.is_finite() {
            return Err(ScheduleError::NonPositiveBeta(beta_one));
        }
        if k_categories < 2 {
            return Err(ScheduleError::BadCategoryCount(k_categories));
        }
        Ok(ScheduleParams { kind, beta_one, k_categories })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn beta_one(&self) -> f64 {
        self.beta_one
    }

    pub fn k_categories(&self) -> usize {
        self.k_categories
    }

    /// Cumulative accuracy beta(t).
    pub fn beta(&self, t: f64) -> Result<f64, ScheduleError> {
        check_time(t)?;
        // Exact endpoints for both kinds.
        if t == 0.0 {
            return Ok(0.0);
        }
        if t == 1.0 {
            return Ok(self.beta_one);
        }
        match self.kind {
            ScheduleKind::Quadratic => Ok(t * t * self.beta_one),
            ScheduleKind::LogForm => {
                let k = self.k_categories as f64;
                // 1 - t + t*e^{-K b1/4} = 1 + t*(e^{-K b1/4} - 1); expm1/log1p
                // avoid cancellation near t = 0.
                let em1 = (-k * self.beta_one / 4.0).exp_m1();
                Ok(-(4.0 / k) * (t * em1).ln_1p())
            }
        }
    }

    /// Accuracy rate alpha(t) = dbeta/dt.
    pub fn alpha(&self, t: f64) -> Result<f64, ScheduleError> {
        check_time(t)?;
        match self.kind {
            ScheduleKind::Quadratic => Ok(2.0 * t * self.beta_one),
            ScheduleKind::LogForm => {
                let k = self.k_categories as f64;
                let em1 = (-k * self.beta_one / 4.0).exp_m1();
                Ok((4.0 / k) * (-em1) / (1.0 + t * em1))
            }
        }
    }

    /// Per-step accuracy for an n-step discretised sampler:
    /// `alpha_i = beta(i/n) - beta((i-1)/n)`, with 1-based `i`.
    pub fn step_alpha(&self, i: usize, n: usize) -> Result<f64, ScheduleError> {
        if n < 1 || i < 1 || i > n {
            return Err(ScheduleError::StepIndexOutOfRange { i, n });
        }
        let hi = self.beta(i as f64 / n as f64)?;
        let lo = self.beta((i - 1) as f64 / n as f64)?;
        Ok((hi - lo).max(0.0))
    }
}

fn check_time(t: f64) -> Result<(), ScheduleError> {
    if !(0.0..=1.0).contains(&t) || t.is_nan() {
        return Err(ScheduleError::TimeOutOfRange(t));
    }
    Ok(())
}

impl ScheduleParams {
    /// Inverse of the cumulative schedule: the t with beta(t) = q * beta(1)
    /// for q in [0, 1]. Used to draw times proportionally to alpha(t).
    pub fn time_at_beta_quantile(&self, q: f64) -> Result<f64, ScheduleError> {
        if !(0.0..=1.0).contains(&q) || q.is_nan() {
            return Err(ScheduleError::TimeOutOfRange(q));
        }
        Ok(match self.kind {
            ScheduleKind::Quadratic => q.sqrt(),
            ScheduleKind::LogForm => {
                let c = self.k_categories as f64 * self.beta_one / 4.0;
                // beta(t) = q beta1  <=>  1 - t(1 - e^{-c}) = e^{-qc}.
                let num = (-q * c).exp_m1();
                let den = (-c).exp_m1();
                (num / den).clamp(0.0, 1.0)
            }
        })
    }
}

/// Largest beta(1) admitted by the log-form schedule under the rate cap
/// `alpha(1) <= 32 * beta(1)`.
///
/// Substituting u = K*beta/4 reduces the defining equation
/// `(4/K)(e^{K beta/4} - 1) = 32 beta` to `e^u = 1 + 32u`, whose positive
/// root u* ~= 5.10136 gives `beta_one_max = 4 u* / K ~= 20.4054 / K`.
pub fn beta_one_max(k_categories: usize) -> f64 {
    4.0 * positive_root_exp_linear() / k_categories as f64
}

/// Positive root of e^u = 1 + 32u, by bracketed bisection plus a Newton
/// polish. The bracket [1e-6, 64] always contains the root: the function
/// e^u - 1 - 32u is negative just above zero and positive at 64.
fn positive_root_exp_linear() -> f64 {
    let f = |u: f64| u.exp() - 1.0 - 32.0 * u;
    let (mut lo, mut hi) = (1e-6_f64, 64.0_f64);
    debug_assert!(f(lo) < 0.0 && f(hi) > 0.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
        if (hi - lo) / hi < 1e-14 {
            break;
        }
    }
    let mut u = 0.5 * (lo + hi);
    for _ in 0..4 {
        let df = u.exp() - 32.0;
        u -= f(u) / df;
    }
    u
}
