//! Statistics of repeated clicks from a NAT address pool.
//!
//! Clicks arriving from a pool of `A` addresses are modelled as `C` independent
//! uniform draws over the pool, so the click count per address is Poisson with
//! intensity `λ = C/A`. Everything in this module is a pure function.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("pool size must be at least 1")]
    EmptyPool,
    #[error("loss factor is undefined for zero clicks")]
    ZeroClicks,
    #[error("intensity must be finite and non-negative, got {0}")]
    InvalidLambda(f64),
    #[error("threshold must lie strictly between 0 and 1, got {0}")]
    InvalidThreshold(f64),
}

/// Address-pool cardinality `A` and the number of clicks `C` observed from
/// that pool towards one destination.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelParams {
    pool_size: u64,
    click_count: u64,
}

impl ModelParams {
    pub fn new(pool_size: u64, click_count: u64) -> Result<Self, ModelError> {
        if pool_size == 0 {
            return Err(ModelError::EmptyPool);
        }
        Ok(Self {
            pool_size,
            click_count,
        })
    }

    pub fn pool_size(&self) -> u64 {
        self.pool_size
    }

    pub fn click_count(&self) -> u64 {
        self.click_count
    }
}

/// Poisson intensity `λ = C/A`, always finite and non-negative.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize)]
pub struct Lambda(f64);

impl Lambda {
    pub fn new(value: f64) -> Result<Self, ModelError> {
        if value.is_finite() && value >= 0.0 {
            Ok(Self(value))
        } else {
            Err(ModelError::InvalidLambda(value))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// Operator loss budget in the open interval (0, 1).
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Threshold(f64);

impl Threshold {
    pub fn new(value: f64) -> Result<Self, ModelError> {
        if value > 0.0 && value < 1.0 {
            Ok(Self(value))
        } else {
            Err(ModelError::InvalidThreshold(value))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for Threshold {
    type Error = ModelError;

    fn try_from(value: f64) -> Result<Self, Self::Error> {
        Self::new(value)
    }
}

impl From<Threshold> for f64 {
    fn from(t: Threshold) -> f64 {
        t.0
    }
}

pub fn lambda_of(params: &ModelParams) -> Lambda {
    Lambda(params.click_count as f64 / params.pool_size as f64)
}

// Below this intensity the power series is used instead of `λ + expm1(-λ)`.
const SERIES_CUTOVER: f64 = 0.5;

/// Expected number of clicks beyond the first per address,
/// `N(λ) = λ + e^{-λ} - 1`.
///
/// For small `λ` the closed form loses most of its significant digits to
/// cancellation, so the alternating series `Σ_{k≥2} (-λ)^k / k!` is summed
/// directly there. Above the cutover `e^{-λ} - 1` is taken from `exp_m1`.
pub fn expected_repeats(lambda: Lambda) -> f64 {
    let x = lambda.0;
    if x == 0.0 {
        return 0.0;
    }
    if x < SERIES_CUTOVER {
        let mut term = x * x / 2.0;
        let mut sum = 0.0f64;
        let mut k = 2.0;
        while term.abs() > f64::EPSILON * 1e-3 * sum.abs() {
            sum += term;
            k += 1.0;
            term *= -x / k;
        }
        sum
    } else {
        x + (-x).exp_m1()
    }
}

/// Truncated Poisson-weighted sum `Σ_{c=2}^{cutoff} (c-1)·λ^c e^{-λ}/c!`.
///
/// Successive Poisson probabilities are produced by the recurrence
/// `p(c+1) = p(c)·λ/(c+1)`. Only meaningful while `e^{-λ}` does not
/// underflow (λ below roughly 700). A cutoff below 2 is an empty sum.
pub fn expected_repeats_series(lambda: Lambda, cutoff: u32) -> f64 {
    let x = lambda.0;
    if cutoff < 2 || x == 0.0 {
        return 0.0;
    }
    let mut prob = (-x).exp() * x; // P(clicks = 1)
    let mut sum = 0.0;
    for c in 2..=cutoff {
        prob *= x / c as f64;
        sum += (c - 1) as f64 * prob;
    }
    sum
}

/// Expected fraction of genuine clicks lost if every repeat from the pool is
/// ignored: `L(A, C) = N(C/A)·A/C`.
pub fn loss_factor(params: &ModelParams) -> Result<f64, ModelError> {
    if params.click_count == 0 {
        return Err(ModelError::ZeroClicks);
    }
    let lambda = lambda_of(params);
    Ok(expected_repeats(lambda) / lambda.0)
}

/// First-order bound `½·C/A` on the loss factor.
pub fn loss_upper_bound(params: &ModelParams) -> f64 {
    0.5 * params.click_count as f64 / params.pool_size as f64
}

/// True iff a repeated click may be discarded: `½·C/A < threshold`.
///
/// `C` counts only clicks already in the window; a tie accepts.
pub fn should_discard_repeat(params: &ModelParams, threshold: Threshold) -> bool {
    loss_upper_bound(params) < threshold.0
}
