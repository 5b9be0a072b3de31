//! Two-variable reduction of the controlled chain to a scalar map for the
//! on-fraction, with its linear stability factor and frontier.

use std::fmt;

use thiserror::Error;

use crate::state_space::{ModelParams, ParamError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReducedError {
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error("linear factor {0} exceeds 1, outside the reduced model")]
    OutOfTheory(f64),
    #[error("linear factor is not finite")]
    NonFinite,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReducedParams {
    pub n: usize,
    pub n_out: usize,
    pub r: f64,
    pub alpha: f64,
    pub epsilon: f64,
}

impl ReducedParams {
    pub fn new(n: usize, n_out: usize, r: f64, alpha: f64, epsilon: f64) -> Result<Self, ParamError> {
        let p = Self { n, n_out, r, alpha, epsilon };
        p.validate()?;
        Ok(p)
    }

    /// Checks the same bounds as [`ModelParams`] via `n_in = n - n_out`.
    pub fn validate(&self) -> Result<(), ParamError> {
        if self.n <= self.n_out {
            return Err(ParamError::NInTooSmall(0));
        }
        ModelParams::new(self.n - self.n_out, self.n_out, self.epsilon, self.r, self.alpha).map(|_| ())
    }

    fn switching_weight(&self) -> f64 {
        (self.n_out as f64 / 2.0 - 1.0) / self.n as f64
    }
}

impl From<&ModelParams> for ReducedParams {
    fn from(p: &ModelParams) -> Self {
        Self { n: p.n(), n_out: p.n_out, r: p.r, alpha: p.alpha, epsilon: p.epsilon }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReducedStep {
    pub value: f64,
    /// The raw image left `[0, 1]` and `value` was clamped.
    pub clamped: bool,
}

fn sat(x: f64, epsilon: f64) -> f64 {
    x.min(1.0 - 2.0 * epsilon)
}

/// One step of the scalar consumption map.
pub fn reduced_step(n_up: f64, p: &ReducedParams) -> ReducedStep {
    let n = p.n as f64;
    let b = p.switching_weight();
    let f_down = sat(p.r * (2.0 * n_up).powf(p.alpha), p.epsilon);
    let f_up = sat(p.r * (2.0 * (1.0 - n_up)).powf(p.alpha), p.epsilon);
    let raw = ((n - 2.0) / n - b * (f_down + f_up)) * n_up + 1.0 / n + b * f_up;
    let value = raw.clamp(0.0, 1.0);
    ReducedStep { value, clamped: value != raw }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearFactor {
    pub mu: f64,
    /// Rates at `N_up = 1/2` sit on the saturation cap, so `mu` is the
    /// slope of the saturated map rather than the unsaturated formula.
    pub saturated: bool,
}

/// Slope of [`reduced_step`] at `N_up = 1/2`.
pub fn linear_factor(p: &ReducedParams) -> LinearFactor {
    let n = p.n as f64;
    let b = p.switching_weight();
    let cap = 1.0 - 2.0 * p.epsilon;
    if p.r >= cap {
        return LinearFactor { mu: (n - 2.0) / n - 2.0 * b * cap, saturated: true };
    }
    LinearFactor { mu: (n - 2.0) / n - 2.0 * b * (1.0 + p.alpha) * p.r, saturated: false }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReducedRegime {
    Speedup,
    AlternatingDecay,
    Unstable,
}

impl fmt::Display for ReducedRegime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Speedup => "speedup",
            Self::AlternatingDecay => "alternating-decay",
            Self::Unstable => "unstable",
        })
    }
}

pub fn classify_regime(mu: f64) -> Result<ReducedRegime, ReducedError> {
    if !mu.is_finite() {
        return Err(ReducedError::NonFinite);
    }
    if mu > 1.0 {
        Err(ReducedError::OutOfTheory(mu))
    } else if mu >= 0.0 {
        Ok(ReducedRegime::Speedup)
    } else if mu >= -1.0 {
        Ok(ReducedRegime::AlternatingDecay)
    } else {
        Ok(ReducedRegime::Unstable)
    }
}

/// Closed-form estimates `(alpha1, alpha2)`: `alpha1` is where the factor
/// crosses zero, `alpha2` where it crosses -1.
pub fn alpha_estimates(n: usize, n_out: usize, r: f64) -> (f64, f64) {
    let (n, n_out) = (n as f64, n_out as f64);
    ((n - 2.0) / (r * (n_out - 2.0)) - 1.0, 2.0 * (n - 1.0) / (r * (n_out - 2.0)) - 1.0)
}

/// Stability frontier: the `alpha` at which the linear factor equals -1.
pub fn frontier_alpha(n: usize, n_out: usize, r: f64) -> f64 {
    (n as f64 - 1.0) / ((n_out as f64 / 2.0 - 1.0) * r) - 1.0
}
