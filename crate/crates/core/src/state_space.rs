//! Discrete state space of a single thermostatically controlled load.
//!
//! Each branch (on / off) carries `n = n_in + n_out` temperature bins. Global
//! indices put the on-branch first, `0..n`, ordered coldest to hottest, and
//! the off-branch in `n..2n` with the same temperature ordering. The comfort
//! zone occupies bins `comfort_lo..=comfort_hi` of each branch, with
//! `n_out / 2` bins on either side of it.

use nalgebra::DVector;
use thiserror::Error;

/// Tolerance on the total mass of a [`Distribution`].
pub const MASS_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParamError {
    #[error("n_in must be at least 1 (got {0})")]
    NInTooSmall(usize),
    #[error("n_out must be even and at least 4 (got {0})")]
    NOutInvalid(usize),
    #[error("epsilon must satisfy 0 <= epsilon < 0.5 (got {0})")]
    EpsilonOutOfRange(f64),
    #[error("r must satisfy 0 < r <= 1 - 2*epsilon = {cap} (got {r})")]
    RateOutOfRange { r: f64, cap: f64 },
    #[error("alpha must be finite and >= 0 (got {0})")]
    AlphaNegative(f64),
}

/// Scalar parameters of the quantized model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelParams {
    pub n_in: usize,
    pub n_out: usize,
    pub epsilon: f64,
    pub r: f64,
    pub alpha: f64,
}

impl ModelParams {
    pub fn new(n_in: usize, n_out: usize, epsilon: f64, r: f64, alpha: f64) -> Result<Self, ParamError> {
        let params = Self { n_in, n_out, epsilon, r, alpha };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<(), ParamError> {
        if self.n_in < 1 {
            return Err(ParamError::NInTooSmall(self.n_in));
        }
        if self.n_out < 4 || !self.n_out.is_multiple_of(2) {
            return Err(ParamError::NOutInvalid(self.n_out));
        }
        if !(self.epsilon >= 0.0 && self.epsilon < 0.5) {
            return Err(ParamError::EpsilonOutOfRange(self.epsilon));
        }
        let cap = self.rate_cap();
        if !(self.r > 0.0 && self.r <= cap) {
            return Err(ParamError::RateOutOfRange { r: self.r, cap });
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(ParamError::AlphaNegative(self.alpha));
        }
        Ok(())
    }

    /// Bins per branch.
    pub fn n(&self) -> usize {
        self.n_in + self.n_out
    }

    /// Total number of states, `2n`.
    pub fn state_count(&self) -> usize {
        2 * self.n()
    }

    /// Largest admissible switching probability, `1 - 2 epsilon`.
    pub fn rate_cap(&self) -> f64 {
        1.0 - 2.0 * self.epsilon
    }

    pub fn with_alpha(self, alpha: f64) -> Self {
        Self { alpha, ..self }
    }

    pub fn with_r(self, r: f64) -> Self {
        Self { r, ..self }
    }
}

/// Which branch a state sits on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Branch {
    On,
    Off,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StateSpace {
    params: ModelParams,
    comfort_lo: usize,
    comfort_hi: usize,
    on_indicator: DVector<f64>,
    comfort_indicator: DVector<f64>,
}

/// Builds the state space for validated parameters.
pub fn make_space(params: ModelParams) -> Result<StateSpace, ParamError> {
    params.validate()?;
    let n = params.n();
    let comfort_lo = params.n_out / 2;
    let comfort_hi = comfort_lo + params.n_in - 1;
    let on_indicator = DVector::from_fn(2 * n, |i, _| if i < n { 1.0 } else { 0.0 });
    let comfort_indicator = DVector::from_fn(2 * n, |i, _| {
        let bin = i % n;
        if (comfort_lo..=comfort_hi).contains(&bin) {
            1.0
        } else {
            0.0
        }
    });
    Ok(StateSpace { params, comfort_lo, comfort_hi, on_indicator, comfort_indicator })
}

impl StateSpace {
    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn n(&self) -> usize {
        self.params.n()
    }

    pub fn len(&self) -> usize {
        self.params.state_count()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn comfort_lo(&self) -> usize {
        self.comfort_lo
    }

    pub fn comfort_hi(&self) -> usize {
        self.comfort_hi
    }

    /// Global index of temperature bin `bin` on `branch`.
    pub fn index(&self, branch: Branch, bin: usize) -> usize {
        debug_assert!(bin < self.n());
        match branch {
            Branch::On => bin,
            Branch::Off => self.n() + bin,
        }
    }

    /// Inverse of [`StateSpace::index`].
    pub fn locate(&self, index: usize) -> (Branch, usize) {
        let n = self.n();
        if index < n {
            (Branch::On, index)
        } else {
            (Branch::Off, index - n)
        }
    }

    pub fn in_comfort(&self, bin: usize) -> bool {
        (self.comfort_lo..=self.comfort_hi).contains(&bin)
    }

    /// `U`: 1 on on-branch states.
    pub fn on_indicator(&self) -> &DVector<f64> {
        &self.on_indicator
    }

    /// `C`: 1 on comfort-zone states of either branch.
    pub fn comfort_indicator(&self) -> &DVector<f64> {
        &self.comfort_indicator
    }

    /// Image of a state under the on/off swap with temperature reversal.
    pub fn swap_index(&self, index: usize) -> usize {
        let n = self.n();
        match self.locate(index) {
            (Branch::On, bin) => self.index(Branch::Off, n - 1 - bin),
            (Branch::Off, bin) => self.index(Branch::On, n - 1 - bin),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DistributionError {
    #[error("entry {index} is negative or not finite ({value})")]
    InvalidEntry { index: usize, value: f64 },
    #[error("entries sum to {0}, expected 1")]
    NotNormalized(f64),
    #[error("length {got} does not match state count {expected}")]
    LengthMismatch { expected: usize, got: usize },
}

/// Probability mass function over the `2n` states.
#[derive(Debug, Clone, PartialEq)]
pub struct Distribution(DVector<f64>);

impl Distribution {
    pub fn new(rho: DVector<f64>) -> Result<Self, DistributionError> {
        for (index, &value) in rho.iter().enumerate() {
            if !(value >= 0.0 && value.is_finite()) {
                return Err(DistributionError::InvalidEntry { index, value });
            }
        }
        let total = rho.sum();
        if (total - 1.0).abs() > MASS_TOLERANCE {
            return Err(DistributionError::NotNormalized(total));
        }
        Ok(Self(rho))
    }

    /// Wraps a vector produced by a stochastic map of a valid distribution.
    pub(crate) fn from_stochastic_image(rho: DVector<f64>) -> Self {
        debug_assert!((rho.sum() - 1.0).abs() < 1e-9, "mass drifted to {}", rho.sum());
        Self(rho)
    }

    /// Clips negative entries to zero and rescales to unit mass.
    pub fn normalized(mut rho: DVector<f64>) -> Result<Self, DistributionError> {
        rho.iter_mut().for_each(|v| {
            if *v < 0.0 {
                *v = 0.0
            }
        });
        let total = rho.sum();
        if !(total > 0.0 && total.is_finite()) {
            return Err(DistributionError::NotNormalized(total));
        }
        rho /= total;
        Self::new(rho)
    }

    pub fn uniform(len: usize) -> Self {
        Self(DVector::from_element(len, 1.0 / len as f64))
    }

    /// All mass on a single state.
    pub fn point_mass(len: usize, index: usize) -> Self {
        let mut rho = DVector::zeros(len);
        rho[index] = 1.0;
        Self(rho)
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn into_vector(self) -> DVector<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn check_len(&self, space: &StateSpace) -> Result<(), DistributionError> {
        if self.len() != space.len() {
            return Err(DistributionError::LengthMismatch { expected: space.len(), got: self.len() });
        }
        Ok(())
    }
}

/// Fraction of loads switched on, `N_up = sum U_s rho_s`.
pub fn consumption(rho: &Distribution, space: &StateSpace) -> f64 {
    space.on_indicator().dot(rho.as_vector())
}
