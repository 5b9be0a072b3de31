//! Transition kernel components and assembled stochastic matrices.
//!
//! Matrices are column-stochastic: entry `(s, s')` is the probability of the
//! transition `s' -> s`, so a distribution evolves as `rho <- P rho`.

use nalgebra::DMatrix;
use thiserror::Error;

use crate::state_space::{Branch, StateSpace};

/// Column sums of assembled matrices must equal one to this tolerance.
pub const STOCHASTIC_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("saturation input must be >= 0 (got {0})")]
    NegativeRate(f64),
    #[error("switching rate {name} = {value} outside [0, 1 - 2*epsilon = {cap}]")]
    RateAboveCap { name: &'static str, value: f64, cap: f64 },
    #[error("matrix is not column-stochastic: column {column} sums to {sum}")]
    NotStochastic { column: usize, sum: f64 },
    #[error("matrix has a negative entry {value} at ({row}, {column})")]
    NegativeEntry { row: usize, column: usize, value: f64 },
    #[error("expected a square {expected}x{expected} matrix, got {rows}x{cols}")]
    Shape { expected: usize, rows: usize, cols: usize },
}

/// Caps a switching rate at `1 - 2 epsilon`.
pub fn saturate(x: f64, epsilon: f64) -> Result<f64, KernelError> {
    if !(x >= 0.0) {
        return Err(KernelError::NegativeRate(x));
    }
    Ok(x.min(1.0 - 2.0 * epsilon))
}

/// The three additive pieces of the transition kernel.
///
/// `p0` carries drift, diffusion and forced switching at the grid ends;
/// `p_down` / `p_up` are zero-column-sum corrections that move the Poisson
/// switching mass from the drift-deeper entry to the opposite branch.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelComponents {
    pub p0: DMatrix<f64>,
    pub p_down: DMatrix<f64>,
    pub p_up: DMatrix<f64>,
    epsilon: f64,
}

impl KernelComponents {
    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn rate_cap(&self) -> f64 {
        1.0 - 2.0 * self.epsilon
    }

    pub fn dim(&self) -> usize {
        self.p0.nrows()
    }
}

/// Column-stochastic matrix with nonnegative entries.
#[derive(Debug, Clone, PartialEq)]
pub struct StochasticMatrix(DMatrix<f64>);

impl StochasticMatrix {
    pub fn new(entries: DMatrix<f64>) -> Result<Self, KernelError> {
        if entries.nrows() != entries.ncols() {
            return Err(KernelError::Shape { expected: entries.nrows(), rows: entries.nrows(), cols: entries.ncols() });
        }
        for (column, col) in entries.column_iter().enumerate() {
            for (row, &value) in col.iter().enumerate() {
                if !(value >= 0.0) {
                    return Err(KernelError::NegativeEntry { row, column, value });
                }
            }
            let sum = col.sum();
            if (sum - 1.0).abs() > STOCHASTIC_TOLERANCE {
                return Err(KernelError::NotStochastic { column, sum });
            }
        }
        Ok(Self(entries))
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }
}

/// Drift, two-step diffusion and stay probabilities for one column.
fn stencil(epsilon: f64) -> [(usize, f64); 3] {
    [(0, epsilon), (1, 1.0 - 2.0 * epsilon), (2, epsilon)]
}

/// Builds `p0`, `p_down` and `p_up` for a state space.
///
/// On devices cool (mass moves to colder bins), off devices heat. Mass that
/// would leave the grid at either end switches branch at the source
/// temperature bin. Poisson corrections act on the out-of-comfort columns
/// strictly between the terminal bin and the comfort zone.
pub fn build_components(space: &StateSpace) -> KernelComponents {
    let epsilon = space.params().epsilon;
    let n = space.n();
    let m = space.len();
    let mut p0 = DMatrix::zeros(m, m);
    let mut p_down = DMatrix::zeros(m, m);
    let mut p_up = DMatrix::zeros(m, m);

    for bin in 0..n {
        let on = space.index(Branch::On, bin);
        let off = space.index(Branch::Off, bin);
        for (shift, weight) in stencil(epsilon) {
            let on_target = match bin.checked_sub(shift) {
                Some(t) => space.index(Branch::On, t),
                None => off,
            };
            p0[(on_target, on)] += weight;

            let off_target = if bin + shift < n { space.index(Branch::Off, bin + shift) } else { on };
            p0[(off_target, off)] += weight;
        }
    }

    for bin in 1..space.comfort_lo() {
        let col = space.index(Branch::On, bin);
        p_down[(space.index(Branch::On, bin - 1), col)] = -1.0;
        p_down[(space.index(Branch::Off, bin), col)] = 1.0;
    }
    for bin in space.comfort_hi() + 1..n - 1 {
        let col = space.index(Branch::Off, bin);
        p_up[(space.index(Branch::Off, bin + 1), col)] = -1.0;
        p_up[(space.index(Branch::On, bin), col)] = 1.0;
    }

    KernelComponents { p0, p_down, p_up, epsilon }
}

fn check_rate(name: &'static str, value: f64, cap: f64) -> Result<(), KernelError> {
    // Tiny slack so that saturated rates computed as 1 - 2 eps always pass.
    if !(value >= 0.0 && value <= cap + 1e-15) {
        return Err(KernelError::RateAboveCap { name, value, cap });
    }
    Ok(())
}

/// `p0 + q_up p_up + q_down p_down` without admissibility checks.
pub(crate) fn combine(components: &KernelComponents, q_up: f64, q_down: f64) -> DMatrix<f64> {
    &components.p0 + &components.p_up * q_up + &components.p_down * q_down
}

/// Static kernel `p0 + r p_up + r p_down`.
pub fn assemble_static(components: &KernelComponents, r: f64) -> Result<StochasticMatrix, KernelError> {
    check_rate("r", r, components.rate_cap())?;
    Ok(StochasticMatrix(combine(components, r, r)))
}

/// Controlled kernel `p0 + q_up p_up + q_down p_down`; rates must already be saturated.
pub fn assemble_controlled(
    components: &KernelComponents,
    q_up: f64,
    q_down: f64,
) -> Result<StochasticMatrix, KernelError> {
    let cap = components.rate_cap();
    check_rate("q_up", q_up, cap)?;
    check_rate("q_down", q_down, cap)?;
    Ok(StochasticMatrix(combine(components, q_up, q_down)))
}

/// Permutation exchanging on and off branches while reversing temperature order.
pub fn swap_operator(space: &StateSpace) -> StochasticMatrix {
    let m = space.len();
    let mut t = DMatrix::zeros(m, m);
    for s in 0..m {
        t[(space.swap_index(s), s)] = 1.0;
    }
    StochasticMatrix(t)
}
