//! Nonlinear mean-field master equation and its observables.

use std::fmt;
use std::str::FromStr;

use nalgebra::DVector;
use thiserror::Error;

use crate::kernel::{combine, saturate, KernelComponents};
use crate::state_space::{consumption, Branch, Distribution, ModelParams, StateSpace};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("unknown scenario {0:?} (expected all_off, all_on or small)")]
    UnknownScenario(String),
    #[error("perturbation shape has length {got}, expected {expected}")]
    ShapeLength { expected: usize, got: usize },
    #[error("perturbed distribution is invalid: {0}")]
    Invalid(#[from] crate::state_space::DistributionError),
}

/// Feedback law mapping consumption to switching rates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlLaw {
    pub r: f64,
    pub alpha: f64,
    pub epsilon: f64,
}

impl From<&ModelParams> for ControlLaw {
    fn from(p: &ModelParams) -> Self {
        Self { r: p.r, alpha: p.alpha, epsilon: p.epsilon }
    }
}

/// Saturated switching probabilities `(q_up, q_down)` for consumption `n_up`.
pub fn control_rates(n_up: f64, law: &ControlLaw) -> (f64, f64) {
    let n_up = n_up.clamp(0.0, 1.0);
    let raw_down = law.r * (2.0 * n_up).powf(law.alpha);
    let raw_up = law.r * (2.0 * (1.0 - n_up)).powf(law.alpha);
    // inputs are nonnegative by construction
    let q_down = saturate(raw_down, law.epsilon).unwrap_or(0.0);
    let q_up = saturate(raw_up, law.epsilon).unwrap_or(0.0);
    (q_up, q_down)
}

/// One step of the nonlinear master equation on a raw vector. The rates are
/// computed from the vector's own consumption, which makes this usable for
/// finite-difference probes that leave the simplex.
pub fn step_vector(rho: &DVector<f64>, space: &StateSpace, components: &KernelComponents, law: &ControlLaw) -> DVector<f64> {
    let n_up = space.on_indicator().dot(rho);
    let (q_up, q_down) = control_rates(n_up, law);
    combine(components, q_up, q_down) * rho
}

/// `rho(t+1) = p(N_up(t)) rho(t)`.
pub fn step(rho: &Distribution, space: &StateSpace, components: &KernelComponents, law: &ControlLaw) -> Distribution {
    Distribution::from_stochastic_image(step_vector(rho.as_vector(), space, components, law))
}

/// L1 distance between two vectors.
pub fn l1_distance(a: &DVector<f64>, b: &DVector<f64>) -> Result<f64, DynamicsError> {
    if a.len() != b.len() {
        return Err(DynamicsError::LengthMismatch(a.len(), b.len()));
    }
    Ok(a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).sum())
}

/// Fraction of the ensemble inside the comfort zone.
pub fn comfort(rho: &Distribution, space: &StateSpace) -> f64 {
    space.comfort_indicator().dot(rho.as_vector())
}

/// Time series of a master-equation (or Monte Carlo) run.
///
/// Observables are recorded at every step `t = 0..=steps`; distributions
/// only every `stride` steps, so `rho[k]` is the state at `t = k * stride`.
#[derive(Debug, Clone, Default)]
pub struct Trajectory {
    pub rho: Vec<Distribution>,
    pub stride: usize,
    pub n_up: Vec<f64>,
    pub h1: Vec<f64>,
    pub comfort: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.n_up.len()
    }

    pub fn is_empty(&self) -> bool {
        self.n_up.is_empty()
    }

    pub(crate) fn record(&mut self, t: usize, rho: &Distribution, space: &StateSpace, reference: &Distribution) {
        self.n_up.push(consumption(rho, space));
        self.h1.push(l1_distance(reference.as_vector(), rho.as_vector()).expect("lengths checked by caller"));
        self.comfort.push(comfort(rho, space));
        if self.stride > 0 && t.is_multiple_of(self.stride) {
            self.rho.push(rho.clone());
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SimulateOptions {
    /// Keep every `stride`-th distribution; 0 keeps none.
    pub stride: usize,
}

impl Default for SimulateOptions {
    fn default() -> Self {
        Self { stride: 1 }
    }
}

/// Iterates the master equation `steps` times from `rho0`.
pub fn simulate(
    rho0: &Distribution,
    steps: usize,
    space: &StateSpace,
    components: &KernelComponents,
    law: &ControlLaw,
    reference: &Distribution,
    options: SimulateOptions,
) -> Result<Trajectory, DynamicsError> {
    for d in [rho0, reference] {
        if d.len() != space.len() {
            return Err(DynamicsError::LengthMismatch(d.len(), space.len()));
        }
    }
    let mut traj = Trajectory { stride: options.stride, ..Default::default() };
    let mut rho = rho0.clone();
    traj.record(0, &rho, space, reference);
    for t in 1..=steps {
        rho = step(&rho, space, components, law);
        traj.record(t, &rho, space, reference);
    }
    Ok(traj)
}

/// Demand-response initial conditions.
#[derive(Debug, Clone, PartialEq)]
pub enum Scenario {
    /// Every on device switched off at its current temperature.
    AllOff,
    /// Every off device switched on at its current temperature.
    AllOn,
    /// `base + delta * shape`, clipped and renormalized.
    Small { delta: f64, shape: DVector<f64> },
}

/// Scenario tag as written in configs and on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScenarioKind {
    AllOff,
    AllOn,
    Small,
}

impl FromStr for ScenarioKind {
    type Err = DynamicsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "all_off" => Ok(Self::AllOff),
            "all_on" => Ok(Self::AllOn),
            "small" => Ok(Self::Small),
            other => Err(DynamicsError::UnknownScenario(other.to_string())),
        }
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::AllOff => "all_off",
            Self::AllOn => "all_on",
            Self::Small => "small",
        })
    }
}

/// Applies a demand-response perturbation to `base`.
pub fn dr_scenario(space: &StateSpace, scenario: &Scenario, base: &Distribution) -> Result<Distribution, DynamicsError> {
    base.check_len(space)?;
    let rho = base.as_vector();
    let n = space.n();
    match scenario {
        Scenario::AllOff | Scenario::AllOn => {
            let (from, to) = if *scenario == Scenario::AllOff { (Branch::On, Branch::Off) } else { (Branch::Off, Branch::On) };
            let mut out = rho.clone();
            for bin in 0..n {
                let src = space.index(from, bin);
                out[space.index(to, bin)] += out[src];
                out[src] = 0.0;
            }
            Ok(Distribution::new(out)?)
        }
        Scenario::Small { delta, shape } => {
            if shape.len() != rho.len() {
                return Err(DynamicsError::ShapeLength { expected: rho.len(), got: shape.len() });
            }
            if *delta == 0.0 {
                return Ok(base.clone());
            }
            Ok(Distribution::normalized(rho + shape * *delta)?)
        }
    }
}

/// Least-squares exponential decay rate of a nonnegative series.
///
/// Fits `log y(t) ~ c - rate * t` over `window`, skipping samples at or below
/// `floor`. When the series oscillates the fit runs through its local maxima
/// only, so sign changes of an underlying complex mode do not bias the slope.
pub fn fit_decay_rate(series: &[f64], window: std::ops::Range<usize>, floor: f64) -> Option<f64> {
    let end = window.end.min(series.len());
    let start = window.start.min(end);
    let usable: Vec<usize> = (start..end).filter(|&t| series[t] > floor && series[t].is_finite()).collect();
    let peaks: Vec<usize> = usable
        .iter()
        .copied()
        .filter(|&t| t > 0 && t + 1 < series.len() && series[t] >= series[t - 1] && series[t] >= series[t + 1])
        .collect();
    let points = if peaks.len() >= 3 { peaks } else { usable };
    if points.len() < 2 {
        return None;
    }
    let k = points.len() as f64;
    let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
    for &t in &points {
        let x = t as f64;
        let y = series[t].ln();
        sx += x;
        sy += y;
        sxx += x * x;
        sxy += x * y;
    }
    let denom = k * sxx - sx * sx;
    if denom == 0.0 {
        return None;
    }
    Some(-(k * sxy - sx * sy) / denom)
}
