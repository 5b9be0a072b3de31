//! Finite-population agent simulation of the controlled chain.
//!
//! Every agent draws from its own ChaCha stream (stream id = agent index)
//! at a word offset fixed by the step number, so a run depends only on the
//! seed and not on thread count or iteration order.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::dynamics::{control_rates, ControlLaw, Trajectory};
use crate::kernel::{combine, KernelComponents};
use crate::state_space::{Distribution, StateSpace};

/// ChaCha words reserved per agent per step.
const WORDS_PER_SLOT: u128 = 16;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MonteCarloError {
    #[error("ensemble needs at least one agent")]
    Empty,
    #[error("state index {index} out of range for {states} states")]
    InvalidState { index: u32, states: usize },
    #[error("distribution has {got} entries, state space has {expected}")]
    LengthMismatch { expected: usize, got: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AgentEnsemble {
    pub states: Vec<u32>,
    pub seed: u64,
    /// Steps taken so far; selects the RNG slot of the next step.
    pub step: u64,
}

fn agent_uniform(seed: u64, agent: usize, slot: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(agent as u64);
    rng.set_word_pos(slot as u128 * WORDS_PER_SLOT);
    rng.random::<f64>()
}

fn sample_index(weights: &[(usize, f64)], u: f64) -> usize {
    let mut acc = 0.0;
    for &(i, w) in weights {
        acc += w;
        if u < acc {
            return i;
        }
    }
    // round-off: fall back to the last state with positive weight
    weights.iter().rev().find(|(_, w)| *w > 0.0).map(|(i, _)| *i).unwrap_or(weights[0].0)
}

impl AgentEnsemble {
    /// Draws `agents` i.i.d. states from `rho`.
    pub fn sample(rho: &Distribution, agents: usize, seed: u64) -> Result<Self, MonteCarloError> {
        if agents == 0 {
            return Err(MonteCarloError::Empty);
        }
        let weights: Vec<(usize, f64)> = rho.as_vector().iter().copied().enumerate().filter(|(_, w)| *w > 0.0).collect();
        let states = (0..agents).into_par_iter().map(|a| sample_index(&weights, agent_uniform(seed, a, 0)) as u32).collect();
        Ok(Self { states, seed, step: 0 })
    }

    pub fn from_states(states: Vec<u32>, seed: u64, space: &StateSpace) -> Result<Self, MonteCarloError> {
        if states.is_empty() {
            return Err(MonteCarloError::Empty);
        }
        if let Some(&index) = states.iter().find(|&&s| s as usize >= space.len()) {
            return Err(MonteCarloError::InvalidState { index, states: space.len() });
        }
        Ok(Self { states, seed, step: 0 })
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn histogram(&self, space: &StateSpace) -> DVector<f64> {
        let mut h = DVector::zeros(space.len());
        for &s in &self.states {
            h[s as usize] += 1.0;
        }
        h / self.states.len() as f64
    }

    pub fn consumption(&self, space: &StateSpace) -> f64 {
        let on = self.states.iter().filter(|&&s| space.on_indicator()[s as usize] != 0.0).count();
        on as f64 / self.states.len() as f64
    }
}

fn sparse_columns(p: &DMatrix<f64>) -> Vec<Vec<(usize, f64)>> {
    (0..p.ncols())
        .map(|j| p.column(j).iter().copied().enumerate().filter(|(_, v)| *v > 0.0).collect())
        .collect()
}

/// Advances every agent one step with rates set by the current empirical
/// consumption.
pub fn mc_step(ensemble: &AgentEnsemble, space: &StateSpace, components: &KernelComponents, law: &ControlLaw) -> AgentEnsemble {
    let (q_up, q_down) = control_rates(ensemble.consumption(space), law);
    let cols = sparse_columns(&combine(components, q_up, q_down));
    let slot = ensemble.step + 1;
    let seed = ensemble.seed;
    let states = ensemble
        .states
        .par_iter()
        .enumerate()
        .map(|(a, &s)| sample_index(&cols[s as usize], agent_uniform(seed, a, slot)) as u32)
        .collect();
    AgentEnsemble { states, seed, step: slot }
}

/// Runs `steps` agent steps, recording empirical observables; `H1` is taken
/// between the empirical histogram and `reference`.
pub fn mc_simulate(
    ensemble: &AgentEnsemble,
    steps: usize,
    space: &StateSpace,
    components: &KernelComponents,
    law: &ControlLaw,
    reference: &Distribution,
) -> Result<(AgentEnsemble, Trajectory), MonteCarloError> {
    if reference.len() != space.len() {
        return Err(MonteCarloError::LengthMismatch { expected: space.len(), got: reference.len() });
    }
    let mut traj = Trajectory { stride: 0, ..Default::default() };
    let mut current = ensemble.clone();
    let record = |e: &AgentEnsemble, traj: &mut Trajectory| {
        let h = e.histogram(space);
        traj.n_up.push(e.consumption(space));
        traj.h1.push((&h - reference.as_vector()).lp_norm(1));
        traj.comfort.push(space.comfort_indicator().dot(&h));
    };
    record(&current, &mut traj);
    for _ in 0..steps {
        current = mc_step(&current, space, components, law);
        record(&current, &mut traj);
    }
    Ok((current, traj))
}
