//! Environments: the latent tabular MDP plus how the learner observes it.

mod comb_lock;
mod hard_instance;
mod low_rank;

pub use comb_lock::{
    make_comb_lock, make_comb_lock_with_noise, observation_dim, sylvester_hadamard, CombLockEnv,
    CombLockSpec, ObservationEmitter, BAD_STATE, DEFAULT_NOISE_STD, LOCK_ACTIONS, LOCK_LATENT,
};
pub use hard_instance::{
    hard_instance_failure_policy, make_hard_instance, HardInstanceVariant, ACTION_L, ACTION_R,
    STATE_A, STATE_B, STATE_C,
};
pub use low_rank::{make_low_rank, LowRankFactors};

use crate::mdp::TabularMdp;
use crate::rng::SimRng;

/// What a learner sees at each step.
#[derive(Clone, Debug, PartialEq)]
pub enum Observation {
    /// The latent state id itself.
    State(usize),
    /// A rich observation vector emitted from the latent state.
    Vector(Vec<f64>),
}

impl Observation {
    pub fn state(&self) -> Option<usize> {
        match self {
            Observation::State(s) => Some(*s),
            Observation::Vector(_) => None,
        }
    }

    pub fn vector(&self) -> Option<&[f64]> {
        match self {
            Observation::State(_) => None,
            Observation::Vector(v) => Some(v),
        }
    }
}

/// An episodic environment driven by a latent [`TabularMdp`].
pub trait Environment: Send + Sync {
    fn name(&self) -> &str;

    fn latent(&self) -> &TabularMdp;

    /// Observation of latent state `s` at step `h`. `h == horizon` is
    /// allowed for terminal observations.
    fn observe(&self, h: usize, s: usize, rng: &mut SimRng) -> Observation;

    /// True when observations are the latent states themselves.
    fn is_tabular(&self) -> bool;

    fn horizon(&self) -> usize {
        self.latent().horizon()
    }

    fn n_actions(&self) -> usize {
        self.latent().n_actions()
    }

    /// Length of vector observations, if any.
    fn obs_dim(&self) -> Option<usize> {
        None
    }

    /// Known low-rank factorization of the latent dynamics.
    fn low_rank_factors(&self) -> Option<&LowRankFactors> {
        None
    }
}

/// Fully observed tabular environment.
#[derive(Clone, Debug)]
pub struct TabularEnv {
    name: String,
    mdp: TabularMdp,
    factors: Option<LowRankFactors>,
}

impl TabularEnv {
    pub fn new(name: impl Into<String>, mdp: TabularMdp) -> Self {
        Self {
            name: name.into(),
            mdp,
            factors: None,
        }
    }

    /// Attaches the factorization used to build linear features.
    pub fn with_factors(mut self, factors: LowRankFactors) -> Self {
        self.factors = Some(factors);
        self
    }
}

impl Environment for TabularEnv {
    fn name(&self) -> &str {
        &self.name
    }

    fn latent(&self) -> &TabularMdp {
        &self.mdp
    }

    fn observe(&self, _h: usize, s: usize, _rng: &mut SimRng) -> Observation {
        Observation::State(s)
    }

    fn is_tabular(&self) -> bool {
        true
    }

    fn low_rank_factors(&self) -> Option<&LowRankFactors> {
        self.factors.as_ref()
    }
}
