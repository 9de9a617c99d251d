//! Rich-observation combination lock.
//!
//! Three latent states per level: `z0`, `z1` are good, `z2` is the
//! absorbing bad chain. Each good state has one good action that moves to
//! `z0`/`z1` with probability 1/2 each; every other action drops into the
//! bad chain and pays an anti-shaped 0.1. Taking the good action at the
//! final level pays 1. Observations are a noisy one-hot encoding of
//! `(latent, level)` mixed by a Sylvester Hadamard matrix.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Environment, Observation};
use crate::error::{Error, Result};
use crate::mdp::{Policy, RewardDist, TabularMdp};
use crate::rng::{seeded, SimRng};

pub const LOCK_LATENT: usize = 3;
pub const LOCK_ACTIONS: usize = 10;
pub const BAD_STATE: usize = 2;
pub const DEFAULT_NOISE_STD: f64 = 0.1;
const ANTI_SHAPED_REWARD: f64 = 0.1;
const FINAL_REWARD: f64 = 1.0;

/// Smallest power of two that fits `3 + (H + 1)` one-hot slots.
pub fn observation_dim(horizon: usize) -> usize {
    (LOCK_LATENT + horizon + 1).next_power_of_two()
}

/// Unnormalized `d x d` Hadamard matrix, row-major, entries `+-1`.
/// `d` must be a power of two.
pub fn sylvester_hadamard(d: usize) -> Vec<i32> {
    assert!(d.is_power_of_two(), "Hadamard order must be a power of two");
    let mut out = Vec::with_capacity(d * d);
    for i in 0..d {
        for j in 0..d {
            out.push(if (i & j).count_ones() % 2 == 0 { 1 } else { -1 });
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CombLockDocument", into = "CombLockDocument")]
pub struct CombLockSpec {
    pub horizon: usize,
    pub n_latent: usize,
    pub n_actions: usize,
    /// `good_actions[h][i]` for good latent state `i` at level `h`.
    pub good_actions: Vec<[usize; 2]>,
    pub noise_std: f64,
    pub obs_dim: usize,
    pub seed: u64,
    hadamard: Vec<i32>,
}

#[derive(Serialize, Deserialize)]
struct CombLockDocument {
    horizon: usize,
    n_latent: usize,
    n_actions: usize,
    good_actions: Vec<[usize; 2]>,
    noise_std: f64,
    obs_dim: usize,
    seed: u64,
}

impl From<CombLockSpec> for CombLockDocument {
    fn from(s: CombLockSpec) -> Self {
        Self {
            horizon: s.horizon,
            n_latent: s.n_latent,
            n_actions: s.n_actions,
            good_actions: s.good_actions,
            noise_std: s.noise_std,
            obs_dim: s.obs_dim,
            seed: s.seed,
        }
    }
}

impl TryFrom<CombLockDocument> for CombLockSpec {
    type Error = Error;

    fn try_from(d: CombLockDocument) -> Result<Self> {
        if d.n_latent != LOCK_LATENT || d.n_actions != LOCK_ACTIONS {
            return Err(Error::InvalidArgument("lock has 3 latent states and 10 actions".into()));
        }
        if d.good_actions.len() != d.horizon || d.good_actions.iter().flatten().any(|&a| a >= LOCK_ACTIONS) {
            return Err(Error::InvalidArgument("good_actions must hold one pair per level, entries < 10".into()));
        }
        if d.obs_dim != observation_dim(d.horizon) {
            return Err(Error::InvalidArgument(format!(
                "obs_dim {} does not match horizon {}",
                d.obs_dim, d.horizon
            )));
        }
        Ok(Self {
            hadamard: sylvester_hadamard(d.obs_dim),
            horizon: d.horizon,
            n_latent: d.n_latent,
            n_actions: d.n_actions,
            good_actions: d.good_actions,
            noise_std: d.noise_std,
            obs_dim: d.obs_dim,
            seed: d.seed,
        })
    }
}

impl CombLockSpec {
    /// Draws the good actions uniformly from the seed.
    pub fn new(horizon: usize, seed: u64, noise_std: f64) -> Result<Self> {
        if horizon < 2 {
            return Err(Error::InvalidArgument(format!(
                "combination lock needs H >= 2, got {horizon}"
            )));
        }
        if !(noise_std >= 0.0 && noise_std.is_finite()) {
            return Err(Error::InvalidArgument(format!("noise_std must be >= 0, got {noise_std}")));
        }
        let mut rng = seeded(seed);
        let good_actions = (0..horizon)
            .map(|_| {
                [
                    rng.random_range(0..LOCK_ACTIONS),
                    rng.random_range(0..LOCK_ACTIONS),
                ]
            })
            .collect();
        let obs_dim = observation_dim(horizon);
        Ok(Self {
            horizon,
            n_latent: LOCK_LATENT,
            n_actions: LOCK_ACTIONS,
            good_actions,
            noise_std,
            obs_dim,
            seed,
            hadamard: sylvester_hadamard(obs_dim),
        })
    }

    pub fn hadamard(&self) -> &[i32] {
        &self.hadamard
    }

    pub fn good_action(&self, z: usize, h: usize) -> Option<usize> {
        (z < 2).then(|| self.good_actions[h][z])
    }

    /// The latent MDP described in the module docs.
    pub fn latent_mdp(&self) -> TabularMdp {
        let (hn, ns, na) = (self.horizon, LOCK_LATENT, LOCK_ACTIONS);
        let mut transition = vec![0.0; hn * ns * na * ns];
        let mut rewards = Vec::with_capacity(hn * ns * na);
        for h in 0..hn {
            for z in 0..ns {
                for a in 0..na {
                    let row = ((h * ns + z) * na + a) * ns;
                    let reward = match self.good_action(z, h) {
                        Some(good) if a == good => {
                            transition[row] = 0.5;
                            transition[row + 1] = 0.5;
                            if h + 1 == hn {
                                FINAL_REWARD
                            } else {
                                0.0
                            }
                        }
                        Some(_) => {
                            transition[row + BAD_STATE] = 1.0;
                            ANTI_SHAPED_REWARD
                        }
                        None => {
                            transition[row + BAD_STATE] = 1.0;
                            0.0
                        }
                    };
                    rewards.push(RewardDist::deterministic(reward));
                }
            }
        }
        TabularMdp::new(hn, ns, na, transition, rewards, vec![0.5, 0.5, 0.0])
            .expect("lock construction is valid")
    }

    /// Always takes the good action; action 0 in the bad chain.
    pub fn optimal_policy(&self) -> Policy {
        Policy::deterministic(self.horizon, LOCK_LATENT, LOCK_ACTIONS, |h, z| {
            self.good_action(z, h).unwrap_or(0)
        })
    }
}

/// Maps `(latent, level)` to a noisy Hadamard-mixed observation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservationEmitter {
    pub spec: CombLockSpec,
}

impl ObservationEmitter {
    pub fn new(spec: CombLockSpec) -> Self {
        Self { spec }
    }

    pub fn dim(&self) -> usize {
        self.spec.obs_dim
    }

    /// `onehot3(z) || onehot_{H+1}(h) || 0`, before noise and mixing.
    pub fn noiseless(&self, z: usize, h: usize) -> Vec<f64> {
        assert!(z < LOCK_LATENT && h <= self.spec.horizon, "latent ({z}, {h}) out of range");
        let mut u = vec![0.0; self.dim()];
        u[z] = 1.0;
        u[LOCK_LATENT + h] = 1.0;
        u
    }

    pub fn emit<R: Rng + ?Sized>(&self, z: usize, h: usize, rng: &mut R) -> Vec<f64> {
        let mut u = self.noiseless(z, h);
        if self.spec.noise_std > 0.0 {
            for x in u.iter_mut() {
                let n: f64 = StandardNormal.sample(rng);
                *x += self.spec.noise_std * n;
            }
        }
        self.mix(&u)
    }

    fn mix(&self, u: &[f64]) -> Vec<f64> {
        let d = self.dim();
        self.spec
            .hadamard
            .chunks(d)
            .map(|row| row.iter().zip(u).map(|(&h, x)| h as f64 * x).sum())
            .collect()
    }

    /// Inverts the mixing: `H^T x / D`.
    pub fn unmix(&self, x: &[f64]) -> Vec<f64> {
        let d = self.dim();
        let h = &self.spec.hadamard;
        (0..d)
            .map(|j| (0..d).map(|i| h[i * d + j] as f64 * x[i]).sum::<f64>() / d as f64)
            .collect()
    }
}

pub fn make_comb_lock(horizon: usize, seed: u64) -> Result<(TabularMdp, ObservationEmitter, Policy)> {
    make_comb_lock_with_noise(horizon, seed, DEFAULT_NOISE_STD)
}

pub fn make_comb_lock_with_noise(
    horizon: usize,
    seed: u64,
    noise_std: f64,
) -> Result<(TabularMdp, ObservationEmitter, Policy)> {
    let spec = CombLockSpec::new(horizon, seed, noise_std)?;
    let mdp = spec.latent_mdp();
    let pi = spec.optimal_policy();
    Ok((mdp, ObservationEmitter::new(spec), pi))
}

/// The lock as seen through rich observations.
#[derive(Clone, Debug)]
pub struct CombLockEnv {
    mdp: TabularMdp,
    emitter: ObservationEmitter,
}

impl CombLockEnv {
    pub fn new(horizon: usize, seed: u64, noise_std: f64) -> Result<Self> {
        let (mdp, emitter, _) = make_comb_lock_with_noise(horizon, seed, noise_std)?;
        Ok(Self { mdp, emitter })
    }

    pub fn emitter(&self) -> &ObservationEmitter {
        &self.emitter
    }

    pub fn spec(&self) -> &CombLockSpec {
        &self.emitter.spec
    }
}

impl Environment for CombLockEnv {
    fn name(&self) -> &str {
        "comb_lock"
    }

    fn latent(&self) -> &TabularMdp {
        &self.mdp
    }

    fn observe(&self, h: usize, s: usize, rng: &mut SimRng) -> Observation {
        Observation::Vector(self.emitter.emit(s, h, rng))
    }

    fn is_tabular(&self) -> bool {
        false
    }

    fn obs_dim(&self) -> Option<usize> {
        Some(self.emitter.dim())
    }
}
