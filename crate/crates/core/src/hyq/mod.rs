//! Hy-Q: fitted Q-iteration on the union of a fixed offline dataset and
//! on-policy data collected by the greedy policy of the current estimate.

mod discounted;
mod finite;
mod record;

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub use discounted::{discounted_target, hyq_discounted, DiscountedConfig, DiscountedHyQ, LinearSchedule};
pub use finite::{backward_fit, hyq_qtype, hyq_vtype, residuals, run_finite, ObsTransition, ReplayState};
pub use record::{FitEntry, RunRecord, RunRow};

use crate::envs::{Environment, Observation};
use crate::error::{Error, Result};
use crate::function_approx::{build_class, ClassContext, FunctionClass, QFunction};
use crate::mdp::{policy_value, Policy};
use crate::rng::{derive_seed, SimRng};

/// Values within this distance of the maximum count as tied.
pub const TIE_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Online tuples sliced from full greedy trajectories.
    #[default]
    QType,
    /// Greedy roll-in to step `h`, then one uniformly random action.
    VType,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TieBreak {
    #[default]
    LowestIndex,
    /// Uniform among tied actions, fixed per `(seed, h, s)` on tabular
    /// observations.
    RandomSeeded { seed: u64 },
    /// Prefer the action of `policy` whenever it is among the maximizers.
    AdversarialTo { policy: Policy },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EvalMode {
    /// Exact DP on tabular environments, Monte Carlo (20 episodes) otherwise.
    #[default]
    Auto,
    ExactDp,
    MonteCarlo { n_episodes: usize },
    /// Estimates the latent action distribution at every `(h, z)` from
    /// `samples_per_state` observation draws, then evaluates exactly.
    LatentInduced { samples_per_state: usize },
}

pub const DEFAULT_MC_EPISODES: usize = 20;

/// A function class chosen by registry name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSelector {
    pub name: String,
    #[serde(default)]
    pub params: Value,
}

impl Default for ClassSelector {
    fn default() -> Self {
        Self {
            name: "tabular".into(),
            params: Value::Null,
        }
    }
}

impl ClassSelector {
    pub fn new(name: &str, params: Value) -> Self {
        Self {
            name: name.into(),
            params,
        }
    }

    pub fn build(&self, env: &dyn Environment) -> Result<Box<dyn FunctionClass>> {
        build_class(&self.name, &self.params, &ClassContext::from_env(env))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyQConfig {
    pub iterations: usize,
    pub m_on: usize,
    pub variant: Variant,
    pub function_class: ClassSelector,
    pub tie_break: TieBreak,
    pub eval: EvalMode,
    pub seed: u64,
    /// Record mean squared Bellman residuals on both buffers.
    pub record_residuals: bool,
    /// Probability of a uniformly random action during online collection.
    /// Zero for Hy-Q proper.
    pub epsilon: f64,
}

impl Default for HyQConfig {
    fn default() -> Self {
        Self {
            iterations: 50,
            m_on: 1,
            variant: Variant::QType,
            function_class: ClassSelector::default(),
            tie_break: TieBreak::LowestIndex,
            eval: EvalMode::Auto,
            seed: 0,
            record_residuals: true,
            epsilon: 0.0,
        }
    }
}

impl HyQConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::config("iterations", "must be >= 1"));
        }
        if self.m_on == 0 {
            return Err(Error::config("m_on", "must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::config("epsilon", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Chooses among the near-maximal entries of `q` according to `tie`.
/// `state` is the latent state when observations are tabular.
pub fn greedy_action(q: &[f64], tie: &TieBreak, h: usize, state: Option<usize>, rng: &mut SimRng) -> usize {
    let m = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let is_tied = |a: usize| q[a] >= m - TIE_TOL;
    let first = (0..q.len()).find(|&a| is_tied(a)).expect("nonempty action set");
    match tie {
        TieBreak::LowestIndex => first,
        TieBreak::RandomSeeded { seed } => {
            let tied: Vec<usize> = (0..q.len()).filter(|&a| is_tied(a)).collect();
            if tied.len() == 1 {
                return tied[0];
            }
            let k = match state {
                Some(s) => {
                    let key = derive_seed(*seed, ((h as u64) << 32) | s as u64);
                    (key % tied.len() as u64) as usize
                }
                None => rng.random_range(0..tied.len()),
            };
            tied[k]
        }
        TieBreak::AdversarialTo { policy } => state
            .filter(|&s| h < policy.horizon() && s < policy.n_states())
            .and_then(|s| policy.action(h, s))
            .filter(|&a| a < q.len() && is_tied(a))
            .unwrap_or(first),
    }
}

/// Greedy action of `f` at `(h, obs)` on clipped values.
pub fn act(f: &QFunction, h: usize, obs: &Observation, tie: &TieBreak, rng: &mut SimRng, scratch: &mut [f64]) -> usize {
    f.clipped_q_values(h, obs, scratch);
    greedy_action(scratch, tie, h, obs.state(), rng)
}

/// Deterministic greedy policy of `f` over tabular observations.
pub fn greedy_policy(f: &QFunction, n_states: usize, tie: &TieBreak) -> Policy {
    let mut scratch = vec![0.0; f.n_actions()];
    // only consulted by RandomSeeded without a state, which cannot happen here
    let mut rng = crate::rng::seeded(0);
    Policy::deterministic(f.horizon(), n_states, f.n_actions(), |h, s| {
        act(f, h, &Observation::State(s), tie, &mut rng, &mut scratch)
    })
}

/// Anything that picks actions from observations.
pub trait Actor {
    fn act(&self, h: usize, obs: &Observation, rng: &mut SimRng) -> usize;

    /// The Markov policy over latent states, when the actor is one.
    fn tabular_policy(&self, _n_states: usize) -> Option<Policy> {
        None
    }
}

/// Greedy actor of a Q-function.
pub struct Greedy<'a> {
    pub f: &'a QFunction,
    pub tie: &'a TieBreak,
}

impl Actor for Greedy<'_> {
    fn act(&self, h: usize, obs: &Observation, rng: &mut SimRng) -> usize {
        let mut scratch = vec![0.0; self.f.n_actions()];
        act(self.f, h, obs, self.tie, rng, &mut scratch)
    }

    fn tabular_policy(&self, n_states: usize) -> Option<Policy> {
        Some(greedy_policy(self.f, n_states, self.tie))
    }
}

impl Actor for Policy {
    fn act(&self, h: usize, obs: &Observation, rng: &mut SimRng) -> usize {
        self.sample(h, obs.state().expect("tabular policy needs state observations"), rng)
    }

    fn tabular_policy(&self, _n_states: usize) -> Option<Policy> {
        Some(self.clone())
    }
}

/// Expected return of the greedy policy of `f`.
pub fn evaluate(env: &dyn Environment, f: &QFunction, tie: &TieBreak, mode: EvalMode, rng: &mut SimRng) -> Result<f64> {
    evaluate_actor(env, &Greedy { f, tie }, mode, rng)
}

/// Expected return of `actor`, exactly or by simulation.
pub fn evaluate_actor(env: &dyn Environment, actor: &dyn Actor, mode: EvalMode, rng: &mut SimRng) -> Result<f64> {
    let mdp = env.latent();
    let mode = match mode {
        EvalMode::Auto if env.is_tabular() => EvalMode::ExactDp,
        EvalMode::Auto => EvalMode::MonteCarlo {
            n_episodes: DEFAULT_MC_EPISODES,
        },
        m => m,
    };
    match mode {
        EvalMode::ExactDp => {
            let pi = actor.tabular_policy(mdp.n_states()).filter(|_| env.is_tabular()).ok_or_else(|| {
                Error::InvalidArgument("exact evaluation needs a policy over tabular observations".into())
            })?;
            Ok(policy_value(mdp, &pi))
        }
        EvalMode::MonteCarlo { n_episodes } => {
            if n_episodes == 0 {
                return Err(Error::config("eval.n_episodes", "must be >= 1"));
            }
            let mut total = 0.0;
            for _ in 0..n_episodes {
                let mut s = mdp.sample_initial(rng);
                for h in 0..mdp.horizon() {
                    let obs = env.observe(h, s, rng);
                    let a = actor.act(h, &obs, rng);
                    let (r, next) = mdp.step(h, s, a, rng);
                    total += r;
                    match next {
                        Some(n) => s = n,
                        None => break,
                    }
                }
            }
            Ok(total / n_episodes as f64)
        }
        EvalMode::LatentInduced { samples_per_state } => {
            if samples_per_state == 0 {
                return Err(Error::config("eval.samples_per_state", "must be >= 1"));
            }
            let (hn, ns, na) = (mdp.horizon(), mdp.n_states(), mdp.n_actions());
            let mut probs = vec![0.0; hn * ns * na];
            for h in 0..hn {
                for s in 0..ns {
                    let row = &mut probs[(h * ns + s) * na..(h * ns + s + 1) * na];
                    for _ in 0..samples_per_state {
                        let obs = env.observe(h, s, rng);
                        row[actor.act(h, &obs, rng)] += 1.0 / samples_per_state as f64;
                    }
                }
            }
            Ok(policy_value(mdp, &Policy::new(hn, ns, na, probs)?))
        }
        EvalMode::Auto => unreachable!(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{hard_instance_failure_policy, make_hard_instance, HardInstanceVariant, TabularEnv, ACTION_R, STATE_A};
    use crate::function_approx::TabularStep;
    use crate::rng::seeded;

    #[test]
    fn dominant_action_ignores_rule() {
        let q = [0.1, 0.9, 0.3];
        let bad = Policy::deterministic(1, 1, 3, |_, _| 2);
        let mut rng = seeded(0);
        for tie in [
            TieBreak::LowestIndex,
            TieBreak::RandomSeeded { seed: 3 },
            TieBreak::AdversarialTo { policy: bad },
        ] {
            assert_eq!(greedy_action(&q, &tie, 0, Some(0), &mut rng), 1);
        }
    }

    #[test]
    fn adversarial_on_all_zero_hard_instance() {
        let (mdp, _) = make_hard_instance(HardInstanceVariant::M1);
        let env = TabularEnv::new("hard", mdp.clone());
        let ctx = ClassContext::from_env(&env);
        let f = QFunction::build(
            build_class("tabular", &Value::Null, &ctx).unwrap().as_ref(),
            2,
            1.0,
            &mut seeded(0),
        )
        .unwrap();
        let tie = TieBreak::AdversarialTo {
            policy: hard_instance_failure_policy(),
        };
        let pi = greedy_policy(&f, 3, &tie);
        assert_eq!(pi.action(0, STATE_A), Some(ACTION_R));
        assert_eq!(policy_value(&mdp, &pi), 0.0);
        let v = evaluate(&env, &f, &tie, EvalMode::Auto, &mut seeded(1)).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn scaling_preserves_lowest_index_policy() {
        let mut rng = seeded(5);
        let mut step = TabularStep::new(4, 3, 0.0);
        for v in step.values.iter_mut() {
            *v = (rng.random_range(0..4) as f64) * 0.25;
        }
        let mut scaled = step.clone();
        scaled.values.iter_mut().for_each(|v| *v *= 3.0);
        let f = QFunction { models: vec![Box::new(step)], v_max: 10.0 };
        let g = QFunction { models: vec![Box::new(scaled)], v_max: 10.0 };
        assert_eq!(
            greedy_policy(&f, 4, &TieBreak::LowestIndex),
            greedy_policy(&g, 4, &TieBreak::LowestIndex)
        );
    }

    #[test]
    fn random_seeded_is_reproducible_and_spreads() {
        let q = [1.0; 4];
        let tie = TieBreak::RandomSeeded { seed: 11 };
        let mut rng = seeded(0);
        let picks: Vec<usize> = (0..40).map(|s| greedy_action(&q, &tie, 0, Some(s), &mut rng)).collect();
        let again: Vec<usize> = (0..40).map(|s| greedy_action(&q, &tie, 0, Some(s), &mut rng)).collect();
        assert_eq!(picks, again);
        assert!((0..4).all(|a| picks.contains(&a)));
    }
}
