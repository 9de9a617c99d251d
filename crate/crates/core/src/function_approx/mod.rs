//! Value-function classes and their per-step regression solvers.
//!
//! A class builds one [`StepModel`] per step `h`. Each model regresses
//! onto Bellman targets, either exactly (tabular cell means, ridge) or by
//! minibatch Adam (`LockNet`). Models are selected at runtime by name
//! through [`registry`].

mod adam;
mod linear;
mod locknet;
mod tabular;

use std::any::Any;
use std::fmt::Debug;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub use adam::AdamState;
pub use linear::{ridge_solve, FeatureMap, LinearClass, LinearStep, RidgeSolution};
pub use locknet::{
    locknet_forward, locknet_grad, warm_start, LockNet, LockNetClass, LockNetStep, LATENT_WIDTH,
};
pub use tabular::{tabular_fqi_step, TabularClass, TabularStep, UnvisitedDefault};

use crate::envs::{Environment, LowRankFactors, Observation};
use crate::error::{Error, Result};
use crate::registry::Registry;
use crate::rng::SimRng;

/// One regression example: predict `target` at `(obs, action)`.
#[derive(Clone, Copy, Debug)]
pub struct Sample<'a> {
    pub obs: &'a Observation,
    pub action: usize,
    pub target: f64,
}

/// Regression data for one step, split by origin so minibatch solvers can
/// keep the offline/online sampling proportions.
#[derive(Clone, Debug, Default)]
pub struct RegressionSet<'a> {
    pub offline: Vec<Sample<'a>>,
    pub online: Vec<Sample<'a>>,
}

impl<'a> RegressionSet<'a> {
    pub fn len(&self) -> usize {
        self.offline.len() + self.online.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = &Sample<'a>> {
        self.offline.iter().chain(self.online.iter())
    }

    /// Draws one example, offline with probability `|offline| / len`.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> &Sample<'a> {
        let n = self.len();
        assert!(n > 0, "cannot sample from an empty regression set");
        let i = rng.random_range(0..n);
        if i < self.offline.len() {
            &self.offline[i]
        } else {
            &self.online[i - self.offline.len()]
        }
    }
}

/// Minibatch optimizer settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MinibatchSettings {
    pub lr: f64,
    pub n_updates: usize,
    pub batch_size: usize,
}

impl Default for MinibatchSettings {
    fn default() -> Self {
        Self {
            lr: 2e-2,
            n_updates: 500,
            batch_size: 512,
        }
    }
}

/// The regressor for a single step `h`.
pub trait StepModel: Send + Sync + Debug {
    fn kind(&self) -> &'static str;

    fn n_actions(&self) -> usize;

    /// Unclipped predictions for every action at `obs`.
    fn q_values(&self, obs: &Observation, out: &mut [f64]);

    /// Fits the model to `data`. Exact solvers ignore `rng`.
    fn fit(&mut self, data: &RegressionSet<'_>, rng: &mut SimRng) -> Result<()>;

    /// One gradient step on the mean squared error of `batch`.
    fn gradient_step(&mut self, batch: &[Sample<'_>], lr: f64);

    /// Called before fitting step `h` with the model just fit for `h + 1`
    /// in the same iteration. No-op unless the class warm-starts.
    fn warm_start_from(&mut self, _next: &dyn StepModel) {}

    fn clone_box(&self) -> Box<dyn StepModel>;

    /// Parameters as a JSON document.
    fn checkpoint(&self) -> Value;

    fn as_any(&self) -> &dyn Any;
}

impl Clone for Box<dyn StepModel> {
    fn clone(&self) -> Self {
        self.clone_box()
    }
}

/// A family of step models, e.g. "tabular" or "locknet".
pub trait FunctionClass: Send + Sync {
    fn name(&self) -> &'static str;

    fn build(&self, h: usize, rng: &mut SimRng) -> Result<Box<dyn StepModel>>;

    /// True when `fit` is an exact minimizer (as opposed to minibatch SGD).
    fn is_exact(&self) -> bool;
}

/// A full Q-function `f = (f_0, ..., f_{H-1})`.
#[derive(Clone, Debug)]
pub struct QFunction {
    pub models: Vec<Box<dyn StepModel>>,
    pub v_max: f64,
}

impl QFunction {
    pub fn build(class: &dyn FunctionClass, horizon: usize, v_max: f64, rng: &mut SimRng) -> Result<Self> {
        let models = (0..horizon)
            .map(|h| class.build(h, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { models, v_max })
    }

    pub fn horizon(&self) -> usize {
        self.models.len()
    }

    pub fn n_actions(&self) -> usize {
        self.models[0].n_actions()
    }

    /// Raw predictions at step `h`.
    pub fn q_values(&self, h: usize, obs: &Observation, out: &mut [f64]) {
        self.models[h].q_values(obs, out);
    }

    /// Predictions at step `h`, clipped to `[0, v_max]`.
    pub fn clipped_q_values(&self, h: usize, obs: &Observation, out: &mut [f64]) {
        self.models[h].q_values(obs, out);
        for q in out.iter_mut() {
            *q = clip(*q, self.v_max);
        }
    }

    /// `max_a f_h(obs, a)` clipped to `[0, v_max]`; zero past the horizon.
    pub fn max_value(&self, h: usize, obs: &Observation, scratch: &mut [f64]) -> f64 {
        if h >= self.horizon() {
            return 0.0;
        }
        self.clipped_q_values(h, obs, scratch);
        scratch.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Clipped values on every `(h, s, a)` of a tabular observation space.
    pub fn to_table(&self, n_states: usize) -> crate::mdp::QTable {
        let na = self.n_actions();
        let mut table = crate::mdp::QTable::zeros(self.horizon(), n_states, na);
        let mut buf = vec![0.0; na];
        for h in 0..self.horizon() {
            for s in 0..n_states {
                self.clipped_q_values(h, &Observation::State(s), &mut buf);
                table.slice_mut(h)[s * na..(s + 1) * na].copy_from_slice(&buf);
            }
        }
        table
    }

    pub fn checkpoint(&self) -> Value {
        Value::Array(self.models.iter().map(|m| m.checkpoint()).collect())
    }
}

pub fn clip(q: f64, v_max: f64) -> f64 {
    q.clamp(0.0, v_max)
}

/// What a class factory may need to know about the environment.
#[derive(Clone, Debug)]
pub struct ClassContext {
    pub horizon: usize,
    pub n_states: usize,
    pub n_actions: usize,
    pub v_max: f64,
    pub obs_dim: Option<usize>,
    pub factors: Option<Arc<LowRankFactors>>,
    /// Mean rewards `[h][s][a]` of the latent MDP.
    pub mean_rewards: Vec<f64>,
}

impl ClassContext {
    pub fn from_env(env: &dyn Environment) -> Self {
        let mdp = env.latent();
        Self {
            horizon: mdp.horizon(),
            n_states: mdp.n_states(),
            n_actions: mdp.n_actions(),
            v_max: mdp.v_max(),
            obs_dim: env.obs_dim(),
            factors: env.low_rank_factors().map(|f| Arc::new(f.clone())),
            mean_rewards: (0..mdp.horizon())
                .flat_map(|h| mdp.mean_rewards_at(h).to_vec())
                .collect(),
        }
    }
}

pub type ClassFactory = fn(&Value, &ClassContext) -> Result<Box<dyn FunctionClass>>;

fn params<T: for<'de> Deserialize<'de>>(name: &str, v: &Value) -> Result<T> {
    let v = if v.is_null() { Value::Object(Default::default()) } else { v.clone() };
    serde_json::from_value(v).map_err(|e| Error::config(format!("function_class.{name}"), e.to_string()))
}

/// Built-in classes: `tabular`, `linear`, `locknet`.
pub fn registry() -> Registry<ClassFactory> {
    let mut r: Registry<ClassFactory> = Registry::new("function class");
    r.register("tabular", |v, ctx| {
        Ok(Box::new(TabularClass::new(ctx, params("tabular", v)?)))
    });
    r.register("linear", |v, ctx| Ok(Box::new(LinearClass::from_params(ctx, params("linear", v)?)?)));
    r.register("locknet", |v, ctx| Ok(Box::new(LockNetClass::new(ctx, params("locknet", v)?)?)));
    r
}

/// Looks up `name` in the built-in registry and builds it.
pub fn build_class(name: &str, params: &Value, ctx: &ClassContext) -> Result<Box<dyn FunctionClass>> {
    (registry().get(name)?)(params, ctx)
}
