//! Comparison learners: offline-only FQI, behavior cloning and online-only
//! FQI.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::OfflineDataset;
use crate::envs::{Environment, Observation};
use crate::error::{Error, Result};
use crate::function_approx::{AdamState, QFunction};
use crate::hyq::{
    backward_fit, evaluate, greedy_policy, run_finite, Actor, ClassSelector, EvalMode, HyQConfig, ReplayState,
    RunRecord, RunRow, TieBreak,
};
use crate::mdp::Policy;
use crate::rng::{derive_seed, sample_categorical, seeded, SimRng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OfflineFqiConfig {
    pub function_class: ClassSelector,
    /// Backward passes over the offline data. One suffices for exact
    /// solvers; minibatch classes keep training across sweeps.
    pub n_sweeps: usize,
    pub tie_break: TieBreak,
    pub eval: EvalMode,
    pub seed: u64,
}

impl Default for OfflineFqiConfig {
    fn default() -> Self {
        Self {
            function_class: ClassSelector::default(),
            n_sweeps: 1,
            tie_break: TieBreak::RandomSeeded { seed: 0 },
            eval: EvalMode::Auto,
            seed: 0,
        }
    }
}

pub struct OfflineFqiOutcome {
    pub q: QFunction,
    /// Greedy policy, when observations are tabular.
    pub policy: Option<Policy>,
    /// One row per sweep; `online_steps` is always zero.
    pub record: RunRecord,
}

/// FQI on the offline buffers alone. The environment supplies observations
/// and evaluation only; no transitions are sampled for training.
pub fn offline_fqi(env: &dyn Environment, offline: &OfflineDataset, config: &OfflineFqiConfig) -> Result<OfflineFqiOutcome> {
    if offline.is_empty() {
        return Err(Error::InvalidArgument("offline FQI needs a nonempty dataset".into()));
    }
    if config.n_sweeps == 0 {
        return Err(Error::config("n_sweeps", "must be >= 1"));
    }
    let mdp = env.latent();
    let class = config.function_class.build(env)?;
    let mut q = QFunction::build(class.as_ref(), mdp.horizon(), mdp.v_max(), &mut seeded(derive_seed(config.seed, 0)))?;
    let replay = ReplayState::from_offline(env, offline, &mut seeded(derive_seed(config.seed, 4)))?;
    let mut fit_rng = seeded(derive_seed(config.seed, 2));
    let mut eval_rng = seeded(derive_seed(config.seed, 3));
    let mut record = RunRecord::new("offline_fqi", serde_json::to_value(config)?);
    for sweep in 1..=config.n_sweeps {
        backward_fit(&mut q, &replay, sweep, &mut fit_rng, &mut record.fit_log)?;
        let (off, _) = crate::hyq::residuals(&q, &replay);
        record.rows.push(RunRow {
            iter: sweep,
            online_steps: 0,
            offline_samples: replay.offline_len() as u64,
            eval_return: evaluate(env, &q, &config.tie_break, config.eval, &mut eval_rng)?,
            bellman_residual_offline: off,
            bellman_residual_online: None,
        });
    }
    let policy = env.is_tabular().then(|| greedy_policy(&q, mdp.n_states(), &config.tie_break));
    record.final_policy = policy.clone();
    Ok(OfflineFqiOutcome { q, policy, record })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BcMode {
    /// Most frequent action per `(h, s)`; lowest index on ties, uniform on
    /// unseen states.
    TabularMajority,
    /// Per-step multinomial logistic regression on observation features.
    LinearSoftmax {
        #[serde(default = "default_bc_steps")]
        steps: usize,
        #[serde(default = "default_bc_lr")]
        lr: f64,
        #[serde(default = "default_bc_batch")]
        batch_size: usize,
    },
}

fn default_bc_steps() -> usize {
    2000
}

fn default_bc_lr() -> f64 {
    1e-2
}

fn default_bc_batch() -> usize {
    512
}

impl BcMode {
    pub fn linear_softmax() -> Self {
        BcMode::LinearSoftmax {
            steps: default_bc_steps(),
            lr: default_bc_lr(),
            batch_size: default_bc_batch(),
        }
    }
}

/// `pi_h(a | x) = softmax(W_h x + b_h)_a`; tabular observations are one-hot
/// encoded.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearSoftmaxPolicy {
    pub horizon: usize,
    pub feature_dim: usize,
    pub n_actions: usize,
    /// `[h][a][k]`, with the bias as the last of `feature_dim + 1` columns.
    pub weights: Vec<f64>,
}

impl LinearSoftmaxPolicy {
    fn width(&self) -> usize {
        self.feature_dim + 1
    }

    fn features(&self, obs: &Observation) -> Vec<f64> {
        let mut x = match obs {
            Observation::Vector(v) => v.clone(),
            Observation::State(s) => {
                let mut x = vec![0.0; self.feature_dim];
                x[*s] = 1.0;
                x
            }
        };
        x.push(1.0);
        x
    }

    fn probs_from_features(&self, h: usize, x: &[f64], out: &mut [f64]) {
        let w = self.width();
        let base = h * self.n_actions * w;
        for (a, o) in out.iter_mut().enumerate() {
            let row = &self.weights[base + a * w..base + (a + 1) * w];
            *o = row.iter().zip(x).map(|(p, q)| p * q).sum();
        }
        let m = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for o in out.iter_mut() {
            *o = (*o - m).exp();
            total += *o;
        }
        out.iter_mut().for_each(|o| *o /= total);
    }

    pub fn probs(&self, h: usize, obs: &Observation) -> Vec<f64> {
        let mut out = vec![0.0; self.n_actions];
        self.probs_from_features(h, &self.features(obs), &mut out);
        out
    }
}

impl Actor for LinearSoftmaxPolicy {
    fn act(&self, h: usize, obs: &Observation, rng: &mut SimRng) -> usize {
        sample_categorical(&self.probs(h, obs), rng)
    }

    fn tabular_policy(&self, n_states: usize) -> Option<Policy> {
        if self.feature_dim != n_states {
            return None;
        }
        let probs = (0..self.horizon)
            .flat_map(|h| (0..n_states).flat_map(move |s| self.probs(h, &Observation::State(s))))
            .collect();
        Policy::new(self.horizon, n_states, self.n_actions, probs).ok()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum BcPolicy {
    Tabular(Policy),
    Linear(LinearSoftmaxPolicy),
}

impl Actor for BcPolicy {
    fn act(&self, h: usize, obs: &Observation, rng: &mut SimRng) -> usize {
        match self {
            BcPolicy::Tabular(p) => p.act(h, obs, rng),
            BcPolicy::Linear(p) => p.act(h, obs, rng),
        }
    }

    fn tabular_policy(&self, n_states: usize) -> Option<Policy> {
        match self {
            BcPolicy::Tabular(p) => Some(p.clone()),
            BcPolicy::Linear(p) => p.tabular_policy(n_states),
        }
    }
}

fn majority(offline: &OfflineDataset, n_states: usize, n_actions: usize) -> Policy {
    let hn = offline.horizon();
    let mut counts = vec![0usize; hn * n_states * n_actions];
    for t in offline.iter() {
        counts[(t.h * n_states + t.s) * n_actions + t.a] += 1;
    }
    let mut probs = vec![0.0; counts.len()];
    for (row, c) in probs.chunks_mut(n_actions).zip(counts.chunks(n_actions)) {
        let best = *c.iter().max().expect("nonempty action set");
        if best == 0 {
            row.iter_mut().for_each(|p| *p = 1.0 / n_actions as f64);
        } else {
            row[c.iter().position(|&x| x == best).expect("max exists")] = 1.0;
        }
    }
    Policy::new(hn, n_states, n_actions, probs).expect("one-hot or uniform rows")
}

/// Fits a policy to the actions of `offline`.
pub fn behavior_cloning(env: &dyn Environment, offline: &OfflineDataset, mode: BcMode, seed: u64) -> Result<BcPolicy> {
    if offline.is_empty() {
        return Err(Error::InvalidArgument("behavior cloning needs a nonempty dataset".into()));
    }
    let mdp = env.latent();
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    match mode {
        BcMode::TabularMajority => Ok(BcPolicy::Tabular(majority(offline, ns, na))),
        BcMode::LinearSoftmax { steps, lr, batch_size } => {
            if batch_size == 0 || !(lr > 0.0) {
                return Err(Error::config("bc", "batch_size and lr must be positive"));
            }
            let replay = ReplayState::from_offline(env, offline, &mut seeded(derive_seed(seed, 4)))?;
            let feature_dim = if env.is_tabular() { ns } else { env.obs_dim().unwrap_or(ns) };
            let hn = mdp.horizon();
            let mut pi = LinearSoftmaxPolicy {
                horizon: hn,
                feature_dim,
                n_actions: na,
                weights: vec![0.0; hn * na * (feature_dim + 1)],
            };
            let w = pi.width();
            let mut rng = seeded(derive_seed(seed, 2));
            let mut probs = vec![0.0; na];
            for h in 0..hn {
                let data: Vec<(Vec<f64>, usize)> = replay.offline[h]
                    .iter()
                    .map(|t| (pi.features(&t.obs), t.action))
                    .collect();
                if data.is_empty() {
                    continue;
                }
                let block = h * na * w..(h + 1) * na * w;
                let mut adam = AdamState::new(na * w, lr);
                let mut grad = vec![0.0; na * w];
                for _ in 0..steps {
                    grad.iter_mut().for_each(|g| *g = 0.0);
                    for _ in 0..batch_size {
                        let (x, a) = &data[rng.random_range(0..data.len())];
                        pi.probs_from_features(h, x, &mut probs);
                        for b in 0..na {
                            let d = (probs[b] - if b == *a { 1.0 } else { 0.0 }) / batch_size as f64;
                            grad[b * w..(b + 1) * w].iter_mut().zip(x).for_each(|(g, xi)| *g += d * xi);
                        }
                    }
                    adam.step(&mut pi.weights[block.clone()], &grad);
                }
            }
            Ok(BcPolicy::Linear(pi))
        }
    }
}

/// Hy-Q without offline data; `config.epsilon` adds exploration noise.
pub fn online_fqi(env: &dyn Environment, config: &HyQConfig) -> Result<RunRecord> {
    let (mut record, _) = run_finite(env, &OfflineDataset::empty(env.horizon()), config)?;
    record.algorithm = "online_fqi".into();
    record.warnings.clear();
    Ok(record)
}
