use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::finite::ObsTransition;
use super::{greedy_action, ClassSelector, RunRecord, RunRow, TieBreak};
use crate::datasets::OfflineDataset;
use crate::envs::{Environment, Observation};
use crate::error::{Error, Result};
use crate::function_approx::{build_class, clip, ClassContext, Sample, StepModel};
use crate::rng::{derive_seed, seeded, SimRng};

/// Straight line from `start` to `end` over the run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearSchedule {
    pub start: f64,
    pub end: f64,
}

impl LinearSchedule {
    pub fn constant(v: f64) -> Self {
        Self { start: v, end: v }
    }

    /// Value at fraction `frac` of the run, clamped to `[0, 1]`.
    pub fn at(&self, frac: f64) -> f64 {
        let frac = frac.clamp(0.0, 1.0);
        self.start * (1.0 - frac) + self.end * frac
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscountedConfig {
    pub gamma: f64,
    /// One gradient step every `n_value` environment steps.
    pub n_value: u64,
    /// Target refresh every `n_target` environment steps.
    pub n_target: u64,
    pub epsilon: LinearSchedule,
    /// Probability that a minibatch is drawn from the offline buffer.
    pub beta: LinearSchedule,
    pub lr: LinearSchedule,
    pub buffer_capacity: usize,
    pub total_steps: u64,
    pub batch_size: usize,
    pub function_class: ClassSelector,
    /// Episodes in the return moving average.
    pub return_window: usize,
    /// A record row every this many environment steps.
    pub record_every: u64,
    pub seed: u64,
}

impl Default for DiscountedConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            n_value: 4,
            n_target: 10_000,
            epsilon: LinearSchedule { start: 0.25, end: 0.001 },
            beta: LinearSchedule { start: 0.2, end: 0.01 },
            lr: LinearSchedule { start: 1e-4, end: 1e-5 },
            buffer_capacity: 1 << 20,
            total_steps: 100_000,
            batch_size: 32,
            function_class: ClassSelector::default(),
            return_window: 100,
            record_every: 1_000,
            seed: 0,
        }
    }
}

impl DiscountedConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma < 1.0) {
            return Err(Error::config("gamma", "must lie in [0, 1)"));
        }
        let beta_min = self.beta.start.min(self.beta.end);
        if !(beta_min > 0.0 && self.beta.start.max(self.beta.end) <= 1.0) {
            return Err(Error::config("beta", "schedule must stay inside (0, 1]"));
        }
        for (name, s) in [("epsilon", self.epsilon), ("lr", self.lr)] {
            if !(s.start >= 0.0 && s.end >= 0.0 && s.start.max(s.end) <= 1.0) {
                return Err(Error::config(name, "schedule must stay inside [0, 1]"));
            }
        }
        if self.n_value == 0 || self.n_target == 0 || self.batch_size == 0 || self.buffer_capacity == 0 {
            return Err(Error::config(
                "discounted",
                "n_value, n_target, batch_size and buffer_capacity must be >= 1",
            ));
        }
        if self.return_window == 0 || self.record_every == 0 {
            return Err(Error::config("discounted", "return_window and record_every must be >= 1"));
        }
        Ok(())
    }
}

/// `r + gamma * next_max`, with no continuation at episode end.
pub fn discounted_target(r: f64, gamma: f64, next_max: Option<f64>) -> f64 {
    r + next_max.map_or(0.0, |v| gamma * v)
}

/// Step-by-step discounted Hy-Q learner with a single network shared across
/// steps. Tabular latent states are indexed by `(h, s)` so the network sees
/// a stationary problem.
pub struct DiscountedHyQ<'e> {
    env: &'e dyn Environment,
    config: DiscountedConfig,
    model: Box<dyn StepModel>,
    target: Box<dyn StepModel>,
    offline: Vec<ObsTransition>,
    online: VecDeque<ObsTransition>,
    rng: SimRng,
    v_max: f64,
    steps: u64,
    updates: u64,
    h: usize,
    s: usize,
    obs: Observation,
    episode_return: f64,
    returns: VecDeque<f64>,
    scratch: Vec<f64>,
}

impl<'e> DiscountedHyQ<'e> {
    pub fn new(env: &'e dyn Environment, offline: &OfflineDataset, config: DiscountedConfig) -> Result<Self> {
        config.validate()?;
        let mdp = env.latent();
        let mut ctx = ClassContext::from_env(env);
        if env.is_tabular() {
            ctx.n_states = mdp.horizon() * mdp.n_states();
        }
        let class = build_class(&config.function_class.name, &config.function_class.params, &ctx)?;
        let model = class.build(0, &mut seeded(derive_seed(config.seed, 0)))?;
        let target = model.clone_box();
        let mut obs_rng = seeded(derive_seed(config.seed, 4));
        let mut offline_obs = Vec::with_capacity(offline.len());
        if offline.horizon() != mdp.horizon() && !offline.is_empty() {
            return Err(Error::InvalidArgument("offline data horizon does not match environment".into()));
        }
        for t in offline.iter() {
            offline_obs.push(ObsTransition {
                obs: observe_indexed(env, t.h, t.s, &mut obs_rng),
                action: t.a,
                reward: t.r,
                next: t.s_next.map(|sn| observe_indexed(env, t.h + 1, sn, &mut obs_rng)),
            });
        }
        let mut rng = seeded(derive_seed(config.seed, 1));
        let s = mdp.sample_initial(&mut rng);
        let obs = observe_indexed(env, 0, s, &mut rng);
        Ok(Self {
            env,
            model,
            target,
            offline: offline_obs,
            online: VecDeque::new(),
            rng,
            v_max: mdp.v_max(),
            steps: 0,
            updates: 0,
            h: 0,
            s,
            obs,
            episode_return: 0.0,
            returns: VecDeque::new(),
            scratch: vec![0.0; mdp.n_actions()],
            config,
        })
    }

    fn frac(&self) -> f64 {
        self.steps as f64 / self.config.total_steps.max(1) as f64
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn online_len(&self) -> usize {
        self.online.len()
    }

    pub fn model(&self) -> &dyn StepModel {
        self.model.as_ref()
    }

    /// Current offline-minibatch probability; zero without offline data.
    pub fn beta(&self) -> f64 {
        if self.offline.is_empty() {
            0.0
        } else {
            self.config.beta.at(self.frac())
        }
    }

    /// `max_a' target(obs, a')`, clipped.
    pub fn target_max(&self, obs: &Observation) -> f64 {
        let mut q = vec![0.0; self.scratch.len()];
        self.target.q_values(obs, &mut q);
        q.iter().map(|&v| clip(v, self.v_max)).fold(f64::NEG_INFINITY, f64::max)
    }

    /// One epsilon-greedy environment step.
    pub fn env_step(&mut self) {
        let mdp = self.env.latent();
        let eps = self.config.epsilon.at(self.frac());
        let a = if self.rng.random::<f64>() < eps {
            self.rng.random_range(0..mdp.n_actions())
        } else {
            self.model.q_values(&self.obs, &mut self.scratch);
            for q in self.scratch.iter_mut() {
                *q = clip(*q, self.v_max);
            }
            greedy_action(&self.scratch, &TieBreak::LowestIndex, self.h, None, &mut self.rng)
        };
        let (r, sn) = mdp.step(self.h, self.s, a, &mut self.rng);
        self.steps += 1;
        self.episode_return += r;
        let next = sn.map(|sn| observe_indexed(self.env, self.h + 1, sn, &mut self.rng));
        if self.online.len() == self.config.buffer_capacity {
            self.online.pop_front();
        }
        let obs = std::mem::replace(&mut self.obs, Observation::State(0));
        self.online.push_back(ObsTransition {
            obs,
            action: a,
            reward: r,
            next: next.clone(),
        });
        match (sn, next) {
            (Some(sn), Some(o)) => {
                self.h += 1;
                self.s = sn;
                self.obs = o;
            }
            _ => {
                if self.returns.len() == self.config.return_window {
                    self.returns.pop_front();
                }
                self.returns.push_back(self.episode_return);
                self.episode_return = 0.0;
                self.h = 0;
                self.s = mdp.sample_initial(&mut self.rng);
                self.obs = observe_indexed(self.env, 0, self.s, &mut self.rng);
            }
        }
    }

    /// One gradient step on a minibatch from the offline buffer (with
    /// probability beta) or the online buffer.
    pub fn update(&mut self) {
        let use_offline = self.online.is_empty() || (!self.offline.is_empty() && self.rng.random::<f64>() < self.beta());
        let n = if use_offline { self.offline.len() } else { self.online.len() };
        if n == 0 {
            return;
        }
        let idx: Vec<usize> = (0..self.config.batch_size).map(|_| self.rng.random_range(0..n)).collect();
        let pick = |i: usize| if use_offline { &self.offline[i] } else { &self.online[i] };
        let targets: Vec<f64> = idx
            .iter()
            .map(|&i| {
                let t = pick(i);
                discounted_target(t.reward, self.config.gamma, t.next.as_ref().map(|o| self.target_max(o)))
            })
            .collect();
        let lr = self.config.lr.at(self.frac());
        let buffer: Vec<&ObsTransition> = if use_offline {
            idx.iter().map(|&i| &self.offline[i]).collect()
        } else {
            idx.iter().map(|&i| &self.online[i]).collect()
        };
        let batch: Vec<Sample<'_>> = buffer
            .iter()
            .zip(&targets)
            .map(|(t, &y)| Sample {
                obs: &t.obs,
                action: t.action,
                target: y,
            })
            .collect();
        self.model.gradient_step(&batch, lr);
        self.updates += 1;
    }

    pub fn refresh_target(&mut self) {
        self.target = self.model.clone_box();
    }

    pub fn moving_average_return(&self) -> Option<f64> {
        (!self.returns.is_empty()).then(|| self.returns.iter().sum::<f64>() / self.returns.len() as f64)
    }

    pub fn run(mut self) -> Result<RunRecord> {
        let mut record = RunRecord::new("hyq_discounted", serde_json::to_value(&self.config)?);
        if self.offline.is_empty() {
            record.warnings.push("offline dataset is empty; beta forced to 0".into());
        }
        let offline_samples = self.offline.len() as u64;
        while self.steps < self.config.total_steps {
            self.env_step();
            if self.steps % self.config.n_value == 0 {
                self.update();
            }
            if self.steps % self.config.n_target == 0 {
                self.refresh_target();
            }
            if self.steps % self.config.record_every == 0 || self.steps == self.config.total_steps {
                if let Some(avg) = self.moving_average_return() {
                    record.rows.push(RunRow {
                        iter: record.rows.len() + 1,
                        online_steps: self.steps,
                        offline_samples,
                        eval_return: avg,
                        bellman_residual_offline: None,
                        bellman_residual_online: None,
                    });
                }
            }
        }
        Ok(record)
    }
}

fn observe_indexed(env: &dyn Environment, h: usize, s: usize, rng: &mut SimRng) -> Observation {
    if env.is_tabular() {
        Observation::State(h.min(env.horizon() - 1) * env.latent().n_states() + s)
    } else {
        env.observe(h, s, rng)
    }
}

pub fn hyq_discounted(env: &dyn Environment, offline: &OfflineDataset, config: &DiscountedConfig) -> Result<RunRecord> {
    DiscountedHyQ::new(env, offline, config.clone())?.run()
}
