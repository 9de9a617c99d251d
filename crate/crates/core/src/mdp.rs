//! Finite-horizon tabular MDPs and the exact dynamic-programming oracles
//! every learner in this crate is checked against.
//!
//! Indexing conventions: timesteps run over `0..horizon`, per-step
//! `(s, a)` tables are flattened row-major as `s * n_actions + a`, and the
//! value after the final step is identically zero.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::sample_categorical;

/// Tolerance on probability-vector sums after construction.
pub const PROB_TOL: f64 = 1e-12;
/// Rows whose sum is off by at most this much are renormalized; beyond it
/// they are rejected.
pub const NORMALIZE_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RewardDist {
    Deterministic { value: f64 },
    Bernoulli { p: f64 },
}

impl RewardDist {
    pub fn deterministic(value: f64) -> Self {
        RewardDist::Deterministic { value }
    }

    pub fn bernoulli(p: f64) -> Self {
        RewardDist::Bernoulli { p }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            RewardDist::Deterministic { value } => value,
            RewardDist::Bernoulli { p } => p,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            RewardDist::Deterministic { value } => value,
            RewardDist::Bernoulli { p } => {
                if rng.random::<f64>() < p {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    /// Whether `r` can be produced by this distribution.
    pub fn supports(&self, r: f64) -> bool {
        match *self {
            RewardDist::Deterministic { value } => r == value,
            RewardDist::Bernoulli { p } => (r == 1.0 && p > 0.0) || (r == 0.0 && p < 1.0),
        }
    }
}

/// One sampled step `(h, s, a, r, s')`. `s_next` is `None` for the final
/// step of an episode.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub h: usize,
    pub s: usize,
    pub a: usize,
    pub r: f64,
    pub s_next: Option<usize>,
}

/// Checks a probability vector, renormalizing small drift.
pub(crate) fn normalize_probs(v: &mut [f64], what: &str) -> Result<()> {
    if v.is_empty() {
        return Err(Error::InvalidDistribution(format!("{what}: empty vector")));
    }
    if let Some(x) = v.iter().find(|x| !x.is_finite() || **x < 0.0) {
        return Err(Error::InvalidDistribution(format!(
            "{what}: entry {x} is negative or not finite"
        )));
    }
    let sum: f64 = v.iter().sum();
    if (sum - 1.0).abs() > NORMALIZE_TOL {
        return Err(Error::InvalidDistribution(format!(
            "{what}: sums to {sum}, expected 1"
        )));
    }
    if (sum - 1.0).abs() > PROB_TOL {
        v.iter_mut().for_each(|x| *x /= sum);
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MdpDocument", into = "MdpDocument")]
pub struct TabularMdp {
    horizon: usize,
    n_states: usize,
    n_actions: usize,
    /// `[h][s][a][s']`
    transition: Vec<f64>,
    /// `[h][s][a]`
    rewards: Vec<RewardDist>,
    reward_means: Vec<f64>,
    init_dist: Vec<f64>,
    v_max: Option<f64>,
}

impl TabularMdp {
    /// Builds and validates an MDP from flat row-major tensors.
    pub fn new(
        horizon: usize,
        n_states: usize,
        n_actions: usize,
        mut transition: Vec<f64>,
        rewards: Vec<RewardDist>,
        mut init_dist: Vec<f64>,
    ) -> Result<Self> {
        if horizon == 0 || n_states == 0 || n_actions == 0 {
            return Err(Error::InvalidMdp(
                "horizon, n_states and n_actions must be positive".into(),
            ));
        }
        let cells = horizon * n_states * n_actions;
        if transition.len() != cells * n_states {
            return Err(Error::InvalidMdp(format!(
                "transition has {} entries, expected {}",
                transition.len(),
                cells * n_states
            )));
        }
        if rewards.len() != cells {
            return Err(Error::InvalidMdp(format!(
                "rewards has {} entries, expected {cells}",
                rewards.len()
            )));
        }
        if init_dist.len() != n_states {
            return Err(Error::InvalidMdp(format!(
                "init_dist has {} entries, expected {n_states}",
                init_dist.len()
            )));
        }
        for (i, row) in transition.chunks_mut(n_states).enumerate() {
            let (h, s, a) = (
                i / (n_states * n_actions),
                (i / n_actions) % n_states,
                i % n_actions,
            );
            normalize_probs(row, &format!("transition[{h}][{s}][{a}]"))
                .map_err(|e| Error::InvalidMdp(e.to_string()))?;
        }
        for (i, r) in rewards.iter().enumerate() {
            let m = r.mean();
            if !(0.0..=1.0).contains(&m) {
                return Err(Error::InvalidMdp(format!(
                    "reward {i} has mean {m} outside [0, 1]"
                )));
            }
        }
        normalize_probs(&mut init_dist, "init_dist").map_err(|e| Error::InvalidMdp(e.to_string()))?;
        let reward_means = rewards.iter().map(RewardDist::mean).collect();
        Ok(Self {
            horizon,
            n_states,
            n_actions,
            transition,
            rewards,
            reward_means,
            init_dist,
            v_max: None,
        })
    }

    /// Overrides the default value bound `H`.
    pub fn with_v_max(mut self, v_max: f64) -> Result<Self> {
        if !(v_max > 0.0 && v_max.is_finite()) {
            return Err(Error::InvalidMdp(format!("v_max must be positive, got {v_max}")));
        }
        self.v_max = Some(v_max);
        Ok(self)
    }

    /// Random instance: Dirichlet(1) transition rows and initial
    /// distribution, rewards alternating between deterministic and
    /// Bernoulli forms with uniform means.
    pub fn random<R: Rng + ?Sized>(
        n_states: usize,
        n_actions: usize,
        horizon: usize,
        rng: &mut R,
    ) -> Self {
        let simplex = |n: usize, rng: &mut R| -> Vec<f64> {
            let mut v: Vec<f64> = (0..n).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
            let s: f64 = v.iter().sum();
            v.iter_mut().for_each(|x| *x /= s);
            v
        };
        let cells = horizon * n_states * n_actions;
        let mut transition = Vec::with_capacity(cells * n_states);
        for _ in 0..cells {
            transition.extend(simplex(n_states, rng));
        }
        let rewards = (0..cells)
            .map(|_| {
                let m: f64 = rng.random();
                if rng.random::<bool>() {
                    RewardDist::deterministic(m)
                } else {
                    RewardDist::bernoulli(m)
                }
            })
            .collect();
        let init = simplex(n_states, rng);
        Self::new(horizon, n_states, n_actions, transition, rewards, init)
            .expect("random construction is valid")
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn init_dist(&self) -> &[f64] {
        &self.init_dist
    }

    /// Upper bound on any return; `H` unless overridden.
    pub fn v_max(&self) -> f64 {
        self.v_max.unwrap_or(self.horizon as f64)
    }

    fn cell(&self, h: usize, s: usize, a: usize) -> usize {
        debug_assert!(h < self.horizon && s < self.n_states && a < self.n_actions);
        (h * self.n_states + s) * self.n_actions + a
    }

    /// `P(. | s, a)` at step `h`.
    pub fn next_dist(&self, h: usize, s: usize, a: usize) -> &[f64] {
        let c = self.cell(h, s, a) * self.n_states;
        &self.transition[c..c + self.n_states]
    }

    pub fn reward(&self, h: usize, s: usize, a: usize) -> RewardDist {
        self.rewards[self.cell(h, s, a)]
    }

    pub fn mean_reward(&self, h: usize, s: usize, a: usize) -> f64 {
        self.reward_means[self.cell(h, s, a)]
    }

    /// Mean rewards at step `h`, flattened over `(s, a)`.
    pub fn mean_rewards_at(&self, h: usize) -> &[f64] {
        let w = self.n_states * self.n_actions;
        &self.reward_means[h * w..(h + 1) * w]
    }

    pub fn transition_tensor(&self) -> &[f64] {
        &self.transition
    }

    pub fn reward_table(&self) -> &[RewardDist] {
        &self.rewards
    }

    /// Draws `(r, s')` for one step; `s'` is `None` after the final step.
    pub fn step<R: Rng + ?Sized>(
        &self,
        h: usize,
        s: usize,
        a: usize,
        rng: &mut R,
    ) -> (f64, Option<usize>) {
        let r = self.reward(h, s, a).sample(rng);
        let next = if h + 1 < self.horizon {
            Some(sample_categorical(self.next_dist(h, s, a), rng))
        } else {
            None
        };
        (r, next)
    }

    pub fn sample_initial<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        sample_categorical(&self.init_dist, rng)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

#[derive(Serialize, Deserialize)]
struct MdpDocument {
    horizon: usize,
    n_states: usize,
    n_actions: usize,
    transition: Vec<Vec<Vec<Vec<f64>>>>,
    rewards: Vec<Vec<Vec<RewardDist>>>,
    init_dist: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    v_max: Option<f64>,
}

impl From<TabularMdp> for MdpDocument {
    fn from(m: TabularMdp) -> Self {
        let (hn, sn, an) = (m.horizon, m.n_states, m.n_actions);
        let transition = (0..hn)
            .map(|h| {
                (0..sn)
                    .map(|s| (0..an).map(|a| m.next_dist(h, s, a).to_vec()).collect())
                    .collect()
            })
            .collect();
        let rewards = (0..hn)
            .map(|h| {
                (0..sn)
                    .map(|s| (0..an).map(|a| m.reward(h, s, a)).collect())
                    .collect()
            })
            .collect();
        MdpDocument {
            horizon: hn,
            n_states: sn,
            n_actions: an,
            transition,
            rewards,
            init_dist: m.init_dist,
            v_max: m.v_max,
        }
    }
}

impl TryFrom<MdpDocument> for TabularMdp {
    type Error = Error;

    fn try_from(d: MdpDocument) -> Result<Self> {
        let shape_err = || Error::InvalidMdp("nested array shape does not match dimensions".into());
        if d.transition.len() != d.horizon || d.rewards.len() != d.horizon {
            return Err(shape_err());
        }
        let mut transition = Vec::new();
        for per_s in &d.transition {
            if per_s.len() != d.n_states {
                return Err(shape_err());
            }
            for per_a in per_s {
                if per_a.len() != d.n_actions || per_a.iter().any(|row| row.len() != d.n_states) {
                    return Err(shape_err());
                }
                per_a.iter().for_each(|row| transition.extend_from_slice(row));
            }
        }
        let mut rewards = Vec::new();
        for per_s in &d.rewards {
            if per_s.len() != d.n_states || per_s.iter().any(|r| r.len() != d.n_actions) {
                return Err(shape_err());
            }
            per_s.iter().for_each(|r| rewards.extend_from_slice(r));
        }
        let mdp = TabularMdp::new(d.horizon, d.n_states, d.n_actions, transition, rewards, d.init_dist)?;
        match d.v_max {
            Some(v) => mdp.with_v_max(v),
            None => Ok(mdp),
        }
    }
}

/// Per-`(h, s, a)` value table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QTable {
    pub horizon: usize,
    pub n_states: usize,
    pub n_actions: usize,
    pub values: Vec<f64>,
}

impl QTable {
    pub fn zeros(horizon: usize, n_states: usize, n_actions: usize) -> Self {
        Self::constant(horizon, n_states, n_actions, 0.0)
    }

    pub fn constant(horizon: usize, n_states: usize, n_actions: usize, c: f64) -> Self {
        Self {
            horizon,
            n_states,
            n_actions,
            values: vec![c; horizon * n_states * n_actions],
        }
    }

    pub fn for_mdp(mdp: &TabularMdp) -> Self {
        Self::zeros(mdp.horizon(), mdp.n_states(), mdp.n_actions())
    }

    pub fn from_fn(
        horizon: usize,
        n_states: usize,
        n_actions: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut values = Vec::with_capacity(horizon * n_states * n_actions);
        for h in 0..horizon {
            for s in 0..n_states {
                for a in 0..n_actions {
                    values.push(f(h, s, a));
                }
            }
        }
        Self {
            horizon,
            n_states,
            n_actions,
            values,
        }
    }

    fn width(&self) -> usize {
        self.n_states * self.n_actions
    }

    pub fn get(&self, h: usize, s: usize, a: usize) -> f64 {
        self.values[h * self.width() + s * self.n_actions + a]
    }

    pub fn set(&mut self, h: usize, s: usize, a: usize, v: f64) {
        let w = self.width();
        self.values[h * w + s * self.n_actions + a] = v;
    }

    /// All `(s, a)` values at step `h`.
    pub fn slice(&self, h: usize) -> &[f64] {
        let w = self.width();
        &self.values[h * w..(h + 1) * w]
    }

    pub fn slice_mut(&mut self, h: usize) -> &mut [f64] {
        let w = self.width();
        &mut self.values[h * w..(h + 1) * w]
    }

    pub fn row(&self, h: usize, s: usize) -> &[f64] {
        let start = h * self.width() + s * self.n_actions;
        &self.values[start..start + self.n_actions]
    }

    pub fn max_at(&self, h: usize, s: usize) -> f64 {
        self.row(h, s).iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Stochastic Markov policy: a distribution over actions for every `(h, s)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    horizon: usize,
    n_states: usize,
    n_actions: usize,
    probs: Vec<f64>,
}

impl Policy {
    pub fn new(horizon: usize, n_states: usize, n_actions: usize, mut probs: Vec<f64>) -> Result<Self> {
        if probs.len() != horizon * n_states * n_actions {
            return Err(Error::InvalidPolicy(format!(
                "expected {} entries, got {}",
                horizon * n_states * n_actions,
                probs.len()
            )));
        }
        for (i, row) in probs.chunks_mut(n_actions).enumerate() {
            normalize_probs(row, &format!("policy row ({}, {})", i / n_states, i % n_states))
                .map_err(|e| Error::InvalidPolicy(e.to_string()))?;
        }
        Ok(Self {
            horizon,
            n_states,
            n_actions,
            probs,
        })
    }

    /// Deterministic policy choosing `choose(h, s)`.
    pub fn deterministic(
        horizon: usize,
        n_states: usize,
        n_actions: usize,
        mut choose: impl FnMut(usize, usize) -> usize,
    ) -> Self {
        let mut probs = vec![0.0; horizon * n_states * n_actions];
        for h in 0..horizon {
            for s in 0..n_states {
                let a = choose(h, s);
                assert!(a < n_actions, "action {a} out of range");
                probs[(h * n_states + s) * n_actions + a] = 1.0;
            }
        }
        Self {
            horizon,
            n_states,
            n_actions,
            probs,
        }
    }

    pub fn uniform(horizon: usize, n_states: usize, n_actions: usize) -> Self {
        Self {
            horizon,
            n_states,
            n_actions,
            probs: vec![1.0 / n_actions as f64; horizon * n_states * n_actions],
        }
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn probs(&self, h: usize, s: usize) -> &[f64] {
        let start = (h * self.n_states + s) * self.n_actions;
        &self.probs[start..start + self.n_actions]
    }

    pub fn set_row(&mut self, h: usize, s: usize, row: &[f64]) -> Result<()> {
        let mut row = row.to_vec();
        normalize_probs(&mut row, "policy row").map_err(|e| Error::InvalidPolicy(e.to_string()))?;
        let start = (h * self.n_states + s) * self.n_actions;
        self.probs[start..start + self.n_actions].copy_from_slice(&row);
        Ok(())
    }

    /// The action if the row at `(h, s)` is one-hot.
    pub fn action(&self, h: usize, s: usize) -> Option<usize> {
        self.probs(h, s).iter().position(|&p| p == 1.0)
    }

    pub fn sample<R: Rng + ?Sized>(&self, h: usize, s: usize, rng: &mut R) -> usize {
        match self.action(h, s) {
            Some(a) => a,
            None => sample_categorical(self.probs(h, s), rng),
        }
    }

    fn check_compatible(&self, mdp: &TabularMdp) {
        assert!(
            self.horizon == mdp.horizon()
                && self.n_states == mdp.n_states()
                && self.n_actions == mdp.n_actions(),
            "policy shape ({}, {}, {}) does not match MDP ({}, {}, {})",
            self.horizon,
            self.n_states,
            self.n_actions,
            mdp.horizon(),
            mdp.n_states(),
            mdp.n_actions()
        );
    }
}

/// State-action occupancy `d_h^pi` for every step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OccupancyMeasure {
    pub n_states: usize,
    pub n_actions: usize,
    /// `[h][s * n_actions + a]`
    pub per_step: Vec<Vec<f64>>,
}

impl OccupancyMeasure {
    pub fn horizon(&self) -> usize {
        self.per_step.len()
    }

    pub fn get(&self, h: usize, s: usize, a: usize) -> f64 {
        self.per_step[h][s * self.n_actions + a]
    }

    pub fn slice(&self, h: usize) -> &[f64] {
        &self.per_step[h]
    }

    pub fn state_marginal(&self, h: usize) -> Vec<f64> {
        self.per_step[h]
            .chunks(self.n_actions)
            .map(|row| row.iter().sum())
            .collect()
    }
}

/// `(T f)_h(s, a) = E[R] + sum_s' P(s'|s,a) max_a' f_{h+1}(s', a')`.
///
/// `f_next` holds the step-`h+1` values flattened over `(s, a)` and is
/// ignored at the final step, where the continuation value is zero.
pub fn bellman_backup(mdp: &TabularMdp, h: usize, f_next: &[f64]) -> Vec<f64> {
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    assert!(h < mdp.horizon(), "step {h} beyond horizon");
    let cont: Vec<f64> = if h + 1 < mdp.horizon() {
        assert_eq!(f_next.len(), ns * na, "f_next must cover every (s, a)");
        f_next
            .chunks(na)
            .map(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect()
    } else {
        vec![0.0; ns]
    };
    let mut out = Vec::with_capacity(ns * na);
    for s in 0..ns {
        for a in 0..na {
            let p = mdp.next_dist(h, s, a);
            let ev: f64 = p.iter().zip(&cont).map(|(p, v)| p * v).sum();
            out.push(mdp.mean_reward(h, s, a) + ev);
        }
    }
    out
}

/// Backward induction: returns `(Q*, V*)`, with `V*` indexed `[h][s]`.
pub fn value_iteration(mdp: &TabularMdp) -> (QTable, Vec<Vec<f64>>) {
    let (hn, ns, na) = (mdp.horizon(), mdp.n_states(), mdp.n_actions());
    let mut q = QTable::for_mdp(mdp);
    let mut v = vec![vec![0.0; ns]; hn];
    let mut next = vec![0.0; ns * na];
    for h in (0..hn).rev() {
        let backed = bellman_backup(mdp, h, &next);
        q.slice_mut(h).copy_from_slice(&backed);
        for s in 0..ns {
            v[h][s] = q.max_at(h, s);
        }
        next = backed;
    }
    (q, v)
}

/// Backward policy evaluation: returns `(Q^pi, V^pi)`.
pub fn evaluate_policy(mdp: &TabularMdp, pi: &Policy) -> (QTable, Vec<Vec<f64>>) {
    pi.check_compatible(mdp);
    let (hn, ns, na) = (mdp.horizon(), mdp.n_states(), mdp.n_actions());
    let mut q = QTable::for_mdp(mdp);
    let mut v = vec![vec![0.0; ns]; hn + 1];
    for h in (0..hn).rev() {
        for s in 0..ns {
            for a in 0..na {
                let ev: f64 = mdp
                    .next_dist(h, s, a)
                    .iter()
                    .zip(&v[h + 1])
                    .map(|(p, v)| p * v)
                    .sum();
                let cont = if h + 1 < hn { ev } else { 0.0 };
                q.set(h, s, a, mdp.mean_reward(h, s, a) + cont);
            }
            v[h][s] = pi.probs(h, s).iter().zip(q.row(h, s)).map(|(p, q)| p * q).sum();
        }
    }
    v.truncate(hn);
    (q, v)
}

/// Forward recursion `d_0 = d0 x pi_0`, `d_{h+1}(s') = sum d_h(s,a) P(s'|s,a)`.
pub fn occupancy(mdp: &TabularMdp, pi: &Policy) -> OccupancyMeasure {
    pi.check_compatible(mdp);
    let (hn, ns, na) = (mdp.horizon(), mdp.n_states(), mdp.n_actions());
    let mut per_step = Vec::with_capacity(hn);
    let mut marginal = mdp.init_dist().to_vec();
    for h in 0..hn {
        let mut d = vec![0.0; ns * na];
        for s in 0..ns {
            for (a, p) in pi.probs(h, s).iter().enumerate() {
                d[s * na + a] = marginal[s] * p;
            }
        }
        if h + 1 < hn {
            let mut next = vec![0.0; ns];
            for s in 0..ns {
                for a in 0..na {
                    let w = d[s * na + a];
                    if w == 0.0 {
                        continue;
                    }
                    for (n, p) in next.iter_mut().zip(mdp.next_dist(h, s, a)) {
                        *n += w * p;
                    }
                }
            }
            marginal = next;
        }
        per_step.push(d);
    }
    OccupancyMeasure {
        n_states: ns,
        n_actions: na,
        per_step,
    }
}

/// `V^pi = sum_h <d_h^pi, mean rewards>`.
pub fn policy_value(mdp: &TabularMdp, pi: &Policy) -> f64 {
    let occ = occupancy(mdp, pi);
    (0..mdp.horizon())
        .map(|h| {
            occ.slice(h)
                .iter()
                .zip(mdp.mean_rewards_at(h))
                .map(|(d, r)| d * r)
                .sum::<f64>()
        })
        .sum()
}

/// Expectation of a per-state quantity under the initial distribution.
pub fn expect_initial(mdp: &TabularMdp, values: &[f64]) -> f64 {
    mdp.init_dist().iter().zip(values).map(|(p, v)| p * v).sum()
}

/// Rolls out one episode of exactly `H` steps.
pub fn sample_episode<R: Rng + ?Sized>(mdp: &TabularMdp, pi: &Policy, rng: &mut R) -> Vec<Transition> {
    pi.check_compatible(mdp);
    let mut s = mdp.sample_initial(rng);
    let mut out = Vec::with_capacity(mdp.horizon());
    for h in 0..mdp.horizon() {
        let a = pi.sample(h, s, rng);
        let (r, next) = mdp.step(h, s, a, rng);
        out.push(Transition { h, s, a, r, s_next: next });
        if let Some(n) = next {
            s = n;
        }
    }
    out
}
