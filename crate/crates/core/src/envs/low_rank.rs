//! Random low-rank MDPs, `P_h(s' | s, a) = mu_h(s')^T phi_h(s, a)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{RewardDist, TabularMdp};
use crate::rng::seeded;

const MAX_ATTEMPTS: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LowRankFactors {
    pub d: usize,
    pub horizon: usize,
    pub n_states: usize,
    pub n_actions: usize,
    /// `[h][s][a][k]`
    pub phi: Vec<f64>,
    /// `[h][s'][k]`
    pub mu: Vec<f64>,
    pub seed: Option<u64>,
}

impl LowRankFactors {
    pub fn phi(&self, h: usize, s: usize, a: usize) -> &[f64] {
        let i = ((h * self.n_states + s) * self.n_actions + a) * self.d;
        &self.phi[i..i + self.d]
    }

    pub fn mu(&self, h: usize, s_next: usize) -> &[f64] {
        let i = (h * self.n_states + s_next) * self.d;
        &self.mu[i..i + self.d]
    }

    /// The transition tensor `[h][s][a][s']` implied by the factors.
    pub fn reconstruct(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.horizon * self.n_states * self.n_actions * self.n_states);
        for h in 0..self.horizon {
            for s in 0..self.n_states {
                for a in 0..self.n_actions {
                    let phi = self.phi(h, s, a);
                    for sn in 0..self.n_states {
                        out.push(phi.iter().zip(self.mu(h, sn)).map(|(x, y)| x * y).sum());
                    }
                }
            }
        }
        out
    }

    /// Rank-`|S|` factorization of an arbitrary MDP: `phi(s, a) = P(. | s, a)`
    /// and `mu(s') = e_{s'}`.
    pub fn identity(mdp: &TabularMdp) -> Self {
        let ns = mdp.n_states();
        let phi = mdp.transition_tensor().to_vec();
        let mut mu = vec![0.0; mdp.horizon() * ns * ns];
        for h in 0..mdp.horizon() {
            for s in 0..ns {
                mu[(h * ns + s) * ns + s] = 1.0;
            }
        }
        Self {
            d: ns,
            horizon: mdp.horizon(),
            n_states: ns,
            n_actions: mdp.n_actions(),
            phi,
            mu,
            seed: None,
        }
    }
}

fn simplex<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Option<Vec<f64>> {
    let mut v: Vec<f64> = (0..n).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
    let s: f64 = v.iter().sum();
    if !(s.is_finite() && s > 1e-12) {
        return None;
    }
    v.iter_mut().for_each(|x| *x /= s);
    Some(v)
}

fn draw<R: Rng + ?Sized>(
    d: usize,
    ns: usize,
    na: usize,
    hn: usize,
    rng: &mut R,
) -> Option<(Vec<f64>, Vec<f64>)> {
    // phi on the simplex keeps ||phi||_2 <= ||phi||_1 = 1 with no
    // compensation needed in mu; each mu column is a distribution over s'
    let mut phi = Vec::with_capacity(hn * ns * na * d);
    for _ in 0..hn * ns * na {
        phi.extend(simplex(d, rng)?);
    }
    let mut mu = vec![0.0; hn * ns * d];
    for h in 0..hn {
        for k in 0..d {
            let col = simplex(ns, rng)?;
            for (sn, p) in col.into_iter().enumerate() {
                mu[(h * ns + sn) * d + k] = p;
            }
        }
    }
    Some((phi, mu))
}

pub fn make_low_rank(
    d: usize,
    n_states: usize,
    n_actions: usize,
    horizon: usize,
    seed: u64,
) -> Result<(TabularMdp, LowRankFactors)> {
    if d == 0 || d > n_states {
        return Err(Error::InvalidArgument(format!(
            "rank d = {d} must lie in [1, n_states = {n_states}]"
        )));
    }
    let mut rng = seeded(seed);
    for _ in 0..MAX_ATTEMPTS {
        let Some((phi, mu)) = draw(d, n_states, n_actions, horizon, &mut rng) else {
            continue;
        };
        let factors = LowRankFactors {
            d,
            horizon,
            n_states,
            n_actions,
            phi,
            mu,
            seed: Some(seed),
        };
        let rewards = (0..horizon * n_states * n_actions)
            .map(|_| RewardDist::deterministic(rng.random()))
            .collect();
        let mut init = vec![0.0; n_states];
        init[rng.random_range(0..n_states)] = 1.0;
        match TabularMdp::new(horizon, n_states, n_actions, factors.reconstruct(), rewards, init) {
            Ok(mdp) => return Ok((mdp, factors)),
            Err(_) => continue,
        }
    }
    Err(Error::DegenerateFactors(MAX_ATTEMPTS))
}
