use std::any::Any;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{clip, ClassContext, FunctionClass, RegressionSet, Sample, StepModel};
use crate::envs::Observation;
use crate::error::Result;
use crate::mdp::Transition;
use crate::rng::SimRng;

/// Value given to `(s, a)` cells with no data.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnvisitedDefault {
    #[default]
    Zero,
    /// Optimistic: `V_max`.
    VMax,
}

impl UnvisitedDefault {
    pub fn value(self, v_max: f64) -> f64 {
        match self {
            UnvisitedDefault::Zero => 0.0,
            UnvisitedDefault::VMax => v_max,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TabularParams {
    pub unvisited: UnvisitedDefault,
}

/// One value per `(s, a)`; `fit` sets each visited cell to the mean of its
/// targets, which is the exact squared-loss minimizer.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularStep {
    pub n_states: usize,
    pub n_actions: usize,
    pub default_value: f64,
    pub values: Vec<f64>,
}

impl TabularStep {
    pub fn new(n_states: usize, n_actions: usize, default_value: f64) -> Self {
        Self {
            n_states,
            n_actions,
            default_value,
            values: vec![default_value; n_states * n_actions],
        }
    }

    fn state_of(obs: &Observation) -> usize {
        obs.state().expect("tabular class needs state observations")
    }

    fn fit_cells(&mut self, samples: impl Iterator<Item = (usize, usize, f64)>) {
        let cells = self.n_states * self.n_actions;
        let mut sums = vec![0.0; cells];
        let mut counts = vec![0usize; cells];
        for (s, a, y) in samples {
            let i = s * self.n_actions + a;
            sums[i] += y;
            counts[i] += 1;
        }
        for i in 0..cells {
            self.values[i] = if counts[i] > 0 {
                sums[i] / counts[i] as f64
            } else {
                self.default_value
            };
        }
    }
}

impl StepModel for TabularStep {
    fn kind(&self) -> &'static str {
        "tabular"
    }

    fn n_actions(&self) -> usize {
        self.n_actions
    }

    fn q_values(&self, obs: &Observation, out: &mut [f64]) {
        let s = Self::state_of(obs);
        out.copy_from_slice(&self.values[s * self.n_actions..(s + 1) * self.n_actions]);
    }

    fn fit(&mut self, data: &RegressionSet<'_>, _rng: &mut SimRng) -> Result<()> {
        self.fit_cells(data.iter().map(|x| (Self::state_of(x.obs), x.action, x.target)));
        Ok(())
    }

    fn gradient_step(&mut self, batch: &[Sample<'_>], lr: f64) {
        let scale = 2.0 / batch.len() as f64;
        let mut grad = vec![0.0; self.values.len()];
        for x in batch {
            let i = Self::state_of(x.obs) * self.n_actions + x.action;
            grad[i] += scale * (self.values[i] - x.target);
        }
        for (v, g) in self.values.iter_mut().zip(grad) {
            *v -= lr * g;
        }
    }

    fn clone_box(&self) -> Box<dyn StepModel> {
        Box::new(self.clone())
    }

    fn checkpoint(&self) -> Value {
        json!({
            "kind": "tabular",
            "n_states": self.n_states,
            "n_actions": self.n_actions,
            "values": self.values,
        })
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}

/// One tabular least-squares step on transitions at step `h`.
///
/// Targets are `r + max_a' clip(f_next(s', a'))`, with `f_next` laid out
/// `[s'][a']`; `None` (or a terminal transition) means a zero continuation.
/// Returns the `[s][a]` slice.
pub fn tabular_fqi_step(
    buffer: &[Transition],
    f_next: Option<&[f64]>,
    n_states: usize,
    n_actions: usize,
    v_max: f64,
    default_value: f64,
) -> Vec<f64> {
    let mut step = TabularStep::new(n_states, n_actions, default_value);
    step.fit_cells(buffer.iter().map(|t| {
        let cont = match (f_next, t.s_next) {
            (Some(f), Some(sn)) => f[sn * n_actions..(sn + 1) * n_actions]
                .iter()
                .map(|&q| clip(q, v_max))
                .fold(f64::NEG_INFINITY, f64::max),
            _ => 0.0,
        };
        (t.s, t.a, t.r + cont)
    }));
    step.values
}

pub struct TabularClass {
    n_states: usize,
    n_actions: usize,
    default_value: f64,
}

impl TabularClass {
    pub fn new(ctx: &ClassContext, params: TabularParams) -> Self {
        Self {
            n_states: ctx.n_states,
            n_actions: ctx.n_actions,
            default_value: params.unvisited.value(ctx.v_max),
        }
    }
}

impl FunctionClass for TabularClass {
    fn name(&self) -> &'static str {
        "tabular"
    }

    fn build(&self, _h: usize, _rng: &mut SimRng) -> Result<Box<dyn StepModel>> {
        // f^1 = default everywhere (zero unless optimistic)
        Ok(Box::new(TabularStep::new(self.n_states, self.n_actions, self.default_value)))
    }

    fn is_exact(&self) -> bool {
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand::Rng;

    fn t(s: usize, a: usize, r: f64, sn: Option<usize>) -> Transition {
        Transition { h: 0, s, a, r, s_next: sn }
    }

    #[test]
    fn single_tuple_and_mean() {
        let v = tabular_fqi_step(&[t(1, 0, 0.7, Some(0))], None, 2, 2, 1.0, 0.0);
        assert_eq!(v, vec![0.0, 0.0, 0.7, 0.0]);
        let v = tabular_fqi_step(&[t(0, 1, 0.0, None), t(0, 1, 1.0, None)], None, 1, 2, 1.0, -3.0);
        assert_eq!(v, vec![-3.0, 0.5]);
    }

    #[test]
    fn continuation_uses_clipped_max() {
        let f_next = [5.0, -1.0, 0.2, 0.3];
        let buf = [t(0, 0, 0.5, Some(0)), t(0, 1, 0.0, Some(1))];
        let v = tabular_fqi_step(&buf, Some(&f_next), 2, 2, 2.0, 0.0);
        assert_eq!(v[0], 2.5);
        assert_eq!(v[1], 0.3);
    }

    #[test]
    fn beats_random_candidate_tables() {
        let mut rng = seeded(4);
        let (ns, na) = (4, 3);
        let f_next: Vec<f64> = (0..ns * na).map(|_| rng.random()).collect();
        let buf: Vec<Transition> = (0..60)
            .map(|_| {
                t(
                    rng.random_range(0..ns),
                    rng.random_range(0..na),
                    rng.random(),
                    Some(rng.random_range(0..ns)),
                )
            })
            .collect();
        let targets: Vec<f64> = buf
            .iter()
            .map(|x| {
                let sn = x.s_next.unwrap();
                x.r + f_next[sn * na..(sn + 1) * na].iter().cloned().fold(0.0, f64::max)
            })
            .collect();
        let loss = |v: &[f64]| -> f64 {
            buf.iter()
                .zip(&targets)
                .map(|(x, y)| (v[x.s * na + x.a] - y).powi(2))
                .sum()
        };
        let fit = tabular_fqi_step(&buf, Some(&f_next), ns, na, 1.0, 0.0);
        let best = loss(&fit);
        for _ in 0..1000 {
            let cand: Vec<f64> = (0..ns * na).map(|_| 2.0 * rng.random::<f64>()).collect();
            assert!(best <= loss(&cand));
        }
        // per-cell mean recomputation
        for cell in 0..ns * na {
            let ys: Vec<f64> = buf
                .iter()
                .zip(&targets)
                .filter(|(x, _)| x.s * na + x.a == cell)
                .map(|(_, y)| *y)
                .collect();
            if !ys.is_empty() {
                let mean = ys.iter().sum::<f64>() / ys.len() as f64;
                assert!((fit[cell] - mean).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn fit_via_trait_matches_free_function() {
        let obs: Vec<Observation> = (0..3).map(Observation::State).collect();
        let data = RegressionSet {
            offline: vec![Sample { obs: &obs[0], action: 1, target: 2.0 }],
            online: vec![
                Sample { obs: &obs[0], action: 1, target: 4.0 },
                Sample { obs: &obs[2], action: 0, target: 1.0 },
            ],
        };
        let mut m = TabularStep::new(3, 2, 9.0);
        m.fit(&data, &mut seeded(0)).unwrap();
        assert_eq!(m.values, vec![9.0, 3.0, 9.0, 9.0, 1.0, 9.0]);
    }

    #[test]
    fn gradient_step_moves_toward_target() {
        let obs = Observation::State(0);
        let mut m = TabularStep::new(1, 1, 0.0);
        for _ in 0..200 {
            m.gradient_step(&[Sample { obs: &obs, action: 0, target: 1.0 }], 0.1);
        }
        assert!((m.values[0] - 1.0).abs() < 1e-9);
    }
}
