use std::any::Any;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{ClassContext, FunctionClass, RegressionSet, Sample, StepModel};
use crate::envs::{LowRankFactors, Observation};
use crate::error::{Error, Result};
use crate::rng::SimRng;

/// Relative singular-value cutoff for the pseudo-inverse fallback.
const PINV_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct RidgeSolution {
    pub weights: Vec<f64>,
    /// True when `X^T X + lambda I` was singular (or numerically so) and
    /// the minimum-norm pseudo-inverse solution was returned.
    pub used_pseudo_inverse: bool,
}

fn residual_ok(a: &DMatrix<f64>, w: &DVector<f64>, b: &DVector<f64>) -> bool {
    let res = (a * w - b).amax();
    res.is_finite() && res <= 1e-8 * b.amax().max(1.0)
}

/// `w = (X^T X + lambda I)^{-1} X^T y`, by Cholesky with an SVD
/// pseudo-inverse fallback.
pub fn ridge_solve(x: &DMatrix<f64>, y: &[f64], lambda: f64) -> Result<RidgeSolution> {
    if x.nrows() == 0 || x.nrows() != y.len() {
        return Err(Error::InvalidArgument(format!(
            "ridge needs n >= 1 rows matching targets, got {} rows and {} targets",
            x.nrows(),
            y.len()
        )));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidArgument(format!("ridge lambda must be >= 0, got {lambda}")));
    }
    let p = x.ncols();
    let xt = x.transpose();
    let a = &xt * x + DMatrix::<f64>::identity(p, p) * lambda;
    let b = &xt * DVector::from_column_slice(y);

    if let Some(chol) = a.clone().cholesky() {
        let w = chol.solve(&b);
        if residual_ok(&a, &w, &b) {
            return Ok(RidgeSolution {
                weights: w.iter().copied().collect(),
                used_pseudo_inverse: false,
            });
        }
    }
    let scale = a.amax().max(f64::MIN_POSITIVE);
    let pinv = a
        .clone()
        .pseudo_inverse(PINV_EPS * scale)
        .map_err(|e| Error::InvalidArgument(format!("pseudo-inverse failed: {e}")))?;
    let w = pinv * b;
    Ok(RidgeSolution {
        weights: w.iter().copied().collect(),
        used_pseudo_inverse: true,
    })
}

/// `phi: (s, a) -> R^dim`, stored `[s][a][k]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    pub n_states: usize,
    pub n_actions: usize,
    pub dim: usize,
    pub values: Vec<f64>,
}

impl FeatureMap {
    pub fn new(n_states: usize, n_actions: usize, dim: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n_states * n_actions * dim {
            return Err(Error::InvalidArgument(format!(
                "feature table has {} entries, expected {}",
                values.len(),
                n_states * n_actions * dim
            )));
        }
        Ok(Self {
            n_states,
            n_actions,
            dim,
            values,
        })
    }

    /// Indicator features; the linear class then equals the tabular one.
    pub fn one_hot(n_states: usize, n_actions: usize) -> Self {
        let dim = n_states * n_actions;
        let mut values = vec![0.0; dim * dim];
        for i in 0..dim {
            values[i * dim + i] = 1.0;
        }
        Self {
            n_states,
            n_actions,
            dim,
            values,
        }
    }

    /// `[phi_h(s, a), r_h(s, a)]`: closed under the Bellman operator of a
    /// low-rank MDP with mean rewards `rewards_h` (`[s][a]`).
    pub fn low_rank(factors: &LowRankFactors, h: usize, rewards_h: &[f64]) -> Self {
        let (ns, na, d) = (factors.n_states, factors.n_actions, factors.d);
        let mut values = Vec::with_capacity(ns * na * (d + 1));
        for s in 0..ns {
            for a in 0..na {
                values.extend_from_slice(factors.phi(h, s, a));
                values.push(rewards_h[s * na + a]);
            }
        }
        Self {
            n_states: ns,
            n_actions: na,
            dim: d + 1,
            values,
        }
    }

    pub fn phi(&self, s: usize, a: usize) -> &[f64] {
        let i = (s * self.n_actions + a) * self.dim;
        &self.values[i..i + self.dim]
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Clone, Debug)]
pub struct LinearStep {
    pub features: Arc<FeatureMap>,
    pub weights: Vec<f64>,
    pub lambda: f64,
    pub weight_bound: Option<f64>,
    /// Whether the last fit fell back to the pseudo-inverse.
    pub used_pseudo_inverse: bool,
}

impl LinearStep {
    pub fn new(features: Arc<FeatureMap>, lambda: f64, weight_bound: Option<f64>) -> Self {
        let dim = features.dim;
        Self {
            features,
            weights: vec![0.0; dim],
            lambda,
            weight_bound,
            used_pseudo_inverse: false,
        }
    }

    fn project(&mut self) {
        if let Some(bound) = self.weight_bound {
            let norm = dot(&self.weights, &self.weights).sqrt();
            if norm > bound {
                self.weights.iter_mut().for_each(|w| *w *= bound / norm);
            }
        }
    }

    fn phi(&self, x: &Sample<'_>) -> &[f64] {
        let s = x.obs.state().expect("linear class needs state observations");
        self.features.phi(s, x.action)
    }
}

impl StepModel for LinearStep {
    fn kind(&self) -> &'static str {
        "linear"
    }

    fn n_actions(&self) -> usize {
        self.features.n_actions
    }

    fn q_values(&self, obs: &Observation, out: &mut [f64]) {
        let s = obs.state().expect("linear class needs state observations");
        for (a, q) in out.iter_mut().enumerate() {
            *q = dot(&self.weights, self.features.phi(s, a));
        }
    }

    fn fit(&mut self, data: &RegressionSet<'_>, _rng: &mut SimRng) -> Result<()> {
        if data.is_empty() {
            self.weights.iter_mut().for_each(|w| *w = 0.0);
            return Ok(());
        }
        let rows: Vec<&Sample<'_>> = data.iter().collect();
        let x = DMatrix::from_fn(rows.len(), self.features.dim, |i, k| self.phi(rows[i])[k]);
        let y: Vec<f64> = rows.iter().map(|r| r.target).collect();
        let sol = ridge_solve(&x, &y, self.lambda)?;
        self.weights = sol.weights;
        self.used_pseudo_inverse = sol.used_pseudo_inverse;
        self.project();
        Ok(())
    }

    fn gradient_step(&mut self, batch: &[Sample<'_>], lr: f64) {
        let scale = 2.0 / batch.len() as f64;
        let mut grad = vec![0.0; self.weights.len()];
        for x in batch {
            let phi = self.phi(x);
            let err = scale * (dot(&self.weights, phi) - x.target);
            grad.iter_mut().zip(phi).for_each(|(g, p)| *g += err * p);
        }
        self.weights.iter_mut().zip(grad).for_each(|(w, g)| *w -= lr * g);
        self.project();
    }

    fn clone_box(&self) -> Box<dyn StepModel> {
        Box::new(self.clone())
    }

    fn checkpoint(&self) -> Value {
        json!({
            "kind": "linear",
            "dim": self.features.dim,
            "lambda": self.lambda,
            "weight_bound": self.weight_bound,
            "weights": self.weights,
        })
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    #[default]
    OneHot,
    /// Requires an environment with known low-rank factors.
    LowRank,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinearParams {
    pub features: FeatureKind,
    pub lambda: f64,
    pub weight_bound: Option<f64>,
}

impl Default for LinearParams {
    fn default() -> Self {
        Self {
            features: FeatureKind::OneHot,
            lambda: 1e-6,
            weight_bound: None,
        }
    }
}

pub struct LinearClass {
    maps: Vec<Arc<FeatureMap>>,
    lambda: f64,
    weight_bound: Option<f64>,
}

impl LinearClass {
    /// One feature map per step (or a single shared map).
    pub fn new(maps: Vec<FeatureMap>, lambda: f64, weight_bound: Option<f64>) -> Self {
        Self {
            maps: maps.into_iter().map(Arc::new).collect(),
            lambda,
            weight_bound,
        }
    }

    pub fn from_params(ctx: &ClassContext, p: LinearParams) -> Result<Self> {
        let maps = match p.features {
            FeatureKind::OneHot => vec![FeatureMap::one_hot(ctx.n_states, ctx.n_actions)],
            FeatureKind::LowRank => {
                let f = ctx.factors.as_ref().ok_or_else(|| {
                    Error::config("function_class.linear.features", "environment has no low-rank factors")
                })?;
                let cells = ctx.n_states * ctx.n_actions;
                (0..ctx.horizon)
                    .map(|h| FeatureMap::low_rank(f, h, &ctx.mean_rewards[h * cells..(h + 1) * cells]))
                    .collect()
            }
        };
        Ok(Self::new(maps, p.lambda, p.weight_bound))
    }
}

impl FunctionClass for LinearClass {
    fn name(&self) -> &'static str {
        "linear"
    }

    fn build(&self, h: usize, _rng: &mut SimRng) -> Result<Box<dyn StepModel>> {
        let map = self.maps[h.min(self.maps.len() - 1)].clone();
        Ok(Box::new(LinearStep::new(map, self.lambda, self.weight_bound)))
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

    fn random_system(n: usize, p: usize, seed: u64) -> (DMatrix<f64>, Vec<f64>) {
        let mut rng = seeded(seed);
        let x = DMatrix::from_fn(n, p, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        let y = (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        (x, y)
    }

    fn normal_residual(x: &DMatrix<f64>, y: &[f64], lambda: f64, w: &[f64]) -> (f64, f64) {
        let p = x.ncols();
        let a = x.transpose() * x + DMatrix::identity(p, p) * lambda;
        let b = x.transpose() * DVector::from_column_slice(y);
        ((a * DVector::from_column_slice(w) - &b).amax(), b.amax())
    }

    #[test]
    fn identity_design_returns_targets() {
        let y = vec![1.0, -2.0, 3.5];
        let sol = ridge_solve(&DMatrix::identity(3, 3), &y, 0.0).unwrap();
        assert_eq!(sol.weights, y);
        assert!(!sol.used_pseudo_inverse);
    }

    #[test]
    fn normal_equation_residual_small() {
        for seed in 0..20 {
            let (x, y) = random_system(40, 6, seed);
            for lambda in [0.0, 1e-6, 1.0] {
                let w = ridge_solve(&x, &y, lambda).unwrap().weights;
                let (res, bmax) = normal_residual(&x, &y, lambda, &w);
                assert!(res <= 1e-8 * bmax.max(1.0));
            }
        }
    }

    #[test]
    fn agrees_with_qr_on_augmented_system() {
        let (x, y) = random_system(50, 5, 9);
        let lambda: f64 = 0.3;
        let mut aug = DMatrix::zeros(55, 5);
        aug.view_mut((0, 0), (50, 5)).copy_from(&x);
        for k in 0..5 {
            aug[(50 + k, k)] = lambda.sqrt();
        }
        let mut rhs = DVector::zeros(55);
        rhs.rows_mut(0, 50).copy_from(&DVector::from_column_slice(&y));
        let qr = aug.qr();
        let w_qr = qr.r().solve_upper_triangular(&(qr.q().transpose() * rhs)).unwrap();
        let w = DVector::from_vec(ridge_solve(&x, &y, lambda).unwrap().weights);
        assert!((&x * &w - &x * &w_qr).amax() <= 1e-8);
    }

    #[test]
    fn huge_lambda_shrinks_to_zero() {
        let (x, y) = random_system(30, 4, 1);
        let w = ridge_solve(&x, &y, 1e12).unwrap().weights;
        let xty = (x.transpose() * DVector::from_column_slice(&y)).norm();
        assert!(DVector::from_vec(w).norm() <= 1e-9 * xty);
    }

    #[test]
    fn singular_design_uses_pseudo_inverse() {
        // duplicated column makes X^T X singular
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 1.0, 2.0, 2.0, 3.0, 3.0]);
        let y = [1.0, 2.0, 3.0];
        let sol = ridge_solve(&x, &y, 0.0).unwrap();
        assert!(sol.used_pseudo_inverse);
        assert!((sol.weights[0] - 0.5).abs() < 1e-10 && (sol.weights[1] - 0.5).abs() < 1e-10);
        let (res, bmax) = normal_residual(&x, &y, 0.0, &sol.weights);
        assert!(res <= 1e-8 * bmax.max(1.0));
    }

    #[test]
    fn training_loss_monotone_in_lambda() {
        let (x, y) = random_system(25, 5, 3);
        let mut prev = 0.0;
        for lambda in [0.0, 1e-3, 1e-1, 1.0, 10.0, 1e3] {
            let w = DVector::from_vec(ridge_solve(&x, &y, lambda).unwrap().weights);
            let loss = (&x * w - DVector::from_column_slice(&y)).norm_squared();
            assert!(loss >= prev - 1e-12);
            prev = loss;
        }
    }

    #[test]
    fn rejects_bad_input() {
        assert!(ridge_solve(&DMatrix::zeros(0, 2), &[], 1.0).is_err());
        assert!(ridge_solve(&DMatrix::zeros(2, 2), &[1.0, 2.0], -1.0).is_err());
    }

    #[test]
    fn one_hot_linear_fit_matches_cell_means_and_projection() {
        let obs: Vec<Observation> = (0..2).map(Observation::State).collect();
        let data = RegressionSet {
            offline: vec![
                Sample { obs: &obs[0], action: 0, target: 1.0 },
                Sample { obs: &obs[0], action: 0, target: 3.0 },
            ],
            online: vec![Sample { obs: &obs[1], action: 1, target: 4.0 }],
        };
        let mut m = LinearStep::new(Arc::new(FeatureMap::one_hot(2, 2)), 0.0, None);
        m.fit(&data, &mut seeded(0)).unwrap();
        let mut q = [0.0; 2];
        m.q_values(&obs[0], &mut q);
        assert!((q[0] - 2.0).abs() < 1e-9);
        let mut bounded = LinearStep::new(Arc::new(FeatureMap::one_hot(2, 2)), 0.0, Some(1.0));
        bounded.fit(&data, &mut seeded(0)).unwrap();
        assert!(dot(&bounded.weights, &bounded.weights).sqrt() <= 1.0 + 1e-12);
    }
}
