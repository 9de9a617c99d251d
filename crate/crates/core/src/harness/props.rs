//! Randomized corpus over the exact identities, inequalities and numeric
//! kernels. Each case is seeded independently, so any failure can be
//! replayed from `(seed, case)` alone.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::analysis::{bilinear_verify, density_ratio_chain, elliptical_potential_check, optimism_check, perf_diff_check};
use crate::error::Result;
use crate::function_approx::{locknet_forward, locknet_grad, ridge_solve, LockNet};
use crate::mdp::{value_iteration, Policy, QTable, TabularMdp};
use crate::rng::{derive_seed, seeded, SimRng};

/// Deliberate corruption for exercising the failure path.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub enum Fault {
    #[default]
    None,
    /// Adds the given amount to one Bellman-residual term on the
    /// performance-difference right-hand side.
    PerturbResidual(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropertyOutcome {
    pub name: String,
    pub cases: usize,
    pub failures: usize,
    /// Largest violation seen: identity gap, inequality excess or kernel error.
    pub worst: f64,
    pub tolerance: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reproducer: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropertyReport {
    pub seed: u64,
    pub corpus: usize,
    pub fault: Fault,
    pub properties: Vec<PropertyOutcome>,
}

impl PropertyReport {
    pub fn passed(&self) -> bool {
        self.properties.iter().all(|p| p.failures == 0)
    }
}

struct Failure {
    size: usize,
    case: usize,
    payload: Value,
}

struct Tally {
    outcome: PropertyOutcome,
    smallest: Option<Failure>,
}

impl Tally {
    fn new(name: &str, tolerance: f64) -> Self {
        Self {
            outcome: PropertyOutcome {
                name: name.into(),
                cases: 0,
                failures: 0,
                worst: 0.0,
                tolerance,
                reproducer: None,
            },
            smallest: None,
        }
    }

    /// `violation <= tolerance` passes; `payload` is built only on failure.
    fn record(&mut self, case: usize, size: usize, violation: f64, payload: impl FnOnce() -> Value) {
        self.outcome.cases += 1;
        if violation.is_nan() || violation > self.outcome.worst {
            self.outcome.worst = violation;
        }
        if violation.is_nan() || violation > self.outcome.tolerance {
            self.outcome.failures += 1;
            if self.smallest.as_ref().is_none_or(|f| size < f.size) {
                self.smallest = Some(Failure {
                    size,
                    case,
                    payload: payload(),
                });
            }
        }
    }

    fn finish(mut self, seed: u64, dir: Option<&Path>) -> Result<PropertyOutcome> {
        if let (Some(f), Some(dir)) = (self.smallest, dir) {
            fs::create_dir_all(dir)?;
            let path = dir.join(format!("repro_{}.json", self.outcome.name));
            let doc = json!({
                "property": self.outcome.name,
                "seed": seed,
                "case": f.case,
                "case_seed": derive_seed(seed, f.case as u64),
                "data": f.payload,
            });
            fs::write(&path, serde_json::to_string_pretty(&doc)?)?;
            self.outcome.reproducer = Some(path);
        }
        Ok(self.outcome)
    }
}

fn random_instance(rng: &mut SimRng) -> TabularMdp {
    let ns = rng.random_range(2..=5);
    let na = rng.random_range(2..=3);
    let hn = rng.random_range(1..=5);
    TabularMdp::random(ns, na, hn, rng)
}

fn random_table(mdp: &TabularMdp, rng: &mut SimRng) -> QTable {
    let vmax = mdp.v_max();
    QTable::from_fn(mdp.horizon(), mdp.n_states(), mdp.n_actions(), |_, _, _| rng.random::<f64>() * vmax)
}

fn random_policy(mdp: &TabularMdp, rng: &mut SimRng) -> Policy {
    let (hn, ns, na) = (mdp.horizon(), mdp.n_states(), mdp.n_actions());
    let mut probs: Vec<f64> = (0..hn * ns * na).map(|_| rng.random::<f64>() + 1e-3).collect();
    for row in probs.chunks_mut(na) {
        let total: f64 = row.iter().sum();
        row.iter_mut().for_each(|p| *p /= total);
    }
    Policy::new(hn, ns, na, probs).expect("rows are normalized")
}

fn random_nu(mdp: &TabularMdp, rng: &mut SimRng) -> Vec<Vec<f64>> {
    let cells = mdp.n_states() * mdp.n_actions();
    (0..mdp.horizon())
        .map(|_| {
            // sparse supports make the infinite branches reachable
            let mut v: Vec<f64> = (0..cells).map(|_| if rng.random::<f64>() < 0.2 { 0.0 } else { rng.random() }).collect();
            if v.iter().all(|&p| p == 0.0) {
                v[0] = 1.0;
            }
            let total: f64 = v.iter().sum();
            v.iter_mut().for_each(|p| *p /= total);
            v
        })
        .collect()
}

fn mdp_json(mdp: &TabularMdp) -> Value {
    mdp.to_json().ok().and_then(|s| serde_json::from_str(&s).ok()).unwrap_or(Value::Null)
}

fn size(mdp: &TabularMdp) -> usize {
    mdp.horizon() * mdp.n_states() * mdp.n_actions()
}

/// Max-entry residual of the ridge normal equations, relative to
/// `max(1, |X^T y|_inf)`.
pub fn ridge_normal_residual(x: &DMatrix<f64>, y: &[f64], lambda: f64) -> Result<f64> {
    let w = ridge_solve(x, y, lambda)?.weights;
    let p = x.ncols();
    let a = x.transpose() * x + DMatrix::identity(p, p) * lambda;
    let b = x.transpose() * DVector::from_column_slice(y);
    Ok((a * DVector::from_vec(w) - &b).amax() / b.amax().max(1.0))
}

/// Worst relative error between the analytic squared-loss gradient and
/// central differences over `coords` random parameter coordinates.
pub fn locknet_fd_error(net: &LockNet, obs: &[f64], action: usize, target: f64, coords: usize, rng: &mut SimRng) -> f64 {
    let g = locknet_grad(net, &[(obs, action, target)]);
    let base = net.params();
    let mut probe = net.clone();
    let mut loss = |p: &[f64]| {
        probe.set_params(p);
        (locknet_forward(&probe, obs, action) - target).powi(2)
    };
    let step = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..coords {
        let k = rng.random_range(0..base.len());
        let mut p = base.clone();
        p[k] = base[k] + step;
        let up = loss(&p);
        p[k] = base[k] - step;
        let fd = (up - loss(&p)) / (2.0 * step);
        worst = worst.max((fd - g[k]).abs() / fd.abs().max(g[k].abs()).max(1e-6));
    }
    worst
}

/// Runs `corpus` cases of every property. Reproducers for the smallest
/// failing case of each property go to `repro_dir` when given.
pub fn run_property_suite(corpus: usize, seed: u64, fault: Fault, repro_dir: Option<&Path>) -> Result<PropertyReport> {
    let mut perf = Tally::new("performance_difference", 1e-9);
    let mut optimism = Tally::new("optimism", 1e-9);
    let mut bilinear = Tally::new("bilinear_identity", 1e-12);
    let mut chain = Tally::new("transfer_chain", 0.0);
    let mut elliptical = Tally::new("elliptical_potential", 1e-9);
    let mut ridge = Tally::new("ridge_normal_equations", 1e-8);
    let mut grad = Tally::new("locknet_gradient", 1e-4);

    for case in 0..corpus {
        let rng = &mut seeded(derive_seed(seed, case as u64));
        let mdp = random_instance(rng);
        let f = random_table(&mdp, rng);

        let mut r = perf_diff_check(&mdp, &f);
        if let Fault::PerturbResidual(delta) = fault {
            r.rhs += delta;
            r.gap = (r.lhs - r.rhs).abs();
        }
        perf.record(case, size(&mdp), r.gap, || json!({ "mdp": mdp_json(&mdp), "f": f, "report": r }));

        let pi_e = random_policy(&mdp, rng);
        let o = optimism_check(&mdp, &f, &pi_e);
        optimism.record(case, size(&mdp), (o.lhs - o.rhs).max(0.0), || {
            json!({ "mdp": mdp_json(&mdp), "f": f, "pi_e": pi_e, "report": o })
        });

        let g = random_table(&mdp, rng);
        let b = bilinear_verify(&mdp, &f, &g);
        let gap = b.iter().map(|s| s.gap).fold(0.0, f64::max);
        bilinear.record(case, size(&mdp), gap, || json!({ "mdp": mdp_json(&mdp), "f": f, "g": g, "per_step": b }));

        let nu = random_nu(&mdp, rng);
        let mut candidates = vec![value_iteration(&mdp).0, f.clone(), g.clone()];
        candidates.push(random_table(&mdp, rng));
        let c = density_ratio_chain(&mdp, &pi_e, &nu, &candidates)?;
        chain.record(case, size(&mdp), if c.corrected_holds { 0.0 } else { 1.0 }, || {
            json!({ "mdp": mdp_json(&mdp), "pi": pi_e, "nu": nu, "candidates": candidates, "report": c })
        });

        let d = rng.random_range(1..=5);
        let t = rng.random_range(1..=60);
        let xs: Vec<Vec<f64>> = (0..t).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let b2 = xs.iter().map(|x| x.iter().map(|v| v * v).sum::<f64>()).fold(0.0, f64::max);
        let lambda = b2.max(1e-3) * rng.random_range(1.0..4.0);
        let e = elliptical_potential_check(&xs, lambda)?;
        elliptical.record(case, d * t, (e.lhs - e.rhs).max(0.0), || json!({ "xs": xs, "lambda": lambda, "report": e }));

        let (n, p) = (rng.random_range(2..=40), rng.random_range(1..=8));
        let x = DMatrix::from_fn(n, p, |_, _| rng.random_range(-1.0..1.0));
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let lambda = [0.0, 1e-6, 1.0][case % 3];
        let res = ridge_normal_residual(&x, &y, lambda)?;
        ridge.record(case, n * p, res, || {
            json!({ "x_row_major": x.transpose().as_slice(), "rows": n, "cols": p, "y": y, "lambda": lambda })
        });

        let (obs_dim, na) = (rng.random_range(2..=8), rng.random_range(2..=5));
        let net = LockNet::random(obs_dim, na, rng);
        let obs: Vec<f64> = (0..obs_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (a, target) = (rng.random_range(0..na), rng.random::<f64>());
        let err = locknet_fd_error(&net, &obs, a, target, 20, rng);
        grad.record(case, net.n_params(), err, || {
            json!({ "net": net.to_json(), "obs": obs, "action": a, "target": target })
        });
    }

    let properties = [perf, optimism, bilinear, chain, elliptical, ridge, grad]
        .into_iter()
        .map(|t| t.finish(seed, repro_dir))
        .collect::<Result<Vec<_>>>()?;
    Ok(PropertyReport {
        seed,
        corpus,
        fault,
        properties,
    })
}
