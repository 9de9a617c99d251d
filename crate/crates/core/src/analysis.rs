//! Exact tabular computations of Bellman-error quantities and numeric
//! checks of the identities and inequalities built on them.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::function_approx::FeatureMap;
use crate::mdp::{bellman_backup, evaluate_policy, expect_initial, occupancy, Policy, QTable, TabularMdp};

/// Values at or below this magnitude count as zero residual mass.
pub const ZERO_TOL: f64 = 1e-12;

/// Column-space test threshold for singular covariances.
pub const COLUMN_SPACE_TOL: f64 = 1e-10;

/// A nonnegative quantity that may be `+infinity`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Extended {
    Finite(f64),
    Infinite,
}

impl Extended {
    pub fn as_f64(self) -> f64 {
        match self {
            Extended::Finite(v) => v,
            Extended::Infinite => f64::INFINITY,
        }
    }

    pub fn is_infinite(self) -> bool {
        matches!(self, Extended::Infinite)
    }

    pub fn max(self, other: Self) -> Self {
        match (self, other) {
            (Extended::Finite(a), Extended::Finite(b)) => Extended::Finite(a.max(b)),
            _ => Extended::Infinite,
        }
    }

    pub fn sqrt(self) -> Self {
        match self {
            Extended::Finite(v) => Extended::Finite(v.sqrt()),
            Extended::Infinite => Extended::Infinite,
        }
    }

    pub fn scale(self, c: f64) -> Self {
        match self {
            Extended::Finite(v) => Extended::Finite(v * c),
            Extended::Infinite => Extended::Infinite,
        }
    }

    /// `self <= other + tol`, with infinity comparing equal to itself.
    pub fn le(self, other: Self, tol: f64) -> bool {
        match (self, other) {
            (_, Extended::Infinite) => true,
            (Extended::Infinite, Extended::Finite(_)) => false,
            (Extended::Finite(a), Extended::Finite(b)) => a <= b + tol,
        }
    }
}

impl Serialize for Extended {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Extended::Finite(v) => s.serialize_f64(*v),
            Extended::Infinite => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Extended {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Extended::Finite(v)),
            Raw::Str(s) if s == "inf" => Ok(Extended::Infinite),
            Raw::Str(s) => Err(serde::de::Error::custom(format!("expected a number or \"inf\", got {s:?}"))),
        }
    }
}

/// `eps_h(s, a) = f_h(s, a) - (T f_{h+1})(s, a)`, flattened over `(s, a)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BellmanResidual {
    pub per_step: Vec<Vec<f64>>,
}

impl BellmanResidual {
    pub fn max_abs(&self) -> f64 {
        self.per_step.iter().flatten().fold(0.0, |m, e| m.max(e.abs()))
    }
}

pub fn bellman_residual(mdp: &TabularMdp, f: &QTable) -> BellmanResidual {
    let hn = mdp.horizon();
    let per_step = (0..hn)
        .map(|h| {
            let next: &[f64] = if h + 1 < hn { f.slice(h + 1) } else { &[] };
            f.slice(h)
                .iter()
                .zip(bellman_backup(mdp, h, next))
                .map(|(fv, tf)| fv - tf)
                .collect()
        })
        .collect();
    BellmanResidual { per_step }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_nu(mdp: &TabularMdp, nu: &[Vec<f64>]) -> Result<()> {
    let cells = mdp.n_states() * mdp.n_actions();
    if nu.len() != mdp.horizon() || nu.iter().any(|v| v.len() != cells) {
        return Err(Error::InvalidDistribution(format!(
            "nu must hold {} vectors of length {cells}",
            mdp.horizon()
        )));
    }
    for (h, v) in nu.iter().enumerate() {
        let total: f64 = v.iter().sum();
        if v.iter().any(|p| !(p.is_finite() && *p >= 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidDistribution(format!("nu_{h} is not a distribution")));
        }
    }
    Ok(())
}

fn check_candidates(mdp: &TabularMdp, candidates: &[QTable]) -> Result<()> {
    for f in candidates {
        if f.horizon != mdp.horizon() || f.n_states != mdp.n_states() || f.n_actions != mdp.n_actions() {
            return Err(Error::InvalidArgument("candidate shape does not match the MDP".into()));
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferCoeffReport {
    pub value: Extended,
    /// Index of the maximizing candidate, if any candidate has a positive ratio.
    pub witness: Option<usize>,
    /// `sum_h E_{d^pi_h}[T f_{h+1} - f_h]` of the witness.
    pub numerator: f64,
    /// `sqrt(sum_h E_{nu_h}[(T f_{h+1} - f_h)^2])` of the witness.
    pub denominator: f64,
    pub per_candidate: Vec<Extended>,
}

/// `C_pi = max{0, max_f num(f) / den(f)}` over an explicit finite class.
/// A zero denominator yields `+inf` when the numerator is positive and
/// contributes zero otherwise.
pub fn transfer_coefficient(
    mdp: &TabularMdp,
    pi: &Policy,
    nu: &[Vec<f64>],
    candidates: &[QTable],
) -> Result<TransferCoeffReport> {
    check_nu(mdp, nu)?;
    check_candidates(mdp, candidates)?;
    let occ = occupancy(mdp, pi);
    let mut report = TransferCoeffReport {
        value: Extended::Finite(0.0),
        witness: None,
        numerator: 0.0,
        denominator: 0.0,
        per_candidate: Vec::with_capacity(candidates.len()),
    };
    let mut best = 0.0;
    for (i, f) in candidates.iter().enumerate() {
        let eps = bellman_residual(mdp, f);
        let num: f64 = (0..mdp.horizon()).map(|h| -dot(occ.slice(h), &eps.per_step[h])).sum();
        let den = (0..mdp.horizon())
            .map(|h| nu[h].iter().zip(&eps.per_step[h]).map(|(p, e)| p * e * e).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        let ratio = if den <= ZERO_TOL {
            if num > ZERO_TOL {
                Extended::Infinite
            } else {
                Extended::Finite(0.0)
            }
        } else {
            Extended::Finite((num / den).max(0.0))
        };
        report.per_candidate.push(ratio);
        let better = match (ratio, report.value) {
            (Extended::Infinite, Extended::Finite(_)) => true,
            (Extended::Finite(r), Extended::Finite(_)) => r > best,
            _ => false,
        };
        if better {
            report.value = ratio;
            report.witness = Some(i);
            report.numerator = num;
            report.denominator = den;
            best = ratio.as_f64();
        }
    }
    Ok(report)
}

/// Both sides of an identity or inequality.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SidesReport {
    pub lhs: f64,
    pub rhs: f64,
    pub gap: f64,
    /// `lhs <= rhs` (up to `1e-9`) for inequalities; `gap` small for identities.
    pub holds: bool,
}

/// Greedy policy of a table, lowest action on ties.
pub fn table_greedy_policy(f: &QTable) -> Policy {
    Policy::deterministic(f.horizon, f.n_states, f.n_actions, |h, s| {
        let row = f.row(h, s);
        (0..row.len()).fold(0, |b, a| if row[a] > row[b] { a } else { b })
    })
}

/// `E_{d0}[max_a f_0 - V^{pi^f}_0]` against `sum_h E_{d^{pi^f}_h}[f_h - T f_{h+1}]`.
pub fn perf_diff_check(mdp: &TabularMdp, f: &QTable) -> SidesReport {
    let pi = table_greedy_policy(f);
    let (_, v) = evaluate_policy(mdp, &pi);
    let max_f0: Vec<f64> = (0..mdp.n_states()).map(|s| f.max_at(0, s)).collect();
    let lhs = expect_initial(mdp, &max_f0) - expect_initial(mdp, &v[0]);
    let occ = occupancy(mdp, &pi);
    let eps = bellman_residual(mdp, f);
    let rhs: f64 = (0..mdp.horizon()).map(|h| dot(occ.slice(h), &eps.per_step[h])).sum();
    let gap = (lhs - rhs).abs();
    SidesReport {
        lhs,
        rhs,
        gap,
        holds: gap <= 1e-9,
    }
}

/// `E_{d0}[V^{pi_e}_0 - max_a f_0] <= sum_h E_{d^{pi_e}_h}[T f_{h+1} - f_h]`.
pub fn optimism_check(mdp: &TabularMdp, f: &QTable, pi_e: &Policy) -> SidesReport {
    let (_, v) = evaluate_policy(mdp, pi_e);
    let max_f0: Vec<f64> = (0..mdp.n_states()).map(|s| f.max_at(0, s)).collect();
    let lhs = expect_initial(mdp, &v[0]) - expect_initial(mdp, &max_f0);
    let occ = occupancy(mdp, pi_e);
    let eps = bellman_residual(mdp, f);
    let rhs: f64 = (0..mdp.horizon()).map(|h| -dot(occ.slice(h), &eps.per_step[h])).sum();
    SidesReport {
        lhs,
        rhs,
        gap: (lhs - rhs).abs(),
        holds: lhs <= rhs + 1e-9,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainReport {
    pub c_pi: Extended,
    /// `sqrt(max_{f,h} ||eps_h||^2_{d^pi_h} / ||eps_h||^2_{nu_h})`.
    pub norm_ratio_bound: Extended,
    /// `sup_{h,s,a} d^pi_h(s,a) / nu_h(s,a)`.
    pub sup_density_ratio: Extended,
    /// `c_pi <= norm_ratio_bound <= sup_density_ratio`.
    pub literal_holds: bool,
    /// `c_pi <= sqrt(H) * norm_ratio_bound` and `norm_ratio_bound <= sup_density_ratio`.
    pub corrected_holds: bool,
}

/// Evaluates the density-ratio bound chain for the transfer coefficient.
///
/// The step from the sum over `h` of average residuals to the per-step
/// norm ratio is only valid with a `sqrt(H)` factor (Cauchy-Schwarz over
/// steps): with `nu = d^pi` and a constant residual, `C_pi = sqrt(H)` while
/// the norm ratio is 1. Both the unscaled ordering and the scaled one are
/// reported.
pub fn density_ratio_chain(mdp: &TabularMdp, pi: &Policy, nu: &[Vec<f64>], candidates: &[QTable]) -> Result<ChainReport> {
    let c_pi = transfer_coefficient(mdp, pi, nu, candidates)?.value;
    let occ = occupancy(mdp, pi);
    let mut norm_ratio = Extended::Finite(0.0);
    for f in candidates {
        let eps = bellman_residual(mdp, f);
        for h in 0..mdp.horizon() {
            let num: f64 = occ.slice(h).iter().zip(&eps.per_step[h]).map(|(p, e)| p * e * e).sum();
            let den: f64 = nu[h].iter().zip(&eps.per_step[h]).map(|(p, e)| p * e * e).sum();
            let r = if den <= ZERO_TOL * ZERO_TOL {
                if num > ZERO_TOL * ZERO_TOL {
                    Extended::Infinite
                } else {
                    Extended::Finite(0.0)
                }
            } else {
                Extended::Finite(num / den)
            };
            norm_ratio = norm_ratio.max(r);
        }
    }
    let norm_ratio_bound = norm_ratio.sqrt();
    let mut sup = Extended::Finite(0.0);
    for h in 0..mdp.horizon() {
        for (d, n) in occ.slice(h).iter().zip(&nu[h]) {
            if *d > 0.0 {
                sup = sup.max(if *n > 0.0 { Extended::Finite(d / n) } else { Extended::Infinite });
            }
        }
    }
    let tol = 1e-9;
    let second = norm_ratio_bound.le(sup, tol);
    Ok(ChainReport {
        c_pi,
        norm_ratio_bound,
        sup_density_ratio: sup,
        literal_holds: c_pi.le(norm_ratio_bound, tol) && second,
        corrected_holds: c_pi.le(norm_ratio_bound.scale((mdp.horizon() as f64).sqrt()), tol) && second,
    })
}

/// `sqrt(max_h E_{d^pi_h} ||phi||^2_{Sigma_{nu_h}^+})`, or `+inf` when
/// `d^pi_h` puts mass on features outside the column space of
/// `Sigma_{nu_h}`. `features` holds one map per step or a single shared map.
pub fn relative_condition_number(
    features: &[FeatureMap],
    nu: &[Vec<f64>],
    pi: &Policy,
    mdp: &TabularMdp,
) -> Result<Extended> {
    check_nu(mdp, nu)?;
    if features.is_empty() {
        return Err(Error::InvalidArgument("no feature maps supplied".into()));
    }
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let occ = occupancy(mdp, pi);
    let mut worst = Extended::Finite(0.0);
    for h in 0..mdp.horizon() {
        let phi = &features[h.min(features.len() - 1)];
        if phi.n_states != ns || phi.n_actions != na {
            return Err(Error::InvalidArgument("feature map shape does not match the MDP".into()));
        }
        let p = phi.dim;
        let mut sigma = DMatrix::<f64>::zeros(p, p);
        for s in 0..ns {
            for a in 0..na {
                let w = nu[h][s * na + a];
                if w > 0.0 {
                    let x = DVector::from_column_slice(phi.phi(s, a));
                    sigma += &x * x.transpose() * w;
                }
            }
        }
        let scale = sigma.amax().max(f64::MIN_POSITIVE);
        let pinv = sigma
            .clone()
            .pseudo_inverse(1e-12 * scale)
            .map_err(|e| Error::InvalidArgument(format!("pseudo-inverse failed: {e}")))?;
        let proj = &sigma * &pinv;
        let mut total = 0.0;
        for s in 0..ns {
            for a in 0..na {
                let d = occ.get(h, s, a);
                if d <= 0.0 {
                    continue;
                }
                let x = DVector::from_column_slice(phi.phi(s, a));
                let outside = (&x - &proj * &x).norm();
                if outside > COLUMN_SPACE_TOL * x.norm().max(1.0) {
                    return Ok(Extended::Infinite);
                }
                total += d * (x.transpose() * &pinv * &x)[(0, 0)];
            }
        }
        worst = worst.max(Extended::Finite(total));
    }
    Ok(worst.sqrt())
}

/// `Sigma = lambda I + sum x x^T`, with its inverse kept current by
/// Sherman-Morrison updates.
#[derive(Clone, Debug)]
pub struct CovarianceAccumulator {
    pub lambda: f64,
    sigma: DMatrix<f64>,
    inverse: DMatrix<f64>,
}

impl CovarianceAccumulator {
    pub fn new(dim: usize, lambda: f64) -> Result<Self> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidArgument(format!("lambda must be positive, got {lambda}")));
        }
        Ok(Self {
            lambda,
            sigma: DMatrix::identity(dim, dim) * lambda,
            inverse: DMatrix::identity(dim, dim) / lambda,
        })
    }

    /// `||x||_{Sigma^{-1}}`.
    pub fn inverse_norm(&self, x: &[f64]) -> f64 {
        let v = DVector::from_column_slice(x);
        (v.transpose() * &self.inverse * &v)[(0, 0)].max(0.0).sqrt()
    }

    pub fn add(&mut self, x: &[f64]) {
        let v = DVector::from_column_slice(x);
        self.sigma += &v * v.transpose();
        let u = &self.inverse * &v;
        let denom = 1.0 + (v.transpose() * &u)[(0, 0)];
        self.inverse -= &u * u.transpose() / denom;
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    pub fn inverse(&self) -> &DMatrix<f64> {
        &self.inverse
    }
}

/// `sum_t ||x_t||_{Sigma_{t-1}^{-1}} <= sqrt(2 d T log(1 + T B^2 / (lambda d)))`
/// with `Sigma_0 = lambda I`, `B = max_t ||x_t||`. Requires `lambda >= B^2`.
pub fn elliptical_potential_check(xs: &[Vec<f64>], lambda: f64) -> Result<SidesReport> {
    let d = xs.first().map_or(0, Vec::len);
    if d == 0 || xs.iter().any(|x| x.len() != d) {
        return Err(Error::InvalidArgument("need a nonempty sequence of equal-length vectors".into()));
    }
    let b2 = xs.iter().map(|x| dot(x, x)).fold(0.0, f64::max);
    if lambda < b2 {
        return Err(Error::InvalidArgument(format!(
            "lambda = {lambda} is below max ||x||^2 = {b2}"
        )));
    }
    let mut cov = CovarianceAccumulator::new(d, lambda)?;
    let mut lhs = 0.0;
    for x in xs {
        lhs += cov.inverse_norm(x);
        cov.add(x);
    }
    let (t, df) = (xs.len() as f64, d as f64);
    let rhs = (2.0 * df * t * (1.0 + t * b2 / (lambda * df)).ln()).sqrt();
    Ok(SidesReport {
        lhs,
        rhs,
        gap: (lhs - rhs).abs(),
        holds: lhs <= rhs + 1e-9,
    })
}

/// `X_h(f) = d_h^{pi^f}` and `W_h(g) = eps_h(g)`, both over `(s, a)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BilinearDecomposition {
    pub x: Vec<Vec<f64>>,
    pub w: Vec<Vec<f64>>,
    pub b_x: f64,
    pub b_w: f64,
}

pub fn bilinear_decomposition(mdp: &TabularMdp, f: &QTable, g: &QTable) -> BilinearDecomposition {
    let occ = occupancy(mdp, &table_greedy_policy(f));
    let x: Vec<Vec<f64>> = (0..mdp.horizon()).map(|h| occ.slice(h).to_vec()).collect();
    let w = bellman_residual(mdp, g).per_step;
    let norm = |v: &Vec<f64>| dot(v, v).sqrt();
    BilinearDecomposition {
        b_x: x.iter().map(norm).fold(0.0, f64::max),
        b_w: w.iter().map(norm).fold(0.0, f64::max),
        x,
        w,
    }
}

/// Per step, `E_{d_h^{pi^f}}[g_h - T g_{h+1}]` (rolled forward directly)
/// against `<X_h(f), W_h(g)>`.
pub fn bilinear_verify(mdp: &TabularMdp, f: &QTable, g: &QTable) -> Vec<SidesReport> {
    let dec = bilinear_decomposition(mdp, f, g);
    let pi = table_greedy_policy(f);
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let mut marginal = mdp.init_dist().to_vec();
    let mut out = Vec::with_capacity(mdp.horizon());
    for h in 0..mdp.horizon() {
        let mut lhs = 0.0;
        let mut next = vec![0.0; ns];
        for s in 0..ns {
            if marginal[s] == 0.0 {
                continue;
            }
            let a = pi.action(h, s).expect("greedy policy is deterministic");
            let mut tg = mdp.mean_reward(h, s, a);
            if h + 1 < mdp.horizon() {
                for (sn, p) in mdp.next_dist(h, s, a).iter().enumerate() {
                    tg += p * g.max_at(h + 1, sn);
                    next[sn] += marginal[s] * p;
                }
            }
            lhs += marginal[s] * (g.get(h, s, a) - tg);
        }
        marginal = next;
        let rhs = dot(&dec.x[h], &dec.w[h]);
        let gap = (lhs - rhs).abs();
        out.push(SidesReport {
            lhs,
            rhs,
            gap,
            holds: gap <= 1e-12,
        });
        let _ = na;
    }
    out
}
