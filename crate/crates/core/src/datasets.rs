//! Offline dataset generators. Every generator is stratified: exactly
//! `m_off` tuples per timestep.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::envs::{make_hard_instance, HardInstanceVariant, STATE_A, STATE_B};
use crate::error::{Error, Result};
use crate::mdp::{normalize_probs, occupancy, Policy, TabularMdp, Transition};
use crate::rng::{sample_categorical, seeded};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    OptimalTrajectory,
    OptimalOccupancy,
    HardInstance,
    FromDistribution,
    Empty,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub kind: DatasetKind,
    pub source: String,
    pub seed: u64,
    pub m_off: usize,
    pub horizon: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub forced_random_step: Option<usize>,
    /// Tuple `i` at every step comes from trajectory `i`.
    #[serde(default)]
    pub trajectory_aligned: bool,
    /// Generating distribution `nu_h` over `(s, a)`, when known exactly.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nu: Option<Vec<Vec<f64>>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OfflineDataset {
    pub per_step: Vec<Vec<Transition>>,
    pub meta: DatasetMeta,
}

#[derive(Serialize, Deserialize)]
struct CsvRow {
    h: usize,
    s: usize,
    a: usize,
    r: f64,
    s_next: Option<usize>,
}

impl OfflineDataset {
    pub fn empty(horizon: usize) -> Self {
        Self {
            per_step: vec![Vec::new(); horizon],
            meta: DatasetMeta {
                kind: DatasetKind::Empty,
                source: "none".into(),
                seed: 0,
                m_off: 0,
                horizon,
                epsilon: None,
                forced_random_step: None,
                trajectory_aligned: false,
                nu: None,
            },
        }
    }

    pub fn horizon(&self) -> usize {
        self.per_step.len()
    }

    pub fn step(&self, h: usize) -> &[Transition] {
        &self.per_step[h]
    }

    pub fn len(&self) -> usize {
        self.per_step.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.per_step.iter().flatten()
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for t in self.iter() {
            w.serialize(CsvRow {
                h: t.h,
                s: t.s,
                a: t.a,
                r: t.r,
                s_next: t.s_next,
            })?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Writes `<stem>.csv` and the `<stem>.json` metadata sidecar.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(format!("{stem}.csv")), self.to_csv_string()?)?;
        fs::write(
            dir.join(format!("{stem}.json")),
            serde_json::to_string_pretty(&self.meta)?,
        )?;
        Ok(())
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let meta: DatasetMeta = serde_json::from_str(&fs::read_to_string(dir.join(format!("{stem}.json")))?)?;
        let mut per_step = vec![Vec::new(); meta.horizon];
        let mut rdr = csv::Reader::from_path(dir.join(format!("{stem}.csv")))?;
        for row in rdr.deserialize() {
            let row: CsvRow = row?;
            if row.h >= meta.horizon {
                return Err(Error::InvalidArgument(format!("row with h = {} beyond horizon", row.h)));
            }
            per_step[row.h].push(Transition {
                h: row.h,
                s: row.s,
                a: row.a,
                r: row.r,
                s_next: row.s_next,
            });
        }
        Ok(Self { per_step, meta })
    }
}

fn check_m_off(m_off: usize) -> Result<()> {
    if m_off == 0 {
        return Err(Error::InvalidArgument("m_off must be at least 1".into()));
    }
    Ok(())
}

/// `m_off` trajectories of `pi_star` under epsilon-greedy noise with
/// `epsilon = 1/H`; the action at step `floor(H/2)` is always uniform.
pub fn gen_optimal_trajectory(
    mdp: &TabularMdp,
    pi_star: &Policy,
    m_off: usize,
    seed: u64,
) -> Result<OfflineDataset> {
    check_m_off(m_off)?;
    let (hn, na) = (mdp.horizon(), mdp.n_actions());
    let epsilon = 1.0 / hn as f64;
    let forced = hn / 2;
    let mut rng = seeded(seed);
    let mut per_step = vec![Vec::with_capacity(m_off); hn];
    for _ in 0..m_off {
        let mut s = mdp.sample_initial(&mut rng);
        for (h, bucket) in per_step.iter_mut().enumerate() {
            let a = if h == forced || rng.random::<f64>() < epsilon {
                rng.random_range(0..na)
            } else {
                pi_star.sample(h, s, &mut rng)
            };
            let (r, next) = mdp.step(h, s, a, &mut rng);
            bucket.push(Transition { h, s, a, r, s_next: next });
            if let Some(n) = next {
                s = n;
            }
        }
    }
    Ok(OfflineDataset {
        per_step,
        meta: DatasetMeta {
            kind: DatasetKind::OptimalTrajectory,
            source: "pi_star, epsilon-greedy 1/H, uniform at H/2".into(),
            seed,
            m_off,
            horizon: hn,
            epsilon: Some(epsilon),
            forced_random_step: Some(forced),
            trajectory_aligned: true,
            nu: None,
        },
    })
}

/// Per step: `s ~ d_h^{pi_star}` (exact state marginal), `a ~ Unif(A)`.
pub fn gen_optimal_occupancy(
    mdp: &TabularMdp,
    pi_star: &Policy,
    m_off: usize,
    seed: u64,
) -> Result<OfflineDataset> {
    check_m_off(m_off)?;
    let na = mdp.n_actions();
    let occ = occupancy(mdp, pi_star);
    let nu: Vec<Vec<f64>> = (0..mdp.horizon())
        .map(|h| {
            occ.state_marginal(h)
                .into_iter()
                .flat_map(|p| std::iter::repeat_n(p / na as f64, na))
                .collect()
        })
        .collect();
    let mut ds = sample_from_nu(mdp, &nu, m_off, seed)?;
    ds.meta.kind = DatasetKind::OptimalOccupancy;
    ds.meta.source = "state ~ d^pi_star, uniform action".into();
    Ok(ds)
}

/// `nu_0 = {A} x Unif{L, R}`, `nu_1 = {B} x Unif{L, R}`; no coverage of `C`.
pub fn gen_hard_instance_offline(
    variant: HardInstanceVariant,
    m_off: usize,
    seed: u64,
) -> Result<OfflineDataset> {
    let (mdp, _) = make_hard_instance(variant);
    let na = mdp.n_actions();
    let point = |s: usize| {
        let mut v = vec![0.0; mdp.n_states() * na];
        v[s * na] = 0.5;
        v[s * na + 1] = 0.5;
        v
    };
    let nu = vec![point(STATE_A), point(STATE_B)];
    let mut ds = gen_from_distribution(&mdp, &nu, m_off, seed)?;
    ds.meta.kind = DatasetKind::HardInstance;
    ds.meta.source = format!("{variant:?}: nu supported on A and B");
    Ok(ds)
}

/// IID tuples from explicit per-step `(s, a)` distributions.
pub fn gen_from_distribution(
    mdp: &TabularMdp,
    nu: &[Vec<f64>],
    m_off: usize,
    seed: u64,
) -> Result<OfflineDataset> {
    check_m_off(m_off)?;
    if nu.len() != mdp.horizon() {
        return Err(Error::InvalidDistribution(format!(
            "nu has {} steps, MDP horizon is {}",
            nu.len(),
            mdp.horizon()
        )));
    }
    let width = mdp.n_states() * mdp.n_actions();
    let mut checked = Vec::with_capacity(nu.len());
    for (h, v) in nu.iter().enumerate() {
        if v.len() != width {
            return Err(Error::InvalidDistribution(format!(
                "nu_{h} has {} entries, expected {width}",
                v.len()
            )));
        }
        let mut v = v.clone();
        normalize_probs(&mut v, &format!("nu_{h}"))?;
        checked.push(v);
    }
    let mut ds = sample_from_nu(mdp, &checked, m_off, seed)?;
    ds.meta.kind = DatasetKind::FromDistribution;
    ds.meta.source = "explicit nu".into();
    Ok(ds)
}

fn sample_from_nu(mdp: &TabularMdp, nu: &[Vec<f64>], m_off: usize, seed: u64) -> Result<OfflineDataset> {
    let na = mdp.n_actions();
    let mut rng = seeded(seed);
    let mut per_step = Vec::with_capacity(mdp.horizon());
    for (h, dist) in nu.iter().enumerate() {
        let mut bucket = Vec::with_capacity(m_off);
        for _ in 0..m_off {
            let cell = sample_categorical(dist, &mut rng);
            let (s, a) = (cell / na, cell % na);
            let (r, next) = mdp.step(h, s, a, &mut rng);
            bucket.push(Transition { h, s, a, r, s_next: next });
        }
        per_step.push(bucket);
    }
    Ok(OfflineDataset {
        per_step,
        meta: DatasetMeta {
            kind: DatasetKind::FromDistribution,
            source: String::new(),
            seed,
            m_off,
            horizon: mdp.horizon(),
            epsilon: None,
            forced_random_step: None,
            trajectory_aligned: false,
            nu: Some(nu.to_vec()),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{make_comb_lock, ACTION_L, BAD_STATE, STATE_C};

    fn assert_valid(mdp: &TabularMdp, ds: &OfflineDataset, m_off: usize) {
        for h in 0..mdp.horizon() {
            assert_eq!(ds.step(h).len(), m_off);
            for t in ds.step(h) {
                assert_eq!(t.h, h);
                assert!(mdp.reward(h, t.s, t.a).supports(t.r));
                match t.s_next {
                    Some(n) => assert!(mdp.next_dist(h, t.s, t.a)[n] > 0.0),
                    None => assert_eq!(h + 1, mdp.horizon()),
                }
            }
        }
    }

    #[test]
    fn trajectory_dataset_good_action_rate() {
        let h = 6;
        let (mdp, emitter, pi) = make_comb_lock(h, 3).unwrap();
        let m = 10_000;
        let ds = gen_optimal_trajectory(&mdp, &pi, m, 1).unwrap();
        assert_valid(&mdp, &ds, m);
        assert_eq!(ds.meta.epsilon, Some(1.0 / 6.0));
        assert_eq!(ds.meta.forced_random_step, Some(3));
        // P(good | good state) = 1 - eps + eps/10 = 1 - eps * 9/10
        let p = 1.0 - (1.0 / h as f64) * 0.9;
        for step in (0..h).filter(|&s| s != 3) {
            let good: Vec<_> = ds.step(step).iter().filter(|t| t.s != BAD_STATE).collect();
            let n = good.len() as f64;
            let hits = good
                .iter()
                .filter(|t| Some(t.a) == emitter.spec.good_action(t.s, step))
                .count() as f64;
            let se = (p * (1.0 - p) / n).sqrt();
            assert!((hits / n - p).abs() <= 3.0 * se, "step {step}: {} vs {p}", hits / n);
        }
    }

    #[test]
    fn forced_random_step_for_h2_is_step_one() {
        let (mdp, pi) = make_hard_instance(HardInstanceVariant::M1);
        let ds = gen_optimal_trajectory(&mdp, &pi, 10, 0).unwrap();
        assert_eq!(ds.meta.forced_random_step, Some(1));
    }

    #[test]
    fn occupancy_dataset_is_uniform_over_actions_on_good_states() {
        let (mdp, _, pi) = make_comb_lock(5, 8).unwrap();
        let m = 10_000;
        let ds = gen_optimal_occupancy(&mdp, &pi, m, 2).unwrap();
        assert_valid(&mdp, &ds, m);
        let se = (0.1 * 0.9 / m as f64).sqrt();
        for h in 0..5 {
            let mut counts = [0usize; 10];
            let mut good0 = 0usize;
            for t in ds.step(h) {
                counts[t.a] += 1;
                assert_ne!(t.s, BAD_STATE);
                good0 += (t.s == 0) as usize;
            }
            for c in counts {
                assert!((c as f64 / m as f64 - 0.1).abs() <= 3.0 * se);
            }
            let se_state = (0.25 / m as f64).sqrt();
            assert!((good0 as f64 / m as f64 - 0.5).abs() <= 3.0 * se_state);
        }
    }

    #[test]
    fn occupancy_with_single_step_matches_initial_times_uniform() {
        let mdp = TabularMdp::random(3, 2, 1, &mut seeded(0));
        let pi = Policy::uniform(1, 3, 2);
        let ds = gen_optimal_occupancy(&mdp, &pi, 5, 0).unwrap();
        let nu = ds.meta.nu.unwrap();
        for s in 0..3 {
            for a in 0..2 {
                assert!((nu[0][s * 2 + a] - mdp.init_dist()[s] / 2.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn hard_instance_dataset_never_queries_c() {
        let m = 4000;
        let ds = gen_hard_instance_offline(HardInstanceVariant::M1, m, 5).unwrap();
        assert!(ds.iter().all(|t| t.s != STATE_C));
        assert!(ds.step(1).iter().all(|t| t.r == 1.0));
        let left = ds.step(0).iter().filter(|t| t.a == ACTION_L).count() as f64;
        let se = (0.25 / m as f64).sqrt();
        assert!((left / m as f64 - 0.5).abs() <= 3.0 * se);
        assert!(ds.step(0).iter().any(|t| t.s_next == Some(STATE_C)));
    }

    #[test]
    fn point_mass_nu_gives_constant_pairs() {
        let mdp = TabularMdp::random(3, 2, 2, &mut seeded(1));
        let mut nu = vec![vec![0.0; 6]; 2];
        nu[0][3] = 1.0;
        nu[1][4] = 1.0;
        let ds = gen_from_distribution(&mdp, &nu, 50, 3).unwrap();
        assert!(ds.step(0).iter().all(|t| (t.s, t.a) == (1, 1)));
        assert!(ds.step(1).iter().all(|t| (t.s, t.a) == (2, 0)));
    }

    #[test]
    fn invalid_nu_rejected() {
        let mdp = TabularMdp::random(2, 2, 1, &mut seeded(1));
        assert!(gen_from_distribution(&mdp, &[vec![0.5, 0.6, 0.0, 0.0]], 5, 0).is_err());
        assert!(gen_from_distribution(&mdp, &[vec![1.0, 0.0]], 5, 0).is_err());
        assert!(gen_from_distribution(&mdp, &[vec![0.25; 4], vec![0.25; 4]], 5, 0).is_err());
    }

    #[test]
    fn chi_square_goodness_of_fit() {
        // 0.999 quantile of chi-square with 5 degrees of freedom
        const CHI2_5_999: f64 = 20.515;
        let mdp = TabularMdp::random(3, 2, 1, &mut seeded(4));
        let nu = vec![vec![0.05, 0.15, 0.3, 0.1, 0.25, 0.15]];
        let m = 10_000;
        let mut passing = 0;
        for seed in 0..100 {
            let ds = gen_from_distribution(&mdp, &nu, m, seed).unwrap();
            let mut counts = [0.0; 6];
            for t in ds.step(0) {
                counts[t.s * 2 + t.a] += 1.0;
            }
            let stat: f64 = counts
                .iter()
                .zip(&nu[0])
                .map(|(c, p)| (c - p * m as f64).powi(2) / (p * m as f64))
                .sum();
            passing += (stat < CHI2_5_999) as usize;
        }
        assert!(passing >= 99, "{passing} of 100 seeds passed");
    }

    #[test]
    fn generation_is_deterministic_and_round_trips() {
        let (mdp, _, pi) = make_comb_lock(4, 1).unwrap();
        let a = gen_optimal_trajectory(&mdp, &pi, 20, 9).unwrap();
        let b = gen_optimal_trajectory(&mdp, &pi, 20, 9).unwrap();
        assert_eq!(a.to_csv_string().unwrap(), b.to_csv_string().unwrap());
        let dir = tempfile::tempdir().unwrap();
        a.save(dir.path(), "traj").unwrap();
        let back = OfflineDataset::load(dir.path(), "traj").unwrap();
        assert_eq!(back, a);
    }
}
