use rand::Rng;

use super::{act, evaluate, greedy_policy, FitEntry, HyQConfig, RunRecord, RunRow, Variant};
use crate::datasets::OfflineDataset;
use crate::envs::{Environment, Observation};
use crate::error::{Error, Result};
use crate::function_approx::{QFunction, RegressionSet, Sample};
use crate::rng::{derive_seed, seeded, SimRng};

const STREAM_INIT: u64 = 0;
const STREAM_COLLECT: u64 = 1;
const STREAM_FIT: u64 = 2;
const STREAM_EVAL: u64 = 3;
const STREAM_OFFLINE_OBS: u64 = 4;

/// A transition as the learner sees it.
#[derive(Clone, Debug, PartialEq)]
pub struct ObsTransition {
    pub obs: Observation,
    pub action: usize,
    pub reward: f64,
    /// `None` at the last step.
    pub next: Option<Observation>,
}

/// Per-step buffers: `offline[h]` is fixed, `online[h]` only grows.
#[derive(Clone, Debug, Default)]
pub struct ReplayState {
    pub offline: Vec<Vec<ObsTransition>>,
    pub online: Vec<Vec<ObsTransition>>,
}

impl ReplayState {
    /// Attaches observations to every offline transition.
    pub fn from_offline(env: &dyn Environment, data: &OfflineDataset, rng: &mut SimRng) -> Result<Self> {
        let hn = env.horizon();
        if data.horizon() != hn {
            return Err(Error::InvalidArgument(format!(
                "offline data has horizon {}, environment {}",
                data.horizon(),
                hn
            )));
        }
        let offline = (0..hn)
            .map(|h| {
                data.step(h)
                    .iter()
                    .map(|t| ObsTransition {
                        obs: env.observe(h, t.s, rng),
                        action: t.a,
                        reward: t.r,
                        next: t.s_next.map(|sn| env.observe(h + 1, sn, rng)),
                    })
                    .collect()
            })
            .collect();
        Ok(Self {
            offline,
            online: vec![Vec::new(); hn],
        })
    }

    pub fn offline_len(&self) -> usize {
        self.offline.iter().map(Vec::len).sum()
    }
}

fn samples<'a>(buf: &'a [ObsTransition], ys: &[f64]) -> Vec<Sample<'a>> {
    buf.iter()
        .zip(ys)
        .map(|(t, &y)| Sample {
            obs: &t.obs,
            action: t.action,
            target: y,
        })
        .collect()
}

fn next_value(f: &QFunction, h: usize, next: &Option<Observation>, scratch: &mut [f64]) -> f64 {
    match next {
        Some(o) => f.max_value(h + 1, o, scratch),
        None => 0.0,
    }
}

/// Fits `f_h` for `h = H-1, ..., 0`; each target uses the freshly fit
/// `f_{h+1}`.
pub fn backward_fit(
    f: &mut QFunction,
    replay: &ReplayState,
    iter: usize,
    rng: &mut SimRng,
    log: &mut Vec<FitEntry>,
) -> Result<()> {
    let hn = f.horizon();
    let mut scratch = vec![0.0; f.n_actions()];
    for h in (0..hn).rev() {
        let targets = |buf: &[ObsTransition], f: &QFunction, scratch: &mut [f64]| -> Vec<f64> {
            buf.iter().map(|t| t.reward + next_value(f, h, &t.next, scratch)).collect()
        };
        let y_off = targets(&replay.offline[h], f, &mut scratch);
        let y_on = targets(&replay.online[h], f, &mut scratch);
        let set = RegressionSet {
            offline: samples(&replay.offline[h], &y_off),
            online: samples(&replay.online[h], &y_on),
        };
        log.push(FitEntry {
            iter,
            h,
            n_offline: set.offline.len(),
            n_online: set.online.len(),
        });
        let (lo, hi) = f.models.split_at_mut(h + 1);
        if let Some(next) = hi.first() {
            lo[h].warm_start_from(next.as_ref());
        }
        lo[h].fit(&set, rng)?;
    }
    Ok(())
}

/// Mean squared Bellman residual of `f` over the offline and online buffers.
pub fn residuals(f: &QFunction, replay: &ReplayState) -> (Option<f64>, Option<f64>) {
    let mut q = vec![0.0; f.n_actions()];
    let mut scratch = vec![0.0; f.n_actions()];
    let mut mean = |bufs: &[Vec<ObsTransition>]| {
        let (mut sum, mut n) = (0.0, 0usize);
        for (h, buf) in bufs.iter().enumerate() {
            for t in buf {
                f.q_values(h, &t.obs, &mut q);
                let y = t.reward + next_value(f, h, &t.next, &mut scratch);
                sum += (q[t.action] - y).powi(2);
                n += 1;
            }
        }
        (n > 0).then(|| sum / n as f64)
    };
    (mean(&replay.offline), mean(&replay.online))
}

/// Appends online tuples collected with the greedy policy of `f`; returns
/// the environment steps consumed.
fn collect(
    env: &dyn Environment,
    f: &QFunction,
    config: &HyQConfig,
    replay: &mut ReplayState,
    rng: &mut SimRng,
) -> u64 {
    let mdp = env.latent();
    let hn = mdp.horizon();
    let na = mdp.n_actions();
    let mut scratch = vec![0.0; na];
    let mut steps = 0;
    let mut choose = |h: usize, obs: &Observation, rng: &mut SimRng| {
        if config.epsilon > 0.0 && rng.random::<f64>() < config.epsilon {
            rng.random_range(0..na)
        } else {
            act(f, h, obs, &config.tie_break, rng, &mut scratch)
        }
    };
    match config.variant {
        Variant::QType => {
            for _ in 0..config.m_on {
                let mut s = mdp.sample_initial(rng);
                let mut obs = env.observe(0, s, rng);
                for h in 0..hn {
                    let a = choose(h, &obs, rng);
                    let (r, sn) = mdp.step(h, s, a, rng);
                    steps += 1;
                    let next = sn.map(|sn| env.observe(h + 1, sn, rng));
                    replay.online[h].push(ObsTransition {
                        obs,
                        action: a,
                        reward: r,
                        next: next.clone(),
                    });
                    match (sn, next) {
                        (Some(sn), Some(o)) => {
                            s = sn;
                            obs = o;
                        }
                        _ => break,
                    }
                }
            }
        }
        Variant::VType => {
            for h in 0..hn {
                for _ in 0..config.m_on {
                    let mut s = mdp.sample_initial(rng);
                    let mut obs = env.observe(0, s, rng);
                    for k in 0..h {
                        let a = choose(k, &obs, rng);
                        let (_, sn) = mdp.step(k, s, a, rng);
                        steps += 1;
                        s = sn.expect("roll-in stays inside the horizon");
                        obs = env.observe(k + 1, s, rng);
                    }
                    let a = rng.random_range(0..na);
                    let (r, sn) = mdp.step(h, s, a, rng);
                    steps += 1;
                    replay.online[h].push(ObsTransition {
                        obs,
                        action: a,
                        reward: r,
                        next: sn.map(|sn| env.observe(h + 1, sn, rng)),
                    });
                }
            }
        }
    }
    steps
}

/// Runs Hy-Q and also returns the final Q-function.
///
/// Row `t` (1-based) evaluates `pi^t`, the greedy policy of the estimate
/// fit on the data gathered before it; the counters are the data used to
/// produce it. Row `T + 1` evaluates the policy after the last fit.
pub fn run_finite(env: &dyn Environment, offline: &OfflineDataset, config: &HyQConfig) -> Result<(RunRecord, QFunction)> {
    config.validate()?;
    let name = match config.variant {
        Variant::QType => "hyq_qtype",
        Variant::VType => "hyq_vtype",
    };
    let mut record = RunRecord::new(name, serde_json::to_value(config)?);
    let mdp = env.latent();
    let class = config.function_class.build(env)?;
    let mut f = QFunction::build(
        class.as_ref(),
        mdp.horizon(),
        mdp.v_max(),
        &mut seeded(derive_seed(config.seed, STREAM_INIT)),
    )?;
    let mut replay = ReplayState::from_offline(env, offline, &mut seeded(derive_seed(config.seed, STREAM_OFFLINE_OBS)))?;
    if offline.is_empty() {
        record
            .warnings
            .push("offline dataset is empty; running pure online FQI".into());
    }
    let mut collect_rng = seeded(derive_seed(config.seed, STREAM_COLLECT));
    let mut fit_rng = seeded(derive_seed(config.seed, STREAM_FIT));
    let mut eval_rng = seeded(derive_seed(config.seed, STREAM_EVAL));
    let offline_samples = replay.offline_len() as u64;
    let mut online_steps = 0u64;
    let mut diag = (None, None);

    for t in 1..=config.iterations + 1 {
        let eval_return = evaluate(env, &f, &config.tie_break, config.eval, &mut eval_rng)?;
        record.rows.push(RunRow {
            iter: t,
            online_steps,
            offline_samples,
            eval_return,
            bellman_residual_offline: diag.0,
            bellman_residual_online: diag.1,
        });
        if t > config.iterations {
            break;
        }
        online_steps += collect(env, &f, config, &mut replay, &mut collect_rng);
        backward_fit(&mut f, &replay, t, &mut fit_rng, &mut record.fit_log)?;
        if config.record_residuals {
            diag = residuals(&f, &replay);
        }
    }
    if env.is_tabular() {
        record.final_policy = Some(greedy_policy(&f, mdp.n_states(), &config.tie_break));
    }
    Ok((record, f))
}

pub fn hyq_qtype(env: &dyn Environment, offline: &OfflineDataset, config: &HyQConfig) -> Result<RunRecord> {
    let config = HyQConfig {
        variant: Variant::QType,
        ..config.clone()
    };
    Ok(run_finite(env, offline, &config)?.0)
}

pub fn hyq_vtype(env: &dyn Environment, offline: &OfflineDataset, config: &HyQConfig) -> Result<RunRecord> {
    let config = HyQConfig {
        variant: Variant::VType,
        ..config.clone()
    };
    Ok(run_finite(env, offline, &config)?.0)
}
