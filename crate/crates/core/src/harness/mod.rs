//! Config-driven experiment runner: environments, datasets and algorithms
//! are looked up by name, each replicate seed produces one run record, and
//! the replicates are reduced to a median/quantile curve.

mod aggregate;
mod plot;
mod props;

pub use aggregate::{aggregate, quantile, AggregateCurve, AggregatePoint};
pub use plot::{plot_svg, PlotSeries};
pub use props::{run_property_suite, Fault, PropertyOutcome, PropertyReport};

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::analysis::table_greedy_policy;
use crate::baselines::{behavior_cloning, offline_fqi, online_fqi, BcMode, OfflineFqiConfig};
use crate::datasets::{
    gen_from_distribution, gen_hard_instance_offline, gen_optimal_occupancy, gen_optimal_trajectory,
    OfflineDataset,
};
use crate::envs::{make_hard_instance, make_low_rank, CombLockEnv, Environment, HardInstanceVariant, TabularEnv, DEFAULT_NOISE_STD};
use crate::error::{Error, Result};
use crate::hyq::{evaluate_actor, hyq_discounted, run_finite, DiscountedConfig, EvalMode, HyQConfig, RunRecord, RunRow, Variant};
use crate::mdp::{value_iteration, Policy, TabularMdp};
use crate::registry::Registry;
use crate::rng::{derive_seed, seeded};

/// Environment variable naming the directory relative output dirs resolve
/// against.
pub const OUTPUT_ROOT_VAR: &str = "HYQ_OUTPUT_ROOT";
pub const DEFAULT_OUTPUT_ROOT: &str = "runs";

pub fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_VAR).map_or_else(|| PathBuf::from(DEFAULT_OUTPUT_ROOT), PathBuf::from)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvSpec {
    pub kind: String,
    #[serde(default)]
    pub params: Value,
    /// Fixed environment seed; when absent each replicate uses its own seed.
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub kind: String,
    #[serde(default)]
    pub m_off: usize,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlgorithmSpec {
    pub name: String,
    /// Algorithm configuration; any `seed` field is replaced by the
    /// replicate seed.
    #[serde(default)]
    pub params: Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub id: String,
    pub env: EnvSpec,
    pub dataset: DatasetSpec,
    pub algorithm: AlgorithmSpec,
    pub replicate_seeds: Vec<u64>,
    /// Relative paths resolve against the output root; defaults to `id`.
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| Error::config(e.path().to_string(), e.inner().to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn output_dir(&self, root: &Path) -> PathBuf {
        let dir = self.output_dir.clone().unwrap_or_else(|| PathBuf::from(&self.id));
        if dir.is_absolute() {
            dir
        } else {
            root.join(dir)
        }
    }

    /// Checks every field that can be checked without running anything.
    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() || self.id.contains(['/', '\\']) {
            return Err(Error::config("id", "must be a nonempty file-name-safe string"));
        }
        if self.replicate_seeds.is_empty() {
            return Err(Error::config("replicate_seeds", "need at least one replicate"));
        }
        let mut seen = self.replicate_seeds.clone();
        seen.sort_unstable();
        if seen.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::config("replicate_seeds", "seeds must be distinct"));
        }
        let envs = env_registry();
        let factory = envs.get(&self.env.kind).map_err(|e| Error::config("env.kind", e.to_string()))?;
        let built = factory(&self.env.params, self.env.seed.unwrap_or(self.replicate_seeds[0]))
            .map_err(|e| nest("env.params", e))?;
        let datasets = dataset_registry();
        datasets
            .get(&self.dataset.kind)
            .map_err(|e| Error::config("dataset.kind", e.to_string()))?;
        if self.dataset.kind != "empty" && self.dataset.m_off == 0 {
            return Err(Error::config("dataset.m_off", "must be >= 1"));
        }
        if self.dataset.kind == "hard_instance" && built.hard_variant.is_none() {
            return Err(Error::config("dataset.kind", "hard_instance data needs the hard_instance environment"));
        }
        let algos = algorithm_registry();
        let algo = algos
            .get(&self.algorithm.name)
            .map_err(|e| Error::config("algorithm.name", e.to_string()))?;
        algo.check(&self.algorithm.params, built.env.as_ref())
            .map_err(|e| nest("algorithm.params", e))
    }
}

/// Prefixes config paths from nested parsers with the enclosing field.
fn nest(prefix: &str, e: Error) -> Error {
    match e {
        Error::Config { path, message } if path.is_empty() || path == "." => Error::config(prefix, message),
        Error::Config { path, message } => Error::config(format!("{prefix}.{path}"), message),
        other => Error::config(prefix, other.to_string()),
    }
}

/// Deserializes `params` (null meaning `{}`), reporting the failing path.
pub fn parse_params<T: DeserializeOwned>(params: &Value) -> Result<T> {
    let value = if params.is_null() { json!({}) } else { params.clone() };
    serde_path_to_error::deserialize(value).map_err(|e| Error::config(e.path().to_string(), e.inner().to_string()))
}

pub struct BuiltEnv {
    pub env: Box<dyn Environment>,
    pub pi_star: Policy,
    pub hard_variant: Option<HardInstanceVariant>,
}

pub type EnvFactory = fn(&Value, u64) -> Result<BuiltEnv>;

fn greedy_optimal(mdp: &TabularMdp) -> Policy {
    table_greedy_policy(&value_iteration(mdp).0)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct HardParams {
    #[serde(default = "default_variant")]
    variant: HardInstanceVariant,
}

fn default_variant() -> HardInstanceVariant {
    HardInstanceVariant::M1
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LockParams {
    #[serde(default = "default_lock_horizon")]
    horizon: usize,
    #[serde(default = "default_noise")]
    noise_std: f64,
}

fn default_lock_horizon() -> usize {
    10
}

fn default_noise() -> f64 {
    DEFAULT_NOISE_STD
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RandomParams {
    n_states: usize,
    n_actions: usize,
    horizon: usize,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LowRankParams {
    d: usize,
    n_states: usize,
    n_actions: usize,
    horizon: usize,
}

fn check_sizes(n_states: usize, n_actions: usize, horizon: usize) -> Result<()> {
    for (name, v) in [("n_states", n_states), ("n_actions", n_actions), ("horizon", horizon)] {
        if v == 0 {
            return Err(Error::config(name, "must be >= 1"));
        }
    }
    Ok(())
}

pub fn env_registry() -> Registry<EnvFactory> {
    let mut r: Registry<EnvFactory> = Registry::new("environment");
    r.register("hard_instance", |params, _seed| {
        let p: HardParams = parse_params(params)?;
        let (mdp, pi_star) = make_hard_instance(p.variant);
        Ok(BuiltEnv {
            env: Box::new(TabularEnv::new(format!("hard_instance_{:?}", p.variant), mdp)),
            pi_star,
            hard_variant: Some(p.variant),
        })
    })
    .register("comb_lock", |params, seed| {
        let p: LockParams = parse_params(params)?;
        let env = CombLockEnv::new(p.horizon, seed, p.noise_std)?;
        Ok(BuiltEnv {
            pi_star: env.spec().optimal_policy(),
            env: Box::new(env),
            hard_variant: None,
        })
    })
    .register("random_tabular", |params, seed| {
        let p: RandomParams = parse_params(params)?;
        check_sizes(p.n_states, p.n_actions, p.horizon)?;
        let mdp = TabularMdp::random(p.n_states, p.n_actions, p.horizon, &mut seeded(seed));
        Ok(BuiltEnv {
            pi_star: greedy_optimal(&mdp),
            env: Box::new(TabularEnv::new("random_tabular", mdp)),
            hard_variant: None,
        })
    })
    .register("low_rank", |params, seed| {
        let p: LowRankParams = parse_params(params)?;
        check_sizes(p.n_states, p.n_actions, p.horizon)?;
        let (mdp, factors) = make_low_rank(p.d, p.n_states, p.n_actions, p.horizon, seed)?;
        Ok(BuiltEnv {
            pi_star: greedy_optimal(&mdp),
            env: Box::new(TabularEnv::new("low_rank", mdp).with_factors(factors)),
            hard_variant: None,
        })
    });
    r
}

pub type DatasetFactory = fn(&BuiltEnv, usize, u64) -> Result<OfflineDataset>;

pub fn dataset_registry() -> Registry<DatasetFactory> {
    let mut r: Registry<DatasetFactory> = Registry::new("dataset");
    r.register("optimal_trajectory", |b, m, seed| gen_optimal_trajectory(b.env.latent(), &b.pi_star, m, seed))
        .register("optimal_occupancy", |b, m, seed| gen_optimal_occupancy(b.env.latent(), &b.pi_star, m, seed))
        .register("hard_instance", |b, m, seed| {
            let variant = b
                .hard_variant
                .ok_or_else(|| Error::config("dataset.kind", "hard_instance data needs the hard_instance environment"))?;
            gen_hard_instance_offline(variant, m, seed)
        })
        .register("uniform", |b, m, seed| {
            let mdp = b.env.latent();
            let cells = mdp.n_states() * mdp.n_actions();
            gen_from_distribution(mdp, &vec![vec![1.0 / cells as f64; cells]; mdp.horizon()], m, seed)
        })
        .register("empty", |b, _, _| Ok(OfflineDataset::empty(b.env.horizon())));
    r
}

/// A learning algorithm selectable by name.
pub trait Algorithm: Send + Sync {
    /// Parses `params` without running anything.
    fn check(&self, params: &Value, env: &dyn Environment) -> Result<()>;

    fn run(&self, env: &dyn Environment, data: &OfflineDataset, params: &Value, seed: u64) -> Result<RunRecord>;
}

struct FiniteHyQ(Option<Variant>);

impl FiniteHyQ {
    fn config(&self, params: &Value, seed: u64) -> Result<HyQConfig> {
        let mut c: HyQConfig = parse_params(params)?;
        if let Some(v) = self.0 {
            c.variant = v;
        }
        c.seed = seed;
        c.validate()?;
        Ok(c)
    }
}

impl Algorithm for FiniteHyQ {
    fn check(&self, params: &Value, env: &dyn Environment) -> Result<()> {
        let c = self.config(params, 0)?;
        c.function_class.build(env).map_err(|e| nest("function_class", e))?;
        Ok(())
    }

    fn run(&self, env: &dyn Environment, data: &OfflineDataset, params: &Value, seed: u64) -> Result<RunRecord> {
        Ok(run_finite(env, data, &self.config(params, seed)?)?.0)
    }
}

struct Discounted;

impl Discounted {
    fn config(params: &Value, seed: u64) -> Result<DiscountedConfig> {
        let mut c: DiscountedConfig = parse_params(params)?;
        c.seed = seed;
        c.validate()?;
        Ok(c)
    }
}

impl Algorithm for Discounted {
    fn check(&self, params: &Value, _env: &dyn Environment) -> Result<()> {
        Self::config(params, 0).map(drop)
    }

    fn run(&self, env: &dyn Environment, data: &OfflineDataset, params: &Value, seed: u64) -> Result<RunRecord> {
        hyq_discounted(env, data, &Self::config(params, seed)?)
    }
}

struct OfflineFqi;

impl OfflineFqi {
    fn config(params: &Value, seed: u64) -> Result<OfflineFqiConfig> {
        let mut c: OfflineFqiConfig = parse_params(params)?;
        c.seed = seed;
        if c.n_sweeps == 0 {
            return Err(Error::config("n_sweeps", "must be >= 1"));
        }
        Ok(c)
    }
}

impl Algorithm for OfflineFqi {
    fn check(&self, params: &Value, env: &dyn Environment) -> Result<()> {
        let c = Self::config(params, 0)?;
        c.function_class.build(env).map_err(|e| nest("function_class", e))?;
        Ok(())
    }

    fn run(&self, env: &dyn Environment, data: &OfflineDataset, params: &Value, seed: u64) -> Result<RunRecord> {
        Ok(offline_fqi(env, data, &Self::config(params, seed)?)?.record)
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct BcParams {
    /// Defaults to majority vote on tabular observations and linear softmax
    /// otherwise.
    mode: Option<BcMode>,
    eval: EvalMode,
}

struct BehaviorCloning;

impl Algorithm for BehaviorCloning {
    fn check(&self, params: &Value, _env: &dyn Environment) -> Result<()> {
        parse_params::<BcParams>(params).map(drop)
    }

    fn run(&self, env: &dyn Environment, data: &OfflineDataset, params: &Value, seed: u64) -> Result<RunRecord> {
        let p: BcParams = parse_params(params)?;
        let mode = p.mode.unwrap_or(if env.is_tabular() {
            BcMode::TabularMajority
        } else {
            BcMode::linear_softmax()
        });
        let policy = behavior_cloning(env, data, mode, seed)?;
        let eval_return = evaluate_actor(env, &policy, p.eval, &mut seeded(derive_seed(seed, 3)))?;
        let mut record = RunRecord::new("behavior_cloning", json!({ "mode": mode, "eval": p.eval, "seed": seed }));
        record.rows.push(RunRow {
            iter: 1,
            online_steps: 0,
            offline_samples: data.len() as u64,
            eval_return,
            bellman_residual_offline: None,
            bellman_residual_online: None,
        });
        Ok(record)
    }
}

struct OnlineFqi;

impl Algorithm for OnlineFqi {
    fn check(&self, params: &Value, env: &dyn Environment) -> Result<()> {
        FiniteHyQ(None).check(params, env)
    }

    fn run(&self, env: &dyn Environment, _data: &OfflineDataset, params: &Value, seed: u64) -> Result<RunRecord> {
        online_fqi(env, &FiniteHyQ(None).config(params, seed)?)
    }
}

pub fn algorithm_registry() -> Registry<Box<dyn Algorithm>> {
    let mut r: Registry<Box<dyn Algorithm>> = Registry::new("algorithm");
    r.register("hyq", Box::new(FiniteHyQ(None)))
        .register("hyq_qtype", Box::new(FiniteHyQ(Some(Variant::QType))))
        .register("hyq_vtype", Box::new(FiniteHyQ(Some(Variant::VType))))
        .register("hyq_discounted", Box::new(Discounted))
        .register("offline_fqi", Box::new(OfflineFqi))
        .register("behavior_cloning", Box::new(BehaviorCloning))
        .register("online_fqi", Box::new(OnlineFqi));
    r
}

/// Runs one replicate without touching the filesystem.
pub fn run_replicate(config: &ExperimentConfig, seed: u64) -> Result<RunRecord> {
    let built = env_registry().get(&config.env.kind)?(&config.env.params, config.env.seed.unwrap_or(seed))?;
    let data = dataset_registry().get(&config.dataset.kind)?(
        &built,
        config.dataset.m_off,
        config.dataset.seed.unwrap_or(seed),
    )?;
    let algos = algorithm_registry();
    algos
        .get(&config.algorithm.name)?
        .run(built.env.as_ref(), &data, &config.algorithm.params, seed)
}

#[derive(Debug)]
pub struct ExperimentOutcome {
    pub curve: AggregateCurve,
    /// `(seed, record)` in config order.
    pub records: Vec<(u64, RunRecord)>,
    pub dir: PathBuf,
}

/// Validates `config`, runs every replicate, and writes
/// `seed_<s>.{csv,json}`, `aggregate.csv` and `manifest.json` under the
/// experiment directory.
pub fn run_experiment(config: &ExperimentConfig, root: &Path) -> Result<ExperimentOutcome> {
    config.validate()?;
    let dir = config.output_dir(root);
    let mut records = Vec::with_capacity(config.replicate_seeds.len());
    for &seed in &config.replicate_seeds {
        let record = run_replicate(config, seed).map_err(|e| Error::Replicate {
            seed,
            source: Box::new(e),
        })?;
        records.push((seed, record));
    }
    let curve = aggregate(records.iter().map(|(_, r)| r))?;
    fs::create_dir_all(&dir)?;
    for (seed, record) in &records {
        record.save(&dir, &format!("seed_{seed}"))?;
    }
    fs::write(dir.join("aggregate.csv"), curve.to_csv_string()?)?;
    let manifest = json!({
        "tool_version": concat!("hyq-core ", env!("CARGO_PKG_VERSION")),
        "config": config,
    });
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(ExperimentOutcome { curve, records, dir })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hard_config() -> ExperimentConfig {
        ExperimentConfig::from_json(
            r#"{
                "id": "hard",
                "env": {"kind": "hard_instance", "params": {"variant": "M1"}},
                "dataset": {"kind": "hard_instance", "m_off": 20},
                "algorithm": {"name": "hyq_qtype", "params": {"iterations": 5}},
                "replicate_seeds": [0, 1, 2]
            }"#,
        )
        .unwrap()
    }

    #[test]
    fn parse_errors_name_the_field() {
        let err = ExperimentConfig::from_json(r#"{"id": "x", "env": {"kind": 3}}"#).unwrap_err();
        assert!(err.to_string().contains("`env.kind`"), "{err}");
        let mut c = hard_config();
        c.algorithm.params = json!({"m_on": 0});
        let err = c.validate().unwrap_err().to_string();
        assert!(err.contains("algorithm.params.m_on"), "{err}");
        c.algorithm.params = json!({"iterations": "many"});
        let err = c.validate().unwrap_err().to_string();
        assert!(err.contains("algorithm.params.iterations"), "{err}");
        c.algorithm.params = json!({"function_class": {"name": "deep"}});
        assert!(c.validate().unwrap_err().to_string().contains("algorithm.params.function_class"));
    }

    #[test]
    fn validation_rejects_bad_references() {
        let mut c = hard_config();
        c.replicate_seeds.clear();
        assert!(c.validate().unwrap_err().to_string().contains("replicate_seeds"));
        let mut c = hard_config();
        c.replicate_seeds = vec![1, 1];
        assert!(c.validate().is_err());
        let mut c = hard_config();
        c.env.kind = "maze".into();
        assert!(c.validate().unwrap_err().to_string().contains("unknown environment `maze`"));
        let mut c = hard_config();
        c.env.kind = "comb_lock".into();
        c.env.params = Value::Null;
        assert!(c.validate().unwrap_err().to_string().contains("dataset.kind"));
        let mut c = hard_config();
        c.algorithm.name = "ppo".into();
        assert!(c.validate().unwrap_err().to_string().contains("algorithm.name"));
    }

    #[test]
    fn every_algorithm_runs_on_a_small_instance() {
        let env = env_registry().get("random_tabular").unwrap()(&json!({"n_states": 3, "n_actions": 2, "horizon": 3}), 4).unwrap();
        let data = dataset_registry().get("uniform").unwrap()(&env, 30, 1).unwrap();
        let params = json!({
            "hyq": {"iterations": 3},
            "hyq_qtype": {"iterations": 3},
            "hyq_vtype": {"iterations": 3},
            "hyq_discounted": {"total_steps": 300, "record_every": 50, "n_target": 20, "return_window": 5},
            "offline_fqi": {},
            "behavior_cloning": {},
            "online_fqi": {"iterations": 3},
        });
        let algos = algorithm_registry();
        for name in algos.names() {
            let rec = algos.get(name).unwrap().run(env.env.as_ref(), &data, &params[name], 7).unwrap();
            assert!(!rec.rows.is_empty(), "{name}");
            assert!(rec.rows.iter().all(|r| r.eval_return.is_finite()), "{name}");
        }
    }

    #[test]
    fn replicate_failure_names_the_seed() {
        let mut c = hard_config();
        c.dataset.kind = "empty".into();
        c.algorithm = AlgorithmSpec {
            name: "behavior_cloning".into(),
            params: Value::Null,
        };
        c.replicate_seeds = vec![9, 3];
        c.validate().unwrap();
        let root = tempfile::tempdir().unwrap();
        match run_experiment(&c, root.path()).unwrap_err() {
            Error::Replicate { seed, .. } => assert_eq!(seed, 9),
            e => panic!("unexpected {e}"),
        }
        assert!(!root.path().join("hard").exists());
    }
}
