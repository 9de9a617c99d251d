//! Acceptance criteria 1-7. Each test prints one `criterion N: PASS|FAIL`
//! line and then asserts. Tests are serialized so wall-clock limits are
//! measured without contention.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use hyq_core::analysis::{
    bilinear_verify, density_ratio_chain, elliptical_potential_check, optimism_check, perf_diff_check,
    transfer_coefficient, Extended,
};
use hyq_core::envs::{make_hard_instance, HardInstanceVariant, ACTION_L, ACTION_R, STATE_A, STATE_B, STATE_C};
use hyq_core::function_approx::{locknet_forward, locknet_grad, ridge_solve, LockNet};
use hyq_core::harness::{run_experiment, ExperimentConfig, ExperimentOutcome};
use hyq_core::mdp::{value_iteration, Policy, QTable, TabularMdp};
use hyq_core::rng::{derive_seed, seeded};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde_json::json;

const PERF_DIFF_TOL: f64 = 1e-9;
const OPTIMISM_SLACK: f64 = 1e-9;
const BILINEAR_TOL: f64 = 1e-12;
const ELLIPTICAL_SLACK: f64 = 1e-9;
const RIDGE_TOL: f64 = 1e-8;
const FD_TOL: f64 = 1e-4;
const LOCK_MEDIAN_MIN: f64 = 0.8;
const LOCK_SAMPLE_BUDGET: f64 = 1.5e6;
const BC_MAX: f64 = 0.2;
const OFFLINE_FQI_MAX: f64 = 0.5;

const LIMIT_IDENTITIES: Duration = Duration::from_secs(30);
const LIMIT_HARD_INSTANCE: Duration = Duration::from_secs(5);
const LIMIT_TRANSFER: Duration = Duration::from_secs(30);
const LIMIT_LOCK: Duration = Duration::from_secs(30 * 60);
const LIMIT_KERNELS: Duration = Duration::from_secs(10);

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn verdict(n: u32, pass: bool, detail: &str) -> bool {
    println!("criterion {n}: {} - {detail}", if pass { "PASS" } else { "FAIL" });
    pass
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn load(name: &str) -> ExperimentConfig {
    ExperimentConfig::load(&configs().join(format!("{name}.json"))).unwrap()
}

fn run(config: &ExperimentConfig) -> (ExperimentOutcome, tempfile::TempDir) {
    let root = tempfile::tempdir().unwrap();
    (run_experiment(config, root.path()).unwrap(), root)
}

fn random_mdp(rng: &mut impl Rng) -> TabularMdp {
    let (ns, na, hn) = (rng.random_range(2..=6), rng.random_range(2..=4), rng.random_range(1..=6));
    TabularMdp::random(ns, na, hn, rng)
}

fn random_table(mdp: &TabularMdp, rng: &mut impl Rng) -> QTable {
    let vmax = mdp.v_max();
    QTable::from_fn(mdp.horizon(), mdp.n_states(), mdp.n_actions(), |_, _, _| rng.random::<f64>() * vmax)
}

fn random_policy(mdp: &TabularMdp, rng: &mut impl Rng) -> Policy {
    let (hn, ns, na) = (mdp.horizon(), mdp.n_states(), mdp.n_actions());
    let mut probs: Vec<f64> = (0..hn * ns * na).map(|_| rng.random::<f64>()).collect();
    for row in probs.chunks_mut(na) {
        let t: f64 = row.iter().sum();
        row.iter_mut().for_each(|p| *p /= t);
    }
    Policy::new(hn, ns, na, probs).unwrap()
}

#[test]
fn criterion_1_exact_identities() {
    let _g = serial();
    let start = Instant::now();
    let (mut perf_gap, mut opt_excess, mut bil_gap, mut ell_excess) = (0.0f64, f64::NEG_INFINITY, 0.0f64, f64::NEG_INFINITY);
    for case in 0..1000u64 {
        let rng = &mut seeded(derive_seed(0xACCE, case));
        let mdp = random_mdp(rng);
        let f = random_table(&mdp, rng);
        perf_gap = perf_gap.max(perf_diff_check(&mdp, &f).gap);
        let o = optimism_check(&mdp, &f, &random_policy(&mdp, rng));
        opt_excess = opt_excess.max(o.lhs - o.rhs);
        let g = random_table(&mdp, rng);
        for r in bilinear_verify(&mdp, &f, &g) {
            bil_gap = bil_gap.max(r.gap);
        }

        let (d, t) = (rng.random_range(1..=8), rng.random_range(1..=200));
        let xs: Vec<Vec<f64>> = (0..t).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let b2 = xs.iter().map(|x| x.iter().map(|v| v * v).sum::<f64>()).fold(0.0, f64::max);
        let e = elliptical_potential_check(&xs, b2.max(1e-6) * rng.random_range(1.0..3.0)).unwrap();
        ell_excess = ell_excess.max(e.lhs - e.rhs);
    }
    let elapsed = start.elapsed();
    let pass = perf_gap <= PERF_DIFF_TOL
        && opt_excess <= OPTIMISM_SLACK
        && bil_gap <= BILINEAR_TOL
        && ell_excess <= ELLIPTICAL_SLACK
        && elapsed < LIMIT_IDENTITIES;
    assert!(verdict(
        1,
        pass,
        &format!(
            "1000 instances: perf-diff gap {perf_gap:.2e}, optimism max(lhs-rhs) {opt_excess:.2e}, bilinear gap {bil_gap:.2e}, elliptical max(lhs-rhs) {ell_excess:.2e}, {elapsed:.2?}"
        )
    ));
}

#[test]
fn criterion_2_hard_instance() {
    let _g = serial();
    let hyq = load("hard_instance_hyq");
    let fqi = load("hard_instance_offline_fqi");
    assert_eq!(hyq.algorithm.name, "hyq_qtype");
    assert_eq!(hyq.algorithm.params["iterations"], 50);
    assert_eq!(hyq.algorithm.params["m_on"], 1);
    assert_eq!(hyq.algorithm.params["function_class"]["name"], "tabular");
    assert_eq!(hyq.algorithm.params["tie_break"], fqi.algorithm.params["tie_break"]);
    assert_eq!(hyq.algorithm.params["tie_break"]["kind"], "adversarial_to");
    assert_eq!(hyq.replicate_seeds.len(), 10);

    let start = Instant::now();
    let (h, _d1) = run(&hyq);
    let (o, _d2) = run(&fqi);
    let elapsed = start.elapsed();
    let hyq_values: Vec<f64> = h.records.iter().map(|(_, r)| r.final_return().unwrap()).collect();
    let fqi_values: Vec<f64> = o.records.iter().map(|(_, r)| r.final_return().unwrap()).collect();
    let pass = hyq_values.iter().all(|&v| v == 1.0)
        && fqi_values.iter().all(|&v| v == 0.0)
        && elapsed < LIMIT_HARD_INSTANCE;
    assert!(verdict(
        2,
        pass,
        &format!("offline_fqi values {fqi_values:?}; hyq_qtype values {hyq_values:?}; {elapsed:.2?}")
    ));
}

fn ab_support() -> Vec<Vec<f64>> {
    let mut nu0 = vec![0.0; 6];
    nu0[STATE_A * 2] = 0.5;
    nu0[STATE_A * 2 + 1] = 0.5;
    let mut nu1 = vec![0.0; 6];
    nu1[STATE_B * 2] = 0.5;
    nu1[STATE_B * 2 + 1] = 0.5;
    vec![nu0, nu1]
}

#[test]
fn criterion_3_transfer_coefficient() {
    let _g = serial();
    let start = Instant::now();
    let (m1, pi_star) = make_hard_instance(HardInstanceVariant::M1);
    let (m2, _) = make_hard_instance(HardInstanceVariant::M2);
    let class = vec![value_iteration(&m1).0, value_iteration(&m2).0];
    let nu = ab_support();
    let c_star = transfer_coefficient(&m1, &pi_star, &nu, &class).unwrap().value;
    let visit_c = |at_c: usize| {
        Policy::deterministic(2, 3, 2, move |h, s| match (h, s) {
            (0, STATE_A) => ACTION_R,
            (1, STATE_C) => at_c,
            _ => ACTION_L,
        })
    };
    // the C-visiting policy that collects M1's reward
    let c_visit = transfer_coefficient(&m1, &visit_c(ACTION_R), &nu, &class).unwrap().value;
    // (A -> R, C -> L): infinite in M2, zero in M1 (Q*_{M2} overvalues (C, L))
    let c_fail_m2 = transfer_coefficient(&m2, &visit_c(ACTION_L), &nu, &class).unwrap().value;
    let c_fail_m1 = transfer_coefficient(&m1, &visit_c(ACTION_L), &nu, &class).unwrap().value;
    let oracle_ok = c_star == Extended::Finite(0.0)
        && c_visit == Extended::Infinite
        && c_fail_m2 == Extended::Infinite
        && c_fail_m1 == Extended::Finite(0.0);

    let (mut literal_fail, mut corrected_fail, mut worst) = (0, 0, 0.0f64);
    for case in 0..100u64 {
        let rng = &mut seeded(derive_seed(0xC0EF, case));
        let mdp = random_mdp(rng);
        let cells = mdp.n_states() * mdp.n_actions();
        let uniform = vec![vec![1.0 / cells as f64; cells]; mdp.horizon()];
        let class: Vec<QTable> = (0..4).map(|_| random_table(&mdp, rng)).collect();
        let pi = random_policy(&mdp, rng);
        let c = density_ratio_chain(&mdp, &pi, &uniform, &class).unwrap();
        if !c.literal_holds {
            literal_fail += 1;
            worst = worst.max(c.c_pi.as_f64() / c.norm_ratio_bound.as_f64());
        }
        corrected_fail += usize::from(!c.corrected_holds);
    }
    let elapsed = start.elapsed();
    println!(
        "  oracle: C(pi*) = {c_star:?}, C(A->R,C->R | M1) = {c_visit:?}, C(A->R,C->L | M2) = {c_fail_m2:?}, C(A->R,C->L | M1) = {c_fail_m1:?}"
    );
    println!(
        "  chain on 100 instances, uniform nu: C <= norm-ratio <= sup-ratio violated {literal_fail} times (worst C/norm-ratio {worst:.3}); C <= sqrt(H)*norm-ratio <= sup-ratio violated {corrected_fail} times"
    );
    let pass = oracle_ok && literal_fail == 0 && elapsed < LIMIT_TRANSFER;
    assert!(verdict(
        3,
        pass,
        &format!("oracle values {}, literal chain {literal_fail}/100 violations, {elapsed:.2?}", if oracle_ok { "match" } else { "MISMATCH" })
    ));
}

fn check_lock_config(c: &ExperimentConfig, data: &str) {
    assert_eq!(c.env.kind, "comb_lock");
    assert_eq!(c.env.params["horizon"], 10);
    assert_eq!(c.dataset.kind, data);
    assert_eq!(c.dataset.m_off, 2000);
    assert_eq!(c.replicate_seeds.len(), 5);
}

fn lock_hyq(name: &str, data: &str) -> (f64, f64, Duration) {
    let c = load(name);
    check_lock_config(&c, data);
    assert_eq!(c.algorithm.name, "hyq_vtype");
    assert_eq!(
        c.algorithm.params["function_class"],
        json!({"name": "locknet", "params": {"lr": 0.02, "n_updates": 500, "batch_size": 512}})
    );
    let start = Instant::now();
    let (out, _dir) = run(&c);
    let last = out.curve.points.last().unwrap();
    (last.median, last.x, start.elapsed())
}

#[test]
fn criterion_4_lock_occupancy_dataset() {
    let _g = serial();
    let (median, samples, t_hyq) = lock_hyq("lock_h10_hyq_occupancy", "optimal_occupancy");

    let bc = load("lock_h10_bc");
    check_lock_config(&bc, "optimal_occupancy");
    let fqi = load("lock_h10_offline_fqi");
    check_lock_config(&fqi, "optimal_occupancy");
    assert_eq!(fqi.algorithm.params["function_class"]["name"], "locknet");
    let start = Instant::now();
    let (bc_out, _d1) = run(&bc);
    let (fqi_out, _d2) = run(&fqi);
    let elapsed = t_hyq + start.elapsed();
    let bc_median = bc_out.curve.final_median().unwrap();
    let fqi_median = fqi_out.curve.final_median().unwrap();
    let pass = median >= LOCK_MEDIAN_MIN
        && samples <= LOCK_SAMPLE_BUDGET
        && bc_median <= BC_MAX
        && fqi_median <= OFFLINE_FQI_MAX
        && elapsed < LIMIT_LOCK;
    assert!(verdict(
        4,
        pass,
        &format!(
            "Hy-Q median {median:.3} at {samples} samples; BC median {bc_median:.3}; offline FQI median {fqi_median:.3}; {elapsed:.1?}"
        )
    ));
}

#[test]
fn criterion_5_lock_trajectory_dataset() {
    let _g = serial();
    let (median, samples, elapsed) = lock_hyq("lock_h10_hyq_trajectory", "optimal_trajectory");
    let pass = median >= LOCK_MEDIAN_MIN && samples <= LOCK_SAMPLE_BUDGET && elapsed < LIMIT_LOCK;
    assert!(verdict(5, pass, &format!("Hy-Q median {median:.3} at {samples} samples; {elapsed:.1?}")));
}

#[test]
fn criterion_6_numerical_kernels() {
    let _g = serial();
    let start = Instant::now();
    let mut ridge_worst = 0.0f64;
    for case in 0..300u64 {
        let rng = &mut seeded(derive_seed(0x51D6E, case));
        let (n, p) = (rng.random_range(2..=200), rng.random_range(1..=20));
        let x = DMatrix::from_fn(n, p, |_, _| rng.random_range(-2.0..2.0));
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let lambda = [0.0, 1e-8, 1e-3, 1.0, 100.0][case as usize % 5];
        let w = DVector::from_vec(ridge_solve(&x, &y, lambda).unwrap().weights);
        let a = x.transpose() * &x + DMatrix::identity(p, p) * lambda;
        let b = x.transpose() * DVector::from_column_slice(&y);
        ridge_worst = ridge_worst.max((a * w - &b).amax() / b.amax().max(1.0));
    }

    let mut fd_worst = 0.0f64;
    for net_seed in 0..50u64 {
        let rng = &mut seeded(derive_seed(0xFD, net_seed));
        let (dim, na) = (rng.random_range(2..=16), rng.random_range(2..=10));
        let net = LockNet::random(dim, na, rng);
        let obs: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (a, y) = (rng.random_range(0..na), rng.random::<f64>());
        let grad = locknet_grad(&net, &[(&obs, a, y)]);
        let base = net.params();
        let loss = |p: &[f64]| {
            let mut m = net.clone();
            m.set_params(p);
            (locknet_forward(&m, &obs, a) - y).powi(2)
        };
        for _ in 0..20 {
            let k = rng.random_range(0..base.len());
            let (mut up, mut down) = (base.clone(), base.clone());
            up[k] += 1e-5;
            down[k] -= 1e-5;
            let fd = (loss(&up) - loss(&down)) / 2e-5;
            fd_worst = fd_worst.max((fd - grad[k]).abs() / fd.abs().max(grad[k].abs()).max(1e-6));
        }
    }
    let elapsed = start.elapsed();
    let pass = ridge_worst <= RIDGE_TOL && fd_worst <= FD_TOL && elapsed < LIMIT_KERNELS;
    assert!(verdict(
        6,
        pass,
        &format!("ridge relative residual {ridge_worst:.2e} (300 systems); LockNet FD rel. error {fd_worst:.2e} (50 nets x 20 coords); {elapsed:.2?}")
    ));
}

fn csv_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    v.sort();
    v
}

#[test]
fn criterion_7_determinism() {
    let _g = serial();
    let mut lock = load("lock_h10_hyq_occupancy");
    lock.replicate_seeds = vec![0, 1];
    lock.algorithm.params["iterations"] = json!(2);
    lock.algorithm.params["m_on"] = json!(10);
    let mut cfgs = vec![lock];
    for name in [
        "hard_instance_hyq",
        "hard_instance_offline_fqi",
        "random_tabular_hyq",
        "random_tabular_discounted",
        "low_rank_linear_hyq",
        "lock_h10_bc",
    ] {
        cfgs.push(load(name));
    }
    let mut mismatched = Vec::new();
    let mut compared = 0;
    for c in &cfgs {
        let (a, _da) = run(c);
        let (b, _db) = run(c);
        let (fa, fb) = (csv_bytes(&a.dir), csv_bytes(&b.dir));
        assert_eq!(fa.len(), c.replicate_seeds.len() + 1);
        compared += fa.len();
        if fa != fb {
            mismatched.push(c.id.clone());
        }
    }
    assert!(verdict(
        7,
        mismatched.is_empty(),
        &format!("{} configs, {compared} CSV files compared byte-for-byte; mismatches: {mismatched:?}", cfgs.len())
    ));
}
