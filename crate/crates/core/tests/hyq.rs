use hyq_core::datasets::{gen_hard_instance_offline, gen_optimal_trajectory, OfflineDataset};
use hyq_core::envs::{
    hard_instance_failure_policy, make_hard_instance, HardInstanceVariant, TabularEnv,
};
use hyq_core::hyq::{
    hyq_qtype, hyq_vtype, run_finite, ClassSelector, EvalMode, HyQConfig, TieBreak, Variant,
};
use hyq_core::mdp::{policy_value, value_iteration, TabularMdp};
use hyq_core::rng::seeded;
use serde_json::json;

fn hard_env() -> (TabularEnv, TabularMdp) {
    let (mdp, _) = make_hard_instance(HardInstanceVariant::M1);
    (TabularEnv::new("hard", mdp.clone()), mdp)
}

#[test]
fn hard_instance_recovers_optimal_value() {
    let (env, mdp) = hard_env();
    let data = gen_hard_instance_offline(HardInstanceVariant::M1, 20, 1).unwrap();
    for tie in [
        TieBreak::LowestIndex,
        TieBreak::AdversarialTo {
            policy: hard_instance_failure_policy(),
        },
    ] {
        for unvisited in ["zero", "v_max"] {
            let config = HyQConfig {
                iterations: 50,
                m_on: 1,
                function_class: ClassSelector::new("tabular", json!({ "unvisited": unvisited })),
                tie_break: tie.clone(),
                ..HyQConfig::default()
            };
            let rec = hyq_qtype(&env, &data, &config).unwrap();
            assert_eq!(rec.final_return(), Some(1.0), "{tie:?} {unvisited}");
            let pi = rec.final_policy.unwrap();
            assert_eq!(policy_value(&mdp, &pi), 1.0);
        }
    }
}

#[test]
fn single_iteration_policy_is_set_by_tie_break() {
    let (env, _) = hard_env();
    let data = gen_hard_instance_offline(HardInstanceVariant::M1, 5, 0).unwrap();
    let base = HyQConfig {
        iterations: 1,
        ..HyQConfig::default()
    };
    let adversarial = HyQConfig {
        tie_break: TieBreak::AdversarialTo {
            policy: hard_instance_failure_policy(),
        },
        ..base.clone()
    };
    assert_eq!(hyq_qtype(&env, &data, &base).unwrap().rows[0].eval_return, 1.0);
    assert_eq!(hyq_qtype(&env, &data, &adversarial).unwrap().rows[0].eval_return, 0.0);
}

fn random_setup(seed: u64) -> (TabularEnv, OfflineDataset, TabularMdp) {
    let mdp = TabularMdp::random(5, 3, 4, &mut seeded(seed));
    let pi = hyq_core::mdp::Policy::uniform(4, 5, 3);
    let data = gen_optimal_trajectory(&mdp, &pi, 6, seed).unwrap();
    (TabularEnv::new("random", mdp.clone()), data, mdp)
}

#[test]
fn sample_accounting() {
    let (env, data, _) = random_setup(2);
    let (t, m_on, h) = (7usize, 3usize, 4u64);
    let config = HyQConfig {
        iterations: t,
        m_on,
        ..HyQConfig::default()
    };
    let q = hyq_qtype(&env, &data, &config).unwrap();
    let v = hyq_vtype(&env, &data, &config).unwrap();
    assert_eq!(q.rows.len(), t + 1);
    assert_eq!(q.rows.last().unwrap().online_steps, (t * m_on) as u64 * h);
    assert_eq!(v.rows.last().unwrap().online_steps, (t * m_on) as u64 * h * (h + 1) / 2);
    for rec in [&q, &v] {
        assert!(rec.rows.windows(2).all(|w| w[0].online_steps <= w[1].online_steps
            && w[0].offline_samples <= w[1].offline_samples));
        assert!(rec.rows.iter().all(|r| r.offline_samples == 24));
    }
}

#[test]
fn offline_data_enters_every_regression_in_backward_order() {
    let (env, data, _) = random_setup(3);
    for variant in [Variant::QType, Variant::VType] {
        let config = HyQConfig {
            iterations: 5,
            m_on: 2,
            variant,
            ..HyQConfig::default()
        };
        let (rec, _) = run_finite(&env, &data, &config).unwrap();
        assert_eq!(rec.fit_log.len(), 5 * 4);
        for (i, e) in rec.fit_log.iter().enumerate() {
            assert_eq!(e.iter, i / 4 + 1);
            assert_eq!(e.h, 3 - i % 4);
            assert_eq!(e.n_offline, data.step(e.h).len());
            assert_eq!(e.n_online, e.iter * 2);
        }
    }
}

#[test]
fn identical_seeds_give_identical_records() {
    let (env, data, _) = random_setup(4);
    let config = HyQConfig {
        iterations: 6,
        m_on: 2,
        seed: 9,
        eval: EvalMode::MonteCarlo { n_episodes: 10 },
        ..HyQConfig::default()
    };
    let a = hyq_vtype(&env, &data, &config).unwrap();
    let b = hyq_vtype(&env, &data, &config).unwrap();
    assert_eq!(a, b);
    let c = hyq_vtype(&env, &data, &HyQConfig { seed: 10, ..config }).unwrap();
    assert_ne!(a.rows, c.rows);
}

#[test]
fn empty_offline_runs_as_online_fqi_with_warning() {
    let (env, _, _) = random_setup(5);
    let rec = hyq_qtype(&env, &OfflineDataset::empty(4), &HyQConfig {
        iterations: 3,
        ..HyQConfig::default()
    })
    .unwrap();
    assert_eq!(rec.warnings.len(), 1);
    assert!(rec.rows.iter().all(|r| r.offline_samples == 0));
    assert!(rec.rows.iter().all(|r| r.bellman_residual_offline.is_none()));
}

#[test]
fn tabular_hyq_approaches_optimum_on_random_mdp() {
    let mdp = TabularMdp::random(5, 3, 4, &mut seeded(6));
    let (q, v) = value_iteration(&mdp);
    let pi_star = hyq_core::mdp::Policy::deterministic(4, 5, 3, |h, s| {
        let row = q.row(h, s);
        (0..3).fold(0, |b, a| if row[a] > row[b] { a } else { b })
    });
    let data = gen_optimal_trajectory(&mdp, &pi_star, 50, 6).unwrap();
    let env = TabularEnv::new("random", mdp.clone());
    let v_star = hyq_core::mdp::expect_initial(&mdp, &v[0]);
    let rec = hyq_qtype(&env, &data, &HyQConfig {
        iterations: 400,
        m_on: 5,
        ..HyQConfig::default()
    })
    .unwrap();
    let last = rec.final_return().unwrap();
    assert!(v_star - last <= 0.05 * v_star.max(1.0), "{last} vs {v_star}");
}

#[test]
fn invalid_configs_rejected() {
    let (env, data, _) = random_setup(7);
    for bad in [
        HyQConfig { iterations: 0, ..HyQConfig::default() },
        HyQConfig { m_on: 0, ..HyQConfig::default() },
        HyQConfig { function_class: ClassSelector::new("nope", json!(null)), ..HyQConfig::default() },
        HyQConfig { function_class: ClassSelector::new("locknet", json!(null)), ..HyQConfig::default() },
    ] {
        assert!(hyq_qtype(&env, &data, &bad).is_err());
    }
}
