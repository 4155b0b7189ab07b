//! Metric and comparison invariants.

mod common;

use kelab::data::Split;
use kelab::eval::{dirichlet_compare, full_report, EvalConfig};
use kelab::params::ParamSet;
use kelab::requests::EditRequest;
use proptest::prelude::*;

#[test]
fn identity_edit_report() {
    let t = common::tiny(6);
    let edit = |_: &EditRequest| -> kelab::Result<(ParamSet, usize)> { Ok((t.theta.clone(), 0)) };
    let pool = t.pool(Split::Test);
    let cfg = EvalConfig { retain_subsample: None, seed: 1 };
    let rep = full_report("identity", &t.theta, &edit, &t.test, &pool, &pool, &cfg).unwrap();
    assert_eq!(rep.success_rate, 0.0);
    assert_eq!(rep.retain_accuracy, 1.0);
    assert_eq!(rep.performance_deterioration, 0.0);
    assert_eq!(rep.equivalence_accuracy, 0.0);
    assert_eq!(rep.mean_kl, 0.0);
    assert_eq!(rep.records.len(), t.test.len());
}

#[test]
fn report_is_deterministic() {
    let t = common::tiny(6);
    let edit = |r: &EditRequest| kelab::baselines::finetune_edit(&t.theta, r, &kelab::baselines::FinetuneConfig { lr: 3e-2, ..Default::default() });
    let pool = t.pool(Split::Test);
    let cfg = EvalConfig { retain_subsample: Some(20), seed: 3 };
    let a = full_report("ft", &t.theta, &edit, &t.test, &pool, &pool, &cfg).unwrap();
    let b = full_report("ft", &t.theta, &edit, &t.test, &pool, &pool, &cfg).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    assert!(a.success_rate > 0.0);
}

fn metric() -> impl Strategy<Value = [f64; 4]> {
    prop::array::uniform4(0.0f64..1.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn comparison_is_antisymmetric(a in metric(), b in metric(), seed in any::<u64>()) {
        let ab = dirichlet_compare(&a, &b, 1000, seed).unwrap();
        let ba = dirichlet_compare(&b, &a, 1000, seed).unwrap();
        prop_assert!((ab + ba - 1.0).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&ab));
    }

    #[test]
    fn identical_metrics_tie(a in metric(), seed in any::<u64>()) {
        prop_assert_eq!(dirichlet_compare(&a, &a, 1000, seed).unwrap(), 0.5);
    }

    #[test]
    fn dominance_is_decisive(a in metric(), gap in prop::array::uniform4(0.01f64..0.5), seed in any::<u64>()) {
        // Benefits are (s, r, e, 1 - d): raise the first three and lower d.
        let b = [a[0] + gap[0], a[1] + gap[1], a[2] + gap[2], a[3] - gap[3]];
        prop_assert_eq!(dirichlet_compare(&b, &a, 1000, seed).unwrap(), 1.0);
        prop_assert_eq!(dirichlet_compare(&a, &b, 1000, seed).unwrap(), 0.0);
    }
}
