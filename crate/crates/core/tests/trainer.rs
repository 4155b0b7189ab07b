//! Editor objective gradients and training traces.

mod common;

use kelab::base::init_base_model;
use kelab::data::Split;
use kelab::editor::{EditorConfig, EditorParams};
use kelab::requests::EditRequest;
use kelab::trainer::{
    anneal_margin, request_objective, train_editor, update_multiplier, ConstraintKind, LagrangianState,
    MarginSchedule, MultiplierForm, OptimizerKind, RequestTerms, TrainConfig,
};
use proptest::prelude::*;

#[test]
fn objective_gradients_match_central_differences() {
    let theta = init_base_model::<f64>(2, 3, 3, 8, 1).unwrap();
    let cfg_e = EditorConfig {
        vocab: 8,
        embed_dim: 2,
        hidden: 2,
        cond_dim: 2,
        head_hidden: 2,
        targets: EditorConfig::targets_of(&theta).unwrap(),
        sep_token: 0,
        class_tokens: vec![1, 2, 3],
    };
    let phi = EditorParams::<f64>::init(cfg_e, 2).unwrap();
    assert!(phi.n_scalars() <= 500, "{}", phi.n_scalars());
    let req = EditRequest {
        id: 0,
        example: 0,
        fact_id: 0,
        split: Split::Train,
        x: vec![4, 5],
        y: 0,
        a: 2,
        paraphrases: vec![vec![4, 5], vec![5, 6, 4]],
    };
    let retain: Vec<&[u32]> = vec![&[6, 7], &[7], &[4, 7, 6]];
    for constraint in [ConstraintKind::Kl, ConstraintKind::L2] {
        for multiplier in [MultiplierForm::Absolute, MultiplierForm::Relative] {
            let cfg = TrainConfig {
                constraint,
                multiplier,
                ..TrainConfig::default()
            };
            let mut state = LagrangianState::new(0.7, &cfg.margin);
            state.margin = 0.05;
            let terms = RequestTerms { request: &req, retain: retain.clone() };
            let og = request_objective(&phi, &theta, &terms, &state, &cfg).unwrap();
            let grads = og.graph.backward(&og.bindings, og.objective).unwrap();
            let eps = 1e-4;
            for (name, &id) in og.nodes.iter() {
                let base = og.bindings.get(id).unwrap();
                for k in 0..base.numel() {
                    let f = |d: f64| {
                        let mut t = base.clone();
                        t.data_mut()[k] += d;
                        let mut b = og.bindings.clone();
                        b.bind(id, &t);
                        og.graph.forward(&b).unwrap().scalar(og.objective)
                    };
                    let numeric = (f(eps) - f(-eps)) / (2.0 * eps);
                    let a = grads.get(id).unwrap().data()[k];
                    // Absolute slack covers roundoff on components near 1e-9.
                    let tol = 1e-4 * a.abs().max(numeric.abs()) + 1e-9;
                    assert!((a - numeric).abs() <= tol, "{constraint:?}/{multiplier:?} {name}[{k}]: {a:e} vs {numeric:e}");
                }
            }
        }
    }
}

#[test]
fn training_trace_obeys_the_schedule() {
    let t = common::tiny(11);
    let theta = &t.theta;
    let ecfg = EditorConfig {
        vocab: t.ds.vocab_size(),
        embed_dim: 8,
        hidden: 8,
        cond_dim: 16,
        head_hidden: 8,
        targets: EditorConfig::targets_of(theta).unwrap(),
        sep_token: t.ds.world.sep(),
        class_tokens: t.ds.class_tokens().unwrap(),
    };
    let phi0 = EditorParams::init(ecfg, 3).unwrap();
    let schedule = MarginSchedule::new(5e-2, 1e-2);
    let cfg = TrainConfig {
        max_steps: 500,
        val_every: 10,
        batch: 8,
        lr_phi: 3e-3,
        optimizer: OptimizerKind::adam(),
        margin: schedule,
        multiplier: MultiplierForm::Relative,
        ..TrainConfig::default()
    };
    let out = train_editor(&phi0, &t.train, &t.val, theta, &t.pool(Split::Train), &t.pool(Split::Validation), &cfg)
        .map_err(|f| f.error)
        .unwrap();
    assert_eq!(out.history.len(), 500);
    common::check_trace(&out.history, &schedule).unwrap();
    assert!(out.history.iter().any(|r| r.margin < schedule.initial), "margin never annealed");
    let vals: Vec<_> = out.history.iter().filter(|r| r.val_success.is_some()).map(|r| r.step).collect();
    assert_eq!(vals, (1..=50).map(|k| k * 10).collect::<Vec<_>>());
    assert!(out.best_step > 0 && out.best_step % 10 == 0);
}

#[test]
fn invalid_config_fails_before_training() {
    let t = common::tiny(2);
    let ecfg = EditorConfig {
        vocab: t.ds.vocab_size(),
        embed_dim: 4,
        hidden: 4,
        cond_dim: 4,
        head_hidden: 4,
        targets: EditorConfig::targets_of(&t.theta).unwrap(),
        sep_token: t.ds.world.sep(),
        class_tokens: t.ds.class_tokens().unwrap(),
    };
    let phi0 = EditorParams::init(ecfg, 3).unwrap();
    let cfg = TrainConfig {
        lr_phi: -1.0,
        ..TrainConfig::default()
    };
    let f = train_editor(&phi0, &t.train, &t.val, &t.theta, &t.pool(Split::Train), &t.pool(Split::Validation), &cfg)
        .err()
        .unwrap();
    assert_eq!(f.step, 0);
    assert!(f.history.is_empty());
}

proptest! {
    #[test]
    fn multiplier_stays_non_negative(lambda in 0.0f64..10.0, lr in 1e-4f64..1.0, v in -100.0f64..100.0) {
        let next = update_multiplier(lambda, lr, v);
        prop_assert!(next >= 0.0);
        if v >= 0.0 {
            prop_assert!(next >= lambda);
        }
    }

    #[test]
    fn annealing_is_monotone_and_floored(margin in 1e-6f64..1.0, floor_frac in 0.0f64..1.0, success in 0.0f64..1.0) {
        let schedule = MarginSchedule::new(margin, margin * floor_frac.max(1e-3));
        let state = LagrangianState::new(0.0, &schedule);
        let next = anneal_margin(&state, success);
        prop_assert!(next.margin <= state.margin);
        prop_assert!(next.margin >= schedule.floor);
        if success > schedule.threshold {
            prop_assert_eq!(next.margin, (0.8 * margin).max(schedule.floor));
        } else {
            prop_assert_eq!(next.margin, margin);
        }
        prop_assert_eq!(next.lambda, state.lambda);
    }
}
