//! Structure of predicted shifts and of edit application.

mod common;

use common::shifts::config;
use kelab::base::{init_base_model, EMBED, W1, W2};
use kelab::data::Split;
use kelab::editor::{apply_edit, compute_shifts, edit_once, EditorNodes, EditorParams, ShiftSet};
use kelab::params::ParamSet;
use kelab::requests::EditRequest;
use kelab::rng::seeded;
use kelab::tensor::{Bindings, Graph, Tensor};
use proptest::prelude::*;


fn request(x: Vec<u32>, y: u32, a: u32) -> EditRequest {
    EditRequest {
        id: 0,
        example: 0,
        fact_id: 0,
        split: Split::Test,
        paraphrases: vec![x.clone()],
        x,
        y,
        a,
    }
}

#[test]
fn shift_factors_are_rank_one_and_gated() {
    common::shifts::check_shift_structure(50).unwrap();
}

#[test]
fn stop_gradient_keeps_forward_values_and_blocks_the_gradient_input() {
    let theta = init_base_model::<f64>(4, 5, 3, 16, 3).unwrap();
    let phi = EditorParams::<f64>::init(config(&theta, 4), 8).unwrap();
    let mut rng = seeded(5);
    let hv = Tensor::uniform(&[1, 4], 1.0, &mut rng);
    let gv = Tensor::uniform(theta.get(W1).unwrap().shape(), 1.0, &mut rng);
    let mut outs = Vec::new();
    for stop in [false, true] {
        let mut g = Graph::<f64>::new();
        let mut b = Bindings::new();
        let nodes = EditorNodes::declare(&mut g, &phi, &mut b);
        let h = g.constant(hv.clone());
        let grad = g.leaf("grad");
        b.bind(grad, &gv);
        let s = nodes.shift(&mut g, h, grad, W1, stop);
        let total = g.sum(s.delta_w);
        let (vals, grads) = g.forward_backward(&b, total).unwrap();
        let dgrad = grads.get(grad).map(|t| t.max_abs()).unwrap_or(0.0);
        outs.push((vals.get(s.delta_w).clone(), dgrad));
    }
    assert!(outs[0].0.bit_eq(&outs[1].0));
    assert!(outs[0].1 > 0.0);
    assert_eq!(outs[1].1, 0.0);
}

#[test]
fn applying_the_negated_shift_restores_the_model() {
    let theta = init_base_model::<f64>(4, 6, 3, 16, 4).unwrap();
    let phi = EditorParams::<f64>::init(config(&theta, 5), 9).unwrap();
    let req = request(vec![7, 8, 9], 0, 2);
    let shifts = compute_shifts(&phi, &theta, &req).unwrap();
    let edited = apply_edit(&theta, &shifts).unwrap();
    let neg: ShiftSet<f64> = shifts.iter().map(|(k, v)| (k.clone(), v.scale(-1.0))).collect();
    let back = apply_edit(&edited, &neg).unwrap();
    for (name, t) in theta.iter() {
        let diff = t.sub(back.get(name).unwrap()).unwrap().max_abs();
        assert!(diff < 1e-12, "{name}: {diff}");
    }
    assert!(edited.get(EMBED).unwrap().bit_eq(theta.get(EMBED).unwrap()));
}

#[test]
fn f32_and_f64_editors_agree() {
    let theta64 = init_base_model::<f64>(4, 6, 3, 16, 4).unwrap();
    let phi64 = EditorParams::<f64>::init(config(&theta64, 5), 9).unwrap();
    let theta32: ParamSet<f32> = theta64.cast();
    let phi32: EditorParams<f32> = phi64.cast();
    let req = request(vec![7, 8, 9], 1, 0);
    let a = edit_once(&phi64, &theta64, &req).unwrap();
    let b = edit_once(&phi32, &theta32, &req).unwrap();
    for name in [W1, W2] {
        let diff = a.get(name).unwrap().sub(&b.get(name).unwrap().cast()).unwrap().max_abs();
        assert!(diff < 1e-5, "{name}: {diff}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn edits_touch_only_editable_matrices(seed in 0u64..1000, x in prop::collection::vec(6u32..16, 1..6), y in 0u32..3, da in 1u32..3) {
        let a = (y + da) % 3;
        let theta = init_base_model::<f64>(3, 4, 3, 16, seed).unwrap();
        let phi = EditorParams::<f64>::init(config(&theta, 3), seed + 1).unwrap();
        let edited = edit_once(&phi, &theta, &request(x, y, a)).unwrap();
        for (name, t) in theta.iter() {
            let same = t.bit_eq(edited.get(name).unwrap());
            if theta.is_editable(name) {
                prop_assert_eq!(edited.get(name).unwrap().shape(), t.shape());
            } else {
                prop_assert!(same, "{} changed", name);
            }
        }
    }

    #[test]
    fn zero_shift_is_bitwise_identity(seed in 0u64..1000) {
        let theta = init_base_model::<f64>(3, 4, 3, 16, seed).unwrap();
        let zero: ShiftSet<f64> = theta.editable().iter().map(|n| (n.clone(), Tensor::zeros(theta.get(n).unwrap().shape()))).collect();
        prop_assert!(apply_edit(&theta, &zero).unwrap().bit_eq(&theta));
    }
}
