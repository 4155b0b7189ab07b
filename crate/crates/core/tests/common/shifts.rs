//! Structural checks on predicted shifts.

use kelab::base::{init_base_model, W1, W2};
use kelab::editor::{EditorConfig, EditorNodes, EditorParams};
use kelab::params::ParamSet;
use kelab::rng::seeded;
use kelab::tensor::{Bindings, Graph, Tensor};
use nalgebra::DMatrix;
use rand::Rng;

pub fn config(theta: &ParamSet<f64>, cond_dim: usize) -> EditorConfig {
    EditorConfig {
        vocab: 16,
        embed_dim: 3,
        hidden: 4,
        cond_dim,
        head_hidden: 5,
        targets: EditorConfig::targets_of(theta).unwrap(),
        sep_token: 0,
        class_tokens: (1..=5).collect(),
    }
}

fn singular_values(t: &Tensor<f64>) -> Vec<f64> {
    let (r, c) = t.as_matrix_dims();
    let mut s: Vec<f64> = DMatrix::from_row_slice(r, c, t.data()).svd(false, false).singular_values.iter().cloned().collect();
    s.sort_by(|a, b| b.partial_cmp(a).unwrap());
    s
}

/// Rank-one factors, gate range, shapes and row sums over `draws` random
/// editors, conditioning vectors and gradients.
pub fn check_shift_structure(draws: u64) -> Result<(), String> {
    let mut rng = seeded(77);
    for draw in 0..draws {
        let d = rng.random_range(2..=6);
        let dh = rng.random_range(2..=8);
        let c = rng.random_range(2..=5);
        let theta = init_base_model::<f64>(d, dh, c, 16, draw).unwrap();
        let cond = rng.random_range(2..=6);
        let mut phi = EditorParams::<f64>::init(config(&theta, cond), 1000 + draw).unwrap();
        let spread = rng.random_range(0.5..3.0);
        for t in phi.tensors_mut().values_mut() {
            *t = t.scale(spread);
        }
        let mut g = Graph::<f64>::new();
        let mut b = Bindings::new();
        let nodes = EditorNodes::declare(&mut g, &phi, &mut b);
        let h = g.constant(Tensor::uniform(&[1, cond], 1.0, &mut rng));
        let mut checks = Vec::new();
        for name in [W1, W2] {
            let w = theta.get(name).unwrap();
            let grad = g.constant(Tensor::uniform(w.shape(), 1.0, &mut rng));
            checks.push((name, w.shape().to_vec(), nodes.shift(&mut g, h, grad, name, true)));
        }
        let vals = g.forward(&b).unwrap();
        for (name, shape, s) in checks {
            let fail = |what: String| Err(format!("draw {draw} {name}: {what}"));
            if vals.get(s.delta_w).shape() != &shape[..] {
                return fail(format!("shift shape {:?}", vals.get(s.delta_w).shape()));
            }
            let gate = vals.get(s.gate).item();
            if !(gate > 0.0 && gate < 1.0) {
                return fail(format!("gate {gate}"));
            }
            for factor in [s.alpha_hat, s.beta_hat] {
                let t = vals.get(factor);
                if t.shape() != &shape[..] {
                    return fail(format!("factor shape {:?}", t.shape()));
                }
                let sv = singular_values(t);
                if sv.len() > 1 && (sv[1].is_nan() || sv[1] >= 1e-6 * sv[0]) {
                    return fail(format!("singular values {sv:?}"));
                }
            }
            for (factor, scale) in [(s.alpha_hat, s.gamma), (s.beta_hat, s.delta)] {
                let (f, sc) = (vals.get(factor), vals.get(scale).data());
                for (i, want) in sc.iter().enumerate() {
                    let row: f64 = f.row(i).iter().sum();
                    if (row - want).abs() >= 1e-5 {
                        return fail(format!("row {i} sums to {row}, expected {want}"));
                    }
                }
            }
        }
    }
    Ok(())
}
