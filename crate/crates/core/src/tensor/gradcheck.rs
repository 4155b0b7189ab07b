//! Central finite-difference check of reverse-mode gradients.

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::dense::Tensor;
use crate::tensor::graph::{Bindings, Graph, NodeId};

/// Largest component-wise relative error between [`Graph::backward`] and
/// central differences with step `eps`, over every bound leaf. The
/// denominator is `max(|analytic|, |numeric|, 1e-8)`.
pub fn finite_diff_check<T: Scalar>(
    graph: &Graph<T>,
    bindings: &Bindings<'_, T>,
    seed: NodeId,
    eps: f64,
) -> Result<f64> {
    assert!(eps > 0.0, "finite-difference step must be positive");
    let grads = graph.backward(bindings, seed)?;
    let mut leaves: Vec<NodeId> = bindings.leaves().collect();
    leaves.sort();
    let mut worst = 0.0f64;
    for leaf in leaves {
        let base = bindings.get(leaf).expect("leaf listed by bindings");
        let analytic = grads.get(leaf).expect("gradient for every leaf");
        for k in 0..base.numel() {
            let eval = |delta: f64| -> Result<f64> {
                let mut bumped: Tensor<T> = base.clone();
                let x = bumped.data()[k].f64();
                bumped.data_mut()[k] = T::of(x + delta);
                let mut b = bindings.clone();
                b.bind(leaf, &bumped);
                Ok(graph.forward(&b)?.scalar(seed))
            };
            let numeric = (eval(eps)? - eval(-eps)?) / (2.0 * eps);
            let a = analytic.data()[k].f64();
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_form() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf("x");
        let a = g.constant(
            Tensor::from_f64(&[3, 3], &[2.0, 0.5, -1.0, 0.3, 1.5, 0.2, -0.4, 0.1, 3.0]).unwrap(),
        );
        let ax = g.matmul(a, x);
        let xt = g.leaf("xt");
        let q = g.matmul(xt, ax);
        let s = g.sum(q);
        let xv = Tensor::from_f64(&[3, 1], &[0.7, -1.1, 0.4]).unwrap();
        let xtv = xv.transpose();
        let mut b = Bindings::new();
        b.bind(x, &xv).bind(xt, &xtv);
        let err = finite_diff_check(&g, &b, s, 1e-3).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf("x");
        let c = g.constant(Tensor::scalar(2.5));
        let zero = g.scale(x, 0.0);
        let s0 = g.sum(zero);
        let s = g.add(s0, c);
        let xv = Tensor::vector(vec![1.0, -2.0, 3.0]);
        let mut b = Bindings::new();
        b.bind(x, &xv);
        assert_eq!(finite_diff_check(&g, &b, s, 1e-3).unwrap(), 0.0);
    }
}
