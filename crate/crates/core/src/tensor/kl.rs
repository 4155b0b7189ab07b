//! Discrete distributions and the KL divergence between them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::graph::{Graph, NodeId, PROB_FLOOR};

/// Probabilities over a finite label set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Distribution {
    probs: Vec<f64>,
}

impl Distribution {
    /// Validates positivity and normalization (within `1e-5`).
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Empty("distribution"));
        }
        if probs.iter().any(|p| !(p.is_finite() && *p > 0.0 && *p <= 1.0)) {
            return Err(Error::invalid("probabilities must lie in (0, 1]"));
        }
        let s: f64 = probs.iter().sum();
        if (s - 1.0).abs() > 1e-5 {
            return Err(Error::invalid(format!("probabilities sum to {s}")));
        }
        Ok(Self { probs })
    }

    /// Builds from softmax output, clamping entries to `[PROB_FLOOR, 1]`.
    pub fn from_probs_clamped<T: Scalar>(probs: &[T]) -> Self {
        Self {
            probs: probs
                .iter()
                .map(|p| p.f64().clamp(PROB_FLOOR, 1.0))
                .collect(),
        }
    }

    pub fn uniform(n: usize) -> Self {
        Self {
            probs: vec![1.0 / n as f64; n],
        }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Mode of the distribution; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }
}

/// `Σ_c p(c) log(p(c) / q(c))` with both arguments clamped to `[1e-12, 1]`.
pub fn kl_divergence(p: &Distribution, q: &Distribution) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::invalid(format!(
            "distribution lengths {} and {}",
            p.len(),
            q.len()
        )));
    }
    Ok(p
        .probs
        .iter()
        .zip(&q.probs)
        .map(|(&pc, &qc)| {
            let pc = pc.clamp(PROB_FLOOR, 1.0);
            let qc = qc.clamp(PROB_FLOOR, 1.0);
            pc * (pc.ln() - qc.ln())
        })
        .sum())
}

/// Graph form of [`kl_divergence`] over matching probability nodes, summed
/// over all entries; differentiable in both arguments.
pub fn kl_graph<T: Scalar>(g: &mut Graph<T>, p: NodeId, q: NodeId) -> NodeId {
    let lp = g.log(p);
    let lq = g.log(q);
    let diff = g.sub(lp, lq);
    let terms = g.mul(p, diff);
    g.sum(terms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Bindings, Tensor};

    fn d(v: &[f64]) -> Distribution {
        Distribution::new(v.to_vec()).unwrap()
    }

    #[test]
    fn identical_is_zero() {
        let p = d(&[0.5, 0.5]);
        assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn hand_evaluated_value() {
        // 0.5 ln(0.5/0.25) + 0.5 ln(0.5/0.75)
        let expected = 0.5 * (2.0f64).ln() + 0.5 * (2.0f64 / 3.0).ln();
        let got = kl_divergence(&d(&[0.5, 0.5]), &d(&[0.25, 0.75])).unwrap();
        assert!((got - expected).abs() < 1e-12);
        assert!((got - 0.14384).abs() < 1e-5);
    }

    #[test]
    fn length_mismatch() {
        assert!(kl_divergence(&d(&[0.5, 0.5]), &d(&[0.2, 0.3, 0.5])).is_err());
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(d(&[0.1, 0.7, 0.2]).argmax(), 1);
        assert_eq!(d(&[0.5, 0.5]).argmax(), 0);
    }

    #[test]
    fn graph_version_matches() {
        let mut g = Graph::<f64>::new();
        let p = g.leaf("p");
        let q = g.leaf("q");
        let kl = kl_graph(&mut g, p, q);
        let pv = Tensor::vector(vec![0.5, 0.5]);
        let qv = Tensor::vector(vec![0.25, 0.75]);
        let mut b = Bindings::new();
        b.bind(p, &pv).bind(q, &qv);
        let (vals, grads) = g.forward_backward(&b, kl).unwrap();
        let direct = kl_divergence(&d(&[0.5, 0.5]), &d(&[0.25, 0.75])).unwrap();
        assert!((vals.scalar(kl) - direct).abs() < 1e-12);
        // d/dq_c = -p_c / q_c
        let gq = grads.get(q).unwrap();
        assert!((gq.data()[0] + 2.0).abs() < 1e-12);
        assert!((gq.data()[1] + 0.5 / 0.75).abs() < 1e-12);
    }
}
