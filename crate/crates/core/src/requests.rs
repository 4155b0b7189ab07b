//! Edit requests `<x, y, a>` with their filtered paraphrase sets.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::base::{decide, predict_batch};
use crate::data::{Dataset, Split, TaskKind};
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::rng::seeded;
use crate::scalar::Scalar;
use crate::tensor::Distribution;

/// Number of runner-up classes a QA alternative is drawn from.
pub const QA_ALTERNATIVES: usize = 5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditRequest {
    pub id: usize,
    /// Index of `x` in the dataset's example list.
    pub example: usize,
    pub fact_id: usize,
    pub split: Split,
    pub x: Vec<u32>,
    /// Prediction of the unedited model on `x`.
    pub y: u32,
    /// Prediction the edited model should make instead.
    pub a: u32,
    /// Same-fact renderings the unedited model also maps to `y`; `x` first.
    pub paraphrases: Vec<Vec<u32>>,
}

/// FC flips the label. QA samples uniformly among the `k` most probable
/// classes other than the mode.
pub fn make_alternative<R: Rng + ?Sized>(
    task: TaskKind,
    dist: &Distribution,
    k: usize,
    rng: &mut R,
) -> Result<u32> {
    let y = decide(dist);
    match task {
        TaskKind::Fc => {
            if dist.len() != 2 {
                return Err(Error::invalid("FC distributions are binary"));
            }
            Ok(1 - y)
        }
        TaskKind::Qa => {
            if dist.len() < 2 {
                return Err(Error::invalid("QA alternatives need at least 2 classes"));
            }
            let mut others: Vec<usize> = (0..dist.len()).filter(|&c| c as u32 != y).collect();
            let p = dist.probs();
            // Descending probability, lowest id first on ties.
            others.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
            others.truncate(k.max(1));
            Ok(others[rng.random_range(0..others.len())] as u32)
        }
    }
}

/// One request per surface form in `split`, with `y` taken from the model and
/// paraphrases filtered to those the model maps to `y`.
pub fn build_edit_requests<T: Scalar>(
    theta: &ParamSet<T>,
    dataset: &Dataset,
    split: Split,
    seed: u64,
) -> Result<Vec<EditRequest>> {
    let mut rng = seeded(seed);
    let idx = dataset.indices(split);
    let xs: Vec<&[u32]> = dataset.examples.iter().map(|e| e.x.as_slice()).collect();
    // Predictions for every example; paraphrases of a split stay in that split.
    let dists = predict_batch(theta, &xs)?;
    let mut out = Vec::with_capacity(idx.len());
    for i in idx {
        let ex = &dataset.examples[i];
        let dist = &dists[i];
        let y = decide(dist);
        let a = match make_alternative(dataset.task, dist, QA_ALTERNATIVES, &mut rng) {
            Ok(a) => a,
            Err(e) => {
                log::warn!("skipping example {i}: {e}");
                continue;
            }
        };
        let mut paraphrases = vec![ex.x.clone()];
        for j in dataset.forms_of_fact(ex.fact_id) {
            if j != i && decide(&dists[j]) == y {
                paraphrases.push(dataset.examples[j].x.clone());
            }
        }
        out.push(EditRequest {
            id: out.len(),
            example: i,
            fact_id: ex.fact_id,
            split,
            x: ex.x.clone(),
            y,
            a,
            paraphrases,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::base::{init_base_model, predict};
    use crate::data::{build_dataset, generate_world};
    use crate::rng::seeded;

    fn d(v: &[f64]) -> Distribution {
        Distribution::new(v.to_vec()).unwrap()
    }

    #[test]
    fn fc_flips() {
        let mut rng = seeded(0);
        assert_eq!(make_alternative(TaskKind::Fc, &d(&[0.2, 0.8]), 5, &mut rng).unwrap(), 0);
        assert_eq!(make_alternative(TaskKind::Fc, &d(&[0.9, 0.1]), 5, &mut rng).unwrap(), 1);
    }

    #[test]
    fn qa_never_returns_mode() {
        let mut rng = seeded(1);
        let mut seen = [false; 3];
        for _ in 0..200 {
            let a = make_alternative(TaskKind::Qa, &d(&[0.7, 0.2, 0.1]), 2, &mut rng).unwrap();
            assert_ne!(a, 0);
            seen[a as usize] = true;
        }
        assert!(seen[1] && seen[2]);
    }

    #[test]
    fn qa_restricted_to_top_k() {
        let mut rng = seeded(2);
        let dist = d(&[0.05, 0.5, 0.1, 0.2, 0.15]);
        for _ in 0..100 {
            let a = make_alternative(TaskKind::Qa, &dist, 2, &mut rng).unwrap();
            assert!(a == 3 || a == 4, "{a}");
        }
    }

    #[test]
    fn qa_single_class_errors() {
        let mut rng = seeded(3);
        assert!(make_alternative(TaskKind::Qa, &d(&[1.0]), 5, &mut rng).is_err());
    }

    #[test]
    fn qa_seeded_reproducible() {
        let dist = Distribution::uniform(10);
        let draw = |s| {
            let mut rng = seeded(s);
            (0..20)
                .map(|_| make_alternative(TaskKind::Qa, &dist, 5, &mut rng).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(9), draw(9));
    }

    #[test]
    fn requests_satisfy_invariants() {
        let w = generate_world(5, 20, 3, 6, 3).unwrap();
        let ds = build_dataset(w, TaskKind::Qa, 1).unwrap();
        let theta = init_base_model::<f32>(8, 8, 6, ds.vocab_size(), 2).unwrap();
        let reqs = build_edit_requests(&theta, &ds, Split::Train, 4).unwrap();
        assert_eq!(reqs.len(), ds.indices(Split::Train).len());
        let mut filtered = 0;
        for r in &reqs {
            assert_ne!(r.a, r.y);
            assert_eq!(r.paraphrases[0], r.x);
            for p in &r.paraphrases {
                assert_eq!(decide(&predict(&theta, p).unwrap()), r.y);
            }
            filtered += 3 - r.paraphrases.len();
        }
        // A random model disagrees with itself across templates sometimes.
        assert!(filtered > 0);
    }

    #[test]
    fn agreeing_paraphrases_all_kept() {
        // All-zero dense layers predict class 0 everywhere, so every template agrees.
        let w = generate_world(5, 4, 2, 4, 3).unwrap();
        let ds = build_dataset(w, TaskKind::Qa, 1).unwrap();
        let mut theta = init_base_model::<f32>(4, 4, 4, ds.vocab_size(), 2).unwrap();
        for name in ["W1", "W2"] {
            theta.get_mut(name).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let reqs = build_edit_requests(&theta, &ds, Split::Train, 4).unwrap();
        for r in &reqs {
            assert_eq!(r.y, 0);
            assert_eq!(r.paraphrases.len(), 3);
        }
    }
}
