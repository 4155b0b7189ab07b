//! Edit metrics, the Dirichlet-weighted method comparison and update analyses.

use indexmap::IndexMap;
use rand::distr::Distribution as _;
use rand_distr::Dirichlet;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::base::{decide, decide_batch, predict_batch};
use crate::data::Example;
use crate::error::{Error, Result};
use crate::params::{ParamSet, TensorMap};
use crate::requests::EditRequest;
use crate::rng::seeded;
use crate::scalar::Scalar;
use crate::tensor::kl_divergence;

/// An editing method: returns the edited parameters and the number of
/// update iterations it used.
pub trait EditFn<T: Scalar>: Fn(&EditRequest) -> Result<(ParamSet<T>, usize)> + Sync {}
impl<T: Scalar, F: Fn(&EditRequest) -> Result<(ParamSet<T>, usize)> + Sync> EditFn<T> for F {}

fn hits<T: Scalar>(theta: &ParamSet<T>, xs: &[&[u32]], target: u32) -> Result<usize> {
    Ok(decide_batch(theta, xs)?.into_iter().filter(|&d| d == target).count())
}

/// Fraction of requests whose edited model maps `x` to `a`.
pub fn success_rate<T: Scalar>(edit: &impl EditFn<T>, requests: &[EditRequest]) -> Result<f64> {
    if requests.is_empty() {
        return Err(Error::Empty("requests"));
    }
    let ok: Vec<bool> = requests
        .par_iter()
        .map(|r| {
            let (edited, _) = edit(r)?;
            Ok(hits(&edited, &[r.x.as_slice()], r.a)? == 1)
        })
        .collect::<Result<_>>()?;
    Ok(ok.iter().filter(|&&b| b).count() as f64 / ok.len() as f64)
}

/// Fraction of `xs` on which the two models make the same decision.
pub fn retain_accuracy<T: Scalar>(theta: &ParamSet<T>, edited: &ParamSet<T>, xs: &[&[u32]]) -> Result<f64> {
    if xs.is_empty() {
        return Err(Error::Empty("retain set"));
    }
    let a = decide_batch(theta, xs)?;
    let b = decide_batch(edited, xs)?;
    Ok(a.iter().zip(&b).filter(|(p, q)| p == q).count() as f64 / xs.len() as f64)
}

/// Pooled fraction of paraphrases mapped to `a`, one edited model per request.
pub fn equivalence_accuracy<T: Scalar>(edit: &impl EditFn<T>, requests: &[EditRequest]) -> Result<f64> {
    let counts: Vec<(usize, usize)> = requests
        .par_iter()
        .map(|r| {
            if r.paraphrases.is_empty() {
                return Err(Error::Empty("paraphrase set"));
            }
            let (edited, _) = edit(r)?;
            let xs: Vec<&[u32]> = r.paraphrases.iter().map(Vec::as_slice).collect();
            Ok((hits(&edited, &xs, r.a)?, xs.len()))
        })
        .collect::<Result<_>>()?;
    let (h, n) = counts.iter().fold((0, 0), |(h, n), &(a, b)| (h + a, n + b));
    if n == 0 {
        return Err(Error::Empty("requests"));
    }
    Ok(h as f64 / n as f64)
}

fn gold_accuracy<T: Scalar>(theta: &ParamSet<T>, test: &[&Example]) -> Result<f64> {
    let xs: Vec<&[u32]> = test.iter().map(|e| e.x.as_slice()).collect();
    let d = decide_batch(theta, &xs)?;
    Ok(d.iter().zip(test).filter(|(p, e)| **p == e.y).count() as f64 / test.len() as f64)
}

/// `1 − acc(θ′) / acc(θ)` on gold labels.
pub fn performance_deterioration<T: Scalar>(theta: &ParamSet<T>, edited: &ParamSet<T>, test: &[&Example]) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::Empty("test set"));
    }
    let base = gold_accuracy(theta, test)?;
    if base == 0.0 {
        return Err(Error::invalid("original model has zero test accuracy"));
    }
    Ok(1.0 - gold_accuracy(edited, test)? / base)
}

/// `[success, retain, equivalence, deterioration]` of one method.
pub type MetricVector = [f64; 4];

fn benefits(m: &MetricVector) -> [f64; 4] {
    [m[0], m[1], m[2], 1.0 - m[3]]
}

/// Probability that `a` beats `b` under Dirichlet(1, 1, 1, 1) metric weights,
/// ties counting half.
pub fn dirichlet_compare(a: &MetricVector, b: &MetricVector, n_samples: usize, seed: u64) -> Result<f64> {
    if n_samples == 0 {
        return Err(Error::invalid("need at least one Dirichlet sample"));
    }
    let dir = Dirichlet::new([1.0f64; 4]).map_err(|e| Error::invalid(e.to_string()))?;
    let (ba, bb) = (benefits(a), benefits(b));
    let mut rng = seeded(seed);
    let mut score = 0.0;
    for _ in 0..n_samples {
        let w = dir.sample(&mut rng);
        let sa: f64 = w.iter().zip(&ba).map(|(w, v)| w * v).sum();
        let sb: f64 = w.iter().zip(&bb).map(|(w, v)| w * v).sum();
        if sa > sb {
            score += 1.0;
        } else if sa == sb {
            score += 0.5;
        }
    }
    Ok(score / n_samples as f64)
}

/// Mean `|Δ|` per editable matrix, divided by the largest such mean.
pub fn update_magnitude_map<T: Scalar>(theta: &ParamSet<T>, edited: &ParamSet<T>) -> Result<IndexMap<String, f64>> {
    let delta = theta.editable_delta(edited)?;
    let mut out: IndexMap<String, f64> = delta.iter().map(|(k, v)| (k.clone(), v.mean_abs())).collect();
    let max = out.values().copied().fold(0.0, f64::max);
    if max > 0.0 {
        out.values_mut().for_each(|v| *v /= max);
    }
    Ok(out)
}

/// Cosine between two shift sets flattened in name order.
pub fn update_cosine<T: Scalar>(a: &TensorMap<T>, b: &TensorMap<T>) -> Result<f64> {
    if a.len() != b.len() || a.keys().zip(b.keys()).any(|(x, y)| x != y) {
        return Err(Error::Names("shift sets name different matrices".into()));
    }
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (ta, tb) in a.values().zip(b.values()) {
        if ta.shape() != tb.shape() {
            return Err(Error::invalid("shift shapes differ"));
        }
        for (&x, &y) in ta.data().iter().zip(tb.data()) {
            let (x, y) = (x.f64(), y.f64());
            dot += x * y;
            na += x * x;
            nb += y * y;
        }
    }
    if na == 0.0 && nb == 0.0 {
        return Err(Error::invalid("both shifts are zero"));
    }
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RequestRecord {
    pub id: usize,
    pub success: bool,
    pub iterations: usize,
    pub retain: f64,
    pub equiv_hits: usize,
    pub equiv_total: usize,
    pub deterioration: f64,
    /// Mean KL from the original to the edited model over the retain set.
    pub kl: f64,
}

impl RequestRecord {
    pub fn equivalence(&self) -> f64 {
        self.equiv_hits as f64 / self.equiv_total as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: String,
    pub success_rate: f64,
    pub retain_accuracy: f64,
    /// Pooled over every paraphrase of every request.
    pub equivalence_accuracy: f64,
    pub performance_deterioration: f64,
    pub mean_kl: f64,
    /// Retain examples per request, or `None` for the full held-out split.
    pub retain_subsample: Option<usize>,
    pub records: Vec<RequestRecord>,
}

impl MetricsReport {
    pub fn metrics(&self) -> MetricVector {
        [
            self.success_rate,
            self.retain_accuracy,
            self.equivalence_accuracy,
            self.performance_deterioration,
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Retain examples drawn once from the held-out split; `None` keeps all.
    pub retain_subsample: Option<usize>,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            retain_subsample: Some(256),
            seed: 0,
        }
    }
}

/// Per-request evaluation with one fresh edit of `theta` per request.
pub fn full_report<T: Scalar>(
    method: &str,
    theta: &ParamSet<T>,
    edit: &impl EditFn<T>,
    requests: &[EditRequest],
    retain_pool: &[&Example],
    test: &[&Example],
    cfg: &EvalConfig,
) -> Result<MetricsReport> {
    if requests.is_empty() {
        return Err(Error::Empty("requests"));
    }
    let retain: Vec<&Example> = match cfg.retain_subsample {
        Some(n) => {
            let mut rng = seeded(cfg.seed);
            crate::trainer::fixed_subset(retain_pool, n, &mut rng).into_iter().copied().collect()
        }
        None => retain_pool.to_vec(),
    };
    let retain_x: Vec<&[u32]> = retain.iter().map(|e| e.x.as_slice()).collect();
    let base_dists = predict_batch(theta, &retain_x)?;
    let base_acc = gold_accuracy(theta, test)?;
    if base_acc == 0.0 {
        return Err(Error::invalid("original model has zero test accuracy"));
    }
    let records: Vec<RequestRecord> = requests
        .par_iter()
        .map(|r| {
            let (edited, iterations) = edit(r)?;
            let keep: Vec<usize> = (0..retain.len()).filter(|&i| retain[i].fact_id != r.fact_id).collect();
            if keep.is_empty() {
                return Err(Error::Empty("retain set after excluding the edited fact"));
            }
            let xs: Vec<&[u32]> = keep.iter().map(|&i| retain_x[i]).collect();
            let after = predict_batch(&edited, &xs)?;
            let mut same = 0;
            let mut kl = 0.0;
            for (&i, q) in keep.iter().zip(&after) {
                if decide(&base_dists[i]) == decide(q) {
                    same += 1;
                }
                kl += kl_divergence(&base_dists[i], q)?;
            }
            let para: Vec<&[u32]> = r.paraphrases.iter().map(Vec::as_slice).collect();
            if para.is_empty() {
                return Err(Error::Empty("paraphrase set"));
            }
            Ok(RequestRecord {
                id: r.id,
                success: hits(&edited, &[r.x.as_slice()], r.a)? == 1,
                iterations,
                retain: same as f64 / keep.len() as f64,
                equiv_hits: hits(&edited, &para, r.a)?,
                equiv_total: para.len(),
                deterioration: 1.0 - gold_accuracy(&edited, test)? / base_acc,
                kl: kl / keep.len() as f64,
            })
        })
        .collect::<Result<_>>()?;
    Ok(aggregate(method, records, cfg.retain_subsample))
}

/// Aggregates records in order; equivalence is pooled over paraphrases.
pub fn aggregate(method: &str, records: Vec<RequestRecord>, retain_subsample: Option<usize>) -> MetricsReport {
    let n = records.len() as f64;
    let mean = |f: &dyn Fn(&RequestRecord) -> f64| records.iter().map(f).sum::<f64>() / n;
    let (eh, et) = records
        .iter()
        .fold((0, 0), |(h, t), r| (h + r.equiv_hits, t + r.equiv_total));
    MetricsReport {
        method: method.to_string(),
        success_rate: mean(&|r| f64::from(u8::from(r.success))),
        retain_accuracy: mean(&|r| r.retain),
        equivalence_accuracy: eh as f64 / et as f64,
        performance_deterioration: mean(&|r| r.deterioration),
        mean_kl: mean(&|r| r.kl),
        retain_subsample,
        records,
    }
}
