//! The editable classifier: token embeddings, mean pooling and a two-layer
//! tanh network, `softmax(W2ᵀ tanh(W1ᵀ mean(E[x]) + b1) + b2)`.

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::Example;
use crate::error::{Error, Result};
use crate::params::{ParamSet, TensorMap};
use crate::rng::seeded;
use crate::scalar::Scalar;
use crate::tensor::dense::matmul_kernel;
use crate::tensor::graph::row_softmax;
use crate::tensor::{Bindings, Distribution, Graph, NodeId, Tensor};

pub const EMBED: &str = "embeddings";
pub const W1: &str = "W1";
pub const B1: &str = "b1";
pub const W2: &str = "W2";
pub const B2: &str = "b2";

/// Matrices the editor and the fine-tuning baselines may change.
pub const EDITABLE: [&str; 2] = [W1, W2];

/// Uniform `±1/√fan_in` weights, zero biases.
pub fn init_base_model<T: Scalar>(
    d: usize,
    d_h: usize,
    n_classes: usize,
    vocab: usize,
    seed: u64,
) -> Result<ParamSet<T>> {
    if d == 0 || d_h == 0 || n_classes == 0 || vocab == 0 {
        return Err(Error::invalid("base model dimensions must be at least 1"));
    }
    let mut rng = seeded(seed);
    let mut t = TensorMap::new();
    // Embedding rows have fan-in 1 in the lookup sense; scale them like W1's input.
    t.insert(
        EMBED.into(),
        Tensor::uniform(&[vocab, d], 1.0 / (d as f64).sqrt(), &mut rng),
    );
    t.insert(
        W1.into(),
        Tensor::uniform(&[d, d_h], 1.0 / (d as f64).sqrt(), &mut rng),
    );
    t.insert(B1.into(), Tensor::zeros(&[d_h]));
    t.insert(
        W2.into(),
        Tensor::uniform(&[d_h, n_classes], 1.0 / (d_h as f64).sqrt(), &mut rng),
    );
    t.insert(B2.into(), Tensor::zeros(&[n_classes]));
    ParamSet::new(t, EDITABLE.iter().map(|s| s.to_string()).collect())
}

pub fn n_classes<T: Scalar>(theta: &ParamSet<T>) -> Result<usize> {
    Ok(theta.get(B2)?.numel())
}

/// Mean of the token embeddings of each sequence, `[batch, d]`.
pub fn mean_pool<T: Scalar>(theta: &ParamSet<T>, xs: &[&[u32]]) -> Result<Tensor<T>> {
    let e = theta.get(EMBED)?;
    let (v, d) = (e.shape()[0], e.shape()[1]);
    let mut data = Vec::with_capacity(xs.len() * d);
    let mut acc = vec![0.0f64; d];
    for x in xs {
        if x.is_empty() {
            return Err(Error::Empty("token sequence"));
        }
        acc.iter_mut().for_each(|a| *a = 0.0);
        for &tok in *x {
            if tok as usize >= v {
                return Err(Error::UnknownToken(tok));
            }
            for (a, w) in acc.iter_mut().zip(e.row(tok as usize)) {
                *a += w.f64();
            }
        }
        let inv = 1.0 / x.len() as f64;
        data.extend(acc.iter().map(|a| T::of(a * inv)));
    }
    Tensor::new(vec![xs.len(), d], data)
}

fn add_row_in_place<T: Scalar>(m: &mut Tensor<T>, row: &Tensor<T>) {
    let (rows, cols) = m.as_matrix_dims();
    let r = row.data();
    for i in 0..rows {
        for (o, &b) in m.data_mut()[i * cols..(i + 1) * cols].iter_mut().zip(r) {
            *o += b;
        }
    }
}

/// Logits for pooled inputs using the same kernels as the graph path.
pub fn logits_from_pooled<T: Scalar>(theta: &ParamSet<T>, pooled: &Tensor<T>) -> Result<Tensor<T>> {
    let (w1, b1, w2, b2) = (theta.get(W1)?, theta.get(B1)?, theta.get(W2)?, theta.get(B2)?);
    let (n, d) = pooled.as_matrix_dims();
    let d_h = w1.shape()[1];
    let c = w2.shape()[1];
    if w1.shape()[0] != d {
        return Err(Error::invalid("pooled width does not match W1"));
    }
    let mut h = Tensor::new(vec![n, d_h], matmul_kernel(pooled.data(), w1.data(), n, d, d_h))?;
    add_row_in_place(&mut h, b1);
    let h = h.map(|v| v.tanh());
    let mut z = Tensor::new(vec![n, c], matmul_kernel(h.data(), w2.data(), n, d_h, c))?;
    add_row_in_place(&mut z, b2);
    Ok(z)
}

pub fn predict_batch<T: Scalar>(theta: &ParamSet<T>, xs: &[&[u32]]) -> Result<Vec<Distribution>> {
    if xs.is_empty() {
        return Ok(Vec::new());
    }
    let pooled = mean_pool(theta, xs)?;
    probs_from_pooled(theta, &pooled)
}

pub fn probs_from_pooled<T: Scalar>(
    theta: &ParamSet<T>,
    pooled: &Tensor<T>,
) -> Result<Vec<Distribution>> {
    let z = logits_from_pooled(theta, pooled)?;
    if !z.all_finite() {
        return Err(Error::NonFinite {
            node: 0,
            op: "base logits",
        });
    }
    let p = row_softmax(&z, false);
    let (rows, _) = p.as_matrix_dims();
    Ok((0..rows)
        .map(|r| Distribution::from_probs_clamped(p.row(r)))
        .collect())
}

pub fn predict<T: Scalar>(theta: &ParamSet<T>, x: &[u32]) -> Result<Distribution> {
    Ok(predict_batch(theta, &[x])?.remove(0))
}

/// Mode of the distribution, lowest class id on ties.
pub fn decide(dist: &Distribution) -> u32 {
    dist.argmax() as u32
}

pub fn decide_batch<T: Scalar>(theta: &ParamSet<T>, xs: &[&[u32]]) -> Result<Vec<u32>> {
    Ok(predict_batch(theta, xs)?.iter().map(decide).collect())
}

/// Fraction of examples whose decision equals the gold label.
pub fn accuracy<T: Scalar>(theta: &ParamSet<T>, examples: &[&Example]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Empty("accuracy dataset"));
    }
    let xs: Vec<&[u32]> = examples.iter().map(|e| e.x.as_slice()).collect();
    let preds = decide_batch(theta, &xs)?;
    let hits = preds
        .iter()
        .zip(examples)
        .filter(|(p, e)| **p == e.y)
        .count();
    Ok(hits as f64 / examples.len() as f64)
}

/// Node ids of the dense layers inside a graph.
#[derive(Clone, Copy, Debug)]
pub struct LayerNodes {
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
}

/// Appends the classifier head to `g`, returning the `[batch, C]` logits.
pub fn logits_graph<T: Scalar>(g: &mut Graph<T>, layers: LayerNodes, pooled: NodeId) -> NodeId {
    let h = g.matmul(pooled, layers.w1);
    let h = g.add_row(h, layers.b1);
    let h = g.tanh(h);
    let z = g.matmul(h, layers.w2);
    g.add_row(z, layers.b2)
}

/// Constant one-hot rows, `[targets.len(), n_classes]`.
pub fn one_hot<T: Scalar>(targets: &[u32], n_classes: usize) -> Tensor<T> {
    let mut t = Tensor::zeros(&[targets.len(), n_classes]);
    for (i, &c) in targets.iter().enumerate() {
        t.data_mut()[i * n_classes + c as usize] = T::one();
    }
    t
}

/// Summed cross-entropy of `logits` toward `targets`.
pub fn cross_entropy_graph<T: Scalar>(
    g: &mut Graph<T>,
    logits: NodeId,
    targets: &[u32],
    n_classes: usize,
) -> NodeId {
    let lsm = g.log_softmax(logits);
    let oh = g.constant(one_hot(targets, n_classes));
    let picked = g.mul(oh, lsm);
    let s = g.sum(picked);
    g.scale(s, -1.0)
}

/// `∇_W L(θ; x, target)` for each named matrix, with `L` the cross-entropy.
pub fn loss_gradients<T: Scalar>(
    theta: &ParamSet<T>,
    x: &[u32],
    target: u32,
    names: &[String],
) -> Result<(f64, TensorMap<T>)> {
    let pooled = mean_pool(theta, &[x])?;
    let c = n_classes(theta)?;
    if target as usize >= c {
        return Err(Error::OutOfRange {
            what: "class",
            index: target as usize,
            len: c,
        });
    }
    let mut g = Graph::new();
    let mut bindings = Bindings::new();
    let mut node_of = IndexMap::new();
    for name in [W1, B1, W2, B2] {
        let id = if names.iter().any(|n| n == name) {
            let id = g.leaf(name);
            bindings.bind(id, theta.get(name)?);
            id
        } else {
            g.constant(theta.get(name)?.clone())
        };
        node_of.insert(name, id);
    }
    let p = g.constant(pooled);
    let layers = LayerNodes {
        w1: node_of[W1],
        b1: node_of[B1],
        w2: node_of[W2],
        b2: node_of[B2],
    };
    let z = logits_graph(&mut g, layers, p);
    let loss = cross_entropy_graph(&mut g, z, &[target], c);
    let (vals, mut grads) = g.forward_backward(&bindings, loss)?;
    let mut out = TensorMap::new();
    for name in names {
        let id = *node_of
            .get(name.as_str())
            .ok_or_else(|| Error::Names(format!("{name} is not a dense-layer tensor")))?;
        out.insert(name.clone(), grads.take(id).expect("leaf gradient"));
    }
    Ok((vals.scalar(loss), out))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaseTrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub max_epochs: usize,
    pub momentum: f64,
    pub seed: u64,
    /// Stop once training accuracy reaches this value.
    #[serde(default)]
    pub stop_at_train_accuracy: Option<f64>,
}

impl Default for BaseTrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.5,
            batch: 32,
            max_epochs: 200,
            momentum: 0.9,
            seed: 0,
            stop_at_train_accuracy: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
}

/// Mini-batch momentum SGD on mean cross-entropy. Returns the epoch with the
/// best validation accuracy (earliest on ties) and the per-epoch history.
pub fn train_base<T: Scalar>(
    theta: &ParamSet<T>,
    train: &[&Example],
    val: &[&Example],
    cfg: &BaseTrainConfig,
) -> Result<(ParamSet<T>, Vec<EpochRecord>)> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Empty("base training or validation set"));
    }
    if cfg.batch == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let c = n_classes(theta)?;
    let mut rng = seeded(cfg.seed);
    let mut params = theta.clone();
    let names: Vec<String> = params.names().map(str::to_string).collect();
    let mut velocity: Vec<Tensor<T>> = params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
    let mut best = (accuracy(&params, val)?, params.clone());
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let lr = T::of(cfg.lr);
    let mu = T::of(cfg.momentum);

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| train[i]).collect();
            let (loss, grads) = batch_gradients(&params, &names, &batch, c)
                .map_err(|e| match e {
                    Error::NonFinite { .. } => Error::Diverged(format!("epoch {epoch}")),
                    other => other,
                })?;
            if !loss.is_finite() {
                return Err(Error::Diverged(format!("epoch {epoch}")));
            }
            loss_sum += loss * batch.len() as f64;
            for (((_, p), v), g) in params.iter_mut().zip(velocity.iter_mut()).zip(&grads) {
                for ((pv, vv), &gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                    *vv = mu * *vv + gv;
                    *pv -= lr * *vv;
                }
            }
        }
        let record = EpochRecord {
            epoch,
            loss: loss_sum / train.len() as f64,
            train_accuracy: accuracy(&params, train)?,
            val_accuracy: accuracy(&params, val)?,
        };
        log::debug!(
            "base epoch {epoch}: loss {:.4} train {:.4} val {:.4}",
            record.loss,
            record.train_accuracy,
            record.val_accuracy
        );
        if record.val_accuracy > best.0 {
            best = (record.val_accuracy, params.clone());
        }
        let stop = cfg
            .stop_at_train_accuracy
            .is_some_and(|t| record.train_accuracy >= t);
        history.push(record);
        if stop {
            break;
        }
    }
    Ok((best.1, history))
}

fn batch_gradients<T: Scalar>(
    params: &ParamSet<T>,
    names: &[String],
    batch: &[&Example],
    c: usize,
) -> Result<(f64, Vec<Tensor<T>>)> {
    let mut g = Graph::new();
    let mut bindings = Bindings::new();
    let mut ids = Vec::with_capacity(names.len());
    for name in names {
        let id = g.leaf(name.as_str());
        bindings.bind(id, params.get(name)?);
        ids.push(id);
    }
    let leaf = |n: &str| ids[names.iter().position(|x| x == n).expect("base tensor")];
    let mut tokens = Vec::new();
    let mut pool = Tensor::<T>::zeros(&[batch.len(), batch.iter().map(|e| e.x.len()).sum()]);
    let width = pool.shape()[1];
    for (i, e) in batch.iter().enumerate() {
        let inv = T::of(1.0 / e.x.len() as f64);
        for &tok in &e.x {
            pool.data_mut()[i * width + tokens.len()] = inv;
            tokens.push(tok as usize);
        }
    }
    let rows = g.index_select(leaf(EMBED), tokens);
    let pool = g.constant(pool);
    let pooled = g.matmul(pool, rows);
    let layers = LayerNodes {
        w1: leaf(W1),
        b1: leaf(B1),
        w2: leaf(W2),
        b2: leaf(B2),
    };
    let z = logits_graph(&mut g, layers, pooled);
    let targets: Vec<u32> = batch.iter().map(|e| e.y).collect();
    let ce = cross_entropy_graph(&mut g, z, &targets, c);
    let loss = g.scale(ce, 1.0 / batch.len() as f64);
    let (vals, mut grads) = g.forward_backward(&bindings, loss)?;
    let out = ids
        .iter()
        .map(|&id| grads.take(id).expect("leaf gradient"))
        .collect();
    Ok((vals.scalar(loss), out))
}
