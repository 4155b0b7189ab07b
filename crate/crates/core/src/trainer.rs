//! Constrained training of the editor.
//!
//! Minimises the edit loss on `P^x` subject to a constraint `C(θ, θ′) ≤ m`,
//! relaxed into `J = L_edit + λ (C − m)` with `λ` updated by projected ascent.
//! The margin `m` shrinks by a fixed factor whenever validation success
//! exceeds a threshold.

use std::fmt::Write as _;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::base::{
    cross_entropy_graph, decide, decide_batch, logits_from_pooled, logits_graph, loss_gradients, mean_pool, n_classes,
    predict, predict_batch, LayerNodes, B1, B2, W1, W2,
};
use crate::data::Example;
use crate::editor::{edit_once, EditorNodes, EditorParams};
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::requests::EditRequest;
use crate::rng::seeded;
use crate::scalar::Scalar;
use crate::tensor::graph::row_softmax;
use crate::tensor::{kl_divergence, Bindings, Graph, NodeId, Tensor, PROB_FLOOR};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConstraintKind {
    Kl,
    L2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    L2,
    LInf,
}

impl Norm {
    /// Accepts `p = 2` or `p = ∞`.
    pub fn from_order(p: f64) -> Result<Self> {
        if p == 2.0 {
            Ok(Norm::L2)
        } else if p == f64::INFINITY {
            Ok(Norm::LInf)
        } else {
            Err(Error::UnsupportedNorm(p.to_string()))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginSchedule {
    pub initial: f64,
    pub floor: f64,
    #[serde(default = "default_factor")]
    pub factor: f64,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
}

fn default_factor() -> f64 {
    0.8
}

fn default_threshold() -> f64 {
    0.9
}

impl MarginSchedule {
    pub fn new(initial: f64, floor: f64) -> Self {
        Self {
            initial,
            floor,
            factor: default_factor(),
            threshold: default_threshold(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// How the multiplier term scales with the margin.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MultiplierForm {
    /// `λ (C − m)`.
    Absolute,
    /// `λ (C / m − 1)`: the same feasible set, with a violation measured in
    /// units of the margin so the multiplier reacts at every margin size.
    Relative,
}

impl MultiplierForm {
    fn violation(self, c: f64, m: f64) -> f64 {
        match self {
            MultiplierForm::Absolute => c - m,
            MultiplierForm::Relative => c / m - 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr_phi: f64,
    pub lr_lambda: f64,
    #[serde(default)]
    pub lambda_init: f64,
    /// Retain examples sampled per request per step.
    pub o_sample: usize,
    pub batch: usize,
    pub max_steps: usize,
    pub val_every: usize,
    pub margin: MarginSchedule,
    pub constraint: ConstraintKind,
    /// Train on all of `P^x` rather than `x` alone.
    pub use_paraphrases: bool,
    pub optimizer: OptimizerKind,
    pub multiplier: MultiplierForm,
    /// Global gradient-norm clip on `∇_φ J`.
    #[serde(default)]
    pub clip_norm: Option<f64>,
    pub val_requests: usize,
    pub val_retain: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_phi: 1e-2,
            lr_lambda: 1e-1,
            lambda_init: 0.0,
            o_sample: 8,
            batch: 16,
            max_steps: 1000,
            val_every: 50,
            margin: MarginSchedule::new(1e-2, 1e-4),
            constraint: ConstraintKind::Kl,
            use_paraphrases: true,
            optimizer: OptimizerKind::Sgd,
            multiplier: MultiplierForm::Absolute,
            clip_norm: None,
            val_requests: 64,
            val_retain: 64,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let m = &self.margin;
        let ok = self.lr_phi > 0.0
            && self.lr_lambda > 0.0
            && self.lambda_init >= 0.0
            && self.o_sample > 0
            && self.batch > 0
            && self.val_every > 0
            && m.initial > 0.0
            && m.floor > 0.0
            && m.floor <= m.initial
            && m.factor > 0.0
            && m.factor < 1.0
            && m.threshold > 0.0
            && m.threshold < 1.0
            && self.clip_norm.is_none_or(|c| c > 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("bad editor training config: {self:?}")))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LagrangianState {
    pub lambda: f64,
    pub margin: f64,
    pub margin_floor: f64,
    pub anneal_factor: f64,
    pub success_threshold: f64,
}

impl LagrangianState {
    pub fn new(lambda: f64, schedule: &MarginSchedule) -> Self {
        Self {
            lambda,
            margin: schedule.initial,
            margin_floor: schedule.floor,
            anneal_factor: schedule.factor,
            success_threshold: schedule.threshold,
        }
    }
}

/// Shrinks the margin when validation success exceeds the threshold.
pub fn anneal_margin(state: &LagrangianState, success_rate: f64) -> LagrangianState {
    let mut out = *state;
    if success_rate > state.success_threshold {
        out.margin = (state.anneal_factor * state.margin).max(state.margin_floor);
    }
    out
}

/// Projected ascent on `λ`.
pub fn update_multiplier(lambda: f64, lr: f64, violation: f64) -> f64 {
    (lambda + lr * violation).max(0.0)
}

/// `Σ_{x̂ ∈ P} CE(predict(θ′, x̂), a)`.
pub fn edit_loss<T: Scalar>(theta_prime: &ParamSet<T>, paraphrases: &[&[u32]], a: u32) -> Result<f64> {
    if paraphrases.is_empty() {
        return Err(Error::Empty("paraphrase set"));
    }
    let dists = predict_batch(theta_prime, paraphrases)?;
    Ok(dists
        .iter()
        .map(|d| {
            let p = d.probs().get(a as usize).copied().unwrap_or(0.0);
            -p.max(PROB_FLOOR).ln()
        })
        .sum())
}

/// Mean over `sample` of `KL(predict(θ, x′) ‖ predict(θ′, x′))`.
pub fn kl_constraint<T: Scalar>(theta: &ParamSet<T>, theta_prime: &ParamSet<T>, sample: &[&[u32]]) -> Result<f64> {
    if sample.is_empty() {
        return Err(Error::Empty("retain sample"));
    }
    let p = predict_batch(theta, sample)?;
    let q = predict_batch(theta_prime, sample)?;
    let mut total = 0.0;
    for (pi, qi) in p.iter().zip(&q) {
        total += kl_divergence(pi, qi)?;
    }
    Ok(total / sample.len() as f64)
}

/// `‖θ′ − θ‖_p` over the editable entries.
pub fn lp_constraint<T: Scalar>(theta: &ParamSet<T>, theta_prime: &ParamSet<T>, p: f64) -> Result<f64> {
    let norm = Norm::from_order(p)?;
    let deltas = theta.editable_delta(theta_prime)?;
    Ok(match norm {
        Norm::L2 => deltas.values().map(Tensor::sq_norm_f64).sum::<f64>().sqrt(),
        Norm::LInf => deltas.values().map(Tensor::max_abs).fold(0.0, f64::max),
    })
}

/// Per-request objective graph; the bound leaves are exactly the editor tensors.
pub struct ObjectiveGraph<'a, T: Scalar> {
    pub graph: Graph<T>,
    pub bindings: Bindings<'a, T>,
    pub nodes: EditorNodes,
    pub objective: NodeId,
    pub loss: NodeId,
    pub constraint: NodeId,
}

/// Everything a single request contributes to one optimisation step.
pub struct RequestTerms<'r> {
    pub request: &'r EditRequest,
    pub retain: Vec<&'r [u32]>,
}

/// Builds `L_edit + λ · violation(C, m)` for one request.
pub fn request_objective<'a, T: Scalar>(
    phi: &'a EditorParams<T>,
    theta: &ParamSet<T>,
    terms: &RequestTerms<'_>,
    state: &LagrangianState,
    cfg: &TrainConfig,
) -> Result<ObjectiveGraph<'a, T>> {
    let req = terms.request;
    let c = n_classes(theta)?;
    let names = theta.editable().to_vec();
    let (_, grads) = loss_gradients(theta, &req.x, req.a, &names)?;
    let tokens = phi.request_tokens(&req.x, req.y, req.a)?;

    let mut g = Graph::new();
    let mut bindings = Bindings::new();
    let nodes = EditorNodes::declare(&mut g, phi, &mut bindings);
    let h = nodes.encode(&mut g, &phi.config, &tokens);

    let mut shifts = Vec::with_capacity(names.len());
    let mut layer = |g: &mut Graph<T>, name: &str| -> Result<NodeId> {
        let w = g.constant(theta.get(name)?.clone());
        if theta.is_editable(name) {
            let grad = g.constant(grads[name].clone());
            let d = nodes.shift(g, h, grad, name, true).delta_w;
            shifts.push(d);
            Ok(g.add(w, d))
        } else {
            Ok(w)
        }
    };
    let layers = LayerNodes {
        w1: layer(&mut g, W1)?,
        b1: layer(&mut g, B1)?,
        w2: layer(&mut g, W2)?,
        b2: layer(&mut g, B2)?,
    };

    let para: Vec<&[u32]> = if cfg.use_paraphrases {
        req.paraphrases.iter().map(Vec::as_slice).collect()
    } else {
        vec![req.x.as_slice()]
    };
    if para.is_empty() {
        return Err(Error::Empty("paraphrase set"));
    }
    let pooled = g.constant(mean_pool(theta, &para)?);
    let z = logits_graph(&mut g, layers, pooled);
    let loss = cross_entropy_graph(&mut g, z, &vec![req.a; para.len()], c);

    let constraint = match cfg.constraint {
        ConstraintKind::Kl => {
            if terms.retain.is_empty() {
                return Err(Error::Empty("retain sample"));
            }
            let pooled_o = mean_pool(theta, &terms.retain)?;
            // The unedited distribution is a constant of the objective.
            let zo_base = logits_from_pooled(theta, &pooled_o)?;
            let p = row_softmax(&zo_base, false);
            let log_p = row_softmax(&zo_base, true);
            let p = g.constant(p);
            let log_p = g.constant(log_p);
            let po = g.constant(pooled_o);
            let zo = logits_graph(&mut g, layers, po);
            let log_q = g.log_softmax(zo);
            let diff = g.sub(log_p, log_q);
            let terms_kl = g.mul(p, diff);
            let total = g.sum(terms_kl);
            g.scale(total, 1.0 / terms.retain.len() as f64)
        }
        ConstraintKind::L2 => {
            let mut acc: Option<NodeId> = None;
            for &d in &shifts {
                let sq = g.mul(d, d);
                let s = g.sum(sq);
                acc = Some(match acc {
                    None => s,
                    Some(a) => g.add(a, s),
                });
            }
            let acc = acc.ok_or_else(|| Error::invalid("no editable matrices"))?;
            g.sqrt(acc)
        }
    };

    let objective = match cfg.multiplier {
        MultiplierForm::Absolute => {
            // λ (C − m): the −λm part is constant in φ.
            let pen = g.scale(constraint, state.lambda);
            let base = g.add(loss, pen);
            let offset = g.constant(Tensor::scalar(T::of(-state.lambda * state.margin)));
            g.add(base, offset)
        }
        MultiplierForm::Relative => {
            let pen = g.scale(constraint, state.lambda / state.margin);
            let base = g.add(loss, pen);
            let offset = g.constant(Tensor::scalar(T::of(-state.lambda)));
            g.add(base, offset)
        }
    };
    Ok(ObjectiveGraph {
        graph: g,
        bindings,
        nodes,
        objective,
        loss,
        constraint,
    })
}

#[derive(Clone, Debug)]
enum OptState<T: Scalar> {
    Sgd,
    Adam {
        m: Vec<Tensor<T>>,
        v: Vec<Tensor<T>>,
        t: i32,
    },
}

/// Optimiser for the editor parameters.
#[derive(Clone, Debug)]
pub struct PhiOptimizer<T: Scalar> {
    kind: OptimizerKind,
    lr: f64,
    state: OptState<T>,
}

impl<T: Scalar> PhiOptimizer<T> {
    pub fn new(kind: OptimizerKind, lr: f64, phi: &EditorParams<T>) -> Self {
        let state = match kind {
            OptimizerKind::Sgd => OptState::Sgd,
            OptimizerKind::Adam { .. } => {
                let zeros: Vec<Tensor<T>> = phi.tensors().values().map(|t| Tensor::zeros(t.shape())).collect();
                OptState::Adam {
                    m: zeros.clone(),
                    v: zeros,
                    t: 0,
                }
            }
        };
        Self { kind, lr, state }
    }

    /// Descends along `grads`, given in the editor's tensor order.
    pub fn step(&mut self, phi: &mut EditorParams<T>, grads: &[Tensor<T>]) {
        match (&mut self.state, self.kind) {
            (OptState::Sgd, _) => {
                let lr = T::of(-self.lr);
                for (p, g) in phi.tensors_mut().values_mut().zip(grads) {
                    p.axpy(lr, g);
                }
            }
            (OptState::Adam { m, v, t }, OptimizerKind::Adam { beta1, beta2, eps }) => {
                *t += 1;
                let bc1 = 1.0 - beta1.powi(*t);
                let bc2 = 1.0 - beta2.powi(*t);
                for (((p, g), mi), vi) in phi.tensors_mut().values_mut().zip(grads).zip(m.iter_mut()).zip(v.iter_mut()) {
                    for (((pv, &gv), mv), vv) in
                        p.data_mut().iter_mut().zip(g.data()).zip(mi.data_mut()).zip(vi.data_mut())
                    {
                        let gf = gv.f64();
                        let mn = beta1 * mv.f64() + (1.0 - beta1) * gf;
                        let vn = beta2 * vv.f64() + (1.0 - beta2) * gf * gf;
                        *mv = T::of(mn);
                        *vv = T::of(vn);
                        let upd = self.lr * (mn / bc1) / ((vn / bc2).sqrt() + eps);
                        *pv = T::of(pv.f64() - upd);
                    }
                }
            }
            (OptState::Adam { .. }, OptimizerKind::Sgd) => unreachable!("optimizer state matches its kind"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub edit_loss: f64,
    pub constraint: f64,
    pub objective: f64,
    /// Multiplier after the ascent step.
    pub lambda: f64,
    /// Margin the step was taken under.
    pub margin: f64,
    pub grad_norm: f64,
}

/// Draws `n` retain examples whose fact differs from `fact_id`.
pub fn sample_retain<'e, R: Rng + ?Sized>(
    pool: &[&'e Example],
    fact_id: usize,
    n: usize,
    rng: &mut R,
) -> Result<Vec<&'e [u32]>> {
    if !pool.iter().any(|e| e.fact_id != fact_id) {
        return Err(Error::Empty("retain pool without the edited fact"));
    }
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let e = pool[rng.random_range(0..pool.len())];
        if e.fact_id != fact_id {
            out.push(e.x.as_slice());
        }
    }
    Ok(out)
}

/// One descent step on `φ` and one projected ascent step on `λ`.
#[allow(clippy::too_many_arguments)]
pub fn lagrangian_step<T: Scalar, R: Rng + ?Sized>(
    phi: &mut EditorParams<T>,
    state: &mut LagrangianState,
    optimizer: &mut PhiOptimizer<T>,
    theta: &ParamSet<T>,
    batch: &[&EditRequest],
    retain_pool: &[&Example],
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<StepDiagnostics> {
    if batch.is_empty() {
        return Err(Error::Empty("request batch"));
    }
    if state.lambda < 0.0 {
        return Err(Error::invalid("multiplier must be nonnegative"));
    }
    let terms: Vec<RequestTerms> = batch
        .iter()
        .map(|&request| {
            let retain = match cfg.constraint {
                ConstraintKind::Kl => sample_retain(retain_pool, request.fact_id, cfg.o_sample, rng)?,
                ConstraintKind::L2 => Vec::new(),
            };
            Ok(RequestTerms { request, retain })
        })
        .collect::<Result<_>>()?;

    let snapshot = &*phi;
    let st = *state;
    let per_request: Vec<(f64, f64, f64, Vec<Tensor<T>>)> = terms
        .par_iter()
        .map(|t| {
            let og = request_objective(snapshot, theta, t, &st, cfg)?;
            let (vals, mut grads) = og.graph.forward_backward(&og.bindings, og.objective)?;
            let gs = og
                .nodes
                .iter()
                .map(|(_, &id)| grads.take(id).expect("editor leaf gradient"))
                .collect();
            Ok((vals.scalar(og.objective), vals.scalar(og.loss), vals.scalar(og.constraint), gs))
        })
        .collect::<Result<_>>()?;

    let inv = T::of(1.0 / batch.len() as f64);
    let mut total: Vec<Tensor<T>> = phi.tensors().values().map(|t| Tensor::zeros(t.shape())).collect();
    let (mut obj, mut loss, mut cons) = (0.0, 0.0, 0.0);
    for (o, l, c, gs) in &per_request {
        obj += o;
        loss += l;
        cons += c;
        for (acc, g) in total.iter_mut().zip(gs) {
            acc.axpy(inv, g);
        }
    }
    let n = batch.len() as f64;
    let (obj, loss, cons) = (obj / n, loss / n, cons / n);
    if !obj.is_finite() {
        return Err(Error::Diverged("non-finite objective".into()));
    }
    let grad_norm = total.iter().map(Tensor::sq_norm_f64).sum::<f64>().sqrt();
    if let Some(clip) = cfg.clip_norm {
        if grad_norm > clip {
            let s = T::of(clip / grad_norm);
            for g in &mut total {
                *g = g.scale(s);
            }
        }
    }
    optimizer.step(phi, &total);
    if phi.tensors().values().any(|t| !t.all_finite()) {
        return Err(Error::Diverged("non-finite editor parameters".into()));
    }
    let margin = state.margin;
    state.lambda = update_multiplier(state.lambda, cfg.lr_lambda, cfg.multiplier.violation(cons, margin));
    Ok(StepDiagnostics {
        edit_loss: loss,
        constraint: cons,
        objective: obj,
        lambda: state.lambda,
        margin,
        grad_norm,
    })
}

/// Fraction of edited requests whose `x` flips to `a`, and mean fraction of
/// retain decisions left unchanged.
pub fn validate<T: Scalar>(
    phi: &EditorParams<T>,
    theta: &ParamSet<T>,
    requests: &[&EditRequest],
    retain: &[&Example],
) -> Result<(f64, f64)> {
    if requests.is_empty() {
        return Err(Error::Empty("validation requests"));
    }
    let xs: Vec<&[u32]> = retain.iter().map(|e| e.x.as_slice()).collect();
    let before = decide_batch(theta, &xs)?;
    let rows: Vec<(bool, f64)> = requests
        .par_iter()
        .map(|r| {
            let edited = edit_once(phi, theta, r)?;
            let hit = decide(&predict(&edited, &r.x)?) == r.a;
            let keep: Vec<usize> = (0..retain.len()).filter(|&i| retain[i].fact_id != r.fact_id).collect();
            if keep.is_empty() {
                return Ok((hit, 1.0));
            }
            let sub: Vec<&[u32]> = keep.iter().map(|&i| xs[i]).collect();
            let after = decide_batch(&edited, &sub)?;
            let same = keep.iter().zip(&after).filter(|(&i, &d)| before[i] == d).count();
            Ok((hit, same as f64 / keep.len() as f64))
        })
        .collect::<Result<_>>()?;
    let n = rows.len() as f64;
    let success = rows.iter().filter(|r| r.0).count() as f64 / n;
    let retain_acc = rows.iter().map(|r| r.1).sum::<f64>() / n;
    Ok((success, retain_acc))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub step: usize,
    pub edit_loss: f64,
    pub constraint: f64,
    pub lambda: f64,
    pub margin: f64,
    pub val_success: Option<f64>,
    pub val_retain: Option<f64>,
}

pub fn history_csv(rows: &[HistoryRow]) -> String {
    let mut out = String::from("step,edit_loss,constraint,lambda,margin,val_success,val_retain\n");
    // Multiplier, margin and validation columns are written exactly.
    let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
    for r in rows {
        let _ = writeln!(
            out,
            "{},{:.6e},{:.6e},{:e},{:e},{},{}",
            r.step,
            r.edit_loss,
            r.constraint,
            r.lambda,
            r.margin,
            opt(r.val_success),
            opt(r.val_retain)
        );
    }
    out
}

#[derive(Clone, Debug)]
pub struct EditorTraining<T: Scalar> {
    /// Parameters at the best validation checkpoint.
    pub phi: EditorParams<T>,
    pub best_step: usize,
    /// Margin in force at the selected checkpoint.
    pub best_margin: f64,
    pub best_score: f64,
    pub final_state: LagrangianState,
    pub history: Vec<HistoryRow>,
}

/// Training stopped early; carries the best parameters seen before the failure.
#[derive(Debug)]
pub struct TrainFailure<T: Scalar> {
    pub error: Error,
    pub step: usize,
    pub last_good: EditorParams<T>,
    pub history: Vec<HistoryRow>,
}

impl<T: Scalar> From<TrainFailure<T>> for Error {
    fn from(f: TrainFailure<T>) -> Self {
        match f.error {
            Error::Diverged(detail) => Error::Diverged(format!("step {}: {detail}", f.step)),
            other => other,
        }
    }
}

/// Up to `n` items drawn without replacement, kept in their original order.
pub fn fixed_subset<'a, E, R: Rng + ?Sized>(items: &'a [E], n: usize, rng: &mut R) -> Vec<&'a E> {
    let mut idx = rand::seq::index::sample(rng, items.len(), n.min(items.len())).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| &items[i]).collect()
}

/// Alternates constrained steps over shuffled batches with validation,
/// margin annealing and selection on `success + retain`.
#[allow(clippy::result_large_err)]
pub fn train_editor<T: Scalar>(
    phi0: &EditorParams<T>,
    train: &[EditRequest],
    val: &[EditRequest],
    theta: &ParamSet<T>,
    retain_pool: &[&Example],
    val_retain_pool: &[&Example],
    cfg: &TrainConfig,
) -> Result<EditorTraining<T>, TrainFailure<T>> {
    let fail = |error, step, phi: &EditorParams<T>, history: Vec<HistoryRow>| TrainFailure {
        error,
        step,
        last_good: phi.clone(),
        history,
    };
    if let Err(e) = cfg.validate() {
        return Err(fail(e, 0, phi0, Vec::new()));
    }
    if train.is_empty() || val.is_empty() {
        return Err(fail(Error::Empty("editor training or validation requests"), 0, phi0, Vec::new()));
    }
    let mut rng = seeded(cfg.seed);
    let val_slice: Vec<&EditRequest> = fixed_subset(val, cfg.val_requests, &mut rng);
    let val_retain: Vec<&Example> = fixed_subset(val_retain_pool, cfg.val_retain, &mut rng)
        .into_iter()
        .copied()
        .collect();

    let mut phi = phi0.clone();
    let mut optimizer = PhiOptimizer::new(cfg.optimizer, cfg.lr_phi, &phi);
    let mut state = LagrangianState::new(cfg.lambda_init, &cfg.margin);
    let mut history = Vec::with_capacity(cfg.max_steps);
    let mut best: Option<(f64, usize, f64, EditorParams<T>)> = None;
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;

    for step in 1..=cfg.max_steps {
        if cursor + cfg.batch > order.len() {
            order = (0..train.len()).collect();
            rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
            cursor = 0;
        }
        let end = (cursor + cfg.batch).min(order.len());
        let batch: Vec<&EditRequest> = order[cursor..end].iter().map(|&i| &train[i]).collect();
        cursor = end;

        let last_good = best.as_ref().map_or(&phi, |b| &b.3).clone();
        let diag = match lagrangian_step(
            &mut phi,
            &mut state,
            &mut optimizer,
            theta,
            &batch,
            retain_pool,
            cfg,
            &mut rng,
        ) {
            Ok(d) => d,
            Err(e) => {
                let e = match e {
                    Error::NonFinite { .. } => Error::Diverged("non-finite value in objective".into()),
                    other => other,
                };
                return Err(fail(e, step, &last_good, history));
            }
        };
        let mut row = HistoryRow {
            step,
            edit_loss: diag.edit_loss,
            constraint: diag.constraint,
            lambda: diag.lambda,
            margin: diag.margin,
            val_success: None,
            val_retain: None,
        };
        if step % cfg.val_every == 0 || step == cfg.max_steps {
            let (success, retain) = match validate(&phi, theta, &val_slice, &val_retain) {
                Ok(v) => v,
                Err(e) => return Err(fail(e, step, &last_good, history)),
            };
            row.val_success = Some(success);
            row.val_retain = Some(retain);
            log::info!(
                "editor step {step}: loss {:.4} C {:.3e} λ {:.3e} m {:.3e} success {success:.3} retain {retain:.3}",
                diag.edit_loss,
                diag.constraint,
                diag.lambda,
                diag.margin
            );
            let score = success + retain;
            if best.as_ref().is_none_or(|b| score > b.0) {
                best = Some((score, step, state.margin, phi.clone()));
            }
            state = anneal_margin(&state, success);
        }
        history.push(row);
    }
    let (best_score, best_step, best_margin, best_phi) = best.expect("validated at the final step");
    Ok(EditorTraining {
        phi: best_phi,
        best_step,
        best_margin,
        best_score,
        final_state: state,
        history,
    })
}
