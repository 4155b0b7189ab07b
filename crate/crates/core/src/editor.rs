//! Hyper-network editor.
//!
//! A request `<x, y, a>` is rendered as `x [SEP] y [SEP] a`, encoded by a
//! bidirectional GRU, and condensed into a conditioning vector `h`. For each
//! editable matrix `W` (`n × m`) five heads read `h` and emit
//! `α, β ∈ R^m`, `γ, δ ∈ R^n` and a scalar `η`; the shift is
//!
//! ```text
//! ΔW = σ(η) · (α̂ ⊙ ∇_W L(θ; x, a) + β̂),   α̂_ij = γ_i softmax(α)_j,   β̂_ij = δ_i softmax(β)_j
//! ```
//!
//! The base-model gradient enters as a constant: no derivative flows into it.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::base::{decide, loss_gradients, predict};
use crate::error::{Error, Result};
use crate::params::{ParamSet, TensorMap};
use crate::requests::EditRequest;
use crate::rng::seeded;
use crate::scalar::Scalar;
use crate::tensor::{Bindings, Graph, NodeId, Tensor};

/// Per-matrix shifts, keyed by editable-matrix name.
pub type ShiftSet<T = f32> = TensorMap<T>;

pub const HEADS: [&str; 5] = ["alpha", "beta", "gamma", "delta", "eta"];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditorConfig {
    pub vocab: usize,
    pub embed_dim: usize,
    /// GRU hidden size per direction.
    pub hidden: usize,
    /// Width of the conditioning vector `h`.
    pub cond_dim: usize,
    pub head_hidden: usize,
    pub targets: Vec<TargetSpec>,
    pub sep_token: u32,
    /// Token naming each class label.
    pub class_tokens: Vec<u32>,
}

impl EditorConfig {
    /// Targets shaped like the editable matrices of `theta`.
    pub fn targets_of<T: Scalar>(theta: &ParamSet<T>) -> Result<Vec<TargetSpec>> {
        theta
            .editable()
            .iter()
            .map(|name| {
                let t = theta.get(name)?;
                let (rows, cols) = t.as_matrix_dims();
                Ok(TargetSpec {
                    name: name.clone(),
                    rows,
                    cols,
                })
            })
            .collect()
    }

    fn head_out(&self, target: &TargetSpec, head: &str) -> usize {
        match head {
            "alpha" | "beta" => target.cols,
            "gamma" | "delta" => target.rows,
            _ => 1,
        }
    }

    /// `(name, shape, fan_in)` for every parameter tensor; biases have fan-in 0.
    fn layout(&self) -> Vec<(String, Vec<usize>, usize)> {
        let (e, hd, c, k) = (self.embed_dim, self.hidden, self.cond_dim, self.head_hidden);
        let mut out = vec![("embed".to_string(), vec![self.vocab, e], e)];
        for dir in ["fwd", "bwd"] {
            for gate in ["z", "r", "n"] {
                out.push((format!("{dir}.w{gate}"), vec![e, hd], e));
                out.push((format!("{dir}.u{gate}"), vec![hd, hd], hd));
                out.push((format!("{dir}.b{gate}"), vec![hd], 0));
            }
        }
        out.push(("cond.w".into(), vec![2 * hd, c], 2 * hd));
        out.push(("cond.b".into(), vec![c], 0));
        for t in &self.targets {
            for head in HEADS {
                let d = self.head_out(t, head);
                let p = format!("{}.{head}", t.name);
                out.push((format!("{p}.w1"), vec![c, k], c));
                out.push((format!("{p}.b1"), vec![k], 0));
                out.push((format!("{p}.w2"), vec![k, d], k));
                out.push((format!("{p}.b2"), vec![d], 0));
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EditorParams<T: Scalar = f32> {
    pub config: EditorConfig,
    tensors: TensorMap<T>,
}

impl<T: Scalar> EditorParams<T> {
    /// Uniform `±1/√fan_in` weights and zero biases.
    pub fn init(config: EditorConfig, seed: u64) -> Result<Self> {
        if config.targets.is_empty() {
            return Err(Error::invalid("editor needs at least one target matrix"));
        }
        if config.embed_dim == 0 || config.hidden == 0 || config.cond_dim == 0 || config.head_hidden == 0 {
            return Err(Error::invalid("editor dimensions must be at least 1"));
        }
        let mut rng = seeded(seed);
        let tensors = config
            .layout()
            .into_iter()
            .map(|(name, shape, fan_in)| {
                let t = if fan_in == 0 {
                    Tensor::zeros(&shape)
                } else {
                    Tensor::uniform(&shape, 1.0 / (fan_in as f64).sqrt(), &mut rng)
                };
                (name, t)
            })
            .collect();
        Ok(Self { config, tensors })
    }

    /// Rebuilds from a tensor table, checking names and shapes.
    pub fn from_tensors(config: EditorConfig, tensors: TensorMap<T>) -> Result<Self> {
        let layout = config.layout();
        if layout.len() != tensors.len() {
            return Err(Error::Names(format!(
                "expected {} editor tensors, got {}",
                layout.len(),
                tensors.len()
            )));
        }
        for (name, shape, _) in &layout {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::Names(format!("missing editor tensor {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Names(format!(
                    "{name}: shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(Self { config, tensors })
    }

    pub fn tensors(&self) -> &TensorMap<T> {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut TensorMap<T> {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Names(format!("no editor tensor {name}")))
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Head parameters only; these are the ones that scale with the target sizes.
    pub fn n_head_scalars(&self) -> usize {
        self.tensors
            .iter()
            .filter(|(k, _)| self.config.targets.iter().any(|t| k.starts_with(&format!("{}.", t.name))))
            .map(|(_, v)| v.numel())
            .sum()
    }

    pub fn cast<U: Scalar>(&self) -> EditorParams<U> {
        EditorParams {
            config: self.config.clone(),
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// `x [SEP] tok(y) [SEP] tok(a)`.
    pub fn request_tokens(&self, x: &[u32], y: u32, a: u32) -> Result<Vec<u32>> {
        let tok = |c: u32| {
            self.config
                .class_tokens
                .get(c as usize)
                .copied()
                .ok_or(Error::OutOfRange {
                    what: "class",
                    index: c as usize,
                    len: self.config.class_tokens.len(),
                })
        };
        let mut seq = x.to_vec();
        seq.push(self.config.sep_token);
        seq.push(tok(y)?);
        seq.push(self.config.sep_token);
        seq.push(tok(a)?);
        if let Some(&bad) = seq.iter().find(|&&t| t as usize >= self.config.vocab) {
            return Err(Error::UnknownToken(bad));
        }
        Ok(seq)
    }
}

/// Leaf nodes of an editor inside a graph.
pub struct EditorNodes {
    nodes: IndexMap<String, NodeId>,
}

impl EditorNodes {
    /// Declares every editor tensor as a bound leaf.
    pub fn declare<'a, T: Scalar>(
        g: &mut Graph<T>,
        phi: &'a EditorParams<T>,
        bindings: &mut Bindings<'a, T>,
    ) -> Self {
        let nodes = phi
            .tensors
            .iter()
            .map(|(name, t)| {
                let id = g.leaf(name.as_str());
                bindings.bind(id, t);
                (name.clone(), id)
            })
            .collect();
        Self { nodes }
    }

    pub fn get(&self, name: &str) -> NodeId {
        self.nodes[name]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &NodeId)> {
        self.nodes.iter()
    }

    fn gru_pass<T: Scalar>(&self, g: &mut Graph<T>, dir: &str, emb: NodeId, order: &[usize], hidden: usize) -> NodeId {
        let p = |s: &str| self.get(&format!("{dir}.{s}"));
        let xz = g.matmul(emb, p("wz"));
        let xr = g.matmul(emb, p("wr"));
        let xn = g.matmul(emb, p("wn"));
        let mut h = g.constant(Tensor::zeros(&[1, hidden]));
        for &t in order {
            let xz_t = g.index_select(xz, vec![t]);
            let xr_t = g.index_select(xr, vec![t]);
            let xn_t = g.index_select(xn, vec![t]);
            let hz = g.matmul(h, p("uz"));
            let z = g.add(xz_t, hz);
            let z = g.add_row(z, p("bz"));
            let z = g.sigmoid(z);
            let hr = g.matmul(h, p("ur"));
            let r = g.add(xr_t, hr);
            let r = g.add_row(r, p("br"));
            let r = g.sigmoid(r);
            let hn = g.matmul(h, p("un"));
            let rhn = g.mul(r, hn);
            let n = g.add(xn_t, rhn);
            let n = g.add_row(n, p("bn"));
            let n = g.tanh(n);
            // h' = (1 - z) ⊙ n + z ⊙ h
            let diff = g.sub(h, n);
            let zd = g.mul(z, diff);
            h = g.add(n, zd);
        }
        h
    }

    /// Conditioning vector `h` (`[1, cond_dim]`) for an encoded token sequence.
    pub fn encode<T: Scalar>(&self, g: &mut Graph<T>, config: &EditorConfig, tokens: &[u32]) -> NodeId {
        let idx: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let emb = g.index_select(self.get("embed"), idx);
        let fwd: Vec<usize> = (0..tokens.len()).collect();
        let bwd: Vec<usize> = (0..tokens.len()).rev().collect();
        let hf = self.gru_pass(g, "fwd", emb, &fwd, config.hidden);
        let hb = self.gru_pass(g, "bwd", emb, &bwd, config.hidden);
        let both = g.concat(&[hf, hb]);
        let c = g.matmul(both, self.get("cond.w"));
        let c = g.add_row(c, self.get("cond.b"));
        g.tanh(c)
    }

    fn head<T: Scalar>(&self, g: &mut Graph<T>, h: NodeId, target: &str, head: &str) -> NodeId {
        let p = |s: &str| self.get(&format!("{target}.{head}.{s}"));
        let a = g.matmul(h, p("w1"));
        let a = g.add_row(a, p("b1"));
        let a = g.tanh(a);
        let o = g.matmul(a, p("w2"));
        g.add_row(o, p("b2"))
    }

    /// All five head outputs for one target, in [`HEADS`] order.
    pub fn heads<T: Scalar>(&self, g: &mut Graph<T>, h: NodeId, target: &str) -> [NodeId; 5] {
        HEADS.map(|k| self.head(g, h, target, k))
    }

    /// `ΔW` node for one target. With `stop_gradient`, `grad` is detached.
    pub fn shift<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        h: NodeId,
        grad: NodeId,
        target: &str,
        stop_gradient: bool,
    ) -> ShiftNodes {
        let [alpha, beta, gamma, delta, eta] = self.heads(g, h, target);
        let grad = if stop_gradient { g.detach(grad) } else { grad };
        let sa = g.softmax(alpha);
        let alpha_hat = g.outer(gamma, sa);
        let sb = g.softmax(beta);
        let beta_hat = g.outer(delta, sb);
        let gate = g.sigmoid(eta);
        let scaled = g.mul(alpha_hat, grad);
        let inner = g.add(scaled, beta_hat);
        let delta_w = g.scale_by(gate, inner);
        ShiftNodes {
            alpha_hat,
            beta_hat,
            gate,
            gamma,
            delta,
            delta_w,
        }
    }
}

/// Intermediate nodes of one shift, exposed for structural checks.
#[derive(Clone, Copy, Debug)]
pub struct ShiftNodes {
    pub alpha_hat: NodeId,
    pub beta_hat: NodeId,
    pub gate: NodeId,
    pub gamma: NodeId,
    pub delta: NodeId,
    pub delta_w: NodeId,
}

/// Conditioning vector for `<x, y, a>`.
pub fn encode_request<T: Scalar>(phi: &EditorParams<T>, x: &[u32], y: u32, a: u32) -> Result<Tensor<T>> {
    let tokens = phi.request_tokens(x, y, a)?;
    let mut g = Graph::new();
    let mut b = Bindings::new();
    let nodes = EditorNodes::declare(&mut g, phi, &mut b);
    let h = nodes.encode(&mut g, &phi.config, &tokens);
    Ok(g.forward(&b)?.get(h).clone())
}

fn target<'a>(phi_cfg: &'a EditorConfig, name: &str) -> Result<&'a TargetSpec> {
    phi_cfg
        .targets
        .iter()
        .find(|t| t.name == name)
        .ok_or_else(|| Error::Names(format!("editor has no head for {name}")))
}

/// Shift for one matrix from a conditioning vector and that matrix's gradient.
pub fn predict_shift<T: Scalar>(
    phi: &EditorParams<T>,
    h: &Tensor<T>,
    grad: &Tensor<T>,
    name: &str,
) -> Result<Tensor<T>> {
    let tgt = target(&phi.config, name)?;
    if grad.shape() != [tgt.rows, tgt.cols] {
        return Err(Error::invalid(format!(
            "gradient shape {:?} does not match {name} [{}, {}]",
            grad.shape(),
            tgt.rows,
            tgt.cols
        )));
    }
    if h.numel() != phi.config.cond_dim {
        return Err(Error::invalid("conditioning vector has the wrong width"));
    }
    let mut g = Graph::new();
    let mut b = Bindings::new();
    let nodes = EditorNodes::declare(&mut g, phi, &mut b);
    let hn = g.constant(Tensor::new(vec![1, h.numel()], h.data().to_vec())?);
    let gn = g.constant(grad.clone());
    let s = nodes.shift(&mut g, hn, gn, name, true);
    Ok(g.forward(&b)?.get(s.delta_w).clone())
}

/// `θ' = θ + Δθ` over exactly the editable matrices.
pub fn apply_edit<T: Scalar>(theta: &ParamSet<T>, shifts: &ShiftSet<T>) -> Result<ParamSet<T>> {
    let editable = theta.editable();
    if shifts.len() != editable.len() || editable.iter().any(|n| !shifts.contains_key(n)) {
        return Err(Error::Names(format!(
            "shift names {:?} do not match editable set {editable:?}",
            shifts.keys().collect::<Vec<_>>()
        )));
    }
    let mut out = theta.clone();
    for (name, delta) in shifts {
        let w = out.get_mut(name)?;
        if w.shape() != delta.shape() {
            return Err(Error::invalid(format!(
                "shift for {name} has shape {:?}, matrix has {:?}",
                delta.shape(),
                w.shape()
            )));
        }
        for (wv, &dv) in w.data_mut().iter_mut().zip(delta.data()) {
            *wv += dv;
        }
    }
    Ok(out)
}

/// Shifts the editor proposes for `request` at parameters `theta`.
pub fn compute_shifts<T: Scalar>(
    phi: &EditorParams<T>,
    theta: &ParamSet<T>,
    request: &EditRequest,
) -> Result<ShiftSet<T>> {
    let names = theta.editable().to_vec();
    let (_, grads) = loss_gradients(theta, &request.x, request.a, &names)?;
    let tokens = phi.request_tokens(&request.x, request.y, request.a)?;
    let mut g = Graph::new();
    let mut b = Bindings::new();
    let nodes = EditorNodes::declare(&mut g, phi, &mut b);
    let h = nodes.encode(&mut g, &phi.config, &tokens);
    let mut out_nodes = Vec::with_capacity(names.len());
    for name in &names {
        target(&phi.config, name)?;
        let gn = g.constant(grads[name].clone());
        out_nodes.push(nodes.shift(&mut g, h, gn, name, true).delta_w);
    }
    let vals = g.forward(&b)?;
    Ok(names
        .into_iter()
        .zip(out_nodes)
        .map(|(n, id)| (n, vals.get(id).clone()))
        .collect())
}

/// Single application of the editor.
pub fn edit_once<T: Scalar>(
    phi: &EditorParams<T>,
    theta: &ParamSet<T>,
    request: &EditRequest,
) -> Result<ParamSet<T>> {
    let shifts = compute_shifts(phi, theta, request)?;
    apply_edit(theta, &shifts)
}

/// Re-applies the editor, with the gradient recomputed at the current
/// parameters, until `x` is mapped to `a` or `max_iter` edits were made.
pub fn edit_with_loop<T: Scalar>(
    phi: &EditorParams<T>,
    theta: &ParamSet<T>,
    request: &EditRequest,
    max_iter: usize,
) -> Result<(ParamSet<T>, usize)> {
    if max_iter == 0 {
        return Err(Error::invalid("max_iter must be at least 1"));
    }
    let mut current = theta.clone();
    for it in 1..=max_iter {
        current = edit_once(phi, &current, request)?;
        if decide(&predict(&current, &request.x)?) == request.a {
            return Ok((current, it));
        }
    }
    Ok((current, max_iter))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::base::init_base_model;
    use crate::data::Split;

    pub(crate) fn tiny_config(theta: &ParamSet<f64>) -> EditorConfig {
        EditorConfig {
            vocab: 12,
            embed_dim: 3,
            hidden: 3,
            cond_dim: 4,
            head_hidden: 3,
            targets: EditorConfig::targets_of(theta).unwrap(),
            sep_token: 0,
            class_tokens: vec![1, 2, 3],
        }
    }

    fn request() -> EditRequest {
        EditRequest {
            id: 0,
            example: 0,
            fact_id: 0,
            split: Split::Train,
            x: vec![5, 6, 7],
            y: 0,
            a: 2,
            paraphrases: vec![vec![5, 6, 7]],
        }
    }

    #[test]
    fn conditioning_vector_is_fixed_width_and_deterministic() {
        let theta: ParamSet<f64> = init_base_model(4, 5, 3, 12, 1).unwrap();
        let phi = EditorParams::<f64>::init(tiny_config(&theta), 2).unwrap();
        let h1 = encode_request(&phi, &[5, 6, 7], 0, 2).unwrap();
        let h2 = encode_request(&phi, &[5, 6, 7], 0, 2).unwrap();
        assert!(h1.bit_eq(&h2));
        assert_eq!(h1.numel(), 4);
        let long = encode_request(&phi, &[5, 6, 7, 8, 9, 10, 11], 0, 2).unwrap();
        assert_eq!(long.numel(), 4);
        let other = encode_request(&phi, &[5, 6, 7], 0, 1).unwrap();
        assert!(!h1.bit_eq(&other));
    }

    #[test]
    fn unknown_tokens_rejected() {
        let theta: ParamSet<f64> = init_base_model(4, 5, 3, 12, 1).unwrap();
        let phi = EditorParams::<f64>::init(tiny_config(&theta), 2).unwrap();
        assert!(matches!(
            encode_request(&phi, &[5, 40], 0, 2),
            Err(Error::UnknownToken(40))
        ));
        assert!(encode_request(&phi, &[5], 0, 9).is_err());
    }

    #[test]
    fn shape_mismatch_in_predict_shift() {
        let theta: ParamSet<f64> = init_base_model(4, 5, 3, 12, 1).unwrap();
        let phi = EditorParams::<f64>::init(tiny_config(&theta), 2).unwrap();
        let h = encode_request(&phi, &[5], 0, 1).unwrap();
        assert!(predict_shift(&phi, &h, &Tensor::zeros(&[5, 4]), "W1").is_err());
        assert!(predict_shift(&phi, &h, &Tensor::zeros(&[4, 5]), "W1").is_ok());
        assert!(predict_shift(&phi, &h, &Tensor::zeros(&[4, 5]), "W9").is_err());
    }

    #[test]
    fn zero_shift_is_identity_and_only_editable_change() {
        let theta: ParamSet<f32> = init_base_model(4, 5, 3, 12, 1).unwrap();
        let zeros: ShiftSet<f32> = theta
            .editable()
            .iter()
            .map(|n| (n.clone(), Tensor::zeros(theta.get(n).unwrap().shape())))
            .collect();
        assert!(apply_edit(&theta, &zeros).unwrap().bit_eq(&theta));

        let ones: ShiftSet<f32> = theta
            .editable()
            .iter()
            .map(|n| (n.clone(), Tensor::filled(theta.get(n).unwrap().shape(), 0.25)))
            .collect();
        let edited = apply_edit(&theta, &ones).unwrap();
        for name in ["embeddings", "b1", "b2"] {
            assert!(edited.get(name).unwrap().bit_eq(theta.get(name).unwrap()));
        }
        assert!(!edited.get("W1").unwrap().bit_eq(theta.get("W1").unwrap()));
    }

    #[test]
    fn apply_edit_name_mismatch() {
        let theta: ParamSet<f32> = init_base_model(4, 5, 3, 12, 1).unwrap();
        let mut shifts = ShiftSet::new();
        shifts.insert("W1".to_string(), Tensor::zeros(&[4, 5]));
        assert!(apply_edit(&theta, &shifts).is_err());
        shifts.insert("b1".to_string(), Tensor::zeros(&[5]));
        assert!(apply_edit(&theta, &shifts).is_err());
    }

    #[test]
    fn edit_once_leaves_input_untouched() {
        let theta: ParamSet<f64> = init_base_model(4, 5, 3, 12, 1).unwrap();
        let before = theta.clone();
        let phi = EditorParams::<f64>::init(tiny_config(&theta), 2).unwrap();
        let edited = edit_once(&phi, &theta, &request()).unwrap();
        assert!(theta.bit_eq(&before));
        assert!(!edited.bit_eq(&theta));
    }

    #[test]
    fn loop_respects_bound() {
        let theta: ParamSet<f64> = init_base_model(4, 5, 3, 12, 1).unwrap();
        let phi = EditorParams::<f64>::init(tiny_config(&theta), 2).unwrap();
        for max_iter in [1, 3] {
            let (_, it) = edit_with_loop(&phi, &theta, &request(), max_iter).unwrap();
            assert!(it >= 1 && it <= max_iter);
        }
        assert!(edit_with_loop(&phi, &theta, &request(), 0).is_err());
    }

    #[test]
    fn closed_gate_gives_vanishing_shift() {
        let theta: ParamSet<f64> = init_base_model(4, 5, 3, 12, 1).unwrap();
        let mut phi = EditorParams::<f64>::init(tiny_config(&theta), 2).unwrap();
        for name in ["W1", "W2"] {
            let w2 = phi.tensors_mut().get_mut(&format!("{name}.eta.w2")).unwrap();
            w2.data_mut().iter_mut().for_each(|v| *v = 0.0);
            let b2 = phi.tensors_mut().get_mut(&format!("{name}.eta.b2")).unwrap();
            b2.data_mut()[0] = -20.0;
        }
        let shifts = compute_shifts(&phi, &theta, &request()).unwrap();
        for s in shifts.values() {
            assert!(s.max_abs() < 1e-7, "{}", s.max_abs());
        }
    }

    #[test]
    fn head_parameters_scale_with_row_plus_column_count() {
        let small: ParamSet<f64> = init_base_model(4, 5, 3, 12, 1).unwrap();
        let big: ParamSet<f64> = init_base_model(8, 10, 6, 12, 1).unwrap();
        let n_small = EditorParams::<f64>::init(tiny_config(&small), 2).unwrap().n_head_scalars();
        let n_big = EditorParams::<f64>::init(tiny_config(&big), 2).unwrap().n_head_scalars();
        // Per head: hidden layer c·k + k, output k·d + d, with c = 4 and k = 3.
        // Head outputs over a target sum to 2·cols + 2·rows + 1.
        let fixed = |targets: usize| targets * 5 * (4 * 3 + 3);
        let lin = |r: usize, c: usize| 4 * (2 * (r + c) + 1);
        let expect_small = fixed(2) + lin(4, 5) + lin(5, 3);
        let expect_big = fixed(2) + lin(8, 10) + lin(10, 6);
        assert_eq!(n_small, expect_small);
        assert_eq!(n_big, expect_big);
    }
}
