//! Gradient-based comparison editors: RMSProp fine-tuning on the edit input,
//! optionally projected into a norm ball around the original parameters.

use serde::{Deserialize, Serialize};

use crate::base::{decide, loss_gradients, predict};
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::requests::EditRequest;
use crate::scalar::Scalar;
use crate::trainer::Norm;

/// Radii swept for the norm-constrained baseline.
pub const ZHU_GRID: [f64; 5] = [1e-3, 5e-4, 1e-4, 5e-5, 1e-5];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    /// Every editable matrix.
    All,
    /// A single named matrix.
    Matrix(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub lr: f64,
    pub max_steps: usize,
    pub scope: Scope,
    pub decay: f64,
    pub eps: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            max_steps: 100,
            scope: Scope::All,
            decay: 0.9,
            eps: 1e-8,
        }
    }
}

impl FinetuneConfig {
    fn targets<T: Scalar>(&self, theta: &ParamSet<T>) -> Result<Vec<String>> {
        if self.max_steps == 0 {
            return Err(Error::invalid("fine-tuning needs at least one step"));
        }
        if self.lr <= 0.0 || !(0.0..1.0).contains(&self.decay) || self.eps <= 0.0 {
            return Err(Error::invalid(format!("bad fine-tuning config: {self:?}")));
        }
        match &self.scope {
            Scope::All => Ok(theta.editable().to_vec()),
            Scope::Matrix(name) if theta.is_editable(name) => Ok(vec![name.clone()]),
            Scope::Matrix(name) => Err(Error::Names(format!("{name} is not an editable matrix"))),
        }
    }
}

fn project_linf<T: Scalar>(theta: &ParamSet<T>, edited: &mut ParamSet<T>, names: &[String], m: f64) -> Result<()> {
    for name in names {
        let base = theta.get(name)?;
        let w = edited.get_mut(name)?;
        for (v, &b) in w.data_mut().iter_mut().zip(base.data()) {
            let dev = v.f64() - b.f64();
            if dev.abs() <= m {
                continue;
            }
            let mut c = T::of(b.f64() + m.copysign(dev));
            while (c.f64() - b.f64()).abs() > m {
                c = c.next_toward(b);
            }
            *v = c;
        }
    }
    Ok(())
}

fn project_l2<T: Scalar>(theta: &ParamSet<T>, edited: &mut ParamSet<T>, names: &[String], m: f64) -> Result<()> {
    let mut sq = 0.0;
    for name in names {
        let (b, w) = (theta.get(name)?, edited.get(name)?);
        sq += w.data().iter().zip(b.data()).map(|(v, b)| (v.f64() - b.f64()).powi(2)).sum::<f64>();
    }
    let norm = sq.sqrt();
    if norm <= m {
        return Ok(());
    }
    let s = m / norm;
    for name in names {
        let base = theta.get(name)?;
        let w = edited.get_mut(name)?;
        for (v, &b) in w.data_mut().iter_mut().zip(base.data()) {
            *v = T::of(b.f64() + s * (v.f64() - b.f64()));
        }
    }
    Ok(())
}

/// Projects the scoped deviation of `edited` from `theta` onto the ball of radius `m`.
pub fn project<T: Scalar>(
    theta: &ParamSet<T>,
    edited: &mut ParamSet<T>,
    names: &[String],
    m: f64,
    norm: Norm,
) -> Result<()> {
    match norm {
        Norm::LInf => project_linf(theta, edited, names, m),
        Norm::L2 => project_l2(theta, edited, names, m),
    }
}

fn run<T: Scalar>(
    theta: &ParamSet<T>,
    request: &EditRequest,
    cfg: &FinetuneConfig,
    mut after_step: impl FnMut(usize, &mut ParamSet<T>) -> Result<()>,
) -> Result<(ParamSet<T>, usize)> {
    let names = cfg.targets(theta)?;
    let mut current = theta.clone();
    if decide(&predict(&current, &request.x)?) == request.a {
        return Ok((current, 0));
    }
    let mut sq: Vec<Vec<f64>> = names
        .iter()
        .map(|n| Ok(vec![0.0; theta.get(n)?.numel()]))
        .collect::<Result<_>>()?;
    for step in 1..=cfg.max_steps {
        let (_, grads) = loss_gradients(&current, &request.x, request.a, &names)?;
        for (name, acc) in names.iter().zip(sq.iter_mut()) {
            let g = &grads[name];
            let w = current.get_mut(name)?;
            for ((v, &gv), s) in w.data_mut().iter_mut().zip(g.data()).zip(acc.iter_mut()) {
                let gf = gv.f64();
                *s = cfg.decay * *s + (1.0 - cfg.decay) * gf * gf;
                *v = T::of(v.f64() - cfg.lr * gf / (s.sqrt() + cfg.eps));
            }
        }
        after_step(step, &mut current)?;
        if decide(&predict(&current, &request.x)?) == request.a {
            return Ok((current, step));
        }
    }
    Ok((current, cfg.max_steps))
}

/// RMSProp on `L(θ; x, a)` over the configured scope until `x` maps to `a`.
pub fn finetune_edit<T: Scalar>(
    theta: &ParamSet<T>,
    request: &EditRequest,
    cfg: &FinetuneConfig,
) -> Result<(ParamSet<T>, usize)> {
    run(theta, request, cfg, |_, _| Ok(()))
}

/// [`finetune_edit`] with a projection into the `m`-ball after every step.
/// `observe` sees each projected iterate.
pub fn constrained_finetune_edit<T: Scalar>(
    theta: &ParamSet<T>,
    request: &EditRequest,
    m: f64,
    norm: Norm,
    cfg: &FinetuneConfig,
    mut observe: impl FnMut(usize, &ParamSet<T>),
) -> Result<(ParamSet<T>, usize)> {
    if m.is_nan() || m <= 0.0 {
        return Err(Error::invalid("projection radius must be positive"));
    }
    let names = cfg.targets(theta)?;
    run(theta, request, cfg, |step, current| {
        project(theta, current, &names, m, norm)?;
        observe(step, current);
        Ok(())
    })
}

/// Scores every radius and returns the best one (earliest on ties) with all scores.
pub fn grid_search(grid: &[f64], mut score: impl FnMut(f64) -> Result<f64>) -> Result<(f64, Vec<(f64, f64)>)> {
    if grid.is_empty() {
        return Err(Error::Empty("grid"));
    }
    let mut scores = Vec::with_capacity(grid.len());
    let mut best = (grid[0], f64::NEG_INFINITY);
    for &m in grid {
        let s = score(m)?;
        if s > best.1 {
            best = (m, s);
        }
        scores.push((m, s));
    }
    Ok((best.0, scores))
}
