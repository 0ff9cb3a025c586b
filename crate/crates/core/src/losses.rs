//! Training objective: classification, auxiliary classification, subgraph
//! orthogonality and hierarchical consistency, plus the sigmoid β schedule.
//!
//! `total = cls + aux + alpha * oc + beta(t) * hc`

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Matrix, Var};
use crate::error::{Error, Result};
use crate::model::{ForwardOutput, ForwardVars};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta_max: f64,
    /// Schedule midpoint as a fraction of total optimizer steps.
    pub beta_center_fraction: f64,
    pub beta_slope: f64,
    /// Distillation temperature.
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.3,
            beta_max: 0.2,
            beta_center_fraction: 0.25,
            beta_slope: 0.001,
            tau: 2.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| {
            Err(Error::InvalidValue {
                key: format!("loss.{key}"),
                msg: msg.into(),
            })
        };
        if !(self.alpha >= 0.0) {
            return bad("alpha", "must be non-negative");
        }
        if !(self.beta_max >= 0.0) {
            return bad("beta_max", "must be non-negative");
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad("tau", "must be positive");
        }
        if !self.beta_slope.is_finite() || !self.beta_center_fraction.is_finite() {
            return bad("beta_slope", "schedule parameters must be finite");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cls: f64,
    pub aux: f64,
    pub oc: f64,
    pub hc: f64,
    pub beta_t: f64,
    pub total: f64,
}

/// Hard class index or soft (e.g. Mixup) label distribution.
#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    Class(usize),
    Soft(Vec<f64>),
}

impl Target {
    pub fn distribution(&self, classes: usize) -> Result<Vec<f64>> {
        match self {
            Target::Class(c) if *c < classes => {
                let mut v = vec![0.0; classes];
                v[*c] = 1.0;
                Ok(v)
            }
            Target::Class(c) => Err(Error::InvalidTarget(format!(
                "class {c} out of range for {classes} classes"
            ))),
            Target::Soft(v) => {
                if v.len() != classes {
                    return Err(Error::InvalidTarget(format!(
                        "soft label has {} entries, expected {classes}",
                        v.len()
                    )));
                }
                if v.iter().any(|p| !(*p >= 0.0)) || (v.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                    return Err(Error::InvalidTarget(
                        "soft label must be a probability vector".into(),
                    ));
                }
                Ok(v.clone())
            }
        }
    }
}

fn row(v: &[f64]) -> Matrix {
    Array2::from_shape_vec((1, v.len()), v.to_vec()).expect("row shape")
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `beta_max * sigmoid(slope * (step - center_fraction * total_steps))`.
pub fn beta_schedule(step: usize, total_steps: usize, w: &LossWeights) -> f64 {
    let center = w.beta_center_fraction * total_steps as f64;
    w.beta_max * sigmoid(w.beta_slope * (step as f64 - center))
}

/// Cross-entropy of `logits` (1 × C) against `target` on the tape.
pub fn classification_loss_graph(g: &mut Graph, logits: Var, target: &Target) -> Result<Var> {
    let classes = g.shape(logits).1;
    let dist = target.distribution(classes)?;
    g.soft_cross_entropy(logits, row(&dist))
}

/// Cross-entropy over the cosine-similarity matrix of the subgraph tokens,
/// with the diagonal as the target class of each row.
pub fn orthogonality_loss_graph(g: &mut Graph, tokens: Var) -> Result<Var> {
    let k = g.shape(tokens).0;
    if k < 2 {
        return Err(Error::ShapeMismatch(format!(
            "orthogonality loss needs at least 2 tokens, got {k}"
        )));
    }
    let unit = g.row_normalize(tokens)?;
    let sim = g.matmul_bt(unit, unit);
    g.soft_cross_entropy(sim, Array2::eye(k))
}

/// `tau^2 * KL(softmax(z_n / tau) || softmax(z_g / tau))` with the teacher
/// `z_g` detached.
pub fn hierarchical_consistency_graph(
    g: &mut Graph,
    z_n: Var,
    z_g: Var,
    tau: f64,
) -> Result<Var> {
    if g.shape(z_n) != g.shape(z_g) {
        return Err(Error::ShapeMismatch(format!(
            "student logits {:?} vs teacher logits {:?}",
            g.shape(z_n),
            g.shape(z_g)
        )));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidValue {
            key: "loss.tau".into(),
            msg: "must be positive".into(),
        });
    }
    let teacher = g.detach(z_g);
    g.kl_div(z_n, teacher, tau)
}

/// Full objective on the tape.
///
/// `frozen_teacher` replaces the live graph-head logits in the consistency
/// term with constants; gradient checks use it so that perturbing parameters
/// does not move the (detached) teacher.
pub fn total_loss_graph(
    g: &mut Graph,
    out: &ForwardVars,
    target: &Target,
    beta_t: f64,
    w: &LossWeights,
    frozen_teacher: Option<&[f64]>,
) -> Result<(Var, LossBreakdown)> {
    let cls = classification_loss_graph(g, out.z_g, target)?;
    let aux = classification_loss_graph(g, out.z_n, target)?;
    let oc = orthogonality_loss_graph(g, out.subgraph_tokens)?;
    let teacher = match frozen_teacher {
        Some(values) => g.leaf(row(values)),
        None => out.z_g,
    };
    let hc = hierarchical_consistency_graph(g, out.z_n, teacher, w.tau)?;
    let total = g.weighted_sum(&[(cls, 1.0), (aux, 1.0), (oc, w.alpha), (hc, beta_t)]);
    let scalar = |v: Var| g.value(v)[[0, 0]];
    let breakdown = LossBreakdown {
        cls: scalar(cls),
        aux: scalar(aux),
        oc: scalar(oc),
        hc: scalar(hc),
        beta_t,
        total: scalar(total),
    };
    Ok((total, breakdown))
}

pub fn classification_loss(logits: &[f64], target: &Target) -> Result<f64> {
    let mut g = Graph::new();
    let x = g.leaf(row(logits));
    let l = classification_loss_graph(&mut g, x, target)?;
    Ok(g.value(l)[[0, 0]])
}

pub fn orthogonality_loss(tokens: &Matrix) -> Result<f64> {
    let mut g = Graph::new();
    let x = g.leaf(tokens.clone());
    let l = orthogonality_loss_graph(&mut g, x)?;
    Ok(g.value(l)[[0, 0]])
}

pub fn hierarchical_consistency_loss(z_n: &[f64], z_g: &[f64], tau: f64) -> Result<f64> {
    let mut g = Graph::new();
    let s = g.leaf(row(z_n));
    let t = g.leaf(row(z_g));
    let l = hierarchical_consistency_graph(&mut g, s, t, tau)?;
    Ok(g.value(l)[[0, 0]])
}

/// Loss breakdown for an already computed forward pass.
pub fn total_loss(
    out: &ForwardOutput,
    target: &Target,
    step: usize,
    total_steps: usize,
    w: &LossWeights,
) -> Result<LossBreakdown> {
    let cls = classification_loss(&out.z_g, target)?;
    let aux = classification_loss(&out.z_n, target)?;
    let oc = orthogonality_loss(&out.subgraph_tokens)?;
    let hc = hierarchical_consistency_loss(&out.z_n, &out.z_g, w.tau)?;
    let beta_t = beta_schedule(step, total_steps, w);
    Ok(LossBreakdown {
        cls,
        aux,
        oc,
        hc,
        beta_t,
        total: cls + aux + w.alpha * oc + beta_t * hc,
    })
}
