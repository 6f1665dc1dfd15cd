//! Training objectives: batch similarity, symmetric InfoNCE, dual-CLIP,
//! cross-view consistency, binary cross-entropy and their weighted total.
//!
//! Each loss has a tape form (used by the trainer so one backward pass covers
//! the whole objective) and a plain tensor form.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::diff::{NodeId, Tape, Tensor};
use crate::error::{Error, Result};
use crate::model::{View, LOGIT_SCALE_MAX, LOGIT_SCALE_MIN};

pub const PROB_EPS: f64 = 1e-7;
const UNIT_NORM_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub entries: Tensor,
    pub view: View,
    pub gamma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub clip_orig: f64,
    pub clip_aug: f64,
    pub consistency: f64,
    pub classification: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            clip_orig: 0.5,
            clip_aug: 0.5,
            consistency: 0.1,
            classification: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.clip_orig,
            self.clip_aug,
            self.consistency,
            self.classification,
        ];
        if all.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::config(format!(
                "loss weights must be non-negative: {self:?}"
            )));
        }
        Ok(())
    }

    /// Whether the text encoder is needed at all.
    pub fn uses_text(&self) -> bool {
        self.clip_orig > 0.0 || self.clip_aug > 0.0 || self.consistency > 0.0
    }

    /// Whether augmented views are needed.
    pub fn uses_augmented(&self) -> bool {
        self.clip_aug > 0.0 || self.consistency > 0.0
    }
}

/// The four loss terms of one mini-batch and their weighted total. Terms
/// whose weight is zero are not evaluated and report 0.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub clip_orig: f64,
    pub clip_aug: f64,
    pub consistency: f64,
    pub classification: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// `((w_o * clip_orig + w_a * clip_aug) + w_c * consistency) + w_cls * classification`,
    /// the same association the tape uses.
    pub fn weighted_sum(&self, w: &LossWeights) -> f64 {
        w.clip_orig * self.clip_orig
            + w.clip_aug * self.clip_aug
            + w.consistency * self.consistency
            + w.classification * self.classification
    }
}

fn check_unit_rows(name: &str, t: &Tensor) -> Result<()> {
    for i in 0..t.rows() {
        let n = libm::sqrt(t.row(i).iter().map(|v| v * v).sum::<f64>());
        if (n - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::invalid(format!(
                "{name} row {i} has norm {n}, expected 1"
            )));
        }
    }
    Ok(())
}

// --- tape forms -----------------------------------------------------------

/// `S = gamma * code * text^T`, with `gamma` a scalar node.
pub fn similarity_on_tape(
    tape: &mut Tape,
    code: NodeId,
    text: NodeId,
    gamma: NodeId,
) -> Result<NodeId> {
    let (c, t) = (tape.value(code), tape.value(text));
    if c.rows() != t.rows() || c.cols() != t.cols() {
        return Err(Error::ShapeMismatch {
            primitive: "similarity-matrix",
            lhs: c.shape().to_vec(),
            rhs: t.shape().to_vec(),
        });
    }
    let tt = tape.transpose(text)?;
    let dots = tape.matmul(code, tt)?;
    tape.mul_scalar(dots, gamma)
}

/// Symmetric InfoNCE over a square similarity node.
pub fn clip_loss_on_tape(tape: &mut Tape, s: NodeId) -> Result<NodeId> {
    let v = tape.value(s);
    let b = v.rows();
    if v.cols() != b || v.shape().len() != 2 {
        return Err(Error::ShapeMismatch {
            primitive: "clip-loss",
            lhs: v.shape().to_vec(),
            rhs: alloc::vec![b, b],
        });
    }
    let eye = tape.constant(Tensor::identity(b))?;
    let diag = tape.mul(s, eye)?;
    let diag = tape.sum_all(diag)?;
    let rows = tape.row_log_sum_exp(s)?;
    let rows = tape.sum_all(rows)?;
    let st = tape.transpose(s)?;
    let cols = tape.row_log_sum_exp(st)?;
    let cols = tape.sum_all(cols)?;
    let lse = tape.add(rows, cols)?;
    let diag2 = tape.scale(diag, 2.0)?;
    let diff = tape.sub(lse, diag2)?;
    tape.scale(diff, 1.0 / (2.0 * b as f64))
}

pub fn dual_clip_on_tape(
    tape: &mut Tape,
    s_orig: NodeId,
    s_aug: NodeId,
    w: &LossWeights,
) -> Result<NodeId> {
    if tape.value(s_orig).shape() != tape.value(s_aug).shape() {
        return Err(Error::ShapeMismatch {
            primitive: "dual-clip-loss",
            lhs: tape.value(s_orig).shape().to_vec(),
            rhs: tape.value(s_aug).shape().to_vec(),
        });
    }
    let a = clip_loss_on_tape(tape, s_orig)?;
    let b = clip_loss_on_tape(tape, s_aug)?;
    let a = tape.scale(a, w.clip_orig)?;
    let b = tape.scale(b, w.clip_aug)?;
    tape.add(a, b)
}

pub fn consistency_on_tape(
    tape: &mut Tape,
    code: NodeId,
    code_aug: NodeId,
    text: NodeId,
    text_aug: NodeId,
) -> Result<NodeId> {
    let dc = tape.sq_dist_rows(code, code_aug)?;
    let dt = tape.sq_dist_rows(text, text_aug)?;
    let mc = tape.mean_all(dc)?;
    let mt = tape.mean_all(dt)?;
    let sum = tape.add(mc, mt)?;
    tape.scale(sum, 0.5)
}

/// Mean binary cross-entropy of probability node `probs` (`B x 1` or `B`).
pub fn bce_on_tape(tape: &mut Tape, probs: NodeId, labels: &[u8]) -> Result<NodeId> {
    let p = tape.value(probs);
    if p.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            primitive: "bce-loss",
            lhs: p.shape().to_vec(),
            rhs: alloc::vec![labels.len()],
        });
    }
    if let Some(l) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::invalid(format!("label {l} is not 0 or 1")));
    }
    let shape = p.shape().to_vec();
    let y: Vec<f64> = labels.iter().map(|&l| f64::from(l)).collect();
    let not_y: Vec<f64> = y.iter().map(|v| 1.0 - v).collect();
    let y = tape.constant(Tensor::new(shape.clone(), y)?)?;
    let not_y = tape.constant(Tensor::new(shape.clone(), not_y)?)?;
    let ones = tape.constant(Tensor::filled(&shape, 1.0))?;
    let pc = tape.clamp(probs, PROB_EPS, 1.0 - PROB_EPS)?;
    let log_p = tape.log(pc)?;
    let q = tape.sub(ones, pc)?;
    let log_q = tape.log(q)?;
    let a = tape.mul(y, log_p)?;
    let b = tape.mul(not_y, log_q)?;
    let ll = tape.add(a, b)?;
    let mean = tape.mean_all(ll)?;
    tape.scale(mean, -1.0)
}

/// Projected embeddings of one batch as tape nodes. Streams a configuration
/// does not need may be absent.
#[derive(Debug, Clone, Copy)]
pub struct EmbeddingNodes {
    pub code: NodeId,
    pub text: Option<NodeId>,
    pub code_aug: Option<NodeId>,
    pub text_aug: Option<NodeId>,
}

fn need(node: Option<NodeId>, what: &str) -> Result<NodeId> {
    node.ok_or_else(|| Error::invalid(format!("{what} embeddings required by the loss weights")))
}

/// Records the weighted objective and returns its node with the breakdown.
pub fn total_on_tape(
    tape: &mut Tape,
    nodes: &EmbeddingNodes,
    gamma: NodeId,
    probs: NodeId,
    labels: &[u8],
    w: &LossWeights,
) -> Result<(NodeId, LossBreakdown)> {
    w.validate()?;
    let b = tape.value(nodes.code).rows();
    if tape.value(probs).len() != b || labels.len() != b {
        return Err(Error::invalid(format!(
            "batch sizes disagree: {b} embeddings, {} probabilities, {} labels",
            tape.value(probs).len(),
            labels.len()
        )));
    }
    let mut out = LossBreakdown::default();
    let mut terms: Vec<NodeId> = Vec::new();
    if w.clip_orig > 0.0 {
        let s = similarity_on_tape(tape, nodes.code, need(nodes.text, "text")?, gamma)?;
        let l = clip_loss_on_tape(tape, s)?;
        out.clip_orig = tape.value(l).item();
        terms.push(tape.scale(l, w.clip_orig)?);
    }
    if w.clip_aug > 0.0 {
        let s = similarity_on_tape(
            tape,
            need(nodes.code_aug, "augmented code")?,
            need(nodes.text_aug, "augmented text")?,
            gamma,
        )?;
        let l = clip_loss_on_tape(tape, s)?;
        out.clip_aug = tape.value(l).item();
        terms.push(tape.scale(l, w.clip_aug)?);
    }
    if w.consistency > 0.0 {
        let l = consistency_on_tape(
            tape,
            nodes.code,
            need(nodes.code_aug, "augmented code")?,
            need(nodes.text, "text")?,
            need(nodes.text_aug, "augmented text")?,
        )?;
        out.consistency = tape.value(l).item();
        terms.push(tape.scale(l, w.consistency)?);
    }
    if w.classification > 0.0 {
        let l = bce_on_tape(tape, probs, labels)?;
        out.classification = tape.value(l).item();
        terms.push(tape.scale(l, w.classification)?);
    }
    let total = match terms.split_first() {
        None => tape.constant(Tensor::scalar(0.0))?,
        Some((&first, rest)) => {
            let mut acc = first;
            for &t in rest {
                acc = tape.add(acc, t)?;
            }
            acc
        }
    };
    out.total = tape.value(total).item();
    Ok((total, out))
}

// --- tensor forms ---------------------------------------------------------

pub fn similarity_matrix(
    code: &Tensor,
    text: &Tensor,
    gamma: f64,
    view: View,
) -> Result<SimilarityMatrix> {
    if !(LOGIT_SCALE_MIN..=LOGIT_SCALE_MAX).contains(&gamma) {
        return Err(Error::invalid(format!("gamma {gamma} outside [1, 100]")));
    }
    check_unit_rows("code", code)?;
    check_unit_rows("text", text)?;
    let mut tape = Tape::new();
    let c = tape.constant(code.clone())?;
    let t = tape.constant(text.clone())?;
    let g = tape.constant(Tensor::scalar(gamma))?;
    let s = similarity_on_tape(&mut tape, c, t, g)?;
    Ok(SimilarityMatrix {
        entries: tape.value(s).clone(),
        view,
        gamma,
    })
}

pub fn clip_loss(s: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let n = tape.constant(s.clone())?;
    let l = clip_loss_on_tape(&mut tape, n)?;
    Ok(tape.value(l).item())
}

pub fn dual_clip_loss(s_orig: &Tensor, s_aug: &Tensor, w: &LossWeights) -> Result<f64> {
    let mut tape = Tape::new();
    let a = tape.constant(s_orig.clone())?;
    let b = tape.constant(s_aug.clone())?;
    let l = dual_clip_on_tape(&mut tape, a, b, w)?;
    Ok(tape.value(l).item())
}

pub fn consistency_loss(
    code: &Tensor,
    code_aug: &Tensor,
    text: &Tensor,
    text_aug: &Tensor,
) -> Result<f64> {
    if code.rows() != text.rows() {
        return Err(Error::ShapeMismatch {
            primitive: "consistency-loss",
            lhs: code.shape().to_vec(),
            rhs: text.shape().to_vec(),
        });
    }
    let mut tape = Tape::new();
    let ids = [code, code_aug, text, text_aug]
        .into_iter()
        .map(|t| tape.constant(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let l = consistency_on_tape(&mut tape, ids[0], ids[1], ids[2], ids[3])?;
    Ok(tape.value(l).item())
}

pub fn bce_loss(probs: &[f64], labels: &[u8]) -> Result<f64> {
    if probs.len() != labels.len() || probs.is_empty() {
        return Err(Error::ShapeMismatch {
            primitive: "bce-loss",
            lhs: alloc::vec![probs.len()],
            rhs: alloc::vec![labels.len()],
        });
    }
    let mut tape = Tape::new();
    let p = tape.constant(Tensor::vector(probs.to_vec())?)?;
    let l = bce_on_tape(&mut tape, p, labels)?;
    Ok(tape.value(l).item())
}

/// Projected embeddings of the four streams of one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchEmbeddings {
    pub code: Tensor,
    pub text: Tensor,
    pub code_aug: Tensor,
    pub text_aug: Tensor,
}

pub fn total_loss(
    batch: &BatchEmbeddings,
    gamma: f64,
    probs: &[f64],
    labels: &[u8],
    w: &LossWeights,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let nodes = EmbeddingNodes {
        code: tape.constant(batch.code.clone())?,
        text: Some(tape.constant(batch.text.clone())?),
        code_aug: Some(tape.constant(batch.code_aug.clone())?),
        text_aug: Some(tape.constant(batch.text_aug.clone())?),
    };
    let g = tape.constant(Tensor::scalar(gamma))?;
    let p = tape.constant(Tensor::matrix(probs.len().max(1), 1, probs.to_vec())?)?;
    let (_, breakdown) = total_on_tape(&mut tape, &nodes, g, p, labels, w)?;
    Ok(breakdown)
}
