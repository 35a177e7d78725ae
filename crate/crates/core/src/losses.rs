//! Training objectives: soft Dice, directed InfoNCE, the multi-view
//! contrastive sum, and the blended total loss.
//!
//! The contrastive objective treats the axial view as the anchor hub:
//! it sums four directed terms (axial→sagittal, axial→coronal,
//! sagittal→axial, coronal→axial) and deliberately has no
//! sagittal↔coronal terms. Each directed term is an InfoNCE loss over
//! the batch: row i of the anchor view must identify row i of the
//! candidate view among all N candidates by cosine similarity at
//! temperature tau.

use crate::error::{Error, Result};
use crate::tensor::graph::{Graph, Var};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Weights shared by the loss terms.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ContrastiveConfig {
    /// InfoNCE temperature; must be > 0.
    pub tau: f32,
    /// Blend weight: total = alpha * dice + (1 - alpha) * contrastive.
    pub alpha: f32,
    /// Dice smoothing constant; must be > 0.
    pub dice_eps: f32,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self { tau: 0.07, alpha: 0.25, dice_eps: 1e-6 }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be finite and > 0, got {}", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha must be in [0, 1], got {}", self.alpha)));
        }
        if !(self.dice_eps > 0.0) {
            return Err(Error::Config(format!("dice_eps must be > 0, got {}", self.dice_eps)));
        }
        Ok(())
    }
}

/// One embedding batch per view, rows aligned by patient. `axial` is
/// always present; the other views may be absent in reduced-view
/// training variants.
#[derive(Debug, Clone, Copy)]
pub struct EmbeddingBatch {
    pub axial: Var,
    pub sagittal: Option<Var>,
    pub coronal: Option<Var>,
}

/// Soft Dice loss of a probability map against a binary target,
/// pooled over the whole batch.
pub fn dice_loss(graph: &mut Graph, pred: Var, target: &Tensor, eps: f32) -> Result<Var> {
    graph.dice_loss(pred, target, eps)
}

/// One directed InfoNCE term anchored on `anchors`.
pub fn info_nce(graph: &mut Graph, anchors: Var, candidates: Var, tau: f32) -> Result<Var> {
    graph.info_nce(anchors, candidates, tau)
}

/// Four-term contrastive loss. Requires all three views; reduced-view
/// training should call [`contrastive_loss_partial`] instead.
pub fn contrastive_loss(graph: &mut Graph, batch: &EmbeddingBatch, tau: f32) -> Result<Var> {
    if batch.sagittal.is_none() || batch.coronal.is_none() {
        return Err(Error::Contract(
            "contrastive_loss: all three views are required (use contrastive_loss_partial \
             for reduced-view variants)"
                .into(),
        ));
    }
    let (term, count) = contrastive_loss_partial(graph, batch, tau)?;
    debug_assert_eq!(count, 4);
    Ok(term)
}

/// Contrastive loss over whichever views are present: two directed
/// terms (to and from axial) per non-axial view. Returns the summed
/// loss and the number of directed terms it contains (0, 2 or 4); with
/// zero terms the loss is the constant 0.
pub fn contrastive_loss_partial(
    graph: &mut Graph,
    batch: &EmbeddingBatch,
    tau: f32,
) -> Result<(Var, usize)> {
    let mut terms = Vec::with_capacity(4);
    for other in [batch.sagittal, batch.coronal].into_iter().flatten() {
        terms.push(graph.info_nce(batch.axial, other, tau)?);
        terms.push(graph.info_nce(other, batch.axial, tau)?);
    }
    let count = terms.len();
    let total = match terms.split_first() {
        None => graph.leaf(Tensor::scalar(0.0))?,
        Some((first, rest)) => {
            let mut acc = *first;
            for t in rest {
                acc = graph.add(acc, *t)?;
            }
            acc
        }
    };
    Ok((total, count))
}

/// Blended objective: alpha * dice + (1 - alpha) * contrastive. The
/// endpoints short-circuit so the switched-off term contributes nothing
/// at all — at alpha = 1 the result IS the dice node and the
/// contrastive branch receives no gradient.
pub fn total_loss(graph: &mut Graph, dice: Var, contrastive: Var, alpha: f32) -> Result<Var> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("total_loss: alpha must be in [0, 1], got {alpha}")));
    }
    if alpha == 1.0 {
        return Ok(dice);
    }
    if alpha == 0.0 {
        return Ok(contrastive);
    }
    let d = graph.scale(dice, alpha)?;
    let c = graph.scale(contrastive, 1.0 - alpha)?;
    graph.add(d, c)
}
