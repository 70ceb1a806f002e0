//! Training objectives: next-token cross-entropy, the predictor-to-target
//! embedding alignment, and the next-latent auxiliary.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Bound, Model, TokenSequence};
use crate::tensor::{Graph, NodeId};

pub const DEFAULT_LAMBDA: f64 = 0.2;

/// One block of logits with its per-row targets and mask.
#[derive(Debug, Clone)]
pub struct TextTargets {
    pub logits: NodeId,
    pub targets: Vec<usize>,
    pub mask: Vec<u8>,
}

impl TextTargets {
    pub fn from_sequence(logits: NodeId, seq: &TokenSequence) -> Self {
        let (targets, mask) = seq.targets_and_mask();
        TextTargets { logits, targets, mask }
    }

    /// A single supervised row, such as the answer letter after the question.
    pub fn single(logits: NodeId, target: usize) -> Self {
        TextTargets { logits, targets: vec![target], mask: vec![1] }
    }
}

/// Cross-entropy averaged over every supervised row of every block.
pub fn loss_vlm(g: &mut Graph, blocks: &[TextTargets]) -> Result<NodeId> {
    match blocks {
        [] => Err(Error::EmptyLossSupport),
        [one] => g.cross_entropy(one.logits, &one.targets, &one.mask),
        _ => {
            let parts: Vec<NodeId> = blocks.iter().map(|b| b.logits).collect();
            let logits = g.concat_rows(&parts)?;
            let targets: Vec<usize> = blocks.iter().flat_map(|b| b.targets.iter().copied()).collect();
            let mask: Vec<u8> = blocks.iter().flat_map(|b| b.mask.iter().copied()).collect();
            g.cross_entropy(logits, &targets, &mask)
        }
    }
}

/// Smooth-L1 between predicted and target trajectory encodings, averaged over
/// rows (examples) and dimensions. The target is detached here as well, so
/// callers cannot leak gradient into the trajectory pass by accident.
pub fn loss_jepa(g: &mut Graph, h_hat_r: NodeId, h_r: NodeId) -> Result<NodeId> {
    let target = g.stop_gradient(h_r);
    g.smooth_l1(h_hat_r, target)
}

/// Next-latent loss with explicit inputs and targets.
///
/// Row `t` of `inputs` predicts rows `t+1..=t+d'` of `targets` with one head
/// per offset, `d' = min(horizon, T-1-t)`. Each position contributes the mean
/// over its `d'` offsets of the dimension-averaged smooth-L1, and positions
/// are averaged. Returns `None` when `T < 2` (nothing to predict).
pub fn nextlat_terms(
    g: &mut Graph,
    model: &Model,
    b: &Bound,
    inputs: NodeId,
    targets: NodeId,
) -> Result<Option<NodeId>> {
    let shape = g.shape(inputs).to_vec();
    if shape != g.shape(targets) {
        return Err(Error::Shape { op: "nextlat", left: shape, right: g.shape(targets).to_vec() });
    }
    let (t_len, d) = (shape[0], shape[1]);
    if t_len < 2 {
        return Ok(None);
    }
    let horizon = model.cfg.nextlat_horizon;
    let n_pos = (t_len - 1) as f64;
    let mut total: Option<NodeId> = None;
    for i in 0..horizon.min(t_len - 1) {
        let offset = i + 1;
        let rows = t_len - offset;
        let src = g.slice_rows(inputs, 0, rows)?;
        let pred = model.nextlat_head(g, b, i, src)?;
        let tgt = g.slice_rows(targets, offset, rows)?;
        let weights: Vec<f64> = (0..rows)
            .map(|t| {
                let dp = horizon.min(t_len - 1 - t) as f64;
                1.0 / (n_pos * dp * d as f64)
            })
            .collect();
        let term = g.smooth_l1_weighted(pred, tgt, &weights)?;
        total = Some(match total {
            None => term,
            Some(acc) => g.add(acc, term)?,
        });
    }
    Ok(total)
}

/// Next-latent loss over a trajectory's hidden states, with stop-gradient
/// targets.
pub fn loss_nextlat(g: &mut Graph, model: &Model, b: &Bound, traj_hiddens: NodeId) -> Result<Option<NodeId>> {
    let targets = g.stop_gradient(traj_hiddens);
    nextlat_terms(g, model, b, traj_hiddens, targets)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_vlm: f64,
    pub l_jepa: f64,
    pub l_nextlat: f64,
    pub l_pearl: f64,
}

/// Nodes of the combined objective.
#[derive(Debug, Clone, Copy)]
pub struct PearlLoss {
    pub total: NodeId,
    pub vlm: NodeId,
    pub jepa: NodeId,
    pub nextlat: Option<NodeId>,
}

impl PearlLoss {
    pub fn breakdown(&self, g: &Graph) -> LossBreakdown {
        LossBreakdown {
            l_vlm: g.scalar(self.vlm),
            l_jepa: g.scalar(self.jepa),
            l_nextlat: self.nextlat.map_or(0.0, |n| g.scalar(n)),
            l_pearl: g.scalar(self.total),
        }
    }
}

/// `vlm + lambda * (jepa + [enabled] * nextlat)`.
pub fn loss_pearl(
    g: &mut Graph,
    vlm: NodeId,
    jepa: NodeId,
    nextlat: Option<NodeId>,
    lambda: f64,
    nextlat_enabled: bool,
) -> Result<PearlLoss> {
    let aux = match nextlat {
        Some(n) if nextlat_enabled => g.add(jepa, n)?,
        _ => jepa,
    };
    let aux = g.scale(aux, lambda);
    let total = g.add(vlm, aux)?;
    Ok(PearlLoss { total, vlm, jepa, nextlat: if nextlat_enabled { nextlat } else { None } })
}
