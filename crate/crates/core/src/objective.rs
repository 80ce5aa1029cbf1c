//! Contrastive image-to-text losses and their weighted combination.

use serde::{Deserialize, Serialize};

use crate::error::{Result, TplError};
use crate::numerics::{Graph, NodeId};

pub const DEFAULT_TEMPERATURE: f64 = 0.07;

/// Inputs shared by both losses.
///
/// Samples are grouped into slots (one per source domain present). Each
/// slot has its own `[C, d_j]` text sets; slots may share a node.
#[derive(Clone, Debug)]
pub struct LossBatch {
    /// Fused, unit-norm image features `[B, d_j]`.
    pub image: NodeId,
    /// Zero-based class per sample.
    pub labels: Vec<usize>,
    /// Slot per sample.
    pub slots: Vec<usize>,
    /// Domain-agnostic text features per slot.
    pub agnostic: Vec<NodeId>,
    /// Domain-specific text features per slot.
    pub specific: Vec<NodeId>,
    pub temperature: f64,
}

/// `(w_V, w_S)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Weights {
    pub vision: f64,
    pub language: f64,
}

impl Weights {
    pub const VISION: Weights = Weights { vision: 1.0, language: 0.0 };
    pub const LANGUAGE: Weights = Weights { vision: 0.0, language: 1.0 };
    pub const EVEN: Weights = Weights { vision: 0.5, language: 0.5 };
}

impl LossBatch {
    fn validate(&self, g: &Graph) -> Result<()> {
        if self.temperature.is_nan() || self.temperature <= 0.0 {
            return Err(TplError::invalid(format!("temperature must be positive, got {}", self.temperature)));
        }
        let b = g.shape(self.image)[0];
        if self.labels.len() != b || self.slots.len() != b {
            return Err(TplError::ShapeMismatch {
                op: "loss",
                lhs: g.shape(self.image).to_vec(),
                rhs: vec![self.labels.len(), self.slots.len()],
            });
        }
        Ok(())
    }

    /// Sample indices per slot.
    pub fn slot_rows(&self) -> Vec<Vec<usize>> {
        let n = self.slots.iter().copied().max().map_or(0, |m| m + 1);
        let mut rows = vec![Vec::new(); n];
        for (i, &s) in self.slots.iter().enumerate() {
            rows[s].push(i);
        }
        rows
    }
}

/// `−Σ log softmax_j(sim(I_i, T_j)/τ)[y_i]` over `rows`, scored against `text`.
fn contrastive(g: &mut Graph, batch: &LossBatch, rows: &[usize], text: NodeId) -> Result<NodeId> {
    let c = g.shape(text)[0];
    if batch.labels.iter().any(|&y| y >= c) {
        return Err(TplError::invalid(format!("label out of range for {c} classes")));
    }
    let all = rows.len() == batch.labels.len() && rows.iter().enumerate().all(|(i, &r)| i == r);
    let feats = if all { batch.image } else { g.select_rows(batch.image, rows)? };
    let sims = g.matmul_ex(feats, text, false, true)?;
    let logits = g.scale(sims, 1.0 / batch.temperature)?;
    let logp = g.log_softmax(logits)?;
    let labels: Vec<usize> = rows.iter().map(|&r| batch.labels[r]).collect();
    let picked = g.pick(logp, &labels)?;
    let s = g.sum_all(picked)?;
    g.scale(s, -1.0)
}

fn per_slot(
    g: &mut Graph,
    batch: &LossBatch,
    texts: &[NodeId],
    what: &str,
    merge: bool,
) -> Result<Vec<Option<NodeId>>> {
    batch.validate(g)?;
    let rows = batch.slot_rows();
    if rows.is_empty() {
        return Err(TplError::invalid(format!("{what}: empty batch")));
    }
    if rows.len() > texts.len() {
        return Err(TplError::invalid(format!(
            "{what}: slot {} has no text feature set",
            texts.len()
        )));
    }
    if merge && texts[..rows.len()].iter().all(|&t| t == texts[0]) {
        // One shared text set: a single product over the whole batch.
        let all: Vec<usize> = (0..batch.labels.len()).collect();
        return contrastive(g, batch, &all, texts[0]).map(|n| vec![Some(n)]);
    }
    rows.iter()
        .enumerate()
        .map(|(slot, r)| {
            if r.is_empty() {
                Ok(None)
            } else {
                contrastive(g, batch, r, texts[slot]).map(Some)
            }
        })
        .collect()
}

fn sum_nodes(g: &mut Graph, nodes: Vec<Option<NodeId>>) -> Result<NodeId> {
    let mut it = nodes.into_iter().flatten();
    let first = it.next().ok_or_else(|| TplError::invalid("loss over an empty batch"))?;
    it.try_fold(first, |acc, n| g.add(acc, n))
}

/// Vision-invariance loss: each sample against the domain-agnostic texts of its slot.
pub fn loss_lv(g: &mut Graph, batch: &LossBatch) -> Result<NodeId> {
    let parts = per_slot(g, batch, &batch.agnostic, "loss_LV", true)?;
    sum_nodes(g, parts)
}

/// Class-separability loss: each sample against the domain-specific texts of its slot.
pub fn loss_ls(g: &mut Graph, batch: &LossBatch) -> Result<NodeId> {
    let parts = per_slot(g, batch, &batch.specific, "loss_LS", true)?;
    sum_nodes(g, parts)
}

/// [`loss_lv`] split by slot (`None` for empty slots).
pub fn loss_lv_slots(g: &mut Graph, batch: &LossBatch) -> Result<Vec<Option<NodeId>>> {
    per_slot(g, batch, &batch.agnostic, "loss_LV", false)
}

/// [`loss_ls`] split by slot (`None` for empty slots).
pub fn loss_ls_slots(g: &mut Graph, batch: &LossBatch) -> Result<Vec<Option<NodeId>>> {
    per_slot(g, batch, &batch.specific, "loss_LS", false)
}

/// `w_V · lv + w_S · ls`.
pub fn total_loss(g: &mut Graph, lv: NodeId, ls: NodeId, w: Weights) -> Result<NodeId> {
    check_weights(w)?;
    let a = g.scale(lv, w.vision)?;
    let b = g.scale(ls, w.language)?;
    g.add(a, b)
}

pub fn check_weights(w: Weights) -> Result<()> {
    if !(w.vision >= 0.0 && w.language >= 0.0) {
        return Err(TplError::invalid(format!("loss weights must be non-negative, got {w:?}")));
    }
    if (w.vision + w.language - 1.0).abs() > 1e-12 {
        return Err(TplError::invalid(format!("loss weights must sum to 1, got {w:?}")));
    }
    Ok(())
}
