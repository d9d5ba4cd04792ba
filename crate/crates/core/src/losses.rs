//! Cross-entropy, the two same-instance contrastive terms and their weighted sum.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::graph::{Graph, NodeId, ParamNodes};
use crate::model::{Batch, ForwardOutput, Model, RowMeta};
use crate::tensor::{Tensor, TensorError};

/// How contrastive pair terms are reduced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairReduction {
    /// Mean over (anchor, positive) pairs.
    #[default]
    Mean,
    /// Plain double sum.
    Sum,
}

/// Anchor rows and their positives in a similarity space.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PositiveSets {
    pub rows: usize,
    pub anchors: Vec<bool>,
    pub positives: Vec<Vec<usize>>,
}

impl PositiveSets {
    /// Anchors are real-instance rows; positives are the other anchors of the
    /// same instance. Embedding pseudo-rows never take part except as
    /// negatives, and imputed slots only when `include_imputed` is set.
    pub fn same_instance(meta: &[RowMeta], include_imputed: bool) -> Self {
        let eligible: Vec<bool> = meta
            .iter()
            .map(|r| r.instance.is_some() && (r.extracted || include_imputed))
            .collect();
        let positives = meta
            .iter()
            .enumerate()
            .map(|(a, ra)| {
                if !eligible[a] {
                    return Vec::new();
                }
                meta.iter()
                    .enumerate()
                    .filter(|&(p, rp)| p != a && eligible[p] && rp.instance == ra.instance)
                    .map(|(p, _)| p)
                    .collect()
            })
            .collect();
        Self {
            rows: meta.len(),
            anchors: eligible,
            positives,
        }
    }

    pub fn num_pairs(&self) -> usize {
        self.positives.iter().map(Vec::len).sum()
    }

    /// Anchors without any positive; they contribute nothing.
    pub fn skipped_anchors(&self) -> usize {
        self.anchors
            .iter()
            .zip(&self.positives)
            .filter(|(&a, p)| a && p.is_empty())
            .count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ContrastiveTerm {
    pub loss: NodeId,
    pub pairs: usize,
    pub skipped_anchors: usize,
}

/// `-sum_a sum_{p in P(a)} log softmax_{u != a}(cos(r_a, r_u) / tau)[p]`,
/// reduced per `reduction`. Zero when there are no pairs.
pub fn contrastive(
    g: &mut Graph,
    rows: NodeId,
    positives: &PositiveSets,
    tau: f64,
    reduction: PairReduction,
) -> Result<ContrastiveTerm, TensorError> {
    let n = g.value(rows).shape()[0];
    if positives.rows != n {
        return Err(TensorError::Contract(format!(
            "contrastive: positive sets cover {} rows, features have {n}",
            positives.rows
        )));
    }
    let pairs = positives.num_pairs();
    let skipped_anchors = positives.skipped_anchors();
    if pairs == 0 {
        return Ok(ContrastiveTerm {
            loss: g.constant(Tensor::scalar(0.0)),
            pairs,
            skipped_anchors,
        });
    }
    let s = g.cosine_similarity(rows)?;
    let log_p = g.row_log_softmax(s, tau, true)?;
    let mut mask = vec![0.0; n * n];
    for (a, ps) in positives.positives.iter().enumerate() {
        for &p in ps {
            mask[a * n + p] = 1.0;
        }
    }
    let mask = g.constant(Tensor::new([n, n], mask)?);
    let picked = g.mul(log_p, mask)?;
    let total = g.sum(picked)?;
    let scale = match reduction {
        PairReduction::Mean => -1.0 / pairs as f64,
        PairReduction::Sum => -1.0,
    };
    Ok(ContrastiveTerm {
        loss: g.scale(total, scale)?,
        pairs,
        skipped_anchors,
    })
}

/// Contrastive term in the shared space `H`.
pub fn contrastive_shared(
    g: &mut Graph,
    h_rows: NodeId,
    positives: &PositiveSets,
    tau: f64,
    reduction: PairReduction,
) -> Result<ContrastiveTerm, TensorError> {
    contrastive(g, h_rows, positives, tau, reduction)
}

/// Contrastive term in the modality-wise space `Z`.
pub fn contrastive_sim(
    g: &mut Graph,
    z_rows: NodeId,
    positives: &PositiveSets,
    tau: f64,
    reduction: PairReduction,
) -> Result<ContrastiveTerm, TensorError> {
    contrastive(g, z_rows, positives, tau, reduction)
}

/// Mean cross-entropy of `[B, C]` logits.
pub fn task_loss(g: &mut Graph, logits: NodeId, labels: &[usize]) -> Result<NodeId, TensorError> {
    g.cross_entropy(logits, labels.to_vec())
}

/// Regularisation weight from the missing degree `p_m * p_s`.
pub fn default_lambda(p_m: f64, p_s: f64) -> f64 {
    if p_m * p_s <= 0.5 {
        0.1
    } else {
        0.2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub task: f64,
    pub shared: f64,
    pub sim: f64,
    pub total: f64,
    pub lambda: f64,
    pub tau: f64,
}

pub fn combine(task: f64, shared: f64, sim: f64, lambda: f64, tau: f64) -> LossBreakdown {
    LossBreakdown {
        task,
        shared,
        sim,
        total: task + lambda * (shared + sim),
        lambda,
        tau,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub lambda: f64,
    pub tau: f64,
    pub reduction: PairReduction,
    pub contrast_imputed: bool,
}

impl LossConfig {
    pub fn new(lambda: f64, tau: f64) -> Self {
        Self {
            lambda,
            tau,
            reduction: PairReduction::Mean,
            contrast_imputed: false,
        }
    }
}

/// Graph nodes of one objective evaluation.
#[derive(Debug, Clone)]
pub struct Objective {
    pub total: NodeId,
    pub task: NodeId,
    pub shared: Option<ContrastiveTerm>,
    pub sim: Option<ContrastiveTerm>,
    pub forward: ForwardOutput,
}

impl Objective {
    pub fn breakdown(&self, g: &Graph, cfg: &LossConfig) -> LossBreakdown {
        let val = |t: Option<ContrastiveTerm>| t.map_or(0.0, |t| g.value(t.loss).item());
        LossBreakdown {
            total: g.value(self.total).item(),
            ..combine(g.value(self.task).item(), val(self.shared), val(self.sim), cfg.lambda, cfg.tau)
        }
    }
}

/// `L_task + lambda * (L_shared + L_sim)`. Architectures without embeddings
/// have no contrastive terms; with `lambda == 0` the terms are evaluated for
/// reporting but left out of the objective.
pub fn objective(
    model: &Model,
    g: &mut Graph,
    p: &ParamNodes,
    batch: &Batch,
    cfg: &LossConfig,
) -> Result<Objective, TensorError> {
    if !(cfg.lambda >= 0.0) || !cfg.lambda.is_finite() {
        return Err(TensorError::Contract(format!("objective: lambda must be >= 0, got {}", cfg.lambda)));
    }
    let forward = model.forward(g, p, batch, cfg.tau)?;
    let task = task_loss(g, forward.logits, &batch.labels)?;
    let (mut shared, mut sim) = (None, None);
    if let Some(reps) = &forward.reps {
        let pos = PositiveSets::same_instance(&reps.row_index, cfg.contrast_imputed);
        shared = Some(contrastive_shared(g, forward.shared.rows, &pos, cfg.tau, cfg.reduction)?);
        sim = Some(contrastive_sim(g, reps.z, &pos, cfg.tau, cfg.reduction)?);
    }
    let total = match (shared, sim) {
        (Some(a), Some(b)) if cfg.lambda > 0.0 => {
            let reg = g.add(a.loss, b.loss)?;
            let reg = g.scale(reg, cfg.lambda)?;
            g.add(task, reg)?
        }
        _ => task,
    };
    Ok(Objective {
        total,
        task,
        shared,
        sim,
        forward,
    })
}
