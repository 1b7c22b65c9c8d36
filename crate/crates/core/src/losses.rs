//! Training losses: cosine alignment to the teacher, in-batch InfoNCE, and
//! a rank-distillation KL over candidate documents.
//!
//! Every loss takes embeddings that already live on a graph (one node per
//! trace, each a unit-norm `[1, d]` row) plus teacher-side data as plain
//! constants, and returns a scalar node with batch-mean reduction.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Graph, TensorError, TensorId};

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("{what}: expected {expected} entries, got {got}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),
    #[error("candidate set for trace {trace} is empty")]
    NoCandidates { trace: usize },
    #[error("rank weight is positive but no candidate sets were supplied")]
    CandidatesRequired,
    #[error("all loss weights are zero")]
    AllWeightsZero,
    #[error("loss weight {name} must be non-negative, got {value}")]
    NegativeWeight { name: &'static str, value: f64 },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Mixing weights and temperatures for the combined objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Weight of the cosine alignment term.
    pub alignment: f64,
    /// Weight of the in-batch InfoNCE term.
    pub contrastive: f64,
    /// Weight of the rank-distillation KL term.
    pub rank: f64,
    /// InfoNCE temperature.
    pub tau: f64,
    /// Rank-distillation temperature.
    pub tau_r: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alignment: 0.5,
            contrastive: 0.5,
            rank: 0.5,
            tau: 0.05,
            tau_r: 0.05,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        for (name, value) in [
            ("alignment", self.alignment),
            ("contrastive", self.contrastive),
            ("rank", self.rank),
        ] {
            if value < 0.0 {
                return Err(LossError::NegativeWeight { name, value });
            }
        }
        if self.alignment == 0.0 && self.contrastive == 0.0 && self.rank == 0.0 {
            return Err(LossError::AllWeightsZero);
        }
        if self.tau <= 0.0 {
            return Err(LossError::NonPositiveTemperature(self.tau));
        }
        if self.tau_r <= 0.0 {
            return Err(LossError::NonPositiveTemperature(self.tau_r));
        }
        Ok(())
    }
}

/// Candidate documents for one trace's rank-distillation term: `k`
/// embeddings of width `d`, row-major, with the teacher's cosine score for
/// each.
#[derive(Debug, Clone)]
pub struct RankCandidates {
    pub embeddings: Vec<f64>,
    pub teacher_scores: Vec<f64>,
    pub d: usize,
}

impl RankCandidates {
    pub fn k(&self) -> usize {
        self.teacher_scores.len()
    }
}

fn check_batch(preds: &[TensorId], teachers: &[Vec<f64>]) -> Result<(), LossError> {
    if preds.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    if teachers.len() != preds.len() {
        return Err(LossError::LengthMismatch {
            what: "teacher embeddings",
            expected: preds.len(),
            got: teachers.len(),
        });
    }
    Ok(())
}

fn batch_mean(g: &mut Graph, per_trace: Vec<TensorId>) -> Result<TensorId, LossError> {
    let n = per_trace.len();
    let total = g.sum_scalars(&per_trace)?;
    Ok(g.scale(total, 1.0 / n as f64))
}

/// `1 - mean_j cos(pred_j, teacher_j)`. Both sides are unit vectors, so the
/// cosine is a plain dot product.
pub fn alignment_loss(
    g: &mut Graph,
    preds: &[TensorId],
    teachers: &[Vec<f64>],
) -> Result<TensorId, LossError> {
    check_batch(preds, teachers)?;
    let dots = preds
        .iter()
        .zip(teachers)
        .map(|(&p, t)| g.dot_const(p, t))
        .collect::<Result<Vec<_>, _>>()?;
    let mean = batch_mean(g, dots)?;
    Ok(g.affine(mean, -1.0, 1.0))
}

/// In-batch InfoNCE with the other traces' teacher embeddings as negatives:
/// `mean_j [ logsumexp_k(z_jk) - z_jj ]` with `z_jk = cos(pred_j, teacher_k) / tau`.
pub fn contrastive_loss(
    g: &mut Graph,
    preds: &[TensorId],
    teachers: &[Vec<f64>],
    tau: f64,
) -> Result<TensorId, LossError> {
    check_batch(preds, teachers)?;
    if tau <= 0.0 {
        return Err(LossError::NonPositiveTemperature(tau));
    }
    let b = preds.len();
    let d = teachers[0].len();
    // Teacher matrix transposed to [d, b], shared by every trace's logits.
    let mut t_data = vec![0.0; d * b];
    for (k, t) in teachers.iter().enumerate() {
        if t.len() != d {
            return Err(LossError::LengthMismatch {
                what: "teacher embedding width",
                expected: d,
                got: t.len(),
            });
        }
        for (row, &v) in t.iter().enumerate() {
            t_data[row * b + k] = v;
        }
    }
    let t_mat = g.constant(t_data, [d, b])?;

    let mut per_trace = Vec::with_capacity(b);
    for (j, &pred) in preds.iter().enumerate() {
        let sims = g.matmul(pred, t_mat)?;
        let logits = g.scale(sims, 1.0 / tau);
        let lse = g.logsumexp(logits)?;
        let own = g.pick(logits, j)?;
        per_trace.push(g.sub(lse, own)?);
    }
    batch_mean(g, per_trace)
}

/// Rank distillation: `mean_j KL( softmax(s_j / tau_r) || softmax(s_hat_j / tau_r) )`
/// where `s_j` are the teacher's scores over trace `j`'s candidates and
/// `s_hat_j` the student's. The teacher distribution leads the KL.
pub fn rank_distill_loss(
    g: &mut Graph,
    preds: &[TensorId],
    candidates: &[RankCandidates],
    tau_r: f64,
) -> Result<TensorId, LossError> {
    if preds.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    if candidates.len() != preds.len() {
        return Err(LossError::LengthMismatch {
            what: "candidate sets",
            expected: preds.len(),
            got: candidates.len(),
        });
    }
    if tau_r <= 0.0 {
        return Err(LossError::NonPositiveTemperature(tau_r));
    }

    let mut per_trace = Vec::with_capacity(preds.len());
    for (j, (&pred, cand)) in preds.iter().zip(candidates).enumerate() {
        let k = cand.k();
        if k == 0 {
            return Err(LossError::NoCandidates { trace: j });
        }
        if cand.embeddings.len() != k * cand.d {
            return Err(LossError::LengthMismatch {
                what: "candidate embedding matrix",
                expected: k * cand.d,
                got: cand.embeddings.len(),
            });
        }

        let p = stable_softmax_scaled(&cand.teacher_scores, tau_r);
        // sum_k p_k ln p_k, the constant part of the KL; keeping it makes
        // the loss a true KL (zero iff the distributions match).
        let neg_entropy: f64 = p
            .iter()
            .filter(|&&pk| pk > 0.0)
            .map(|&pk| pk * pk.ln())
            .sum();

        // Candidate matrix transposed to [d, k] so one matmul yields the
        // student's score row.
        let mut c_data = vec![0.0; cand.d * k];
        for row in 0..k {
            for col in 0..cand.d {
                c_data[col * k + row] = cand.embeddings[row * cand.d + col];
            }
        }
        let c_mat = g.constant(c_data, [cand.d, k])?;
        let scores = g.matmul(pred, c_mat)?;
        let logits = g.scale(scores, 1.0 / tau_r);
        let log_q = g.log_softmax(logits)?;
        let cross = g.dot_const(log_q, &p)?;
        per_trace.push(g.affine(cross, -1.0, neg_entropy));
    }
    batch_mean(g, per_trace)
}

/// Numerically stable `softmax(scores / tau)` on the host side.
pub fn stable_softmax_scaled(scores: &[f64], tau: f64) -> Vec<f64> {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|&s| ((s - max) / tau).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / z).collect()
}

/// Weighted sum of already-built scalar loss nodes. Callers skip zero-weight
/// components before getting here; passing none is an error.
pub fn weighted_sum(g: &mut Graph, parts: &[(f64, TensorId)]) -> Result<TensorId, LossError> {
    if parts.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    let scaled: Vec<TensorId> = parts
        .iter()
        .map(|&(w, id)| g.scale(id, w))
        .collect();
    Ok(g.sum_scalars(&scaled)?)
}

/// Graph handles for the combined objective. Zero-weight components are
/// never built and stay `None`.
pub struct CombinedLoss {
    pub total: TensorId,
    pub alignment: Option<TensorId>,
    pub contrastive: Option<TensorId>,
    pub rank: Option<TensorId>,
}

/// Scalar values of the combined objective for one batch; skipped
/// components report zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub alignment: f64,
    pub contrastive: f64,
    pub rank: f64,
    pub total: f64,
}

/// Builds `lambda_a * alignment + lambda_c * contrastive + lambda_r * rank`,
/// constructing only the components with positive weight.
pub fn combined_loss(
    g: &mut Graph,
    preds: &[TensorId],
    teachers: &[Vec<f64>],
    candidates: Option<&[RankCandidates]>,
    weights: &LossWeights,
) -> Result<CombinedLoss, LossError> {
    weights.validate()?;
    let mut parts = Vec::new();
    let mut alignment = None;
    let mut contrastive = None;
    let mut rank = None;
    if weights.alignment > 0.0 {
        let id = alignment_loss(g, preds, teachers)?;
        alignment = Some(id);
        parts.push((weights.alignment, id));
    }
    if weights.contrastive > 0.0 {
        let id = contrastive_loss(g, preds, teachers, weights.tau)?;
        contrastive = Some(id);
        parts.push((weights.contrastive, id));
    }
    if weights.rank > 0.0 {
        let cands = candidates.ok_or(LossError::CandidatesRequired)?;
        let id = rank_distill_loss(g, preds, cands, weights.tau_r)?;
        rank = Some(id);
        parts.push((weights.rank, id));
    }
    let total = weighted_sum(g, &parts)?;
    Ok(CombinedLoss {
        total,
        alignment,
        contrastive,
        rank,
    })
}

impl CombinedLoss {
    /// Reads the component values out of the graph.
    pub fn breakdown(&self, g: &Graph) -> LossBreakdown {
        let scalar = |id: Option<TensorId>| id.map_or(0.0, |id| g.data(id)[0]);
        LossBreakdown {
            alignment: scalar(self.alignment),
            contrastive: scalar(self.contrastive),
            rank: scalar(self.rank),
            total: g.data(self.total)[0],
        }
    }
}
