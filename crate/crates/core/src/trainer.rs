//! The training loop: shuffled minibatches over cached traces, the
//! combined distillation objective, global-norm clipping, AdamW with a
//! per-step cosine schedule, periodic validation snapshots, and
//! resumable checkpoints.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::binfmt::derive_seed;
use crate::eval::{self, Corpus, QueryRecord, Split};
use crate::losses::{self, LossBreakdown, LossError, LossWeights, RankCandidates};
use crate::mapper::{self, MapperConfig, MapperError, MapperParams};
use crate::optim::{self, AdamConfig, OptimizerState};
use crate::trace::Trace;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    Config(String),
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("trace {trigger_id} carries no teacher embedding")]
    MissingTeacher { trigger_id: String },
    #[error("non-finite loss at epoch {epoch}, step {step}{}", checkpoint_hint(.last_checkpoint))]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        last_checkpoint: Option<PathBuf>,
    },
    #[error("non-finite gradient in {block} at epoch {epoch}, step {step}")]
    NonFiniteGradient {
        epoch: usize,
        step: usize,
        block: String,
    },
    #[error(transparent)]
    Mapper(#[from] MapperError),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Eval(#[from] eval::EvalError),
}

fn checkpoint_hint(p: &Option<PathBuf>) -> String {
    match p {
        Some(p) => format!(" (last good checkpoint: {})", p.display()),
        None => String::new(),
    }
}

/// Hyperparameters of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Rank-distillation candidate count per trigger.
    pub k: usize,
    pub weights: LossWeights,
    pub seed: u64,
    pub shuffle: bool,
    /// Validation snapshot cadence in epochs (0 disables snapshots).
    pub val_every: usize,
    /// Periodic checkpoint cadence in epochs (0 disables; a `last`
    /// checkpoint is still written every epoch when a directory is given).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 80,
            batch_size: 16,
            lr_start: 2e-4,
            lr_end: 1e-5,
            weight_decay: 1e-4,
            clip_norm: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            k: 128,
            weights: LossWeights::default(),
            seed: 0,
            shuffle: true,
            val_every: 5,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: String| Err(TrainError::Config(msg));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.lr_end > 0.0 && self.lr_start >= self.lr_end) {
            return bad(format!(
                "need lr_start >= lr_end > 0, got {} and {}",
                self.lr_start, self.lr_end
            ));
        }
        if self.clip_norm <= 0.0 {
            return bad(format!("clip_norm must be positive, got {}", self.clip_norm));
        }
        if self.weight_decay < 0.0 {
            return bad(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            ));
        }
        self.weights.validate()?;
        if self.weights.rank > 0.0 && self.k < 2 {
            return bad(format!(
                "rank distillation needs k >= 2 candidates, got {}",
                self.k
            ));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// One trigger's frozen top-K teacher candidates.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    pub doc_idx: Vec<u32>,
    pub teacher_scores: Vec<f64>,
}

/// Exact top-K by teacher score for every query embedding, ties broken by
/// ascending doc index. Frozen once before epoch 1; the teacher never
/// moves, so refreshing would be a no-op.
pub fn precompute_candidates(
    teachers: &[Vec<f64>],
    corpus: &Corpus,
    k: usize,
) -> Result<Vec<CandidateSet>, TrainError> {
    if k > corpus.doc_count() {
        return Err(TrainError::Config(format!(
            "k={k} exceeds corpus size {}",
            corpus.doc_count()
        )));
    }
    Ok(teachers
        .iter()
        .map(|t| {
            let top = eval::topk_scored(&corpus.embeddings, corpus.d, t, k);
            CandidateSet {
                doc_idx: top.iter().map(|&(i, _)| i as u32).collect(),
                teacher_scores: top.iter().map(|&(_, s)| s).collect(),
            }
        })
        .collect())
}

/// Everything recorded about one completed epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based epoch index.
    pub epoch: usize,
    /// Batch-mean loss components over the epoch.
    pub loss: LossBreakdown,
    pub lr_first: f64,
    pub lr_last: f64,
    /// Pre-clip global gradient norms.
    pub grad_norm_mean: f64,
    pub grad_norm_max: f64,
    /// Largest post-clip global norm seen in the epoch.
    pub post_clip_max: f64,
    /// Validation Recall@10, on snapshot epochs only.
    pub val_recall: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

/// Final state of a completed run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: MapperParams,
    /// Parameters at the best validation snapshot; equal to `params` when
    /// validation never ran.
    pub best_params: MapperParams,
    pub best_val_recall: Option<f64>,
    pub best_epoch: Option<usize>,
    pub history: TrainHistory,
}

const VAL_CUTOFF: usize = 10;

fn gather_candidates(
    batch: &[usize],
    sets: &[CandidateSet],
    corpus: &Corpus,
) -> Vec<RankCandidates> {
    batch
        .iter()
        .map(|&idx| {
            let set = &sets[idx];
            let mut embeddings = Vec::with_capacity(set.doc_idx.len() * corpus.d);
            for &doc in &set.doc_idx {
                embeddings.extend_from_slice(corpus.doc_embedding(doc as usize));
            }
            RankCandidates {
                embeddings,
                teacher_scores: set.teacher_scores.clone(),
                d: corpus.d,
            }
        })
        .collect()
}

fn validation_recall(
    params: &MapperParams,
    val_traces: &[Trace],
    corpus: &Corpus,
) -> Result<Option<f64>, TrainError> {
    if val_traces.is_empty() {
        return Ok(None);
    }
    let records: std::collections::HashMap<&str, &QueryRecord> = corpus
        .queries
        .iter()
        .map(|q| (q.trigger_id.as_str(), q))
        .collect();
    let mut items = Vec::with_capacity(val_traces.len());
    let mut missing = Vec::new();
    for t in val_traces {
        match records.get(t.trigger_id.as_str()) {
            Some(q) => {
                let emb = mapper::forward(params, &t.hidden_f64(), &vec![true; t.n])?;
                items.push((*q, emb));
            }
            None => missing.push(t.trigger_id.clone()),
        }
    }
    if !missing.is_empty() {
        return Err(eval::EvalError::MissingQrels {
            trigger_ids: missing,
        }
        .into());
    }
    let run = eval::evaluate(corpus, &items, VAL_CUTOFF)?;
    Ok(Some(run.summary.recall))
}

/// Runs the full training recipe. `val_traces` may be empty (validation is
/// skipped); `corpus` supplies candidate documents when the rank weight is
/// positive and the validation index otherwise.
pub fn train(
    mapper_cfg: &MapperConfig,
    cfg: &TrainConfig,
    train_traces: &[Trace],
    val_traces: &[Trace],
    corpus: &Corpus,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    mapper_cfg.validate().map_err(TrainError::Mapper)?;
    if train_traces.is_empty() {
        return Err(TrainError::EmptyTrainingSet);
    }
    let mut teachers = Vec::with_capacity(train_traces.len());
    for t in train_traces {
        match &t.teacher {
            Some(y) => teachers.push(y.clone()),
            None => {
                return Err(TrainError::MissingTeacher {
                    trigger_id: t.trigger_id.clone(),
                })
            }
        }
        if t.n > mapper_cfg.max_positions {
            return Err(TrainError::Config(format!(
                "trace {} has {} tokens but max_positions is {}",
                t.trigger_id, t.n, mapper_cfg.max_positions
            )));
        }
        if t.d_h != mapper_cfg.d_h {
            return Err(TrainError::Config(format!(
                "trace {} has hidden width {} but the head expects {}",
                t.trigger_id, t.d_h, mapper_cfg.d_h
            )));
        }
    }

    let candidates = if cfg.weights.rank > 0.0 {
        Some(precompute_candidates(&teachers, corpus, cfg.k)?)
    } else {
        None
    };

    let mut params = MapperParams::init(mapper_cfg)?;
    let specs = mapper::param_specs(mapper_cfg);
    let decay: Vec<bool> = specs.iter().map(|s| s.decay).collect();
    let block_lens: Vec<usize> = specs.iter().map(|s| s.len()).collect();
    let mut opt_state = OptimizerState::new(&block_lens);
    let adam = cfg.adam();

    let n = train_traces.len();
    let batches_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * batches_per_epoch;
    let last_step = (total_steps - 1).max(1) as u64;

    let mut history = TrainHistory::default();
    let mut best_params = params.clone();
    let mut best_val_recall: Option<f64> = None;
    let mut best_epoch: Option<usize> = None;
    let mut last_checkpoint: Option<PathBuf> = None;
    let mut step = 0u64;

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        if cfg.shuffle {
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "epoch-shuffle", epoch as u64));
            for i in (1..n).rev() {
                let j = rand::Rng::random_range(&mut rng, 0..=i);
                order.swap(i, j);
            }
        }

        let mut loss_sum = LossBreakdown {
            alignment: 0.0,
            contrastive: 0.0,
            rank: 0.0,
            total: 0.0,
        };
        let mut lr_first = f64::NAN;
        let mut lr_last = f64::NAN;
        let mut grad_norm_sum = 0.0;
        let mut grad_norm_max = 0.0f64;
        let mut post_clip_max = 0.0f64;
        let mut batch_count = 0usize;

        for batch in order.chunks(cfg.batch_size) {
            let mut g = crate::tensor::Graph::new();
            let leaves = params.insert_leaves(&mut g, true)?;
            let mut preds = Vec::with_capacity(batch.len());
            let mut batch_teachers = Vec::with_capacity(batch.len());
            for &idx in batch {
                let t = &train_traces[idx];
                let pred = mapper::forward_on_graph(
                    &mut g,
                    &leaves,
                    mapper_cfg,
                    &t.hidden_f64(),
                    &vec![true; t.n],
                )?;
                preds.push(pred);
                batch_teachers.push(teachers[idx].clone());
            }
            let batch_cands = candidates
                .as_ref()
                .map(|sets| gather_candidates(batch, sets, corpus));
            let combined = losses::combined_loss(
                &mut g,
                &preds,
                &batch_teachers,
                batch_cands.as_deref(),
                &cfg.weights,
            )?;
            let breakdown = combined.breakdown(&g);
            if !breakdown.total.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    step: step as usize,
                    last_checkpoint,
                });
            }

            g.backward(combined.total)?;
            let mut grads: Vec<Vec<f64>> = Vec::with_capacity(leaves.flat.len());
            for (leaf, spec) in leaves.flat.iter().zip(&specs) {
                let grad = g
                    .grad(*leaf)
                    .expect("parameter leaf has a gradient after backward");
                if grad.iter().any(|x| !x.is_finite()) {
                    return Err(TrainError::NonFiniteGradient {
                        epoch,
                        step: step as usize,
                        block: spec.name.clone(),
                    });
                }
                grads.push(grad.to_vec());
            }

            let lr = optim::cosine_lr(step, last_step, cfg.lr_start, cfg.lr_end);
            if lr_first.is_nan() {
                lr_first = lr;
            }
            lr_last = lr;

            let pre_norm = optim::clip_grad_norm(&mut grads, cfg.clip_norm);
            let post_norm = optim::global_grad_norm(&grads);
            grad_norm_sum += pre_norm;
            grad_norm_max = grad_norm_max.max(pre_norm);
            post_clip_max = post_clip_max.max(post_norm);

            optim::adamw_step(&mut params.blocks, &grads, &decay, &mut opt_state, lr, &adam);

            loss_sum.alignment += breakdown.alignment;
            loss_sum.contrastive += breakdown.contrastive;
            loss_sum.rank += breakdown.rank;
            loss_sum.total += breakdown.total;
            batch_count += 1;
            step += 1;
        }

        let inv = 1.0 / batch_count as f64;
        let val_recall = if cfg.val_every > 0
            && (epoch % cfg.val_every == 0 || epoch == cfg.epochs)
        {
            validation_recall(&params, val_traces, corpus)?
        } else {
            None
        };
        if let Some(r) = val_recall {
            if best_val_recall.is_none_or(|b| r > b) {
                best_val_recall = Some(r);
                best_epoch = Some(epoch);
                best_params = params.clone();
            }
        }
        history.epochs.push(EpochRecord {
            epoch,
            loss: LossBreakdown {
                alignment: loss_sum.alignment * inv,
                contrastive: loss_sum.contrastive * inv,
                rank: loss_sum.rank * inv,
                total: loss_sum.total * inv,
            },
            lr_first,
            lr_last,
            grad_norm_mean: grad_norm_sum * inv,
            grad_norm_max,
            post_clip_max,
            val_recall,
        });

        if let Some(dir) = checkpoint_dir {
            let last = dir.join("last.hsph");
            mapper::io::save_checkpoint(&last, &params, &opt_state)?;
            last_checkpoint = Some(last);
            if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 {
                let periodic = dir.join(format!("checkpoint-{epoch:04}.hsph"));
                mapper::io::save_checkpoint(&periodic, &params, &opt_state)?;
            }
        }
    }

    if best_val_recall.is_none() {
        best_params = params.clone();
    }
    Ok(TrainOutcome {
        params,
        best_params,
        best_val_recall,
        best_epoch,
        history,
    })
}

/// Embeds every trace with the given parameters; the glue between a trained
/// head and the evaluation harness.
pub fn embed_traces(
    params: &MapperParams,
    traces: &[Trace],
) -> Result<Vec<(String, Vec<f64>)>, TrainError> {
    traces
        .iter()
        .map(|t| {
            let emb = mapper::forward(params, &t.hidden_f64(), &vec![true; t.n])?;
            Ok((t.trigger_id.clone(), emb))
        })
        .collect()
}

/// Pulls the traces whose conversations fall in the given split, in corpus
/// query order.
pub fn traces_for_split<'a>(
    corpus: &Corpus,
    traces: &'a [Trace],
    split: Split,
) -> Vec<&'a Trace> {
    let by_id: std::collections::HashMap<&str, &Trace> =
        traces.iter().map(|t| (t.trigger_id.as_str(), t)).collect();
    corpus
        .queries_in(split)
        .filter_map(|q| by_id.get(q.trigger_id.as_str()).copied())
        .collect()
}
