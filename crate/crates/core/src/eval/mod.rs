//! Retrieval evaluation: corpus search, rank metrics, and paired
//! significance tests between two systems on the same triggers.

pub mod corpus;
pub mod metrics;
pub mod report;
pub mod stats;

pub use corpus::{Corpus, QueryRecord, Split};
pub use metrics::{
    judge, random_chance_recall, summarize, topk_scored, topk_search, MetricsSummary,
    QueryOutcome,
};
pub use report::EvalReport;
pub use stats::{
    bootstrap_mean_ci, mcnemar, paired_outcomes, BootstrapCi, McNemarTest, PairedOutcomes,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("i/o on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("corpus file {path}: {reason}")]
    Decode { path: String, reason: String },
    #[error("corpus file {path}: checksum mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    ChecksumMismatch {
        path: String,
        stored: u32,
        computed: u32,
    },
    #[error("query embedding for {trigger_id} has width {got}, corpus expects {expected}")]
    WidthMismatch {
        trigger_id: String,
        got: usize,
        expected: usize,
    },
    #[error("cutoff k={k} exceeds corpus size {m}")]
    BadCutoff { k: usize, m: usize },
    #[error("no relevance judgments for triggers: {}", .trigger_ids.join(", "))]
    MissingQrels { trigger_ids: Vec<String> },
    #[error("runs cannot be compared: {0}")]
    MismatchedRuns(String),
}

/// One trigger's judged result inside a run.
#[derive(Debug, Clone, PartialEq)]
pub struct TriggerEval {
    pub trigger_id: String,
    pub conversation_id: String,
    pub turn: u32,
    /// Top-k documents as `(corpus doc index, score)`, best first.
    pub ranking: Vec<(usize, f64)>,
    /// `None` when the trigger had no relevance judgments.
    pub outcome: Option<QueryOutcome>,
}

/// A full evaluation of one system over a set of triggers.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRun {
    pub k: usize,
    pub triggers: Vec<TriggerEval>,
    pub summary: MetricsSummary,
}

/// Searches and judges each `(query record, query embedding)` pair against
/// the corpus at cutoff `k`.
pub fn evaluate(
    corpus: &Corpus,
    items: &[(&QueryRecord, Vec<f64>)],
    k: usize,
) -> Result<EvalRun, EvalError> {
    if k > corpus.doc_count() {
        return Err(EvalError::BadCutoff {
            k,
            m: corpus.doc_count(),
        });
    }
    let mut triggers = Vec::with_capacity(items.len());
    for (record, embedding) in items {
        if embedding.len() != corpus.d {
            return Err(EvalError::WidthMismatch {
                trigger_id: record.trigger_id.clone(),
                got: embedding.len(),
                expected: corpus.d,
            });
        }
        let ranking = metrics::topk_scored(&corpus.embeddings, corpus.d, embedding, k);
        let ranked_idx: Vec<usize> = ranking.iter().map(|&(i, _)| i).collect();
        triggers.push(TriggerEval {
            trigger_id: record.trigger_id.clone(),
            conversation_id: record.conversation_id.clone(),
            turn: record.turn,
            outcome: judge(&ranked_idx, &record.relevant, k),
            ranking,
        });
    }
    let summary = summarize(&triggers.iter().map(|t| t.outcome).collect::<Vec<_>>());
    Ok(EvalRun {
        k,
        triggers,
        summary,
    })
}

/// Paired bootstrap over two per-trigger metric vectors (ours minus
/// baseline). Thin wrapper over [`bootstrap_mean_ci`] with the pairing
/// check.
pub fn bootstrap_ci(
    ours: &[f64],
    baseline: &[f64],
    resamples: usize,
    seed: u64,
) -> Result<BootstrapCi, EvalError> {
    if ours.len() != baseline.len() {
        return Err(EvalError::MismatchedRuns(format!(
            "paired vectors of different length ({} vs {})",
            ours.len(),
            baseline.len()
        )));
    }
    if ours.is_empty() {
        return Err(EvalError::MismatchedRuns("empty paired vectors".into()));
    }
    let deltas: Vec<f64> = ours.iter().zip(baseline).map(|(a, b)| a - b).collect();
    Ok(bootstrap_mean_ci(&deltas, resamples, seed))
}

/// Paired comparison of system A against system B on identical triggers:
/// bootstrap CIs on the per-trigger metric deltas (A minus B) and
/// McNemar's test on the hit/miss table.
#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub delta_recall: BootstrapCi,
    pub delta_mrr: BootstrapCi,
    pub delta_ndcg: BootstrapCi,
    pub table: PairedOutcomes,
    pub mcnemar: McNemarTest,
}

pub fn compare(
    a: &EvalRun,
    b: &EvalRun,
    resamples: usize,
    seed: u64,
) -> Result<Comparison, EvalError> {
    if a.triggers.len() != b.triggers.len() {
        return Err(EvalError::MismatchedRuns(format!(
            "trigger counts differ ({} vs {})",
            a.triggers.len(),
            b.triggers.len()
        )));
    }
    let mut d_recall = Vec::new();
    let mut d_mrr = Vec::new();
    let mut d_ndcg = Vec::new();
    let mut a_hits = Vec::new();
    let mut b_hits = Vec::new();
    for (ta, tb) in a.triggers.iter().zip(&b.triggers) {
        if ta.trigger_id != tb.trigger_id {
            return Err(EvalError::MismatchedRuns(format!(
                "trigger order differs ({} vs {})",
                ta.trigger_id, tb.trigger_id
            )));
        }
        match (&ta.outcome, &tb.outcome) {
            (Some(oa), Some(ob)) => {
                d_recall.push(f64::from(oa.hit) - f64::from(ob.hit));
                d_mrr.push(oa.rr - ob.rr);
                d_ndcg.push(oa.ndcg - ob.ndcg);
                a_hits.push(oa.hit);
                b_hits.push(ob.hit);
            }
            (None, None) => {}
            _ => {
                return Err(EvalError::MismatchedRuns(format!(
                    "trigger {} judged in one run but not the other",
                    ta.trigger_id
                )));
            }
        }
    }
    if d_recall.is_empty() {
        return Err(EvalError::MismatchedRuns(
            "no judged triggers in common".into(),
        ));
    }
    let table = paired_outcomes(&a_hits, &b_hits);
    Ok(Comparison {
        delta_recall: bootstrap_mean_ci(&d_recall, resamples, seed),
        delta_mrr: bootstrap_mean_ci(&d_mrr, resamples, seed.wrapping_add(1)),
        delta_ndcg: bootstrap_mean_ci(&d_ndcg, resamples, seed.wrapping_add(2)),
        mcnemar: table.mcnemar(),
        table,
    })
}

/// One conversation's paired summary.
#[derive(Debug, Clone, PartialEq)]
pub struct ConversationRow {
    pub conversation_id: String,
    /// Judged triggers in the conversation.
    pub triggers: usize,
    /// Tie fraction (both hit or both missed) within the conversation.
    pub agreement: f64,
    pub ours_recall: f64,
    pub baseline_recall: f64,
}

/// Conversation-level view of a paired comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct ConversationAnalysis {
    pub rows: Vec<ConversationRow>,
    /// Unweighted mean of per-conversation agreement rates.
    pub mean_agreement: f64,
    /// Conversations with at least `min_triggers` judged triggers where the
    /// baseline leads our recall by at least `gap_threshold`.
    pub failure_concentrated: Vec<String>,
}

/// Groups paired per-trigger outcomes by conversation. Runs must line up
/// trigger-for-trigger (see [`compare`]).
pub fn per_conversation_analysis(
    ours: &EvalRun,
    baseline: &EvalRun,
    min_triggers: usize,
    gap_threshold: f64,
) -> Result<ConversationAnalysis, EvalError> {
    if ours.triggers.len() != baseline.triggers.len() {
        return Err(EvalError::MismatchedRuns(format!(
            "trigger counts differ ({} vs {})",
            ours.triggers.len(),
            baseline.triggers.len()
        )));
    }
    // Conversations in first-seen order for deterministic output.
    let mut order: Vec<String> = Vec::new();
    let mut grouped: std::collections::HashMap<String, Vec<(bool, bool)>> =
        std::collections::HashMap::new();
    for (to, tb) in ours.triggers.iter().zip(&baseline.triggers) {
        if to.trigger_id != tb.trigger_id {
            return Err(EvalError::MismatchedRuns(format!(
                "trigger order differs ({} vs {})",
                to.trigger_id, tb.trigger_id
            )));
        }
        let (Some(oo), Some(ob)) = (&to.outcome, &tb.outcome) else {
            continue;
        };
        grouped
            .entry(to.conversation_id.clone())
            .or_insert_with(|| {
                order.push(to.conversation_id.clone());
                Vec::new()
            })
            .push((oo.hit, ob.hit));
    }

    let mut rows = Vec::with_capacity(order.len());
    let mut failure_concentrated = Vec::new();
    for conv in order {
        let pairs = &grouped[&conv];
        let n = pairs.len();
        let ties = pairs.iter().filter(|(a, b)| a == b).count();
        let ours_hits = pairs.iter().filter(|(a, _)| *a).count();
        let base_hits = pairs.iter().filter(|(_, b)| *b).count();
        let row = ConversationRow {
            conversation_id: conv.clone(),
            triggers: n,
            agreement: ties as f64 / n as f64,
            ours_recall: ours_hits as f64 / n as f64,
            baseline_recall: base_hits as f64 / n as f64,
        };
        if n >= min_triggers && row.baseline_recall - row.ours_recall >= gap_threshold {
            failure_concentrated.push(conv);
        }
        rows.push(row);
    }
    let mean_agreement = if rows.is_empty() {
        1.0
    } else {
        rows.iter().map(|r| r.agreement).sum::<f64>() / rows.len() as f64
    };
    Ok(ConversationAnalysis {
        rows,
        mean_agreement,
        failure_concentrated,
    })
}

/// Per-turn metric breakdown. Turns at or beyond `cap` share one bucket
/// (rendered as e.g. `5+`).
pub fn summarize_by_turn(run: &EvalRun, cap: u32) -> Vec<(String, MetricsSummary)> {
    let cap = cap.max(1);
    let mut buckets: Vec<Vec<Option<QueryOutcome>>> = vec![Vec::new(); cap as usize];
    for t in &run.triggers {
        let idx = (t.turn.max(1).min(cap) - 1) as usize;
        buckets[idx].push(t.outcome);
    }
    buckets
        .into_iter()
        .enumerate()
        .map(|(i, outcomes)| {
            let label = if (i as u32) + 1 == cap {
                format!("{cap}+")
            } else {
                format!("{}", i + 1)
            };
            (label, summarize(&outcomes))
        })
        .collect()
}
