//! Assembled evaluation reports: a serializable summary of one system's
//! retrieval quality, optionally paired against a baseline, plus a
//! fixed-layout text rendering.

use serde::{Deserialize, Serialize};

use super::{Comparison, ConversationAnalysis, EvalRun, MetricsSummary};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeltaRow {
    pub delta: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BaselineSection {
    pub name: String,
    pub recall_at_k: f64,
    pub mrr_at_k: f64,
    pub ndcg_at_k: f64,
    /// Ours divided by baseline Recall@k.
    pub retention_recall: f64,
    pub delta_recall: DeltaRow,
    pub delta_mrr: DeltaRow,
    pub delta_ndcg: DeltaRow,
    pub mcnemar_b: u64,
    pub mcnemar_c: u64,
    pub mcnemar_chi2: f64,
    pub mcnemar_p: f64,
    pub wins: u64,
    pub ties: u64,
    pub losses: u64,
    pub agreement: f64,
    pub mean_conversation_agreement: f64,
    pub failure_concentrated: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TurnRow {
    pub turn: String,
    pub evaluated: usize,
    pub recall_at_k: f64,
    pub mrr_at_k: f64,
    pub ndcg_at_k: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub system: String,
    pub k: usize,
    pub triggers: usize,
    pub evaluated: usize,
    pub skipped: usize,
    pub recall_at_k: f64,
    pub mrr_at_k: f64,
    pub ndcg_at_k: f64,
    pub by_turn: Vec<TurnRow>,
    pub baseline: Option<BaselineSection>,
}

fn turn_rows(run: &EvalRun, cap: u32) -> Vec<TurnRow> {
    super::summarize_by_turn(run, cap)
        .into_iter()
        .map(|(turn, s)| TurnRow {
            turn,
            evaluated: s.evaluated,
            recall_at_k: s.recall,
            mrr_at_k: s.mrr,
            ndcg_at_k: s.ndcg,
        })
        .collect()
}

fn summary_fields(s: &MetricsSummary) -> (f64, f64, f64) {
    (s.recall, s.mrr, s.ndcg)
}

/// Builds a standalone report for one system.
pub fn build_report(system: &str, run: &EvalRun, turn_cap: u32) -> EvalReport {
    let (recall, mrr, ndcg) = summary_fields(&run.summary);
    EvalReport {
        system: system.to_string(),
        k: run.k,
        triggers: run.triggers.len(),
        evaluated: run.summary.evaluated,
        skipped: run.summary.skipped,
        recall_at_k: recall,
        mrr_at_k: mrr,
        ndcg_at_k: ndcg,
        by_turn: turn_rows(run, turn_cap),
        baseline: None,
    }
}

/// Attaches the paired-baseline section to a report.
pub fn attach_baseline(
    report: &mut EvalReport,
    baseline_name: &str,
    baseline_run: &EvalRun,
    cmp: &Comparison,
    conv: &ConversationAnalysis,
) {
    let (b_recall, b_mrr, b_ndcg) = summary_fields(&baseline_run.summary);
    let (wins, ties, losses) = cmp.table.win_tie_loss();
    report.baseline = Some(BaselineSection {
        name: baseline_name.to_string(),
        recall_at_k: b_recall,
        mrr_at_k: b_mrr,
        ndcg_at_k: b_ndcg,
        retention_recall: if b_recall > 0.0 {
            report.recall_at_k / b_recall
        } else {
            f64::NAN
        },
        delta_recall: DeltaRow {
            delta: cmp.delta_recall.mean,
            ci_lo: cmp.delta_recall.lo,
            ci_hi: cmp.delta_recall.hi,
        },
        delta_mrr: DeltaRow {
            delta: cmp.delta_mrr.mean,
            ci_lo: cmp.delta_mrr.lo,
            ci_hi: cmp.delta_mrr.hi,
        },
        delta_ndcg: DeltaRow {
            delta: cmp.delta_ndcg.mean,
            ci_lo: cmp.delta_ndcg.lo,
            ci_hi: cmp.delta_ndcg.hi,
        },
        mcnemar_b: cmp.mcnemar.b,
        mcnemar_c: cmp.mcnemar.c,
        mcnemar_chi2: cmp.mcnemar.chi2,
        mcnemar_p: cmp.mcnemar.p,
        wins,
        ties,
        losses,
        agreement: cmp.table.agreement(),
        mean_conversation_agreement: conv.mean_agreement,
        failure_concentrated: conv.failure_concentrated.clone(),
    });
}

/// Fixed-layout text rendering of a report.
pub fn render(report: &EvalReport) -> String {
    use std::fmt::Write;
    let mut out = String::new();
    let k = report.k;
    writeln!(out, "== retrieval report: {} ==", report.system).unwrap();
    writeln!(
        out,
        "triggers {} (evaluated {}, skipped {})",
        report.triggers, report.evaluated, report.skipped
    )
    .unwrap();
    writeln!(
        out,
        "{:<24} {:>10} {:>10} {:>10}",
        "system",
        format!("R@{k}"),
        format!("MRR@{k}"),
        format!("nDCG@{k}")
    )
    .unwrap();
    writeln!(
        out,
        "{:<24} {:>10.4} {:>10.4} {:>10.4}",
        report.system, report.recall_at_k, report.mrr_at_k, report.ndcg_at_k
    )
    .unwrap();
    if let Some(b) = &report.baseline {
        writeln!(
            out,
            "{:<24} {:>10.4} {:>10.4} {:>10.4}",
            b.name, b.recall_at_k, b.mrr_at_k, b.ndcg_at_k
        )
        .unwrap();
        writeln!(
            out,
            "{:<24} {:>10.4} {:>10.4} {:>10.4}",
            "delta", b.delta_recall.delta, b.delta_mrr.delta, b.delta_ndcg.delta
        )
        .unwrap();
        writeln!(
            out,
            "95% CI dR@{k} [{:.4}, {:.4}]  dMRR [{:.4}, {:.4}]  dnDCG [{:.4}, {:.4}]",
            b.delta_recall.ci_lo,
            b.delta_recall.ci_hi,
            b.delta_mrr.ci_lo,
            b.delta_mrr.ci_hi,
            b.delta_ndcg.ci_lo,
            b.delta_ndcg.ci_hi
        )
        .unwrap();
        writeln!(out, "retention (R@{k} ours/baseline): {:.4}", b.retention_recall).unwrap();
        writeln!(
            out,
            "McNemar b={} c={} chi2={:.2} p={:.4}",
            b.mcnemar_b, b.mcnemar_c, b.mcnemar_chi2, b.mcnemar_p
        )
        .unwrap();
        writeln!(
            out,
            "win/tie/loss {}/{}/{}  agreement {:.1}%  per-conversation {:.1}%",
            b.wins,
            b.ties,
            b.losses,
            100.0 * b.agreement,
            100.0 * b.mean_conversation_agreement
        )
        .unwrap();
        if !b.failure_concentrated.is_empty() {
            writeln!(
                out,
                "failure-concentrated conversations ({}): {}",
                b.failure_concentrated.len(),
                b.failure_concentrated.join(", ")
            )
            .unwrap();
        }
    }
    writeln!(out, "-- by turn --").unwrap();
    for row in &report.by_turn {
        writeln!(
            out,
            "turn {:<4} n={:<5} R@{k}={:.4} MRR@{k}={:.4} nDCG@{k}={:.4}",
            row.turn, row.evaluated, row.recall_at_k, row.mrr_at_k, row.ndcg_at_k
        )
        .unwrap();
    }
    out
}
