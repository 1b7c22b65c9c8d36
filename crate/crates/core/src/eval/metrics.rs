//! Rank-cutoff retrieval metrics with deterministic tie handling.

/// Scores every document against the query (dot product; both sides unit
/// norm) and returns the top `k` as `(doc index, score)`, best first. Ties
/// break toward the lower document index so rankings are reproducible
/// bit-for-bit.
pub fn topk_scored(doc_embeddings: &[f64], d: usize, query: &[f64], k: usize) -> Vec<(usize, f64)> {
    assert_eq!(query.len(), d, "query width");
    let m = doc_embeddings.len() / d;
    let mut scored: Vec<(f64, usize)> = (0..m)
        .map(|i| {
            let row = &doc_embeddings[i * d..(i + 1) * d];
            let s: f64 = row.iter().zip(query).map(|(a, b)| a * b).sum();
            (s, i)
        })
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    scored.truncate(k);
    scored.into_iter().map(|(s, i)| (i, s)).collect()
}

/// [`topk_scored`] without the scores.
pub fn topk_search(doc_embeddings: &[f64], d: usize, query: &[f64], k: usize) -> Vec<usize> {
    topk_scored(doc_embeddings, d, query, k)
        .into_iter()
        .map(|(i, _)| i)
        .collect()
}

/// Expected Recall@k of a uniformly random ranking, averaged over the given
/// per-query relevant-document counts (zeros are skipped, matching how
/// unjudged queries are excluded from real metric means).
pub fn random_chance_recall(rel_counts: &[usize], m: usize, k: usize) -> f64 {
    let mut acc = 0.0;
    let mut judged = 0usize;
    for &r in rel_counts {
        if r == 0 {
            continue;
        }
        judged += 1;
        // P(no relevant doc in a random top-k) as a running product.
        let mut miss = 1.0;
        for i in 0..k.min(m) {
            let remaining = (m - i) as f64;
            miss *= ((m - i).saturating_sub(r)) as f64 / remaining;
        }
        acc += 1.0 - miss;
    }
    if judged == 0 {
        0.0
    } else {
        acc / judged as f64
    }
}

/// Metrics for a single judged query at one cutoff.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QueryOutcome {
    /// 1.0 when any relevant document appears in the top k.
    pub hit: bool,
    /// Reciprocal rank of the first relevant document within the top k,
    /// 0 when none appears.
    pub rr: f64,
    /// Binary-gain NDCG at k, with the ideal DCG truncated at
    /// `min(k, |relevant|)`.
    pub ndcg: f64,
}

/// Judges one ranking against its relevant set. `relevant` need not be
/// sorted. Returns `None` when the relevant set is empty; such queries are
/// excluded from averages but still counted by the caller.
pub fn judge(ranking: &[usize], relevant: &[u32], k: usize) -> Option<QueryOutcome> {
    if relevant.is_empty() {
        return None;
    }
    let is_rel = |doc: usize| relevant.iter().any(|&r| r as usize == doc);
    let top = &ranking[..ranking.len().min(k)];

    let mut hit = false;
    let mut rr = 0.0;
    let mut dcg = 0.0;
    for (pos, &doc) in top.iter().enumerate() {
        if is_rel(doc) {
            if !hit {
                hit = true;
                rr = 1.0 / (pos + 1) as f64;
            }
            dcg += 1.0 / ((pos + 2) as f64).log2();
        }
    }
    let ideal_hits = relevant.len().min(k);
    let idcg: f64 = (0..ideal_hits).map(|i| 1.0 / ((i + 2) as f64).log2()).sum();
    Some(QueryOutcome {
        hit,
        rr,
        ndcg: dcg / idcg,
    })
}

/// Averages over judged queries.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsSummary {
    pub recall: f64,
    pub mrr: f64,
    pub ndcg: f64,
    /// Queries that entered the averages.
    pub evaluated: usize,
    /// Queries skipped for having no relevance judgments.
    pub skipped: usize,
}

pub fn summarize(outcomes: &[Option<QueryOutcome>]) -> MetricsSummary {
    let mut evaluated = 0usize;
    let mut skipped = 0usize;
    let (mut recall, mut mrr, mut ndcg) = (0.0, 0.0, 0.0);
    for o in outcomes {
        match o {
            Some(q) => {
                evaluated += 1;
                recall += if q.hit { 1.0 } else { 0.0 };
                mrr += q.rr;
                ndcg += q.ndcg;
            }
            None => skipped += 1,
        }
    }
    let n = evaluated.max(1) as f64;
    MetricsSummary {
        recall: recall / n,
        mrr: mrr / n,
        ndcg: ndcg / n,
        evaluated,
        skipped,
    }
}
