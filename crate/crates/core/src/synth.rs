//! Synthetic world generator: a desk-scale stand-in for the LLM, the
//! teacher embedding model, and the judged conversational corpus.
//!
//! The planted structure is linear-through-mean: a fixed random map `G`
//! sends the mean of a trigger's hidden states to the teacher's embedding
//! space. Hidden states are a conversation latent direction plus a
//! per-trigger drift, per-token noise, and a positional wave, so the task
//! is learnable by a pooling encoder but not by memorization. Conversation
//! latents are drawn around a small atlas of topic directions, which makes
//! documents cluster topically the way retrieved candidate sets do.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::binfmt::derive_seed;
use crate::eval::{self, Corpus, EvalRun, QueryRecord, Split};
use crate::trace::Trace;

/// Conversations per atlas topic; the atlas has `max(1, C / this)` entries.
const CONVERSATIONS_PER_TOPIC: usize = 15;
/// Spread of conversation latents around their topic direction.
const TOPIC_JITTER: f64 = 0.45;
/// Expected norm of per-token noise.
const TOKEN_NOISE: f64 = 0.35;
/// Amplitude of the deterministic positional wave.
const POSITION_WAVE: f64 = 0.20;
/// Cosine band for topic-correlated distractors.
const DISTRACTOR_COS: (f64, f64) = (0.55, 0.85);

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid world config: {0}")]
    InvalidConfig(String),
    #[error("infeasible world config: {0}")]
    Infeasible(String),
    #[error("no trace with a teacher embedding for triggers: {}", .0.join(", "))]
    MissingTeacher(Vec<String>),
    #[error(transparent)]
    Eval(#[from] eval::EvalError),
}

/// Knobs of the generated world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldConfig {
    pub seed: u64,
    /// Synthetic LLM hidden width.
    pub d_h: usize,
    /// Teacher embedding width.
    pub d: usize,
    pub num_conversations: usize,
    pub triggers_min: usize,
    pub triggers_max: usize,
    pub tokens_min: usize,
    pub tokens_max: usize,
    /// Total corpus size M, relevant documents included.
    pub corpus_size: usize,
    /// Upper bound on relevant docs per trigger; each trigger draws
    /// 1..=this many.
    pub relevant_per_query: usize,
    /// Teacher noise level sigma.
    pub noise: f64,
    /// Fraction of distractors correlated with conversation topics.
    pub distractor_correlation: f64,
    /// How far each trigger's information need drifts from the
    /// conversation latent. Small values make follow-up turns nearly
    /// indistinguishable reformulations of one need.
    pub trigger_drift: f64,
    pub train_frac: f64,
    pub val_frac: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            d_h: 64,
            d: 32,
            num_conversations: 400,
            triggers_min: 6,
            triggers_max: 8,
            tokens_min: 8,
            tokens_max: 16,
            corpus_size: 5000,
            relevant_per_query: 2,
            noise: 0.1,
            distractor_correlation: 0.5,
            trigger_drift: 0.30,
            train_frac: 0.72,
            val_frac: 0.10,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |msg: String| Err(SynthError::InvalidConfig(msg));
        if self.d == 0 || self.d_h == 0 || self.d > self.d_h {
            return bad(format!("need 1 <= d <= d_h, got d={} d_h={}", self.d, self.d_h));
        }
        if self.num_conversations == 0 {
            return bad("need at least one conversation".into());
        }
        if self.triggers_min == 0 || self.triggers_min > self.triggers_max {
            return bad(format!(
                "bad triggers range {}..={}",
                self.triggers_min, self.triggers_max
            ));
        }
        if self.tokens_min == 0 || self.tokens_min > self.tokens_max {
            return bad(format!(
                "bad tokens range {}..={}",
                self.tokens_min, self.tokens_max
            ));
        }
        if self.relevant_per_query == 0 {
            return bad("relevant_per_query must be at least 1".into());
        }
        if self.corpus_size < 10 * self.relevant_per_query {
            return bad(format!(
                "corpus_size {} below 10 x relevant_per_query {}",
                self.corpus_size, self.relevant_per_query
            ));
        }
        if self.noise < 0.0 {
            return bad(format!("noise must be >= 0, got {}", self.noise));
        }
        if self.trigger_drift < 0.0 {
            return bad(format!(
                "trigger_drift must be >= 0, got {}",
                self.trigger_drift
            ));
        }
        if !(0.0..=1.0).contains(&self.distractor_correlation) {
            return bad(format!(
                "distractor_correlation must be in [0, 1], got {}",
                self.distractor_correlation
            ));
        }
        if self.train_frac <= 0.0 || self.val_frac < 0.0 || self.train_frac + self.val_frac >= 1.0
        {
            return bad(format!(
                "split fractions train={} val={} must leave room for a test split",
                self.train_frac, self.val_frac
            ));
        }
        Ok(())
    }
}

/// Ground-truth parameters, kept for diagnostics only; nothing downstream
/// reads them.
#[derive(Debug, Clone)]
pub struct WorldDiagnostics {
    /// The planted map, `d x d_h` row-major.
    pub planted_map: Vec<f64>,
    pub topic_count: usize,
}

#[derive(Debug, Clone)]
pub struct SyntheticWorld {
    pub config: WorldConfig,
    pub corpus: Corpus,
    pub traces: Vec<Trace>,
    pub diagnostics: WorldDiagnostics,
}

fn standard_normal_vec(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.sample(StandardNormal)).collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let n = norm(&v);
    for x in &mut v {
        *x /= n;
    }
    v
}

fn random_unit(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    loop {
        let v = standard_normal_vec(rng, len);
        if norm(&v) > 1e-9 {
            return normalize(v);
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// A unit vector at exactly the requested cosine from unit vector `y`.
fn unit_at_cosine(rng: &mut ChaCha8Rng, y: &[f64], cosine: f64) -> Vec<f64> {
    let w = loop {
        let g = standard_normal_vec(rng, y.len());
        let proj = dot(&g, y);
        let mut w: Vec<f64> = g.iter().zip(y).map(|(gi, yi)| gi - proj * yi).collect();
        let n = norm(&w);
        if n > 1e-9 {
            for x in &mut w {
                *x /= n;
            }
            break w;
        }
    };
    let sine = (1.0 - cosine * cosine).max(0.0).sqrt();
    y.iter()
        .zip(&w)
        .map(|(yi, wi)| cosine * yi + sine * wi)
        .collect()
}

fn apply_map(g_map: &[f64], d: usize, d_h: usize, x: &[f64]) -> Vec<f64> {
    (0..d)
        .map(|row| dot(&g_map[row * d_h..(row + 1) * d_h], x))
        .collect()
}

pub fn generate_world(config: &WorldConfig) -> Result<SyntheticWorld, SynthError> {
    config.validate()?;
    let WorldConfig { d_h, d, .. } = *config;

    // Planted map G, entries N(0, 1/d_h) so unit inputs map to O(1) outputs.
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "planted-map", 0));
    let scale = 1.0 / (d_h as f64).sqrt();
    let planted_map: Vec<f64> = standard_normal_vec(&mut rng, d * d_h)
        .into_iter()
        .map(|x| x * scale)
        .collect();

    // Topic atlas shared by conversations.
    let topic_count = (config.num_conversations / CONVERSATIONS_PER_TOPIC).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "topic-atlas", 0));
    let topics: Vec<Vec<f64>> = (0..topic_count).map(|_| random_unit(&mut rng, d_h)).collect();

    // Conversation-level split assignment.
    let c = config.num_conversations;
    let mut order: Vec<usize> = (0..c).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "split", 0));
    for i in (1..c).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let n_train = ((config.train_frac * c as f64).round() as usize).clamp(1, c - 1);
    let n_val = ((config.val_frac * c as f64).round() as usize).min(c - n_train - 1);
    if n_train + n_val >= c {
        return Err(SynthError::Infeasible(format!(
            "split leaves no test conversations (train {n_train}, val {n_val}, total {c})"
        )));
    }
    let mut splits = vec![Split::Test; c];
    for &conv in &order[..n_train] {
        splits[conv] = Split::Train;
    }
    for &conv in &order[n_train..n_train + n_val] {
        splits[conv] = Split::Val;
    }

    let mut traces = Vec::new();
    let mut queries: Vec<QueryRecord> = Vec::new();
    let mut doc_embeddings: Vec<f64> = Vec::new();
    let mut doc_count = 0usize;
    let push_doc = |embeddings: &mut Vec<f64>, count: &mut usize, doc: Vec<f64>| -> u32 {
        debug_assert!((norm(&doc) - 1.0).abs() < 1e-6);
        embeddings.extend_from_slice(&doc);
        let idx = *count as u32;
        *count += 1;
        idx
    };

    for conv in 0..c {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "conversation", conv as u64));
        let conversation_id = format!("c{conv:04}");
        let topic = &topics[conv % topic_count];
        let jitter = standard_normal_vec(&mut rng, d_h);
        let latent: Vec<f64> = normalize(
            topic
                .iter()
                .zip(&jitter)
                .map(|(t, j)| t + TOPIC_JITTER / (d_h as f64).sqrt() * j)
                .collect(),
        );
        let wave_dir = random_unit(&mut rng, d_h);
        let trigger_count = rng.random_range(config.triggers_min..=config.triggers_max);

        for turn in 0..trigger_count {
            let trigger_id = format!("{conversation_id}-t{:02}", turn + 1);
            let n = rng.random_range(config.tokens_min..=config.tokens_max);
            let drift = standard_normal_vec(&mut rng, d_h);
            let drift_scale = config.trigger_drift / (d_h as f64).sqrt();

            let mut hidden = vec![0.0f32; n * d_h];
            for i in 0..n {
                let noise = standard_normal_vec(&mut rng, d_h);
                let wave = POSITION_WAVE
                    * (2.0 * std::f64::consts::PI * (i + 1) as f64 / (n + 1) as f64).sin();
                for j in 0..d_h {
                    let v = latent[j]
                        + drift_scale * drift[j]
                        + TOKEN_NOISE / (d_h as f64).sqrt() * noise[j]
                        + wave * wave_dir[j];
                    hidden[i * d_h + j] = v as f32;
                }
            }

            // Teacher sees exactly what lands in the trace: the float32
            // hidden states, widened back.
            let mut mean = vec![0.0f64; d_h];
            for i in 0..n {
                for j in 0..d_h {
                    mean[j] += f64::from(hidden[i * d_h + j]);
                }
            }
            for m in &mut mean {
                *m /= n as f64;
            }
            let clean = normalize(apply_map(&planted_map, d, d_h, &mean));
            let teacher = if config.noise > 0.0 {
                let z = standard_normal_vec(&mut rng, d);
                normalize(
                    clean
                        .iter()
                        .zip(&z)
                        .map(|(c, zi)| c + config.noise / (d as f64).sqrt() * zi)
                        .collect(),
                )
            } else {
                clean
            };

            // Relevant documents at controlled cosine from the teacher:
            // exactly 1 at sigma = 0, otherwise in the [1 - sigma, 1] band.
            let rel_count = rng.random_range(1..=config.relevant_per_query);
            let mut relevant = Vec::with_capacity(rel_count);
            for _ in 0..rel_count {
                let cosine = 1.0 - config.noise * rng.random_range(0.0..1.0);
                let doc = unit_at_cosine(&mut rng, &teacher, cosine);
                relevant.push(push_doc(&mut doc_embeddings, &mut doc_count, doc));
            }

            queries.push(QueryRecord {
                trigger_id: trigger_id.clone(),
                conversation_id: conversation_id.clone(),
                turn: (turn + 1) as u32,
                split: splits[conv],
                relevant,
            });
            traces.push(Trace {
                query_text: format!("synthetic rewritten query for {trigger_id}"),
                trigger_id,
                conversation_id: conversation_id.clone(),
                n,
                d_h,
                hidden,
                teacher: Some(teacher),
            });
        }
    }

    if doc_count + 1 > config.corpus_size {
        return Err(SynthError::Infeasible(format!(
            "planted {doc_count} relevant docs but corpus_size is {}; loosen \
             relevant_per_query or shrink the trigger count",
            config.corpus_size
        )));
    }

    // Distractors: a correlated share hugs random topic directions in
    // embedding space, the rest is uniform on the sphere.
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "distractors", 0));
    let distractor_count = config.corpus_size - doc_count;
    let correlated = (config.distractor_correlation * distractor_count as f64).round() as usize;
    let topic_embs: Vec<Vec<f64>> = topics
        .iter()
        .map(|t| normalize(apply_map(&planted_map, d, d_h, t)))
        .collect();
    for i in 0..distractor_count {
        let doc = if i < correlated {
            let anchor = &topic_embs[rng.random_range(0..topic_count)];
            let cosine = rng.random_range(DISTRACTOR_COS.0..DISTRACTOR_COS.1);
            unit_at_cosine(&mut rng, anchor, cosine)
        } else {
            random_unit(&mut rng, d)
        };
        push_doc(&mut doc_embeddings, &mut doc_count, doc);
    }

    let doc_ids = (0..doc_count).map(|i| format!("doc-{i:06}")).collect();
    Ok(SyntheticWorld {
        config: config.clone(),
        corpus: Corpus {
            d,
            doc_ids,
            embeddings: doc_embeddings,
            queries,
        },
        traces,
        diagnostics: WorldDiagnostics {
            planted_map,
            topic_count,
        },
    })
}

/// Retrieval run using the stored teacher embeddings directly — the
/// synthetic analogue of the generate-then-encode baseline.
pub fn teacher_baseline_run(
    corpus: &Corpus,
    traces: &[Trace],
    split: Split,
    k: usize,
) -> Result<EvalRun, SynthError> {
    let by_id: std::collections::HashMap<&str, &Trace> =
        traces.iter().map(|t| (t.trigger_id.as_str(), t)).collect();
    let mut items = Vec::new();
    let mut missing = Vec::new();
    for q in corpus.queries_in(split) {
        match by_id.get(q.trigger_id.as_str()).and_then(|t| t.teacher.clone()) {
            Some(teacher) => items.push((q, teacher)),
            None => missing.push(q.trigger_id.clone()),
        }
    }
    if !missing.is_empty() {
        return Err(SynthError::MissingTeacher(missing));
    }
    Ok(eval::evaluate(corpus, &items, k)?)
}
