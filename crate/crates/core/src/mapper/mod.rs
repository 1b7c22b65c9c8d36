//! The projection head: a variable-length hidden-state sequence goes in, a
//! unit-norm embedding in the teacher's space comes out.
//!
//! Pipeline: input projection -> learnable positional embeddings -> pre-norm
//! transformer encoder layers (self-attention, then GELU feedforward, with
//! residual connections) -> final layer norm -> masked mean pooling ->
//! output projection -> L2 normalization.

pub mod io;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::AttentionParams;
use crate::tensor::{Graph, TensorError, TensorId};

/// Layer-norm epsilon used everywhere in the head.
pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum MapperError {
    #[error("invalid mapper config: {0}")]
    InvalidConfig(String),
    #[error("sequence length {n} exceeds max_positions {max}")]
    SequenceTooLong { n: usize, max: usize },
    #[error("hidden-state matrix has {len} values, expected {n} x {d_h}")]
    HiddenShape { len: usize, n: usize, d_h: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("parameter file {path}: {reason}")]
    Decode { path: String, reason: String },
    #[error("parameter file {path} was built for a different config: {field} is {found}, expected {expected}")]
    ConfigMismatch {
        path: String,
        field: &'static str,
        found: usize,
        expected: usize,
    },
    #[error("i/o on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// Architecture hyperparameters of the head.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapperConfig {
    /// LLM hidden dimension (input width).
    pub d_h: usize,
    /// Internal transformer dimension.
    pub d_m: usize,
    /// Target embedding dimension (output width).
    pub d: usize,
    /// Number of transformer encoder layers.
    pub layers: usize,
    /// Attention heads per layer.
    pub heads: usize,
    /// Feedforward inner dimension.
    pub ff_dim: usize,
    /// Longest supported sequence; longer inputs are rejected, not truncated.
    pub max_positions: usize,
    /// Seed for parameter initialization.
    pub seed: u64,
}

impl Default for MapperConfig {
    fn default() -> Self {
        Self {
            d_h: 4096,
            d_m: 1024,
            d: 1024,
            layers: 2,
            heads: 8,
            ff_dim: 4096,
            max_positions: 128,
            seed: 0,
        }
    }
}

impl MapperConfig {
    pub fn validate(&self) -> Result<(), MapperError> {
        if self.d_h == 0 || self.d_m == 0 || self.d == 0 || self.ff_dim == 0 {
            return Err(MapperError::InvalidConfig(
                "all dimensions must be at least 1".into(),
            ));
        }
        if self.layers == 0 {
            return Err(MapperError::InvalidConfig(
                "at least one encoder layer is required".into(),
            ));
        }
        if self.max_positions == 0 {
            return Err(MapperError::InvalidConfig(
                "max_positions must be at least 1".into(),
            ));
        }
        if self.heads == 0 || self.d_m % self.heads != 0 {
            return Err(MapperError::InvalidConfig(format!(
                "d_m {} must be divisible by heads {}",
                self.d_m, self.heads
            )));
        }
        Ok(())
    }

    /// Structural equality, ignoring the init seed.
    pub fn same_architecture(&self, other: &Self) -> bool {
        self.d_h == other.d_h
            && self.d_m == other.d_m
            && self.d == other.d
            && self.layers == other.layers
            && self.heads == other.heads
            && self.ff_dim == other.ff_dim
            && self.max_positions == other.max_positions
    }
}

/// One parameter tensor's identity in the flat declaration order.
#[derive(Debug, Clone)]
pub struct ParamSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    /// Whether AdamW applies weight decay (matrix weights only; biases,
    /// layer norms, and positional embeddings are excluded).
    pub decay: bool,
    /// Scaled-uniform init bound `1/sqrt(fan_in)`; `None` means zeros
    /// (biases, positional embeddings) or ones (layer-norm gains).
    init: Init,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    Uniform { fan_in: usize },
    Zeros,
    Ones,
}

/// Builds the flat parameter declaration order for a config. This order is
/// the contract for the file format, the optimizer state, and gradient
/// readback.
pub fn param_specs(config: &MapperConfig) -> Vec<ParamSpec> {
    let MapperConfig {
        d_h,
        d_m,
        d,
        layers,
        ff_dim,
        max_positions,
        ..
    } = *config;
    let mut specs = Vec::new();
    let mut push = |name: String, rows: usize, cols: usize, decay: bool, init: Init| {
        specs.push(ParamSpec {
            name,
            rows,
            cols,
            decay,
            init,
        });
    };

    push("w_in".into(), d_h, d_m, true, Init::Uniform { fan_in: d_h });
    push("b_in".into(), 1, d_m, false, Init::Zeros);
    push("pos_emb".into(), max_positions, d_m, false, Init::Zeros);
    for l in 0..layers {
        push(format!("layer{l}.ln_attn.gain"), 1, d_m, false, Init::Ones);
        push(format!("layer{l}.ln_attn.bias"), 1, d_m, false, Init::Zeros);
        for proj in ["q", "k", "v", "o"] {
            push(
                format!("layer{l}.attn.w_{proj}"),
                d_m,
                d_m,
                true,
                Init::Uniform { fan_in: d_m },
            );
            push(format!("layer{l}.attn.b_{proj}"), 1, d_m, false, Init::Zeros);
        }
        push(format!("layer{l}.ln_ff.gain"), 1, d_m, false, Init::Ones);
        push(format!("layer{l}.ln_ff.bias"), 1, d_m, false, Init::Zeros);
        push(
            format!("layer{l}.ff.w1"),
            d_m,
            ff_dim,
            true,
            Init::Uniform { fan_in: d_m },
        );
        push(format!("layer{l}.ff.b1"), 1, ff_dim, false, Init::Zeros);
        push(
            format!("layer{l}.ff.w2"),
            ff_dim,
            d_m,
            true,
            Init::Uniform { fan_in: ff_dim },
        );
        push(format!("layer{l}.ff.b2"), 1, d_m, false, Init::Zeros);
    }
    push("final_norm.gain".into(), 1, d_m, false, Init::Ones);
    push("final_norm.bias".into(), 1, d_m, false, Init::Zeros);
    push("w_out".into(), d_m, d, true, Init::Uniform { fan_in: d_m });
    push("b_out".into(), 1, d, false, Init::Zeros);
    specs
}

/// Total learnable parameter count for a config.
pub fn param_count(config: &MapperConfig) -> usize {
    param_specs(config).iter().map(ParamSpec::len).sum()
}

/// All learnable weights of the projection head, stored as flat blocks in
/// declaration order (see [`param_specs`]).
#[derive(Debug, Clone, PartialEq)]
pub struct MapperParams {
    pub config: MapperConfig,
    pub blocks: Vec<Vec<f64>>,
}

impl MapperParams {
    /// Deterministic initialization: matrices are scaled-uniform in
    /// `[-1/sqrt(fan_in), 1/sqrt(fan_in))`, biases and positional
    /// embeddings are zeros, layer-norm gains are ones.
    pub fn init(config: &MapperConfig) -> Result<Self, MapperError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let blocks = param_specs(config)
            .iter()
            .map(|spec| match spec.init {
                Init::Uniform { fan_in } => {
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    (0..spec.len())
                        .map(|_| rng.random_range(-bound..bound))
                        .collect()
                }
                Init::Zeros => vec![0.0; spec.len()],
                Init::Ones => vec![1.0; spec.len()],
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            blocks,
        })
    }

    pub fn param_count(&self) -> usize {
        self.blocks.iter().map(Vec::len).sum()
    }

    /// Inserts every parameter block as a graph leaf, in declaration order.
    pub fn insert_leaves(
        &self,
        g: &mut Graph,
        requires_grad: bool,
    ) -> Result<MapperLeaves, MapperError> {
        let specs = param_specs(&self.config);
        let flat: Vec<TensorId> = specs
            .iter()
            .zip(&self.blocks)
            .map(|(spec, block)| g.leaf(block.clone(), [spec.rows, spec.cols], requires_grad))
            .collect::<Result<_, _>>()?;
        Ok(MapperLeaves::from_flat(&self.config, flat))
    }
}

/// Graph-side handles to the head's parameters, grouped by role. `flat`
/// parallels [`param_specs`] for gradient readback.
pub struct MapperLeaves {
    pub flat: Vec<TensorId>,
    w_in: TensorId,
    b_in: TensorId,
    pos_emb: TensorId,
    layers: Vec<LayerLeaves>,
    final_gain: TensorId,
    final_bias: TensorId,
    w_out: TensorId,
    b_out: TensorId,
}

struct LayerLeaves {
    ln_attn_gain: TensorId,
    ln_attn_bias: TensorId,
    attn: AttentionParams,
    ln_ff_gain: TensorId,
    ln_ff_bias: TensorId,
    w_ff1: TensorId,
    b_ff1: TensorId,
    w_ff2: TensorId,
    b_ff2: TensorId,
}

impl MapperLeaves {
    fn from_flat(config: &MapperConfig, flat: Vec<TensorId>) -> Self {
        let mut it = flat.iter().copied();
        let mut next = || it.next().expect("flat params match spec count");
        let w_in = next();
        let b_in = next();
        let pos_emb = next();
        let layers = (0..config.layers)
            .map(|_| LayerLeaves {
                ln_attn_gain: next(),
                ln_attn_bias: next(),
                attn: AttentionParams {
                    w_q: next(),
                    b_q: next(),
                    w_k: next(),
                    b_k: next(),
                    w_v: next(),
                    b_v: next(),
                    w_o: next(),
                    b_o: next(),
                },
                ln_ff_gain: next(),
                ln_ff_bias: next(),
                w_ff1: next(),
                b_ff1: next(),
                w_ff2: next(),
                b_ff2: next(),
            })
            .collect();
        let final_gain = next();
        let final_bias = next();
        let w_out = next();
        let b_out = next();
        Self {
            flat,
            w_in,
            b_in,
            pos_emb,
            layers,
            final_gain,
            final_bias,
            w_out,
            b_out,
        }
    }
}

/// Runs the head forward inside an existing graph, so that a loss built on
/// the returned embedding backpropagates into the parameter leaves.
pub fn forward_on_graph(
    g: &mut Graph,
    leaves: &MapperLeaves,
    config: &MapperConfig,
    hidden: &[f64],
    mask: &[bool],
) -> Result<TensorId, MapperError> {
    let n = mask.len();
    if n == 0 || !mask.iter().any(|&m| m) {
        return Err(TensorError::EmptySequence.into());
    }
    if n > config.max_positions {
        return Err(MapperError::SequenceTooLong {
            n,
            max: config.max_positions,
        });
    }
    if hidden.len() != n * config.d_h {
        return Err(MapperError::HiddenShape {
            len: hidden.len(),
            n,
            d_h: config.d_h,
        });
    }

    let h = g.constant(hidden.to_vec(), [n, config.d_h])?;
    let mut x = g.matmul(h, leaves.w_in)?;
    x = g.add_row(x, leaves.b_in)?;
    x = g.add_row_slice(x, leaves.pos_emb)?;

    for layer in &leaves.layers {
        let normed = g.layer_norm(x, layer.ln_attn_gain, layer.ln_attn_bias, LN_EPS)?;
        let attn = g.multi_head_self_attention(normed, mask, &layer.attn, config.heads)?;
        x = g.add(x, attn)?;

        let normed = g.layer_norm(x, layer.ln_ff_gain, layer.ln_ff_bias, LN_EPS)?;
        let ff = g.matmul(normed, layer.w_ff1)?;
        let ff = g.add_row(ff, layer.b_ff1)?;
        let ff = g.gelu(ff);
        let ff = g.matmul(ff, layer.w_ff2)?;
        let ff = g.add_row(ff, layer.b_ff2)?;
        x = g.add(x, ff)?;
    }

    x = g.layer_norm(x, leaves.final_gain, leaves.final_bias, LN_EPS)?;
    let pooled = g.masked_mean_pool(x, mask)?;
    let out = g.matmul(pooled, leaves.w_out)?;
    let out = g.add_row(out, leaves.b_out)?;
    Ok(g.l2_normalize(out)?)
}

/// Convenience forward pass: builds a throwaway graph and returns the
/// unit-norm embedding.
pub fn forward(
    params: &MapperParams,
    hidden: &[f64],
    mask: &[bool],
) -> Result<Vec<f64>, MapperError> {
    let mut g = Graph::new();
    let leaves = params.insert_leaves(&mut g, false)?;
    let out = forward_on_graph(&mut g, &leaves, &params.config, hidden, mask)?;
    Ok(g.data(out).to_vec())
}
