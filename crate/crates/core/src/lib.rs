//! Maps LLM hidden-state sequences directly into a frozen teacher embedding
//! space: a small transformer projection head trained by alignment,
//! contrastive, and rank-distillation losses, plus the retrieval-evaluation
//! and significance-testing harness used to compare it against the teacher.
//!
//! Subsystems:
//! - [`tensor`]: dense tensors with reverse-mode autodiff (f64 throughout).
//! - [`mapper`]: the projection head (input projection, transformer encoder,
//!   masked mean pooling, output projection, L2 normalization).
//! - [`losses`]: the three distillation objectives and their combination.
//! - [`optim`] / [`trainer`]: AdamW, cosine schedule, gradient clipping,
//!   top-K candidate precomputation, and the full training loop.
//! - [`trace`]: the on-disk trace cache (`.htrc` containers).
//! - [`eval`]: retrieval metrics, bootstrap CIs, McNemar, agreement analysis.
//! - [`synth`]: the synthetic world generator used as a desk-scale teacher.

pub mod binfmt;
pub mod eval;
pub mod losses;
pub mod mapper;
pub mod optim;
pub mod synth;
pub mod tensor;
pub mod trace;
pub mod trainer;
