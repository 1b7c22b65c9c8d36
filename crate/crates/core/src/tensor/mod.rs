//! Minimal dense-tensor engine with reverse-mode automatic differentiation.
//!
//! Tensors live in a [`Graph`] (a Wengert tape): every operation appends a
//! node holding its output data plus the recorded inputs needed for the
//! backward pass. The tape is already in topological order, so
//! [`Graph::backward`] is a single reverse sweep. A graph is built eagerly
//! per forward pass and dropped after backward.
//!
//! Everything is rank-2 and row-major: vectors are `[1, d]`, scalars are
//! `[1, 1]`. All arithmetic is in `f64` so finite-difference gradient
//! checks are meaningful.

mod ops;

pub mod grad_check;

pub use grad_check::{analytic_grads, grad_check, max_rel_err, numeric_grads, InputSpec, ScalarFn};
pub use ops::{AttentionParams, MASK_LOGIT};

use thiserror::Error;

/// Handle to a tensor inside one [`Graph`]. Never valid across graphs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

#[derive(Debug, Error, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: [{lhs_rows}x{lhs_cols}] vs [{rhs_rows}x{rhs_cols}]")]
    ShapeMismatch {
        op: &'static str,
        lhs_rows: usize,
        lhs_cols: usize,
        rhs_rows: usize,
        rhs_cols: usize,
    },
    #[error("{op}: data length {len} does not match shape [{rows}x{cols}]")]
    DataLength {
        op: &'static str,
        len: usize,
        rows: usize,
        cols: usize,
    },
    #[error("backward root must be a scalar, got [{rows}x{cols}]")]
    NonScalarRoot { rows: usize, cols: usize },
    #[error("mask excludes every position")]
    EmptySequence,
    #[error("mask length {mask} does not match {rows} rows")]
    MaskLength { mask: usize, rows: usize },
    #[error("cannot L2-normalize a zero vector")]
    ZeroNorm,
    #[error("model dim {d_model} is not divisible by {heads} heads")]
    HeadsIndivisible { d_model: usize, heads: usize },
    #[error("{op}: index {index} out of range {len}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("{op} expects a row vector, got [{rows}x{cols}]")]
    NotRowVector {
        op: &'static str,
        rows: usize,
        cols: usize,
    },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
}

/// One recorded tensor: output data plus the operation that produced it.
#[derive(Debug, Clone)]
pub struct Tensor {
    pub data: Vec<f64>,
    pub shape: [usize; 2],
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
    pub(crate) op: Op,
}

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    Matmul { a: TensorId, b: TensorId },
    Add { a: TensorId, b: TensorId },
    Sub { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    /// `[n,d] + [1,d]`, the row broadcast used for biases and key masks.
    AddRow { x: TensorId, row: TensorId },
    /// `x + table[0..n, :]` — adds a row-slice of an embedding table.
    AddRowSlice { x: TensorId, table: TensorId },
    Scale { x: TensorId, c: f64 },
    /// Elementwise `a*x + b`.
    Affine { x: TensorId, a: f64 },
    Gelu { x: TensorId },
    LayerNorm { x: TensorId, gain: TensorId, bias: TensorId, eps: f64 },
    SoftmaxRows { x: TensorId },
    LogSoftmax { x: TensorId },
    LogSumExp { x: TensorId },
    Pick { x: TensorId, index: usize },
    DotConst { x: TensorId, w: Vec<f64> },
    MaskedMeanPool { x: TensorId, mask: Vec<bool> },
    L2Normalize { x: TensorId },
    SliceCols { x: TensorId, from: usize, to: usize },
    ConcatCols { xs: Vec<TensorId> },
    Transpose { x: TensorId },
    SumScalars { xs: Vec<TensorId> },
}

/// The compute graph: a tape of tensors in execution (= topological) order.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Tensor>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Inserts a leaf tensor. `requires_grad` leaves receive gradients on
    /// [`Graph::backward`].
    pub fn leaf(
        &mut self,
        data: Vec<f64>,
        shape: [usize; 2],
        requires_grad: bool,
    ) -> Result<TensorId, TensorError> {
        if data.len() != shape[0] * shape[1] {
            return Err(TensorError::DataLength {
                op: "leaf",
                len: data.len(),
                rows: shape[0],
                cols: shape[1],
            });
        }
        Ok(self.push(data, shape, requires_grad, Op::Leaf))
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, data: Vec<f64>, shape: [usize; 2]) -> Result<TensorId, TensorError> {
        self.leaf(data, shape, false)
    }

    pub fn scalar_constant(&mut self, v: f64) -> TensorId {
        self.push(vec![v], [1, 1], false, Op::Leaf)
    }

    pub fn tensor(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0]
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: TensorId) -> [usize; 2] {
        self.nodes[id.0].shape
    }

    /// Scalar value of a `[1,1]` tensor.
    pub fn value(&self, id: TensorId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].shape, [1, 1]);
        self.nodes[id.0].data[0]
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub(crate) fn push(
        &mut self,
        data: Vec<f64>,
        shape: [usize; 2],
        requires_grad: bool,
        op: Op,
    ) -> TensorId {
        self.nodes.push(Tensor {
            data,
            shape,
            requires_grad,
            grad: None,
            op,
        });
        TensorId(self.nodes.len() - 1)
    }

    pub(crate) fn requires(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Reverse-mode accumulation from a scalar root. Visits the tape in
    /// reverse order exactly once; gradients from multiple consumers sum.
    /// Afterwards every tensor with `requires_grad` has a populated `grad`
    /// (zeros if the root does not depend on it).
    pub fn backward(&mut self, root: TensorId) -> Result<(), TensorError> {
        let shape = self.nodes[root.0].shape;
        if shape != [1, 1] {
            return Err(TensorError::NonScalarRoot {
                rows: shape[0],
                cols: shape[1],
            });
        }

        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[root.0] = Some(vec![1.0]);

        for i in (0..=root.0).rev() {
            let Some(gout) = grads[i].take() else {
                continue;
            };
            if self.nodes[i].requires_grad {
                self.propagate(i, &gout, &mut grads);
                self.nodes[i].grad = Some(gout);
            }
        }

        for node in &mut self.nodes {
            if node.requires_grad && node.grad.is_none() {
                node.grad = Some(vec![0.0; node.data.len()]);
            }
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], id: TensorId, delta: &[f64]) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        let slot = grads[id.0].get_or_insert_with(|| vec![0.0; self.nodes[id.0].data.len()]);
        for (g, d) in slot.iter_mut().zip(delta) {
            *g += d;
        }
    }

    /// Dispatches the vector-Jacobian product of node `i` into its inputs.
    fn propagate(&self, i: usize, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let [m, k] = self.nodes[a.0].shape;
                let n = self.nodes[b.0].shape[1];
                if self.requires(*a) {
                    // dA = G · Bᵀ
                    let bd = &self.nodes[b.0].data;
                    let mut da = vec![0.0; m * k];
                    for r in 0..m {
                        for c in 0..n {
                            let g = gout[r * n + c];
                            if g == 0.0 {
                                continue;
                            }
                            let da_row = &mut da[r * k..(r + 1) * k];
                            for (p, slot) in da_row.iter_mut().enumerate() {
                                *slot += g * bd[p * n + c];
                            }
                        }
                    }
                    self.accumulate(grads, *a, &da);
                }
                if self.requires(*b) {
                    // dB = Aᵀ · G
                    let ad = &self.nodes[a.0].data;
                    let mut db = vec![0.0; k * n];
                    for r in 0..m {
                        let g_row = &gout[r * n..(r + 1) * n];
                        let a_row = &ad[r * k..(r + 1) * k];
                        for (p, &av) in a_row.iter().enumerate() {
                            if av == 0.0 {
                                continue;
                            }
                            let db_row = &mut db[p * n..(p + 1) * n];
                            for (slot, &g) in db_row.iter_mut().zip(g_row) {
                                *slot += av * g;
                            }
                        }
                    }
                    self.accumulate(grads, *b, &db);
                }
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, gout);
                self.accumulate(grads, *b, gout);
            }
            Op::Sub { a, b } => {
                self.accumulate(grads, *a, gout);
                if self.requires(*b) {
                    let neg: Vec<f64> = gout.iter().map(|g| -g).collect();
                    self.accumulate(grads, *b, &neg);
                }
            }
            Op::Mul { a, b } => {
                if self.requires(*a) {
                    let bd = &self.nodes[b.0].data;
                    let da: Vec<f64> = gout.iter().zip(bd).map(|(g, v)| g * v).collect();
                    self.accumulate(grads, *a, &da);
                }
                if self.requires(*b) {
                    let ad = &self.nodes[a.0].data;
                    let db: Vec<f64> = gout.iter().zip(ad).map(|(g, v)| g * v).collect();
                    self.accumulate(grads, *b, &db);
                }
            }
            Op::AddRow { x, row } => {
                self.accumulate(grads, *x, gout);
                if self.requires(*row) {
                    let d = self.nodes[row.0].shape[1];
                    let mut drow = vec![0.0; d];
                    for chunk in gout.chunks_exact(d) {
                        for (slot, &g) in drow.iter_mut().zip(chunk) {
                            *slot += g;
                        }
                    }
                    self.accumulate(grads, *row, &drow);
                }
            }
            Op::AddRowSlice { x, table } => {
                self.accumulate(grads, *x, gout);
                if self.requires(*table) {
                    let mut dt = vec![0.0; self.nodes[table.0].data.len()];
                    dt[..gout.len()].copy_from_slice(gout);
                    self.accumulate(grads, *table, &dt);
                }
            }
            Op::Scale { x, c } => {
                if self.requires(*x) {
                    let dx: Vec<f64> = gout.iter().map(|g| g * c).collect();
                    self.accumulate(grads, *x, &dx);
                }
            }
            Op::Affine { x, a } => {
                if self.requires(*x) {
                    let dx: Vec<f64> = gout.iter().map(|g| g * a).collect();
                    self.accumulate(grads, *x, &dx);
                }
            }
            Op::Gelu { x } => {
                if self.requires(*x) {
                    let xd = &self.nodes[x.0].data;
                    let dx: Vec<f64> = gout
                        .iter()
                        .zip(xd)
                        .map(|(g, &v)| g * ops::gelu_derivative(v))
                        .collect();
                    self.accumulate(grads, *x, &dx);
                }
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                ops::layer_norm_backward(self, gout, *x, *gain, *bias, *eps, grads);
            }
            Op::SoftmaxRows { x } => {
                if self.requires(*x) {
                    let y = &node.data;
                    let cols = node.shape[1];
                    let mut dx = vec![0.0; y.len()];
                    for r in 0..node.shape[0] {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &gout[r * cols..(r + 1) * cols];
                        let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                        for c in 0..cols {
                            dx[r * cols + c] = yr[c] * (gr[c] - dot);
                        }
                    }
                    self.accumulate(grads, *x, &dx);
                }
            }
            Op::LogSoftmax { x } => {
                if self.requires(*x) {
                    let y = &node.data; // log-probabilities
                    let gsum: f64 = gout.iter().sum();
                    let dx: Vec<f64> = y
                        .iter()
                        .zip(gout)
                        .map(|(ly, g)| g - ly.exp() * gsum)
                        .collect();
                    self.accumulate(grads, *x, &dx);
                }
            }
            Op::LogSumExp { x } => {
                if self.requires(*x) {
                    let lse = node.data[0];
                    let xd = &self.nodes[x.0].data;
                    let g = gout[0];
                    let dx: Vec<f64> = xd.iter().map(|v| g * (v - lse).exp()).collect();
                    self.accumulate(grads, *x, &dx);
                }
            }
            Op::Pick { x, index } => {
                if self.requires(*x) {
                    let mut dx = vec![0.0; self.nodes[x.0].data.len()];
                    dx[*index] = gout[0];
                    self.accumulate(grads, *x, &dx);
                }
            }
            Op::DotConst { x, w } => {
                if self.requires(*x) {
                    let g = gout[0];
                    let dx: Vec<f64> = w.iter().map(|wv| g * wv).collect();
                    self.accumulate(grads, *x, &dx);
                }
            }
            Op::MaskedMeanPool { x, mask } => {
                if self.requires(*x) {
                    let d = self.nodes[x.0].shape[1];
                    let count = mask.iter().filter(|&&m| m).count() as f64;
                    let mut dx = vec![0.0; self.nodes[x.0].data.len()];
                    for (r, &valid) in mask.iter().enumerate() {
                        if valid {
                            for c in 0..d {
                                dx[r * d + c] = gout[c] / count;
                            }
                        }
                    }
                    self.accumulate(grads, *x, &dx);
                }
            }
            Op::L2Normalize { x } => {
                if self.requires(*x) {
                    let y = &node.data;
                    let xd = &self.nodes[x.0].data;
                    let norm = xd.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let dot: f64 = y.iter().zip(gout).map(|(y, g)| y * g).sum();
                    let dx: Vec<f64> = gout
                        .iter()
                        .zip(y)
                        .map(|(g, yv)| (g - yv * dot) / norm)
                        .collect();
                    self.accumulate(grads, *x, &dx);
                }
            }
            Op::SliceCols { x, from, to } => {
                if self.requires(*x) {
                    let [rows, cols] = self.nodes[x.0].shape;
                    let width = to - from;
                    let mut dx = vec![0.0; rows * cols];
                    for r in 0..rows {
                        dx[r * cols + from..r * cols + to]
                            .copy_from_slice(&gout[r * width..(r + 1) * width]);
                    }
                    self.accumulate(grads, *x, &dx);
                }
            }
            Op::ConcatCols { xs } => {
                let rows = node.shape[0];
                let total = node.shape[1];
                let mut offset = 0;
                for x in xs {
                    let w = self.nodes[x.0].shape[1];
                    if self.requires(*x) {
                        let mut dx = vec![0.0; rows * w];
                        for r in 0..rows {
                            dx[r * w..(r + 1) * w]
                                .copy_from_slice(&gout[r * total + offset..r * total + offset + w]);
                        }
                        self.accumulate(grads, *x, &dx);
                    }
                    offset += w;
                }
            }
            Op::Transpose { x } => {
                if self.requires(*x) {
                    let [rows, cols] = self.nodes[x.0].shape;
                    let mut dx = vec![0.0; rows * cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            dx[r * cols + c] = gout[c * rows + r];
                        }
                    }
                    self.accumulate(grads, *x, &dx);
                }
            }
            Op::SumScalars { xs } => {
                for x in xs {
                    self.accumulate(grads, *x, gout);
                }
            }
        }
    }
}
