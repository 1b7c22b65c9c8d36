//! Forward implementations of the graph operations.

use super::{Graph, Op, TensorError, TensorId};

/// Additive logit penalty for masked attention keys. Large enough that the
/// contribution underflows to exactly zero after max-subtracted softmax.
pub const MASK_LOGIT: f64 = -1e9;

impl Graph {
    /// Standard matrix product `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let [m, k] = self.shape(a);
        let [kb, n] = self.shape(b);
        if k != kb {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs_rows: m,
                lhs_cols: k,
                rhs_rows: kb,
                rhs_cols: n,
            });
        }
        let ad = self.data(a);
        let bd = self.data(b);
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let a_row = &ad[r * k..(r + 1) * k];
            let o_row = &mut out[r * n..(r + 1) * n];
            for (p, &av) in a_row.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let b_row = &bd[p * n..(p + 1) * n];
                for (slot, &bv) in o_row.iter_mut().zip(b_row) {
                    *slot += av * bv;
                }
            }
        }
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(out, [m, n], rg, Op::Matmul { a, b }))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.zip("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    fn zip(
        &mut self,
        op: &'static str,
        a: TensorId,
        b: TensorId,
        f: impl Fn(f64, f64) -> f64,
        record: Op,
    ) -> Result<TensorId, TensorError> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs_rows: sa[0],
                lhs_cols: sa[1],
                rhs_rows: sb[0],
                rhs_cols: sb[1],
            });
        }
        let out: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(out, sa, rg, record))
    }

    /// Broadcast add of a `[1,d]` row onto every row of `[n,d]`.
    pub fn add_row(&mut self, x: TensorId, row: TensorId) -> Result<TensorId, TensorError> {
        let [n, d] = self.shape(x);
        let sr = self.shape(row);
        if sr[0] != 1 || sr[1] != d {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                lhs_rows: n,
                lhs_cols: d,
                rhs_rows: sr[0],
                rhs_cols: sr[1],
            });
        }
        let rd = self.data(row).to_vec();
        let out: Vec<f64> = self
            .data(x)
            .chunks_exact(d)
            .flat_map(|chunk| chunk.iter().zip(&rd).map(|(&v, &r)| v + r))
            .collect();
        let rg = self.requires(x) || self.requires(row);
        Ok(self.push(out, [n, d], rg, Op::AddRow { x, row }))
    }

    /// `x[n,d] + table[0..n, :]` — used to add positional embeddings.
    pub fn add_row_slice(&mut self, x: TensorId, table: TensorId) -> Result<TensorId, TensorError> {
        let [n, d] = self.shape(x);
        let [rows, dt] = self.shape(table);
        if dt != d || rows < n {
            return Err(TensorError::ShapeMismatch {
                op: "add_row_slice",
                lhs_rows: n,
                lhs_cols: d,
                rhs_rows: rows,
                rhs_cols: dt,
            });
        }
        let out: Vec<f64> = self
            .data(x)
            .iter()
            .zip(self.data(table))
            .map(|(&v, &t)| v + t)
            .collect();
        let rg = self.requires(x) || self.requires(table);
        Ok(self.push(out, [n, d], rg, Op::AddRowSlice { x, table }))
    }

    pub fn scale(&mut self, x: TensorId, c: f64) -> TensorId {
        let shape = self.shape(x);
        let out: Vec<f64> = self.data(x).iter().map(|v| v * c).collect();
        let rg = self.requires(x);
        self.push(out, shape, rg, Op::Scale { x, c })
    }

    /// Elementwise `a*x + b`.
    pub fn affine(&mut self, x: TensorId, a: f64, b: f64) -> TensorId {
        let shape = self.shape(x);
        let out: Vec<f64> = self.data(x).iter().map(|v| a * v + b).collect();
        let rg = self.requires(x);
        self.push(out, shape, rg, Op::Affine { x, a })
    }

    /// GELU activation (tanh approximation).
    pub fn gelu(&mut self, x: TensorId) -> TensorId {
        let shape = self.shape(x);
        let out: Vec<f64> = self.data(x).iter().map(|&v| gelu_value(v)).collect();
        let rg = self.requires(x);
        self.push(out, shape, rg, Op::Gelu { x })
    }

    /// Row-wise layer normalization with affine gain/bias.
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        eps: f64,
    ) -> Result<TensorId, TensorError> {
        let [n, d] = self.shape(x);
        for (name, t) in [("layer_norm gain", gain), ("layer_norm bias", bias)] {
            let s = self.shape(t);
            if s != [1, d] {
                let _ = name;
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs_rows: n,
                    lhs_cols: d,
                    rhs_rows: s[0],
                    rhs_cols: s[1],
                });
            }
        }
        let xd = self.data(x);
        let g = self.data(gain).to_vec();
        let b = self.data(bias).to_vec();
        let mut out = vec![0.0; n * d];
        for r in 0..n {
            let row = &xd[r * d..(r + 1) * d];
            let (mean, inv_std) = row_stats(row, eps);
            for c in 0..d {
                out[r * d + c] = (row[c] - mean) * inv_std * g[c] + b[c];
            }
        }
        let rg = self.requires(x) || self.requires(gain) || self.requires(bias);
        Ok(self.push(out, [n, d], rg, Op::LayerNorm { x, gain, bias, eps }))
    }

    /// Numerically stable softmax along each row.
    pub fn softmax_rows(&mut self, x: TensorId) -> TensorId {
        let [n, d] = self.shape(x);
        let xd = self.data(x);
        let mut out = vec![0.0; n * d];
        for r in 0..n {
            let row = &xd[r * d..(r + 1) * d];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for c in 0..d {
                let e = (row[c] - max).exp();
                out[r * d + c] = e;
                sum += e;
            }
            for v in &mut out[r * d..(r + 1) * d] {
                *v /= sum;
            }
        }
        let rg = self.requires(x);
        self.push(out, [n, d], rg, Op::SoftmaxRows { x })
    }

    /// Stable log-softmax of a row vector.
    pub fn log_softmax(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        let [n, d] = self.shape(x);
        if n != 1 {
            return Err(TensorError::NotRowVector {
                op: "log_softmax",
                rows: n,
                cols: d,
            });
        }
        let lse = log_sum_exp(self.data(x));
        let out: Vec<f64> = self.data(x).iter().map(|v| v - lse).collect();
        let rg = self.requires(x);
        Ok(self.push(out, [1, d], rg, Op::LogSoftmax { x }))
    }

    /// Stable log-sum-exp of a row vector, yielding a scalar.
    pub fn logsumexp(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        let [n, d] = self.shape(x);
        if n != 1 {
            return Err(TensorError::NotRowVector {
                op: "logsumexp",
                rows: n,
                cols: d,
            });
        }
        let lse = log_sum_exp(self.data(x));
        let rg = self.requires(x);
        Ok(self.push(vec![lse], [1, 1], rg, Op::LogSumExp { x }))
    }

    /// Extracts one coordinate of a row vector as a scalar.
    pub fn pick(&mut self, x: TensorId, index: usize) -> Result<TensorId, TensorError> {
        let [n, d] = self.shape(x);
        if n != 1 {
            return Err(TensorError::NotRowVector {
                op: "pick",
                rows: n,
                cols: d,
            });
        }
        if index >= d {
            return Err(TensorError::IndexOutOfRange {
                op: "pick",
                index,
                len: d,
            });
        }
        let v = self.data(x)[index];
        let rg = self.requires(x);
        Ok(self.push(vec![v], [1, 1], rg, Op::Pick { x, index }))
    }

    /// Dot product of a row vector with a constant weight vector.
    pub fn dot_const(&mut self, x: TensorId, w: &[f64]) -> Result<TensorId, TensorError> {
        let [n, d] = self.shape(x);
        if n != 1 {
            return Err(TensorError::NotRowVector {
                op: "dot_const",
                rows: n,
                cols: d,
            });
        }
        if w.len() != d {
            return Err(TensorError::ShapeMismatch {
                op: "dot_const",
                lhs_rows: 1,
                lhs_cols: d,
                rhs_rows: 1,
                rhs_cols: w.len(),
            });
        }
        let v: f64 = self.data(x).iter().zip(w).map(|(a, b)| a * b).sum();
        let rg = self.requires(x);
        Ok(self.push(vec![v], [1, 1], rg, Op::DotConst { x, w: w.to_vec() }))
    }

    /// Mean over rows at valid (unmasked) positions, yielding `[1,d]`.
    pub fn masked_mean_pool(
        &mut self,
        x: TensorId,
        mask: &[bool],
    ) -> Result<TensorId, TensorError> {
        let [n, d] = self.shape(x);
        if mask.len() != n {
            return Err(TensorError::MaskLength {
                mask: mask.len(),
                rows: n,
            });
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(TensorError::EmptySequence);
        }
        let xd = self.data(x);
        let mut out = vec![0.0; d];
        for (r, &valid) in mask.iter().enumerate() {
            if valid {
                for c in 0..d {
                    out[c] += xd[r * d + c];
                }
            }
        }
        for v in &mut out {
            *v /= count as f64;
        }
        let rg = self.requires(x);
        Ok(self.push(
            out,
            [1, d],
            rg,
            Op::MaskedMeanPool {
                x,
                mask: mask.to_vec(),
            },
        ))
    }

    /// Scales a row vector to unit L2 norm. A zero vector is an error, not
    /// a silent zero output.
    pub fn l2_normalize(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        let [n, d] = self.shape(x);
        if n != 1 {
            return Err(TensorError::NotRowVector {
                op: "l2_normalize",
                rows: n,
                cols: d,
            });
        }
        let norm = self.data(x).iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(TensorError::ZeroNorm);
        }
        let out: Vec<f64> = self.data(x).iter().map(|v| v / norm).collect();
        let rg = self.requires(x);
        Ok(self.push(out, [1, d], rg, Op::L2Normalize { x }))
    }

    pub fn slice_cols(
        &mut self,
        x: TensorId,
        from: usize,
        to: usize,
    ) -> Result<TensorId, TensorError> {
        let [rows, cols] = self.shape(x);
        if from >= to || to > cols {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_cols",
                index: to,
                len: cols,
            });
        }
        let xd = self.data(x);
        let width = to - from;
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            out.extend_from_slice(&xd[r * cols + from..r * cols + to]);
        }
        let rg = self.requires(x);
        Ok(self.push(out, [rows, width], rg, Op::SliceCols { x, from, to }))
    }

    pub fn concat_cols(&mut self, xs: &[TensorId]) -> Result<TensorId, TensorError> {
        let rows = self.shape(xs[0])[0];
        let mut total = 0;
        for &x in xs {
            let [r, c] = self.shape(x);
            if r != rows {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs_rows: rows,
                    lhs_cols: self.shape(xs[0])[1],
                    rhs_rows: r,
                    rhs_cols: c,
                });
            }
            total += c;
        }
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &x in xs {
                let c = self.shape(x)[1];
                out.extend_from_slice(&self.data(x)[r * c..(r + 1) * c]);
            }
        }
        let rg = xs.iter().any(|&x| self.requires(x));
        Ok(self.push(out, [rows, total], rg, Op::ConcatCols { xs: xs.to_vec() }))
    }

    pub fn transpose(&mut self, x: TensorId) -> TensorId {
        let [rows, cols] = self.shape(x);
        let xd = self.data(x);
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = xd[r * cols + c];
            }
        }
        let rg = self.requires(x);
        self.push(out, [cols, rows], rg, Op::Transpose { x })
    }

    /// Sum of scalar tensors.
    pub fn sum_scalars(&mut self, xs: &[TensorId]) -> Result<TensorId, TensorError> {
        let mut total = 0.0;
        for &x in xs {
            let s = self.shape(x);
            if s != [1, 1] {
                return Err(TensorError::NonScalarRoot {
                    rows: s[0],
                    cols: s[1],
                });
            }
            total += self.value(x);
        }
        let rg = xs.iter().any(|&x| self.requires(x));
        Ok(self.push(vec![total], [1, 1], rg, Op::SumScalars { xs: xs.to_vec() }))
    }

    /// Scaled dot-product self-attention over valid positions, multi-head,
    /// with concatenated heads passed through an output projection. Masked
    /// (padding) key positions receive an additive `-1e9` logit so the
    /// softmax assigns them exactly zero weight.
    pub fn multi_head_self_attention(
        &mut self,
        x: TensorId,
        mask: &[bool],
        params: &AttentionParams,
        heads: usize,
    ) -> Result<TensorId, TensorError> {
        let [n, d_model] = self.shape(x);
        if heads == 0 || d_model % heads != 0 {
            return Err(TensorError::HeadsIndivisible { d_model, heads });
        }
        if mask.len() != n {
            return Err(TensorError::MaskLength {
                mask: mask.len(),
                rows: n,
            });
        }
        if !mask.iter().any(|&m| m) {
            return Err(TensorError::EmptySequence);
        }
        let d_k = d_model / heads;

        let q = self.matmul(x, params.w_q)?;
        let q = self.add_row(q, params.b_q)?;
        let k = self.matmul(x, params.w_k)?;
        let k = self.add_row(k, params.b_k)?;
        let v = self.matmul(x, params.w_v)?;
        let v = self.add_row(v, params.b_v)?;

        let key_bias: Vec<f64> = mask
            .iter()
            .map(|&m| if m { 0.0 } else { MASK_LOGIT })
            .collect();
        let key_bias = self.constant(key_bias, [1, n])?;

        let mut head_outputs = Vec::with_capacity(heads);
        for h in 0..heads {
            let (from, to) = (h * d_k, (h + 1) * d_k);
            let qh = self.slice_cols(q, from, to)?;
            let kh = self.slice_cols(k, from, to)?;
            let vh = self.slice_cols(v, from, to)?;
            let kt = self.transpose(kh);
            let scores = self.matmul(qh, kt)?;
            let scores = self.scale(scores, 1.0 / (d_k as f64).sqrt());
            let scores = self.add_row(scores, key_bias)?;
            let weights = self.softmax_rows(scores);
            head_outputs.push(self.matmul(weights, vh)?);
        }
        let concat = self.concat_cols(&head_outputs)?;
        let out = self.matmul(concat, params.w_o)?;
        self.add_row(out, params.b_o)
    }
}

/// Tensor handles for one attention sublayer's projections.
#[derive(Debug, Clone, Copy)]
pub struct AttentionParams {
    pub w_q: TensorId,
    pub b_q: TensorId,
    pub w_k: TensorId,
    pub b_k: TensorId,
    pub w_v: TensorId,
    pub b_v: TensorId,
    pub w_o: TensorId,
    pub b_o: TensorId,
}

fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    (mean, 1.0 / (var + eps).sqrt())
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + xs.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

pub(crate) fn gelu_value(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub(crate) fn gelu_derivative(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Backward pass for layer normalization; row statistics are recomputed
/// from the saved input.
pub(crate) fn layer_norm_backward(
    g: &Graph,
    gout: &[f64],
    x: TensorId,
    gain: TensorId,
    bias: TensorId,
    eps: f64,
    grads: &mut [Option<Vec<f64>>],
) {
    let [n, d] = g.shape(x);
    let xd = g.data(x);
    let gd = g.data(gain);

    let mut dx = if g.requires(x) {
        Some(vec![0.0; n * d])
    } else {
        None
    };
    let mut dgain = if g.requires(gain) {
        Some(vec![0.0; d])
    } else {
        None
    };
    let mut dbias = if g.requires(bias) {
        Some(vec![0.0; d])
    } else {
        None
    };

    for r in 0..n {
        let row = &xd[r * d..(r + 1) * d];
        let gout_row = &gout[r * d..(r + 1) * d];
        let (mean, inv_std) = row_stats(row, eps);
        let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv_std).collect();

        if let Some(dg) = dgain.as_mut() {
            for c in 0..d {
                dg[c] += gout_row[c] * xhat[c];
            }
        }
        if let Some(db) = dbias.as_mut() {
            for c in 0..d {
                db[c] += gout_row[c];
            }
        }
        if let Some(dx) = dx.as_mut() {
            let dxhat: Vec<f64> = (0..d).map(|c| gout_row[c] * gd[c]).collect();
            let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
            let mean_dxhat_xhat =
                dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
            for c in 0..d {
                dx[r * d + c] = inv_std * (dxhat[c] - mean_dxhat - xhat[c] * mean_dxhat_xhat);
            }
        }
    }

    if let Some(dx) = dx {
        g.accumulate(grads, x, &dx);
    }
    if let Some(dg) = dgain {
        g.accumulate(grads, gain, &dg);
    }
    if let Some(db) = dbias {
        g.accumulate(grads, bias, &db);
    }
}
