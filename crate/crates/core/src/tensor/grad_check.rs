//! Finite-difference gradient checking.
//!
//! The numeric side rebuilds the graph with perturbed inputs and never
//! touches the backward pass, so it stays an independent oracle for the
//! analytic gradients.

use super::{Graph, TensorError, TensorId};

/// A scalar-valued graph builder over a fixed set of leaf inputs.
pub trait ScalarFn: Fn(&mut Graph, &[TensorId]) -> Result<TensorId, TensorError> {}
impl<F: Fn(&mut Graph, &[TensorId]) -> Result<TensorId, TensorError>> ScalarFn for F {}

/// Input specification: data plus `[rows, cols]` shape.
pub type InputSpec = (Vec<f64>, [usize; 2]);

/// Gradients of `f` w.r.t. every input, via one backward pass.
pub fn analytic_grads(f: impl ScalarFn, inputs: &[InputSpec]) -> Result<Vec<Vec<f64>>, TensorError> {
    let mut g = Graph::new();
    let ids: Vec<TensorId> = inputs
        .iter()
        .map(|(data, shape)| g.leaf(data.clone(), *shape, true))
        .collect::<Result<_, _>>()?;
    let root = f(&mut g, &ids)?;
    g.backward(root)?;
    Ok(ids
        .iter()
        .map(|&id| g.grad(id).expect("requires_grad leaf").to_vec())
        .collect())
}

fn eval(f: &impl ScalarFn, inputs: &[InputSpec]) -> Result<f64, TensorError> {
    let mut g = Graph::new();
    let ids: Vec<TensorId> = inputs
        .iter()
        .map(|(data, shape)| g.leaf(data.clone(), *shape, true))
        .collect::<Result<_, _>>()?;
    let root = f(&mut g, &ids)?;
    Ok(g.value(root))
}

/// Central-difference gradients of `f` w.r.t. every input coordinate.
pub fn numeric_grads(
    f: impl ScalarFn,
    inputs: &[InputSpec],
    h: f64,
) -> Result<Vec<Vec<f64>>, TensorError> {
    let mut out = Vec::with_capacity(inputs.len());
    let mut work: Vec<InputSpec> = inputs.to_vec();
    for i in 0..inputs.len() {
        let mut grad = vec![0.0; inputs[i].0.len()];
        for j in 0..inputs[i].0.len() {
            let orig = work[i].0[j];
            work[i].0[j] = orig + h;
            let plus = eval(&f, &work)?;
            work[i].0[j] = orig - h;
            let minus = eval(&f, &work)?;
            work[i].0[j] = orig;
            grad[j] = (plus - minus) / (2.0 * h);
        }
        out.push(grad);
    }
    Ok(out)
}

/// Max over coordinates of `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn max_rel_err(analytic: &[Vec<f64>], numeric: &[Vec<f64>]) -> f64 {
    let mut worst = 0.0_f64;
    for (ga, gn) in analytic.iter().zip(numeric) {
        for (&a, &n) in ga.iter().zip(gn) {
            let denom = a.abs().max(n.abs()).max(1e-8);
            worst = worst.max((a - n).abs() / denom);
        }
    }
    worst
}

/// Max relative error between analytic and central-difference gradients of
/// the scalar function `f` at `inputs`.
pub fn grad_check(f: impl ScalarFn, inputs: &[InputSpec], h: f64) -> Result<f64, TensorError> {
    let analytic = analytic_grads(&f, inputs)?;
    let numeric = numeric_grads(&f, inputs, h)?;
    Ok(max_rel_err(&analytic, &numeric))
}
