//! AdamW with decoupled weight decay, global-norm gradient clipping, and
//! the cosine learning-rate schedule.

/// Optimizer hyperparameters. Learning rate is supplied per step by the
/// schedule, so it does not live here.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// First and second moment estimates, one pair of blocks per parameter
/// block, plus the step counter used for bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(block_lens: &[usize]) -> Self {
        Self {
            step: 0,
            m: block_lens.iter().map(|&n| vec![0.0; n]).collect(),
            v: block_lens.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }
}

/// Cosine decay from `lr_start` at step 0 to `lr_end` at `last_step`.
/// `last_step` is the final step index, not the step count; a single-step
/// run gets `lr_start`.
pub fn cosine_lr(step: u64, last_step: u64, lr_start: f64, lr_end: f64) -> f64 {
    if last_step == 0 {
        return lr_start;
    }
    let t = (step.min(last_step) as f64) / (last_step as f64);
    lr_end + 0.5 * (lr_start - lr_end) * (1.0 + (std::f64::consts::PI * t).cos())
}

/// L2 norm over all gradient blocks concatenated.
pub fn global_grad_norm(grads: &[Vec<f64>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|&x| x * x)
        .sum::<f64>()
        .sqrt()
}

/// Scales all gradients by `max_norm / norm` when the global norm exceeds
/// `max_norm`. Returns the pre-clip norm.
pub fn clip_grad_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = global_grad_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for block in grads.iter_mut() {
            for g in block.iter_mut() {
                *g *= scale;
            }
        }
    }
    norm
}

/// One AdamW update across all parameter blocks. `decay[i]` selects which
/// blocks receive weight decay (matrix weights; never biases, layer norms,
/// or positional embeddings). Decay is decoupled from the moment update.
pub fn adamw_step(
    params: &mut [Vec<f64>],
    grads: &[Vec<f64>],
    decay: &[bool],
    state: &mut OptimizerState,
    lr: f64,
    cfg: &AdamConfig,
) {
    assert_eq!(params.len(), grads.len(), "params/grads block count");
    assert_eq!(params.len(), decay.len(), "params/decay block count");
    assert_eq!(params.len(), state.m.len(), "params/state block count");

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);

    for (i, block) in params.iter_mut().enumerate() {
        let g = &grads[i];
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        let wd = if decay[i] { cfg.weight_decay } else { 0.0 };
        for j in 0..block.len() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            block[j] -= lr * (m_hat / (v_hat.sqrt() + cfg.eps) + wd * block[j]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_adamw_step_moves_by_roughly_lr() {
        // With g = 1: m_hat = 1, v_hat = 1, so the step is
        // lr / (1 + eps) ~ lr, and w goes from 1.0 to ~0.9 at lr = 0.1.
        let mut params = vec![vec![1.0]];
        let grads = vec![vec![1.0]];
        let mut state = OptimizerState::new(&[1]);
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        adamw_step(&mut params, &grads, &[false], &mut state, 0.1, &cfg);
        assert!((params[0][0] - 0.9).abs() < 1e-6, "got {}", params[0][0]);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn weight_decay_is_decoupled_and_masked() {
        // Zero gradient: the adam term is exactly zero, so only decay moves
        // the weight, and only on blocks with the decay flag set.
        let mut params = vec![vec![2.0], vec![2.0]];
        let grads = vec![vec![0.0], vec![0.0]];
        let mut state = OptimizerState::new(&[1, 1]);
        let cfg = AdamConfig {
            weight_decay: 0.1,
            ..AdamConfig::default()
        };
        adamw_step(&mut params, &grads, &[true, false], &mut state, 0.5, &cfg);
        assert!((params[0][0] - (2.0 - 0.5 * 0.1 * 2.0)).abs() < 1e-12);
        assert_eq!(params[1][0], 2.0);
    }

    #[test]
    fn cosine_schedule_hits_both_endpoints_exactly() {
        let (lr0, lr1) = (2e-4, 1e-5);
        assert_eq!(cosine_lr(0, 99, lr0, lr1), lr0);
        // cos(pi) = -1 exactly, so the end point is exact too.
        assert_eq!(cosine_lr(99, 99, lr0, lr1), lr1);
        // Midpoint of an even-length span is the arithmetic mean.
        let mid = cosine_lr(50, 100, lr0, lr1);
        assert!((mid - 0.5 * (lr0 + lr1)).abs() < 1e-18);
        // Monotone non-increasing across the span.
        let mut prev = f64::INFINITY;
        for s in 0..=99 {
            let lr = cosine_lr(s, 99, lr0, lr1);
            assert!(lr <= prev + 1e-18);
            prev = lr;
        }
    }

    #[test]
    fn cosine_schedule_degenerate_single_step() {
        assert_eq!(cosine_lr(0, 0, 3e-4, 1e-5), 3e-4);
    }

    #[test]
    fn clip_rescales_to_max_norm() {
        let mut grads = vec![vec![3.0], vec![4.0]];
        let norm = clip_grad_norm(&mut grads, 1.0);
        assert!((norm - 5.0).abs() < 1e-12);
        let clipped = global_grad_norm(&grads);
        assert!((clipped - 1.0).abs() < 1e-12);
        // Direction preserved.
        assert!((grads[0][0] / grads[1][0] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn clip_leaves_small_gradients_alone() {
        let mut grads = vec![vec![0.3, 0.4]];
        let norm = clip_grad_norm(&mut grads, 1.0);
        assert!((norm - 0.5).abs() < 1e-12);
        assert_eq!(grads[0], vec![0.3, 0.4]);
    }

    #[test]
    fn adamw_matches_hand_rolled_two_steps() {
        // Independent recomputation of two AdamW steps on a single weight,
        // following the textbook update with bias correction.
        let (b1, b2, eps, lr) = (0.9, 0.999, 1e-8, 0.01);
        let mut w = 0.5f64;
        let mut m = 0.0f64;
        let mut v = 0.0f64;
        let gs = [0.3f64, -0.2f64];
        for (t, &g) in gs.iter().enumerate() {
            let t = (t + 1) as i32;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            w -= lr * mh / (vh.sqrt() + eps);
        }

        let mut params = vec![vec![0.5]];
        let mut state = OptimizerState::new(&[1]);
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        for &g in &gs {
            adamw_step(
                &mut params,
                &[vec![g]],
                &[false],
                &mut state,
                lr,
                &cfg,
            );
        }
        assert!((params[0][0] - w).abs() < 1e-15);
    }
}
