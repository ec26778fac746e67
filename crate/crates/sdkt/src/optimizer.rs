//! Adaptive-moment optimizer with decoupled weight decay and a cosine
//! learning-rate schedule. One schedule spans one fine-tuning stage and
//! restarts at the next.

use crate::error::{Error, Result};
use crate::model::EncoderParams;
use serde::{Deserialize, Serialize};

/// Moment estimates and hyperparameters of the decoupled-decay optimizer.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub m: EncoderParams,
    pub v: EncoderParams,
    pub step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// Optimizer hyperparameters as carried by the experiment config.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub base_lr: f64,
    pub weight_decay: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            base_lr: 1e-3,
            weight_decay: 5e-4,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0) || !self.base_lr.is_finite() {
            return Err(Error::param(format!("base_lr must be positive, got {}", self.base_lr)));
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return Err(Error::param(format!(
                "weight_decay must be nonnegative, got {}",
                self.weight_decay
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::param(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::param(format!("eps must be positive, got {}", self.eps)));
        }
        Ok(())
    }
}

impl OptimizerState {
    pub fn new(shape: &EncoderParams, cfg: &OptimizerConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(OptimizerState {
            m: shape.zeros_like(),
            v: shape.zeros_like(),
            step_count: 0,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
        })
    }
}

/// Cosine-annealed learning rate over a fixed number of steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleSpec {
    pub base_lr: f64,
    pub total_steps: u64,
}

impl ScheduleSpec {
    pub fn new(base_lr: f64, total_steps: u64) -> Result<Self> {
        if !(base_lr > 0.0) || !base_lr.is_finite() {
            return Err(Error::param(format!("base_lr must be positive, got {base_lr}")));
        }
        if total_steps == 0 {
            return Err(Error::param("total_steps must be positive"));
        }
        Ok(ScheduleSpec {
            base_lr,
            total_steps,
        })
    }
}

/// `base_lr * (1 + cos(pi * step / total_steps)) / 2`.
pub fn cosine_lr(step: u64, spec: &ScheduleSpec) -> Result<f64> {
    if step > spec.total_steps {
        return Err(Error::Range(format!(
            "step {} outside schedule of {} steps",
            step, spec.total_steps
        )));
    }
    let frac = step as f64 / spec.total_steps as f64;
    Ok(spec.base_lr * (0.5 * (1.0 + (std::f64::consts::PI * frac).cos())))
}

#[allow(clippy::too_many_arguments)]
fn update_slice(
    theta: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    bias1: f64,
    bias2: f64,
) {
    for i in 0..theta.len() {
        let g = grad[i];
        m[i] = beta1 * m[i] + (1.0 - beta1) * g;
        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
        let m_hat = m[i] / bias1;
        let v_hat = v[i] / bias2;
        theta[i] -= lr * (m_hat / (v_hat.sqrt() + eps) + weight_decay * theta[i]);
    }
}

/// One decoupled-weight-decay update:
/// moments, bias correction, then `theta -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta)`.
pub fn adamw_step(
    mut state: OptimizerState,
    mut params: EncoderParams,
    grad: &EncoderParams,
    lr: f64,
) -> Result<(EncoderParams, OptimizerState)> {
    if !params.same_shape(grad) || !params.same_shape(&state.m) {
        return Err(Error::shape("optimizer tensors have mismatched shapes"));
    }
    if !grad.all_finite() {
        return Err(Error::Numeric("gradient contains non-finite entries".into()));
    }
    if !(lr >= 0.0) || !lr.is_finite() {
        return Err(Error::param(format!("learning rate must be nonnegative, got {lr}")));
    }
    let t = state.step_count + 1;
    let bias1 = 1.0 - state.beta1.powf(t as f64);
    let bias2 = 1.0 - state.beta2.powf(t as f64);
    update_slice(
        &mut params.w1, &grad.w1, &mut state.m.w1, &mut state.v.w1,
        lr, state.beta1, state.beta2, state.eps, state.weight_decay, bias1, bias2,
    );
    update_slice(
        &mut params.b1, &grad.b1, &mut state.m.b1, &mut state.v.b1,
        lr, state.beta1, state.beta2, state.eps, state.weight_decay, bias1, bias2,
    );
    update_slice(
        &mut params.w2, &grad.w2, &mut state.m.w2, &mut state.v.w2,
        lr, state.beta1, state.beta2, state.eps, state.weight_decay, bias1, bias2,
    );
    update_slice(
        &mut params.b2, &grad.b2, &mut state.m.b2, &mut state.v.b2,
        lr, state.beta1, state.beta2, state.eps, state.weight_decay, bias1, bias2,
    );
    state.step_count = t;
    Ok((params, state))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds::derive_rng;
    use rand::Rng;

    fn scalar_params(theta: f64) -> EncoderParams {
        EncoderParams {
            input_dim: 1,
            hidden_dim: 1,
            feature_dim: 1,
            w1: vec![theta],
            b1: vec![0.0],
            w2: vec![0.0],
            b2: vec![0.0],
        }
    }

    fn scalar_grad(g: f64) -> EncoderParams {
        EncoderParams {
            input_dim: 1,
            hidden_dim: 1,
            feature_dim: 1,
            w1: vec![g],
            b1: vec![0.0],
            w2: vec![0.0],
            b2: vec![0.0],
        }
    }

    fn cfg(weight_decay: f64) -> OptimizerConfig {
        OptimizerConfig {
            base_lr: 0.1,
            weight_decay,
            ..OptimizerConfig::default()
        }
    }

    #[test]
    fn zero_grad_zero_decay_leaves_params_unchanged() {
        let mut rng = derive_rng(1, &[0xF0]);
        let params = EncoderParams::random_init(3, 4, 2, &mut rng);
        let grad = params.zeros_like();
        let state = OptimizerState::new(&params, &cfg(0.0)).unwrap();
        let (updated, state) = adamw_step(state, params.clone(), &grad, 0.05).unwrap();
        assert_eq!(updated, params);
        assert_eq!(state.step_count, 1);
    }

    #[test]
    fn first_step_hand_example() {
        // theta = 1, g = 0.5, defaults, wd = 0, lr = 0.1:
        // m_hat = 0.5, v_hat = 0.25, theta' ~= 0.900000002.
        let params = scalar_params(1.0);
        let grad = scalar_grad(0.5);
        let state = OptimizerState::new(&params, &cfg(0.0)).unwrap();
        let (updated, state) = adamw_step(state, params, &grad, 0.1).unwrap();
        assert!((updated.w1[0] - 0.900000002).abs() < 1e-9);
        assert!((state.m.w1[0] - 0.05).abs() < 1e-15);
        assert!((state.v.w1[0] - 0.00025).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_is_decoupled() {
        // g = 0, wd = 0.1, lr = 1.0, theta = 2.0 -> theta' = 1.8.
        let params = scalar_params(2.0);
        let grad = scalar_grad(0.0);
        let state = OptimizerState::new(&params, &cfg(0.1)).unwrap();
        let (updated, _) = adamw_step(state, params, &grad, 1.0).unwrap();
        assert!((updated.w1[0] - 1.8).abs() < 1e-15);
    }

    #[test]
    fn deterministic_given_identical_inputs() {
        let mut rng = derive_rng(2, &[0xF1]);
        let params = EncoderParams::random_init(3, 4, 2, &mut rng);
        let grad = EncoderParams::random_init(3, 4, 2, &mut rng);
        let state = OptimizerState::new(&params, &cfg(5e-4)).unwrap();
        let (a, sa) = adamw_step(state.clone(), params.clone(), &grad, 0.01).unwrap();
        let (b, sb) = adamw_step(state, params, &grad, 0.01).unwrap();
        assert_eq!(a, b);
        assert_eq!(sa.m, sb.m);
        assert_eq!(sa.v, sb.v);
    }

    #[test]
    fn update_magnitude_is_bounded_without_decay() {
        let mut rng = derive_rng(3, &[0xF2]);
        for _ in 0..20 {
            let params = EncoderParams::random_init(3, 4, 2, &mut rng);
            let mut grad = params.zeros_like();
            for i in 0..grad.num_entries() {
                grad.set_entry(i, rng.random_range(-10.0..10.0));
            }
            let lr = 0.01;
            let state = OptimizerState::new(&params, &cfg(0.0)).unwrap();
            let (updated, _) = adamw_step(state, params.clone(), &grad, lr).unwrap();
            for i in 0..params.num_entries() {
                let delta = (updated.entry(i) - params.entry(i)).abs();
                assert!(delta <= 10.0 * lr, "entry {i} moved {delta}");
            }
        }
    }

    #[test]
    fn constant_gradient_moves_against_its_sign() {
        let mut params = scalar_params(0.3);
        let grad = scalar_grad(0.7);
        let mut state = OptimizerState::new(&params, &cfg(0.0)).unwrap();
        for _ in 0..5 {
            let before = params.w1[0];
            let (next, st) = adamw_step(state, params, &grad, 0.01).unwrap();
            assert!(next.w1[0] < before);
            params = next;
            state = st;
        }
        let mut params = scalar_params(0.3);
        let grad = scalar_grad(-0.7);
        let mut state = OptimizerState::new(&params, &cfg(0.0)).unwrap();
        for _ in 0..5 {
            let before = params.w1[0];
            let (next, st) = adamw_step(state, params, &grad, 0.01).unwrap();
            assert!(next.w1[0] > before);
            params = next;
            state = st;
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let params = scalar_params(1.0);
        let state = OptimizerState::new(&params, &cfg(0.0)).unwrap();
        let bad_shape = EncoderParams::zeros(2, 2, 2);
        assert!(matches!(
            adamw_step(state.clone(), params.clone(), &bad_shape, 0.1),
            Err(Error::Shape(_))
        ));
        let nan_grad = scalar_grad(f64::NAN);
        assert!(matches!(
            adamw_step(state, params, &nan_grad, 0.1),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn cosine_endpoints_and_midpoint_are_exact() {
        let spec = ScheduleSpec::new(2e-3, 10).unwrap();
        assert_eq!(cosine_lr(0, &spec).unwrap(), 2e-3);
        assert_eq!(cosine_lr(10, &spec).unwrap(), 0.0);
        assert_eq!(cosine_lr(5, &spec).unwrap(), 1e-3);
        assert!(matches!(cosine_lr(11, &spec), Err(Error::Range(_))));
    }

    #[test]
    fn cosine_is_nonincreasing() {
        let spec = ScheduleSpec::new(1.0, 100).unwrap();
        let mut prev = f64::INFINITY;
        for s in 0..=100 {
            let lr = cosine_lr(s, &spec).unwrap();
            assert!(lr <= prev + 1e-15);
            prev = lr;
        }
    }

    #[test]
    fn schedule_spec_validation() {
        assert!(ScheduleSpec::new(0.0, 10).is_err());
        assert!(ScheduleSpec::new(1e-3, 0).is_err());
    }
}
