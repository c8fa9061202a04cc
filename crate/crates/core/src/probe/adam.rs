use serde::{Deserialize, Serialize};

use crate::backbone::Family;
use crate::error::{Error, Result};

pub const RESNET_LEARNING_RATE: f64 = 1e-4;
pub const VIT_LEARNING_RATE: f64 = 5e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    #[serde(default)]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// L2 penalty added to the gradient.
    #[serde(default)]
    pub weight_decay: f64,
    /// Weight the loss by inverse class frequency.
    #[serde(default)]
    pub class_weighting: bool,
}

fn default_beta2() -> f64 {
    0.999
}
fn default_epsilon() -> f64 {
    1e-8
}
fn default_epochs() -> usize {
    30
}
fn default_batch_size() -> usize {
    64
}

impl OptimizerConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        OptimizerConfig {
            learning_rate,
            beta1: 0.0,
            beta2: default_beta2(),
            epsilon: default_epsilon(),
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            weight_decay: 0.0,
            class_weighting: false,
        }
    }

    /// 1e-4 for residual CNNs, 5e-6 for transformers.
    pub fn for_family(family: Family) -> Self {
        Self::with_learning_rate(match family {
            Family::ResidualCnn => RESNET_LEARNING_RATE,
            Family::VisionTransformer => VIT_LEARNING_RATE,
        })
    }

    /// A zero learning rate is accepted as a no-update control run.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad(format!("betas ({}, {}) must lie in [0, 1)", self.beta1, self.beta2));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad(format!("learning_rate {} must be non-negative", self.learning_rate));
        }
        if !(self.epsilon > 0.0) {
            return bad(format!("epsilon {} must be positive", self.epsilon));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay {} must be non-negative", self.weight_decay));
        }
        Ok(())
    }
}

/// Moment estimates for one parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }
}

/// One Adam update with bias correction. Leaves `params` and `state`
/// untouched when the gradient is not finite.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, cfg: &OptimizerConfig) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::Shape(format!(
            "adam: {} params, {} grads, state of {}",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonfiniteGradient { step: state.t + 1 });
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for i in 0..params.len() {
        let g = grads[i] + cfg.weight_decay * params[i];
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let cfg = OptimizerConfig::with_learning_rate(1e-4);
        let mut p = vec![0.3, -1.2, 5.0];
        let mut s = AdamState::new(3);
        adam_step(&mut p, &[0.0; 3], &mut s, &cfg).unwrap();
        assert_eq!(p, vec![0.3, -1.2, 5.0]);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let cfg = OptimizerConfig::with_learning_rate(1e-4);
        let mut p = vec![0.0];
        let mut s = AdamState::new(1);
        adam_step(&mut p, &[1.0], &mut s, &cfg).unwrap();
        // m̂ = 1, v̂ = 1, so Δp = -1e-4 / (1 + 1e-8).
        assert_eq!(p[0], -1e-4 / (1.0 + 1e-8));
        assert!((p[0] + 1e-4).abs() < 1e-11);
    }

    #[test]
    fn nonfinite_gradient_is_rejected_without_side_effects() {
        let cfg = OptimizerConfig::with_learning_rate(1e-4);
        let mut p = vec![1.0, 2.0];
        let mut s = AdamState::new(2);
        let err = adam_step(&mut p, &[f64::NAN, 0.0], &mut s, &cfg).unwrap_err();
        assert_eq!(err.code(), "NONFINITE_GRADIENT");
        assert_eq!(p, vec![1.0, 2.0]);
        assert_eq!(s, AdamState::new(2));
    }

    #[test]
    fn second_moment_stays_non_negative() {
        let cfg = OptimizerConfig::with_learning_rate(1e-3);
        let mut p = vec![0.0; 4];
        let mut s = AdamState::new(4);
        for k in 0..20 {
            let g: Vec<f64> = (0..4).map(|i| ((k * 7 + i * 3) % 5) as f64 - 2.0).collect();
            adam_step(&mut p, &g, &mut s, &cfg).unwrap();
            assert!(s.v.iter().all(|&v| v >= 0.0));
        }
        assert_eq!(s.t, 20);
    }

    #[test]
    fn config_validation() {
        assert!(OptimizerConfig::with_learning_rate(0.0).validate().is_ok());
        assert!(OptimizerConfig::with_learning_rate(-1.0).validate().is_err());
        let mut c = OptimizerConfig::with_learning_rate(1e-4);
        c.beta2 = 1.0;
        assert!(c.validate().is_err());
        assert_eq!(OptimizerConfig::for_family(Family::VisionTransformer).learning_rate, 5e-6);
        assert_eq!(OptimizerConfig::for_family(Family::ResidualCnn).learning_rate, 1e-4);
    }
}
