//! Named parameters and Adam with global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamRole {
    VoxelFeature,
    VoxelDensityLogit,
    DepthLogitStage1,
    DepthLogitStage2,
    ConvKernel,
    ConvBias,
    Decoder,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub role: ParamRole,
    pub values: Vec<f64>,
    pub grad: Vec<f64>,
    /// Multiplier on the optimizer learning rate for this parameter.
    pub lr_scale: f64,
}

impl Parameter {
    pub fn new(name: impl Into<String>, role: ParamRole, values: Vec<f64>) -> Parameter {
        let grad = vec![0.0; values.len()];
        Parameter {
            name: name.into(),
            role,
            values,
            grad,
            lr_scale: 1.0,
        }
    }

    pub fn with_lr_scale(mut self, s: f64) -> Parameter {
        self.lr_scale = s;
        self
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn set_grad(&mut self, g: Vec<f64>) -> Result<()> {
        if g.len() != self.values.len() {
            return Err(Error::Shape(format!(
                "{}: gradient of length {} for {} values",
                self.name,
                g.len(),
                self.values.len()
            )));
        }
        self.grad = g;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 2e-4,
            beta1: 0.0,
            beta2: 0.99,
            eps: 1e-8,
            clip_norm: 35.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub step: u64,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(config: AdamConfig, params: &[Parameter]) -> OptimizerState {
        OptimizerState {
            config,
            step: 0,
            first_moment: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            second_moment: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }
}

pub fn global_norm(params: &[Parameter]) -> f64 {
    params
        .iter()
        .flat_map(|p| p.grad.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt()
}

/// Scale all gradients by `clip / norm` when the global L2 norm exceeds
/// `clip`. Returns the norm before clipping.
pub fn clip_gradients(params: &mut [Parameter], clip: f64) -> f64 {
    let norm = global_norm(params);
    if norm > clip {
        let s = clip / norm;
        for p in params.iter_mut() {
            p.grad.iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}

/// Clip, then one bias-corrected Adam update. Returns the pre-clip norm.
pub fn adam_step(state: &mut OptimizerState, params: &mut [Parameter]) -> Result<f64> {
    if state.first_moment.len() != params.len()
        || params.iter().zip(&state.first_moment).any(|(p, m)| p.len() != m.len())
    {
        return Err(Error::Shape("optimizer moments do not match parameters".into()));
    }
    let c = state.config;
    let norm = clip_gradients(params, c.clip_norm);
    if !norm.is_finite() {
        return Err(Error::numerical("adam_step", format!("gradient norm is {norm}")));
    }
    state.step += 1;
    let bc1 = 1.0 - c.beta1.powi(state.step as i32);
    let bc2 = 1.0 - c.beta2.powi(state.step as i32);
    for ((p, m), v) in params
        .iter_mut()
        .zip(state.first_moment.iter_mut())
        .zip(state.second_moment.iter_mut())
    {
        let lr = c.lr * p.lr_scale;
        for i in 0..p.values.len() {
            let g = p.grad[i];
            m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
            v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
            let mh = m[i] / bc1;
            let vh = v[i] / bc2;
            p.values[i] -= lr * mh / (vh.sqrt() + c.eps);
        }
    }
    Ok(norm)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(v: Vec<f64>, g: Vec<f64>) -> Parameter {
        let mut p = Parameter::new("p", ParamRole::VoxelFeature, v);
        p.set_grad(g).unwrap();
        p
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut ps = vec![param(vec![1.0, -2.0], vec![0.3, -5.0])];
        let mut st = OptimizerState::new(AdamConfig::default(), &ps);
        adam_step(&mut st, &mut ps).unwrap();
        assert!((ps[0].values[0] - (1.0 - 2e-4)).abs() < 1e-11);
        assert!((ps[0].values[1] - (-2.0 + 2e-4)).abs() < 1e-11);
    }

    #[test]
    fn zero_gradient_is_identity() {
        let mut ps = vec![param(vec![0.5, 0.25], vec![0.0, 0.0])];
        let mut st = OptimizerState::new(AdamConfig::default(), &ps);
        for _ in 0..3 {
            adam_step(&mut st, &mut ps).unwrap();
        }
        assert_eq!(ps[0].values, vec![0.5, 0.25]);
    }

    #[test]
    fn clipping_halves_norm_70() {
        let mut ps = vec![param(vec![0.0; 2], vec![42.0, 56.0])];
        let before = clip_gradients(&mut ps, 35.0);
        assert!((before - 70.0).abs() < 1e-12);
        assert!((ps[0].grad[0] - 21.0).abs() < 1e-12 && (ps[0].grad[1] - 28.0).abs() < 1e-12);
    }
}
