use serde::{Deserialize, Serialize};

use crate::error::{input, Error, Result};
use crate::policy::{GradientVector, PolicyParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamParams {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.eps > 0.0;
        if !ok {
            return Err(Error::Config {
                key: "update.adam".into(),
                msg: format!("need 0 <= beta1, beta2 < 1 and eps > 0, got {self:?}"),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    kind: OptimizerKind,
    adam: AdamParams,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, adam: AdamParams, num_params: usize) -> Self {
        let moments = if kind == OptimizerKind::Adam { num_params } else { 0 };
        Self { kind, adam, step: 0, m: vec![0.0; moments], v: vec![0.0; moments] }
    }

    pub fn sgd() -> Self {
        Self::new(OptimizerKind::Sgd, AdamParams::default(), 0)
    }

    pub fn adam(num_params: usize) -> Self {
        Self::new(OptimizerKind::Adam, AdamParams::default(), num_params)
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    /// Optimizer updates taken so far.
    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.m
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.v
    }
}

/// One ascent step: SGD moves by `lr · grad`, Adam by the bias-corrected
/// `lr · m̂ / (√v̂ + ε)`. An all-zero gradient (every item filtered) leaves
/// the parameters untouched; Adam's moments still decay.
pub fn optimizer_step(
    params: &mut PolicyParams,
    grad: &GradientVector,
    state: &mut OptimizerState,
    lr: f64,
) -> Result<()> {
    if grad.arch() != params.arch() || grad.len() != params.len() {
        return input(format!("gradient shape {:?} does not match params {:?}", grad.arch(), params.arch()));
    }
    if !grad.is_finite() {
        return input("non-finite gradient");
    }
    state.step += 1;
    let skip = grad.is_zero();
    match state.kind {
        OptimizerKind::Sgd => {
            if !skip {
                for (p, g) in params.as_mut_slice().iter_mut().zip(grad.as_slice()) {
                    *p += lr * g;
                }
            }
        }
        OptimizerKind::Adam => {
            if state.m.len() != params.len() {
                return input(format!("optimizer state sized for {} params, got {}", state.m.len(), params.len()));
            }
            let AdamParams { beta1, beta2, eps } = state.adam;
            let t = state.step as i32;
            let (c1, c2) = (1.0 - beta1.powi(t), 1.0 - beta2.powi(t));
            for i in 0..params.len() {
                let g = grad.as_slice()[i];
                state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g;
                state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g;
                if !skip {
                    let update = (state.m[i] / c1) / ((state.v[i] / c2).sqrt() + eps);
                    params.as_mut_slice()[i] += lr * update;
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::Architecture;

    fn arch() -> Architecture {
        Architecture { vocab_size: 3, embed_dim: 1, n_heads: 1, ff_dim: 1, context: 2, n_layers: 1 }
    }

    #[test]
    fn sgd_ascends() {
        let mut p = PolicyParams::random(arch(), 0, 1.0).unwrap();
        let before = p.clone();
        let g = GradientVector::from_vec(arch(), (0..p.len()).map(|i| i as f64).collect()).unwrap();
        let mut s = OptimizerState::sgd();
        optimizer_step(&mut p, &g, &mut s, 0.5).unwrap();
        for i in 0..p.len() {
            assert_eq!(p.as_slice()[i], before.as_slice()[i] + 0.5 * i as f64);
        }
    }

    #[test]
    fn zero_gradient_keeps_params_and_decays_moments() {
        let mut p = PolicyParams::random(arch(), 0, 1.0).unwrap();
        let n = p.len();
        let mut s = OptimizerState::adam(n);
        let g = GradientVector::from_vec(arch(), vec![1.0; n]).unwrap();
        optimizer_step(&mut p, &g, &mut s, 0.1).unwrap();
        let after_first = p.clone();
        let m1 = s.first_moment().to_vec();
        optimizer_step(&mut p, &GradientVector::zeros(arch()), &mut s, 0.1).unwrap();
        assert_eq!(p, after_first);
        for (a, b) in s.first_moment().iter().zip(&m1) {
            assert!((a - 0.9 * b).abs() < 1e-15);
        }
    }

    #[test]
    fn shape_mismatch() {
        let mut p = PolicyParams::random(arch(), 0, 1.0).unwrap();
        let other = Architecture { vocab_size: 4, ..arch() };
        let mut s = OptimizerState::adam(p.len());
        assert!(optimizer_step(&mut p, &GradientVector::zeros(other), &mut s, 0.1).is_err());
    }
}
