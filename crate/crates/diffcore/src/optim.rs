//! Bias-corrected Adam and an exponential learning-rate decay.

use crate::error::{DiffError, Result};
use crate::params::ParamSet;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Per-parameter moment estimates for one [`ParamSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    config: AdamConfig,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step: u64,
}

impl Adam {
    pub fn new(params: &ParamSet, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = params
            .blocks()
            .iter()
            .map(|b| vec![0.0; b.value.len()])
            .collect();
        Self {
            config,
            first: zeros.clone(),
            second: zeros,
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> AdamConfig {
        self.config
    }

    /// Applies one update with learning rate `lr`.
    ///
    /// All gradients are validated before anything is modified, so a
    /// rejected step leaves parameters and moments untouched.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Vec<f64>], lr: f64) -> Result<()> {
        for (block, g) in params.blocks().iter().zip(grads) {
            if g.len() != block.value.len() {
                return Err(DiffError::GradientLength {
                    name: block.name.clone(),
                    expected: block.value.len(),
                    got: g.len(),
                });
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(DiffError::NonFiniteGradient(block.name.clone()));
            }
        }
        if grads.len() != params.len() {
            return Err(DiffError::GradientLength {
                name: "<all blocks>".into(),
                expected: params.len(),
                got: grads.len(),
            });
        }

        self.step += 1;
        let AdamConfig {
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.step as i32;
        let correct1 = 1.0 - beta1.powi(t);
        let correct2 = 1.0 - beta2.powi(t);

        for (((block, g), m), v) in params
            .blocks_mut()
            .iter_mut()
            .zip(grads)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            for (((p, &gi), mi), vi) in block
                .value
                .data_mut()
                .iter_mut()
                .zip(g)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let m_hat = *mi / correct1;
                let v_hat = *vi / correct2;
                *p -= lr * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}

/// `lr_start * (lr_end / lr_start)^(min(step, total) / total)`.
pub fn lr_at(step: u64, total_steps: u64, lr_start: f64, lr_end: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(DiffError::ZeroDecaySteps);
    }
    if !(lr_start > 0.0 && lr_end > 0.0) {
        return Err(DiffError::InvalidLearningRate {
            start: lr_start,
            end: lr_end,
        });
    }
    let frac = step.min(total_steps) as f64 / total_steps as f64;
    Ok(lr_start * (lr_end / lr_start).powf(frac))
}
