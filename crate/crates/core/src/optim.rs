//! Adam with coupled L2 regularisation and global gradient-norm clipping.

use crate::error::{KtError, Result};
use crate::params::{Decay, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 coefficient added to the gradient of decayed parameters.
    pub l2: f64,
    /// Global norm the loss gradient is rescaled to when it exceeds it.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            l2: 0.0,
            clip_norm: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    steps: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.value.numel()]).collect();
        Adam {
            config,
            m: zeros.clone(),
            v: zeros,
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update. `grads` holds one gradient per parameter in
    /// store order. Returns the loss-gradient norm before clipping.
    ///
    /// A non-finite gradient aborts the step before any parameter changes.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Vec<f64>]) -> Result<f64> {
        assert_eq!(grads.len(), self.m.len(), "one gradient per parameter");
        for (p, g) in params.iter().zip(grads) {
            if g.iter().any(|x| !x.is_finite()) {
                return Err(KtError::NonFiniteGradient(p.name.clone()));
            }
        }
        let norm = grads
            .iter()
            .flat_map(|g| g.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt();
        let factor = match self.config.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.steps += 1;
        let c = self.config;
        let bias1 = 1.0 - c.beta1.powi(self.steps as i32);
        let bias2 = 1.0 - c.beta2.powi(self.steps as i32);
        for (k, p) in params.iter_mut().enumerate() {
            let width = p.value.shape().last().copied().unwrap_or(1);
            let decay = &p.decay;
            let value = p.value.data_mut();
            for (i, x) in value.iter_mut().enumerate() {
                let decayed = match decay {
                    Decay::None => false,
                    Decay::All => true,
                    Decay::ExceptRows(rows) => !rows.contains(&(i / width)),
                };
                let mut g = grads[k][i] * factor;
                if decayed {
                    g += c.l2 * *x;
                }
                let m = &mut self.m[k][i];
                let v = &mut self.v[k][i];
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                let m_hat = *m / bias1;
                let v_hat = *v / bias2;
                *x -= c.learning_rate * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
        Ok(norm)
    }
}
