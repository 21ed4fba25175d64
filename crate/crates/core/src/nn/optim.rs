use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};

use crate::error::Result;

/// Adam (no weight decay) with optional global-norm gradient clipping.
pub struct Adam {
    inner: AdamW,
    vars: Vec<Var>,
    clip: Option<f64>,
}

impl Adam {
    pub fn new(vars: Vec<Var>, lr: f64, betas: (f64, f64), clip: Option<f64>) -> Result<Self> {
        let params = ParamsAdamW {
            lr,
            beta1: betas.0,
            beta2: betas.1,
            eps: 1e-8,
            weight_decay: 0.0,
        };
        Ok(Self {
            inner: AdamW::new(vars.clone(), params)?,
            vars,
            clip,
        })
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.inner.set_learning_rate(lr);
    }

    /// Backpropagate `loss` and update; returns the pre-clipping gradient norm.
    pub fn backward_step(&mut self, loss: &Tensor) -> Result<f64> {
        let mut grads = loss.backward()?;
        let norm = grad_norm(&grads, &self.vars)?;
        if let Some(max) = self.clip {
            if norm > max && norm.is_finite() {
                let scale = max / norm;
                for v in &self.vars {
                    if let Some(g) = grads.get(v) {
                        let scaled = g.affine(scale, 0.0)?;
                        grads.insert(v, scaled);
                    }
                }
            }
        }
        self.inner.step(&grads)?;
        Ok(norm)
    }
}

pub fn grad_norm(grads: &GradStore, vars: &[Var]) -> Result<f64> {
    let mut total = 0.0f64;
    for v in vars {
        if let Some(g) = grads.get(v) {
            total += g
                .to_dtype(candle_core::DType::F64)?
                .sqr()?
                .sum_all()?
                .to_scalar::<f64>()?;
        }
    }
    Ok(total.sqrt())
}
