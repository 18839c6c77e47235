use serde::{Deserialize, Serialize};

use super::params::{ParamGrads, ParamStore};
use crate::error::{Error, Result};

/// Plain gradient descent with global gradient-norm clipping.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sgd {
    pub learning_rate: f64,
    /// Gradients whose global L2 norm exceeds this are rescaled to it.
    /// Non-positive disables clipping.
    pub clip_norm: f64,
}

impl Default for Sgd {
    fn default() -> Self {
        Self {
            learning_rate: 1e-2,
            clip_norm: 5.0,
        }
    }
}

impl Sgd {
    /// Applies one update in place and returns the pre-clip gradient norm.
    pub fn step(&self, store: &mut ParamStore, grads: &ParamGrads) -> Result<f64> {
        let norm = grads.norm();
        if !norm.is_finite() {
            return Err(Error::NonFiniteLoss(norm));
        }
        let scale = if self.clip_norm > 0.0 && norm > self.clip_norm {
            self.clip_norm / norm
        } else {
            1.0
        };
        let lr = self.learning_rate * scale;
        for (id, g) in store.ids().collect::<Vec<_>>().into_iter().zip(&grads.0) {
            let t = store.get_mut(id);
            for (w, d) in t.data_mut().iter_mut().zip(g.data()) {
                *w -= lr * d;
            }
        }
        Ok(norm)
    }
}
