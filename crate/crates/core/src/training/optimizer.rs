use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::{HeadGrads, HeadParams, LAYER_WEIGHTS};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: HeadParams,
    pub v: HeadParams,
}

impl AdamState {
    pub fn new(params: &HeadParams) -> Self {
        let dims = params.dims();
        Self {
            step: 0,
            m: HeadParams::zeros(dims),
            v: HeadParams::zeros(dims),
        }
    }
}

/// One AdamW update:
///
/// ```text
/// m ← β1·m + (1−β1)·g          m̂ = m / (1 − β1^t)
/// v ← β2·v + (1−β2)·g²         v̂ = v / (1 − β2^t)
/// p ← p·(1 − lr·λ) − lr·m̂ / (√v̂ + ε)
/// ```
///
/// Layer weights use λ = 0.
pub fn optimizer_step(
    params: &mut HeadParams,
    grads: &HeadGrads,
    state: &mut AdamState,
    config: &AdamWConfig,
) -> Result<()> {
    let dims = params.dims();
    if grads.dims() != dims || state.m.dims() != dims || state.v.dims() != dims {
        return Err(Error::Shape(format!(
            "optimizer step on {dims:?} with gradients {:?}",
            grads.dims()
        )));
    }
    state.step += 1;
    let t = i32::try_from(state.step).unwrap_or(i32::MAX);
    let (b1, b2, lr) = (config.beta1, config.beta2, config.learning_rate);
    let correction1 = 1.0 - b1.powi(t);
    let correction2 = 1.0 - b2.powi(t);
    let segments = params
        .segments_mut()
        .into_iter()
        .zip(grads.segments())
        .zip(state.m.segments_mut())
        .zip(state.v.segments_mut());
    for (((p, g), m), v) in segments {
        let decay = if p.name == LAYER_WEIGHTS {
            1.0
        } else {
            1.0 - lr * config.weight_decay
        };
        for (((p, &g), m), v) in p.values.iter_mut().zip(g.values).zip(m.values).zip(v.values) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / correction1;
            let v_hat = *v / correction2;
            *p = *p * decay - lr * m_hat / (v_hat.sqrt() + config.eps);
        }
    }
    Ok(())
}
