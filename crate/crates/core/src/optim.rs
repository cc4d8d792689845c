//! Parameter update rules.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_dims, Result};
use crate::nn::{Grads, Param};

/// Adam moment estimates for one parameter set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Grads,
    pub v: Grads,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &[Param]) -> Self {
        let zeros: Grads = params.iter().map(|p| vec![0.0; p.values.len()]).collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

fn check_shapes(params: &[Param], grads: &Grads) -> Result<()> {
    ensure_dims(params.len(), grads.len())?;
    for (p, g) in params.iter().zip(grads) {
        ensure_dims(p.values.len(), g.len())?;
    }
    Ok(())
}

/// One bias-corrected Adam update.
pub fn adam_step(
    params: &mut [Param],
    grads: &Grads,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    check_shapes(params, grads)?;
    check_shapes(params, &state.m)?;
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (pi, p) in params.iter_mut().enumerate() {
        let (m, v, g) = (&mut state.m[pi], &mut state.v[pi], &grads[pi]);
        for i in 0..p.values.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p.values[i] -= lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    Ok(())
}

/// Plain gradient descent.
pub fn sgd_step(params: &mut [Param], grads: &Grads, lr: f64) -> Result<()> {
    check_shapes(params, grads)?;
    for (p, g) in params.iter_mut().zip(grads) {
        for (w, d) in p.values.iter_mut().zip(g) {
            *w -= lr * d;
        }
    }
    Ok(())
}
