use crate::error::{Error, Result};
use crate::tensor::Array;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// First/second moment estimates and step count for Adam.
#[derive(Clone, Debug)]
pub struct AdamState {
    m: Vec<Array>,
    v: Vec<Array>,
    step: u64,
}

impl AdamState {
    /// Zero-initialized state congruent with `params`.
    pub fn new(params: &[Array]) -> Self {
        AdamState {
            m: params.iter().map(|p| Array::zeros(p.shape().to_vec())).collect(),
            v: params.iter().map(|p| Array::zeros(p.shape().to_vec())).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Array], &[Array]) {
        (&self.m, &self.v)
    }

    pub fn from_parts(m: Vec<Array>, v: Vec<Array>, step: u64) -> Self {
        AdamState { m, v, step }
    }
}

/// One Adam update with bias correction. `params`, `grads` and `state` must
/// be congruent trees (same length, same shapes, same order).
pub fn adam_step(
    params: &mut [Array],
    grads: &[Array],
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::TreeMismatch(format!(
            "params {} / grads {} / state {}",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - BETA1.powi(t);
    let bc2 = 1.0 - BETA2.powi(t);
    for (idx, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(Error::TreeMismatch(format!(
                "leaf {idx}: param shape {:?} vs grad shape {:?}",
                p.shape(),
                g.shape()
            )));
        }
        let m = state.m[idx].data_mut();
        let v = state.v[idx].data_mut();
        for ((pi, &gi), (mi, vi)) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.iter_mut().zip(v.iter_mut()))
        {
            *mi = BETA1 * *mi + (1.0 - BETA1) * gi;
            *vi = BETA2 * *vi + (1.0 - BETA2) * gi * gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *pi -= lr * m_hat / (v_hat.sqrt() + EPS);
        }
    }
    Ok(())
}
