use super::params::Parameters;
use crate::error::{Error, Result};

/// Adam optimizer state; moment buffers mirror the parameter blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new<P: Parameters + ?Sized>(params: &P, lr: f64) -> Self {
        Self::with_betas(params, lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas<P: Parameters + ?Sized>(
        params: &P,
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    ) -> Self {
        let zeros: Vec<Vec<f64>> = params
            .blocks()
            .iter()
            .map(|(_, b)| vec![0.0; b.len()])
            .collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
            lr,
            beta1,
            beta2,
            eps,
        }
    }
}

/// One bias-corrected Adam update of `params` along `grads`.
///
/// Gradients are validated before anything is written, so a rejected step
/// leaves both parameters and state untouched.
pub fn adam_step<P: Parameters + ?Sized>(
    params: &mut P,
    grads: &P,
    state: &mut AdamState,
) -> Result<()> {
    let grad_blocks = grads.blocks();
    let mut param_blocks = params.blocks_mut();
    if grad_blocks.len() != param_blocks.len() || state.m.len() != param_blocks.len() {
        return Err(Error::shape(format!(
            "adam: {} parameter blocks, {} gradient blocks, {} state blocks",
            param_blocks.len(),
            grad_blocks.len(),
            state.m.len()
        )));
    }
    for (i, ((name, g), (_, p))) in grad_blocks.iter().zip(&param_blocks).enumerate() {
        if g.len() != p.len() || state.m[i].len() != p.len() {
            return Err(Error::shape(format!(
                "adam: block {name} has {} parameters but {} gradients",
                p.len(),
                g.len()
            )));
        }
        if let Some(j) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                param: name.clone(),
                detail: format!("non-finite gradient {} at index {j}", g[j]),
            });
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for (i, ((_, g), (_, p))) in grad_blocks.iter().zip(param_blocks.iter_mut()).enumerate() {
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        for j in 0..p.len() {
            let gj = g[j];
            m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * gj;
            v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * gj * gj;
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            p[j] -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    Ok(())
}
