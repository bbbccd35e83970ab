use crate::autodiff::Params;
use crate::error::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First/second moment estimates, one buffer per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    /// Number of updates taken so far.
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &Params) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Self {
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam update. Nothing is modified if any gradient is
/// non-finite or mis-shaped.
pub fn optimizer_step(state: &mut AdamState, params: &mut Params, grads: &[Vec<f64>], lr: f64) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Contract(format!(
            "{} gradients and {} moment buffers for {} parameters",
            grads.len(),
            state.m.len(),
            params.len()
        )));
    }
    for (id, g) in params.ids().zip(grads) {
        let name = params.name(id);
        if g.len() != params.get(id).numel() {
            return Err(Error::shape(
                "optimizer_step",
                format!("gradient for {name} has {} values, parameter has {}", g.len(), params.get(id).numel()),
            ));
        }
        if let Some(j) = g.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {name}[{j}]")));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    let ids: Vec<_> = params.ids().collect();
    for (i, id) in ids.into_iter().enumerate() {
        let p = params.get_mut(id).data_mut();
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for j in 0..p.len() {
            let g = grads[i][j];
            m[j] = BETA1 * m[j] + (1.0 - BETA1) * g;
            v[j] = BETA2 * v[j] + (1.0 - BETA2) * g * g;
            let mh = m[j] / c1;
            let vh = v[j] / c2;
            p[j] -= lr * mh / (vh.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// Global L2 norm over every gradient buffer.
pub fn global_norm(grads: &[Vec<f64>]) -> f64 {
    grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
}

/// Rescales all gradients so their global norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_gradients(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}
