use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{EmbeddingMode, Parameters};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Parameters,
    pub v: Parameters,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &Parameters) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

/// Whether the tensor at `path` is frozen under `mode`. Static mode
/// freezes the shared embedding, and with it a tied output projection.
pub fn is_frozen(path: &str, mode: EmbeddingMode) -> bool {
    mode == EmbeddingMode::Static && path == "embedding"
}

/// Scales `grads` so that the global norm over trainable tensors is at most
/// `max_norm`; returns the norm before scaling.
pub fn clip_global_norm(grads: &mut Parameters, max_norm: f64, mode: EmbeddingMode) -> f64 {
    let norm = grads
        .named()
        .into_iter()
        .filter(|(n, _)| !is_frozen(n, mode))
        .map(|(_, t)| t.sq_norm())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for (n, t) in grads.named_mut() {
            if !is_frozen(&n, mode) {
                t.data.iter_mut().for_each(|g| *g *= s);
            }
        }
    }
    norm
}

/// Bias-corrected Adam. Frozen tensors keep their values and moments.
pub fn adam_step(
    params: &mut Parameters,
    grads: &Parameters,
    state: &mut AdamState,
    cfg: &AdamConfig,
    mode: EmbeddingMode,
) -> Result<()> {
    if grads.layout() != params.layout() || state.m.layout() != params.layout() {
        return Err(Error::invalid("optimizer state does not match the parameters"));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let g_all = grads.named();
    let m_all = state.m.named_mut();
    let v_all = state.v.named_mut();
    for ((((name, p), (_, g)), (_, m)), (_, v)) in params.named_mut().into_iter().zip(g_all).zip(m_all).zip(v_all) {
        if is_frozen(&name, mode) {
            continue;
        }
        for i in 0..p.data.len() {
            let gi = g.data[i];
            m.data[i] = cfg.beta1 * m.data[i] + (1.0 - cfg.beta1) * gi;
            v.data[i] = cfg.beta2 * v.data[i] + (1.0 - cfg.beta2) * gi * gi;
            let update = cfg.lr * (m.data[i] / c1) / ((v.data[i] / c2).sqrt() + cfg.epsilon);
            if !update.is_finite() {
                return Err(Error::NonFinite(format!("Adam update of {name}")));
            }
            p.data[i] -= update;
        }
    }
    Ok(())
}
