//! AdamW with decoupled weight decay, and global-norm gradient clipping.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::numcore::{GradMap, ParamSet};

/// AdamW hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    /// Moment epsilon added to √v̂.
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 1e-2,
            eps: 1e-8,
        }
    }
}

/// Per-parameter first/second moments plus the step counter.
#[derive(Debug, Clone)]
pub struct OptState {
    pub cfg: AdamWConfig,
    step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl OptState {
    pub fn new(cfg: AdamWConfig) -> Self {
        OptState {
            cfg,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One decoupled-weight-decay update:
/// `p ← p − lr·wd·p − lr·m̂/(√v̂ + ε)` with bias-corrected moments.
pub fn adamw_step(params: &mut ParamSet, grads: &GradMap, state: &mut OptState) -> Result<()> {
    for name in grads.keys() {
        if params.get(name).is_none() {
            return Err(Error::ShapeMismatch {
                context: "adamw_step",
                detail: format!("gradient for unknown parameter `{name}`"),
            });
        }
    }
    state.step += 1;
    let t = state.step;
    let cfg = state.cfg.clone();
    let bc1 = 1.0 - libm::pow(cfg.beta1, t as f64);
    let bc2 = 1.0 - libm::pow(cfg.beta2, t as f64);

    for (name, p) in params.iter_mut() {
        let g = grads.get(name).ok_or_else(|| Error::ShapeMismatch {
            context: "adamw_step",
            detail: format!("missing gradient for `{name}`"),
        })?;
        if g.shape() != p.shape() {
            return Err(Error::ShapeMismatch {
                context: "adamw_step",
                detail: format!("`{name}`: {:?} vs {:?}", g.shape(), p.shape()),
            });
        }
        if !g.all_finite() {
            return Err(Error::NonFinite {
                context: "adamw_step gradient",
                index: t as usize,
            });
        }
        let n = p.numel();
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        let pd = p.data_mut();
        let gd = g.data();
        for i in 0..n {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gd[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gd[i] * gd[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            pd[i] -= cfg.lr * cfg.weight_decay * pd[i]
                + cfg.lr * m_hat / (libm::sqrt(v_hat) + cfg.eps);
        }
    }
    Ok(())
}

/// Rescales the whole gradient map so its global L2 norm is at most
/// `max_norm`. Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut GradMap, max_norm: f64) -> f64 {
    debug_assert!(max_norm > 0.0);
    let total: f64 = grads
        .values()
        .map(|t| t.data().iter().map(|v| v * v).sum::<f64>())
        .sum();
    let norm = libm::sqrt(total);
    if norm > max_norm {
        let s = max_norm / norm;
        for t in grads.values_mut() {
            for v in t.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}
