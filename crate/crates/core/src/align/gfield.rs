//! The parametrized value-gradient field `g(x, t)`: a reward-gradient
//! leading term evaluated at the one-step Euler prediction, plus a
//! learnable correction network.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::flow::Velocity;
use crate::nets::Mlp;
use crate::numcore::vecmath;
use crate::numcore::{Tape, Var};
use crate::rewards::RewardSpec;

/// Weighting schedule `η_t` of the leading term; `η₁ = 1` in both cases
/// so the parametrization is exact at the terminal time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EtaSchedule {
    Quadratic,
    Linear,
}

impl EtaSchedule {
    pub fn eta(&self, t: f64) -> f64 {
        match self {
            EtaSchedule::Quadratic => t * t,
            EtaSchedule::Linear => t,
        }
    }
}

/// A gradient field `g(x, t) ≈ ∇V(x, t)`. Times are in `[0, 1]`.
pub trait GradField {
    fn dim(&self) -> usize;

    /// Evaluates the field on a batch of `(x, t)` points. Batch-dependent
    /// regularization (percentile clipping) applies within this batch.
    fn eval_batch(&self, points: &[(Vec<f64>, f64)]) -> Vec<Vec<f64>>;

    fn eval(&self, x: &[f64], t: f64) -> Vec<f64> {
        self.eval_batch(&[(x.to_vec(), t)]).pop().unwrap()
    }
}

/// Closure-backed gradient field for tests and analytic cases.
pub struct FnGradField<F: Fn(&[f64], f64) -> Vec<f64>> {
    pub dim: usize,
    pub f: F,
}

impl<F: Fn(&[f64], f64) -> Vec<f64>> GradField for FnGradField<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval_batch(&self, points: &[(Vec<f64>, f64)]) -> Vec<Vec<f64>> {
        points.iter().map(|(x, t)| (self.f)(x, *t)).collect()
    }
}

/// Single-Euler-step prediction `x̂₁ = x + (1−t)·v(x, t)`. The velocity
/// enters as a plain (frozen) evaluation, so downstream differentiation
/// treats it as a constant.
pub fn one_step_prediction(v: &dyn Velocity, x: &[f64], t: f64) -> Vec<f64> {
    vecmath::axpy(x, 1.0 - t, &v.eval(x, t))
}

/// Linear-interpolated p-th percentile of a non-empty slice (sorted
/// internally). `p` in `(0, 100]`.
pub fn percentile_threshold(values: &[f64], p: f64) -> f64 {
    debug_assert!(!values.is_empty());
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let k = sorted.len();
    if k == 1 {
        return sorted[0];
    }
    let rank = (p / 100.0) * (k - 1) as f64;
    let lo = libm::floor(rank) as usize;
    let frac = rank - lo as f64;
    if lo + 1 >= k {
        sorted[k - 1]
    } else {
        sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
    }
}

/// Caps each vector's L2 norm at the linear-interpolated p-th percentile
/// of the batch norms; vectors above the threshold are rescaled onto it.
pub fn percentile_clip(vectors: &[Vec<f64>], p: f64) -> Result<Vec<Vec<f64>>> {
    if vectors.is_empty() {
        return Err(Error::EmptyBatch {
            context: "percentile_clip",
        });
    }
    if !(p > 0.0 && p <= 100.0) {
        return Err(Error::InvalidConfig {
            detail: alloc::format!("clip percentile {p} outside (0, 100]"),
        });
    }
    let norms: Vec<f64> = vectors.iter().map(|v| vecmath::norm(v)).collect();
    let tau = percentile_threshold(&norms, p);
    Ok(vectors
        .iter()
        .zip(&norms)
        .map(|(v, &n)| {
            if n > tau && n > 0.0 {
                vecmath::scale(v, tau / n)
            } else {
                v.clone()
            }
        })
        .collect())
}

/// Forward-looking value-gradient parametrization:
/// `g(x, t) = −η_t · stopgrad(∇r(x̂₁(x, t))) + ν(x, t)`,
/// where `x̂₁` is the one-step prediction under `predictor` and the
/// reward-gradient leading terms are percentile-clipped within each
/// evaluation batch. At `t = 1` the leading term equals `−∇r(x)` exactly.
pub struct ValueGradientField<'a> {
    pub eta: EtaSchedule,
    /// Learnable correction ν (tiny-init MLP).
    pub correction: &'a Mlp,
    pub reward: &'a RewardSpec,
    /// Field defining the one-step prediction; frozen by construction.
    pub predictor: &'a dyn Velocity,
    pub clip_percentile: f64,
}

impl ValueGradientField<'_> {
    /// Leading terms `−η_t · ∇r(x̂₁)` for a batch of points, with the raw
    /// reward gradients clipped at the batch percentile when `clip` is
    /// set. The boundary loss uses the unclipped form so the terminal
    /// identity holds exactly.
    pub fn leading_batch(&self, points: &[(Vec<f64>, f64)], clip: bool) -> Result<Vec<Vec<f64>>> {
        let xs: Vec<Vec<f64>> = points.iter().map(|(x, _)| x.clone()).collect();
        let ts: Vec<f64> = points.iter().map(|(_, t)| *t).collect();
        let vels = self.predictor.eval_batch(&xs, &ts);
        let mut grads = Vec::with_capacity(points.len());
        for ((x, t), vel) in points.iter().zip(&vels) {
            let xhat = vecmath::axpy(x, 1.0 - t, vel);
            grads.push(self.reward.grad(&xhat)?);
        }
        let grads = if clip {
            percentile_clip(&grads, self.clip_percentile)?
        } else {
            grads
        };
        Ok(grads
            .iter()
            .zip(&ts)
            .map(|(g, &t)| vecmath::scale(g, -self.eta.eta(t)))
            .collect())
    }

    /// Records `g` on a tape over a batch of points: the (clipped) leading
    /// terms enter as constants and the correction network is recorded
    /// with `trainable` parameter naming. Returns a `(B, d)` node.
    pub fn eval_tape_batch(
        &self,
        tape: &mut Tape,
        points: &[(Vec<f64>, f64)],
        trainable: Option<&str>,
    ) -> Result<Var> {
        let lead = self.leading_batch(points, true)?;
        let xs: Vec<Vec<f64>> = points.iter().map(|(x, _)| x.clone()).collect();
        let ts: Vec<f64> = points.iter().map(|(_, t)| *t).collect();
        let lead_var = tape.constant_rows(&lead)?;
        let x_var = tape.constant_rows(&xs)?;
        let nu = self.correction.forward_tape(tape, x_var, &ts, trainable)?;
        tape.add(lead_var, nu)
    }
}

impl ValueGradientField<'_> {
    fn eval_batch_inner(&self, points: &[(Vec<f64>, f64)], clip: bool) -> Vec<Vec<f64>> {
        let lead = self
            .leading_batch(points, clip)
            .expect("value gradient: reward dim mismatch");
        let xs: Vec<Vec<f64>> = points.iter().map(|(x, _)| x.clone()).collect();
        let ts: Vec<f64> = points.iter().map(|(_, t)| *t).collect();
        let nu = self
            .correction
            .forward_batch(&xs, &ts)
            .expect("value gradient: correction dim mismatch");
        lead.iter().zip(&nu).map(|(l, n)| vecmath::add(l, n)).collect()
    }

    /// Field values with the raw (uncapped) leading terms. Used where g
    /// serves as a value estimate rather than a gradient signal, e.g.
    /// bootstrap targets.
    pub fn eval_batch_unclipped(&self, points: &[(Vec<f64>, f64)]) -> Vec<Vec<f64>> {
        self.eval_batch_inner(points, false)
    }
}

impl GradField for ValueGradientField<'_> {
    fn dim(&self) -> usize {
        self.correction.output_dim()
    }

    fn eval_batch(&self, points: &[(Vec<f64>, f64)]) -> Vec<Vec<f64>> {
        self.eval_batch_inner(points, true)
    }
}
