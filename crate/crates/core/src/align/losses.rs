//! Consistency, boundary, and matching losses with finite-difference
//! kernels, plus transition subsampling.
//!
//! The consistency residual realizes the gradient form of the reduced
//! optimality equation,
//! `R = ∂_t g + [∇g]ᵀ(v_base − β g) + [∇v_base]ᵀ g`,
//! with every spatial product approximated by a central directional
//! difference whose displacement direction is frozen (stop-gradient), so
//! no second-order parameter gradients arise.

use alloc::vec::Vec;

use crate::align::gfield::{GradField, ValueGradientField};
use crate::error::{Error, Result};
use crate::flow::{Trajectory, Velocity};
use crate::nets::Mlp;
use crate::numcore::vecmath;
use crate::numcore::{GradMap, Rng, Tape, Var};

/// How the time-derivative kernel of the consistency residual is formed.
///
/// `Partial` uses the pure partial difference `(g(x, t+ε) − g(x, t))/ε`,
/// which makes the residual exact (up to FD error) for oracle gradient
/// fields. `PaperC1` displaces the first evaluation along the current
/// velocity, `(g(x + ε·v_θ(x,t), t+ε) − g(x, t))/ε`, approximating the
/// material derivative along the flow instead.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConsistencyMode {
    Partial,
    PaperC1,
}

/// One subsampled trajectory transition: the state, its time, and the
/// velocity cached during collection.
#[derive(Debug, Clone)]
pub struct Transition {
    pub x: Vec<f64>,
    pub t: f64,
    pub v: Vec<f64>,
}

/// Transitions drawn per time bin from collected trajectories, plus every
/// trajectory's terminal state (terminals always feed the boundary loss).
#[derive(Debug, Clone, Default)]
pub struct TransitionBatch {
    pub transitions: Vec<Transition>,
    pub terminals: Vec<Vec<f64>>,
}

impl TransitionBatch {
    pub fn from_trajectories(
        trajs: &[Trajectory],
        bins: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let mut batch = TransitionBatch::default();
        for traj in trajs {
            batch
                .transitions
                .extend(subsample_transitions(traj, bins, rng)?);
            batch.terminals.push(traj.terminal().to_vec());
        }
        Ok(batch)
    }
}

/// Partitions the step indices `0..n_steps` into `bins` contiguous groups
/// (remainder spread over the earliest groups) and draws one index
/// uniformly from each.
pub fn subsample_indices(n_steps: usize, bins: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    if bins == 0 {
        return Err(Error::InvalidConfig {
            detail: "bins must be >= 1".into(),
        });
    }
    if bins > n_steps {
        return Err(Error::BinsExceedSteps { bins, n_steps });
    }
    let base = n_steps / bins;
    let rem = n_steps % bins;
    let mut out = Vec::with_capacity(bins);
    let mut start = 0;
    for b in 0..bins {
        let size = base + usize::from(b < rem);
        out.push(start + rng.below(size));
        start += size;
    }
    Ok(out)
}

/// One transition per time bin, drawn uniformly within each bin.
pub fn subsample_transitions(
    traj: &Trajectory,
    bins: usize,
    rng: &mut Rng,
) -> Result<Vec<Transition>> {
    let indices = subsample_indices(traj.n_steps(), bins, rng)?;
    Ok(indices
        .into_iter()
        .map(|idx| Transition {
            x: traj.states[idx].clone(),
            t: traj.times[idx],
            v: traj.velocities[idx].clone(),
        })
        .collect())
}

/// Plain (non-tape) consistency residual at a single point. Errors when
/// `t + ε > 1`; callers must shrink ε near the terminal time.
pub fn consistency_residual(
    g: &dyn GradField,
    v_base: &dyn Velocity,
    v_theta: &dyn Velocity,
    x: &[f64],
    t: f64,
    eps: f64,
    beta: f64,
    mode: ConsistencyMode,
) -> Result<Vec<f64>> {
    debug_assert!(eps > 0.0);
    if t + eps > 1.0 {
        return Err(Error::TimeOutOfRange { t: t + eps });
    }
    let g_here = g.eval(x, t);
    let t1 = match mode {
        ConsistencyMode::Partial => {
            let ahead = g.eval(x, t + eps);
            vecmath::scale(&vecmath::sub(&ahead, &g_here), 1.0 / eps)
        }
        ConsistencyMode::PaperC1 => {
            let displaced = vecmath::axpy(x, eps, &v_theta.eval(x, t));
            let ahead = g.eval(&displaced, t + eps);
            vecmath::scale(&vecmath::sub(&ahead, &g_here), 1.0 / eps)
        }
    };
    let w = vecmath::axpy(&v_base.eval(x, t), -beta, &g_here);
    let t2 = vecmath::scale(
        &vecmath::sub(
            &g.eval(&vecmath::axpy(x, eps, &w), t),
            &g.eval(&vecmath::axpy(x, -eps, &w), t),
        ),
        1.0 / (2.0 * eps),
    );
    let t3 = vecmath::scale(
        &vecmath::sub(
            &v_base.eval(&vecmath::axpy(x, eps, &g_here), t),
            &v_base.eval(&vecmath::axpy(x, -eps, &g_here), t),
        ),
        1.0 / (2.0 * eps),
    );
    Ok(vecmath::add(&vecmath::add(&t1, &t2), &t3))
}

fn mean_sq_rows(tape: &mut Tape, rows: Var, count: usize) -> Result<Var> {
    let sq = tape.square(rows)?;
    let total = tape.sum(sq)?;
    tape.scale(total, 1.0 / count as f64)
}

/// Records the backup form of the consistency objective: each transition
/// regresses `g(x, t)` onto the frozen one-step target
///
/// `g(x, t+h) + h·½[(T₂+T₃)(x, t) + (T₂+T₃)(x, t+h)]`,
///
/// where `h` bridges consecutive sampler grid times and the spatial terms
/// use the `eps`-step central kernels of [`consistency_residual`]. A zero
/// of this loss is a trapezoid-accurate discretization of the same
/// gradient consistency equation, but terminal information propagates
/// backward through the frozen targets instead of through the residual's
/// stiff difference quotients, which is what makes the value model
/// trainable in practice. Differentiable in the correction parameters
/// only.
#[allow(clippy::too_many_arguments)]
pub fn consistency_backup_loss_tape(
    tape: &mut Tape,
    vg: &ValueGradientField<'_>,
    v_base: &dyn Velocity,
    transitions: &[Transition],
    h_step: f64,
    eps: f64,
    beta: f64,
    trainable: Option<&str>,
) -> Result<Var> {
    if transitions.is_empty() {
        return Err(Error::EmptyBatch {
            context: "consistency_backup_loss",
        });
    }
    let b = transitions.len();
    let h_eff: Vec<f64> = transitions.iter().map(|tr| h_step.min(1.0 - tr.t)).collect();
    if h_eff.iter().any(|&h| h <= 0.0) {
        return Err(Error::TimeOutOfRange { t: 1.0 + h_step });
    }

    let pts_here: Vec<(Vec<f64>, f64)> =
        transitions.iter().map(|tr| (tr.x.clone(), tr.t)).collect();
    let pts_ahead: Vec<(Vec<f64>, f64)> = transitions
        .iter()
        .zip(&h_eff)
        .map(|(tr, &h)| (tr.x.clone(), tr.t + h))
        .collect();
    // Bootstrap targets are value estimates: the percentile cap would
    // bias the backward recursion, so target-side evaluations go
    // unclipped. The trainable side (the tape evaluation below) keeps the
    // batch cap, which is where it stabilizes gradients.
    let g_here = vg.eval_batch_unclipped(&pts_here);
    let g_ahead = vg.eval_batch_unclipped(&pts_ahead);
    let spatial = |g_end: &[Vec<f64>], pts_end: &[(Vec<f64>, f64)]| -> Result<Vec<Vec<f64>>> {
        let mut plus = Vec::with_capacity(b);
        let mut minus = Vec::with_capacity(b);
        for (tr, (g_e, (_, t_e))) in transitions.iter().zip(g_end.iter().zip(pts_end)) {
            let w = vecmath::axpy(&v_base.eval(&tr.x, *t_e), -beta, g_e);
            plus.push((vecmath::axpy(&tr.x, eps, &w), *t_e));
            minus.push((vecmath::axpy(&tr.x, -eps, &w), *t_e));
        }
        let g_plus = vg.eval_batch_unclipped(&plus);
        let g_minus = vg.eval_batch_unclipped(&minus);
        let mut rows = Vec::with_capacity(b);
        for (i, tr) in transitions.iter().enumerate() {
            let t_e = pts_end[i].1;
            let t2 = vecmath::scale(&vecmath::sub(&g_plus[i], &g_minus[i]), 1.0 / (2.0 * eps));
            let t3 = vecmath::scale(
                &vecmath::sub(
                    &v_base.eval(&vecmath::axpy(&tr.x, eps, &g_end[i]), t_e),
                    &v_base.eval(&vecmath::axpy(&tr.x, -eps, &g_end[i]), t_e),
                ),
                1.0 / (2.0 * eps),
            );
            rows.push(vecmath::add(&t2, &t3));
        }
        Ok(rows)
    };
    let s_here = spatial(&g_here, &pts_here)?;
    let s_ahead = spatial(&g_ahead, &pts_ahead)?;

    let targets: Vec<Vec<f64>> = (0..b)
        .map(|i| {
            vecmath::axpy(
                &g_ahead[i],
                0.5 * h_eff[i],
                &vecmath::add(&s_here[i], &s_ahead[i]),
            )
        })
        .collect();

    let g_here_var = vg.eval_tape_batch(tape, &pts_here, trainable)?;
    let target_var = tape.constant_rows(&targets)?;
    let resid = tape.sub(g_here_var, target_var)?;
    mean_sq_rows(tape, resid, b)
}

/// Records the consistency loss `mean ‖R‖²` over a transition batch on a
/// tape, differentiable in the correction parameters only. The kernel
/// step shrinks to `1 − t` for transitions within ε of the terminal time.
pub fn consistency_loss_tape(
    tape: &mut Tape,
    vg: &ValueGradientField<'_>,
    v_base: &dyn Velocity,
    transitions: &[Transition],
    eps: f64,
    beta: f64,
    mode: ConsistencyMode,
    trainable: Option<&str>,
) -> Result<Var> {
    if transitions.is_empty() {
        return Err(Error::EmptyBatch {
            context: "consistency_loss",
        });
    }
    let b = transitions.len();
    let d = transitions[0].x.len();
    let eps_eff: Vec<f64> = transitions.iter().map(|tr| eps.min(1.0 - tr.t)).collect();
    if eps_eff.iter().any(|&e| e <= 0.0) {
        return Err(Error::TimeOutOfRange { t: 1.0 + eps });
    }

    let pts_here: Vec<(Vec<f64>, f64)> =
        transitions.iter().map(|tr| (tr.x.clone(), tr.t)).collect();
    let g_here = vg.eval_batch(&pts_here);

    let pts_ahead: Vec<(Vec<f64>, f64)> = transitions
        .iter()
        .zip(&eps_eff)
        .map(|(tr, &e)| match mode {
            ConsistencyMode::Partial => (tr.x.clone(), tr.t + e),
            ConsistencyMode::PaperC1 => (vecmath::axpy(&tr.x, e, &tr.v), tr.t + e),
        })
        .collect();

    let mut pts_plus = Vec::with_capacity(b);
    let mut pts_minus = Vec::with_capacity(b);
    let mut t3_rows = Vec::with_capacity(b);
    for ((tr, g0), &e) in transitions.iter().zip(&g_here).zip(&eps_eff) {
        let w = vecmath::axpy(&v_base.eval(&tr.x, tr.t), -beta, g0);
        pts_plus.push((vecmath::axpy(&tr.x, e, &w), tr.t));
        pts_minus.push((vecmath::axpy(&tr.x, -e, &w), tr.t));
        let t3 = vecmath::scale(
            &vecmath::sub(
                &v_base.eval(&vecmath::axpy(&tr.x, e, g0), tr.t),
                &v_base.eval(&vecmath::axpy(&tr.x, -e, g0), tr.t),
            ),
            1.0 / (2.0 * e),
        );
        t3_rows.push(t3);
    }

    let g_ahead_var = vg.eval_tape_batch(tape, &pts_ahead, trainable)?;
    let g_here_var = vg.eval_tape_batch(tape, &pts_here, trainable)?;
    let g_plus_var = vg.eval_tape_batch(tape, &pts_plus, trainable)?;
    let g_minus_var = vg.eval_tape_batch(tape, &pts_minus, trainable)?;

    let inv_eps: Vec<Vec<f64>> = eps_eff.iter().map(|&e| alloc::vec![1.0 / e; d]).collect();
    let inv_2eps: Vec<Vec<f64>> = eps_eff
        .iter()
        .map(|&e| alloc::vec![1.0 / (2.0 * e); d])
        .collect();
    let inv_eps_var = tape.constant_rows(&inv_eps)?;
    let inv_2eps_var = tape.constant_rows(&inv_2eps)?;

    let dt = tape.sub(g_ahead_var, g_here_var)?;
    let t1 = tape.mul(dt, inv_eps_var)?;
    let dx = tape.sub(g_plus_var, g_minus_var)?;
    let t2 = tape.mul(dx, inv_2eps_var)?;
    let t3 = tape.constant_rows(&t3_rows)?;
    let r = tape.add(t1, t2)?;
    let r = tape.add(r, t3)?;
    mean_sq_rows(tape, r, b)
}

/// Records the boundary loss `mean ‖g(x₁, 1) + ∇r(x₁)‖²`. The leading
/// term is used unclipped here: at `t = 1` it equals `−∇r(x₁)` exactly,
/// so the loss reduces to `mean ‖ν(x₁, 1)‖²` and is exactly zero at
/// tiny initialization.
pub fn boundary_loss_tape(
    tape: &mut Tape,
    vg: &ValueGradientField<'_>,
    terminals: &[Vec<f64>],
    trainable: Option<&str>,
) -> Result<Var> {
    if terminals.is_empty() {
        return Err(Error::EmptyBatch {
            context: "boundary_loss",
        });
    }
    let points: Vec<(Vec<f64>, f64)> = terminals.iter().map(|x| (x.clone(), 1.0)).collect();
    let lead = vg.leading_batch(&points, false)?;
    let offsets: Result<Vec<Vec<f64>>> = terminals
        .iter()
        .zip(&lead)
        .map(|(x, l)| Ok(vecmath::add(l, &vg.reward.grad(x)?)))
        .collect();
    let offset_var = tape.constant_rows(&offsets?)?;
    let x_var = tape.constant_rows(terminals)?;
    let ts = alloc::vec![1.0; terminals.len()];
    let nu = vg.correction.forward_tape(tape, x_var, &ts, trainable)?;
    let resid = tape.add(offset_var, nu)?;
    mean_sq_rows(tape, resid, terminals.len())
}

/// Records the matching loss `mean ‖ṽ(x_t, t) + β·stopgrad(g(x_t, t))‖²`,
/// differentiable in the residual field parameters only.
pub fn matching_loss_tape(
    tape: &mut Tape,
    residual: &Mlp,
    vg: &ValueGradientField<'_>,
    transitions: &[Transition],
    beta: f64,
    trainable: Option<&str>,
) -> Result<Var> {
    if transitions.is_empty() {
        return Err(Error::EmptyBatch {
            context: "matching_loss",
        });
    }
    let points: Vec<(Vec<f64>, f64)> =
        transitions.iter().map(|tr| (tr.x.clone(), tr.t)).collect();
    let g = vg.eval_batch(&points);
    let targets: Vec<Vec<f64>> = g.iter().map(|gi| vecmath::scale(gi, beta)).collect();
    let xs: Vec<Vec<f64>> = transitions.iter().map(|tr| tr.x.clone()).collect();
    let ts: Vec<f64> = transitions.iter().map(|tr| tr.t).collect();
    let x_var = tape.constant_rows(&xs)?;
    let vtilde = residual.forward_tape(tape, x_var, &ts, trainable)?;
    let target_var = tape.constant_rows(&targets)?;
    let resid = tape.add(vtilde, target_var)?;
    mean_sq_rows(tape, resid, transitions.len())
}

/// Consistency loss with its correction-network gradients on a fresh tape.
pub fn consistency_loss(
    vg: &ValueGradientField<'_>,
    v_base: &dyn Velocity,
    transitions: &[Transition],
    eps: f64,
    beta: f64,
    mode: ConsistencyMode,
) -> Result<(f64, GradMap)> {
    let mut tape = Tape::new();
    let loss = consistency_loss_tape(
        &mut tape,
        vg,
        v_base,
        transitions,
        eps,
        beta,
        mode,
        Some(""),
    )?;
    let grads = tape.backward(loss)?;
    Ok((tape.value(loss).scalar_value()?, grads))
}

/// Boundary loss with its correction-network gradients on a fresh tape.
pub fn boundary_loss(
    vg: &ValueGradientField<'_>,
    terminals: &[Vec<f64>],
) -> Result<(f64, GradMap)> {
    let mut tape = Tape::new();
    let loss = boundary_loss_tape(&mut tape, vg, terminals, Some(""))?;
    let grads = tape.backward(loss)?;
    Ok((tape.value(loss).scalar_value()?, grads))
}

/// Matching loss with its residual-field gradients on a fresh tape.
pub fn matching_loss(
    residual: &Mlp,
    vg: &ValueGradientField<'_>,
    transitions: &[Transition],
    beta: f64,
) -> Result<(f64, GradMap)> {
    let mut tape = Tape::new();
    let loss = matching_loss_tape(&mut tape, residual, vg, transitions, beta, Some(""))?;
    let grads = tape.backward(loss)?;
    Ok((tape.value(loss).scalar_value()?, grads))
}
