//! Backward costate integration along stored forward trajectories, and
//! the matching update that regresses the residual field onto costates.

use alloc::vec::Vec;

use crate::align::subsample_indices;
use crate::error::{Error, Result};
use crate::flow::{Trajectory, Velocity};
use crate::nets::Mlp;
use crate::numcore::{adamw_step, clip_global_norm, vecmath, OptState, Rng, Tape};
use crate::rewards::RewardSpec;

/// Costates `a(t_i)` on the same grid as the forward trajectory they were
/// solved along. The terminal costate is `−∇r(x₁)`.
#[derive(Debug, Clone)]
pub struct AdjointTrajectory {
    pub forward: Trajectory,
    pub costates: Vec<Vec<f64>>,
}

/// Central directional difference `(v(x + ε·dir, t) − v(x − ε·dir, t)) / 2ε`,
/// the frozen-direction approximation of the Jacobian product `[∇v]·dir`.
fn directional_derivative(
    v: &dyn Velocity,
    x: &[f64],
    t: f64,
    dir: &[f64],
    eps: f64,
) -> Vec<f64> {
    let plus = v.eval(&vecmath::axpy(x, eps, dir), t);
    let minus = v.eval(&vecmath::axpy(x, -eps, dir), t);
    vecmath::scale(&vecmath::sub(&plus, &minus), 1.0 / (2.0 * eps))
}

/// Solves the full costate ODE
/// `ȧ = −( λ·[∇ṽ]ᵀṽ + [∇v_θ]ᵀa )`, `a(1) = −∇r(x₁)`,
/// backward along the stored states with Euler steps on the trajectory
/// grid. Spatial products use central directional differences with frozen
/// directions, evaluated at the upper grid point of each step.
pub fn pmp_adjoint_solve(
    traj: Trajectory,
    v_theta: &dyn Velocity,
    v_base: &dyn Velocity,
    reward: &RewardSpec,
    lambda: f64,
    eps: f64,
) -> Result<AdjointTrajectory> {
    let n = traj.n_steps();
    let mut costates = alloc::vec![Vec::new(); n + 1];
    costates[n] = vecmath::scale(&reward.grad(traj.terminal())?, -1.0);
    for i in (0..n).rev() {
        let x = &traj.states[i + 1];
        let t = traj.times[i + 1];
        let dt = traj.times[i + 1] - traj.times[i];
        let vtilde = vecmath::sub(&v_theta.eval(x, t), &v_base.eval(x, t));
        let tilde_field = ResidualOf { v_theta, v_base };
        let d_tilde = directional_derivative(&tilde_field, x, t, &vtilde, eps);
        let d_theta = directional_derivative(v_theta, x, t, &costates[i + 1], eps);
        // a_i = a_{i+1} − dt·ȧ with ȧ = −(λ·[∇ṽ]ṽ + [∇v_θ]a).
        let adot = vecmath::scale(&vecmath::axpy(&vecmath::scale(&d_tilde, lambda), 1.0, &d_theta), -1.0);
        let a = vecmath::axpy(&costates[i + 1], -dt, &adot);
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "pmp_adjoint_solve",
                index: i,
            });
        }
        costates[i] = a;
    }
    Ok(AdjointTrajectory {
        forward: traj,
        costates,
    })
}

struct ResidualOf<'a> {
    v_theta: &'a dyn Velocity,
    v_base: &'a dyn Velocity,
}

impl Velocity for ResidualOf<'_> {
    fn dim(&self) -> usize {
        self.v_theta.dim()
    }

    fn eval(&self, x: &[f64], t: f64) -> Vec<f64> {
        vecmath::sub(&self.v_theta.eval(x, t), &self.v_base.eval(x, t))
    }
}

/// Solves the lean costate ODE `ȧ = −[∇v_base]ᵀa`, which drops every
/// control-dependent term, backward along the trajectory.
pub fn lean_adjoint_solve(
    traj: Trajectory,
    v_base: &dyn Velocity,
    reward: &RewardSpec,
    eps: f64,
) -> Result<AdjointTrajectory> {
    let n = traj.n_steps();
    let mut costates = alloc::vec![Vec::new(); n + 1];
    costates[n] = vecmath::scale(&reward.grad(traj.terminal())?, -1.0);
    for i in (0..n).rev() {
        let x = &traj.states[i + 1];
        let t = traj.times[i + 1];
        let dt = traj.times[i + 1] - traj.times[i];
        let d_base = directional_derivative(v_base, x, t, &costates[i + 1], eps);
        let a = vecmath::axpy(&costates[i + 1], dt, &d_base);
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "lean_adjoint_solve",
                index: i,
            });
        }
        costates[i] = a;
    }
    Ok(AdjointTrajectory {
        forward: traj,
        costates,
    })
}

/// One AdamW step on `mean ‖ṽ_θ(x_t, t) + β·a_t‖²` over transitions
/// subsampled per time bin from each adjoint trajectory. Returns the loss
/// and the pre-clip gradient norm.
pub fn adjoint_matching_update(
    residual: &mut Mlp,
    adjoints: &[AdjointTrajectory],
    beta: f64,
    bins: usize,
    rng: &mut Rng,
    opt: &mut OptState,
    grad_clip: f64,
) -> Result<(f64, f64)> {
    if adjoints.is_empty() {
        return Err(Error::EmptyBatch {
            context: "adjoint_matching_update",
        });
    }
    let mut xs = Vec::new();
    let mut ts = Vec::new();
    let mut targets = Vec::new();
    for adj in adjoints {
        if adj.costates.len() != adj.forward.times.len() {
            return Err(Error::GridMismatch {
                context: "adjoint_matching_update",
            });
        }
        for idx in subsample_indices(adj.forward.n_steps(), bins, rng)? {
            xs.push(adj.forward.states[idx].clone());
            ts.push(adj.forward.times[idx]);
            targets.push(vecmath::scale(&adj.costates[idx], beta));
        }
    }
    let mut tape = Tape::new();
    let x_var = tape.constant_rows(&xs)?;
    let vtilde = residual.forward_tape(&mut tape, x_var, &ts, Some("theta."))?;
    let target_var = tape.constant_rows(&targets)?;
    let resid = tape.add(vtilde, target_var)?;
    let sq = tape.square(resid)?;
    let total = tape.sum(sq)?;
    let loss = tape.scale(total, 1.0 / xs.len() as f64)?;
    let loss_value = tape.value(loss).scalar_value()?;
    let grads = tape.backward(loss)?;
    let mut local = residual.grads_for(&grads, "theta.");
    let grad_norm = clip_global_norm(&mut local, grad_clip);
    adamw_step(residual.params_mut(), &local, opt)?;
    Ok((loss_value, grad_norm))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{integrate, ConstVelocity, Integrator, LinearVelocity, SamplerConfig};
    use crate::numcore::Tensor;

    fn quadratic_reward_2d() -> RewardSpec {
        RewardSpec::Quadratic {
            h_mat: Tensor::matrix(2, 2, alloc::vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            h_vec: alloc::vec![0.4, -0.7],
        }
    }

    /// Matrix exponential of a small matrix by scaling and squaring with a
    /// Taylor series; test-only oracle.
    fn expm(a: &[f64], n: usize, scale_pow: u32) -> Vec<f64> {
        let s = libm::pow(2.0, -(scale_pow as f64));
        let scaled = vecmath::scale(a, s);
        let mut result = vecmath::identity(n);
        let mut term = vecmath::identity(n);
        for k in 1..24 {
            term = vecmath::scale(&vecmath::mat_mul(&term, &scaled, n, n, n), 1.0 / k as f64);
            result = vecmath::add(&result, &term);
        }
        for _ in 0..scale_pow {
            result = vecmath::mat_mul(&result, &result, n, n, n);
        }
        result
    }

    #[test]
    fn constant_field_keeps_costate_constant() {
        let v = ConstVelocity {
            c: alloc::vec![0.5, -0.5],
        };
        let reward = quadratic_reward_2d();
        let traj = integrate(&v, &[0.2, 0.1], &SamplerConfig::default()).unwrap();
        let adj = pmp_adjoint_solve(traj, &v, &v, &reward, 2.0, 1e-3).unwrap();
        let terminal = adj.costates.last().unwrap().clone();
        let expect = vecmath::scale(&reward.grad(adj.forward.terminal()).unwrap(), -1.0);
        assert_eq!(terminal, expect);
        for a in &adj.costates {
            assert!(vecmath::dist2(a, &terminal) < 1e-24);
        }
    }

    #[test]
    fn linear_field_matches_matrix_exponential() {
        // Symmetric A so the frozen-direction kernel matches [∇v]ᵀ = A.
        let a_mat = alloc::vec![-0.35, 0.15, 0.15, -0.25];
        let v = LinearVelocity::new(Tensor::matrix(2, 2, a_mat.clone()).unwrap());
        let reward = quadratic_reward_2d();
        let cfg = SamplerConfig {
            n_steps: 100,
            integrator: Integrator::Euler,
        };
        let traj = integrate(&v, &[1.0, -0.6], &cfg).unwrap();
        let terminal_costate =
            vecmath::scale(&reward.grad(traj.terminal()).unwrap(), -1.0);
        let lean = lean_adjoint_solve(traj.clone(), &v, &reward, 1e-3).unwrap();
        let pmp = pmp_adjoint_solve(traj, &v, &v, &reward, 3.0, 1e-3).unwrap();
        for (i, &t) in lean.forward.times.iter().enumerate() {
            let phi = expm(&vecmath::scale(&a_mat, 1.0 - t), 2, 6);
            let expect = vecmath::mat_vec(&phi, 2, 2, &terminal_costate);
            assert!(
                vecmath::dist2(&lean.costates[i], &expect) < 1e-6,
                "t={t}: {:?} vs {expect:?}",
                lean.costates[i]
            );
            // ṽ ≡ 0 makes both solvers identical.
            assert_eq!(lean.costates[i], pmp.costates[i]);
        }
    }

    #[test]
    fn adjoint_error_halves_with_step() {
        let a_mat = alloc::vec![-0.4, 0.1, 0.1, -0.3];
        let v = LinearVelocity::new(Tensor::matrix(2, 2, a_mat.clone()).unwrap());
        let reward = quadratic_reward_2d();
        let err_at = |n: usize| {
            let cfg = SamplerConfig {
                n_steps: n,
                integrator: Integrator::Euler,
            };
            let traj = integrate(&v, &[0.8, 0.5], &cfg).unwrap();
            let terminal = vecmath::scale(&reward.grad(traj.terminal()).unwrap(), -1.0);
            let lean = lean_adjoint_solve(traj, &v, &reward, 1e-4).unwrap();
            let phi = expm(&a_mat, 2, 6);
            let expect = vecmath::mat_vec(&phi, 2, 2, &terminal);
            libm::sqrt(vecmath::dist2(&lean.costates[0], &expect))
        };
        // The terminal state itself moves with n, so compare orders of
        // magnitude: the error should shrink roughly linearly.
        let e50 = err_at(50);
        let e100 = err_at(100);
        let ratio = e50 / e100;
        assert!((1.5..3.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn matching_update_reaches_zero_loss_target() {
        // If ṽ already equals −β·a on the batch, the loss is ~0 and the
        // update leaves parameters nearly unchanged. Easiest such case:
        // zero costates via a flat reward.
        let v = ConstVelocity {
            c: alloc::vec![0.3, 0.3],
        };
        let flat = RewardSpec::Quadratic {
            h_mat: Tensor::zeros(alloc::vec![2, 2]),
            h_vec: alloc::vec![0.0, 0.0],
        };
        let traj = integrate(&v, &[0.1, 0.2], &SamplerConfig::default()).unwrap();
        let adj = lean_adjoint_solve(traj, &v, &flat, 1e-3).unwrap();
        let mut rng = Rng::new(8);
        let mut net = Mlp::init(
            crate::nets::MlpSpec {
                input_dim: 2,
                time_embed_dim: 4,
                hidden: alloc::vec![8],
                activation: crate::nets::Activation::Silu,
                output_dim: 2,
                final_init: crate::nets::FinalInit::Tiny,
            },
            &mut rng,
        )
        .unwrap();
        let mut opt = OptState::new(crate::numcore::AdamWConfig::default());
        let (loss, _) =
            adjoint_matching_update(&mut net, &[adj], 0.5, 5, &mut rng, &mut opt, 1.0).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn tilde_zero_loss_is_beta_squared_costate_norm() {
        let v = ConstVelocity {
            c: alloc::vec![0.1, -0.1],
        };
        let reward = quadratic_reward_2d();
        let traj = integrate(&v, &[0.4, 0.7], &SamplerConfig::default()).unwrap();
        let adj = lean_adjoint_solve(traj, &v, &reward, 1e-3).unwrap();
        // Constant field: a(t) = a(1) everywhere.
        let a1 = adj.costates.last().unwrap().clone();
        let mut rng = Rng::new(9);
        let mut net = Mlp::init(
            crate::nets::MlpSpec {
                input_dim: 2,
                time_embed_dim: 4,
                hidden: alloc::vec![8],
                activation: crate::nets::Activation::Silu,
                output_dim: 2,
                final_init: crate::nets::FinalInit::Tiny,
            },
            &mut rng,
        )
        .unwrap();
        let beta = 0.8;
        let mut opt = OptState::new(crate::numcore::AdamWConfig::default());
        let (loss, _) =
            adjoint_matching_update(&mut net, &[adj], beta, 5, &mut rng, &mut opt, 1.0)
                .unwrap();
        let expect = beta * beta * vecmath::norm2(&a1);
        assert!((loss - expect).abs() < 1e-12, "{loss} vs {expect}");
    }

    #[test]
    fn grid_mismatch_is_detected() {
        let v = ConstVelocity {
            c: alloc::vec![0.0, 0.0],
        };
        let reward = quadratic_reward_2d();
        let traj = integrate(&v, &[0.0, 0.0], &SamplerConfig::default()).unwrap();
        let mut adj = lean_adjoint_solve(traj, &v, &reward, 1e-3).unwrap();
        adj.costates.pop();
        let mut rng = Rng::new(1);
        let mut net = Mlp::init(
            crate::nets::MlpSpec {
                input_dim: 2,
                time_embed_dim: 4,
                hidden: alloc::vec![8],
                activation: crate::nets::Activation::Silu,
                output_dim: 2,
                final_init: crate::nets::FinalInit::Tiny,
            },
            &mut rng,
        )
        .unwrap();
        let mut opt = OptState::new(crate::numcore::AdamWConfig::default());
        assert!(matches!(
            adjoint_matching_update(&mut net, &[adj], 1.0, 5, &mut rng, &mut opt, 1.0),
            Err(Error::GridMismatch { .. })
        ));
    }
}
