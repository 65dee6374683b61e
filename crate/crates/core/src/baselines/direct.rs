//! Direct reward maximization through truncated computation graphs.
//!
//! Both updates ascend the reward of a sampler state: the gradient of
//! `r(x̂)` w.r.t. θ is taken by pairing the frozen analytic reward
//! gradient with the tape node for `x̂`, i.e. differentiating the scalar
//! `⟨stopgrad(∇r(x̂)), x̂⟩`, which is exactly the chain rule.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::flow::{collect_trajectories, ResidualVelocity, SamplerConfig, TapeVelocity, Velocity};
use crate::nets::Mlp;
use crate::numcore::{adamw_step, clip_global_norm, vecmath, OptState, Rng, Tape, Var};
use crate::rewards::RewardSpec;

/// Per-update telemetry for the baseline trainers.
#[derive(Debug, Clone, Copy)]
pub struct UpdateStats {
    /// The minimized objective (negative mean predicted reward for the
    /// direct methods).
    pub loss: f64,
    /// Pre-clip global gradient norm.
    pub grad_norm: f64,
    /// Mean reward of the sampled trajectory terminals.
    pub mean_reward: f64,
}

/// Surrogate `−mean ⟨stopgrad(∇r(x̂)), x̂⟩` whose θ-gradient is the exact
/// ascent direction on `mean r(x̂)`. Returns the loss node and the mean
/// reward of the predictions.
fn reward_ascent_loss(
    tape: &mut Tape,
    xhat: Var,
    reward: &RewardSpec,
) -> Result<(Var, f64)> {
    let rows = tape.value(xhat).rows();
    let b = rows.len();
    let mut grad_rows = Vec::with_capacity(b);
    let mut mean_pred = 0.0;
    for row in &rows {
        grad_rows.push(reward.grad(row)?);
        mean_pred += reward.eval(row)?;
    }
    mean_pred /= b as f64;
    let grads = tape.constant_rows(&grad_rows)?;
    let product = tape.mul(xhat, grads)?;
    let total = tape.sum(product)?;
    let loss = tape.scale(total, -1.0 / b as f64)?;
    Ok((loss, mean_pred))
}

/// One ReFL round: sample trajectories, draw a truncation step per
/// trajectory from `range = [lo, hi)`, form the one-step prediction
/// `x̂₁ = x_t + (1−t)·v_θ(x_t, t)` with `x_t` detached, and ascend
/// `∇_θ r(x̂₁)`.
#[allow(clippy::too_many_arguments)]
pub fn refl_update(
    residual: &mut Mlp,
    base: &dyn Velocity,
    reward: &RewardSpec,
    range: (usize, usize),
    sampler: &SamplerConfig,
    batch: usize,
    rng: &mut Rng,
    opt: &mut OptState,
    grad_clip: f64,
) -> Result<UpdateStats> {
    let (lo, hi) = range;
    if lo >= hi || hi > sampler.n_steps {
        return Err(Error::InvalidConfig {
            detail: alloc::format!(
                "refl truncation range [{lo}, {hi}) outside [0, {})",
                sampler.n_steps
            ),
        });
    }
    let d = base.dim();
    let x0s: Vec<Vec<f64>> = (0..batch).map(|_| rng.normal_vec(d)).collect();
    let v_theta = ResidualVelocity::new(base, residual);
    let trajs = collect_trajectories(&v_theta, &x0s, sampler)?;
    let mut mean_reward = 0.0;
    let mut xs = Vec::with_capacity(batch);
    let mut ts = Vec::with_capacity(batch);
    for traj in &trajs {
        mean_reward += reward.eval(traj.terminal())?;
        let j = lo + rng.below(hi - lo);
        xs.push(traj.states[j].clone());
        ts.push(traj.times[j]);
    }
    mean_reward /= trajs.len() as f64;

    // x̂₁ = [x + (1−t)·v_base(x,t)] + (1−t)·ṽ_θ(x,t); the bracket is a
    // constant since x is detached and the base field carries no θ.
    let frozen_part: Vec<Vec<f64>> = xs
        .iter()
        .zip(&ts)
        .map(|(x, &t)| vecmath::axpy(x, 1.0 - t, &base.eval(x, t)))
        .collect();
    let step_scale: Vec<Vec<f64>> = ts.iter().map(|&t| alloc::vec![1.0 - t; d]).collect();
    let mut tape = Tape::new();
    let x_var = tape.constant_rows(&xs)?;
    let vtilde = residual.forward_tape(&mut tape, x_var, &ts, Some("theta."))?;
    let scale_var = tape.constant_rows(&step_scale)?;
    let scaled = tape.mul(vtilde, scale_var)?;
    let frozen = tape.constant_rows(&frozen_part)?;
    let xhat = tape.add(frozen, scaled)?;
    let (loss, _) = reward_ascent_loss(&mut tape, xhat, reward)?;
    let loss_value = tape.value(loss).scalar_value()?;
    let grads = tape.backward(loss)?;
    let mut local = residual.grads_for(&grads, "theta.");
    let grad_norm = clip_global_norm(&mut local, grad_clip);
    adamw_step(residual.params_mut(), &local, opt)?;
    Ok(UpdateStats {
        loss: loss_value,
        grad_norm,
        mean_reward,
    })
}

/// One DRaFT-K round: backpropagate `r(x₁)` through the last `K` Euler
/// steps of the sampler, with the state at step `n−K` detached.
#[allow(clippy::too_many_arguments)]
pub fn draft_update(
    residual: &mut Mlp,
    base: &dyn TapeVelocity,
    reward: &RewardSpec,
    k: usize,
    sampler: &SamplerConfig,
    batch: usize,
    rng: &mut Rng,
    opt: &mut OptState,
    grad_clip: f64,
) -> Result<UpdateStats> {
    let n = sampler.n_steps;
    if k < 1 || k > n {
        return Err(Error::InvalidConfig {
            detail: alloc::format!("draft K {k} outside 1..={n}"),
        });
    }
    let d = base.dim();
    let x0s: Vec<Vec<f64>> = (0..batch).map(|_| rng.normal_vec(d)).collect();
    let v_theta = ResidualVelocity::new(base, residual);
    let trajs = collect_trajectories(&v_theta, &x0s, sampler)?;
    let mut mean_reward = 0.0;
    let mut detached: Vec<Vec<f64>> = Vec::with_capacity(batch);
    for traj in &trajs {
        mean_reward += reward.eval(traj.terminal())?;
        detached.push(traj.states[n - k].clone());
    }
    mean_reward /= trajs.len() as f64;

    let h = 1.0 / n as f64;
    let mut tape = Tape::new();
    let mut x = tape.constant_rows(&detached)?;
    for i in (n - k)..n {
        let t = i as f64 / n as f64;
        let ts = alloc::vec![t; batch];
        let vb = base.eval_tape(&mut tape, x, &ts)?;
        let vr = residual.forward_tape(&mut tape, x, &ts, Some("theta."))?;
        let v = tape.add(vb, vr)?;
        let step = tape.scale(v, h)?;
        x = tape.add(x, step)?;
    }
    let (loss, _) = reward_ascent_loss(&mut tape, x, reward)?;
    let loss_value = tape.value(loss).scalar_value()?;
    let grads = tape.backward(loss)?;
    let mut local = residual.grads_for(&grads, "theta.");
    let grad_norm = clip_global_norm(&mut local, grad_clip);
    adamw_step(residual.params_mut(), &local, opt)?;
    Ok(UpdateStats {
        loss: loss_value,
        grad_norm,
        mean_reward,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{ConstVelocity, Integrator};
    use crate::nets::{Activation, FinalInit, MlpSpec};
    use crate::numcore::{AdamWConfig, Tensor};

    fn small_net(d: usize, hidden: Vec<usize>, seed: u64) -> Mlp {
        let mut rng = Rng::new(seed);
        Mlp::init(
            MlpSpec {
                input_dim: d,
                time_embed_dim: 2,
                hidden,
                activation: Activation::Tanh,
                output_dim: d,
                final_init: FinalInit::Standard,
            },
            &mut rng,
        )
        .unwrap()
    }

    #[test]
    fn zero_reward_gradient_means_zero_update() {
        let flat = RewardSpec::Quadratic {
            h_mat: Tensor::zeros(alloc::vec![2, 2]),
            h_vec: alloc::vec![0.0, 0.0],
        };
        let base = ConstVelocity {
            c: alloc::vec![0.1, 0.1],
        };
        let mut net = small_net(2, alloc::vec![8], 3);
        let before = net.params().clone();
        let mut rng = Rng::new(4);
        let mut opt = OptState::new(AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        });
        let stats = refl_update(
            &mut net,
            &base,
            &flat,
            (15, 20),
            &SamplerConfig::default(),
            4,
            &mut rng,
            &mut opt,
            1.0,
        )
        .unwrap();
        assert_eq!(stats.grad_norm, 0.0);
        assert_eq!(net.params(), &before);

        let mut net2 = small_net(2, alloc::vec![8], 5);
        let before2 = net2.params().clone();
        let stats2 = draft_update(
            &mut net2,
            &base,
            &flat,
            5,
            &SamplerConfig::default(),
            4,
            &mut rng,
            &mut opt,
            1.0,
        )
        .unwrap();
        assert_eq!(stats2.grad_norm, 0.0);
        assert_eq!(net2.params(), &before2);
    }

    #[test]
    fn refl_gradient_ignores_earlier_steps() {
        // Unroll the sampler on the tape up to step j, insert a
        // stop-gradient there, and finish with the one-step prediction.
        // The θ-gradient must match the graph that starts from x_j as a
        // plain constant: everything before the truncation is isolated.
        let reward = RewardSpec::Quadratic {
            h_mat: Tensor::matrix(2, 2, alloc::vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            h_vec: alloc::vec![1.0, -1.0],
        };
        let base = ConstVelocity {
            c: alloc::vec![0.2, -0.1],
        };
        let net = small_net(2, alloc::vec![8], 7);
        let sampler = SamplerConfig::default();
        let n = sampler.n_steps;
        let j = 17;
        let mut rng = Rng::new(11);
        let x0 = rng.normal_vec(2);
        let v_theta = ResidualVelocity::new(&base, &net);
        let traj = crate::flow::integrate(&v_theta, &x0, &sampler).unwrap();
        let tj = traj.times[j];

        let one_step_tail = |tape: &mut Tape, x: Var| {
            let ts = [tj];
            let vb = base.eval_tape(tape, x, &ts).unwrap();
            let vr = net.forward_tape(tape, x, &ts, Some("theta.")).unwrap();
            let v = tape.add(vb, vr).unwrap();
            let scale_rows = alloc::vec![alloc::vec![1.0 - tj; 2]];
            let sc = tape.constant_rows(&scale_rows).unwrap();
            let scaled = tape.mul(v, sc).unwrap();
            tape.add(x, scaled).unwrap()
        };

        // Route A: full unroll with a stop-gradient at step j.
        let mut tape_a = Tape::new();
        let mut x = tape_a.constant_rows(&[x0.clone()]).unwrap();
        for i in 0..j {
            let t = i as f64 / n as f64;
            let ts = [t];
            let vb = base.eval_tape(&mut tape_a, x, &ts).unwrap();
            let vr = net.forward_tape(&mut tape_a, x, &ts, Some("theta.")).unwrap();
            let v = tape_a.add(vb, vr).unwrap();
            let step = tape_a.scale(v, 1.0 / n as f64).unwrap();
            x = tape_a.add(x, step).unwrap();
        }
        let detached = tape_a.stop_gradient(x).unwrap();
        let xhat_a = one_step_tail(&mut tape_a, detached);
        let (loss_a, _) = reward_ascent_loss(&mut tape_a, xhat_a, &reward).unwrap();
        let grads_a = tape_a.backward(loss_a).unwrap();

        // Route B: start from the stored state as a constant.
        let mut tape_b = Tape::new();
        let xj = tape_b.constant_rows(&[traj.states[j].clone()]).unwrap();
        let xhat_b = one_step_tail(&mut tape_b, xj);
        let (loss_b, _) = reward_ascent_loss(&mut tape_b, xhat_b, &reward).unwrap();
        let grads_b = tape_b.backward(loss_b).unwrap();

        for (name, ga) in &grads_a {
            assert_eq!(ga.data(), grads_b[name].data(), "{name}");
        }
    }

    #[test]
    fn draft_full_unroll_matches_finite_differences() {
        // 2-step sampler, 1D, single linear layer: the tape gradient of
        // r(x₁) w.r.t. θ must match central differences through the
        // unrolled sampler.
        let reward = RewardSpec::Quadratic {
            h_mat: Tensor::matrix(1, 1, alloc::vec![1.0]).unwrap(),
            h_vec: alloc::vec![0.7],
        };
        let base = ConstVelocity {
            c: alloc::vec![0.3],
        };
        let net = small_net(1, alloc::vec![], 13);
        let sampler = SamplerConfig {
            n_steps: 2,
            integrator: Integrator::Euler,
        };
        let x0 = alloc::vec![0.4];

        let terminal_reward = |net: &Mlp| {
            let v_theta = ResidualVelocity::new(&base, net);
            let traj = crate::flow::integrate(&v_theta, &x0, &sampler).unwrap();
            reward.eval(traj.terminal()).unwrap()
        };

        // Tape gradient via the draft construction (K = n_steps).
        let mut tape = Tape::new();
        let mut x = tape.constant_rows(&[x0.clone()]).unwrap();
        for i in 0..2 {
            let t = i as f64 / 2.0;
            let ts = [t];
            let vb = base.eval_tape(&mut tape, x, &ts).unwrap();
            let vr = net.forward_tape(&mut tape, x, &ts, Some("theta.")).unwrap();
            let v = tape.add(vb, vr).unwrap();
            let step = tape.scale(v, 0.5).unwrap();
            x = tape.add(x, step).unwrap();
        }
        let (loss, _) = reward_ascent_loss(&mut tape, x, &reward).unwrap();
        let grads = tape.backward(loss).unwrap();

        let step = 1e-6;
        for (name, g) in net.grads_for(&grads, "theta.") {
            let tensor = net.params().get(&name).unwrap().clone();
            for idx in 0..tensor.numel() {
                let mut plus = net.clone();
                let mut minus = net.clone();
                let mut tp = tensor.clone();
                tp.data_mut()[idx] += step;
                plus.params_mut().set(&name, tp).unwrap();
                let mut tm = tensor.clone();
                tm.data_mut()[idx] -= step;
                minus.params_mut().set(&name, tm).unwrap();
                let fd = (terminal_reward(&plus) - terminal_reward(&minus)) / (2.0 * step);
                // Loss is the negated ascent surrogate.
                let ad = -g.data()[idx];
                assert!(
                    (ad - fd).abs() <= 1e-5 * fd.abs().max(1e-3),
                    "{name}[{idx}]: {ad} vs {fd}"
                );
            }
        }
    }

    #[test]
    fn draft_k1_matches_refl_at_final_step() {
        // K = 1 detaches x at step n−1, exactly the ReFL graph truncated
        // at the final step: x̂ = x_{n−1} + Δt·v(x_{n−1}, t_{n−1}) differs
        // from the one-step prediction only in the (1−t) = Δt factor,
        // which coincides at t = (n−1)/n.
        let reward = RewardSpec::Quadratic {
            h_mat: Tensor::matrix(2, 2, alloc::vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            h_vec: alloc::vec![0.4, 0.4],
        };
        let base = ConstVelocity {
            c: alloc::vec![0.05, -0.05],
        };
        let sampler = SamplerConfig::default();
        let seed = 40;
        let run_draft = || {
            let mut net = small_net(2, alloc::vec![6], 15);
            let mut rng = Rng::new(seed);
            let mut opt = OptState::new(AdamWConfig {
                weight_decay: 0.0,
                ..AdamWConfig::default()
            });
            draft_update(
                &mut net, &base, &reward, 1, &sampler, 3, &mut rng, &mut opt, 1.0,
            )
            .unwrap();
            net
        };
        let run_refl = || {
            let mut net = small_net(2, alloc::vec![6], 15);
            let mut rng = Rng::new(seed);
            let mut opt = OptState::new(AdamWConfig {
                weight_decay: 0.0,
                ..AdamWConfig::default()
            });
            refl_update(
                &mut net,
                &base,
                &reward,
                (19, 20),
                &sampler,
                3,
                &mut rng,
                &mut opt,
                1.0,
            )
            .unwrap();
            net
        };
        let a = run_draft();
        let b = run_refl();
        for (name, ta) in a.params().iter() {
            let tb = b.params().get(name).unwrap();
            for (va, vb) in ta.data().iter().zip(tb.data()) {
                assert!((va - vb).abs() < 1e-12, "{name}: {va} vs {vb}");
            }
        }
    }
}
