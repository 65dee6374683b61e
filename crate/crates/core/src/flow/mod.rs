//! ODE sampling, rectified-flow pretraining on toy distributions, and
//! exact log-density computation along the flow via the continuity
//! equation.

mod velocity;

pub use velocity::{
    ConstVelocity, DiffVelocity, FnVelocity, LinearVelocity, ResidualVelocity, TapeVelocity,
    Velocity,
};

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::nets::{Mlp, MlpSpec};
use crate::numcore::vecmath;
use crate::numcore::{adamw_step, AdamWConfig, OptState, Rng, Tape};

/// Finite-difference step for divergence estimates inside density
/// integration.
pub const DIVERGENCE_EPS: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Integrator {
    Euler,
    Rk4,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub n_steps: usize,
    pub integrator: Integrator,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            n_steps: 20,
            integrator: Integrator::Euler,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_steps == 0 {
            return Err(Error::InvalidConfig {
                detail: "n_steps must be >= 1".into(),
            });
        }
        Ok(())
    }
}

/// Time-stamped ODE states on the grid `t_i = i / n`, with the velocity
/// `v(x_i, t_i)` cached per grid point.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub velocities: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn n_steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn terminal(&self) -> &[f64] {
        self.states.last().unwrap()
    }
}

fn check_finite(x: &[f64], context: &'static str, step: usize) -> Result<()> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context,
            index: step,
        });
    }
    Ok(())
}

fn rk4_step(v: &dyn Velocity, x: &[f64], t: f64, h: f64) -> Vec<f64> {
    let k1 = v.eval(x, t);
    let k2 = v.eval(&vecmath::axpy(x, h / 2.0, &k1), t + h / 2.0);
    let k3 = v.eval(&vecmath::axpy(x, h / 2.0, &k2), t + h / 2.0);
    let k4 = v.eval(&vecmath::axpy(x, h, &k3), t + h);
    let mut out = x.to_vec();
    for i in 0..x.len() {
        out[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    out
}

/// Integrates `ẋ = v(x, t)` from `t = 0` to `t = 1` on a uniform grid.
pub fn integrate(v: &dyn Velocity, x0: &[f64], cfg: &SamplerConfig) -> Result<Trajectory> {
    cfg.validate()?;
    let n = cfg.n_steps;
    let h = 1.0 / n as f64;
    let mut times = Vec::with_capacity(n + 1);
    let mut states = Vec::with_capacity(n + 1);
    let mut velocities = Vec::with_capacity(n + 1);
    let mut x = x0.to_vec();
    check_finite(&x, "integrate", 0)?;
    for i in 0..n {
        let t = i as f64 / n as f64;
        times.push(t);
        let vel = v.eval(&x, t);
        check_finite(&vel, "integrate", i)?;
        velocities.push(vel.clone());
        states.push(x.clone());
        x = match cfg.integrator {
            Integrator::Euler => vecmath::axpy(&x, h, &vel),
            Integrator::Rk4 => rk4_step(v, &x, t, h),
        };
        check_finite(&x, "integrate", i + 1)?;
    }
    times.push(1.0);
    velocities.push(v.eval(&x, 1.0));
    states.push(x);
    Ok(Trajectory {
        times,
        states,
        velocities,
    })
}

/// Integrates a batch of initial points in lockstep, evaluating the field
/// batched per grid point. Produces exactly the same trajectories as
/// calling [`integrate`] per point.
pub fn collect_trajectories(
    v: &dyn Velocity,
    x0s: &[Vec<f64>],
    cfg: &SamplerConfig,
) -> Result<Vec<Trajectory>> {
    cfg.validate()?;
    let n = cfg.n_steps;
    let h = 1.0 / n as f64;
    let b = x0s.len();
    let mut xs: Vec<Vec<f64>> = x0s.to_vec();
    let mut trajs: Vec<Trajectory> = (0..b)
        .map(|_| Trajectory {
            times: Vec::with_capacity(n + 1),
            states: Vec::with_capacity(n + 1),
            velocities: Vec::with_capacity(n + 1),
        })
        .collect();
    for i in 0..=n {
        let t = i as f64 / n as f64;
        let ts = vec![t; b];
        let vels = v.eval_batch(&xs, &ts);
        for (k, traj) in trajs.iter_mut().enumerate() {
            check_finite(&xs[k], "integrate", i)?;
            check_finite(&vels[k], "integrate", i)?;
            traj.times.push(t);
            traj.states.push(xs[k].clone());
            traj.velocities.push(vels[k].clone());
        }
        if i == n {
            break;
        }
        match cfg.integrator {
            Integrator::Euler => {
                for k in 0..b {
                    xs[k] = vecmath::axpy(&xs[k], h, &vels[k]);
                }
            }
            Integrator::Rk4 => {
                for k in 0..b {
                    xs[k] = rk4_step(v, &xs[k], t, h);
                }
            }
        }
    }
    Ok(trajs)
}

/// Central-difference divergence `Σᵢ ∂vᵢ/∂xᵢ` at `(x, t)`.
pub fn divergence_fd(v: &dyn Velocity, x: &[f64], t: f64, eps: f64) -> f64 {
    debug_assert!(eps > 0.0);
    let mut div = 0.0;
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + eps;
        let plus = v.eval(&probe, t);
        probe[i] = x[i] - eps;
        let minus = v.eval(&probe, t);
        probe[i] = x[i];
        div += (plus[i] - minus[i]) / (2.0 * eps);
    }
    div
}

/// Log density of the standard normal base distribution.
pub fn standard_normal_logpdf(x: &[f64]) -> f64 {
    -0.5 * vecmath::norm2(x) - 0.5 * x.len() as f64 * libm::log(core::f64::consts::TAU)
}

/// Integrates backward from `x1` at `t = 1` and accumulates
/// `log p₁(x₁) = log p₀(x₀) − ∫₀¹ (∇·v)(x_t, t) dt` with rk4 on the state
/// and trapezoidal accumulation of the finite-difference divergence.
/// Returns `(x₀, log p₁(x₁))`.
pub fn log_density(v: &dyn Velocity, x1: &[f64], n_steps: usize) -> Result<(Vec<f64>, f64)> {
    log_density_at(v, x1, 1.0, n_steps)
}

/// Log density of the flow at an intermediate time `t ∈ [0, 1]`:
/// backward integration from `(x, t)` to `t = 0` on `round(t·n_steps)`
/// grid steps. Returns `(x₀, log p_t(x))`.
pub fn log_density_at(
    v: &dyn Velocity,
    x: &[f64],
    t: f64,
    n_steps: usize,
) -> Result<(Vec<f64>, f64)> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::TimeOutOfRange { t });
    }
    if t == 0.0 {
        return Ok((x.to_vec(), standard_normal_logpdf(x)));
    }
    let k = ((t * n_steps as f64) + 0.5) as usize;
    let k = k.max(1);
    let h = t / k as f64;
    let mut state = x.to_vec();
    let mut div_integral = 0.0;
    let mut div_here = divergence_fd(v, &state, t, DIVERGENCE_EPS);
    if !div_here.is_finite() {
        return Err(Error::NonFinite {
            context: "log_density divergence",
            index: k,
        });
    }
    for i in (0..k).rev() {
        let t_hi = (i + 1) as f64 * h;
        let t_lo = i as f64 * h;
        state = rk4_step(v, &state, t_hi, -(t_hi - t_lo));
        check_finite(&state, "log_density", i)?;
        let div_lo = divergence_fd(v, &state, t_lo, DIVERGENCE_EPS);
        if !div_lo.is_finite() {
            return Err(Error::NonFinite {
                context: "log_density divergence",
                index: i,
            });
        }
        div_integral += 0.5 * (t_hi - t_lo) * (div_here + div_lo);
        div_here = div_lo;
    }
    let logp = standard_normal_logpdf(&state) - div_integral;
    Ok((state, logp))
}

/// Toy data distributions standing in for the image domain.
#[derive(Debug, Clone, PartialEq)]
pub enum ToyDistribution {
    GaussianMixture {
        means: Vec<Vec<f64>>,
        /// Shared isotropic variance.
        variance: f64,
        weights: Vec<f64>,
    },
    /// 2D checkerboard over `cells_per_side²` cells of size `cell`,
    /// centered at the origin; mass on alternating cells.
    Checkerboard { cell: f64, cells_per_side: usize },
    Gaussian { mean: Vec<f64>, cov_diag: Vec<f64> },
}

impl ToyDistribution {
    pub fn dim(&self) -> usize {
        match self {
            ToyDistribution::GaussianMixture { means, .. } => {
                means.first().map_or(0, |m| m.len())
            }
            ToyDistribution::Checkerboard { .. } => 2,
            ToyDistribution::Gaussian { mean, .. } => mean.len(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |detail: alloc::string::String| Err(Error::InvalidConfig { detail });
        match self {
            ToyDistribution::GaussianMixture {
                means,
                variance,
                weights,
            } => {
                if means.is_empty() || means.len() != weights.len() {
                    return bad("mixture needs one weight per mean".into());
                }
                let d = means[0].len();
                if means.iter().any(|m| m.len() != d) {
                    return bad("mixture means must share a dimension".into());
                }
                if *variance <= 0.0 {
                    return bad("mixture variance must be positive".into());
                }
                if weights.iter().any(|&w| w <= 0.0) {
                    return bad("mixture weights must be positive".into());
                }
                let total: f64 = weights.iter().sum();
                if (total - 1.0).abs() > 1e-9 {
                    return bad(alloc::format!("mixture weights sum to {total}, not 1"));
                }
                Ok(())
            }
            ToyDistribution::Checkerboard {
                cell,
                cells_per_side,
            } => {
                if *cell <= 0.0 || *cells_per_side < 2 {
                    return bad("checkerboard needs cell > 0 and at least 2 cells per side".into());
                }
                Ok(())
            }
            ToyDistribution::Gaussian { mean, cov_diag } => {
                if mean.len() != cov_diag.len() || mean.is_empty() {
                    return bad("gaussian mean/cov length mismatch".into());
                }
                if cov_diag.iter().any(|&c| c < 0.0) {
                    return bad("gaussian variances must be >= 0".into());
                }
                Ok(())
            }
        }
    }

    pub fn sample(&self, rng: &mut Rng) -> Vec<f64> {
        match self {
            ToyDistribution::GaussianMixture {
                means,
                variance,
                weights,
            } => {
                let u = rng.uniform();
                let mut acc = 0.0;
                let mut pick = means.len() - 1;
                for (k, &w) in weights.iter().enumerate() {
                    acc += w;
                    if u < acc {
                        pick = k;
                        break;
                    }
                }
                let std = libm::sqrt(*variance);
                means[pick].iter().map(|&m| m + std * rng.normal()).collect()
            }
            ToyDistribution::Checkerboard {
                cell,
                cells_per_side,
            } => {
                let n = *cells_per_side;
                loop {
                    let i = rng.below(n);
                    let j = rng.below(n);
                    if (i + j) % 2 == 0 {
                        let half = n as f64 / 2.0;
                        let x = (i as f64 - half + rng.uniform()) * cell;
                        let y = (j as f64 - half + rng.uniform()) * cell;
                        return vec![x, y];
                    }
                }
            }
            ToyDistribution::Gaussian { mean, cov_diag } => mean
                .iter()
                .zip(cov_diag)
                .map(|(&m, &c)| m + libm::sqrt(c) * rng.normal())
                .collect(),
        }
    }
}

/// Trains a velocity field on straight-line interpolation paths:
/// minimizes `E‖v_θ(x_t, t) − (x₁ − x₀)‖²` with `x₀ ~ N(0, I)`,
/// `x₁ ~ data`, `x_t = (1−t)x₀ + t·x₁`, `t ~ U[0, 1]`.
/// Returns the trained field and the per-step loss curve.
pub fn pretrain_rectified_flow(
    data: &ToyDistribution,
    spec: &MlpSpec,
    steps: usize,
    batch: usize,
    lr: f64,
    rng: &mut Rng,
) -> Result<(Mlp, Vec<f64>)> {
    data.validate()?;
    let d = data.dim();
    if spec.input_dim != d || spec.output_dim != d {
        return Err(Error::ShapeMismatch {
            context: "pretrain_rectified_flow",
            detail: alloc::format!("spec dims {}→{} vs data dim {d}", spec.input_dim, spec.output_dim),
        });
    }
    let mut net = Mlp::init(spec.clone(), rng)?;
    let mut opt = OptState::new(AdamWConfig {
        lr,
        weight_decay: 0.0,
        ..AdamWConfig::default()
    });
    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        let mut xts = Vec::with_capacity(batch);
        let mut ts = Vec::with_capacity(batch);
        let mut targets = Vec::with_capacity(batch);
        for _ in 0..batch {
            let x0 = rng.normal_vec(d);
            let x1 = data.sample(rng);
            let t = rng.uniform();
            let xt: Vec<f64> = x0
                .iter()
                .zip(&x1)
                .map(|(&a, &b)| (1.0 - t) * a + t * b)
                .collect();
            xts.push(xt);
            ts.push(t);
            targets.push(vecmath::sub(&x1, &x0));
        }
        let diverged = |e: Error| match e {
            Error::NonFinite { .. } => Error::NonFinite {
                context: "pretrain step",
                index: step,
            },
            other => other,
        };
        let mut tape = Tape::new();
        let x = tape.constant_rows(&xts).map_err(diverged)?;
        let pred = net.forward_tape(&mut tape, x, &ts, Some("p.")).map_err(diverged)?;
        let target = tape.constant_rows(&targets).map_err(diverged)?;
        let sq = tape.sqdist(pred, target).map_err(diverged)?;
        let loss = tape.scale(sq, 1.0 / batch as f64).map_err(diverged)?;
        losses.push(tape.value(loss).scalar_value()?);
        let grads = tape.backward(loss).map_err(diverged)?;
        let local = net.grads_for(&grads, "p.");
        adamw_step(net.params_mut(), &local, &mut opt).map_err(diverged)?;
    }
    Ok((net, losses))
}
