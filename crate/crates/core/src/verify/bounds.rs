//! Distribution-shift diagnostics between a finetuned flow and its base:
//! Monte Carlo KL with the exact ODE-density identity decomposition, and
//! the coupled Wasserstein-2 upper bound.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::flow::{
    divergence_fd, integrate, log_density, log_density_at, DiffVelocity, Integrator,
    SamplerConfig, Velocity, DIVERGENCE_EPS,
};
use crate::numcore::vecmath;
use crate::numcore::Rng;

/// Step for the score finite differences `∇log q_t`.
const SCORE_FD_EPS: f64 = 1e-4;

/// KL estimate between two flows sharing the standard normal base, with
/// the identity decomposition
/// `KL(p₁‖q₁) = −∫E_p[ṽ·∇log q_t]dt − ∫E_p[∇·ṽ]dt`
/// and the bound terms `A = ½∫E‖ṽ‖²`, `B = ½∫E‖∇log q_t‖²`,
/// `C = ∫E[∇·ṽ]` (so `KL ≤ A + B − C`).
#[derive(Debug, Clone, Copy)]
pub struct KlReport {
    pub kl_mc: f64,
    pub stderr: f64,
    pub identity_rhs: f64,
    pub term_control: f64,
    pub term_path: f64,
    pub term_divergence: f64,
    pub n_samples: usize,
}

/// Inverse standard normal CDF: rational initial guess refined with one
/// Halley step against the erfc-based CDF.
fn norm_quantile(p: f64) -> f64 {
    debug_assert!(p > 0.0 && p < 1.0);
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;
    let mut x = if p < P_LOW {
        let q = libm::sqrt(-2.0 * libm::log(p));
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = libm::sqrt(-2.0 * libm::log(1.0 - p));
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    // Halley refinement on Φ(x) − p.
    let err = 0.5 * libm::erfc(-x / core::f64::consts::SQRT_2) - p;
    let u = err * libm::sqrt(core::f64::consts::TAU) * libm::exp(x * x / 2.0);
    x -= u / (1.0 + x * u / 2.0);
    x
}

/// Base-distribution draws: jittered stratification in 1D (one sample per
/// probability stratum) keeps the Monte Carlo error of smooth integrands
/// far below the plain-sampling floor; higher dimensions sample plainly.
fn base_draws(d: usize, n: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    if d == 1 {
        (0..n)
            .map(|i| {
                let u = (i as f64 + rng.uniform()) / n as f64;
                vec![norm_quantile(u.clamp(f64::MIN_POSITIVE, 1.0 - 1e-16))]
            })
            .collect()
    } else {
        (0..n).map(|_| rng.normal_vec(d)).collect()
    }
}

/// Score of the comparison flow at `(x, t)` by central differences of its
/// backward-integrated log density; at `t = 0` the base score `−x` is
/// exact.
fn score_fd(v_q: &dyn Velocity, x: &[f64], t: f64, n_steps: usize) -> Result<Vec<f64>> {
    if t == 0.0 {
        return Ok(vecmath::scale(x, -1.0));
    }
    let mut score = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + SCORE_FD_EPS;
        let (_, plus) = log_density_at(v_q, &probe, t, n_steps)?;
        probe[i] = x[i] - SCORE_FD_EPS;
        let (_, minus) = log_density_at(v_q, &probe, t, n_steps)?;
        probe[i] = x[i];
        score[i] = (plus - minus) / (2.0 * SCORE_FD_EPS);
    }
    Ok(score)
}

/// Estimates `KL(p₁ ‖ q₁)` by Monte Carlo over `x₁ ~ p₁` with exact log
/// densities from backward integration of both fields, together with the
/// identity right-hand side and bound terms accumulated along the
/// p-trajectories.
pub fn kl_between_flows(
    v_p: &dyn Velocity,
    v_q: &dyn Velocity,
    n_samples: usize,
    n_steps: usize,
    rng: &mut Rng,
) -> Result<KlReport> {
    let d = v_p.dim();
    if v_q.dim() != d {
        return Err(Error::ShapeMismatch {
            context: "kl_between_flows",
            detail: alloc::format!("{d} vs {}", v_q.dim()),
        });
    }
    if n_samples == 0 {
        return Err(Error::TooFewSamples { n: 0, need: 1 });
    }
    let cfg = SamplerConfig {
        n_steps,
        integrator: Integrator::Rk4,
    };
    let x0s = base_draws(d, n_samples, rng);
    let tilde = DiffVelocity { p: v_p, q: v_q };

    let mut diffs = Vec::with_capacity(n_samples);
    let grid = n_steps + 1;
    let mut mean_dot = vec![0.0; grid];
    let mut mean_div = vec![0.0; grid];
    let mut mean_ctrl = vec![0.0; grid];
    let mut mean_path = vec![0.0; grid];
    let mut times = vec![0.0; grid];

    for x0 in &x0s {
        let traj = integrate(v_p, x0, &cfg)?;
        let x1 = traj.terminal().to_vec();
        let (_, logp) = log_density(v_p, &x1, n_steps)?;
        let (_, logq) = log_density(v_q, &x1, n_steps)?;
        if !logp.is_finite() || !logq.is_finite() {
            return Err(Error::NonFinite {
                context: "kl density",
                index: diffs.len(),
            });
        }
        diffs.push(logp - logq);
        for (i, (x, &t)) in traj.states.iter().zip(&traj.times).enumerate() {
            times[i] = t;
            let tv = tilde.eval(x, t);
            let score = score_fd(v_q, x, t, n_steps)?;
            mean_dot[i] += vecmath::dot(&tv, &score);
            mean_div[i] += divergence_fd(&tilde, x, t, DIVERGENCE_EPS);
            mean_ctrl[i] += 0.5 * vecmath::norm2(&tv);
            mean_path[i] += 0.5 * vecmath::norm2(&score);
        }
    }
    let inv_n = 1.0 / n_samples as f64;
    for i in 0..grid {
        mean_dot[i] *= inv_n;
        mean_div[i] *= inv_n;
        mean_ctrl[i] *= inv_n;
        mean_path[i] *= inv_n;
    }
    let trapezoid = |f: &[f64]| -> f64 {
        let mut total = 0.0;
        for i in 0..f.len() - 1 {
            total += 0.5 * (times[i + 1] - times[i]) * (f[i] + f[i + 1]);
        }
        total
    };
    let kl_mc = diffs.iter().sum::<f64>() * inv_n;
    let var = diffs
        .iter()
        .map(|v| (v - kl_mc) * (v - kl_mc))
        .sum::<f64>()
        / (n_samples.max(2) - 1) as f64;
    Ok(KlReport {
        kl_mc,
        stderr: libm::sqrt(var * inv_n),
        identity_rhs: -trapezoid(&mean_dot) - trapezoid(&mean_div),
        term_control: trapezoid(&mean_ctrl),
        term_path: trapezoid(&mean_path),
        term_divergence: trapezoid(&mean_div),
        n_samples,
    })
}

/// Both sides of the coupled Wasserstein-2 bound
/// `E‖x₁ − y₁‖² ≤ e^{2L+1} ∫ E_{p_t}‖ṽ(x_t, t)‖² dt`.
#[derive(Debug, Clone, Copy)]
pub struct W2BoundReport {
    pub lhs: f64,
    pub rhs: f64,
    pub lipschitz: f64,
    pub violated: bool,
}

/// Couples both flows through shared initial points and compares the
/// terminal gap against the Grönwall bound. `l_est` supplies a Lipschitz
/// constant for the base field; when absent it is estimated from random
/// probe pairs and doubled as a safety factor.
pub fn w2_bound_check(
    v_theta: &dyn Velocity,
    v_base: &dyn Velocity,
    n_samples: usize,
    n_steps: usize,
    l_est: Option<f64>,
    rng: &mut Rng,
) -> Result<W2BoundReport> {
    let d = v_theta.dim();
    if v_base.dim() != d {
        return Err(Error::ShapeMismatch {
            context: "w2_bound_check",
            detail: alloc::format!("{d} vs {}", v_base.dim()),
        });
    }
    if n_samples == 0 {
        return Err(Error::TooFewSamples { n: 0, need: 1 });
    }
    let lipschitz = match l_est {
        Some(l) => l,
        None => estimate_lipschitz(v_base, 1024, rng),
    };
    let cfg = SamplerConfig {
        n_steps,
        integrator: Integrator::Rk4,
    };
    let tilde = DiffVelocity {
        p: v_theta,
        q: v_base,
    };
    let grid = n_steps + 1;
    let mut mean_tilde_sq = vec![0.0; grid];
    let mut times = vec![0.0; grid];
    let mut lhs = 0.0;
    for _ in 0..n_samples {
        let x0 = rng.normal_vec(d);
        let traj_p = integrate(v_theta, &x0, &cfg)?;
        let traj_q = integrate(v_base, &x0, &cfg)?;
        lhs += vecmath::dist2(traj_p.terminal(), traj_q.terminal());
        for (i, (x, &t)) in traj_p.states.iter().zip(&traj_p.times).enumerate() {
            times[i] = t;
            mean_tilde_sq[i] += vecmath::norm2(&tilde.eval(x, t));
        }
    }
    let inv_n = 1.0 / n_samples as f64;
    lhs *= inv_n;
    let mut integral = 0.0;
    for i in 0..grid - 1 {
        integral += 0.5 * (times[i + 1] - times[i]) * (mean_tilde_sq[i] + mean_tilde_sq[i + 1])
            * inv_n;
    }
    let rhs = libm::exp(2.0 * lipschitz + 1.0) * integral;
    Ok(W2BoundReport {
        lhs,
        rhs,
        lipschitz,
        violated: lhs > rhs * (1.0 + 1e-6),
    })
}

/// Max difference quotient of `v` over random probe pairs (states from
/// `N(0, 4I)`, times uniform), doubled as a safety factor.
pub fn estimate_lipschitz(v: &dyn Velocity, n_pairs: usize, rng: &mut Rng) -> f64 {
    let d = v.dim();
    let mut max_ratio: f64 = 0.0;
    for _ in 0..n_pairs {
        let x = vecmath::scale(&rng.normal_vec(d), 2.0);
        let y = vecmath::scale(&rng.normal_vec(d), 2.0);
        let t = rng.uniform();
        let gap = libm::sqrt(vecmath::dist2(&x, &y));
        if gap < 1e-12 {
            continue;
        }
        let vgap = libm::sqrt(vecmath::dist2(&v.eval(&x, t), &v.eval(&y, t)));
        max_ratio = max_ratio.max(vgap / gap);
    }
    2.0 * max_ratio
}
