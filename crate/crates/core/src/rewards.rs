//! Differentiable analytic reward families with exact gradients, standing
//! in for learned image reward models at desk scale.

use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::numcore::vecmath;
use crate::numcore::Tensor;

/// Analytic reward `r(x)` on the sample space.
#[derive(Debug, Clone, PartialEq)]
pub enum RewardSpec {
    /// `r(x) = −½ xᵀHx + hᵀx` with `H` symmetric PSD.
    Quadratic { h_mat: Tensor, h_vec: Vec<f64> },
    /// Log density of an isotropic Gaussian mixture.
    GaussMixLogDensity {
        means: Vec<Vec<f64>>,
        weights: Vec<f64>,
        variance: f64,
    },
    /// `r(x) = −(‖x‖ − ρ)² / (2σ²)`; maximal on the radius-ρ ring.
    Ring { radius: f64, width: f64 },
    /// `max(0, inner)` with subgradient 0 on the clipped region.
    ReluWrapped { inner: Box<RewardSpec> },
}

impl RewardSpec {
    /// Dimension the reward constrains its input to, if any. `Ring`
    /// applies in any dimension.
    pub fn dim(&self) -> Option<usize> {
        match self {
            RewardSpec::Quadratic { h_vec, .. } => Some(h_vec.len()),
            RewardSpec::GaussMixLogDensity { means, .. } => means.first().map(|m| m.len()),
            RewardSpec::Ring { .. } => None,
            RewardSpec::ReluWrapped { inner } => inner.dim(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |detail: alloc::string::String| Err(Error::InvalidConfig { detail });
        match self {
            RewardSpec::Quadratic { h_mat, h_vec } => {
                let d = h_vec.len();
                if h_mat.shape() != [d, d] {
                    return Err(Error::ShapeMismatch {
                        context: "RewardSpec::Quadratic",
                        detail: format!("H shape {:?} vs h dim {d}", h_mat.shape()),
                    });
                }
                let m = h_mat.data();
                for i in 0..d {
                    for j in 0..i {
                        if (m[i * d + j] - m[j * d + i]).abs() > 1e-12 {
                            return bad("quadratic H must be symmetric".into());
                        }
                    }
                }
                Ok(())
            }
            RewardSpec::GaussMixLogDensity {
                means,
                weights,
                variance,
            } => {
                if means.is_empty() || means.len() != weights.len() {
                    return bad("mixture needs one weight per mean".into());
                }
                let d = means[0].len();
                if means.iter().any(|m| m.len() != d) {
                    return bad("mixture means must share a dimension".into());
                }
                if weights.iter().any(|&w| w <= 0.0) {
                    return bad("mixture weights must be positive".into());
                }
                let total: f64 = weights.iter().sum();
                if (total - 1.0).abs() > 1e-9 {
                    return bad(format!("mixture weights sum to {total}, not 1"));
                }
                if *variance <= 0.0 {
                    return bad("mixture variance must be positive".into());
                }
                Ok(())
            }
            RewardSpec::Ring { radius, width } => {
                if *radius <= 0.0 || *width <= 0.0 {
                    return bad("ring radius and width must be positive".into());
                }
                Ok(())
            }
            RewardSpec::ReluWrapped { inner } => inner.validate(),
        }
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if let Some(d) = self.dim() {
            if x.len() != d {
                return Err(Error::ShapeMismatch {
                    context: "reward",
                    detail: format!("input dim {} vs reward dim {d}", x.len()),
                });
            }
        }
        Ok(())
    }

    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        self.check_dim(x)?;
        Ok(match self {
            RewardSpec::Quadratic { h_mat, h_vec } => {
                let d = x.len();
                let hx = vecmath::mat_vec(h_mat.data(), d, d, x);
                -0.5 * vecmath::dot(x, &hx) + vecmath::dot(h_vec, x)
            }
            RewardSpec::GaussMixLogDensity {
                means,
                weights,
                variance,
            } => {
                let d = x.len() as f64;
                let max_exp = mixture_exponents(means, weights, *variance, x)
                    .fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = mixture_exponents(means, weights, *variance, x)
                    .map(|e| libm::exp(e - max_exp))
                    .sum();
                max_exp + libm::log(sum)
                    - 0.5 * d * libm::log(core::f64::consts::TAU * variance)
            }
            RewardSpec::Ring { radius, width } => {
                let r = vecmath::norm(x);
                let gap = r - radius;
                -gap * gap / (2.0 * width * width)
            }
            RewardSpec::ReluWrapped { inner } => inner.eval(x)?.max(0.0),
        })
    }

    pub fn grad(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        Ok(match self {
            RewardSpec::Quadratic { h_mat, h_vec } => {
                let d = x.len();
                let hx = vecmath::mat_vec(h_mat.data(), d, d, x);
                vecmath::sub(h_vec, &hx)
            }
            RewardSpec::GaussMixLogDensity {
                means,
                weights,
                variance,
            } => {
                // Softmax-weighted pull toward each mean.
                let max_exp = mixture_exponents(means, weights, *variance, x)
                    .fold(f64::NEG_INFINITY, f64::max);
                let resp: Vec<f64> = mixture_exponents(means, weights, *variance, x)
                    .map(|e| libm::exp(e - max_exp))
                    .collect();
                let total: f64 = resp.iter().sum();
                let mut g = vec![0.0; x.len()];
                for (k, mean) in means.iter().enumerate() {
                    let s = resp[k] / total;
                    for i in 0..x.len() {
                        g[i] += s * (mean[i] - x[i]) / variance;
                    }
                }
                g
            }
            RewardSpec::Ring { radius, width } => {
                let r = vecmath::norm(x);
                if r == 0.0 {
                    vec![0.0; x.len()]
                } else {
                    let scale = -(r - radius) / (width * width * r);
                    vecmath::scale(x, scale)
                }
            }
            RewardSpec::ReluWrapped { inner } => {
                if inner.eval(x)? <= 0.0 {
                    vec![0.0; x.len()]
                } else {
                    inner.grad(x)?
                }
            }
        })
    }
}

fn mixture_exponents<'a>(
    means: &'a [Vec<f64>],
    weights: &'a [f64],
    variance: f64,
    x: &'a [f64],
) -> impl Iterator<Item = f64> + 'a {
    means
        .iter()
        .zip(weights)
        .map(move |(m, &w)| libm::log(w) - vecmath::dist2(x, m) / (2.0 * variance))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_grad(spec: &RewardSpec, x: &[f64], step: f64) -> Vec<f64> {
        let mut g = vec![0.0; x.len()];
        let mut probe = x.to_vec();
        for i in 0..x.len() {
            probe[i] = x[i] + step;
            let plus = spec.eval(&probe).unwrap();
            probe[i] = x[i] - step;
            let minus = spec.eval(&probe).unwrap();
            probe[i] = x[i];
            g[i] = (plus - minus) / (2.0 * step);
        }
        g
    }

    fn quadratic_2d() -> RewardSpec {
        RewardSpec::Quadratic {
            h_mat: Tensor::matrix(2, 2, vec![1.0, 0.25, 0.25, 2.0]).unwrap(),
            h_vec: vec![0.5, -1.0],
        }
    }

    #[test]
    fn quadratic_identity_at_origin() {
        let spec = RewardSpec::Quadratic {
            h_mat: Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            h_vec: vec![0.0, 0.0],
        };
        assert_eq!(spec.eval(&[0.0, 0.0]).unwrap(), 0.0);
    }

    #[test]
    fn quadratic_gradient_at_origin_is_h() {
        let spec = quadratic_2d();
        assert_eq!(spec.grad(&[0.0, 0.0]).unwrap(), vec![0.5, -1.0]);
    }

    #[test]
    fn ring_peaks_on_radius() {
        let spec = RewardSpec::Ring {
            radius: 1.5,
            width: 0.3,
        };
        let on = [1.5 * libm::cos(0.4), 1.5 * libm::sin(0.4)];
        assert!(spec.eval(&on).unwrap().abs() < 1e-12);
        let g = spec.grad(&on).unwrap();
        assert!(vecmath::norm(&g) < 1e-12);
        assert_eq!(spec.grad(&[0.0, 0.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn relu_wrap_clips_value_and_gradient() {
        let inner = quadratic_2d();
        let spec = RewardSpec::ReluWrapped {
            inner: Box::new(inner.clone()),
        };
        // Far out the quadratic is negative: clipped to zero.
        let far = [8.0, 8.0];
        assert!(inner.eval(&far).unwrap() < -1.0);
        assert_eq!(spec.eval(&far).unwrap(), 0.0);
        assert_eq!(spec.grad(&far).unwrap(), vec![0.0, 0.0]);
        // Near the maximizer it is positive: passes through.
        let near = [0.4, -0.4];
        assert!(inner.eval(&near).unwrap() > 0.0);
        assert_eq!(spec.eval(&near).unwrap(), inner.eval(&near).unwrap());
        assert_eq!(spec.grad(&near).unwrap(), inner.grad(&near).unwrap());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let specs = [
            quadratic_2d(),
            RewardSpec::GaussMixLogDensity {
                means: vec![vec![1.0, 0.5], vec![-0.8, 0.2]],
                weights: vec![0.4, 0.6],
                variance: 0.5,
            },
            RewardSpec::Ring {
                radius: 1.2,
                width: 0.4,
            },
        ];
        let mut rng = crate::numcore::Rng::new(42);
        for spec in &specs {
            spec.validate().unwrap();
            for _ in 0..100 {
                let x = rng.normal_vec(2);
                let analytic = spec.grad(&x).unwrap();
                let numeric = fd_grad(spec, &x, 1e-6);
                for (a, n) in analytic.iter().zip(&numeric) {
                    let tol = 1e-5 * n.abs().max(1e-4);
                    assert!((a - n).abs() <= tol, "{spec:?} at {x:?}: {a} vs {n}");
                }
            }
        }
    }

    #[test]
    fn quadratic_is_concave() {
        let spec = quadratic_2d();
        let mut rng = crate::numcore::Rng::new(3);
        for _ in 0..50 {
            let a = rng.normal_vec(2);
            let b = rng.normal_vec(2);
            let mid: Vec<f64> = a.iter().zip(&b).map(|(x, y)| 0.5 * (x + y)).collect();
            let lhs = spec.eval(&mid).unwrap();
            let rhs = 0.5 * (spec.eval(&a).unwrap() + spec.eval(&b).unwrap());
            assert!(lhs >= rhs - 1e-12);
        }
    }

    #[test]
    fn asymmetric_h_is_rejected() {
        let spec = RewardSpec::Quadratic {
            h_mat: Tensor::matrix(2, 2, vec![1.0, 0.3, 0.1, 1.0]).unwrap(),
            h_vec: vec![0.0, 0.0],
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn dim_mismatch_is_reported() {
        let spec = quadratic_2d();
        assert!(spec.eval(&[1.0]).is_err());
        assert!(spec.grad(&[1.0, 2.0, 3.0]).is_err());
    }
}
