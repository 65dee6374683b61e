//! Velocity field abstractions: the ODE right-hand side `ẋ = v(x, t)`.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::Result;
use crate::nets::Mlp;
use crate::numcore::vecmath;
use crate::numcore::{Tape, Tensor, Var};

/// A velocity field on `ℝᵈ × [0, 1]`. Implementations panic on input
/// dimension mismatch (structural misuse), and are read-only during
/// evaluation so concurrent use over disjoint data is safe.
pub trait Velocity {
    fn dim(&self) -> usize;

    fn eval(&self, x: &[f64], t: f64) -> Vec<f64>;

    fn eval_batch(&self, xs: &[Vec<f64>], ts: &[f64]) -> Vec<Vec<f64>> {
        debug_assert_eq!(xs.len(), ts.len());
        xs.iter().zip(ts).map(|(x, &t)| self.eval(x, t)).collect()
    }
}

/// Velocity fields that can also record their forward pass on an autodiff
/// tape (with frozen parameters), so gradients can flow through the state.
pub trait TapeVelocity: Velocity {
    /// `x` is a `(B, d)` node; one time per row.
    fn eval_tape(&self, tape: &mut Tape, x: Var, ts: &[f64]) -> Result<Var>;
}

/// Linear field `v(x, t) = A·x`.
#[derive(Debug, Clone)]
pub struct LinearVelocity {
    a: Tensor,
}

impl LinearVelocity {
    pub fn new(a: Tensor) -> Self {
        let s = a.shape();
        assert!(s.len() == 2 && s[0] == s[1], "A must be square, got {s:?}");
        LinearVelocity { a }
    }

    pub fn matrix(&self) -> &Tensor {
        &self.a
    }

    /// Exact Lipschitz constant: the spectral norm of `A`.
    pub fn operator_norm(&self) -> f64 {
        let d = self.a.shape()[0];
        vecmath::operator_norm(self.a.data(), d)
    }
}

impl Velocity for LinearVelocity {
    fn dim(&self) -> usize {
        self.a.shape()[0]
    }

    fn eval(&self, x: &[f64], _t: f64) -> Vec<f64> {
        let d = self.dim();
        assert_eq!(x.len(), d, "state dim mismatch");
        vecmath::mat_vec(self.a.data(), d, d, x)
    }
}

impl TapeVelocity for LinearVelocity {
    fn eval_tape(&self, tape: &mut Tape, x: Var, _ts: &[f64]) -> Result<Var> {
        let d = self.dim();
        let at = Tensor::matrix(d, d, vecmath::transpose(self.a.data(), d, d))?;
        let at = tape.constant(at)?;
        tape.matmul(x, at)
    }
}

/// Constant field `v(x, t) = c`.
#[derive(Debug, Clone)]
pub struct ConstVelocity {
    pub c: Vec<f64>,
}

impl Velocity for ConstVelocity {
    fn dim(&self) -> usize {
        self.c.len()
    }

    fn eval(&self, x: &[f64], _t: f64) -> Vec<f64> {
        assert_eq!(x.len(), self.c.len(), "state dim mismatch");
        self.c.clone()
    }
}

impl TapeVelocity for ConstVelocity {
    fn eval_tape(&self, tape: &mut Tape, x: Var, ts: &[f64]) -> Result<Var> {
        let _ = x;
        let rows = vec![self.c.clone(); ts.len()];
        tape.constant_rows(&rows)
    }
}

/// Closure-backed field for tests and analytic cases.
pub struct FnVelocity<F: Fn(&[f64], f64) -> Vec<f64>> {
    pub dim: usize,
    pub f: F,
}

impl<F: Fn(&[f64], f64) -> Vec<f64>> Velocity for FnVelocity<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, x: &[f64], t: f64) -> Vec<f64> {
        assert_eq!(x.len(), self.dim, "state dim mismatch");
        (self.f)(x, t)
    }
}

impl Velocity for Mlp {
    fn dim(&self) -> usize {
        debug_assert_eq!(self.input_dim(), self.output_dim());
        self.input_dim()
    }

    fn eval(&self, x: &[f64], t: f64) -> Vec<f64> {
        self.forward(x, t).expect("velocity dim mismatch")
    }

    fn eval_batch(&self, xs: &[Vec<f64>], ts: &[f64]) -> Vec<Vec<f64>> {
        self.forward_batch(xs, ts).expect("velocity dim mismatch")
    }
}

impl TapeVelocity for Mlp {
    fn eval_tape(&self, tape: &mut Tape, x: Var, ts: &[f64]) -> Result<Var> {
        self.forward_tape(tape, x, ts, None)
    }
}

/// Finetuned field `v(x, t) = base(x, t) + residual(x, t)`.
pub struct ResidualVelocity<'a, B: Velocity + ?Sized> {
    pub base: &'a B,
    pub residual: &'a Mlp,
}

impl<'a, B: Velocity + ?Sized> ResidualVelocity<'a, B> {
    pub fn new(base: &'a B, residual: &'a Mlp) -> Self {
        assert_eq!(base.dim(), residual.output_dim(), "base/residual dim mismatch");
        ResidualVelocity { base, residual }
    }
}

impl<B: Velocity + ?Sized> Velocity for ResidualVelocity<'_, B> {
    fn dim(&self) -> usize {
        self.base.dim()
    }

    fn eval(&self, x: &[f64], t: f64) -> Vec<f64> {
        vecmath::add(&self.base.eval(x, t), &self.residual.eval(x, t))
    }

    fn eval_batch(&self, xs: &[Vec<f64>], ts: &[f64]) -> Vec<Vec<f64>> {
        let b = self.base.eval_batch(xs, ts);
        let r = self.residual.eval_batch(xs, ts);
        b.iter().zip(&r).map(|(bv, rv)| vecmath::add(bv, rv)).collect()
    }
}

impl<B: TapeVelocity + ?Sized> TapeVelocity for ResidualVelocity<'_, B> {
    fn eval_tape(&self, tape: &mut Tape, x: Var, ts: &[f64]) -> Result<Var> {
        let b = self.base.eval_tape(tape, x, ts)?;
        let r = self.residual.forward_tape(tape, x, ts, None)?;
        tape.add(b, r)
    }
}

/// Pointwise difference `v_p − v_q`; the residual between two flows.
pub struct DiffVelocity<'a> {
    pub p: &'a dyn Velocity,
    pub q: &'a dyn Velocity,
}

impl Velocity for DiffVelocity<'_> {
    fn dim(&self) -> usize {
        self.p.dim()
    }

    fn eval(&self, x: &[f64], t: f64) -> Vec<f64> {
        vecmath::sub(&self.p.eval(x, t), &self.q.eval(x, t))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{Activation, FinalInit, MlpSpec};
    use crate::numcore::Rng;

    #[test]
    fn linear_field_applies_matrix() {
        let a = Tensor::matrix(2, 2, vec![0.0, -1.0, 1.0, 0.0]).unwrap();
        let v = LinearVelocity::new(a);
        assert_eq!(v.eval(&[2.0, 3.0], 0.1), vec![-3.0, 2.0]);
        assert!((v.operator_norm() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn linear_tape_eval_matches_plain() {
        let a = Tensor::matrix(2, 2, vec![0.3, -0.7, 0.2, 0.9]).unwrap();
        let v = LinearVelocity::new(a);
        let xs = vec![vec![1.0, 2.0], vec![-0.5, 0.25]];
        let mut tape = Tape::new();
        let x = tape.constant_rows(&xs).unwrap();
        let y = v.eval_tape(&mut tape, x, &[0.0, 0.5]).unwrap();
        for (i, xr) in xs.iter().enumerate() {
            assert_eq!(tape.value(y).row(i), v.eval(xr, 0.0).as_slice());
        }
    }

    #[test]
    fn residual_with_tiny_net_equals_base() {
        let base = ConstVelocity { c: vec![1.0, -2.0] };
        let mut rng = Rng::new(0);
        let net = Mlp::init(
            MlpSpec {
                input_dim: 2,
                time_embed_dim: 4,
                hidden: vec![8],
                activation: Activation::Silu,
                output_dim: 2,
                final_init: FinalInit::Tiny,
            },
            &mut rng,
        )
        .unwrap();
        let v = ResidualVelocity::new(&base, &net);
        assert_eq!(v.eval(&[0.3, 0.4], 0.7), vec![1.0, -2.0]);
    }
}
