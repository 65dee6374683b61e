//! Small multilayer perceptrons with sinusoidal time conditioning, used
//! for the base velocity field, the residual finetuned field, and the
//! value-gradient correction network.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::numcore::vecmath;
use crate::numcore::{ParamSet, Rng, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Silu,
    Relu,
}

/// Initialization of the final linear layer. `Tiny` sets final weights and
/// biases to exact zeros so the network outputs 0 everywhere at init,
/// which makes residual-parametrized fields start identical to their base.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FinalInit {
    Standard,
    Tiny,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpSpec {
    pub input_dim: usize,
    /// Even number of sinusoidal time features appended to the input.
    pub time_embed_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub output_dim: usize,
    pub final_init: FinalInit,
}

impl MlpSpec {
    pub fn validate(&self) -> Result<()> {
        if self.time_embed_dim % 2 != 0 {
            return Err(Error::OddEmbedDim {
                dim: self.time_embed_dim,
            });
        }
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::InvalidConfig {
                detail: "zero input/output dim".into(),
            });
        }
        if self.hidden.iter().any(|&w| w == 0) {
            return Err(Error::InvalidConfig {
                detail: "hidden widths must be >= 1".into(),
            });
        }
        Ok(())
    }

    /// Per-layer (fan_in, fan_out) sizes, input features to output.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::new();
        let mut prev = self.input_dim + self.time_embed_dim;
        for &h in &self.hidden {
            dims.push((prev, h));
            prev = h;
        }
        dims.push((prev, self.output_dim));
        dims
    }
}

/// Sinusoidal features `[sin(2π·2^(k−1)·t), cos(2π·2^(k−1)·t)]` for
/// `k = 1..dim/2`, interleaved per frequency.
pub fn time_embed(t: f64, dim: usize) -> Result<Vec<f64>> {
    if dim % 2 != 0 {
        return Err(Error::OddEmbedDim { dim });
    }
    let mut out = Vec::with_capacity(dim);
    let mut freq = 1.0;
    for _ in 0..dim / 2 {
        let phase = core::f64::consts::TAU * freq * t;
        out.push(libm::sin(phase));
        out.push(libm::cos(phase));
        freq *= 2.0;
    }
    Ok(out)
}

/// MLP over the concatenated `(x, time_embed(t))` input.
#[derive(Debug, Clone)]
pub struct Mlp {
    spec: MlpSpec,
    params: ParamSet,
}

fn weight_name(layer: usize) -> String {
    format!("layer{layer}.w")
}

fn bias_name(layer: usize) -> String {
    format!("layer{layer}.b")
}

impl Mlp {
    /// He-style fan-in initialization for hidden layers; the final layer
    /// follows `spec.final_init`. Biases start at zero.
    pub fn init(spec: MlpSpec, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let dims = spec.layer_dims();
        let n_layers = dims.len();
        let mut params = ParamSet::new();
        for (i, &(fan_in, fan_out)) in dims.iter().enumerate() {
            let last = i + 1 == n_layers;
            let std = libm::sqrt(2.0 / fan_in as f64);
            let w = if last && spec.final_init == FinalInit::Tiny {
                vec![0.0; fan_in * fan_out]
            } else {
                (0..fan_in * fan_out).map(|_| std * rng.normal()).collect()
            };
            params.insert(&weight_name(i), Tensor::matrix(fan_in, fan_out, w)?)?;
            params.insert(&bias_name(i), Tensor::vector(vec![0.0; fan_out]))?;
        }
        Ok(Mlp { spec, params })
    }

    /// Rebuilds a network from a spec and a parameter set, verifying every
    /// expected tensor is present with the right shape.
    pub fn from_parts(spec: MlpSpec, params: ParamSet) -> Result<Self> {
        spec.validate()?;
        let dims = spec.layer_dims();
        let expected = dims.len() * 2;
        if params.len() != expected {
            return Err(Error::ShapeMismatch {
                context: "Mlp::from_parts",
                detail: format!("expected {expected} tensors, got {}", params.len()),
            });
        }
        for (i, &(fan_in, fan_out)) in dims.iter().enumerate() {
            let w = params.get(&weight_name(i)).ok_or(Error::ShapeMismatch {
                context: "Mlp::from_parts",
                detail: format!("missing layer{i}.w"),
            })?;
            if w.shape() != [fan_in, fan_out] {
                return Err(Error::ShapeMismatch {
                    context: "Mlp::from_parts",
                    detail: format!("layer{i}.w has shape {:?}", w.shape()),
                });
            }
            let b = params.get(&bias_name(i)).ok_or(Error::ShapeMismatch {
                context: "Mlp::from_parts",
                detail: format!("missing layer{i}.b"),
            })?;
            if b.shape() != [fan_out] {
                return Err(Error::ShapeMismatch {
                    context: "Mlp::from_parts",
                    detail: format!("layer{i}.b has shape {:?}", b.shape()),
                });
            }
        }
        Ok(Mlp { spec, params })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output_dim
    }

    fn apply_activation(&self, data: &mut [f64]) {
        match self.spec.activation {
            Activation::Tanh => data.iter_mut().for_each(|v| *v = libm::tanh(*v)),
            Activation::Silu => data
                .iter_mut()
                .for_each(|v| *v *= vecmath::sigmoid(*v)),
            Activation::Relu => data.iter_mut().for_each(|v| *v = v.max(0.0)),
        }
    }

    /// Builds the `(B, input_dim + E)` network input from states and times.
    fn assemble_input(&self, xs: &[Vec<f64>], ts: &[f64]) -> Result<Vec<f64>> {
        let d = self.spec.input_dim;
        let e = self.spec.time_embed_dim;
        let mut data = Vec::with_capacity(xs.len() * (d + e));
        for (x, &t) in xs.iter().zip(ts) {
            if x.len() != d {
                return Err(Error::ShapeMismatch {
                    context: "Mlp::forward",
                    detail: format!("input dim {} != {d}", x.len()),
                });
            }
            data.extend_from_slice(x);
            data.extend_from_slice(&time_embed(t, e)?);
        }
        Ok(data)
    }

    pub fn forward(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        let xs = [x.to_vec()];
        let out = self.forward_batch(&xs, &[t])?;
        Ok(out.into_iter().next().unwrap())
    }

    pub fn forward_batch(&self, xs: &[Vec<f64>], ts: &[f64]) -> Result<Vec<Vec<f64>>> {
        debug_assert_eq!(xs.len(), ts.len());
        let b = xs.len();
        let mut z = self.assemble_input(xs, ts)?;
        let dims = self.spec.layer_dims();
        let n_layers = dims.len();
        for (i, &(fan_in, fan_out)) in dims.iter().enumerate() {
            let w = self.params.get(&weight_name(i)).unwrap();
            let bias = self.params.get(&bias_name(i)).unwrap();
            let mut h = vecmath::mat_mul(&z, w.data(), b, fan_in, fan_out);
            for r in 0..b {
                for (j, bv) in bias.data().iter().enumerate() {
                    h[r * fan_out + j] += bv;
                }
            }
            if i + 1 < n_layers {
                self.apply_activation(&mut h);
            }
            z = h;
        }
        let out_dim = self.spec.output_dim;
        Ok((0..b)
            .map(|r| z[r * out_dim..(r + 1) * out_dim].to_vec())
            .collect())
    }

    /// Records the forward pass on a tape. `x` must be a `(B, input_dim)`
    /// node and `ts` supplies one time per row (embedded as constants, so
    /// no gradient flows into `t`). With `trainable = Some(prefix)` the
    /// weights are registered as named parameters `{prefix}layer{i}.{w,b}`;
    /// with `None` they enter as constants and receive no gradient.
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        x: Var,
        ts: &[f64],
        trainable: Option<&str>,
    ) -> Result<Var> {
        let b = ts.len();
        let shape = tape.value(x).shape().to_vec();
        if shape != [b, self.spec.input_dim] {
            return Err(Error::ShapeMismatch {
                context: "Mlp::forward_tape",
                detail: format!("x shape {shape:?}, want [{b}, {}]", self.spec.input_dim),
            });
        }
        let e = self.spec.time_embed_dim;
        let emb_rows: Result<Vec<Vec<f64>>> = ts.iter().map(|&t| time_embed(t, e)).collect();
        let emb = tape.constant_rows(&emb_rows?)?;
        let mut z = tape.concat(x, emb, 1)?;
        let dims = self.spec.layer_dims();
        let n_layers = dims.len();
        for i in 0..n_layers {
            let w_t = self.params.get(&weight_name(i)).unwrap();
            let b_t = self.params.get(&bias_name(i)).unwrap();
            let (w, bias) = match trainable {
                Some(prefix) => (
                    tape.param(&format!("{prefix}{}", weight_name(i)), w_t)?,
                    tape.param(&format!("{prefix}{}", bias_name(i)), b_t)?,
                ),
                None => (tape.constant(w_t.clone())?, tape.constant(b_t.clone())?),
            };
            let h = tape.matmul(z, w)?;
            let h = tape.add(h, bias)?;
            z = if i + 1 < n_layers {
                match self.spec.activation {
                    Activation::Tanh => tape.tanh(h)?,
                    Activation::Silu => tape.silu(h)?,
                    Activation::Relu => tape.relu(h)?,
                }
            } else {
                h
            };
        }
        Ok(z)
    }

    /// Extracts this network's gradients from a tape gradient map whose
    /// names carry `prefix`.
    pub fn grads_for(
        &self,
        grads: &crate::numcore::GradMap,
        prefix: &str,
    ) -> crate::numcore::GradMap {
        let mut out = crate::numcore::GradMap::new();
        for (name, t) in grads {
            if let Some(stripped) = name.strip_prefix(prefix) {
                if self.params.get(stripped).is_some() {
                    out.insert(stripped.into(), t.clone());
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(hidden: Vec<usize>, final_init: FinalInit) -> MlpSpec {
        MlpSpec {
            input_dim: 2,
            time_embed_dim: 4,
            hidden,
            activation: Activation::Silu,
            output_dim: 2,
            final_init,
        }
    }

    #[test]
    fn embed_at_zero_is_sin0_cos1() {
        let e = time_embed(0.0, 6).unwrap();
        assert_eq!(e, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn embed_sum_of_squares_is_half_dim() {
        for &t in &[0.13, 0.5, 0.99] {
            let e = time_embed(t, 8).unwrap();
            let ss: f64 = e.iter().map(|v| v * v).sum();
            assert!((ss - 4.0).abs() < 1e-12);
        }
    }

    #[test]
    fn embed_separates_zero_and_half() {
        let a = time_embed(0.0, 4).unwrap();
        let b = time_embed(0.5, 4).unwrap();
        let max_gap = a
            .iter()
            .zip(&b)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(max_gap >= 1.0, "gap {max_gap}");
    }

    #[test]
    fn embed_rejects_odd_dim() {
        assert!(matches!(time_embed(0.3, 3), Err(Error::OddEmbedDim { dim: 3 })));
    }

    #[test]
    fn tiny_init_outputs_exact_zero() {
        let mut rng = Rng::new(5);
        let net = Mlp::init(spec(vec![16, 16], FinalInit::Tiny), &mut rng).unwrap();
        for &t in &[0.0, 0.37, 1.0] {
            let y = net.forward(&[0.4, -1.3], t).unwrap();
            assert_eq!(y, vec![0.0, 0.0]);
        }
    }

    #[test]
    fn single_linear_layer_is_affine_in_input() {
        let mut rng = Rng::new(9);
        let net = Mlp::init(spec(vec![], FinalInit::Standard), &mut rng).unwrap();
        let w = net.params().get("layer0.w").unwrap();
        let b = net.params().get("layer0.b").unwrap();
        let x = [0.7, -0.2];
        let t = 0.4;
        let y = net.forward(&x, t).unwrap();
        let mut input = x.to_vec();
        input.extend(time_embed(t, 4).unwrap());
        let expect = vecmath::add(&vecmath::mat_t_vec(w.data(), 6, 2, &input), b.data());
        for (a, e) in y.iter().zip(&expect) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_permutation_permutes_outputs() {
        let mut rng = Rng::new(12);
        let net = Mlp::init(spec(vec![8], FinalInit::Standard), &mut rng).unwrap();
        let xs = vec![vec![0.1, 0.2], vec![-1.0, 0.5], vec![2.0, -0.3]];
        let ts = [0.1, 0.6, 0.9];
        let out = net.forward_batch(&xs, &ts).unwrap();
        let perm = [2usize, 0, 1];
        let xs_p: Vec<Vec<f64>> = perm.iter().map(|&i| xs[i].clone()).collect();
        let ts_p: Vec<f64> = perm.iter().map(|&i| ts[i]).collect();
        let out_p = net.forward_batch(&xs_p, &ts_p).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            assert_eq!(out_p[k], out[i]);
        }
    }

    #[test]
    fn tape_forward_matches_plain_forward() {
        let mut rng = Rng::new(3);
        let net = Mlp::init(spec(vec![8, 8], FinalInit::Standard), &mut rng).unwrap();
        let xs = vec![vec![0.3, -0.9], vec![1.4, 0.2]];
        let ts = [0.25, 0.75];
        let plain = net.forward_batch(&xs, &ts).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant_rows(&xs).unwrap();
        let y = net.forward_tape(&mut tape, x, &ts, Some("n.")).unwrap();
        for (i, row) in plain.iter().enumerate() {
            assert_eq!(tape.value(y).row(i), row.as_slice());
        }
    }

    #[test]
    fn from_parts_validates() {
        let mut rng = Rng::new(3);
        let net = Mlp::init(spec(vec![8], FinalInit::Standard), &mut rng).unwrap();
        assert!(Mlp::from_parts(net.spec().clone(), net.params().clone()).is_ok());
        let mut missing = ParamSet::new();
        missing
            .insert("layer0.w", net.params().get("layer0.w").unwrap().clone())
            .unwrap();
        assert!(Mlp::from_parts(net.spec().clone(), missing).is_err());
    }

    #[test]
    fn grads_for_strips_prefix() {
        let mut rng = Rng::new(4);
        let net = Mlp::init(spec(vec![], FinalInit::Standard), &mut rng).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant_rows(&[vec![0.5, 0.5]]).unwrap();
        let y = net.forward_tape(&mut tape, x, &[0.2], Some("q.")).unwrap();
        let s = tape.sum(y).unwrap();
        let grads = tape.backward(s).unwrap();
        let local = net.grads_for(&grads, "q.");
        assert!(local.contains_key("layer0.w"));
        assert!(local.contains_key("layer0.b"));
        assert_eq!(local.len(), 2);
    }
}
