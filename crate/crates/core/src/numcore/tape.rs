//! Reverse-mode automatic differentiation over a recorded computation tape.
//!
//! The supported op set is fixed: matrix multiply, add (with row
//! broadcast), subtract, elementwise multiply, scalar scale, sum, mean,
//! tanh, SiLU, ReLU, square, squared distance, concatenate, and slice.
//! Anything else must be composed from these. All values are checked for
//! finiteness as nodes are recorded, so a diverging forward pass reports
//! the offending node id.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::numcore::vecmath;
use crate::numcore::{GradMap, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    /// Input node; `Some(name)` marks a parameter, `None` a constant.
    Leaf(Option<String>),
    /// Forwards its value, contributes zero to all parameter gradients.
    /// Keeps its parent id for tape debugging only.
    StopGrad(#[allow(dead_code)] usize),
    MatMul(usize, usize),
    Add(usize, usize),
    /// `(m, n) + (n,)` applied to every row.
    AddRow(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Sum(usize),
    Mean(usize),
    Tanh(usize),
    Silu(usize),
    Relu(usize),
    Square(usize),
    SqDist(usize, usize),
    Concat { a: usize, b: usize, axis: usize },
    Slice { a: usize, axis: usize, start: usize, len: usize },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Computation tape. Nodes are in topological order by construction
/// (parents precede children). One tape per thread.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: BTreeMap<String, usize>,
}

use crate::numcore::vecmath::sigmoid;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite {
                context: "tape forward",
                index: self.nodes.len(),
            });
        }
        self.nodes.push(Node { op, value });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Registers a named parameter leaf. Registering the same name again
    /// returns the existing node (the value must be identical), so a
    /// parameter used in several places accumulates one gradient.
    pub fn param(&mut self, name: &str, value: &Tensor) -> Result<Var> {
        if let Some(&idx) = self.params.get(name) {
            if self.nodes[idx].value != *value {
                return Err(Error::InvalidConfig {
                    detail: format!("parameter `{name}` re-registered with a different value"),
                });
            }
            return Ok(Var(idx));
        }
        let v = self.push(Op::Leaf(Some(name.to_string())), value.clone())?;
        self.params.insert(name.to_string(), v.0);
        Ok(v)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(Op::Leaf(None), value)
    }

    pub fn constant_rows(&mut self, rows: &[Vec<f64>]) -> Result<Var> {
        self.constant(Tensor::from_rows(rows)?)
    }

    pub fn stop_gradient(&mut self, a: Var) -> Result<Var> {
        let value = self.nodes[a.0].value.clone();
        self.push(Op::StopGrad(a.0), value)
    }

    fn shape2(&self, v: Var, context: &'static str) -> Result<(usize, usize)> {
        let s = self.nodes[v.0].value.shape();
        if s.len() != 2 {
            return Err(Error::ShapeMismatch {
                context,
                detail: format!("expected rank-2 tensor, got shape {s:?}"),
            });
        }
        Ok((s[0], s[1]))
    }

    /// `(m, k) × (k, n) → (m, n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape2(a, "matmul")?;
        let (k2, n) = self.shape2(b, "matmul")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                context: "matmul",
                detail: format!("inner dims {k} vs {k2}"),
            });
        }
        let data = vecmath::mat_mul(
            self.nodes[a.0].value.data(),
            self.nodes[b.0].value.data(),
            m,
            k,
            n,
        );
        self.push(Op::MatMul(a.0, b.0), Tensor::matrix(m, n, data)?)
    }

    /// Same-shape elementwise add, or `(m, n) + (n,)` row broadcast.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.nodes[a.0].value.shape().to_vec();
        let sb = self.nodes[b.0].value.shape().to_vec();
        if sa == sb {
            let data = vecmath::add(self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
            let t = Tensor::new(sa, data)?;
            return self.push(Op::Add(a.0, b.0), t);
        }
        if sa.len() == 2 && sb.len() == 1 && sa[1] == sb[0] {
            let (m, n) = (sa[0], sa[1]);
            let ad = self.nodes[a.0].value.data();
            let bd = self.nodes[b.0].value.data();
            let mut data = Vec::with_capacity(m * n);
            for i in 0..m {
                for j in 0..n {
                    data.push(ad[i * n + j] + bd[j]);
                }
            }
            return self.push(Op::AddRow(a.0, b.0), Tensor::matrix(m, n, data)?);
        }
        Err(Error::ShapeMismatch {
            context: "add",
            detail: format!("{sa:?} vs {sb:?}"),
        })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.nodes[a.0].value.shape().to_vec();
        let sb = self.nodes[b.0].value.shape();
        if sa != sb {
            return Err(Error::ShapeMismatch {
                context: "sub",
                detail: format!("{sa:?} vs {sb:?}"),
            });
        }
        let data = vecmath::sub(self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
        let t = Tensor::new(sa, data)?;
        self.push(Op::Sub(a.0, b.0), t)
    }

    /// Elementwise product of same-shape tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.nodes[a.0].value.shape().to_vec();
        let sb = self.nodes[b.0].value.shape();
        if sa != sb {
            return Err(Error::ShapeMismatch {
                context: "mul",
                detail: format!("{sa:?} vs {sb:?}"),
            });
        }
        let data: Vec<f64> = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::new(sa, data)?;
        self.push(Op::Mul(a.0, b.0), t)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let t = Tensor::new(
            self.nodes[a.0].value.shape().to_vec(),
            vecmath::scale(self.nodes[a.0].value.data(), c),
        )?;
        self.push(Op::Scale(a.0, c), t)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.nodes[a.0].value.data().iter().sum();
        self.push(Op::Sum(a.0), Tensor::scalar(s))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.nodes[a.0].value.numel().max(1);
        let s: f64 = self.nodes[a.0].value.data().iter().sum();
        self.push(Op::Mean(a.0), Tensor::scalar(s / n as f64))
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let t = Tensor::new(
            self.nodes[a.0].value.shape().to_vec(),
            self.nodes[a.0].value.data().iter().map(|&x| f(x)).collect(),
        )?;
        self.push(op, t)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Tanh(a.0), libm::tanh)
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Silu(a.0), |x| x * sigmoid(x))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Relu(a.0), |x| x.max(0.0))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Square(a.0), |x| x * x)
    }

    /// Scalar `Σ (a−b)²` over all entries.
    pub fn sqdist(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.nodes[a.0].value.shape() != self.nodes[b.0].value.shape() {
            return Err(Error::ShapeMismatch {
                context: "sqdist",
                detail: format!(
                    "{:?} vs {:?}",
                    self.nodes[a.0].value.shape(),
                    self.nodes[b.0].value.shape()
                ),
            });
        }
        let d = vecmath::dist2(self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
        self.push(Op::SqDist(a.0, b.0), Tensor::scalar(d))
    }

    /// Concatenates two vectors, or two matrices along `axis` (0 = stack
    /// rows, 1 = side by side).
    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let sa = self.nodes[a.0].value.shape().to_vec();
        let sb = self.nodes[b.0].value.shape().to_vec();
        let mismatch = |detail: String| Error::ShapeMismatch {
            context: "concat",
            detail,
        };
        if sa.len() == 1 && sb.len() == 1 {
            let mut data = self.nodes[a.0].value.data().to_vec();
            data.extend_from_slice(self.nodes[b.0].value.data());
            let t = Tensor::vector(data);
            return self.push(Op::Concat { a: a.0, b: b.0, axis: 0 }, t);
        }
        if sa.len() != 2 || sb.len() != 2 {
            return Err(mismatch(format!("{sa:?} vs {sb:?}")));
        }
        match axis {
            0 => {
                if sa[1] != sb[1] {
                    return Err(mismatch(format!("column counts {} vs {}", sa[1], sb[1])));
                }
                let mut data = self.nodes[a.0].value.data().to_vec();
                data.extend_from_slice(self.nodes[b.0].value.data());
                let t = Tensor::matrix(sa[0] + sb[0], sa[1], data)?;
                self.push(Op::Concat { a: a.0, b: b.0, axis: 0 }, t)
            }
            1 => {
                if sa[0] != sb[0] {
                    return Err(mismatch(format!("row counts {} vs {}", sa[0], sb[0])));
                }
                let (m, n1, n2) = (sa[0], sa[1], sb[1]);
                let ad = self.nodes[a.0].value.data();
                let bd = self.nodes[b.0].value.data();
                let mut data = Vec::with_capacity(m * (n1 + n2));
                for i in 0..m {
                    data.extend_from_slice(&ad[i * n1..(i + 1) * n1]);
                    data.extend_from_slice(&bd[i * n2..(i + 1) * n2]);
                }
                let t = Tensor::matrix(m, n1 + n2, data)?;
                self.push(Op::Concat { a: a.0, b: b.0, axis: 1 }, t)
            }
            _ => Err(mismatch(format!("axis {axis} out of range"))),
        }
    }

    /// Contiguous slice of a vector, or of matrix rows (`axis` 0) or
    /// columns (`axis` 1).
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let sa = self.nodes[a.0].value.shape().to_vec();
        let bad = |detail: String| Error::ShapeMismatch {
            context: "slice",
            detail,
        };
        let op = Op::Slice { a: a.0, axis, start, len };
        if sa.len() == 1 {
            if axis != 0 || start + len > sa[0] {
                return Err(bad(format!("range {start}..{} of {sa:?}", start + len)));
            }
            let t = Tensor::vector(self.nodes[a.0].value.data()[start..start + len].to_vec());
            return self.push(op, t);
        }
        if sa.len() != 2 {
            return Err(bad(format!("rank {} unsupported", sa.len())));
        }
        let (m, n) = (sa[0], sa[1]);
        match axis {
            0 => {
                if start + len > m {
                    return Err(bad(format!("rows {start}..{} of {m}", start + len)));
                }
                let data = self.nodes[a.0].value.data()[start * n..(start + len) * n].to_vec();
                self.push(op, Tensor::matrix(len, n, data)?)
            }
            1 => {
                if start + len > n {
                    return Err(bad(format!("cols {start}..{} of {n}", start + len)));
                }
                let ad = self.nodes[a.0].value.data();
                let mut data = Vec::with_capacity(m * len);
                for i in 0..m {
                    data.extend_from_slice(&ad[i * n + start..i * n + start + len]);
                }
                self.push(op, Tensor::matrix(m, len, data)?)
            }
            _ => Err(bad(format!("axis {axis} out of range"))),
        }
    }

    /// Reverse-mode sweep from a scalar `output`. Returns `∂output/∂p` for
    /// every registered parameter; parameters the output does not depend
    /// on get zero tensors. Gradient flow stops at stop-gradient nodes.
    pub fn backward(&self, output: Var) -> Result<GradMap> {
        if !self.nodes[output.0].value.is_scalar() {
            return Err(Error::NonScalarOutput {
                shape: self.nodes[output.0].value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(vec![1.0]);
        let mut out = GradMap::new();

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    context: "tape backward",
                    index: i,
                });
            }
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf(Some(name)) => {
                    let t = Tensor::new(node.value.shape().to_vec(), g)?;
                    out.insert(name.clone(), t);
                }
                Op::Leaf(None) | Op::StopGrad(_) => {}
                Op::MatMul(a, b) => {
                    let (m, k) = {
                        let s = self.nodes[*a].value.shape();
                        (s[0], s[1])
                    };
                    let n = self.nodes[*b].value.shape()[1];
                    // dA = dZ · Bᵀ, via dA[i,p] = Σ_j dZ[i,j] B[p,j]
                    let bd = self.nodes[*b].value.data();
                    let mut da = vec![0.0; m * k];
                    for i2 in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[i2 * n + j] * bd[p * n + j];
                            }
                            da[i2 * k + p] = s;
                        }
                    }
                    // dB = Aᵀ · dZ
                    let ad = self.nodes[*a].value.data();
                    let mut db = vec![0.0; k * n];
                    for p in 0..k {
                        for i2 in 0..m {
                            let apq = ad[i2 * k + p];
                            if apq == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                db[p * n + j] += apq * g[i2 * n + j];
                            }
                        }
                    }
                    accumulate(&mut grads[*a], &da);
                    accumulate(&mut grads[*b], &db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[*a], &g);
                    accumulate(&mut grads[*b], &g);
                }
                Op::AddRow(a, b) => {
                    accumulate(&mut grads[*a], &g);
                    let n = self.nodes[*b].value.numel();
                    let mut db = vec![0.0; n];
                    for (idx, gv) in g.iter().enumerate() {
                        db[idx % n] += gv;
                    }
                    accumulate(&mut grads[*b], &db);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads[*a], &g);
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    accumulate(&mut grads[*b], &neg);
                }
                Op::Mul(a, b) => {
                    let bd = self.nodes[*b].value.data();
                    let da: Vec<f64> = g.iter().zip(bd).map(|(gv, bv)| gv * bv).collect();
                    let ad = self.nodes[*a].value.data();
                    let db: Vec<f64> = g.iter().zip(ad).map(|(gv, av)| gv * av).collect();
                    accumulate(&mut grads[*a], &da);
                    accumulate(&mut grads[*b], &db);
                }
                Op::Scale(a, c) => {
                    let da: Vec<f64> = g.iter().map(|v| v * c).collect();
                    accumulate(&mut grads[*a], &da);
                }
                Op::Sum(a) => {
                    let da = vec![g[0]; self.nodes[*a].value.numel()];
                    accumulate(&mut grads[*a], &da);
                }
                Op::Mean(a) => {
                    let n = self.nodes[*a].value.numel().max(1);
                    let da = vec![g[0] / n as f64; self.nodes[*a].value.numel()];
                    accumulate(&mut grads[*a], &da);
                }
                Op::Tanh(a) => {
                    let y = node.value.data();
                    let da: Vec<f64> = g.iter().zip(y).map(|(gv, yv)| gv * (1.0 - yv * yv)).collect();
                    accumulate(&mut grads[*a], &da);
                }
                Op::Silu(a) => {
                    let x = self.nodes[*a].value.data();
                    let da: Vec<f64> = g
                        .iter()
                        .zip(x)
                        .map(|(gv, &xv)| {
                            let s = sigmoid(xv);
                            gv * s * (1.0 + xv * (1.0 - s))
                        })
                        .collect();
                    accumulate(&mut grads[*a], &da);
                }
                Op::Relu(a) => {
                    let x = self.nodes[*a].value.data();
                    let da: Vec<f64> =
                        g.iter().zip(x).map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 }).collect();
                    accumulate(&mut grads[*a], &da);
                }
                Op::Square(a) => {
                    let x = self.nodes[*a].value.data();
                    let da: Vec<f64> = g.iter().zip(x).map(|(gv, xv)| gv * 2.0 * xv).collect();
                    accumulate(&mut grads[*a], &da);
                }
                Op::SqDist(a, b) => {
                    let ad = self.nodes[*a].value.data();
                    let bd = self.nodes[*b].value.data();
                    let da: Vec<f64> =
                        ad.iter().zip(bd).map(|(x, y)| 2.0 * g[0] * (x - y)).collect();
                    let db: Vec<f64> = da.iter().map(|v| -v).collect();
                    accumulate(&mut grads[*a], &da);
                    accumulate(&mut grads[*b], &db);
                }
                Op::Concat { a, b, axis } => {
                    let sa = self.nodes[*a].value.shape();
                    if sa.len() == 1 || *axis == 0 {
                        let na = self.nodes[*a].value.numel();
                        accumulate(&mut grads[*a], &g[..na]);
                        accumulate(&mut grads[*b], &g[na..]);
                    } else {
                        let (m, n1) = (sa[0], sa[1]);
                        let n2 = self.nodes[*b].value.shape()[1];
                        let mut da = vec![0.0; m * n1];
                        let mut db = vec![0.0; m * n2];
                        for i2 in 0..m {
                            let row = &g[i2 * (n1 + n2)..(i2 + 1) * (n1 + n2)];
                            da[i2 * n1..(i2 + 1) * n1].copy_from_slice(&row[..n1]);
                            db[i2 * n2..(i2 + 1) * n2].copy_from_slice(&row[n1..]);
                        }
                        accumulate(&mut grads[*a], &da);
                        accumulate(&mut grads[*b], &db);
                    }
                }
                Op::Slice { a, axis, start, len } => {
                    let sa = self.nodes[*a].value.shape();
                    let mut da = vec![0.0; self.nodes[*a].value.numel()];
                    if sa.len() == 1 {
                        da[*start..start + len].copy_from_slice(&g);
                    } else {
                        let (m, n) = (sa[0], sa[1]);
                        match axis {
                            0 => da[start * n..(start + len) * n].copy_from_slice(&g),
                            _ => {
                                for i2 in 0..m {
                                    da[i2 * n + start..i2 * n + start + len]
                                        .copy_from_slice(&g[i2 * len..(i2 + 1) * len]);
                                }
                            }
                        }
                    }
                    accumulate(&mut grads[*a], &da);
                }
            }
        }

        for (name, &idx) in &self.params {
            if !out.contains_key(name) {
                out.insert(
                    name.clone(),
                    Tensor::zeros(self.nodes[idx].value.shape().to_vec()),
                );
            }
        }
        Ok(out)
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, contribution: &[f64]) {
    match slot {
        Some(g) => {
            for (gv, c) in g.iter_mut().zip(contribution) {
                *gv += c;
            }
        }
        None => *slot = Some(contribution.to_vec()),
    }
}
