//! Randomized gradient checking: builds composite programs over the
//! supported op set, runs reverse-mode differentiation, and compares
//! every parameter gradient against central finite differences of the
//! replayed forward pass.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::Result;
use crate::numcore::{ParamSet, Rng, Tape, Tensor, Var};

#[derive(Debug, Clone)]
enum POp {
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Tanh(usize),
    Silu(usize),
    Relu(usize),
    Square(usize),
    ConcatCols(usize, usize),
    SliceCols(usize, usize, usize),
}

/// A replayable random program over named parameter leaves and constants.
#[derive(Debug, Clone)]
pub struct Program {
    param_names: Vec<String>,
    consts: Vec<Tensor>,
    ops: Vec<POp>,
    /// Readout terms `coef · mean(node)`.
    readout: Vec<(usize, f64)>,
    /// Optional `coef · sqdist(a, b)` readout term.
    sqdist_pair: Option<(usize, usize, f64)>,
}

const SHAPE_MENU: [(usize, usize); 4] = [(2, 2), (2, 3), (3, 2), (3, 3)];

/// Random parameter tensors `p0..p{n}` with shapes from the menu.
pub fn random_params(seed: u64) -> ParamSet {
    let mut rng = Rng::new(seed).split("gradcheck.params");
    let mut params = ParamSet::new();
    let n_params = 2 + rng.below(2);
    for i in 0..n_params {
        let (r, c) = SHAPE_MENU[rng.below(SHAPE_MENU.len())];
        let data: Vec<f64> = (0..r * c).map(|_| 0.6 * rng.normal()).collect();
        params
            .insert(&format!("p{i}"), Tensor::matrix(r, c, data).unwrap())
            .unwrap();
    }
    params
}

/// Builds a random program over the given parameters.
pub fn random_program_over(seed: u64, n_ops: usize, params: &ParamSet) -> Program {
    let mut rng = Rng::new(seed).split("gradcheck.program");
    let mut param_names = Vec::new();
    let mut shapes: Vec<(usize, usize)> = Vec::new();
    for (name, t) in params.iter() {
        param_names.push(name.clone());
        shapes.push((t.shape()[0], t.shape()[1]));
    }
    let mut consts = Vec::new();
    let n_consts = 1 + rng.below(2);
    for _ in 0..n_consts {
        let (r, c) = SHAPE_MENU[rng.below(SHAPE_MENU.len())];
        let data: Vec<f64> = (0..r * c).map(|_| 0.6 * rng.normal()).collect();
        consts.push(Tensor::matrix(r, c, data).unwrap());
        shapes.push((r, c));
    }

    let mut ops = Vec::new();
    while ops.len() < n_ops {
        let pool = shapes.len();
        let kind = rng.below(9);
        let op = match kind {
            0 => {
                let mut candidates = Vec::new();
                for a in 0..pool {
                    for b in 0..pool {
                        if shapes[a].1 == shapes[b].0 {
                            candidates.push((a, b));
                        }
                    }
                }
                if candidates.is_empty() {
                    continue;
                }
                let (a, b) = candidates[rng.below(candidates.len())];
                shapes.push((shapes[a].0, shapes[b].1));
                POp::MatMul(a, b)
            }
            1 | 2 | 3 => {
                let mut candidates = Vec::new();
                for a in 0..pool {
                    for b in 0..pool {
                        if a != b && shapes[a] == shapes[b] {
                            candidates.push((a, b));
                        }
                    }
                }
                if candidates.is_empty() {
                    continue;
                }
                let (a, b) = candidates[rng.below(candidates.len())];
                shapes.push(shapes[a]);
                match kind {
                    1 => POp::Add(a, b),
                    2 => POp::Sub(a, b),
                    _ => POp::Mul(a, b),
                }
            }
            4 => {
                let a = rng.below(pool);
                shapes.push(shapes[a]);
                POp::Scale(a, rng.uniform_in(-2.0, 2.0))
            }
            5 => {
                let a = rng.below(pool);
                shapes.push(shapes[a]);
                match rng.below(3) {
                    0 => POp::Tanh(a),
                    1 => POp::Silu(a),
                    _ => POp::Relu(a),
                }
            }
            6 => {
                let a = rng.below(pool);
                shapes.push(shapes[a]);
                POp::Square(a)
            }
            7 => {
                let mut candidates = Vec::new();
                for a in 0..pool {
                    for b in 0..pool {
                        if shapes[a].0 == shapes[b].0 {
                            candidates.push((a, b));
                        }
                    }
                }
                if candidates.is_empty() {
                    continue;
                }
                let (a, b) = candidates[rng.below(candidates.len())];
                shapes.push((shapes[a].0, shapes[a].1 + shapes[b].1));
                POp::ConcatCols(a, b)
            }
            _ => {
                let a = rng.below(pool);
                let (r, c) = shapes[a];
                if c < 2 {
                    continue;
                }
                let len = 1 + rng.below(c - 1);
                let start = rng.below(c - len + 1);
                shapes.push((r, len));
                POp::SliceCols(a, start, len)
            }
        };
        ops.push(op);
    }

    let pool = shapes.len();
    let n_reads = 2 + rng.below(2);
    let readout = (0..n_reads)
        .map(|_| (rng.below(pool), rng.uniform_in(-1.5, 1.5)))
        .collect();
    let mut sqdist_pair = None;
    let mut candidates = Vec::new();
    for a in 0..pool {
        for b in 0..pool {
            if a != b && shapes[a] == shapes[b] {
                candidates.push((a, b));
            }
        }
    }
    if !candidates.is_empty() {
        let (a, b) = candidates[rng.below(candidates.len())];
        sqdist_pair = Some((a, b, 0.1 * rng.uniform_in(-1.0, 1.0)));
    }

    Program {
        param_names,
        consts,
        ops,
        readout,
        sqdist_pair,
    }
}

/// Convenience: fresh random parameters plus a program over them.
pub fn random_program(seed: u64, n_ops: usize) -> (Program, ParamSet) {
    let params = random_params(seed);
    let program = random_program_over(seed, n_ops, &params);
    (program, params)
}

impl Program {
    /// Replays the program on a tape with the given parameter values.
    /// Returns the scalar output node.
    pub fn run(&self, tape: &mut Tape, params: &ParamSet) -> Result<Var> {
        let mut pool: Vec<Var> = Vec::new();
        for name in &self.param_names {
            pool.push(tape.param(name, params.get(name).unwrap())?);
        }
        for c in &self.consts {
            pool.push(tape.constant(c.clone())?);
        }
        for op in &self.ops {
            let v = match *op {
                POp::MatMul(a, b) => tape.matmul(pool[a], pool[b])?,
                POp::Add(a, b) => tape.add(pool[a], pool[b])?,
                POp::Sub(a, b) => tape.sub(pool[a], pool[b])?,
                POp::Mul(a, b) => tape.mul(pool[a], pool[b])?,
                POp::Scale(a, c) => tape.scale(pool[a], c)?,
                POp::Tanh(a) => tape.tanh(pool[a])?,
                POp::Silu(a) => tape.silu(pool[a])?,
                POp::Relu(a) => tape.relu(pool[a])?,
                POp::Square(a) => tape.square(pool[a])?,
                POp::ConcatCols(a, b) => tape.concat(pool[a], pool[b], 1)?,
                POp::SliceCols(a, start, len) => tape.slice(pool[a], 1, start, len)?,
            };
            pool.push(v);
        }
        let mut total: Option<Var> = None;
        for &(node, coef) in &self.readout {
            let m = tape.mean(pool[node])?;
            let scaled = tape.scale(m, coef)?;
            total = Some(match total {
                None => scaled,
                Some(acc) => tape.add(acc, scaled)?,
            });
        }
        if let Some((a, b, coef)) = self.sqdist_pair {
            let sd = tape.sqdist(pool[a], pool[b])?;
            let scaled = tape.scale(sd, coef)?;
            total = Some(match total {
                None => scaled,
                Some(acc) => tape.add(acc, scaled)?,
            });
        }
        Ok(total.expect("program has a readout"))
    }

    /// Scalar output for given parameter values, on a throwaway tape.
    pub fn value(&self, params: &ParamSet) -> Result<f64> {
        let mut tape = Tape::new();
        let out = self.run(&mut tape, params)?;
        tape.value(out).scalar_value()
    }
}

/// Outcome of one randomized gradient check.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckOutcome {
    /// max over parameter entries of `|ad − fd| / max(1, |fd|)`.
    pub max_rel_err: f64,
    pub entries_checked: usize,
    pub tape_ops: usize,
}

/// Builds a random program from `seed`, differentiates it in reverse
/// mode, and compares against central finite differences with the given
/// step.
pub fn check_random_graph(seed: u64, n_ops: usize, fd_step: f64) -> Result<GradCheckOutcome> {
    let (program, params) = random_program(seed, n_ops);
    let mut tape = Tape::new();
    let out = program.run(&mut tape, &params)?;
    let tape_ops = tape.len();
    let grads = tape.backward(out)?;

    let mut max_rel: f64 = 0.0;
    let mut entries = 0;
    for (name, tensor) in params.iter() {
        let g = &grads[name];
        for idx in 0..tensor.numel() {
            let mut plus = params.clone();
            let mut t = tensor.clone();
            t.data_mut()[idx] += fd_step;
            plus.set(name, t).unwrap();
            let mut minus = params.clone();
            let mut t = tensor.clone();
            t.data_mut()[idx] -= fd_step;
            minus.set(name, t).unwrap();
            let fd = (program.value(&plus)? - program.value(&minus)?) / (2.0 * fd_step);
            let ad = g.data()[idx];
            let rel = (ad - fd).abs() / fd.abs().max(1.0);
            max_rel = max_rel.max(rel);
            entries += 1;
        }
    }
    Ok(GradCheckOutcome {
        max_rel_err: max_rel,
        entries_checked: entries,
        tape_ops,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_graphs_pass_fd_check() {
        for seed in 0..8 {
            let outcome = check_random_graph(seed, 12, 1e-6).unwrap();
            assert!(
                outcome.max_rel_err < 1e-5,
                "seed {seed}: rel err {}",
                outcome.max_rel_err
            );
            assert!(outcome.entries_checked > 0);
        }
    }

    #[test]
    fn gradients_are_linear_in_the_loss() {
        for seed in 100..104 {
            let params = random_params(seed);
            let prog_f = random_program_over(seed, 10, &params);
            let prog_g = random_program_over(seed ^ 0xABCD, 10, &params);
            let (a, b) = (0.7, -1.3);
            let grad_of = |prog: &Program| {
                let mut t = Tape::new();
                let v = prog.run(&mut t, &params).unwrap();
                t.backward(v).unwrap()
            };
            let gf = grad_of(&prog_f);
            let gg = grad_of(&prog_g);
            let mut tape = Tape::new();
            let f = prog_f.run(&mut tape, &params).unwrap();
            let g = prog_g.run(&mut tape, &params).unwrap();
            let fa = tape.scale(f, a).unwrap();
            let gb = tape.scale(g, b).unwrap();
            let y = tape.add(fa, gb).unwrap();
            let combined = tape.backward(y).unwrap();
            for (name, gfv) in &gf {
                let expect: Vec<f64> = gfv
                    .data()
                    .iter()
                    .zip(gg[name].data())
                    .map(|(x, y)| a * x + b * y)
                    .collect();
                for (e, got) in expect.iter().zip(combined[name].data()) {
                    assert!((e - got).abs() < 1e-12, "seed {seed} {name}");
                }
            }
        }
    }
}
