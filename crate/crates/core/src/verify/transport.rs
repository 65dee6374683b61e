//! Sample-set distances: Wasserstein-2 by exact assignment (or sorting in
//! 1D, sliced projections at scale) and a raw-coordinate diversity score.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::numcore::vecmath;
use crate::numcore::Rng;

/// How a W2 value was computed; sliced estimates are approximate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum W2Method {
    Sorted1d,
    ExactAssignment,
    Sliced,
}

#[derive(Debug, Clone, Copy)]
pub struct W2Estimate {
    /// Squared distance (mean squared matched cost).
    pub squared: f64,
    pub method: W2Method,
}

/// Largest sample count for which the exact assignment is used in d ≥ 2.
pub const EXACT_ASSIGNMENT_LIMIT: usize = 256;
const SLICED_PROJECTIONS: usize = 64;
const SLICED_SEED: u64 = 0x511CED;

/// Squared Wasserstein-2 distance between equal-size sample sets.
/// 1D uses sorted pairing (exact); d ≥ 2 up to
/// [`EXACT_ASSIGNMENT_LIMIT`] samples uses exact minimum-cost assignment;
/// larger sets fall back to sliced projections with a fixed internal seed.
pub fn w2_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<W2Estimate> {
    if a.len() != b.len() {
        return Err(Error::SampleCountMismatch {
            a: a.len(),
            b: b.len(),
        });
    }
    if a.is_empty() {
        return Err(Error::TooFewSamples { n: 0, need: 1 });
    }
    let d = a[0].len();
    if a.iter().chain(b.iter()).any(|x| x.len() != d) {
        return Err(Error::ShapeMismatch {
            context: "w2_distance",
            detail: "ragged sample dimensions".into(),
        });
    }
    if d == 1 {
        let xs: Vec<f64> = a.iter().map(|v| v[0]).collect();
        let ys: Vec<f64> = b.iter().map(|v| v[0]).collect();
        return Ok(W2Estimate {
            squared: sorted_w2_squared(&xs, &ys),
            method: W2Method::Sorted1d,
        });
    }
    if a.len() <= EXACT_ASSIGNMENT_LIMIT {
        let n = a.len();
        let cost: Vec<Vec<f64>> = a
            .iter()
            .map(|ai| b.iter().map(|bj| vecmath::dist2(ai, bj)).collect())
            .collect();
        let (_, total) = min_cost_assignment(&cost);
        return Ok(W2Estimate {
            squared: total / n as f64,
            method: W2Method::ExactAssignment,
        });
    }
    let mut rng = Rng::new(SLICED_SEED);
    let mut total = 0.0;
    for _ in 0..SLICED_PROJECTIONS {
        let dir = rng.normal_vec(d);
        let nrm = vecmath::norm(&dir);
        let dir = vecmath::scale(&dir, 1.0 / nrm);
        let xs: Vec<f64> = a.iter().map(|v| vecmath::dot(v, &dir)).collect();
        let ys: Vec<f64> = b.iter().map(|v| vecmath::dot(v, &dir)).collect();
        total += sorted_w2_squared(&xs, &ys);
    }
    Ok(W2Estimate {
        squared: total / SLICED_PROJECTIONS as f64,
        method: W2Method::Sliced,
    })
}

fn sorted_w2_squared(a: &[f64], b: &[f64]) -> f64 {
    let mut xs = a.to_vec();
    let mut ys = b.to_vec();
    xs.sort_by(|p, q| p.partial_cmp(q).unwrap());
    ys.sort_by(|p, q| p.partial_cmp(q).unwrap());
    xs.iter().zip(&ys).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / xs.len() as f64
}

/// Minimum-cost perfect assignment on a square cost matrix via shortest
/// augmenting paths with potentials (O(n³)). Returns the row-to-column
/// assignment and the total cost.
pub fn min_cost_assignment(cost: &[Vec<f64>]) -> (Vec<usize>, f64) {
    let n = cost.len();
    debug_assert!(cost.iter().all(|row| row.len() == n));
    if n == 0 {
        return (Vec::new(), 0.0);
    }
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut assigned_row = vec![0usize; n + 1]; // column -> row, 1-based, 0 = free
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        assigned_row[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = assigned_row[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[assigned_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if assigned_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            assigned_row[j0] = assigned_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0usize; n];
    let mut total = 0.0;
    for j in 1..=n {
        let i = assigned_row[j];
        if i > 0 {
            row_to_col[i - 1] = j - 1;
            total += cost[i - 1][j - 1];
        }
    }
    (row_to_col, total)
}

/// Trace of the unbiased sample covariance: the raw-coordinate diversity
/// score.
pub fn diversity(samples: &[Vec<f64>]) -> Result<f64> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::TooFewSamples { n, need: 2 });
    }
    let d = samples[0].len();
    let mut mean = vec![0.0; d];
    for s in samples {
        for (m, v) in mean.iter_mut().zip(s) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let total: f64 = samples.iter().map(|s| vecmath::dist2(s, &mean)).sum();
    Ok(total / (n - 1) as f64)
}
