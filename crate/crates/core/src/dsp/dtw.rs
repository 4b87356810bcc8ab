use alloc::vec;
use alloc::vec::Vec;

use super::Matrix;
use crate::error::{invalid, Error, Result};

/// Monotone alignment between two sequences, from `(0, 0)` to
/// `(len_a - 1, len_b - 1)` with steps `(1,0)`, `(0,1)`, `(1,1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DtwPath {
    pub pairs: Vec<(usize, usize)>,
    /// Sum of the frame distances of every visited cell.
    pub total_cost: f64,
}

impl DtwPath {
    /// For each index `j` of the second sequence, the lowest index of the
    /// first sequence paired with it.
    pub fn project_onto_second(&self, len_b: usize) -> Vec<usize> {
        let mut out = vec![usize::MAX; len_b];
        for &(i, j) in &self.pairs {
            if j < len_b && i < out[j] {
                out[j] = i;
            }
        }
        out
    }
}

pub fn squared_euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// DTW over per-frame squared Euclidean distances.
pub fn dtw_align(a: &Matrix, b: &Matrix) -> Result<DtwPath> {
    if a.rows() == 0 || b.rows() == 0 {
        return Err(invalid!("dtw needs nonempty sequences ({} and {} frames)", a.rows(), b.rows()));
    }
    if a.cols() != b.cols() {
        return Err(invalid!("dtw feature dimensions differ: {} vs {}", a.cols(), b.cols()));
    }
    let costs = Matrix::from_fn(a.rows(), b.rows(), |i, j| squared_euclidean(a.row(i), b.row(j)));
    dtw_from_costs(&costs)
}

/// DTW over a precomputed `len_a x len_b` local cost matrix.
///
/// Backtracking prefers the diagonal step, then `(i-1, j)`, then `(i, j-1)`
/// when accumulated costs tie.
pub fn dtw_from_costs(costs: &Matrix) -> Result<DtwPath> {
    let (n, m) = (costs.rows(), costs.cols());
    if n == 0 || m == 0 {
        return Err(invalid!("empty cost matrix"));
    }
    if !costs.all_finite() {
        return Err(Error::Alignment("non-finite frame distance".into()));
    }
    let mut acc = Matrix::zeros(n, m);
    for i in 0..n {
        for j in 0..m {
            let best = match (i, j) {
                (0, 0) => 0.0,
                (0, _) => acc.at(0, j - 1),
                (_, 0) => acc.at(i - 1, 0),
                _ => acc.at(i - 1, j - 1).min(acc.at(i - 1, j)).min(acc.at(i, j - 1)),
            };
            acc.set(i, j, costs.at(i, j) + best);
        }
    }
    let (mut i, mut j) = (n - 1, m - 1);
    let mut pairs = vec![(i, j)];
    while (i, j) != (0, 0) {
        (i, j) = match (i, j) {
            (0, _) => (0, j - 1),
            (_, 0) => (i - 1, 0),
            _ => {
                let (d, up, left) = (acc.at(i - 1, j - 1), acc.at(i - 1, j), acc.at(i, j - 1));
                if d <= up && d <= left {
                    (i - 1, j - 1)
                } else if up <= left {
                    (i - 1, j)
                } else {
                    (i, j - 1)
                }
            }
        };
        pairs.push((i, j));
    }
    pairs.reverse();
    Ok(DtwPath { pairs, total_cost: acc.at(n - 1, m - 1) })
}
