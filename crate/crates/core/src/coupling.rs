//! Mini-batch couplings between a data batch and a prior batch.

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How prior and data batch elements are paired during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CouplingMode {
    /// Squared-Euclidean optimal assignment.
    Ot,
    /// Pair elements in the order they were drawn.
    Independent,
}

/// Pairing `x0[i] <-> x1[permutation[i]]` and its total squared cost.
#[derive(Debug, Clone, PartialEq)]
pub struct Coupling {
    pub permutation: Vec<usize>,
    pub cost: f64,
}

impl Coupling {
    /// Rows of `x1` reordered so row `i` pairs with `x0[i]`.
    pub fn apply(&self, x1: ArrayView2<f64>) -> Array2<f64> {
        x1.select(Axis(0), &self.permutation)
    }
}

fn check_batches(x0: ArrayView2<f64>, x1: ArrayView2<f64>) -> Result<()> {
    if x0.dim() != x1.dim() {
        return Err(Error::ShapeMismatch(format!(
            "coupling needs equal batches, got {:?} and {:?}",
            x0.dim(),
            x1.dim()
        )));
    }
    Ok(())
}

/// Squared Euclidean cost matrix `C[i][j] = |x0[i] - x1[j]|^2`.
pub fn squared_distances(x0: ArrayView2<f64>, x1: ArrayView2<f64>) -> Array2<f64> {
    let (n, m) = (x0.nrows(), x1.nrows());
    let mut cost = Array2::zeros((n, m));
    for (i, a) in x0.axis_iter(Axis(0)).enumerate() {
        for (j, b) in x1.axis_iter(Axis(0)).enumerate() {
            cost[[i, j]] = a.iter().zip(b.iter()).map(|(p, q)| (p - q).powi(2)).sum();
        }
    }
    cost
}

fn total_cost(cost: &Array2<f64>, perm: &[usize]) -> f64 {
    perm.iter().enumerate().map(|(i, &j)| cost[[i, j]]).sum()
}

/// Minimum-cost perfect matching on a square cost matrix.
///
/// Shortest augmenting path form of the Hungarian method, O(n^3). Returns
/// `assignment[row] = column`. Ties go to the lowest column index.
pub fn linear_sum_assignment(cost: &Array2<f64>) -> Vec<usize> {
    let n = cost.nrows();
    assert_eq!(n, cost.ncols(), "assignment needs a square cost matrix");
    if n == 0 {
        return Vec::new();
    }
    let inf = f64::INFINITY;
    // 1-based potentials with a virtual column 0.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut minv = vec![inf; n + 1];
    let mut used = vec![false; n + 1];
    let c = cost.as_standard_layout();
    let c = c.as_slice().expect("standard layout");

    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        minv.iter_mut().for_each(|m| *m = inf);
        used.iter_mut().for_each(|u| *u = false);
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let row = &c[(i0 - 1) * n..i0 * n];
            let ui0 = u[i0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = row[j - 1] - ui0 - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        if p[j] > 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    assignment
}

/// Optimal squared-Euclidean pairing of two equal-size batches.
pub fn hungarian_couple(x0: ArrayView2<f64>, x1: ArrayView2<f64>) -> Result<Coupling> {
    check_batches(x0, x1)?;
    if x0.nrows() == 0 {
        return Err(crate::error::invalid("coupling needs at least one sample"));
    }
    let cost = squared_distances(x0, x1);
    let permutation = linear_sum_assignment(&cost);
    let cost = total_cost(&cost, &permutation);
    Ok(Coupling { permutation, cost })
}

/// Identity pairing, for ablations against OT.
pub fn independent_couple(x0: ArrayView2<f64>, x1: ArrayView2<f64>) -> Result<Coupling> {
    check_batches(x0, x1)?;
    let permutation: Vec<usize> = (0..x0.nrows()).collect();
    let cost = x0
        .axis_iter(Axis(0))
        .zip(x1.axis_iter(Axis(0)))
        .map(|(a, b)| a.iter().zip(b.iter()).map(|(p, q)| (p - q).powi(2)).sum::<f64>())
        .sum();
    Ok(Coupling { permutation, cost })
}

pub fn couple(mode: CouplingMode, x0: ArrayView2<f64>, x1: ArrayView2<f64>) -> Result<Coupling> {
    match mode {
        CouplingMode::Ot => hungarian_couple(x0, x1),
        CouplingMode::Independent => independent_couple(x0, x1),
    }
}
