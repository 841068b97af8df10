//! Minimum-nuclear-norm symmetric completion by proximal gradient with
//! continuation in the penalty.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::data::{Generator, LabeledDataset, Split};
use crate::error::{Error, Result};
use crate::model::Input;

/// Largest dimension accepted by the dense solver.
pub const MAX_DIM: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NuclearOptions {
    /// Stop once every observed entry is matched to this accuracy...
    pub feasibility_tol: f64,
    /// ...and the nuclear norm changes by less than this between stages.
    pub stability_tol: f64,
    /// Inner iterations stop when the prox-gradient mapping is below
    /// `inner_tol * tau`.
    pub inner_tol: f64,
    pub max_stages: usize,
    pub max_inner: usize,
}

impl Default for NuclearOptions {
    fn default() -> Self {
        Self { feasibility_tol: 1e-7, stability_tol: 1e-6, inner_tol: 1e-7, max_stages: 80, max_inner: 200_000 }
    }
}

/// Symmetric completion and its continuation history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionSolution {
    pub dim: usize,
    /// Row-major `dim x dim`.
    pub w: Vec<f64>,
    pub nuclear_norm: f64,
    pub feasibility_residual: f64,
    /// Penalty of the final stage; the solution is a minimizer of
    /// `(1/n) sum (<P_i, W> - y_i)^2 + tau ||W||_*`.
    pub tau: f64,
    /// `(tau, nuclear norm, feasibility residual)` after every stage.
    pub stages: Vec<(f64, f64, f64)>,
}

impl CompletionSolution {
    pub fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.dim, self.dim, &self.w)
    }
}

/// Observed entries `(i, j, y)` of a pair-indexed split.
pub fn observations(split: &Split) -> Result<Vec<(usize, usize, f64)>> {
    split
        .iter()
        .map(|s| match s.x {
            Input::Pair(i, j) => Ok((*i, *j, s.y)),
            Input::Dense(_) => Err(Error::config("matrix completion needs index-pair inputs")),
        })
        .collect()
}

/// Matrix dimension implied by a completion dataset.
pub fn completion_dim(dataset: &LabeledDataset) -> Result<usize> {
    if let Generator::MultiplicationTable { d, .. } = dataset.generator {
        return Ok(d);
    }
    let mut d = 0;
    for x in dataset.train.x.iter().chain(&dataset.test.x) {
        match x {
            Input::Pair(i, j) => d = d.max(i + 1).max(j + 1),
            Input::Dense(_) => return Err(Error::config("matrix completion needs index-pair inputs")),
        }
    }
    Ok(d)
}

/// `<P_i, W>` with the symmetrized indicator.
pub(crate) fn sym_entry(w: &DMatrix<f64>, i: usize, j: usize) -> f64 {
    0.5 * (w[(i, j)] + w[(j, i)])
}

/// `sum_i c_i P_i` as a dense symmetric matrix.
pub(crate) fn sym_scatter(dim: usize, obs: &[(usize, usize, f64)], c: &[f64]) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(dim, dim);
    for (&(i, j, _), &ci) in obs.iter().zip(c) {
        m[(i, j)] += 0.5 * ci;
        m[(j, i)] += 0.5 * ci;
    }
    m
}

fn residuals(w: &DMatrix<f64>, obs: &[(usize, usize, f64)]) -> Vec<f64> {
    obs.iter().map(|&(i, j, y)| sym_entry(w, i, j) - y).collect()
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let d = m.nrows();
    for i in 0..d {
        for j in 0..i {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Singular-value soft threshold of a symmetric matrix; returns the result
/// and its nuclear norm.
fn shrink(m: DMatrix<f64>, thr: f64) -> (DMatrix<f64>, f64) {
    let eig = SymmetricEigen::new(m);
    let vals = eig.eigenvalues.map(|l| l.signum() * (l.abs() - thr).max(0.0));
    let nuc = vals.iter().map(|v| v.abs()).sum();
    let q = eig.eigenvectors;
    let scaled = DMatrix::from_fn(q.nrows(), q.ncols(), |i, k| q[(i, k)] * vals[k]);
    let mut out = scaled * q.transpose();
    symmetrize(&mut out);
    (out, nuc)
}

pub fn nuclear_norm(w: &DMatrix<f64>) -> f64 {
    w.clone().svd(false, false).singular_values.iter().sum()
}

/// Minimum-nuclear-norm symmetric matrix matching the observed entries,
/// approached along a halving sequence of penalties.
pub fn solve_min_nuclear(dataset: &LabeledDataset) -> Result<CompletionSolution> {
    solve_min_nuclear_with(dataset, NuclearOptions::default())
}

pub fn solve_min_nuclear_with(dataset: &LabeledDataset, opts: NuclearOptions) -> Result<CompletionSolution> {
    let dim = completion_dim(dataset)?;
    if dim == 0 || dim > MAX_DIM {
        return Err(Error::config(format!("completion dimension {dim} outside 1..={MAX_DIM}")));
    }
    let obs = observations(&dataset.train)?;
    if obs.is_empty() {
        return Err(Error::config("no observed entries"));
    }
    let n = obs.len() as f64;
    // Gradient of (1/n) sum r_i^2 is (2/n) sum r_i P_i with Lipschitz constant
    // at most 2/n, so a unit-normalized step is n/2.
    let step = n / 2.0;
    let ys: Vec<f64> = obs.iter().map(|o| o.2).collect();
    let tau0 = (sym_scatter(dim, &obs, &ys) * (2.0 / n)).norm();
    if tau0 == 0.0 {
        return Ok(CompletionSolution {
            dim,
            w: vec![0.0; dim * dim],
            nuclear_norm: 0.0,
            feasibility_residual: 0.0,
            tau: 0.0,
            stages: Vec::new(),
        });
    }

    let mut w = DMatrix::zeros(dim, dim);
    let mut tau = tau0;
    let mut stages = Vec::new();
    let mut prev_nuc: Option<f64> = None;
    for _ in 0..opts.max_stages {
        tau *= 0.5;
        let thr = step * tau;
        // Accelerated proximal gradient with gradient-based restart.
        let mut y = w.clone();
        let mut momentum = 1.0_f64;
        let mut nuc = 0.0;
        let mut done = false;
        for _ in 0..opts.max_inner {
            let r = residuals(&y, &obs);
            let g = sym_scatter(dim, &obs, &r);
            let (next, next_nuc) = shrink(&y - g, thr);
            nuc = next_nuc;
            let mapping = (&y - &next).norm() / step;
            let m_next = 0.5 * (1.0 + (1.0 + 4.0 * momentum * momentum).sqrt());
            let restart = (&y - &next).dot(&(&next - &w)) > 0.0;
            let beta = if restart { 0.0 } else { (momentum - 1.0) / m_next };
            let mut y_next = &next + (&next - &w) * beta;
            symmetrize(&mut y_next);
            momentum = if restart { 1.0 } else { m_next };
            w = next;
            y = y_next;
            if mapping <= opts.inner_tol * tau {
                done = true;
                break;
            }
        }
        if !done {
            return Err(Error::NotConverged(format!("inner solve at tau = {tau:e} did not converge")));
        }
        let feas = residuals(&w, &obs).iter().fold(0.0_f64, |m, r| m.max(r.abs()));
        stages.push((tau, nuc, feas));
        let stable = prev_nuc.is_some_and(|p| (nuc - p).abs() <= opts.stability_tol * nuc.max(f64::MIN_POSITIVE));
        if feas <= opts.feasibility_tol && stable {
            return Ok(CompletionSolution {
                dim,
                w: w.transpose().as_slice().to_vec(),
                nuclear_norm: nuc,
                feasibility_residual: feas,
                tau,
                stages,
            });
        }
        prev_nuc = Some(nuc);
    }
    let last = stages.last().map_or(f64::NAN, |s| s.2);
    Err(Error::NotConverged(format!("continuation stopped with feasibility residual {last:e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_multiplication_table, multiplication_table, Task};

    fn pairs(entries: &[(usize, usize, f64)], d: usize) -> LabeledDataset {
        let mut ds = LabeledDataset::new(
            Task::Regression,
            Split::new(entries.iter().map(|e| Input::Pair(e.0, e.1)).collect(), entries.iter().map(|e| e.2).collect()).unwrap(),
            Split::new(vec![Input::Pair(d - 1, d - 1)], vec![0.0]).unwrap(),
        )
        .unwrap();
        ds.generator = Generator::MultiplicationTable { d, observe_fraction: 0.0 };
        ds
    }

    #[test]
    fn full_observation_returns_target() {
        let d = 5;
        let ds = gen_multiplication_table(d, 1.0, 0).unwrap();
        let sol = solve_min_nuclear(&ds).unwrap();
        let x = multiplication_table(d);
        for (a, b) in sol.w.iter().zip(&x) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!(sol.feasibility_residual <= 1e-7);
    }

    #[test]
    fn single_diagonal_entry() {
        let ds = pairs(&[(0, 0, 1.0)], 2);
        let sol = solve_min_nuclear(&ds).unwrap();
        let want = [1.0, 0.0, 0.0, 0.0];
        for (a, b) in sol.w.iter().zip(want) {
            assert!((a - b).abs() < 1e-6, "{:?}", sol.w);
        }
        assert!((sol.nuclear_norm - 1.0).abs() < 1e-6);
    }

    #[test]
    fn iterates_are_exactly_symmetric() {
        let ds = gen_multiplication_table(6, 0.5, 2).unwrap();
        let sol = solve_min_nuclear(&ds).unwrap();
        let w = sol.matrix();
        assert_eq!((&w - w.transpose()).norm(), 0.0);
    }

    #[test]
    fn dense_inputs_are_rejected() {
        let ds = LabeledDataset::new(
            Task::Regression,
            Split::new(vec![Input::Dense(vec![1.0])], vec![1.0]).unwrap(),
            Split::default(),
        )
        .unwrap();
        assert!(solve_min_nuclear(&ds).is_err());
    }
}
