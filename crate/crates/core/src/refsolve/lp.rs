//! Dense two-phase tableau simplex. Phase two runs on a perturbed right-hand
//! side to escape degenerate vertices, then a dual simplex pass restores the
//! exact one.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Optimal vertex of `min c^T x  s.t.  A x = b, x >= 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct LpSolution {
    pub x: Vec<f64>,
    pub objective: f64,
    /// Basic column of every non-redundant row.
    pub basis: Vec<usize>,
    /// Equality-constraint multipliers `y` with `B^T y = c_B`.
    pub duals: Vec<f64>,
    /// `c - A^T y`; nonnegative at an optimal basis.
    pub reduced_costs: Vec<f64>,
    pub pivots: usize,
}

impl LpSolution {
    /// `max(0, -min_j reduced_cost_j)`.
    pub fn dual_infeasibility(&self) -> f64 {
        self.reduced_costs.iter().fold(0.0_f64, |m, &r| m.max(-r))
    }
}

const EPS: f64 = 1e-10;

/// Pivots between recomputing the tableau from the original data.
const REFRESH_EVERY: usize = 50;
/// Consecutive degenerate pivots before falling back to Bland's rule.
const STALL_LIMIT: usize = 50;
/// Relative size of the phase-two right-hand-side perturbation.
const PERTURB: f64 = 1e-7;

struct Tableau {
    t: DMatrix<f64>,
    /// Sign-normalized `[A | I | b]`.
    orig: DMatrix<f64>,
    /// Costs of the current phase (zero on the right-hand side).
    cost: Vec<f64>,
    keep: Vec<bool>,
    basis: Vec<usize>,
    obj: Vec<f64>,
    pivots: usize,
    since_refresh: usize,
}

impl Tableau {
    fn rhs(&self) -> usize {
        self.t.ncols() - 1
    }

    fn pivot(&mut self, r: usize, c: usize) {
        let p = self.t[(r, c)];
        let cols = self.t.ncols();
        for j in 0..cols {
            self.t[(r, j)] /= p;
        }
        for i in 0..self.t.nrows() {
            if i == r {
                continue;
            }
            let f = self.t[(i, c)];
            if f != 0.0 {
                for j in 0..cols {
                    let v = self.t[(r, j)];
                    if v != 0.0 {
                        self.t[(i, j)] -= f * v;
                    }
                }
                self.t[(i, c)] = 0.0;
            }
        }
        let f = self.obj[c];
        if f != 0.0 {
            for j in 0..cols {
                self.obj[j] -= f * self.t[(r, j)];
            }
            self.obj[c] = 0.0;
        }
        self.basis[r] = c;
        self.pivots += 1;
        self.since_refresh += 1;
    }

    /// Rebuilds the tableau and reduced costs from `orig` and the basis,
    /// discarding accumulated rounding error.
    fn refresh(&mut self) {
        let m = self.t.nrows();
        let b = DMatrix::from_fn(m, m, |i, k| self.orig[(i, self.basis[k])]);
        let Some(t) = b.lu().solve(&self.orig) else { return };
        self.t = t;
        for r in 0..m {
            if !self.keep[r] {
                self.t.row_mut(r).fill(0.0);
            } else {
                self.t[(r, self.basis[r])] = 1.0;
            }
        }
        self.obj = self.cost.clone();
        for r in 0..m {
            let cb = self.cost[self.basis[r]];
            if self.keep[r] && cb != 0.0 {
                for j in 0..self.obj.len() {
                    self.obj[j] -= cb * self.t[(r, j)];
                }
            }
        }
        for r in 0..m {
            if self.keep[r] {
                self.obj[self.basis[r]] = 0.0;
            }
        }
        self.since_refresh = 0;
    }

    /// Dual simplex pivots until the basic solution is nonnegative.
    fn restore_primal(&mut self, allowed: usize, tol: f64, max_pivots: usize) -> Result<()> {
        let rhs = self.rhs();
        loop {
            if self.since_refresh >= REFRESH_EVERY {
                self.refresh();
            }
            let leaving = (0..self.t.nrows())
                .filter(|&r| self.keep[r] && self.t[(r, rhs)] < -tol)
                .min_by(|&a, &b| self.t[(a, rhs)].total_cmp(&self.t[(b, rhs)]));
            let Some(r) = leaving else { return Ok(()) };
            let entering = (0..allowed)
                .filter(|&j| self.t[(r, j)] < -EPS)
                .min_by(|&a, &b| (self.obj[a] / -self.t[(r, a)]).total_cmp(&(self.obj[b] / -self.t[(r, b)])));
            let Some(c) = entering else {
                return Err(Error::Infeasible("linear program is infeasible".into()));
            };
            self.pivot(r, c);
            if self.pivots > max_pivots {
                return Err(Error::NotConverged(format!("simplex exceeded {max_pivots} pivots")));
            }
        }
    }

    fn set_cost(&mut self, cost: Vec<f64>) {
        self.cost = cost;
        self.refresh();
    }

    /// Pivots over the columns `< allowed` with Dantzig pricing, switching to
    /// Bland's rule while the objective stalls.
    fn optimize(&mut self, allowed: usize, max_pivots: usize) -> Result<()> {
        let rhs = self.rhs();
        let mut stalled = 0usize;
        loop {
            if self.since_refresh >= REFRESH_EVERY {
                self.refresh();
            }
            let entering = if stalled > STALL_LIMIT {
                (0..allowed).find(|&j| self.obj[j] < -EPS)
            } else {
                (0..allowed).filter(|&j| self.obj[j] < -EPS).min_by(|&a, &b| self.obj[a].total_cmp(&self.obj[b]))
            };
            let Some(c) = entering else {
                if self.since_refresh > 0 {
                    self.refresh();
                    continue;
                }
                return Ok(());
            };
            let mut best: Option<(f64, usize, usize)> = None;
            for i in 0..self.t.nrows() {
                let a = self.t[(i, c)];
                if a > EPS {
                    let ratio = self.t[(i, rhs)] / a;
                    let better = match best {
                        None => true,
                        Some((r, _, b)) => ratio < r - EPS || (ratio <= r + EPS && self.basis[i] < b),
                    };
                    if better {
                        best = Some((ratio, i, self.basis[i]));
                    }
                }
            }
            let Some((ratio, r, _)) = best else {
                if self.since_refresh > 0 {
                    self.refresh();
                    continue;
                }
                return Err(Error::Infeasible("linear program is unbounded".into()));
            };
            stalled = if ratio > EPS { 0 } else { stalled + 1 };
            self.pivot(r, c);
            if self.pivots > max_pivots {
                return Err(Error::NotConverged(format!("simplex exceeded {max_pivots} pivots")));
            }
        }
    }
}

/// Solves `min c^T x  s.t.  A x = b, x >= 0`.
pub fn solve_standard_form(a: &DMatrix<f64>, b: &[f64], c: &[f64]) -> Result<LpSolution> {
    let (m, n) = a.shape();
    if b.len() != m || c.len() != n {
        return Err(Error::shape("LP dimensions disagree"));
    }
    let cols = n + m + 1;
    let mut t = DMatrix::zeros(m, cols);
    for i in 0..m {
        let s = if b[i] < 0.0 { -1.0 } else { 1.0 };
        for j in 0..n {
            t[(i, j)] = s * a[(i, j)];
        }
        t[(i, n + i)] = 1.0;
        t[(i, cols - 1)] = s * b[i];
    }
    let max_pivots = 200 * (m + n) + 10_000;
    let mut phase_one = vec![0.0; cols];
    phase_one[n..n + m].iter_mut().for_each(|v| *v = 1.0);
    let mut tab = Tableau {
        orig: t.clone(),
        t,
        cost: Vec::new(),
        keep: vec![true; m],
        basis: (n..n + m).collect(),
        obj: Vec::new(),
        pivots: 0,
        since_refresh: 0,
    };
    tab.set_cost(phase_one);
    tab.optimize(n + m, max_pivots)?;
    let scale = 1.0 + b.iter().map(|v| v.abs()).fold(0.0, f64::max);
    let infeas = -tab.obj[cols - 1];
    if infeas > 1e-9 * scale {
        return Err(Error::Infeasible(format!("phase one ends with infeasibility {infeas:e}")));
    }

    // Drive artificial variables out of the basis; drop redundant rows.
    for r in 0..m {
        if tab.basis[r] >= n {
            match (0..n).find(|&j| tab.t[(r, j)].abs() > 1e-9) {
                Some(j) => tab.pivot(r, j),
                None => tab.keep[r] = false,
            }
        }
    }
    let exact: Vec<f64> = (0..m).map(|i| tab.orig[(i, cols - 1)]).collect();
    for k in 0..m {
        if tab.keep[k] {
            let delta = PERTURB * scale * (1.0 + ((k as u64 * 2_654_435_761) % 1009) as f64 / 1009.0);
            let j = tab.basis[k];
            for i in 0..m {
                tab.orig[(i, cols - 1)] += delta * tab.orig[(i, j)];
            }
        }
    }
    let mut phase_two = vec![0.0; cols];
    phase_two[..n].copy_from_slice(c);
    tab.set_cost(phase_two);
    tab.optimize(n, max_pivots)?;
    for (i, v) in exact.into_iter().enumerate() {
        tab.orig[(i, cols - 1)] = v;
    }
    tab.refresh();
    tab.restore_primal(n, 1e-12 * scale, max_pivots)?;
    tab.optimize(n, max_pivots)?;
    let rhs = cols - 1;
    let keep = tab.keep.clone();

    let mut x = vec![0.0; n];
    for r in 0..m {
        if keep[r] && tab.basis[r] < n {
            x[tab.basis[r]] = tab.t[(r, rhs)].max(0.0);
        }
    }
    let objective = c.iter().zip(&x).map(|(ci, xi)| ci * xi).sum();

    let rows: Vec<usize> = (0..m).filter(|&r| keep[r]).collect();
    let basis: Vec<usize> = rows.iter().map(|&r| tab.basis[r]).collect();
    let k = rows.len();
    let bmat = DMatrix::from_fn(k, k, |i, j| a[(rows[i], basis[j])]);
    let cb = DVector::from_iterator(k, basis.iter().map(|&j| c[j]));
    let y = bmat
        .transpose()
        .lu()
        .solve(&cb)
        .ok_or_else(|| Error::NotConverged("optimal basis is singular".into()))?;
    let mut duals = vec![0.0; m];
    for (i, &r) in rows.iter().enumerate() {
        duals[r] = y[i];
    }
    let reduced_costs = (0..n).map(|j| c[j] - (0..m).map(|i| a[(i, j)] * duals[i]).sum::<f64>()).collect();
    Ok(LpSolution { x, objective, basis, duals, reduced_costs, pivots: tab.pivots })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_lp() {
        // min -x1 - 2 x2  s.t. x1 + x2 + s1 = 4, x1 + 3 x2 + s2 = 6
        let a = DMatrix::from_row_slice(2, 4, &[1.0, 1.0, 1.0, 0.0, 1.0, 3.0, 0.0, 1.0]);
        let sol = solve_standard_form(&a, &[4.0, 6.0], &[-1.0, -2.0, 0.0, 0.0]).unwrap();
        assert!((sol.objective + 5.0).abs() < 1e-12);
        assert!((sol.x[0] - 3.0).abs() < 1e-12 && (sol.x[1] - 1.0).abs() < 1e-12);
        assert!(sol.dual_infeasibility() < 1e-12);
    }

    #[test]
    fn infeasible_lp() {
        // x1 = -1 with x1 >= 0
        let a = DMatrix::from_row_slice(1, 1, &[1.0]);
        assert!(matches!(solve_standard_form(&a, &[-1.0], &[1.0]), Err(Error::Infeasible(_))));
    }

    #[test]
    fn redundant_rows_are_dropped() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 2.0, 2.0]);
        let sol = solve_standard_form(&a, &[1.0, 2.0], &[1.0, 2.0]).unwrap();
        assert!((sol.objective - 1.0).abs() < 1e-12);
        assert_eq!(sol.basis.len(), 1);
    }

    #[test]
    fn unbounded_lp() {
        // min -x1  s.t. x1 - x2 = 0
        let a = DMatrix::from_row_slice(1, 2, &[1.0, -1.0]);
        assert!(solve_standard_form(&a, &[0.0], &[-1.0, 0.0]).is_err());
    }
}
