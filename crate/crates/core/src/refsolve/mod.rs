//! Rich-regime reference problems: max-margin linear classifiers under the
//! L1 and L2 norms, minimum-nuclear-norm completion, and the associated
//! generalization bounds.

pub mod lp;
pub mod nuclear;

pub use lp::{solve_standard_form, LpSolution};
pub use nuclear::{nuclear_norm, solve_min_nuclear, solve_min_nuclear_with, CompletionSolution, NuclearOptions};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::{LabeledDataset, Task};
use crate::error::{Error, Result};
use crate::model::{dot, Input};
use crate::ntk::{hard_margin_dual, DualOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    L1,
    L2,
}

/// Linear classifier with `y_i <w, x_i> >= 1` of minimal norm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearMaxMargin {
    pub w: Vec<f64>,
    pub norm_kind: NormKind,
    /// `min_i y_i <w, x_i> / ||w||`.
    pub margin: f64,
    /// Indices whose constraint is active.
    pub support_set: Vec<usize>,
}

impl LinearMaxMargin {
    fn finish(w: Vec<f64>, norm_kind: NormKind, xs: &[&[f64]], ys: &[f64]) -> Self {
        let nrm = match norm_kind {
            NormKind::L1 => w.iter().map(|v| v.abs()).sum::<f64>(),
            NormKind::L2 => dot(&w, &w).sqrt(),
        };
        let q: Vec<f64> = xs.iter().zip(ys).map(|(x, y)| y * dot(&w, x)).collect();
        let margin = q.iter().copied().fold(f64::INFINITY, f64::min) / nrm;
        let support_set = q.iter().enumerate().filter(|(_, &v)| v <= 1.0 + 1e-7).map(|(i, _)| i).collect();
        Self { w, norm_kind, margin, support_set }
    }

    /// Unit-norm direction of `w` in the Euclidean sense.
    pub fn direction(&self) -> Vec<f64> {
        let n = dot(&self.w, &self.w).sqrt();
        self.w.iter().map(|v| v / n).collect()
    }
}

fn dense_training_set(dataset: &LabeledDataset) -> Result<(Vec<&[f64]>, &[f64])> {
    if dataset.task != Task::BinaryCls {
        return Err(Error::config("max-margin problems need binary labels"));
    }
    if dataset.train.is_empty() {
        return Err(Error::config("empty training set"));
    }
    let xs: Vec<&[f64]> = dataset
        .train
        .x
        .iter()
        .map(|x| match x {
            Input::Dense(v) => Ok(v.as_slice()),
            Input::Pair(..) => Err(Error::config("max-margin problems need dense inputs")),
        })
        .collect::<Result<_>>()?;
    let d = xs[0].len();
    if xs.iter().any(|x| x.len() != d) {
        return Err(Error::shape("inputs have different dimensions"));
    }
    Ok((xs, &dataset.train.y))
}

/// Hard-margin SVM on the raw inputs.
pub fn solve_l2_max_margin(dataset: &LabeledDataset) -> Result<LinearMaxMargin> {
    let (xs, ys) = dense_training_set(dataset)?;
    let n = xs.len();
    let gram = DMatrix::from_fn(n, n, |i, j| dot(xs[i], xs[j]));
    let sol = hard_margin_dual(&gram, ys, DualOptions::default())?;
    let mut w = vec![0.0; xs[0].len()];
    for i in 0..n {
        let c = sol.alpha[i] * ys[i];
        if c != 0.0 {
            w.iter_mut().zip(xs[i]).for_each(|(wk, xk)| *wk += c * xk);
        }
    }
    Ok(LinearMaxMargin::finish(w, NormKind::L2, &xs, ys))
}

/// `min ||w||_1  s.t.  y_i <w, x_i> >= 1` as a linear program over
/// `(w+, w-, slack)`.
pub fn solve_l1_max_margin(dataset: &LabeledDataset) -> Result<LinearMaxMargin> {
    let (xs, ys) = dense_training_set(dataset)?;
    let (n, d) = (xs.len(), xs[0].len());
    let a = DMatrix::from_fn(n, 2 * d + n, |i, j| {
        if j < d {
            ys[i] * xs[i][j]
        } else if j < 2 * d {
            -ys[i] * xs[i][j - d]
        } else if j - 2 * d == i {
            -1.0
        } else {
            0.0
        }
    });
    let c: Vec<f64> = (0..2 * d + n).map(|j| if j < 2 * d { 1.0 } else { 0.0 }).collect();
    let sol = solve_standard_form(&a, &vec![1.0; n], &c)
        .map_err(|e| match e {
            Error::Infeasible(m) => Error::Infeasible(format!("data are not linearly separable ({m})")),
            other => other,
        })?;
    let w: Vec<f64> = (0..d).map(|k| sol.x[k] - sol.x[d + k]).collect();
    Ok(LinearMaxMargin::finish(w, NormKind::L1, &xs, ys))
}

/// Rademacher-style test-error bounds for the L1 and L2 max-margin
/// classifiers on `k`-sparse sign targets.
pub fn generalization_bound(k: f64, d: f64, n: f64, delta: f64, norm: NormKind) -> Result<f64> {
    if !(k > 0.0 && d > 0.0 && n > 0.0) || !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Domain("bounds need positive k, d, n and delta in (0, 1)".into()));
    }
    let confidence = 3.0 * ((2.0 / delta).ln() / (2.0 * n)).sqrt();
    Ok(match norm {
        NormKind::L1 => 4.0 * k * (2.0 * (2.0 * d).ln() / n).sqrt() + confidence,
        NormKind::L2 => 4.0 * (k * d / n).sqrt() + confidence,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;

    fn binary(xs: Vec<Vec<f64>>, ys: Vec<f64>) -> LabeledDataset {
        LabeledDataset::new(
            Task::BinaryCls,
            Split::new(xs.into_iter().map(Input::Dense).collect(), ys).unwrap(),
            Split::default(),
        )
        .unwrap()
    }

    #[test]
    fn symmetric_pair_examples() {
        let ds = binary(vec![vec![1.0, 0.0], vec![-1.0, 0.0]], vec![1.0, -1.0]);
        for sol in [solve_l2_max_margin(&ds).unwrap(), solve_l1_max_margin(&ds).unwrap()] {
            assert!((sol.w[0] - 1.0).abs() < 1e-12 && sol.w[1].abs() < 1e-12);
            assert!((sol.margin - 1.0).abs() < 1e-12);
            assert_eq!(sol.support_set, vec![0, 1]);
        }
    }

    #[test]
    fn single_point_direction() {
        let ds = binary(vec![vec![3.0, 4.0]], vec![1.0]);
        let dir = solve_l2_max_margin(&ds).unwrap().direction();
        assert!((dir[0] - 0.6).abs() < 1e-12 && (dir[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn l1_picks_sparse_vertex_on_sign_square() {
        let pts = [[1.0, 1.0], [1.0, -1.0], [-1.0, 1.0], [-1.0, -1.0]];
        let ds = binary(pts.iter().map(|p| p.to_vec()).collect(), pts.iter().map(|p| p[0]).collect());
        let sol = solve_l1_max_margin(&ds).unwrap();
        assert!((sol.w[0] - 1.0).abs() < 1e-12 && sol.w[1].abs() < 1e-12);
    }

    #[test]
    fn inseparable_data_are_reported() {
        let ds = binary(vec![vec![1.0], vec![1.0]], vec![1.0, -1.0]);
        assert!(matches!(solve_l1_max_margin(&ds), Err(Error::Infeasible(_))));
        assert!(matches!(solve_l2_max_margin(&ds), Err(Error::Infeasible(_))));
    }

    #[test]
    fn bound_formulas() {
        let v = generalization_bound(3.0, 1e5, 256.0, 0.01, NormKind::L1).unwrap();
        let want = 12.0 * (2.0 * (2e5f64).ln() / 256.0).sqrt() + 3.0 * ((200.0f64).ln() / 512.0).sqrt();
        assert!((v - want).abs() < 1e-12);
        let big = generalization_bound(5.0, 5.0, 1e12, 0.01, NormKind::L2).unwrap();
        assert!(big < 1e-4);
        assert!(generalization_bound(1.0, 1.0, 1.0, 1.5, NormKind::L1).is_err());
    }
}
