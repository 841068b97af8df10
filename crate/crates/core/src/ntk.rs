//! Linearization at the unit-scale initialization: tangent-kernel systems,
//! the kernel max-margin and min-norm interpolation problems, and alignment
//! of trained models with their kernel predictors.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::data::{LabeledDataset, Split, Task};
use crate::error::{Error, Result};
use crate::model::{dot, norm, HomogeneousModel, Input, ParamVector};

/// Tangent features of the training inputs and their Gram matrix.
#[derive(Debug, Clone)]
pub struct KernelSystem {
    /// Row `i` is `grad f(theta_bar; x_i)`.
    pub features: DMatrix<f64>,
    pub gram: DMatrix<f64>,
    pub labels: Vec<f64>,
    pub task: Task,
    /// Minimum eigenvalue of the Gram matrix (regression only).
    pub nu_ntk: Option<f64>,
}

/// Solution of the kernel max-margin or min-norm interpolation problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginSolution {
    /// Primal solution in feature space.
    pub h: Vec<f64>,
    /// Margin `1 / ||h||` for classification, `max |<g_i, h> - y_i|` for regression.
    pub margin_or_residual: f64,
    /// Multipliers: `alpha_i >= 0` for classification, `K^{-1} y` for regression.
    pub dual: Vec<f64>,
    /// `h = sum_i coefficients_i g_i`.
    pub coefficients: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub gamma_ntk: Option<f64>,
    pub nu_ntk: Option<f64>,
    pub max_kkt_violation: f64,
}

/// Stopping rule for the dual coordinate ascent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DualOptions {
    pub tolerance: f64,
    pub max_sweeps: usize,
}

impl Default for DualOptions {
    fn default() -> Self {
        Self { tolerance: 1e-9, max_sweeps: 1_000_000 }
    }
}

/// Result of the hard-margin dual solve.
#[derive(Debug, Clone, PartialEq)]
pub struct DualSolution {
    pub alpha: Vec<f64>,
    pub sweeps: usize,
    pub converged: bool,
    pub max_violation: f64,
}

/// Hard-margin SVM without bias in the dual:
/// `max sum a_i - 1/2 sum a_i a_j y_i y_j K_ij` over `a >= 0`, by cyclic
/// coordinate ascent with exact one-dimensional updates.
pub fn hard_margin_dual(gram: &DMatrix<f64>, y: &[f64], opts: DualOptions) -> Result<DualSolution> {
    let n = y.len();
    if gram.nrows() != n || gram.ncols() != n {
        return Err(Error::shape("gram and labels disagree"));
    }
    if n == 0 {
        return Err(Error::config("empty training set"));
    }
    let q = DMatrix::from_fn(n, n, |i, j| y[i] * y[j] * gram[(i, j)]);
    if let Some(i) = (0..n).find(|&i| q[(i, i)] <= 0.0) {
        return Err(Error::Infeasible(format!("example {i} has a zero feature vector")));
    }
    let qmax = (0..n).map(|i| q[(i, i)]).fold(0.0_f64, f64::max);
    let mut alpha = vec![0.0; n];
    // g_i = (Q alpha)_i - 1 = margin_i - 1
    let mut g = vec![-1.0; n];
    let recompute = |alpha: &[f64], g: &mut [f64]| {
        for i in 0..n {
            g[i] = (0..n).map(|j| q[(i, j)] * alpha[j]).sum::<f64>() - 1.0;
        }
    };
    let violation = |alpha: &[f64], g: &[f64]| {
        (0..n)
            .map(|i| if alpha[i] > 0.0 { g[i].abs() } else { (-g[i]).max(0.0) })
            .fold(0.0_f64, f64::max)
    };
    let mut sweeps = 0;
    let mut converged = false;
    while sweeps < opts.max_sweeps {
        sweeps += 1;
        for i in 0..n {
            let new = (alpha[i] - g[i] / q[(i, i)]).max(0.0);
            let delta = new - alpha[i];
            if delta != 0.0 {
                alpha[i] = new;
                for j in 0..n {
                    g[j] += delta * q[(j, i)];
                }
            }
        }
        if sweeps % 64 == 0 {
            recompute(&alpha, &mut g);
        }
        if violation(&alpha, &g) < opts.tolerance {
            recompute(&alpha, &mut g);
            if violation(&alpha, &g) < opts.tolerance {
                converged = true;
                break;
            }
        }
        let mass: f64 = alpha.iter().sum();
        if !mass.is_finite() || mass * qmax > 1e16 {
            return Err(Error::Infeasible("dual multipliers diverge; data are not separable".into()));
        }
    }
    recompute(&alpha, &mut g);
    let max_violation = violation(&alpha, &g);
    if !converged {
        let min_margin = g.iter().fold(f64::INFINITY, |m, v| m.min(v + 1.0));
        if min_margin <= 0.0 {
            return Err(Error::Infeasible(format!("margin {min_margin} after {sweeps} sweeps")));
        }
    }
    Ok(DualSolution { alpha, sweeps, converged, max_violation })
}

/// Tangent features `grad f(base; x)` of the training inputs.
pub fn build_kernel_system(model: &HomogeneousModel, base: &ParamVector, dataset: &LabeledDataset) -> Result<KernelSystem> {
    if dataset.train.is_empty() {
        return Err(Error::config("kernel system needs a nonempty training set"));
    }
    if model.output_dim() != 1 {
        return Err(Error::config("kernel systems are defined for scalar-output models"));
    }
    if matches!(dataset.task, Task::MultiClass { .. }) {
        return Err(Error::config("kernel systems support binary classification and regression"));
    }
    let n = dataset.train.len();
    let dim = model.param_count();
    let mut features = DMatrix::zeros(n, dim);
    for (i, x) in dataset.train.x.iter().enumerate() {
        let g = model.grad(base, x, 0)?;
        features.row_mut(i).copy_from_slice(&g.data);
    }
    let gram = &features * features.transpose();
    let gram = (&gram + gram.transpose()) * 0.5;
    let nu_ntk = if dataset.task == Task::Regression {
        let eig = SymmetricEigen::new(gram.clone()).eigenvalues;
        let min = eig.iter().copied().fold(f64::INFINITY, f64::min);
        let max = eig.iter().copied().fold(0.0_f64, f64::max);
        if !(min > 1e-13 * max.max(f64::MIN_POSITIVE)) {
            return Err(Error::RankDeficient { min_eigenvalue: min });
        }
        Some(min)
    } else {
        None
    };
    Ok(KernelSystem { features, gram, labels: dataset.train.y.clone(), task: dataset.task, nu_ntk })
}

impl KernelSystem {
    fn primal(&self, coefficients: &[f64]) -> Vec<f64> {
        let c = DVector::from_column_slice(coefficients);
        (self.features.transpose() * c).as_slice().to_vec()
    }
}

/// Minimum-norm `h` with `y_i <g_i, h> >= 1`.
pub fn solve_kernel_svm(system: &KernelSystem) -> Result<MarginSolution> {
    solve_kernel_svm_with(system, DualOptions::default())
}

pub fn solve_kernel_svm_with(system: &KernelSystem, opts: DualOptions) -> Result<MarginSolution> {
    if system.task != Task::BinaryCls {
        return Err(Error::config("kernel SVM needs a binary classification system"));
    }
    let sol = hard_margin_dual(&system.gram, &system.labels, opts)?;
    let coefficients: Vec<f64> = sol.alpha.iter().zip(&system.labels).map(|(a, y)| a * y).collect();
    let h = system.primal(&coefficients);
    let gamma = 1.0 / norm(&h);
    Ok(MarginSolution {
        h,
        margin_or_residual: gamma,
        dual: sol.alpha,
        coefficients,
        iterations: sol.sweeps,
        converged: sol.converged,
        gamma_ntk: Some(gamma),
        nu_ntk: None,
        max_kkt_violation: sol.max_violation,
    })
}

/// Minimum-norm interpolant `h = Phi^T K^{-1} y`.
pub fn solve_kernel_regression(system: &KernelSystem) -> Result<MarginSolution> {
    if system.task != Task::Regression {
        return Err(Error::config("kernel regression needs a regression system"));
    }
    let n = system.labels.len();
    let eig = SymmetricEigen::new(system.gram.clone()).eigenvalues;
    let min = eig.iter().copied().fold(f64::INFINITY, f64::min);
    let max = eig.iter().copied().fold(0.0_f64, f64::max);
    let condition = if min > 0.0 { max / min } else { f64::INFINITY };
    if condition > 1e12 {
        return Err(Error::IllConditioned { condition });
    }
    let chol = match system.gram.clone().cholesky() {
        Some(c) => c,
        None => {
            let jitter = 1e-12 * system.gram.trace() / n as f64;
            let k = &system.gram + DMatrix::identity(n, n) * jitter;
            k.cholesky().ok_or(Error::RankDeficient { min_eigenvalue: min })?
        }
    };
    let c = chol.solve(&DVector::from_column_slice(&system.labels));
    let coefficients = c.as_slice().to_vec();
    let h = system.primal(&coefficients);
    let fit = &system.features * DVector::from_column_slice(&h);
    let residual = fit.iter().zip(&system.labels).map(|(f, y)| (f - y).abs()).fold(0.0_f64, f64::max);
    Ok(MarginSolution {
        h,
        margin_or_residual: residual,
        dual: coefficients.clone(),
        coefficients,
        iterations: 1,
        converged: true,
        gamma_ntk: None,
        nu_ntk: Some(min),
        max_kkt_violation: residual,
    })
}

/// Kernel predictor `<grad f(base; x), h>`.
pub fn kernel_predict(model: &HomogeneousModel, base: &ParamVector, h: &[f64], x: &Input) -> Result<f64> {
    if h.len() != model.param_count() {
        return Err(Error::shape("h does not match the parameter count"));
    }
    Ok(model.grad(base, x, 0)?.data.iter().zip(h).map(|(g, hk)| g * hk).sum())
}

/// Agreement between a trained model and its kernel predictor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Alignment {
    /// Max over probes of `|f(theta(t); x) / Z - <g(x), h*>|` (classification,
    /// `h*` unit-norm) or `|f(theta(t); x) - <g(x), h>|` (regression).
    pub deviation: f64,
    /// Cosine between the recovered `h(t)` and the kernel solution.
    pub cosine: f64,
    /// Normalizer `Z = (1/gamma) log(alpha e^{-lambda t} / lambda)` (1 for regression).
    pub normalizer: f64,
}

/// Compares `theta(t)` with the kernel solution on `probes`.
#[allow(clippy::too_many_arguments)]
pub fn kernel_alignment(
    theta: &ParamVector,
    model: &HomogeneousModel,
    base: &ParamVector,
    alpha: f64,
    lambda: f64,
    t: f64,
    system: &KernelSystem,
    solution: &MarginSolution,
    probes: &Split,
) -> Result<Alignment> {
    let l = model.degree() as i32;
    let (h_ref, normalizer) = match system.task {
        Task::BinaryCls => {
            let gamma = solution.gamma_ntk.ok_or_else(|| Error::config("solution lacks a margin"))?;
            let z = (alpha * (-lambda * t).exp() / lambda).ln() / gamma;
            (solution.h.iter().map(|v| v * gamma).collect::<Vec<_>>(), z)
        }
        _ => (solution.h.clone(), 1.0),
    };
    let outputs = model.outputs(theta, &probes.x)?;
    let mut deviation = 0.0_f64;
    for (x, f) in probes.x.iter().zip(&outputs) {
        let k = kernel_predict(model, base, &h_ref, x)?;
        deviation = deviation.max((f / normalizer - k).abs());
    }
    let scale = (lambda * t).exp() / alpha;
    let pre = alpha.powi(l) * (-(l as f64) * lambda * t).exp();
    let h_t: Vec<f64> = theta.data.iter().zip(&base.data).map(|(th, b)| pre * (scale * th - b)).collect();
    let denom = norm(&h_t) * norm(&h_ref);
    let cosine = if denom > 0.0 { dot(&h_t, &h_ref) / denom } else { 0.0 };
    Ok(Alignment { deviation, cosine, normalizer })
}
