//! Optimality certificates for trained parameters, theoretical loss bounds,
//! and transition detection on trajectory logs.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{LabeledDataset, Task};
use crate::error::{Error, Result};
use crate::model::{HomogeneousModel, ParamVector};
use crate::refsolve::nuclear::{observations, sym_entry, sym_scatter};
use crate::trainer::{loss_and_grad, LossKind, TrajectoryLog};

/// `x log x` on `[1, inf)`.
pub fn f_ll(x: f64) -> Result<f64> {
    if !(x >= 1.0) {
        return Err(Error::Domain(format!("f_ll needs x >= 1, got {x}")));
    }
    Ok(x * x.ln())
}

/// Inverse of [`f_ll`] on `[0, inf)`.
pub fn f_ll_inv(y: f64) -> Result<f64> {
    if !(y >= 0.0) || y.is_infinite() {
        return Err(Error::Domain(format!("f_ll_inv needs finite y >= 0, got {y}")));
    }
    if y == 0.0 {
        return Ok(1.0);
    }
    // x log x is increasing and convex; (1 + y) log(1 + y) >= y brackets the root.
    let (mut lo, mut hi) = (1.0_f64, 1.0 + y);
    let mut x = (y / (y + 1.0).ln()).clamp(lo, hi);
    for _ in 0..200 {
        let fx = x * x.ln() - y;
        if fx > 0.0 {
            hi = x;
        } else {
            lo = x;
        }
        let newton = x - fx / (x.ln() + 1.0);
        let next = if newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
        if (next - x).abs() <= 1e-15 * x {
            return Ok(next);
        }
        x = next;
    }
    Ok(x)
}

/// Problem constants entering the loss upper bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BoundKind {
    /// Exponential-loss classification with tangent-kernel margin `gamma`.
    Classification { gamma: f64 },
    /// Squared-loss regression with Gram minimum eigenvalue `nu`.
    Regression { nu: f64, n: usize, y_norm_sq: f64 },
}

/// Upper bound on the training loss at time `t` of gradient flow from
/// `alpha * theta_bar` with weight decay `lambda`, for an `l`-homogeneous
/// model.
pub fn loss_upper_bound(alpha: f64, lambda: f64, l: u32, kind: BoundKind, t: f64) -> Result<f64> {
    if !(alpha > 0.0 && lambda > 0.0 && t >= 0.0) || l < 2 {
        return Err(Error::Domain("bound needs alpha, lambda > 0, t >= 0 and L >= 2".into()));
    }
    let lm1 = (l - 1) as f64;
    let a = alpha.powf(2.0 * lm1) / lambda;
    let ramp = -(-2.0 * lm1 * lambda * t).exp_m1();
    Ok(match kind {
        BoundKind::Classification { gamma } => {
            if !(gamma > 0.0) {
                return Err(Error::Domain("gamma must be positive".into()));
            }
            let first = 1.0 / (1.0 + gamma * gamma / (16.0 * lm1) * a * ramp);
            let denom = f_ll_inv(gamma * gamma * a / (8.0 * l as f64))? - 1.0;
            let second = if denom > 0.0 { (2.0 * lm1 * lambda * t).exp() / denom } else { f64::INFINITY };
            first.max(second)
        }
        BoundKind::Regression { nu, n, y_norm_sq } => {
            if !(nu > 0.0) || n == 0 {
                return Err(Error::Domain("nu and n must be positive".into()));
            }
            let nf = n as f64;
            let lf = l as f64;
            let first = y_norm_sq / nf * (-nu * a / (8.0 * nf * lm1) * ramp).exp();
            let second = 16.0 * nf * lf * lf * y_norm_sq * lambda * lambda / (nu * nu * alpha.powf(4.0 * lm1))
                * (4.0 * lm1 * lambda * t).exp();
            first.max(second)
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundCurveKind {
    LossUpperBoundCls,
    LossUpperBoundReg,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundCurve {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    pub kind: BoundCurveKind,
}

pub fn bound_curve(alpha: f64, lambda: f64, l: u32, kind: BoundKind, times: &[f64]) -> Result<BoundCurve> {
    let values = times.iter().map(|&t| loss_upper_bound(alpha, lambda, l, kind, t)).collect::<Result<_>>()?;
    let kind = match kind {
        BoundKind::Classification { .. } => BoundCurveKind::LossUpperBoundCls,
        BoundKind::Regression { .. } => BoundCurveKind::LossUpperBoundReg,
    };
    Ok(BoundCurve { times: times.to_vec(), values, kind })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CertificateKind {
    KktR1,
    KktR2,
    NuclearSubgrad,
}

/// Residuals of a first-order optimality condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub kind: CertificateKind,
    pub residuals: BTreeMap<String, f64>,
    /// Every residual is at most `tolerance`.
    pub passed: bool,
    pub tolerance: f64,
    pub multipliers: Option<Vec<f64>>,
}

impl Certificate {
    fn new(kind: CertificateKind, residuals: Vec<(&str, f64)>, tolerance: f64, multipliers: Option<Vec<f64>>) -> Self {
        let passed = residuals.iter().all(|(_, v)| *v <= tolerance);
        let residuals = residuals.into_iter().map(|(k, v)| (k.to_string(), v)).collect();
        Self { kind, residuals, passed, tolerance, multipliers }
    }

    pub fn residual(&self, name: &str) -> Option<f64> {
        self.residuals.get(name).copied()
    }
}

/// Nonnegative least squares `min ||B mu - theta||` over `mu >= 0`, given
/// `G = B^T B` and `c = B^T theta` (Lawson-Hanson active set).
pub fn nnls_gram(g: &DMatrix<f64>, c: &[f64]) -> Vec<f64> {
    let n = c.len();
    let scale = c.iter().fold(0.0_f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    let tol = 1e-12 * scale * (n as f64);
    let mut x = vec![0.0; n];
    let mut passive = vec![false; n];
    let grad = |x: &[f64]| -> Vec<f64> { (0..n).map(|i| c[i] - (0..n).map(|j| g[(i, j)] * x[j]).sum::<f64>()).collect() };
    let solve = |passive: &[bool]| -> Vec<f64> {
        let idx: Vec<usize> = (0..n).filter(|&i| passive[i]).collect();
        let k = idx.len();
        let sub = DMatrix::from_fn(k, k, |a, b| g[(idx[a], idx[b])]);
        let rhs = DVector::from_iterator(k, idx.iter().map(|&i| c[i]));
        let z = sub
            .clone()
            .cholesky()
            .map(|ch| ch.solve(&rhs))
            .unwrap_or_else(|| sub.svd(true, true).solve(&rhs, 1e-14).unwrap_or_else(|_| DVector::zeros(k)));
        let mut full = vec![0.0; n];
        for (a, &i) in idx.iter().enumerate() {
            full[i] = z[a];
        }
        full
    };
    for _ in 0..3 * n + 10 {
        let w = grad(&x);
        let Some(j) = (0..n).filter(|&i| !passive[i] && w[i] > tol).max_by(|&a, &b| w[a].total_cmp(&w[b])) else {
            break;
        };
        passive[j] = true;
        loop {
            let z = solve(&passive);
            if (0..n).filter(|&i| passive[i]).all(|i| z[i] > 0.0) {
                x = z;
                break;
            }
            let mut step = 1.0_f64;
            for i in (0..n).filter(|&i| passive[i] && z[i] <= 0.0) {
                step = step.min(x[i] / (x[i] - z[i]));
            }
            for i in 0..n {
                x[i] += step * (z[i] - x[i]);
                if passive[i] && x[i] <= 1e-15 * scale {
                    x[i] = 0.0;
                    passive[i] = false;
                }
            }
            if !passive.iter().any(|&p| p) {
                break;
            }
        }
    }
    x
}

/// KKT residuals of `min 1/2 ||theta||^2  s.t.  y_i f_i(theta) >= 1` at the
/// margin-normalized `theta`, with multipliers fitted by NNLS.
pub fn kkt_residual_r1(model: &HomogeneousModel, theta: &ParamVector, dataset: &LabeledDataset, tolerance: f64) -> Result<Certificate> {
    if dataset.task != Task::BinaryCls || model.output_dim() != 1 {
        return Err(Error::config("KKT check for max-margin needs a scalar binary classifier"));
    }
    let data = &dataset.train;
    if data.is_empty() {
        return Err(Error::config("empty training set"));
    }
    let out = model.outputs(theta, &data.x)?;
    let q: Vec<f64> = out.iter().zip(&data.y).map(|(f, y)| f * y).collect();
    let qmin = q.iter().copied().fold(f64::INFINITY, f64::min);
    if !(qmin > 0.0) {
        return Ok(Certificate::new(
            CertificateKind::KktR1,
            vec![("stationarity", f64::NAN), ("complementarity", f64::NAN), ("feasibility", 1.0 - qmin.min(0.0))],
            tolerance,
            None,
        ));
    }
    let l = model.degree() as f64;
    let theta_hat = theta.scaled(qmin.powf(-1.0 / l));
    let n = data.len();
    let dim = model.param_count();
    let mut b = DMatrix::zeros(dim, n);
    for (i, (x, y)) in data.x.iter().zip(&data.y).enumerate() {
        let g = model.grad(&theta_hat, x, 0)?;
        for k in 0..dim {
            b[(k, i)] = y * g.data[k];
        }
    }
    let th = DVector::from_column_slice(&theta_hat.data);
    let gram = b.transpose() * &b;
    let c = b.transpose() * &th;
    let mu = nnls_gram(&gram, c.as_slice());
    let resid = &th - &b * DVector::from_column_slice(&mu);
    let stationarity = resid.norm() / th.norm();
    let q_hat: Vec<f64> = q.iter().map(|v| v / qmin).collect();
    let complementarity = mu.iter().zip(&q_hat).map(|(m, qh)| m * (qh - 1.0)).fold(0.0_f64, f64::max);
    let feasibility = (1.0 - q_hat.iter().copied().fold(f64::INFINITY, f64::min)).max(0.0);
    Ok(Certificate::new(
        CertificateKind::KktR1,
        vec![("stationarity", stationarity), ("complementarity", complementarity), ("feasibility", feasibility)],
        tolerance,
        Some(mu),
    ))
}

/// Stationarity of the weight-decayed squared loss and interpolation error.
pub fn kkt_residual_r2(model: &HomogeneousModel, theta: &ParamVector, dataset: &LabeledDataset, lambda: f64, tolerance: f64) -> Result<Certificate> {
    if model.output_dim() != 1 {
        return Err(Error::config("KKT check for min-norm interpolation needs a scalar model"));
    }
    let e = loss_and_grad(model, theta, &dataset.train, LossKind::Squared, lambda)?;
    let stationarity = e.grad.norm() / theta.norm().max(1.0);
    let out = model.outputs(theta, &dataset.train.x)?;
    let interpolation = out.iter().zip(&dataset.train.y).map(|(f, y)| (f - y).abs()).fold(0.0_f64, f64::max);
    Ok(Certificate::new(
        CertificateKind::KktR2,
        vec![("gradient_stationarity", stationarity), ("interpolation", interpolation)],
        tolerance,
        None,
    ))
}

/// Checks `-(2/lambda) M` is a subgradient of the nuclear norm at `W`, where
/// `M = (2/n) sum_i (<P_i, W> - y_i) P_i`.
pub fn nuclear_subgrad_certificate(w: &DMatrix<f64>, dataset: &LabeledDataset, lambda: f64, tolerance: f64) -> Result<Certificate> {
    if !(lambda > 0.0) {
        return Err(Error::Domain("lambda must be positive".into()));
    }
    let d = w.nrows();
    if w.ncols() != d {
        return Err(Error::shape("W must be square"));
    }
    if (w - w.transpose()).norm() > 1e-12 * w.norm().max(1.0) {
        return Err(Error::config("W must be symmetric"));
    }
    let obs = observations(&dataset.train)?;
    if obs.iter().any(|&(i, j, _)| i >= d || j >= d) {
        return Err(Error::shape("observation outside W"));
    }
    let n = obs.len().max(1) as f64;
    let r: Vec<f64> = obs.iter().map(|&(i, j, y)| sym_entry(w, i, j) - y).collect();
    let m = sym_scatter(d, &obs, &r) * (2.0 / n);
    let svd = w.clone().svd(true, true);
    let (u, vt) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
    let smax = svd.singular_values.iter().copied().fold(0.0_f64, f64::max);
    let keep: Vec<usize> = (0..svd.singular_values.len()).filter(|&k| svd.singular_values[k] > 1e-8 * smax && smax > 0.0).collect();
    let left = DMatrix::from_fn(d, keep.len(), |i, k| u[(i, keep[k])]);
    let right = DMatrix::from_fn(d, keep.len(), |i, k| vt[(keep[k], i)]);
    let lr = &left * right.transpose();
    let subgrad = &m * (-2.0 / lambda);
    let e = &subgrad - &lr;
    let spectral = e.clone().svd(false, false).singular_values.iter().copied().fold(0.0_f64, f64::max);
    let consistency = (&m * (2.0 / lambda) + &lr + &e).norm();
    Ok(Certificate::new(
        CertificateKind::NuclearSubgrad,
        vec![
            ("left_orthogonality", (left.transpose() * &e).norm()),
            ("right_orthogonality", (&e * &right).norm()),
            ("spectral_excess", (spectral - 1.0).max(0.0)),
            ("consistency", consistency),
        ],
        tolerance,
        None,
    ))
}

/// Located crossing of a metric from below `low` to at least `high`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    /// Earliest time with metric `>= high`.
    pub t_star: f64,
    /// Last time before `t_star` with metric `<= low` (first logged time if none).
    pub t_low: f64,
    /// `(t_star - t_low) / t_star`.
    pub sharpness: f64,
}

/// Thresholds `(chance + 0.05, 0.95)` for accuracy metrics.
pub fn accuracy_thresholds(chance: f64) -> (f64, f64) {
    (chance + 0.05, 0.95)
}

/// Transition of a `(time, value)` series; NaN values are skipped.
pub fn detect_transition_series(series: &[(f64, f64)], low: f64, high: f64) -> Option<Transition> {
    let pts: Vec<(f64, f64)> = series.iter().copied().filter(|(_, v)| !v.is_nan()).collect();
    let k = pts.iter().position(|&(_, v)| v >= high)?;
    let t_star = pts[k].0;
    let t_low = pts[..k].iter().rev().find(|&&(_, v)| v <= low).map_or(pts[0].0, |&(t, _)| t);
    let sharpness = if t_star > 0.0 { (t_star - t_low) / t_star } else { 0.0 };
    Some(Transition { t_star, t_low, sharpness })
}

/// Transition of a logged metric column.
pub fn detect_transition(log: &TrajectoryLog, metric: &str, low: f64, high: f64) -> Result<Option<Transition>> {
    let series = log.series(metric).ok_or_else(|| Error::config(format!("unknown metric {metric}")))?;
    Ok(detect_transition_series(&series, low, high))
}

/// Transition of a decreasing metric (e.g. a loss) from above `high` to at
/// most `low`.
pub fn detect_drop(log: &TrajectoryLog, metric: &str, high: f64, low: f64) -> Result<Option<Transition>> {
    let series = log.series(metric).ok_or_else(|| Error::config(format!("unknown metric {metric}")))?;
    let flipped: Vec<(f64, f64)> = series.into_iter().map(|(t, v)| (t, -v)).collect();
    Ok(detect_transition_series(&flipped, -high, -low))
}

/// `sqrt(lambda ||X*||_*) mu^2 log d`.
pub fn recovery_error_bound(lambda: f64, nuclear_norm_xstar: f64, mu: f64, d: f64) -> Result<f64> {
    if !(lambda >= 0.0 && nuclear_norm_xstar >= 0.0 && mu > 0.0 && d >= 1.0) {
        return Err(Error::Domain("recovery bound needs lambda, ||X*|| >= 0, mu > 0, d >= 1".into()));
    }
    Ok((lambda * nuclear_norm_xstar).sqrt() * mu * mu * d.ln())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;
    use crate::model::Input;
    use crate::trainer::LogRow;

    #[test]
    fn f_ll_examples() {
        assert_eq!(f_ll(1.0).unwrap(), 0.0);
        assert!((f_ll(std::f64::consts::E).unwrap() - std::f64::consts::E).abs() < 1e-15);
        assert!(f_ll(0.5).is_err());
        assert!(f_ll_inv(-1.0).is_err());
        for y in [0.5, 5.0, 50.0, 5000.0] {
            assert!(f_ll_inv(y).unwrap() >= y / (y + 1.0).ln());
        }
    }

    #[test]
    fn f_ll_inverse_round_trip() {
        let mut x = 1.0;
        while x <= 1e6 {
            let back = f_ll_inv(f_ll(x).unwrap()).unwrap();
            assert!((back - x).abs() <= 1e-10 * x, "{x} -> {back}");
            x *= 1.37;
        }
    }

    #[test]
    fn bound_at_zero_and_limit() {
        let k = BoundKind::Classification { gamma: 2.0 };
        assert_eq!(loss_upper_bound(100.0, 1e-3, 2, k, 0.0).unwrap(), 1.0);
        let r = BoundKind::Regression { nu: 1.0, n: 4, y_norm_sq: 2.0 };
        assert!((loss_upper_bound(100.0, 1e-3, 2, r, 0.0).unwrap() - 0.5).abs() < 1e-15);
        let small = loss_upper_bound(1e6, 1e-3, 2, k, 1.0).unwrap();
        let smaller = loss_upper_bound(1e9, 1e-3, 2, k, 1.0).unwrap();
        assert!(smaller < small && smaller < 1e-9);
    }

    #[test]
    fn nnls_matches_unconstrained_when_interior() {
        let g = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let x = nnls_gram(&g, &[1.0, 1.0]);
        let want = g.clone().lu().solve(&DVector::from_column_slice(&[1.0, 1.0])).unwrap();
        assert!((x[0] - want[0]).abs() < 1e-12 && (x[1] - want[1]).abs() < 1e-12);
        let x = nnls_gram(&g, &[1.0, -1.0]);
        assert!((x[0] - 0.5).abs() < 1e-12 && x[1] == 0.0);
    }

    fn binary(xs: Vec<Vec<f64>>, ys: Vec<f64>) -> LabeledDataset {
        LabeledDataset::new(Task::BinaryCls, Split::new(xs.into_iter().map(Input::Dense).collect(), ys).unwrap(), Split::default())
            .unwrap()
    }

    #[test]
    fn r1_constructed_kkt_point() {
        // One example x = e1, y = 1: theta = (u, v) = (1, 0 | 0, 0) has f = 1 and
        // grad f = (2, 0, 0, 0), so theta = 1/2 * grad f with active margin.
        let m = HomogeneousModel::diagonal(2).unwrap();
        let ds = binary(vec![vec![1.0, 0.0]], vec![1.0]);
        let theta = m.params(vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let c = kkt_residual_r1(&m, &theta, &ds, 1e-9).unwrap();
        assert!(c.passed, "{c:?}");
        assert!((c.multipliers.as_ref().unwrap()[0] - 0.5).abs() < 1e-12);
        let scaled = kkt_residual_r1(&m, &theta.scaled(7.0), &ds, 1e-9).unwrap();
        for (a, b) in c.residuals.values().zip(scaled.residuals.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn r1_fails_on_nonpositive_margin() {
        let m = HomogeneousModel::diagonal(1).unwrap();
        let ds = binary(vec![vec![1.0]], vec![-1.0]);
        let theta = m.params(vec![1.0, 0.0]).unwrap();
        let c = kkt_residual_r1(&m, &theta, &ds, 0.1).unwrap();
        assert!(!c.passed);
        assert_eq!(c.residual("feasibility"), Some(2.0));
    }

    #[test]
    fn r2_examples() {
        let m = HomogeneousModel::diagonal(1).unwrap();
        let ds = LabeledDataset::new(Task::Regression, Split::new(vec![Input::Dense(vec![1.0])], vec![-3.0]).unwrap(), Split::default()).unwrap();
        let c = kkt_residual_r2(&m, &m.zeros(), &ds, 0.1, 1e-9).unwrap();
        assert_eq!(c.residual("interpolation"), Some(3.0));
        let exact = m.params(vec![0.0, 3f64.sqrt()]).unwrap();
        let c = kkt_residual_r2(&m, &exact, &ds, 0.0, 1e-9).unwrap();
        assert!(c.passed, "{c:?}");
    }

    #[test]
    fn nuclear_two_by_two_analytic() {
        let lambda = 0.2;
        let ds = LabeledDataset::new(Task::Regression, Split::new(vec![Input::Pair(0, 0)], vec![1.0]).unwrap(), Split::default()).unwrap();
        let mut w = DMatrix::zeros(2, 2);
        w[(0, 0)] = 1.0 - lambda / 4.0;
        let c = nuclear_subgrad_certificate(&w, &ds, lambda, 1e-12).unwrap();
        assert!(c.passed, "{c:?}");
        // Exact fit leaves M = 0, so the certificate cannot hold.
        w[(0, 0)] = 1.0;
        assert!(!nuclear_subgrad_certificate(&w, &ds, lambda, 1e-4).unwrap().passed);
    }

    fn log_of(values: &[(f64, f64)]) -> TrajectoryLog {
        TrajectoryLog::from_rows(
            values
                .iter()
                .enumerate()
                .map(|(i, &(t, v))| LogRow {
                    step: i as u64,
                    time: t,
                    train_loss: 0.0,
                    reg_loss: 0.0,
                    train_acc: v,
                    test_acc: v,
                    test_loss: 0.0,
                    param_norm: 0.0,
                    dir_dist: 0.0,
                    min_margin: 0.0,
                    log_train_loss: 0.0,
                    grad_norm: 0.0,
                })
                .collect(),
        )
    }

    #[test]
    fn transition_examples() {
        let step: Vec<(f64, f64)> = (1..=2000).map(|t| (t as f64, if t < 1000 { 0.5 } else { 1.0 })).collect();
        let tr = detect_transition(&log_of(&step), "test_acc", 0.55, 0.95).unwrap().unwrap();
        assert_eq!(tr.t_star, 1000.0);
        assert!(tr.sharpness <= 1e-3);

        let big_t = 100.0;
        let ramp: Vec<(f64, f64)> = (0..=10_000).map(|k| (k as f64 * 0.01, k as f64 * 0.01 / big_t)).collect();
        let tr = detect_transition(&log_of(&ramp), "test_acc", 0.25, 0.75).unwrap().unwrap();
        assert!((tr.sharpness - 0.5 * big_t / tr.t_star).abs() < 1e-3);

        let flat: Vec<(f64, f64)> = (0..10).map(|k| (k as f64, 0.3)).collect();
        assert!(detect_transition(&log_of(&flat), "test_acc", 0.35, 0.95).unwrap().is_none());
        assert!(detect_transition(&log_of(&flat), "nope", 0.35, 0.95).is_err());
    }

    #[test]
    fn recovery_bound_examples() {
        assert_eq!(recovery_error_bound(0.0, 3.0, 1.0, 10.0).unwrap(), 0.0);
        let a = recovery_error_bound(0.01, 3.0, 1.5, 10.0).unwrap();
        let b = recovery_error_bound(0.04, 3.0, 1.5, 10.0).unwrap();
        assert!((b / a - 2.0).abs() < 1e-12);
    }
}
