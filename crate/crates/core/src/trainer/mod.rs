//! Gradient flow on the weight-decayed objective, its discretizations, and
//! trajectory logging.

mod log;
mod loss;

pub use log::{fmt_f64, LogRow, TrajectoryLog, CSV_COLUMNS};
pub use loss::{accuracy_and_margin, data_term, loss_and_grad, DataTerm, LossEval, LossKind};
use loss::data_term_from_outputs;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{LabeledDataset, Split, Task};
use crate::error::{Error, Result};
use crate::model::{HomogeneousModel, InitSpec, ParamVector};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Integrator {
    Euler,
    Rk4,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Batch {
    Full,
    /// One uniformly sampled example per step (label-noise SGD).
    SingleSample,
}

/// Step-size policy for the time discretization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum LrMode {
    /// Fixed step `dt`.
    Constant,
    /// `min(dt / L(theta), max_step)`.
    NormalizedByLoss { max_step: f64 },
    /// `min(max_step, safety / (kappa + lambda))` where `kappa` bounds the
    /// curvature of the data term: `(1/n) sum l''_i ||grad f_i||^2 +
    /// (1/n) sum |l'_i| ||hess f_i||`. Scalar-output models only.
    CurvatureAdaptive { safety: f64, max_step: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub lambda: f64,
    pub integrator: Integrator,
    pub dt: f64,
    pub max_time: f64,
    /// Ratio between consecutive logging times.
    pub log_factor: f64,
    /// First logging time after `t = 0`.
    pub log_start: f64,
    /// Times that are hit exactly and always logged.
    pub forced_times: Vec<f64>,
    pub lr_mode: LrMode,
    pub label_noise_std: f64,
    pub batch: Batch,
    pub max_steps: u64,
    pub divergence_threshold: f64,
    /// Seed of the example/noise stream for single-sample training.
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(loss: LossKind, lambda: f64, dt: f64, max_time: f64) -> Self {
        Self {
            loss,
            lambda,
            integrator: Integrator::Euler,
            dt,
            max_time,
            log_factor: 1.1,
            log_start: dt,
            forced_times: Vec::new(),
            lr_mode: LrMode::Constant,
            label_noise_std: 0.0,
            batch: Batch::Full,
            max_steps: u64::MAX,
            divergence_threshold: 1e12,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64| v > 0.0 && v.is_finite();
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config("lambda must be a nonnegative number"));
        }
        if !pos(self.dt) {
            return Err(Error::config("dt must be positive"));
        }
        if !(self.max_time >= 0.0 && self.max_time.is_finite()) {
            return Err(Error::config("max_time must be a nonnegative number"));
        }
        if !(self.log_factor > 1.0 && self.log_factor.is_finite()) || !pos(self.log_start) {
            return Err(Error::config("log grid needs log_factor > 1 and log_start > 0"));
        }
        if !(self.label_noise_std >= 0.0) {
            return Err(Error::config("label_noise_std must be nonnegative"));
        }
        if self.forced_times.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
            return Err(Error::config("forced log times must be positive"));
        }
        match self.lr_mode {
            LrMode::Constant => {}
            LrMode::NormalizedByLoss { max_step } => {
                if !pos(max_step) {
                    return Err(Error::config("max_step must be positive"));
                }
            }
            LrMode::CurvatureAdaptive { safety, max_step } => {
                if !pos(safety) || !pos(max_step) {
                    return Err(Error::config("safety and max_step must be positive"));
                }
            }
        }
        if self.batch == Batch::SingleSample {
            if self.loss != LossKind::Squared {
                return Err(Error::config("single-sample training requires the squared loss"));
            }
            if self.integrator != Integrator::Euler || self.lr_mode != LrMode::Constant {
                return Err(Error::config("single-sample training uses constant-step Euler updates"));
            }
        }
        Ok(())
    }
}

/// Step size the configured policy assigns at `theta`.
fn step_size(
    model: &HomogeneousModel,
    theta: &ParamVector,
    data: &Split,
    cfg: &TrainConfig,
    term: &DataTerm,
    hessian_bounds: &[f64],
    sq_norms: Option<&[f64]>,
) -> Result<f64> {
    Ok(match cfg.lr_mode {
        LrMode::Constant => cfg.dt,
        LrMode::NormalizedByLoss { max_step } => {
            if term.loss > 0.0 {
                (cfg.dt / term.loss).min(max_step)
            } else {
                max_step
            }
        }
        LrMode::CurvatureAdaptive { safety, max_step } => {
            if data.is_empty() {
                return Ok(max_step.min(safety / cfg.lambda.max(f64::MIN_POSITIVE)));
            }
            let n = data.len() as f64;
            let sq = match sq_norms {
                Some(sq) => sq.to_vec(),
                None => model.grad_sq_norms(theta, &data.x)?,
            };
            let mut kappa = 0.0;
            for i in 0..data.len() {
                kappa += term.curvature[i] * sq[i] / n + term.coef[i].abs() * hessian_bounds[i];
            }
            (safety / (kappa + cfg.lambda)).min(max_step)
        }
    })
}

fn hessian_bounds(model: &HomogeneousModel, data: &Split) -> Vec<f64> {
    data.x.iter().map(|x| model.hessian_norm_bound(x).unwrap_or(0.0)).collect()
}

fn field(model: &HomogeneousModel, theta: &ParamVector, data: &Split, cfg: &TrainConfig) -> Result<Vec<f64>> {
    let e = loss_and_grad(model, theta, data, cfg.loss, cfg.lambda)?;
    Ok(e.grad.data)
}

fn check_finite(v: &[f64], time: f64, what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        let bad = v.iter().filter(|x| !x.is_finite()).count();
        Err(Error::Divergence { time, reason: format!("{bad} non-finite {what} components") })
    }
}

fn advance(model: &HomogeneousModel, theta: &ParamVector, data: &Split, cfg: &TrainConfig, h: f64, grad: Vec<f64>, time: f64) -> Result<ParamVector> {
    check_finite(&grad, time, "gradient")?;
    let x = &theta.data;
    let data_out = match cfg.integrator {
        Integrator::Euler => x.iter().zip(&grad).map(|(a, g)| a - h * g).collect::<Vec<_>>(),
        Integrator::Rk4 => {
            let shifted = |k: &[f64], c: f64| ParamVector {
                model: theta.model,
                data: x.iter().zip(k).map(|(a, g)| a - c * g).collect(),
            };
            let k1 = grad;
            let k2 = field(model, &shifted(&k1, 0.5 * h), data, cfg)?;
            let k3 = field(model, &shifted(&k2, 0.5 * h), data, cfg)?;
            let k4 = field(model, &shifted(&k3, h), data, cfg)?;
            for k in [&k2, &k3, &k4] {
                check_finite(k, time, "gradient")?;
            }
            (0..x.len())
                .map(|i| x[i] - h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
                .collect()
        }
    };
    check_finite(&data_out, time, "parameter")?;
    Ok(ParamVector { model: theta.model, data: data_out })
}

/// One full-batch integrator step of `dtheta/dt = -grad L(theta) - lambda theta`
/// with the configured step size.
pub fn step_gradient_flow(model: &HomogeneousModel, theta: &ParamVector, dataset: &LabeledDataset, config: &TrainConfig) -> Result<ParamVector> {
    config.validate()?;
    if config.batch != Batch::Full {
        return Err(Error::config("gradient-flow steps require full-batch training"));
    }
    let term = data_term(model, theta, &dataset.train, config.loss)?;
    let h = step_size(model, theta, &dataset.train, config, &term, &hessian_bounds(model, &dataset.train), None)?;
    let grad = field(model, theta, &dataset.train, config)?;
    advance(model, theta, &dataset.train, config, h, grad, 0.0)
}

/// One label-noise SGD step `theta -= dt * grad (f(theta; x_i) - y_i + xi)^2`
/// (plus `dt * lambda * theta`), with `i` uniform and `xi ~ N(0, std^2)`.
pub fn step_sgd_label_noise<R: Rng>(
    model: &HomogeneousModel,
    theta: &ParamVector,
    dataset: &LabeledDataset,
    config: &TrainConfig,
    rng: &mut R,
) -> Result<ParamVector> {
    config.validate()?;
    if config.batch != Batch::SingleSample {
        return Err(Error::config("label-noise SGD requires single-sample batches"));
    }
    sgd_step(model, theta, &dataset.train, config, config.dt, rng)
}

fn sgd_step<R: Rng>(model: &HomogeneousModel, theta: &ParamVector, data: &Split, cfg: &TrainConfig, h: f64, rng: &mut R) -> Result<ParamVector> {
    if data.is_empty() {
        return Err(Error::config("label-noise SGD needs at least one training example"));
    }
    let i = rng.random_range(0..data.len());
    let xi = if cfg.label_noise_std > 0.0 {
        Normal::new(0.0, cfg.label_noise_std).map_err(|e| Error::config(e.to_string()))?.sample(rng)
    } else {
        0.0
    };
    let x = std::slice::from_ref(&data.x[i]);
    let f = model.outputs(theta, x)?[0];
    let mut g = model.zeros();
    model.pullback(theta, x, &[2.0 * (f - data.y[i] + xi)], &mut g.data)?;
    if cfg.lambda != 0.0 {
        g.data.iter_mut().zip(&theta.data).for_each(|(gi, t)| *gi += cfg.lambda * t);
    }
    check_finite(&g.data, 0.0, "gradient")?;
    Ok(ParamVector { model: theta.model, data: theta.data.iter().zip(&g.data).map(|(t, gi)| t - h * gi).collect() })
}

/// Metrics at `theta` and time `t`.
pub fn evaluate(
    model: &HomogeneousModel,
    theta: &ParamVector,
    dataset: &LabeledDataset,
    init: &InitSpec,
    cfg: &TrainConfig,
    step: u64,
    t: f64,
) -> Result<LogRow> {
    let ev = loss_and_grad(model, theta, &dataset.train, cfg.loss, cfg.lambda)?;
    let train_out = model.outputs(theta, &dataset.train.x)?;
    let (train_acc, min_margin) = accuracy_and_margin(dataset.task, &train_out, &dataset.train.y);
    let (test_acc, test_loss) = if dataset.test.is_empty() {
        (f64::NAN, f64::NAN)
    } else {
        let term = data_term(model, theta, &dataset.test, cfg.loss)?;
        let (acc, _) = accuracy_and_margin(dataset.task, &term.outputs, &dataset.test.y);
        (acc, term.loss)
    };
    let scale = (cfg.lambda * t).exp() / init.alpha;
    let dir_dist = theta
        .data
        .iter()
        .zip(&init.base.data)
        .map(|(a, b)| {
            let d = scale * a - b;
            d * d
        })
        .sum::<f64>()
        .sqrt();
    Ok(LogRow {
        step,
        time: t,
        train_loss: ev.loss,
        reg_loss: ev.reg_loss,
        train_acc,
        test_acc,
        test_loss,
        param_norm: theta.norm(),
        dir_dist,
        min_margin,
        log_train_loss: ev.log_loss,
        grad_norm: ev.grad.norm(),
    })
}

/// Integrates from `init` until `config.max_time`, divergence or the step
/// budget, logging on a geometric time grid plus the forced times.
pub fn run(model: &HomogeneousModel, dataset: &LabeledDataset, init: &InitSpec, config: &TrainConfig) -> Result<TrajectoryLog> {
    run_observed(model, dataset, init, config, &mut |_, _| {})
}

/// As [`run`], calling `observer` with every logged row and the parameters
/// at that time.
pub fn run_observed(
    model: &HomogeneousModel,
    dataset: &LabeledDataset,
    init: &InitSpec,
    config: &TrainConfig,
    observer: &mut dyn FnMut(&LogRow, &ParamVector),
) -> Result<TrajectoryLog> {
    config.validate()?;
    config.loss.check_task(dataset.task)?;
    if !config.loss.output_dim_ok(model.output_dim()) {
        return Err(Error::config(format!("{:?} loss does not fit this model", config.loss)));
    }
    if matches!(config.lr_mode, LrMode::CurvatureAdaptive { .. }) && model.output_dim() != 1 {
        return Err(Error::config("curvature-adaptive steps need a scalar-output model"));
    }
    if dataset.task == Task::Regression && config.loss != LossKind::Squared {
        return Err(Error::config("regression requires the squared loss"));
    }
    let data = &dataset.train;
    let mut theta = init.initial(model)?;
    let mut forced: Vec<f64> = config.forced_times.iter().copied().filter(|&t| t < config.max_time).collect();
    forced.sort_by(f64::total_cmp);
    forced.dedup();
    let mut forced = forced.into_iter().peekable();

    let mut log = TrajectoryLog::from_rows(Vec::new());
    let mut t = 0.0_f64;
    let mut step = 0_u64;
    let mut next_grid = config.log_start;
    let mut sgd_rng = rng::seeded(config.seed);
    let hess = if matches!(config.lr_mode, LrMode::CurvatureAdaptive { .. }) { hessian_bounds(model, data) } else { Vec::new() };

    let row = evaluate(model, &theta, dataset, init, config, 0, 0.0)?;
    observer(&row, &theta);
    log.rows.push(row);

    let tiny = 1e-12 * config.max_time.max(1.0);
    while t < config.max_time - tiny {
        if step >= config.max_steps {
            log.truncated = true;
            break;
        }
        let stepped: Result<(ParamVector, f64, bool)> = (|| {
            let (h, grad) = if config.batch == Batch::Full {
                let (term, sq) = if hess.is_empty() {
                    (data_term(model, &theta, data, config.loss)?, None)
                } else {
                    let (out, sq) = model.outputs_and_sq_norms(&theta, &data.x)?;
                    (data_term_from_outputs(out, data, config.loss, model.output_dim()), Some(sq))
                };
                if !term.loss.is_finite() || term.loss > config.divergence_threshold {
                    return Err(Error::Divergence { time: t, reason: format!("training loss {}", term.loss) });
                }
                let h = step_size(model, &theta, data, config, &term, &hess, sq.as_deref())?;
                let mut g = model.zeros();
                model.pullback(&theta, &data.x, &term.coef, &mut g.data)?;
                if config.lambda != 0.0 {
                    g.data.iter_mut().zip(&theta.data).for_each(|(gi, x)| *gi += config.lambda * x);
                }
                (h, Some(g.data))
            } else {
                (config.dt, None)
            };
            if !(h > 0.0 && h.is_finite()) {
                return Err(Error::Divergence { time: t, reason: format!("step size {h}") });
            }
            let target = forced.peek().copied().unwrap_or(config.max_time).min(config.max_time);
            let (h, hit) = if t + h >= target - tiny { (target - t, true) } else { (h, false) };
            let next = match grad {
                Some(g) => advance(model, &theta, data, config, h, g, t)?,
                None => sgd_step(model, &theta, data, config, h, &mut sgd_rng)?,
            };
            Ok((next, h, hit))
        })();
        let (next, h, hit) = match stepped {
            Ok(v) => v,
            Err(Error::Divergence { time, reason }) => {
                log.diverged = true;
                log.divergence = Some(format!("t = {time}: {reason}"));
                break;
            }
            Err(e) => return Err(e),
        };
        theta = next;
        step += 1;
        t = if hit { forced.peek().copied().unwrap_or(config.max_time).min(config.max_time) } else { t + h };
        if hit && forced.peek().is_some_and(|&f| f <= t) {
            forced.next();
        }
        let at_end = t >= config.max_time - tiny;
        if hit || at_end || t >= next_grid {
            while next_grid <= t {
                next_grid *= config.log_factor;
            }
            let row = evaluate(model, &theta, dataset, init, config, step, t)?;
            let bad = !row.train_loss.is_finite() || row.train_loss > config.divergence_threshold;
            observer(&row, &theta);
            log.rows.push(row);
            if bad {
                log.diverged = true;
                log.divergence = Some(format!("t = {t}: training loss {}", row.train_loss));
                break;
            }
        }
    }
    log.steps = step;
    log.final_theta = Some(theta);
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_sparse_linear, Generator};
    use crate::model::Input;

    fn empty() -> LabeledDataset {
        LabeledDataset {
            task: Task::Regression,
            train: Split::default(),
            test: Split::default(),
            generator: Generator::Custom,
            seed: 0,
        }
    }

    #[test]
    fn pure_decay_matches_closed_form() {
        let m = HomogeneousModel::diagonal(3).unwrap();
        let init = InitSpec::new(&m, 10.0, 0.0, 0).unwrap();
        let mut cfg = TrainConfig::new(LossKind::Squared, 0.1, 0.05, 10.0);
        cfg.integrator = Integrator::Rk4;
        let log = run(&m, &empty(), &init, &cfg).unwrap();
        let last = log.last().unwrap();
        assert_eq!(last.time, 10.0);
        let ratio = last.param_norm / init.base.norm();
        assert!((ratio - 10.0 * (-1.0f64).exp()).abs() < 1e-6 * ratio);
        assert!(log.rows.iter().all(|r| r.dir_dist < 1e-9));
    }

    #[test]
    fn zero_gradient_point_is_fixed() {
        let m = HomogeneousModel::diagonal(2).unwrap();
        let theta = m.make_init(1.0, 0.0, 0).unwrap();
        let ds = LabeledDataset::new(
            Task::Regression,
            Split::new(vec![Input::Dense(vec![1.0, -1.0])], vec![0.0]).unwrap(),
            Split::default(),
        )
        .unwrap();
        let cfg = TrainConfig::new(LossKind::Squared, 0.0, 0.1, 1.0);
        assert_eq!(step_gradient_flow(&m, &theta, &ds, &cfg).unwrap(), theta);
    }

    #[test]
    fn euler_step_is_gd_with_weight_decay() {
        let m = HomogeneousModel::diagonal(2).unwrap();
        let ds = gen_sparse_linear(2, 1, 3, 0, 1).unwrap();
        let theta = m.params(vec![1.0, 0.5, 0.7, 0.2]).unwrap();
        let cfg = TrainConfig::new(LossKind::Exponential, 0.01, 0.3, 1.0);
        let e = loss_and_grad(&m, &theta, &ds.train, LossKind::Exponential, 0.01).unwrap();
        let next = step_gradient_flow(&m, &theta, &ds, &cfg).unwrap();
        for i in 0..4 {
            assert!((next.data[i] - (theta.data[i] - 0.3 * e.grad.data[i])).abs() < 1e-15);
        }
    }

    #[test]
    fn forced_times_are_hit_and_grid_is_increasing() {
        let m = HomogeneousModel::diagonal(4).unwrap();
        let ds = gen_sparse_linear(4, 1, 8, 8, 0).unwrap();
        let init = InitSpec::new(&m, 2.0, 0.0, 0).unwrap();
        let mut cfg = TrainConfig::new(LossKind::Exponential, 0.01, 0.01, 5.0);
        cfg.forced_times = vec![1.2345, 3.0];
        let log = run(&m, &ds, &init, &cfg).unwrap();
        let times: Vec<f64> = log.rows.iter().map(|r| r.time).collect();
        assert!(times.windows(2).all(|w| w[0] < w[1]));
        assert!(times.contains(&1.2345) && times.contains(&3.0) && times.contains(&5.0));
        assert!(times.len() > 40);
    }

    #[test]
    fn divergence_is_flagged_with_partial_log() {
        let m = HomogeneousModel::diagonal(1).unwrap();
        let ds = LabeledDataset::new(
            Task::Regression,
            Split::new(vec![Input::Dense(vec![1.0])], vec![5.0]).unwrap(),
            Split::default(),
        )
        .unwrap();
        let init = InitSpec::new(&m, 3.0, 0.0, 0).unwrap();
        let cfg = TrainConfig::new(LossKind::Squared, 0.0, 1.0, 100.0);
        let log = run(&m, &ds, &init, &cfg).unwrap();
        assert!(log.diverged);
        assert!(!log.rows.is_empty());
    }

    #[test]
    fn label_noise_sgd_is_reproducible() {
        let m = HomogeneousModel::diagonal(3).unwrap();
        let ds = LabeledDataset::new(
            Task::Regression,
            Split::new(vec![Input::Dense(vec![1.0, 0.0, 1.0]), Input::Dense(vec![0.0, 1.0, 0.0])], vec![0.5, -0.5]).unwrap(),
            Split::default(),
        )
        .unwrap();
        let mut cfg = TrainConfig::new(LossKind::Squared, 0.0, 0.01, 1.0);
        cfg.batch = Batch::SingleSample;
        cfg.label_noise_std = 0.3;
        let theta = m.make_init(1.0, 0.0, 0).unwrap();
        let a = step_sgd_label_noise(&m, &theta, &ds, &cfg, &mut rng::seeded(4)).unwrap();
        let b = step_sgd_label_noise(&m, &theta, &ds, &cfg, &mut rng::seeded(4)).unwrap();
        assert_eq!(a, b);
        let init = InitSpec::new(&m, 1.0, 0.0, 0).unwrap();
        cfg.seed = 9;
        let csv = || {
            let mut buf = Vec::new();
            run(&m, &ds, &init, &cfg).unwrap().write_csv(&mut buf).unwrap();
            buf
        };
        assert_eq!(csv(), csv());
    }

    #[test]
    fn config_validation() {
        let mut cfg = TrainConfig::new(LossKind::Exponential, 0.0, 0.1, 1.0);
        cfg.batch = Batch::SingleSample;
        assert!(cfg.validate().is_err());
        let cfg = TrainConfig::new(LossKind::Squared, -1.0, 0.1, 1.0);
        assert!(cfg.validate().is_err());
    }
}
