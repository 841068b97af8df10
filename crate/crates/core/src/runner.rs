//! Config-driven experiments: data generation, training, analyses, sweeps
//! over `(alpha, lambda, seed)`, transition-time scaling fits and plots.

mod plot;

pub use plot::{emit_plots, emit_report_plots};

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    gen_margin_gaussian, gen_modular_addition, gen_multiplication_table, gen_sparse_linear, multiplication_table,
    LabeledDataset, Task,
};
use crate::diagnostics::{
    accuracy_thresholds, bound_curve, detect_drop, detect_transition, kkt_residual_r1, kkt_residual_r2, BoundCurve,
    BoundKind, Certificate, Transition,
};
use crate::error::{Error, Result};
use crate::model::{dot, HomogeneousModel, InitSpec, Input, ModelKind, ParamVector};
use crate::ntk::{build_kernel_system, kernel_alignment, solve_kernel_regression, solve_kernel_svm, KernelSystem, MarginSolution};
use crate::refsolve::{solve_l1_max_margin, solve_l2_max_margin};
use crate::rng::derive_seed;
use crate::trainer::{run_observed, Batch, Integrator, LogRow, LossKind, LrMode, TrainConfig, TrajectoryLog};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    ModAdd,
    SparseGrok,
    Misgrok,
    MatrixCompletion,
    Custom,
}

impl Experiment {
    pub const ALL: [Experiment; 4] = [Self::ModAdd, Self::SparseGrok, Self::Misgrok, Self::MatrixCompletion];
}

/// Dataset section; the generator also determines the model family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "generator", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    ModularAddition { p: usize, train_fraction: f64 },
    SparseLinear { d: usize, k: usize, n_train: usize, n_test: usize },
    MarginGaussian { d: usize, n_train: usize, n_test: usize, gamma: f64 },
    MultiplicationTable { d: usize, observe_fraction: f64 },
    /// Dataset JSON written by `LabeledDataset::save_json`.
    File { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Initialization scale.
    pub alpha: f64,
    /// Gaussian perturbation of the factorization init.
    #[serde(default)]
    pub sigma: f64,
    /// Width of the ReLU net.
    #[serde(default)]
    pub hidden: Option<usize>,
}

/// Training section. The horizon is either absolute (`max_time`) or in units
/// of `T0 = log(alpha) / lambda` (`horizon`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub loss: LossKind,
    pub lambda: f64,
    pub dt: f64,
    #[serde(default)]
    pub max_time: Option<f64>,
    #[serde(default)]
    pub horizon: Option<f64>,
    #[serde(default = "default_integrator")]
    pub integrator: Integrator,
    #[serde(default = "default_lr_mode")]
    pub lr_mode: LrMode,
    #[serde(default = "default_log_factor")]
    pub log_factor: f64,
    #[serde(default)]
    pub log_start: Option<f64>,
    #[serde(default)]
    pub forced_times: Vec<f64>,
    #[serde(default)]
    pub label_noise_std: f64,
    #[serde(default = "default_batch")]
    pub batch: Batch,
    #[serde(default)]
    pub max_steps: Option<u64>,
    #[serde(default = "default_divergence")]
    pub divergence_threshold: f64,
}

fn default_integrator() -> Integrator {
    Integrator::Euler
}
fn default_lr_mode() -> LrMode {
    LrMode::Constant
}
fn default_log_factor() -> f64 {
    1.1
}
fn default_batch() -> Batch {
    Batch::Full
}
fn default_divergence() -> f64 {
    1e12
}

/// Grid axes; a missing axis takes the base value.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(default)]
    pub alpha: Option<Vec<f64>>,
    #[serde(default)]
    pub lambda: Option<Vec<f64>>,
    #[serde(default)]
    pub seeds: Option<Vec<u64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Analysis {
    KernelAlignment,
    Kkt,
    Transition,
    Bounds,
}

/// Analysis parameters; times are in units of `T0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisOptions {
    #[serde(default = "default_align_at")]
    pub align_at: f64,
    #[serde(default = "default_kkt_window")]
    pub kkt_window: [f64; 2],
    #[serde(default = "default_kkt_tolerance")]
    pub kkt_tolerance: f64,
    #[serde(default = "default_bound_until")]
    pub bound_until: f64,
    /// Metric whose transition feeds the scaling fit.
    #[serde(default = "default_metric")]
    pub transition_metric: String,
    /// Overrides of the `(low, high)` thresholds.
    #[serde(default)]
    pub thresholds: Option<[f64; 2]>,
}

fn default_align_at() -> f64 {
    0.7
}
fn default_kkt_window() -> [f64; 2] {
    [1.0, 1.3]
}
fn default_kkt_tolerance() -> f64 {
    0.05
}
fn default_bound_until() -> f64 {
    0.9
}
fn default_metric() -> String {
    "test_acc".into()
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        Self {
            align_at: default_align_at(),
            kkt_window: default_kkt_window(),
            kkt_tolerance: default_kkt_tolerance(),
            bound_until: default_bound_until(),
            transition_metric: default_metric(),
            thresholds: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    /// Master seed.
    #[serde(default)]
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainSection,
    #[serde(default)]
    pub sweep: Option<SweepConfig>,
    #[serde(default)]
    pub analysis: Vec<Analysis>,
    #[serde(default)]
    pub options: AnalysisOptions,
}

/// One point of the run grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunPoint {
    pub index: usize,
    pub alpha: f64,
    pub lambda: f64,
    pub seed: u64,
}

impl RunPoint {
    /// `log(alpha) / lambda`, when positive.
    pub fn t0(&self) -> Option<f64> {
        let t = self.alpha.ln() / self.lambda;
        (t > 0.0 && t.is_finite()).then_some(t)
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Desk-scale configuration of a named experiment.
    pub fn preset(experiment: Experiment) -> Self {
        let cls_train = |horizon: f64| TrainSection {
            loss: LossKind::Exponential,
            lambda: 1e-3,
            dt: 1e-4,
            max_time: None,
            horizon: Some(horizon),
            integrator: Integrator::Euler,
            lr_mode: LrMode::CurvatureAdaptive { safety: 1.0, max_step: 1.0 },
            log_factor: 1.02,
            log_start: None,
            forced_times: Vec::new(),
            label_noise_std: 0.0,
            batch: Batch::Full,
            max_steps: None,
            divergence_threshold: 1e12,
        };
        let (data, model, train, analysis) = match experiment {
            Experiment::SparseGrok | Experiment::Custom => (
                DataConfig::SparseLinear { d: 1000, k: 3, n_train: 128, n_test: 2000 },
                ModelConfig { alpha: 64.0, sigma: 0.0, hidden: None },
                cls_train(2.5),
                vec![Analysis::Transition, Analysis::KernelAlignment, Analysis::Kkt, Analysis::Bounds],
            ),
            Experiment::Misgrok => (
                DataConfig::MarginGaussian { d: 100_000, n_train: 32, n_test: 500, gamma: 25.0 },
                ModelConfig { alpha: 64.0, sigma: 0.0, hidden: None },
                TrainSection { log_factor: 1.05, ..cls_train(3.5) },
                vec![Analysis::Transition],
            ),
            Experiment::MatrixCompletion => (
                DataConfig::MultiplicationTable { d: 32, observe_fraction: 0.25 },
                ModelConfig { alpha: 8.0, sigma: 0.0, hidden: None },
                TrainSection {
                    loss: LossKind::Squared,
                    lr_mode: LrMode::CurvatureAdaptive { safety: 0.5, max_step: 1.0 },
                    log_factor: 1.05,
                    ..cls_train(3.0)
                },
                vec![Analysis::Transition, Analysis::KernelAlignment, Analysis::Kkt],
            ),
            Experiment::ModAdd => (
                DataConfig::ModularAddition { p: 31, train_fraction: 0.7 },
                ModelConfig { alpha: 1.0, sigma: 0.0, hidden: Some(128) },
                TrainSection {
                    loss: LossKind::CrossEntropy,
                    lambda: 3e-3,
                    dt: 0.5,
                    max_time: Some(15_000.0),
                    horizon: None,
                    lr_mode: LrMode::Constant,
                    log_factor: 1.05,
                    ..cls_train(1.0)
                },
                vec![Analysis::Transition],
            ),
        };
        let options = AnalysisOptions {
            align_at: if experiment == Experiment::MatrixCompletion { 0.8 } else { 0.7 },
            ..AnalysisOptions::default()
        };
        Self { experiment, seed: 0, data, model, train, sweep: None, analysis, options }
    }

    /// Full-size configuration of a named experiment (long-running).
    pub fn full_scale(experiment: Experiment) -> Self {
        let mut cfg = Self::preset(experiment);
        match experiment {
            Experiment::SparseGrok | Experiment::Custom => {
                let d = 100_000;
                cfg.data = DataConfig::SparseLinear { d, k: 3, n_train: 256, n_test: 2000 };
                // Initial parameter norm 128.
                cfg.model.alpha = 128.0 / (2.0 * d as f64).sqrt();
                cfg.train.horizon = None;
                cfg.train.max_time = Some(2e4);
            }
            Experiment::Misgrok => {}
            Experiment::MatrixCompletion => {
                cfg.data = DataConfig::MultiplicationTable { d: 97, observe_fraction: 0.05 };
                cfg.model.alpha = 10.0;
                cfg.train.lambda = 1e-4;
                cfg.train.lr_mode = LrMode::Constant;
                cfg.train.dt = 0.1;
                cfg.train.horizon = None;
                cfg.train.max_time = Some(1e6 * 0.1);
            }
            Experiment::ModAdd => {
                cfg.data = DataConfig::ModularAddition { p: 97, train_fraction: 0.4 };
                cfg.model.hidden = Some(1024);
                cfg.train.lambda = 1e-4;
                cfg.train.dt = 0.002;
                cfg.train.max_time = Some(1e8 * 0.002);
            }
        }
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        if t.max_time.is_some() == t.horizon.is_some() {
            return Err(Error::config("set exactly one of train.max_time and train.horizon"));
        }
        if !(self.model.alpha > 0.0 && self.model.sigma >= 0.0) {
            return Err(Error::config("model.alpha must be positive and model.sigma nonnegative"));
        }
        if let Some(sweep) = &self.sweep {
            let axes = [sweep.alpha.as_ref().map(Vec::len), sweep.lambda.as_ref().map(Vec::len), sweep.seeds.as_ref().map(Vec::len)];
            if axes.iter().all(Option::is_none) || axes.iter().any(|a| *a == Some(0)) {
                return Err(Error::config("sweep grid is empty"));
            }
        }
        let o = &self.options;
        if !(o.kkt_window[0] < o.kkt_window[1]) || !(o.align_at > 0.0) || !(o.bound_until > 0.0) {
            return Err(Error::config("analysis times must be positive with an increasing kkt window"));
        }
        if LogRow::default_metric_names().iter().all(|m| *m != o.transition_metric) {
            return Err(Error::config(format!("unknown transition metric {}", o.transition_metric)));
        }
        let analyses: BTreeSet<_> = self.analysis.iter().collect();
        if analyses.len() != self.analysis.len() {
            return Err(Error::config("analysis names repeat"));
        }
        for p in self.grid()? {
            self.train_config(&p)?.validate()?;
        }
        Ok(())
    }

    /// Runs in order `alpha`-major, then `lambda`, then seed.
    pub fn grid(&self) -> Result<Vec<RunPoint>> {
        let sweep = self.sweep.clone().unwrap_or_default();
        let alphas = sweep.alpha.unwrap_or_else(|| vec![self.model.alpha]);
        let lambdas = sweep.lambda.unwrap_or_else(|| vec![self.train.lambda]);
        let seeds = sweep.seeds.unwrap_or_else(|| vec![self.seed]);
        let mut out = Vec::new();
        for &alpha in &alphas {
            for &lambda in &lambdas {
                for &seed in &seeds {
                    out.push(RunPoint { index: out.len(), alpha, lambda, seed });
                }
            }
        }
        if out.is_empty() {
            return Err(Error::config("sweep grid is empty"));
        }
        Ok(out)
    }

    pub fn dataset(&self, seed: u64) -> Result<LabeledDataset> {
        match &self.data {
            DataConfig::ModularAddition { p, train_fraction } => gen_modular_addition(*p, *train_fraction, seed),
            DataConfig::SparseLinear { d, k, n_train, n_test } => gen_sparse_linear(*d, *k, *n_train, *n_test, seed),
            DataConfig::MarginGaussian { d, n_train, n_test, gamma } => gen_margin_gaussian(*d, *n_train, *n_test, *gamma, seed),
            DataConfig::MultiplicationTable { d, observe_fraction } => gen_multiplication_table(*d, *observe_fraction, seed),
            DataConfig::File { path } => LabeledDataset::load_json(path),
        }
    }

    pub fn model_for(&self, dataset: &LabeledDataset) -> Result<HomogeneousModel> {
        let hidden = self.model.hidden.unwrap_or(128);
        match &self.data {
            DataConfig::ModularAddition { p, .. } => HomogeneousModel::two_layer_relu(*p, hidden),
            DataConfig::SparseLinear { d, .. } | DataConfig::MarginGaussian { d, .. } => HomogeneousModel::diagonal(*d),
            DataConfig::MultiplicationTable { d, .. } => HomogeneousModel::factorization(*d),
            DataConfig::File { .. } => infer_model(dataset, hidden),
        }
    }

    pub fn train_config(&self, point: &RunPoint) -> Result<TrainConfig> {
        let s = &self.train;
        let max_time = match (s.max_time, s.horizon) {
            (Some(t), _) => t,
            (None, Some(h)) => {
                h * point.t0().ok_or_else(|| Error::config("horizon needs alpha > 1 and lambda > 0"))?
            }
            (None, None) => return Err(Error::config("training horizon missing")),
        };
        Ok(TrainConfig {
            loss: s.loss,
            lambda: point.lambda,
            integrator: s.integrator,
            dt: s.dt,
            max_time,
            log_factor: s.log_factor,
            log_start: s.log_start.unwrap_or(s.dt),
            forced_times: s.forced_times.clone(),
            lr_mode: s.lr_mode,
            label_noise_std: s.label_noise_std,
            batch: s.batch,
            max_steps: s.max_steps.unwrap_or(u64::MAX),
            divergence_threshold: s.divergence_threshold,
            seed: derive_seed(self.run_seed(point), 2),
        })
    }

    fn run_seed(&self, point: &RunPoint) -> u64 {
        derive_seed(self.seed, point.seed)
    }
}

impl LogRow {
    fn default_metric_names() -> [&'static str; 10] {
        ["train_loss", "reg_loss", "train_acc", "test_acc", "test_loss", "param_norm", "dir_dist", "min_margin", "log_train_loss", "grad_norm"]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub time: f64,
    /// Cosine between the recovered and kernel-solution directions.
    pub kernel_cosine: f64,
    pub deviation: f64,
    /// Cosine of the effective linear weight with the L2 max-margin direction.
    pub effective_cosine_l2: Option<f64>,
    /// Largest `|W_ij|` over unobserved entries.
    pub max_unobserved: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KktReport {
    pub time: f64,
    pub certificate: Certificate,
    /// Cosine of the effective linear weight with the L1 max-margin solution.
    pub effective_cosine_l1: Option<f64>,
    /// `||W - X*||_F` for completion runs.
    pub completion_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    /// Margin or Gram eigenvalue used by the bound.
    pub constant: f64,
    pub until: f64,
    /// Largest `loss / bound` over logged times up to `until`.
    pub max_ratio: f64,
    pub curve: BoundCurve,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub point: RunPoint,
    pub t0: Option<f64>,
    pub steps: u64,
    pub diverged: bool,
    pub divergence: Option<String>,
    pub truncated: bool,
    pub final_time: f64,
    pub final_train_acc: f64,
    pub final_test_acc: f64,
    pub final_train_loss: f64,
    pub final_test_loss: f64,
    /// First time the training set is fit (accuracy 1, or loss below 1e-3 of
    /// its initial value for regression).
    pub t_train_fit: Option<f64>,
    pub test_acc_at_train_fit: Option<f64>,
    pub max_test_acc: f64,
    pub t_max_test_acc: f64,
    pub train_transition: Option<Transition>,
    pub test_transition: Option<Transition>,
    pub alignment: Option<AlignmentReport>,
    pub kkt: Option<KktReport>,
    pub bounds: Option<BoundReport>,
    /// Analyses that could not be evaluated.
    pub errors: Vec<String>,
}

impl RunSummary {
    /// Transition time of the configured metric.
    pub fn t_star(&self) -> Option<f64> {
        self.test_transition.map(|t| t.t_star)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    pub points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionPoint {
    pub alpha: f64,
    pub lambda: f64,
    pub seed: u64,
    /// `(1/lambda) log(alpha)`.
    pub predictor: f64,
    pub t_star: Option<f64>,
    pub usable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub experiment: Experiment,
    pub master_seed: u64,
    pub runs: Vec<RunSummary>,
    pub transitions: Vec<TransitionPoint>,
    pub fit: Option<ScalingFit>,
}

/// Output of a single run.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub summary: RunSummary,
    pub log: TrajectoryLog,
}

/// Least-squares line through `(x, y)` points.
pub fn fit_line(points: &[(f64, f64)]) -> Result<ScalingFit> {
    let n = points.len();
    if n < 2 {
        return Err(Error::config("line fit needs at least two points"));
    }
    let nf = n as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / nf;
    let my = points.iter().map(|p| p.1).sum::<f64>() / nf;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = points.iter().map(|p| (p.1 - my).powi(2)).sum();
    if !(sxx > 0.0) {
        return Err(Error::config("line fit needs distinct predictors"));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy > 0.0 { sxy * sxy / (sxx * syy) } else { 1.0 };
    Ok(ScalingFit { slope, intercept, r2, points: n })
}

/// Fits measured `t*` against `(1/lambda) log(alpha)` over usable runs.
pub fn fit_transition_scaling(report: &SweepReport) -> Result<ScalingFit> {
    let usable: Vec<&TransitionPoint> = report.transitions.iter().filter(|p| p.usable && p.t_star.is_some()).collect();
    let distinct: BTreeSet<(u64, u64)> = usable.iter().map(|p| (p.alpha.to_bits(), p.lambda.to_bits())).collect();
    if distinct.len() < 4 {
        return Err(Error::config(format!("scaling fit needs 4 grid points with transitions, found {}", distinct.len())));
    }
    let pts: Vec<(f64, f64)> = usable.iter().map(|p| (p.predictor, p.t_star.unwrap_or(f64::NAN))).collect();
    fit_line(&pts)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let d = dot(a, a).sqrt() * dot(b, b).sqrt();
    if d > 0.0 {
        dot(a, b) / d
    } else {
        0.0
    }
}

fn near(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * b.abs().max(1.0)
}

struct Captures {
    align: Option<(f64, ParamVector)>,
    kkt: Option<(f64, f64, ParamVector)>,
}

/// Model family implied by a dataset's task and input type: ReLU network
/// for multi-class pairs, matrix factorization for other pairs, diagonal
/// network for dense vectors.
pub fn infer_model(dataset: &LabeledDataset, hidden: usize) -> Result<HomogeneousModel> {
    match (dataset.task, dataset.train.x.first()) {
        (Task::MultiClass { classes }, Some(Input::Pair(..))) => HomogeneousModel::two_layer_relu(classes, hidden),
        (_, Some(Input::Pair(..))) => HomogeneousModel::factorization(crate::refsolve::nuclear::completion_dim(dataset)?),
        (Task::MultiClass { .. }, _) => Err(Error::config("multi-class datasets need index-pair inputs")),
        (_, Some(Input::Dense(v))) => HomogeneousModel::diagonal(v.len()),
        (_, None) => Err(Error::config("dataset has no training inputs")),
    }
}

/// Trains one grid point and evaluates the configured analyses.
pub fn run_point(config: &ExperimentConfig, point: &RunPoint) -> Result<RunOutput> {
    let run_seed = config.run_seed(point);
    let dataset = config.dataset(run_seed)?;
    let model = config.model_for(&dataset)?;
    let init = InitSpec::new(&model, point.alpha, config.model.sigma, derive_seed(run_seed, 1))?;
    let mut tc = config.train_config(point)?;
    let t0 = point.t0();
    let wants = |a: Analysis| config.analysis.contains(&a);
    let o = &config.options;

    let align_time = t0.filter(|_| wants(Analysis::KernelAlignment)).map(|t| o.align_at * t);
    let window = t0.map(|t| (o.kkt_window[0] * t, o.kkt_window[1] * t));
    tc.forced_times.extend(align_time);
    if wants(Analysis::Kkt) && dataset.task == Task::BinaryCls {
        if let Some((a, b)) = window {
            tc.forced_times.extend([a, b]);
        }
    }
    if wants(Analysis::Bounds) {
        tc.forced_times.extend(t0.map(|t| o.bound_until * t));
    }
    tc.forced_times.retain(|&t| t < tc.max_time);

    let mut caps = Captures { align: None, kkt: None };
    let track_kkt = wants(Analysis::Kkt) && dataset.task == Task::BinaryCls;
    let log = run_observed(&model, &dataset, &init, &tc, &mut |row, theta| {
        if align_time.is_some_and(|ta| near(row.time, ta)) {
            caps.align = Some((row.time, theta.clone()));
        }
        if track_kkt {
            if let Some((a, b)) = window {
                let inside = row.time >= a * (1.0 - 1e-9) && row.time <= b * (1.0 + 1e-9);
                if inside && caps.kkt.as_ref().is_none_or(|k| row.grad_norm < k.1) {
                    caps.kkt = Some((row.time, row.grad_norm, theta.clone()));
                }
            }
        }
    })?;

    let last = *log.last().ok_or_else(|| Error::config("empty trajectory"))?;
    let first = log.rows[0];
    let mut summary = RunSummary {
        point: *point,
        t0,
        steps: log.steps,
        diverged: log.diverged,
        divergence: log.divergence.clone(),
        truncated: log.truncated,
        final_time: last.time,
        final_train_acc: last.train_acc,
        final_test_acc: last.test_acc,
        final_train_loss: last.train_loss,
        final_test_loss: last.test_loss,
        t_train_fit: None,
        test_acc_at_train_fit: None,
        max_test_acc: f64::NAN,
        t_max_test_acc: f64::NAN,
        train_transition: None,
        test_transition: None,
        alignment: None,
        kkt: None,
        bounds: None,
        errors: Vec::new(),
    };
    let regression = dataset.task == Task::Regression;
    let fit_row = log.rows.iter().find(|r| {
        if regression {
            r.train_loss <= 1e-3 * first.train_loss
        } else {
            r.train_acc >= 1.0
        }
    });
    summary.t_train_fit = fit_row.map(|r| r.time);
    summary.test_acc_at_train_fit = fit_row.map(|r| r.test_acc);
    if let Some(best) = log.rows.iter().filter(|r| !r.test_acc.is_nan()).max_by(|a, b| a.test_acc.total_cmp(&b.test_acc).then(b.time.total_cmp(&a.time))) {
        summary.max_test_acc = best.test_acc;
        summary.t_max_test_acc = best.time;
    }

    if wants(Analysis::Transition) {
        let res: Result<()> = (|| {
            let metric = o.transition_metric.as_str();
            if regression || metric.ends_with("loss") {
                let test_metric = if metric.ends_with("loss") { metric } else { "test_loss" };
                let init_v = first.metric(test_metric).unwrap_or(f64::NAN);
                let (high, low) = o.thresholds.map_or((0.5 * init_v, 0.1 * init_v), |[l, h]| (h, l));
                summary.test_transition = detect_drop(&log, test_metric, high, low)?;
                let tr0 = first.train_loss;
                summary.train_transition = detect_drop(&log, "train_loss", 0.5 * tr0, 1e-3 * tr0)?;
            } else {
                let chance = match dataset.task {
                    Task::MultiClass { classes } => 1.0 / classes as f64,
                    _ => 0.5,
                };
                let (low, high) = o.thresholds.map_or(accuracy_thresholds(chance), |[l, h]| (l, h));
                summary.train_transition = detect_transition(&log, "train_acc", low, high)?;
                summary.test_transition = detect_transition(&log, metric, low, high)?;
            }
            Ok(())
        })();
        if let Err(e) = res {
            summary.errors.push(format!("transition: {e}"));
        }
    }

    let needs_kernel = (wants(Analysis::KernelAlignment) && caps.align.is_some()) || wants(Analysis::Bounds);
    let kernel: Option<(KernelSystem, MarginSolution, LabeledDataset)> = if needs_kernel {
        let built: Result<_> = (|| {
            let ds = if matches!(model.kind(), ModelKind::MatrixFactorization { .. }) { dataset.symmetric_dedup() } else { dataset.clone() };
            let system = build_kernel_system(&model, &init.base, &ds)?;
            let sol = if ds.task == Task::Regression { solve_kernel_regression(&system)? } else { solve_kernel_svm(&system)? };
            Ok((system, sol, ds))
        })();
        match built {
            Ok(k) => Some(k),
            Err(e) => {
                summary.errors.push(format!("kernel system: {e}"));
                None
            }
        }
    } else {
        None
    };

    if let (Some((ta, theta)), Some((system, sol, _))) = (&caps.align, &kernel) {
        let res: Result<AlignmentReport> = (|| {
            let probes = if dataset.test.is_empty() { &dataset.train } else { &dataset.test };
            let al = kernel_alignment(theta, &model, &init.base, point.alpha, point.lambda, *ta, system, sol, probes)?;
            let mut report = AlignmentReport {
                time: *ta,
                kernel_cosine: al.cosine,
                deviation: al.deviation,
                effective_cosine_l2: None,
                max_unobserved: None,
            };
            match model.kind() {
                ModelKind::DiagonalLinear { .. } if dataset.task == Task::BinaryCls => {
                    let mm = solve_l2_max_margin(&dataset)?;
                    report.effective_cosine_l2 = Some(cosine(&model.effective_weight(theta)?, &mm.w));
                }
                ModelKind::MatrixFactorization { dim } => {
                    let w = model.product_matrix(theta)?;
                    let observed: BTreeSet<(usize, usize)> = dataset
                        .train
                        .x
                        .iter()
                        .filter_map(|x| match x {
                            Input::Pair(i, j) => Some(((*i).min(*j), (*i).max(*j))),
                            Input::Dense(_) => None,
                        })
                        .collect();
                    let mut worst = 0.0_f64;
                    for i in 0..dim {
                        for j in i..dim {
                            if !observed.contains(&(i, j)) {
                                worst = worst.max(w[(i, j)].abs()).max(w[(j, i)].abs());
                            }
                        }
                    }
                    report.max_unobserved = Some(worst);
                }
                _ => {}
            }
            Ok(report)
        })();
        match res {
            Ok(r) => summary.alignment = Some(r),
            Err(e) => summary.errors.push(format!("kernel_alignment: {e}")),
        }
    }

    if wants(Analysis::Kkt) {
        let res: Result<Option<KktReport>> = (|| {
            if dataset.task == Task::BinaryCls {
                let Some((time, _, theta)) = &caps.kkt else { return Ok(None) };
                let certificate = kkt_residual_r1(&model, theta, &dataset, o.kkt_tolerance)?;
                let effective_cosine_l1 = match model.kind() {
                    ModelKind::DiagonalLinear { .. } => {
                        let mm = solve_l1_max_margin(&dataset)?;
                        Some(cosine(&model.effective_weight(theta)?, &mm.w))
                    }
                    _ => None,
                };
                Ok(Some(KktReport { time: *time, certificate, effective_cosine_l1, completion_error: None }))
            } else if dataset.task == Task::Regression {
                let theta = log.final_theta.as_ref().ok_or_else(|| Error::config("run kept no parameters"))?;
                let certificate = kkt_residual_r2(&model, theta, &dataset, point.lambda, o.kkt_tolerance)?;
                let completion_error = match (model.kind(), &config.data) {
                    (ModelKind::MatrixFactorization { dim }, DataConfig::MultiplicationTable { .. }) => {
                        let w = model.product_matrix(theta)?;
                        let target = multiplication_table(dim);
                        Some(w.transpose().iter().zip(&target).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
                    }
                    _ => None,
                };
                Ok(Some(KktReport { time: last.time, certificate, effective_cosine_l1: None, completion_error }))
            } else {
                Err(Error::config("KKT analysis is defined for binary classification and regression"))
            }
        })();
        match res {
            Ok(r) => summary.kkt = r,
            Err(e) => summary.errors.push(format!("kkt: {e}")),
        }
    }

    if wants(Analysis::Bounds) {
        if let Some((_, sol, ds)) = &kernel {
            let res: Result<BoundReport> = (|| {
                let kind = match ds.task {
                    Task::BinaryCls => {
                        if tc.loss != LossKind::Exponential {
                            return Err(Error::config("the classification bound assumes the exponential loss"));
                        }
                        BoundKind::Classification { gamma: sol.gamma_ntk.unwrap_or(f64::NAN) }
                    }
                    _ => BoundKind::Regression {
                        nu: sol.nu_ntk.unwrap_or(f64::NAN),
                        n: ds.train.len(),
                        y_norm_sq: dot(&ds.train.y, &ds.train.y),
                    },
                };
                let until = t0.map_or(f64::INFINITY, |t| o.bound_until * t);
                let times: Vec<f64> = log.rows.iter().map(|r| r.time).collect();
                let curve = bound_curve(point.alpha, point.lambda, model.degree(), kind, &times)?;
                let max_ratio = log
                    .rows
                    .iter()
                    .zip(&curve.values)
                    .filter(|(r, _)| r.time <= until * (1.0 + 1e-12))
                    .map(|(r, b)| r.train_loss / b)
                    .fold(0.0_f64, f64::max);
                let constant = match kind {
                    BoundKind::Classification { gamma } => gamma,
                    BoundKind::Regression { nu, .. } => nu,
                };
                Ok(BoundReport { constant, until, max_ratio, curve })
            })();
            match res {
                Ok(r) => summary.bounds = Some(r),
                Err(e) => summary.errors.push(format!("bounds: {e}")),
            }
        }
    }

    Ok(RunOutput { summary, log })
}

fn run_dir(out: &Path, point: &RunPoint) -> PathBuf {
    out.join(format!("run_{:03}", point.index))
}

/// Runs the whole grid in parallel and aggregates the summaries. Per-run
/// outputs go to `out/run_NNN/{metrics.csv, summary.json}` and the report to
/// `out/report.json` when `out` is given.
pub fn run_experiment(config: &ExperimentConfig, out: Option<&Path>) -> Result<SweepReport> {
    config.validate()?;
    let grid = config.grid()?;
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
    }
    let outputs: Vec<Result<RunSummary>> = grid
        .par_iter()
        .map(|p| {
            let res = run_point(config, p)?;
            if let Some(dir) = out {
                let rd = run_dir(dir, p);
                fs::create_dir_all(&rd)?;
                res.log.save_csv(&rd.join("metrics.csv"))?;
                fs::write(rd.join("summary.json"), serde_json::to_string_pretty(&res.summary)?)?;
            }
            Ok(res.summary)
        })
        .collect();
    let runs = outputs.into_iter().collect::<Result<Vec<_>>>()?;
    let transitions = runs
        .iter()
        .map(|r| TransitionPoint {
            alpha: r.point.alpha,
            lambda: r.point.lambda,
            seed: r.point.seed,
            predictor: r.point.alpha.ln() / r.point.lambda,
            t_star: r.t_star(),
            usable: !r.diverged && !r.truncated,
        })
        .collect();
    let mut report = SweepReport { experiment: config.experiment, master_seed: config.seed, runs, transitions, fit: None };
    report.fit = fit_transition_scaling(&report).ok();
    if let Some(dir) = out {
        fs::write(dir.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_round_trip() {
        for e in Experiment::ALL {
            for cfg in [ExperimentConfig::preset(e), ExperimentConfig::full_scale(e)] {
                cfg.validate().unwrap();
                let text = cfg.to_toml_string().unwrap();
                assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), cfg);
            }
        }
    }

    #[test]
    fn unknown_keys_and_empty_grids_are_config_errors() {
        let base = ExperimentConfig::preset(Experiment::SparseGrok).to_toml_string().unwrap();
        let err = ExperimentConfig::from_toml_str(&format!("bogus = 1\n{base}")).unwrap_err();
        assert!(err.is_config());
        let mut cfg = ExperimentConfig::preset(Experiment::SparseGrok);
        cfg.sweep = Some(SweepConfig { alpha: Some(vec![]), ..Default::default() });
        assert!(cfg.validate().unwrap_err().is_config());
        cfg.sweep = Some(SweepConfig::default());
        assert!(cfg.validate().unwrap_err().is_config());
        let mut cfg = ExperimentConfig::preset(Experiment::SparseGrok);
        cfg.options.transition_metric = "nope".into();
        assert!(cfg.validate().is_err());
        let bad_analysis = base.replace("analysis = [", "analysis = [\"sharpness\", ");
        assert!(ExperimentConfig::from_toml_str(&bad_analysis).unwrap_err().is_config());
    }

    #[test]
    fn grid_order_and_size() {
        let mut cfg = ExperimentConfig::preset(Experiment::SparseGrok);
        cfg.sweep = Some(SweepConfig { alpha: Some(vec![16.0, 32.0]), lambda: Some(vec![1e-3, 2e-3]), seeds: Some(vec![0, 1]) });
        let g = cfg.grid().unwrap();
        assert_eq!(g.len(), 8);
        assert_eq!((g[0].alpha, g[0].lambda, g[0].seed), (16.0, 1e-3, 0));
        assert_eq!((g[7].alpha, g[7].lambda, g[7].seed), (32.0, 2e-3, 1));
        assert!(g.iter().enumerate().all(|(i, p)| p.index == i));
    }

    #[test]
    fn exact_linear_transitions_fit_perfectly() {
        let mut transitions = Vec::new();
        for &alpha in &[16.0_f64, 32.0, 64.0, 128.0] {
            for &lambda in &[1e-3, 2e-3] {
                let x = alpha.ln() / lambda;
                transitions.push(TransitionPoint { alpha, lambda, seed: 0, predictor: x, t_star: Some(x), usable: true });
            }
        }
        let report = SweepReport { experiment: Experiment::Custom, master_seed: 0, runs: vec![], transitions, fit: None };
        let fit = fit_transition_scaling(&report).unwrap();
        assert!((fit.slope - 1.0).abs() < 1e-12 && (fit.r2 - 1.0).abs() < 1e-12 && fit.intercept.abs() < 1e-8);
    }

    #[test]
    fn too_few_points_are_rejected() {
        let transitions = (0..3)
            .map(|i| TransitionPoint { alpha: 2.0 + i as f64, lambda: 1.0, seed: 0, predictor: i as f64, t_star: Some(1.0), usable: true })
            .collect();
        let report = SweepReport { experiment: Experiment::Custom, master_seed: 0, runs: vec![], transitions, fit: None };
        assert!(fit_transition_scaling(&report).is_err());
    }
}
