use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use grokking_core::diagnostics::{kkt_residual_r1, kkt_residual_r2, nuclear_subgrad_certificate, Certificate};
use grokking_core::ntk::{build_kernel_system, solve_kernel_regression, solve_kernel_svm};
use grokking_core::refsolve::{generalization_bound, solve_l1_max_margin, solve_l2_max_margin, solve_min_nuclear, CompletionSolution, NormKind};
use grokking_core::runner::{emit_plots, emit_report_plots, infer_model, run_experiment, run_point, Experiment, ExperimentConfig, SweepReport};
use grokking_core::{Error, HomogeneousModel, InitSpec, LabeledDataset, ModelKind, ParamVector, Task, TrajectoryLog};

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_DIVERGED: u8 = 3;
const EXIT_CERTIFICATE: u8 = 4;

#[derive(Parser)]
#[command(name = "grokking-lab", version, about = "Simulate, solve and certify grokking in homogeneous models")]
struct Cli {
    /// Worker threads for parallel sweeps (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a single grid point and write its log, summary, parameters and plots.
    Train {
        #[command(flatten)]
        exp: ExperimentArgs,
        /// Grid index to run.
        #[arg(long, default_value_t = 0)]
        run: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every grid point and aggregate the transition times.
    Sweep {
        #[command(flatten)]
        exp: ExperimentArgs,
        #[arg(long)]
        out: PathBuf,
        /// Also write per-run accuracy and loss charts.
        #[arg(long)]
        plots: bool,
    },
    /// Solve the kernel max-margin (classification) or min-norm interpolation
    /// (regression) problem at the unit-scale initialization.
    KernelSolve {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Optional config supplying the hidden width of ReLU networks.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Seed of the initialization direction.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Solve a rich-regime reference problem.
    RefSolve {
        #[arg(long, value_enum)]
        problem: Problem,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check first-order optimality of trained parameters or a completion.
    Certify {
        #[arg(long, value_enum)]
        kind: CertKind,
        /// Parameter vector JSON, or a nuclear-norm completion for `nuclear`.
        #[arg(long)]
        theta: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Weight decay (r2) or penalty (nuclear; defaults to twice the
        /// completion's final tau).
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        tolerance: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the test-error bound of the L1 or L2 max-margin classifier.
    Bounds {
        #[arg(long)]
        k: f64,
        #[arg(long)]
        d: f64,
        #[arg(long)]
        n: f64,
        #[arg(long, default_value_t = 0.05)]
        delta: f64,
        #[arg(long, value_enum)]
        norm: Norm,
    },
    /// Render charts from a metrics CSV, a run summary or a sweep report.
    Plot {
        /// `metrics.csv` of a run.
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// `summary.json` of the same run, for the bound overlay.
        #[arg(long)]
        summary: Option<PathBuf>,
        /// `report.json` of a sweep.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "run")]
        stem: String,
    },
}

#[derive(Args)]
struct ExperimentArgs {
    /// TOML experiment config.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in configuration.
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    /// Use the full-size variant of the preset.
    #[arg(long, requires = "preset")]
    full_scale: bool,
    /// Override the master seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    ModAdd,
    SparseGrok,
    Misgrok,
    MatrixCompletion,
}

#[derive(Clone, Copy, ValueEnum)]
enum Problem {
    L1,
    L2,
    Nuclear,
}

#[derive(Clone, Copy, ValueEnum)]
enum CertKind {
    R1,
    R2,
    Nuclear,
}

#[derive(Clone, Copy, ValueEnum)]
enum Norm {
    L1,
    L2,
}

/// Failure with its exit status.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = if e.is_config() { EXIT_CONFIG } else { EXIT_FAILURE };
        Self { code, message: e.to_string() }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::from(e).into()
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Self { code: EXIT_CONFIG, message: e.to_string() }
    }
}

type CliResult<T = ()> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_FAILURE);
        }
    }
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            if !f.message.is_empty() {
                eprintln!("error: {}", f.message);
            }
            ExitCode::from(f.code)
        }
    }
}

fn dispatch(command: Command) -> CliResult {
    match command {
        Command::Train { exp, run, out } => train(&exp.load()?, run, &out),
        Command::Sweep { exp, out, plots } => sweep(&exp.load()?, &out, plots),
        Command::KernelSolve { data, out, config, seed } => kernel_solve(&data, &out, config.as_deref(), seed),
        Command::RefSolve { problem, data, out } => ref_solve(problem, &data, &out),
        Command::Certify { kind, theta, data, lambda, tolerance, out } => certify(kind, &theta, &data, lambda, tolerance, out.as_deref()),
        Command::Bounds { k, d, n, delta, norm } => {
            let norm = match norm {
                Norm::L1 => NormKind::L1,
                Norm::L2 => NormKind::L2,
            };
            println!("{}", generalization_bound(k, d, n, delta, norm)?);
            Ok(())
        }
        Command::Plot { metrics, summary, report, out, stem } => plot(metrics.as_deref(), summary.as_deref(), report.as_deref(), &out, &stem),
    }
}

impl ExperimentArgs {
    fn load(&self) -> CliResult<ExperimentConfig> {
        let mut cfg = match (&self.config, self.preset) {
            (Some(path), _) => ExperimentConfig::load(path)?,
            (None, Some(p)) => {
                let e = match p {
                    Preset::ModAdd => Experiment::ModAdd,
                    Preset::SparseGrok => Experiment::SparseGrok,
                    Preset::Misgrok => Experiment::Misgrok,
                    Preset::MatrixCompletion => Experiment::MatrixCompletion,
                };
                if self.full_scale {
                    ExperimentConfig::full_scale(e)
                } else {
                    ExperimentConfig::preset(e)
                }
            }
            (None, None) => return Err(Error::Config("pass --config or --preset".into()).into()),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> CliResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn train(cfg: &ExperimentConfig, run: usize, out: &Path) -> CliResult {
    let grid = cfg.grid()?;
    let point = grid
        .get(run)
        .ok_or_else(|| Error::Config(format!("grid has {} points, --run {run} is out of range", grid.len())))?;
    let output = run_point(cfg, point)?;
    fs::create_dir_all(out)?;
    output.log.save_csv(&out.join("metrics.csv"))?;
    write_json(&out.join("summary.json"), &output.summary)?;
    if let Some(theta) = &output.log.final_theta {
        write_json(&out.join("theta.json"), theta)?;
    }
    emit_plots(&output.log, output.summary.bounds.as_ref().map(|b| &b.curve), out, "run")?;
    for e in &output.summary.errors {
        eprintln!("warning: {e}");
    }
    let s = &output.summary;
    println!(
        "t = {:.6e}: train acc {:.4}, test acc {:.4}, train loss {:.4e}, test loss {:.4e}",
        s.final_time, s.final_train_acc, s.final_test_acc, s.final_train_loss, s.final_test_loss
    );
    if s.diverged {
        let reason = s.divergence.clone().unwrap_or_else(|| "non-finite state".into());
        return Err(Failure { code: EXIT_DIVERGED, message: format!("run diverged: {reason}") });
    }
    Ok(())
}

fn sweep(cfg: &ExperimentConfig, out: &Path, plots: bool) -> CliResult {
    let report = run_experiment(cfg, Some(out))?;
    emit_report_plots(&report, out)?;
    if plots {
        for r in &report.runs {
            let dir = out.join(format!("run_{:03}", r.point.index));
            let log = TrajectoryLog::load_csv(&dir.join("metrics.csv"))?;
            emit_plots(&log, r.bounds.as_ref().map(|b| &b.curve), &dir, "run")?;
        }
    }
    for t in &report.transitions {
        let t_star = t.t_star.map_or("none".to_string(), |v| format!("{v:.6e}"));
        println!("alpha {} lambda {} seed {}: t* {t_star}", t.alpha, t.lambda, t.seed);
    }
    if let Some(fit) = report.fit {
        println!("fit: slope {:.4}, intercept {:.4e}, R^2 {:.4}", fit.slope, fit.intercept, fit.r2);
    }
    let diverged = report.runs.iter().filter(|r| r.diverged).count();
    if diverged > 0 {
        eprintln!("warning: {diverged} of {} runs diverged", report.runs.len());
    }
    Ok(())
}

fn kernel_solve(data: &Path, out: &Path, config: Option<&Path>, seed: u64) -> CliResult {
    let dataset = LabeledDataset::load_json(data)?;
    let hidden = match config {
        Some(p) => ExperimentConfig::load(p)?.model.hidden.unwrap_or(128),
        None => 128,
    };
    let model = infer_model(&dataset, hidden)?;
    let dataset = if matches!(model.kind(), ModelKind::MatrixFactorization { .. }) { dataset.symmetric_dedup() } else { dataset };
    let base = InitSpec::new(&model, 1.0, 0.0, seed)?.base;
    let system = build_kernel_system(&model, &base, &dataset)?;
    let sol = match dataset.task {
        Task::BinaryCls => solve_kernel_svm(&system)?,
        Task::Regression => solve_kernel_regression(&system)?,
        Task::MultiClass { .. } => return Err(Error::Config("kernel problems need binary or regression targets".into()).into()),
    };
    write_json(out, &sol)
}

fn ref_solve(problem: Problem, data: &Path, out: &Path) -> CliResult {
    let dataset = LabeledDataset::load_json(data)?;
    match problem {
        Problem::L1 => write_json(out, &solve_l1_max_margin(&dataset)?),
        Problem::L2 => write_json(out, &solve_l2_max_margin(&dataset)?),
        Problem::Nuclear => write_json(out, &solve_min_nuclear(&dataset)?),
    }
}

fn certify(kind: CertKind, theta: &Path, data: &Path, lambda: Option<f64>, tolerance: Option<f64>, out: Option<&Path>) -> CliResult {
    let dataset = LabeledDataset::load_json(data)?;
    let text = fs::read_to_string(theta)?;
    let cert: Certificate = match kind {
        CertKind::R1 => {
            let theta: ParamVector = serde_json::from_str(&text)?;
            kkt_residual_r1(&HomogeneousModel::new(theta.model)?, &theta, &dataset, tolerance.unwrap_or(0.05))?
        }
        CertKind::R2 => {
            let theta: ParamVector = serde_json::from_str(&text)?;
            let lambda = lambda.ok_or_else(|| Error::Config("r2 certificates need --lambda".into()))?;
            kkt_residual_r2(&HomogeneousModel::new(theta.model)?, &theta, &dataset, lambda, tolerance.unwrap_or(0.05))?
        }
        CertKind::Nuclear => {
            let tol = tolerance.unwrap_or(1e-4);
            if let Ok(sol) = serde_json::from_str::<CompletionSolution>(&text) {
                nuclear_subgrad_certificate(&sol.matrix(), &dataset, lambda.unwrap_or(2.0 * sol.tau), tol)?
            } else {
                let theta: ParamVector = serde_json::from_str(&text)?;
                let lambda = lambda.ok_or_else(|| Error::Config("nuclear certificates of parameters need --lambda".into()))?;
                let w = HomogeneousModel::new(theta.model)?.product_matrix(&theta)?;
                nuclear_subgrad_certificate(&w, &dataset, lambda, tol)?
            }
        }
    };
    let body = serde_json::to_string_pretty(&cert)?;
    if let Some(path) = out {
        write_json(path, &cert)?;
    }
    println!("{body}");
    if cert.passed {
        Ok(())
    } else {
        Err(Failure { code: EXIT_CERTIFICATE, message: String::new() })
    }
}

fn plot(metrics: Option<&Path>, summary: Option<&Path>, report: Option<&Path>, out: &Path, stem: &str) -> CliResult {
    if metrics.is_none() && report.is_none() {
        return Err(Error::Config("pass --metrics or --report".into()).into());
    }
    let mut files = Vec::new();
    if let Some(m) = metrics {
        let log = TrajectoryLog::load_csv(m)?;
        let summary: Option<grokking_core::runner::RunSummary> = match summary {
            Some(p) => Some(serde_json::from_str(&fs::read_to_string(p)?)?),
            None => None,
        };
        let bound = summary.as_ref().and_then(|s| s.bounds.as_ref()).map(|b| &b.curve);
        files.extend(emit_plots(&log, bound, out, stem)?);
    }
    if let Some(r) = report {
        let report: SweepReport = serde_json::from_str(&fs::read_to_string(r)?)?;
        files.extend(emit_report_plots(&report, out)?);
    }
    for f in files {
        println!("{}", f.display());
    }
    Ok(())
}
