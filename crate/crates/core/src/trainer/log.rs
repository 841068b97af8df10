//! Trajectory logs and their CSV form.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ParamVector;

/// Column names of `metrics.csv`, in order.
pub const CSV_COLUMNS: [&str; 10] = [
    "step",
    "time",
    "train_loss",
    "reg_loss",
    "train_acc",
    "test_acc",
    "test_loss",
    "param_norm",
    "dir_dist",
    "min_margin",
];

/// One logged point of a trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: u64,
    pub time: f64,
    pub train_loss: f64,
    pub reg_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub test_loss: f64,
    pub param_norm: f64,
    pub dir_dist: f64,
    pub min_margin: f64,
    /// Natural log of the training loss (finite even when the loss underflows).
    #[serde(default = "nan")]
    pub log_train_loss: f64,
    /// `||grad L_lambda||`.
    #[serde(default = "nan")]
    pub grad_norm: f64,
}

fn nan() -> f64 {
    f64::NAN
}

impl LogRow {
    /// Value of a named metric column.
    pub fn metric(&self, name: &str) -> Option<f64> {
        Some(match name {
            "step" => self.step as f64,
            "time" => self.time,
            "train_loss" => self.train_loss,
            "reg_loss" => self.reg_loss,
            "train_acc" => self.train_acc,
            "test_acc" => self.test_acc,
            "test_loss" => self.test_loss,
            "param_norm" => self.param_norm,
            "dir_dist" => self.dir_dist,
            "min_margin" => self.min_margin,
            "log_train_loss" => self.log_train_loss,
            "grad_norm" => self.grad_norm,
            _ => return None,
        })
    }
}

/// Time-indexed metrics of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryLog {
    pub rows: Vec<LogRow>,
    pub diverged: bool,
    pub divergence: Option<String>,
    /// The step budget ran out before `max_time`.
    pub truncated: bool,
    pub steps: u64,
    pub final_theta: Option<ParamVector>,
}

impl TrajectoryLog {
    pub fn from_rows(rows: Vec<LogRow>) -> Self {
        let steps = rows.last().map_or(0, |r| r.step);
        Self { rows, diverged: false, divergence: None, truncated: false, steps, final_theta: None }
    }

    pub fn last(&self) -> Option<&LogRow> {
        self.rows.last()
    }

    /// `(time, value)` pairs of a metric; `None` for an unknown column.
    pub fn series(&self, metric: &str) -> Option<Vec<(f64, f64)>> {
        LogRow::metric(&self.rows.first().copied().unwrap_or_else(empty_row), metric)?;
        Some(self.rows.iter().map(|r| (r.time, r.metric(metric).unwrap_or(f64::NAN))).collect())
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(CSV_COLUMNS)?;
        for r in &self.rows {
            let mut rec = vec![r.step.to_string()];
            for name in &CSV_COLUMNS[1..] {
                rec.push(fmt_f64(r.metric(name).unwrap_or(f64::NAN)));
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(f))
    }

    /// Reads rows back from `metrics.csv`; columns beyond the standard set are
    /// ignored and missing extras become NaN.
    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(input);
        let headers = rd.headers()?.clone();
        let idx = |name: &str| {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::config(format!("metrics file lacks column {name}")))
        };
        let cols: Vec<usize> = CSV_COLUMNS.iter().map(|c| idx(c)).collect::<Result<_>>()?;
        let mut rows = Vec::new();
        for rec in rd.records() {
            let rec = rec?;
            let num = |k: usize| -> Result<f64> {
                let s = rec.get(cols[k]).unwrap_or("");
                s.parse::<f64>().map_err(|_| Error::config(format!("bad number {s:?} in column {}", CSV_COLUMNS[k])))
            };
            rows.push(LogRow {
                step: num(0)? as u64,
                time: num(1)?,
                train_loss: num(2)?,
                reg_loss: num(3)?,
                train_acc: num(4)?,
                test_acc: num(5)?,
                test_loss: num(6)?,
                param_norm: num(7)?,
                dir_dist: num(8)?,
                min_margin: num(9)?,
                log_train_loss: f64::NAN,
                grad_norm: f64::NAN,
            });
        }
        Ok(Self::from_rows(rows))
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?)
    }
}

/// Shortest round-trip representation; NaN and infinities spelled out.
pub fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v:?}")
    }
}

fn empty_row() -> LogRow {
    LogRow {
        step: 0,
        time: 0.0,
        train_loss: f64::NAN,
        reg_loss: f64::NAN,
        train_acc: f64::NAN,
        test_acc: f64::NAN,
        test_loss: f64::NAN,
        param_norm: f64::NAN,
        dir_dist: f64::NAN,
        min_margin: f64::NAN,
        log_train_loss: f64::NAN,
        grad_norm: f64::NAN,
    }
}
