//! Deterministic SVG line charts.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::SweepReport;
use crate::diagnostics::BoundCurve;
use crate::error::Result;
use crate::trainer::TrajectoryLog;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;
const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

struct Series {
    name: String,
    points: Vec<(f64, f64)>,
    markers: bool,
}

#[derive(Clone, Copy)]
struct Axis {
    log: bool,
    lo: f64,
    hi: f64,
}

impl Axis {
    fn fit(values: impl Iterator<Item = f64>, log: bool) -> Self {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in values {
            let v = if log { v.log10() } else { v };
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if !lo.is_finite() {
            (lo, hi) = (0.0, 1.0);
        }
        if hi - lo < 1e-12 {
            lo -= 0.5;
            hi += 0.5;
        }
        Self { log, lo, hi }
    }

    fn unit(&self, v: f64) -> f64 {
        let v = if self.log { v.log10() } else { v };
        (v - self.lo) / (self.hi - self.lo)
    }

    fn ticks(&self) -> Vec<(f64, String)> {
        if self.log {
            let (a, b) = (self.lo.ceil() as i64, self.hi.floor() as i64);
            let step = ((b - a) / 8 + 1).max(1);
            (a..=b).step_by(step as usize).map(|e| (10f64.powi(e as i32), format!("1e{e}"))).collect()
        } else {
            (0..=4)
                .map(|k| {
                    let v = self.lo + (self.hi - self.lo) * k as f64 / 4.0;
                    (v, format!("{}", (v * 1000.0).round() / 1000.0))
                })
                .collect()
        }
    }
}

fn keep(p: &(f64, f64), lx: bool, ly: bool) -> bool {
    p.0.is_finite() && p.1.is_finite() && (!lx || p.0 > 0.0) && (!ly || p.1 > 0.0)
}

fn chart(title: &str, xlabel: &str, ylabel: &str, series: &[Series], log_x: bool, log_y: bool) -> String {
    let series: Vec<Series> = series
        .iter()
        .map(|s| Series {
            name: s.name.clone(),
            points: s.points.iter().copied().filter(|p| keep(p, log_x, log_y)).collect(),
            markers: s.markers,
        })
        .collect();
    let all = || series.iter().flat_map(|s| s.points.iter());
    let xa = Axis::fit(all().map(|p| p.0), log_x);
    let ya = Axis::fit(all().map(|p| p.1), log_y);
    let (pw, ph) = (WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM);
    let px = |x: f64| LEFT + pw * xa.unit(x);
    let py = |y: f64| TOP + ph * (1.0 - ya.unit(y));

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{:.1}" y="24" text-anchor="middle" font-size="15" font-family="sans-serif">{}</text>"#, WIDTH / 2.0, title);
    let _ = writeln!(s, r#"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#);
    for (v, label) in xa.ticks() {
        let x = px(v);
        let _ = writeln!(s, r#"<line x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{:.2}" stroke="black"/>"#, TOP + ph, TOP + ph + 5.0);
        let _ = writeln!(s, r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle" font-size="11" font-family="sans-serif">{label}</text>"#, TOP + ph + 18.0);
    }
    for (v, label) in ya.ticks() {
        let y = py(v);
        let _ = writeln!(s, r#"<line x1="{:.2}" y1="{y:.2}" x2="{LEFT}" y2="{y:.2}" stroke="black"/>"#, LEFT - 5.0);
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="end" font-size="11" font-family="sans-serif">{label}</text>"#, LEFT - 8.0, y + 4.0);
    }
    let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="12" font-family="sans-serif">{xlabel}</text>"#, LEFT + pw / 2.0, HEIGHT - 10.0);
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.1}" text-anchor="middle" font-size="12" font-family="sans-serif" transform="rotate(-90 16 {:.1})">{ylabel}</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0
    );
    for (k, ser) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        if ser.markers {
            for &(x, y) in &ser.points {
                let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#, px(x), py(y));
            }
        } else {
            let pts: Vec<String> = ser.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
            let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, pts.join(" "));
        }
        let ly = TOP + 14.0 + 16.0 * k as f64;
        let _ = writeln!(s, r#"<rect x="{:.1}" y="{:.1}" width="12" height="3" fill="{color}"/>"#, LEFT + 10.0, ly - 4.0);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{ly:.1}" font-size="11" font-family="sans-serif">{}</text>"#, LEFT + 26.0, ser.name);
    }
    s.push_str("</svg>\n");
    s
}

fn column(log: &TrajectoryLog, metric: &str) -> Series {
    Series { name: metric.to_string(), points: log.series(metric).unwrap_or_default(), markers: false }
}

fn write(path: PathBuf, body: String, files: &mut Vec<PathBuf>) -> Result<()> {
    fs::write(&path, body)?;
    files.push(path);
    Ok(())
}

/// Accuracy and loss charts against time (log-x), plus the simulated loss
/// overlaid on `bound` when given.
pub fn emit_plots(log: &TrajectoryLog, bound: Option<&BoundCurve>, out_dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir)?;
    let mut files = Vec::new();
    let acc = [column(log, "train_acc"), column(log, "test_acc")];
    write(out_dir.join(format!("{stem}_accuracy.svg")), chart("Accuracy", "time", "accuracy", &acc, true, false), &mut files)?;
    let loss = [column(log, "train_loss"), column(log, "test_loss")];
    let positive = loss.iter().flat_map(|s| &s.points).all(|p| !p.1.is_finite() || p.1 > 0.0);
    write(out_dir.join(format!("{stem}_loss.svg")), chart("Loss", "time", "loss", &loss, true, positive), &mut files)?;
    if let Some(b) = bound {
        let overlay = [
            column(log, "train_loss"),
            Series {
                name: "upper bound".into(),
                points: b.times.iter().copied().zip(b.values.iter().copied()).collect(),
                markers: false,
            },
        ];
        write(out_dir.join(format!("{stem}_bound.svg")), chart("Loss and upper bound", "time", "loss", &overlay, true, true), &mut files)?;
    }
    Ok(files)
}

/// Measured transition times against `(1/lambda) log(alpha)`, with the fitted
/// line when available.
pub fn emit_report_plots(report: &SweepReport, out_dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir)?;
    let pts: Vec<(f64, f64)> = report.transitions.iter().filter_map(|p| p.t_star.map(|t| (p.predictor, t))).collect();
    let mut files = Vec::new();
    if pts.is_empty() {
        return Ok(files);
    }
    let mut series = vec![Series { name: "t*".into(), points: pts.clone(), markers: true }];
    if let Some(fit) = report.fit {
        let (lo, hi) = pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.0), b.max(p.0)));
        series.push(Series {
            name: format!("fit slope {:.3}, R2 {:.3}", fit.slope, fit.r2),
            points: vec![(lo, fit.intercept + fit.slope * lo), (hi, fit.intercept + fit.slope * hi)],
            markers: false,
        });
    }
    let body = chart("Transition time", "log(alpha) / lambda", "t*", &series, false, false);
    write(out_dir.join("scaling.svg"), body, &mut files)?;
    Ok(files)
}
