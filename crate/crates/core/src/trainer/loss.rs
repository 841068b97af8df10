//! Pointwise losses and the regularized empirical objective.

use serde::{Deserialize, Serialize};

use crate::data::{Split, Task};
use crate::error::{Error, Result};
use crate::model::{HomogeneousModel, ParamVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// `exp(-y f)`.
    Exponential,
    /// `log(1 + exp(-y f))`.
    Logistic,
    /// `(f - y)^2`.
    Squared,
    /// Softmax cross-entropy over the logits, label is a class index.
    CrossEntropy,
}

impl LossKind {
    pub fn check_task(self, task: Task) -> Result<()> {
        let ok = match self {
            LossKind::Exponential | LossKind::Logistic => task == Task::BinaryCls,
            LossKind::Squared => matches!(task, Task::Regression | Task::BinaryCls),
            LossKind::CrossEntropy => matches!(task, Task::MultiClass { .. }),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("{self:?} loss cannot be used for task {task:?}")))
        }
    }

    pub fn output_dim_ok(self, k: usize) -> bool {
        match self {
            LossKind::CrossEntropy => k >= 2,
            _ => k == 1,
        }
    }
}

/// Mean loss over a split together with per-sample derivatives.
#[derive(Debug, Clone)]
pub struct DataTerm {
    /// Mean loss; may under/overflow for the exponential loss.
    pub loss: f64,
    /// Natural log of the mean loss, always finite when the loss is positive.
    pub log_loss: f64,
    /// `d loss_i / d f_i` divided by `n`, row-major `n x output_dim`.
    pub coef: Vec<f64>,
    /// `d^2 loss_i / d f_i^2` (scalar losses only, empty otherwise).
    pub curvature: Vec<f64>,
    /// Model outputs, row-major `n x output_dim`.
    pub outputs: Vec<f64>,
}

/// Evaluates the data term of the objective.
pub fn data_term(model: &HomogeneousModel, theta: &ParamVector, data: &Split, loss: LossKind) -> Result<DataTerm> {
    let k = model.output_dim();
    if !loss.output_dim_ok(k) {
        return Err(Error::config(format!("{loss:?} loss does not fit a model with {k} outputs")));
    }
    let n = data.len();
    if n == 0 {
        return Ok(DataTerm {
            loss: 0.0,
            log_loss: f64::NEG_INFINITY,
            coef: Vec::new(),
            curvature: Vec::new(),
            outputs: Vec::new(),
        });
    }
    let outputs = model.outputs(theta, &data.x)?;
    Ok(data_term_from_outputs(outputs, data, loss, k))
}

pub(crate) fn data_term_from_outputs(outputs: Vec<f64>, data: &Split, loss: LossKind, k: usize) -> DataTerm {
    let n = data.len();
    let nf = n as f64;
    let mut coef = vec![0.0; n * k];
    let mut curvature = Vec::new();
    let (loss_value, log_loss) = match loss {
        LossKind::Exponential => {
            let q: Vec<f64> = outputs.iter().zip(&data.y).map(|(f, y)| y * f).collect();
            let m = q.iter().copied().fold(f64::INFINITY, f64::min);
            let shifted = q.iter().map(|qi| (-(qi - m)).exp()).sum::<f64>() / nf;
            let log_loss = -m + shifted.ln();
            curvature = q.iter().map(|qi| (-qi).exp()).collect();
            for i in 0..n {
                coef[i] = -data.y[i] * curvature[i] / nf;
            }
            (log_loss.exp(), log_loss)
        }
        LossKind::Logistic => {
            let mut total = 0.0;
            curvature.reserve(n);
            for i in 0..n {
                let q = data.y[i] * outputs[i];
                total += softplus(-q);
                let s = sigmoid(-q);
                coef[i] = -data.y[i] * s / nf;
                curvature.push(s * sigmoid(q));
            }
            let l = total / nf;
            (l, l.ln())
        }
        LossKind::Squared => {
            let mut total = 0.0;
            for i in 0..n {
                let r = outputs[i] - data.y[i];
                total += r * r;
                coef[i] = 2.0 * r / nf;
            }
            curvature = vec![2.0; n];
            let l = total / nf;
            (l, l.ln())
        }
        LossKind::CrossEntropy => {
            let mut total = 0.0;
            for i in 0..n {
                let z = &outputs[i * k..(i + 1) * k];
                let c = data.y[i] as usize;
                let mx = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let se: f64 = z.iter().map(|v| (v - mx).exp()).sum();
                total += mx + se.ln() - z[c];
                for j in 0..k {
                    let pj = (z[j] - mx).exp() / se;
                    coef[i * k + j] = (pj - if j == c { 1.0 } else { 0.0 }) / nf;
                }
            }
            let l = total / nf;
            (l, l.ln())
        }
    };
    DataTerm { loss: loss_value, log_loss, coef, curvature, outputs }
}

/// `L_lambda(theta) = L(theta) + lambda/2 ||theta||^2` and its gradient.
#[derive(Debug, Clone)]
pub struct LossEval {
    pub loss: f64,
    pub log_loss: f64,
    pub reg_loss: f64,
    pub grad: ParamVector,
}

pub fn loss_and_grad(
    model: &HomogeneousModel,
    theta: &ParamVector,
    data: &Split,
    loss: LossKind,
    lambda: f64,
) -> Result<LossEval> {
    let term = data_term(model, theta, data, loss)?;
    let mut grad = model.zeros();
    model.pullback(theta, &data.x, &term.coef, &mut grad.data)?;
    if lambda != 0.0 {
        grad.data.iter_mut().zip(&theta.data).for_each(|(g, t)| *g += lambda * t);
    }
    let reg_loss = term.loss + 0.5 * lambda * theta.dot(theta);
    Ok(LossEval { loss: term.loss, log_loss: term.log_loss, reg_loss, grad })
}

/// Accuracy and minimum margin of precomputed outputs.
pub fn accuracy_and_margin(task: Task, outputs: &[f64], y: &[f64]) -> (f64, f64) {
    let n = y.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    match task {
        Task::Regression => (f64::NAN, f64::NAN),
        Task::BinaryCls => {
            let mut correct = 0usize;
            let mut margin = f64::INFINITY;
            for (f, yi) in outputs.iter().zip(y) {
                let q = f * yi;
                if q > 0.0 {
                    correct += 1;
                }
                margin = margin.min(q);
            }
            (correct as f64 / n as f64, margin)
        }
        Task::MultiClass { classes } => {
            let mut correct = 0usize;
            let mut margin = f64::INFINITY;
            for (z, yi) in outputs.chunks_exact(classes).zip(y) {
                let c = *yi as usize;
                let rival = z
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| *j != c)
                    .map(|(_, v)| *v)
                    .fold(f64::NEG_INFINITY, f64::max);
                let q = z[c] - rival;
                if q > 0.0 {
                    correct += 1;
                }
                margin = margin.min(q);
            }
            (correct as f64 / n as f64, margin)
        }
    }
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Input;

    fn one_point(f: f64, y: f64) -> (HomogeneousModel, ParamVector, Split) {
        // u^2 x with u = 1, v = 0 and x = f gives output f.
        let m = HomogeneousModel::diagonal(1).unwrap();
        let t = m.params(vec![1.0, 0.0]).unwrap();
        (m, t, Split::new(vec![Input::Dense(vec![f])], vec![y]).unwrap())
    }

    #[test]
    fn exponential_examples() {
        let (m, t, s) = one_point(0.0, 1.0);
        assert_eq!(data_term(&m, &t, &s, LossKind::Exponential).unwrap().loss, 1.0);
        let (m, t, s) = one_point(2f64.ln(), 1.0);
        let l = data_term(&m, &t, &s, LossKind::Exponential).unwrap().loss;
        assert!((l - 0.5).abs() < 1e-15);
    }

    #[test]
    fn exponential_reports_log_when_underflowing() {
        let (m, t, s) = one_point(2000.0, 1.0);
        let d = data_term(&m, &t, &s, LossKind::Exponential).unwrap();
        assert_eq!(d.loss, 0.0);
        assert!((d.log_loss + 2000.0).abs() < 1e-9);
    }

    #[test]
    fn squared_perfect_fit_leaves_only_decay() {
        let (m, t, s) = one_point(3.0, 3.0);
        let e = loss_and_grad(&m, &t, &s, LossKind::Squared, 0.1).unwrap();
        assert_eq!(e.loss, 0.0);
        assert_eq!(e.grad.data, vec![0.1, 0.0]);
        assert!((e.reg_loss - 0.05).abs() < 1e-15);
    }

    #[test]
    fn logistic_is_stable() {
        let (m, t, s) = one_point(-800.0, 1.0);
        let d = data_term(&m, &t, &s, LossKind::Logistic).unwrap();
        assert!((d.loss - 800.0).abs() < 1e-9);
        assert!((d.coef[0] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_gradient_matches_softmax() {
        let m = HomogeneousModel::two_layer_relu(3, 4).unwrap();
        let t = m.make_init(1.0, 0.0, 0).unwrap();
        let s = Split::new(vec![Input::Pair(0, 1)], vec![1.0]).unwrap();
        let d = data_term(&m, &t, &s, LossKind::CrossEntropy).unwrap();
        assert!((d.loss - 3f64.ln()).abs() < 1e-12);
        let third = 1.0 / 3.0;
        assert!((d.coef[0] - third).abs() < 1e-12 && (d.coef[1] - (third - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn task_compatibility() {
        assert!(LossKind::Exponential.check_task(Task::Regression).is_err());
        assert!(LossKind::CrossEntropy.check_task(Task::MultiClass { classes: 3 }).is_ok());
        assert!(LossKind::Squared.check_task(Task::Regression).is_ok());
    }

    #[test]
    fn ties_count_as_errors() {
        let (acc, margin) = accuracy_and_margin(Task::BinaryCls, &[0.0, 1.0], &[1.0, 1.0]);
        assert_eq!(acc, 0.5);
        assert_eq!(margin, 0.0);
        let (acc, _) = accuracy_and_margin(Task::MultiClass { classes: 2 }, &[1.0, 1.0], &[0.0]);
        assert_eq!(acc, 0.0);
    }
}
