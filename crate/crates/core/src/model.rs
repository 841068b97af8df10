//! The 2-homogeneous models: a two-layer ReLU net on one-hot pairs, the
//! diagonal linear net and symmetric matrix factorization.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Architecture of a homogeneous model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelKind {
    /// `W2 ReLU(W1 x + b1)` on concatenated one-hots of `(a, b)`, `p` logits.
    TwoLayerRelu { p: usize, hidden: usize },
    /// `f = sum_k (u_k^2 - v_k^2) x_k`.
    DiagonalLinear { dim: usize },
    /// `f = <P_x, U U^T - V V^T>` with symmetrized indicator `P_x`.
    MatrixFactorization { dim: usize },
}

/// A single model input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Input {
    Dense(Vec<f64>),
    /// Index pair: `(a, b)` operands for the ReLU net, `(i, j)` entry for
    /// matrix factorization.
    Pair(usize, usize),
}

/// Model descriptor. Cheap to copy and safe to share between threads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct HomogeneousModel {
    kind: ModelKind,
}

/// Flat parameter vector bound to the model that interprets it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub model: ModelKind,
    pub data: Vec<f64>,
}

/// Initialization `alpha * base`, optionally perturbed (matrix factorization
/// only).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitSpec {
    pub base: ParamVector,
    pub alpha: f64,
    pub sigma: f64,
    pub seed: u64,
}

impl HomogeneousModel {
    pub fn new(kind: ModelKind) -> Result<Self> {
        let ok = match kind {
            ModelKind::TwoLayerRelu { p, hidden } => p >= 2 && hidden >= 1,
            ModelKind::DiagonalLinear { dim } | ModelKind::MatrixFactorization { dim } => dim >= 1,
        };
        if !ok {
            return Err(Error::config(format!("invalid model dimensions {kind:?}")));
        }
        Ok(Self { kind })
    }

    pub fn two_layer_relu(p: usize, hidden: usize) -> Result<Self> {
        Self::new(ModelKind::TwoLayerRelu { p, hidden })
    }

    pub fn diagonal(dim: usize) -> Result<Self> {
        Self::new(ModelKind::DiagonalLinear { dim })
    }

    pub fn factorization(dim: usize) -> Result<Self> {
        Self::new(ModelKind::MatrixFactorization { dim })
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    /// Homogeneity degree; every supported model is quadratic in its
    /// parameters.
    pub fn degree(&self) -> u32 {
        2
    }

    pub fn param_count(&self) -> usize {
        match self.kind {
            ModelKind::TwoLayerRelu { p, hidden } => hidden * 2 * p + hidden + p * hidden,
            ModelKind::DiagonalLinear { dim } => 2 * dim,
            ModelKind::MatrixFactorization { dim } => 2 * dim * dim,
        }
    }

    pub fn output_dim(&self) -> usize {
        match self.kind {
            ModelKind::TwoLayerRelu { p, .. } => p,
            _ => 1,
        }
    }

    pub fn params(&self, data: Vec<f64>) -> Result<ParamVector> {
        if data.len() != self.param_count() {
            return Err(Error::shape(format!(
                "parameter vector has length {}, model expects {}",
                data.len(),
                self.param_count()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::shape(format!("parameter {i} is not finite")));
        }
        Ok(ParamVector { model: self.kind, data })
    }

    pub fn zeros(&self) -> ParamVector {
        ParamVector { model: self.kind, data: vec![0.0; self.param_count()] }
    }

    fn check_theta(&self, theta: &ParamVector) -> Result<()> {
        if theta.model != self.kind || theta.data.len() != self.param_count() {
            return Err(Error::shape(format!(
                "parameters for {:?} passed to {:?}",
                theta.model, self.kind
            )));
        }
        Ok(())
    }

    pub fn check_input(&self, x: &Input) -> Result<()> {
        let ok = match (self.kind, x) {
            (ModelKind::TwoLayerRelu { p, .. }, Input::Pair(a, b)) => *a < p && *b < p,
            (ModelKind::TwoLayerRelu { p, .. }, Input::Dense(v)) => v.len() == 2 * p,
            (ModelKind::DiagonalLinear { dim }, Input::Dense(v)) => v.len() == dim,
            (ModelKind::MatrixFactorization { dim }, Input::Pair(i, j)) => *i < dim && *j < dim,
            _ => false,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::shape(format!("input {x:?} does not fit model {:?}", self.kind)))
        }
    }

    fn check_batch(&self, theta: &ParamVector, xs: &[Input]) -> Result<()> {
        self.check_theta(theta)?;
        xs.iter().try_for_each(|x| self.check_input(x))
    }

    /// Model output on a single input.
    pub fn forward(&self, theta: &ParamVector, x: &Input) -> Result<Vec<f64>> {
        self.outputs(theta, std::slice::from_ref(x))
    }

    /// Scalar output (first logit for multi-output models).
    pub fn forward_scalar(&self, theta: &ParamVector, x: &Input) -> Result<f64> {
        Ok(self.forward(theta, x)?[0])
    }

    /// Gradient of output `out_index` with respect to the parameters.
    pub fn grad(&self, theta: &ParamVector, x: &Input, out_index: usize) -> Result<ParamVector> {
        let k = self.output_dim();
        if out_index >= k {
            return Err(Error::OutputIndex { index: out_index, outputs: k });
        }
        let mut cot = vec![0.0; k];
        cot[out_index] = 1.0;
        let mut out = vec![0.0; self.param_count()];
        self.pullback(theta, std::slice::from_ref(x), &cot, &mut out)?;
        Ok(ParamVector { model: self.kind, data: out })
    }

    /// Outputs on a batch, row-major `n x output_dim`.
    pub fn outputs(&self, theta: &ParamVector, xs: &[Input]) -> Result<Vec<f64>> {
        self.check_batch(theta, xs)?;
        let t = &theta.data;
        Ok(match self.kind {
            ModelKind::DiagonalLinear { dim } => {
                let w = diag_weight(t, dim);
                xs.iter().map(|x| dot(&w, dense(x))).collect()
            }
            ModelKind::MatrixFactorization { dim } => {
                let (u, v) = t.split_at(dim * dim);
                xs.iter()
                    .map(|x| {
                        let (i, j) = pair(x);
                        dot(row(u, dim, i), row(u, dim, j)) - dot(row(v, dim, i), row(v, dim, j))
                    })
                    .collect()
            }
            ModelKind::TwoLayerRelu { p, hidden } => {
                let net = Relu::new(t, p, hidden);
                let mut out = Vec::with_capacity(xs.len() * p);
                let mut h = vec![0.0; hidden];
                for x in xs {
                    net.hidden(x, &mut h);
                    h.iter_mut().for_each(|z| *z = z.max(0.0));
                    for c in 0..p {
                        out.push(dot(&net.w2[c * hidden..(c + 1) * hidden], &h));
                    }
                }
                out
            }
        })
    }

    /// Accumulates `sum_i J_i^T cot_i` into `out`, where `J_i` is the
    /// Jacobian of the outputs on `xs[i]` and `cot` is row-major
    /// `n x output_dim`.
    pub fn pullback(
        &self,
        theta: &ParamVector,
        xs: &[Input],
        cot: &[f64],
        out: &mut [f64],
    ) -> Result<()> {
        self.check_batch(theta, xs)?;
        let k = self.output_dim();
        if cot.len() != xs.len() * k || out.len() != self.param_count() {
            return Err(Error::shape("pullback buffers do not match batch"));
        }
        let t = &theta.data;
        match self.kind {
            ModelKind::DiagonalLinear { dim } => {
                let mut g = vec![0.0; dim];
                for (x, &c) in xs.iter().zip(cot) {
                    if c != 0.0 {
                        axpy(c, dense(x), &mut g);
                    }
                }
                let (u, v) = t.split_at(dim);
                let (ou, ov) = out.split_at_mut(dim);
                for kk in 0..dim {
                    ou[kk] += 2.0 * u[kk] * g[kk];
                    ov[kk] -= 2.0 * v[kk] * g[kk];
                }
            }
            ModelKind::MatrixFactorization { dim } => {
                let (u, v) = t.split_at(dim * dim);
                let (ou, ov) = out.split_at_mut(dim * dim);
                for (x, &c) in xs.iter().zip(cot) {
                    if c == 0.0 {
                        continue;
                    }
                    let (i, j) = pair(x);
                    // d/dU <P_sym, U U^T> = 2 P_sym U: row i gets U_j, row j gets U_i.
                    for m in 0..dim {
                        ou[i * dim + m] += c * u[j * dim + m];
                        ou[j * dim + m] += c * u[i * dim + m];
                        ov[i * dim + m] -= c * v[j * dim + m];
                        ov[j * dim + m] -= c * v[i * dim + m];
                    }
                }
            }
            ModelKind::TwoLayerRelu { p, hidden } => {
                let net = Relu::new(t, p, hidden);
                let (o1, rest) = out.split_at_mut(hidden * 2 * p);
                let (ob, o2) = rest.split_at_mut(hidden);
                let mut pre = vec![0.0; hidden];
                let mut delta = vec![0.0; hidden];
                for (x, c) in xs.iter().zip(cot.chunks_exact(p)) {
                    net.hidden(x, &mut pre);
                    delta.iter_mut().for_each(|d| *d = 0.0);
                    for (o, &co) in c.iter().enumerate() {
                        if co == 0.0 {
                            continue;
                        }
                        let w2 = &net.w2[o * hidden..(o + 1) * hidden];
                        let g2 = &mut o2[o * hidden..(o + 1) * hidden];
                        for m in 0..hidden {
                            if pre[m] > 0.0 {
                                g2[m] += co * pre[m];
                                delta[m] += co * w2[m];
                            }
                        }
                    }
                    for m in 0..hidden {
                        let dm = delta[m];
                        if dm == 0.0 {
                            continue;
                        }
                        ob[m] += dm;
                        let r = &mut o1[m * 2 * p..(m + 1) * 2 * p];
                        match x {
                            Input::Pair(a, b) => {
                                r[*a] += dm;
                                r[p + *b] += dm;
                            }
                            Input::Dense(v) => axpy(dm, v, r),
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Squared gradient norms `||grad f(theta; x_i)||^2` for scalar-output
    /// models.
    pub fn grad_sq_norms(&self, theta: &ParamVector, xs: &[Input]) -> Result<Vec<f64>> {
        self.check_batch(theta, xs)?;
        let t = &theta.data;
        match self.kind {
            ModelKind::DiagonalLinear { dim } => {
                let (u, v) = t.split_at(dim);
                let s: Vec<f64> = (0..dim).map(|k| 4.0 * (u[k] * u[k] + v[k] * v[k])).collect();
                Ok(xs
                    .iter()
                    .map(|x| dot_and_weighted_sq(dense(x), &s, &s).1)
                    .collect())
            }
            ModelKind::MatrixFactorization { dim } => {
                let (u, v) = t.split_at(dim * dim);
                Ok(xs
                    .iter()
                    .map(|x| {
                        let (i, j) = pair(x);
                        let mut s = 0.0;
                        for f in [u, v] {
                            if i == j {
                                s += 4.0 * dot(row(f, dim, i), row(f, dim, i));
                            } else {
                                s += dot(row(f, dim, i), row(f, dim, i))
                                    + dot(row(f, dim, j), row(f, dim, j));
                            }
                        }
                        s
                    })
                    .collect())
            }
            ModelKind::TwoLayerRelu { .. } => {
                Err(Error::config("per-sample gradient norms require a scalar-output model"))
            }
        }
    }

    /// Outputs and squared gradient norms in one pass over the inputs.
    pub(crate) fn outputs_and_sq_norms(&self, theta: &ParamVector, xs: &[Input]) -> Result<(Vec<f64>, Vec<f64>)> {
        if let ModelKind::DiagonalLinear { dim } = self.kind {
            self.check_batch(theta, xs)?;
            let (u, v) = theta.data.split_at(dim);
            let w = diag_weight(&theta.data, dim);
            let s: Vec<f64> = u.iter().zip(v).map(|(a, b)| 4.0 * (a * a + b * b)).collect();
            Ok(xs.iter().map(|x| dot_and_weighted_sq(dense(x), &w, &s)).unzip())
        } else {
            Ok((self.outputs(theta, xs)?, self.grad_sq_norms(theta, xs)?))
        }
    }

    /// Upper bound on the spectral norm of the parameter Hessian of `f(.; x)`
    /// for the quadratic models; `None` for the ReLU net.
    pub fn hessian_norm_bound(&self, x: &Input) -> Option<f64> {
        match (self.kind, x) {
            (ModelKind::DiagonalLinear { .. }, Input::Dense(v)) => {
                Some(2.0 * v.iter().fold(0.0_f64, |m, a| m.max(a.abs())))
            }
            (ModelKind::MatrixFactorization { .. }, Input::Pair(i, j)) => {
                Some(if i == j { 2.0 } else { 1.0 })
            }
            _ => None,
        }
    }

    /// Unit-scale initialization `alpha * theta_bar` with zero output, or the
    /// Gaussian-perturbed factorization init when `sigma > 0`.
    pub fn make_init(&self, alpha: f64, sigma: f64, seed: u64) -> Result<ParamVector> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::config(format!("alpha must be positive, got {alpha}")));
        }
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::config(format!("sigma must be nonnegative, got {sigma}")));
        }
        let mut rng = rng::seeded(seed);
        let data = match self.kind {
            ModelKind::DiagonalLinear { dim } => {
                if sigma > 0.0 {
                    return Err(Error::config("sigma > 0 is only defined for matrix factorization"));
                }
                vec![alpha; 2 * dim]
            }
            ModelKind::MatrixFactorization { dim } => {
                let mut data = vec![0.0; 2 * dim * dim];
                for f in 0..2 {
                    for i in 0..dim {
                        data[f * dim * dim + i * dim + i] = alpha;
                    }
                }
                if sigma > 0.0 {
                    for v in data.iter_mut() {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        *v += sigma * z;
                    }
                }
                data
            }
            ModelKind::TwoLayerRelu { p, hidden } => {
                if sigma > 0.0 {
                    return Err(Error::config("sigma > 0 is only defined for matrix factorization"));
                }
                let he = Normal::new(0.0, (2.0 / (2 * p) as f64).sqrt())
                    .map_err(|e| Error::config(e.to_string()))?;
                let mut data = vec![0.0; self.param_count()];
                for v in data[..hidden * 2 * p + hidden].iter_mut() {
                    *v = alpha * he.sample(&mut rng);
                }
                data
            }
        };
        self.params(data)
    }

    /// Effective linear weight `u*u - v*v` of a diagonal net.
    pub fn effective_weight(&self, theta: &ParamVector) -> Result<Vec<f64>> {
        self.check_theta(theta)?;
        match self.kind {
            ModelKind::DiagonalLinear { dim } => Ok(diag_weight(&theta.data, dim)),
            _ => Err(Error::config("effective weight is defined for diagonal nets only")),
        }
    }

    /// Product matrix `U U^T - V V^T` of a factorization model.
    pub fn product_matrix(&self, theta: &ParamVector) -> Result<DMatrix<f64>> {
        self.check_theta(theta)?;
        match self.kind {
            ModelKind::MatrixFactorization { dim } => {
                let (u, v) = theta.data.split_at(dim * dim);
                let u = DMatrix::from_row_slice(dim, dim, u);
                let v = DMatrix::from_row_slice(dim, dim, v);
                Ok(&u * u.transpose() - &v * v.transpose())
            }
            _ => Err(Error::config("product matrix is defined for factorization models only")),
        }
    }

    /// Uniformly random input of the right shape, for probing.
    pub fn random_input<R: Rng>(&self, rng: &mut R) -> Input {
        match self.kind {
            ModelKind::TwoLayerRelu { p, .. } => {
                Input::Pair(rng.random_range(0..p), rng.random_range(0..p))
            }
            ModelKind::DiagonalLinear { dim } => {
                Input::Dense((0..dim).map(|_| StandardNormal.sample(rng)).collect())
            }
            ModelKind::MatrixFactorization { dim } => {
                Input::Pair(rng.random_range(0..dim), rng.random_range(0..dim))
            }
        }
    }
}

impl ParamVector {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn norm(&self) -> f64 {
        norm(&self.data)
    }

    pub fn dot(&self, other: &ParamVector) -> f64 {
        dot(&self.data, &other.data)
    }

    pub fn scaled(&self, c: f64) -> ParamVector {
        ParamVector { model: self.model, data: self.data.iter().map(|v| c * v).collect() }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl InitSpec {
    pub fn new(model: &HomogeneousModel, alpha: f64, sigma: f64, seed: u64) -> Result<Self> {
        let base = model.make_init(1.0, 0.0, seed)?;
        if sigma > 0.0 && !matches!(model.kind(), ModelKind::MatrixFactorization { .. }) {
            return Err(Error::config("sigma > 0 is only defined for matrix factorization"));
        }
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::config(format!("alpha must be positive, got {alpha}")));
        }
        Ok(Self { base, alpha, sigma, seed })
    }

    /// Starting parameters `theta(0)`.
    pub fn initial(&self, model: &HomogeneousModel) -> Result<ParamVector> {
        if self.sigma > 0.0 {
            model.make_init(self.alpha, self.sigma, self.seed)
        } else {
            Ok(self.base.scaled(self.alpha))
        }
    }
}

struct Relu<'a> {
    w1: &'a [f64],
    b1: &'a [f64],
    w2: &'a [f64],
    p: usize,
    hidden: usize,
}

impl<'a> Relu<'a> {
    fn new(t: &'a [f64], p: usize, hidden: usize) -> Self {
        let (w1, rest) = t.split_at(hidden * 2 * p);
        let (b1, w2) = rest.split_at(hidden);
        Self { w1, b1, w2, p, hidden }
    }

    /// Pre-activations `W1 x + b1`.
    fn hidden(&self, x: &Input, out: &mut [f64]) {
        let two_p = 2 * self.p;
        for m in 0..self.hidden {
            let r = &self.w1[m * two_p..(m + 1) * two_p];
            out[m] = self.b1[m]
                + match x {
                    Input::Pair(a, b) => r[*a] + r[self.p + *b],
                    Input::Dense(v) => dot(r, v),
                };
        }
    }
}

fn diag_weight(t: &[f64], dim: usize) -> Vec<f64> {
    let (u, v) = t.split_at(dim);
    u.iter().zip(v).map(|(a, b)| a * a - b * b).collect()
}

fn dense(x: &Input) -> &[f64] {
    match x {
        Input::Dense(v) => v,
        Input::Pair(..) => unreachable!("validated input"),
    }
}

fn pair(x: &Input) -> (usize, usize) {
    match x {
        Input::Pair(i, j) => (*i, *j),
        Input::Dense(_) => unreachable!("validated input"),
    }
}

fn row(m: &[f64], dim: usize, i: usize) -> &[f64] {
    &m[i * dim..(i + 1) * dim]
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    let mut acc = [0.0; 4];
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `(sum x_k w_k, sum x_k^2 s_k)`.
fn dot_and_weighted_sq(x: &[f64], w: &[f64], s: &[f64]) -> (f64, f64) {
    let (cx, cw, cs) = (x.chunks_exact(4), w.chunks_exact(4), s.chunks_exact(4));
    let mut tail = (0.0, 0.0);
    for ((a, b), c) in cx.remainder().iter().zip(cw.remainder()).zip(cs.remainder()) {
        tail.0 += a * b;
        tail.1 += a * a * c;
    }
    let (mut p, mut q) = ([0.0; 4], [0.0; 4]);
    for ((a, b), c) in cx.zip(cw).zip(cs) {
        for l in 0..4 {
            p[l] += a[l] * b[l];
            q[l] += a[l] * a[l] * c[l];
        }
    }
    ((p[0] + p[1]) + (p[2] + p[3]) + tail.0, (q[0] + q[1]) + (q[2] + q[3]) + tail.1)
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub(crate) fn axpy(c: f64, x: &[f64], y: &mut [f64]) {
    y.iter_mut().zip(x).for_each(|(yi, xi)| *yi += c * xi);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn diag(d: usize, u: &[f64], v: &[f64]) -> (HomogeneousModel, ParamVector) {
        let m = HomogeneousModel::diagonal(d).unwrap();
        let t = m.params([u, v].concat()).unwrap();
        (m, t)
    }

    #[test]
    fn diagonal_forward_examples() {
        let (m, t) = diag(2, &[1.0, 0.0], &[0.0, 1.0]);
        assert_eq!(m.forward_scalar(&t, &Input::Dense(vec![1.0, 1.0])).unwrap(), 0.0);
        let (m, t) = diag(2, &[2.0, 0.0], &[0.0, 0.0]);
        assert_eq!(m.forward_scalar(&t, &Input::Dense(vec![1.0, 0.0])).unwrap(), 4.0);
    }

    #[test]
    fn factorization_identity_factor() {
        let m = HomogeneousModel::factorization(2).unwrap();
        let mut data = vec![0.0; 8];
        data[0] = 1.0;
        data[3] = 1.0;
        let t = m.params(data).unwrap();
        assert_eq!(m.forward_scalar(&t, &Input::Pair(1, 1)).unwrap(), 1.0);
        assert_eq!(m.forward_scalar(&t, &Input::Pair(0, 1)).unwrap(), 0.0);
    }

    #[test]
    fn diagonal_gradient_examples() {
        let (m, t) = diag(1, &[3.0], &[1.0]);
        let g = m.grad(&t, &Input::Dense(vec![2.0]), 0).unwrap();
        assert_eq!(g.data, vec![12.0, -4.0]);

        let m = HomogeneousModel::diagonal(3).unwrap();
        let base = m.make_init(1.0, 0.0, 0).unwrap();
        let x = vec![0.5, -1.0, 2.0];
        let g = m.grad(&base, &Input::Dense(x.clone()), 0).unwrap();
        let expected: Vec<f64> = x.iter().map(|v| 2.0 * v).chain(x.iter().map(|v| -2.0 * v)).collect();
        assert_eq!(g.data, expected);
    }

    #[test]
    fn out_index_is_checked() {
        let m = HomogeneousModel::diagonal(2).unwrap();
        let t = m.make_init(1.0, 0.0, 0).unwrap();
        let err = m.grad(&t, &Input::Dense(vec![1.0, 1.0]), 1).unwrap_err();
        assert!(matches!(err, Error::OutputIndex { index: 1, outputs: 1 }));
    }

    #[test]
    fn shape_mismatch_is_a_config_error() {
        let m = HomogeneousModel::diagonal(2).unwrap();
        let t = m.make_init(1.0, 0.0, 0).unwrap();
        let err = m.forward(&t, &Input::Dense(vec![1.0])).unwrap_err();
        assert!(err.is_config());
        let err = m.forward(&t, &Input::Pair(0, 0)).unwrap_err();
        assert!(err.is_config());
        assert!(m.params(vec![0.0; 3]).is_err());
        assert!(m.params(vec![f64::NAN; 4]).is_err());
    }

    #[test]
    fn init_examples() {
        let m = HomogeneousModel::diagonal(3).unwrap();
        let t = m.make_init(2.0, 0.0, 7).unwrap();
        assert_eq!(t.data, vec![2.0; 6]);
        assert!(m.make_init(2.0, 0.1, 7).is_err());

        let m = HomogeneousModel::factorization(2).unwrap();
        let t = m.make_init(10.0, 0.0, 0).unwrap();
        assert_eq!(t.data, vec![10.0, 0.0, 0.0, 10.0, 10.0, 0.0, 0.0, 10.0]);

        let m = HomogeneousModel::two_layer_relu(5, 8).unwrap();
        let t = m.make_init(3.0, 0.0, 1).unwrap();
        let base = m.make_init(1.0, 0.0, 1).unwrap();
        assert_eq!(t, base.scaled(3.0));
        assert!(m.make_init(3.0, 0.5, 1).is_err());
    }

    #[test]
    fn zero_output_at_init() {
        let mut r = rng::seeded(3);
        for m in [
            HomogeneousModel::two_layer_relu(7, 16).unwrap(),
            HomogeneousModel::diagonal(9).unwrap(),
            HomogeneousModel::factorization(6).unwrap(),
        ] {
            let t = m.make_init(5.0, 0.0, 11).unwrap();
            let xs: Vec<Input> = (0..50).map(|_| m.random_input(&mut r)).collect();
            assert!(m.outputs(&t, &xs).unwrap().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn perturbed_factorization_init_has_requested_spread() {
        let m = HomogeneousModel::factorization(30).unwrap();
        let t = m.make_init(2.0, 0.1, 5).unwrap();
        let base = m.make_init(2.0, 0.0, 5).unwrap();
        let dev: Vec<f64> = t.data.iter().zip(&base.data).map(|(a, b)| a - b).collect();
        let sd = (dev.iter().map(|d| d * d).sum::<f64>() / dev.len() as f64).sqrt();
        assert!((sd - 0.1).abs() < 0.01, "sd = {sd}");
    }

    #[test]
    fn relu_dense_and_pair_inputs_agree() {
        let m = HomogeneousModel::two_layer_relu(4, 6).unwrap();
        let mut r = rng::seeded(2);
        let t = m.params((0..m.param_count()).map(|_| StandardNormal.sample(&mut r)).collect()).unwrap();
        let mut x = vec![0.0; 8];
        x[1] = 1.0;
        x[4 + 3] = 1.0;
        let a = m.forward(&t, &Input::Pair(1, 3)).unwrap();
        let b = m.forward(&t, &Input::Dense(x.clone())).unwrap();
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-12);
        }
        let ga = m.grad(&t, &Input::Pair(1, 3), 2).unwrap();
        let gb = m.grad(&t, &Input::Dense(x), 2).unwrap();
        for (u, v) in ga.data.iter().zip(&gb.data) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn grad_sq_norms_match_gradients() {
        let mut r = rng::seeded(9);
        for m in [HomogeneousModel::diagonal(5).unwrap(), HomogeneousModel::factorization(4).unwrap()] {
            let t = m.params((0..m.param_count()).map(|_| StandardNormal.sample(&mut r)).collect()).unwrap();
            let xs: Vec<Input> = (0..10).map(|_| m.random_input(&mut r)).collect();
            let norms = m.grad_sq_norms(&t, &xs).unwrap();
            for (x, n) in xs.iter().zip(norms) {
                let g = m.grad(&t, x, 0).unwrap();
                assert!((g.dot(&g) - n).abs() < 1e-10 * (1.0 + n));
            }
        }
    }

    #[test]
    fn product_matrix_matches_forward() {
        let m = HomogeneousModel::factorization(3).unwrap();
        let mut r = rng::seeded(4);
        let t = m.params((0..m.param_count()).map(|_| StandardNormal.sample(&mut r)).collect()).unwrap();
        let w = m.product_matrix(&t).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let f = m.forward_scalar(&t, &Input::Pair(i, j)).unwrap();
                assert!((w[(i, j)] - f).abs() < 1e-12);
            }
        }
    }
}
