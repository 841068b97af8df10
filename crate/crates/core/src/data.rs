//! Seeded dataset generators and the JSON dataset format.

use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{dot, norm, Input};
use crate::rng;

const FORMAT: &str = "grokking-lab/dataset";

/// Learning task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Task {
    /// Labels in `{-1, +1}`.
    BinaryCls,
    /// Real-valued targets.
    Regression,
    /// Class indices in `[0, classes)`, stored as floats.
    MultiClass { classes: usize },
}

/// Generation parameters recorded with a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "generator", rename_all = "snake_case")]
pub enum Generator {
    ModularAddition { p: usize, train_fraction: f64 },
    SparseLinear { d: usize, k: usize, n_train: usize, n_test: usize, support: Vec<usize>, w_star: Vec<f64> },
    MarginGaussian { d: usize, n_train: usize, n_test: usize, gamma: f64, w_star: Vec<f64> },
    MultiplicationTable { d: usize, observe_fraction: f64 },
    Custom,
}

/// Borrowed view of one labelled example.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample<'a> {
    pub x: &'a Input,
    pub y: f64,
}

/// Inputs and targets of one split, stored column-wise.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Split {
    pub x: Vec<Input>,
    pub y: Vec<f64>,
}

impl Split {
    pub fn new(x: Vec<Input>, y: Vec<f64>) -> Result<Self> {
        if x.len() != y.len() {
            return Err(Error::shape(format!("{} inputs but {} targets", x.len(), y.len())));
        }
        Ok(Self { x, y })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = Sample<'_>> {
        self.x.iter().zip(&self.y).map(|(x, &y)| Sample { x, y })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub task: Task,
    pub train: Split,
    pub test: Split,
    pub generator: Generator,
    pub seed: u64,
}

impl LabeledDataset {
    /// Dataset from explicit splits, with label validation.
    pub fn new(task: Task, train: Split, test: Split) -> Result<Self> {
        let ds = Self { task, train, test, generator: Generator::Custom, seed: 0 };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, s) in [("train", &self.train), ("test", &self.test)] {
            if s.x.len() != s.y.len() {
                return Err(Error::shape(format!("{name} split has mismatched lengths")));
            }
            for &y in &s.y {
                let ok = match self.task {
                    Task::BinaryCls => y == 1.0 || y == -1.0,
                    Task::Regression => y.is_finite(),
                    Task::MultiClass { classes } => y >= 0.0 && y.fract() == 0.0 && (y as usize) < classes,
                };
                if !ok {
                    return Err(Error::config(format!("{name} label {y} invalid for {:?}", self.task)));
                }
            }
        }
        Ok(())
    }

    /// Copy whose training split keeps one of `(i, j)` and `(j, i)`; the
    /// symmetric entry models give both the same tangent feature.
    pub fn symmetric_dedup(&self) -> Self {
        let mut seen = std::collections::HashSet::new();
        let mut train = Split::default();
        for s in self.train.iter() {
            let key = match s.x {
                Input::Pair(i, j) => Some((*i.min(j), *i.max(j))),
                Input::Dense(_) => None,
            };
            if key.is_none_or(|k| seen.insert(k)) {
                train.x.push(s.x.clone());
                train.y.push(s.y);
            }
        }
        Self { train, ..self.clone() }
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let file = DatasetFile::from_dataset(self)?;
        std::fs::write(path, serde_json::to_string_pretty(&file)?)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: DatasetFile = serde_json::from_str(text)?;
        file.into_dataset()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&DatasetFile::from_dataset(self)?)?)
    }
}

/// All `p^2` ordered pairs `(a, b)` labelled `(a + b) mod p`, split uniformly
/// at random with `round(train_fraction * p^2)` training pairs.
pub fn gen_modular_addition(p: usize, train_fraction: f64, seed: u64) -> Result<LabeledDataset> {
    if p < 2 {
        return Err(Error::config("modular addition needs p >= 2"));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::config("train_fraction must lie in (0, 1)"));
    }
    let mut pairs: Vec<(usize, usize)> = (0..p).flat_map(|a| (0..p).map(move |b| (a, b))).collect();
    let mut rng = rng::seeded(seed);
    pairs.shuffle(&mut rng);
    let n_train = (train_fraction * (p * p) as f64).round() as usize;
    let split = |ps: &[(usize, usize)]| Split {
        x: ps.iter().map(|&(a, b)| Input::Pair(a, b)).collect(),
        y: ps.iter().map(|&(a, b)| ((a + b) % p) as f64).collect(),
    };
    Ok(LabeledDataset {
        task: Task::MultiClass { classes: p },
        train: split(&pairs[..n_train]),
        test: split(&pairs[n_train..]),
        generator: Generator::ModularAddition { p, train_fraction },
        seed,
    })
}

/// Uniform `{-1, 1}^d` inputs labelled by a `k`-sparse sign vector on a
/// seeded random support.
pub fn gen_sparse_linear(d: usize, k: usize, n_train: usize, n_test: usize, seed: u64) -> Result<LabeledDataset> {
    if k == 0 || k > d {
        return Err(Error::config(format!("need 1 <= k <= d, got k={k}, d={d}")));
    }
    if k % 2 == 0 {
        return Err(Error::config("k must be odd so that labels are never zero"));
    }
    let mut rng = rng::seeded(seed);
    let support = index::sample(&mut rng, d, k).into_vec();
    let mut w_star = vec![0.0; d];
    for &s in &support {
        w_star[s] = sign_draw(&mut rng);
    }
    let mut draw = |n: usize| {
        let mut s = Split::default();
        for _ in 0..n {
            let x: Vec<f64> = (0..d).map(|_| sign_draw(&mut rng)).collect();
            s.y.push(sign(dot(&w_star, &x)));
            s.x.push(Input::Dense(x));
        }
        s
    };
    let train = draw(n_train);
    let test = draw(n_test);
    Ok(LabeledDataset {
        task: Task::BinaryCls,
        train,
        test,
        generator: Generator::SparseLinear { d, k, n_train, n_test, support, w_star },
        seed,
    })
}

/// Gaussian inputs pushed apart by `gamma / 2` along a random unit direction.
pub fn gen_margin_gaussian(d: usize, n_train: usize, n_test: usize, gamma: f64, seed: u64) -> Result<LabeledDataset> {
    if d == 0 {
        return Err(Error::config("dimension must be positive"));
    }
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::config("gamma must be positive"));
    }
    let mut rng = rng::seeded(seed);
    let mut w_star: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
    let nw = norm(&w_star);
    w_star.iter_mut().for_each(|v| *v /= nw);
    let mut draw = |n: usize| {
        let mut s = Split::default();
        for _ in 0..n {
            let mut z: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            let y = sign(dot(&z, &w_star));
            z.iter_mut().zip(&w_star).for_each(|(zi, wi)| *zi += 0.5 * gamma * y * wi);
            s.x.push(Input::Dense(z));
            s.y.push(y);
        }
        s
    };
    let train = draw(n_train);
    let test = draw(n_test);
    Ok(LabeledDataset {
        task: Task::BinaryCls,
        train,
        test,
        generator: Generator::MarginGaussian { d, n_train, n_test, gamma, w_star },
        seed,
    })
}

/// Entries of `X*_{ij} = i j / d^2`; a uniformly sampled set of
/// `round(observe_fraction * d^2)` positions is observed, the rest is test.
pub fn gen_multiplication_table(d: usize, observe_fraction: f64, seed: u64) -> Result<LabeledDataset> {
    if d == 0 {
        return Err(Error::config("dimension must be positive"));
    }
    if !(observe_fraction > 0.0 && observe_fraction <= 1.0) {
        return Err(Error::config("observe_fraction must lie in (0, 1]"));
    }
    let total = d * d;
    let m = ((observe_fraction * total as f64).round() as usize).clamp(1, total);
    let mut rng = rng::seeded(seed);
    let mut observed = vec![false; total];
    let mut chosen = index::sample(&mut rng, total, m).into_vec();
    chosen.sort_unstable();
    chosen.iter().for_each(|&c| observed[c] = true);
    let entry = |c: usize| {
        let (i, j) = (c / d, c % d);
        (Input::Pair(i, j), (i * j) as f64 / total as f64)
    };
    let (mut train, mut test) = (Split::default(), Split::default());
    for c in 0..total {
        let (x, y) = entry(c);
        let s = if observed[c] { &mut train } else { &mut test };
        s.x.push(x);
        s.y.push(y);
    }
    Ok(LabeledDataset {
        task: Task::Regression,
        train,
        test,
        generator: Generator::MultiplicationTable { d, observe_fraction },
        seed,
    })
}

/// The full multiplication table as a `d x d` row-major matrix.
pub fn multiplication_table(d: usize) -> Vec<f64> {
    let dd = (d * d) as f64;
    (0..d).flat_map(|i| (0..d).map(move |j| (i * j) as f64 / dd)).collect()
}

fn sign(v: f64) -> f64 {
    if v >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

fn sign_draw<R: Rng>(rng: &mut R) -> f64 {
    if rng.random::<bool>() {
        1.0
    } else {
        -1.0
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum InputLayout {
    Dense { dim: usize },
    Pair,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SplitFile {
    x: Vec<f64>,
    y: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetFile {
    format: String,
    task: Task,
    seed: u64,
    meta: Generator,
    input: InputLayout,
    train: SplitFile,
    test: SplitFile,
}

impl DatasetFile {
    fn from_dataset(ds: &LabeledDataset) -> Result<Self> {
        let first = ds.train.x.first().or(ds.test.x.first());
        let input = match first {
            Some(Input::Dense(v)) => InputLayout::Dense { dim: v.len() },
            _ => InputLayout::Pair,
        };
        let flat = |s: &Split| -> Result<SplitFile> {
            let mut x = Vec::new();
            for xi in &s.x {
                match (xi, &input) {
                    (Input::Dense(v), InputLayout::Dense { dim }) if v.len() == *dim => x.extend_from_slice(v),
                    (Input::Pair(a, b), InputLayout::Pair) => x.extend([*a as f64, *b as f64]),
                    _ => return Err(Error::shape("dataset mixes input layouts")),
                }
            }
            Ok(SplitFile { x, y: s.y.clone() })
        };
        Ok(Self {
            format: FORMAT.to_string(),
            task: ds.task,
            seed: ds.seed,
            meta: ds.generator.clone(),
            train: flat(&ds.train)?,
            test: flat(&ds.test)?,
            input,
        })
    }

    fn into_dataset(self) -> Result<LabeledDataset> {
        if self.format != FORMAT {
            return Err(Error::config(format!("unknown dataset format {:?}", self.format)));
        }
        let unflat = |s: SplitFile| -> Result<Split> {
            let x: Vec<Input> = match self.input {
                InputLayout::Dense { dim } => {
                    if dim == 0 || s.x.len() != dim * s.y.len() {
                        return Err(Error::shape("dense inputs do not match dim * n"));
                    }
                    s.x.chunks_exact(dim).map(|c| Input::Dense(c.to_vec())).collect()
                }
                InputLayout::Pair => {
                    if s.x.len() != 2 * s.y.len() {
                        return Err(Error::shape("pair inputs do not match 2 * n"));
                    }
                    s.x.chunks_exact(2)
                        .map(|c| {
                            let idx = |v: f64| {
                                if v >= 0.0 && v.fract() == 0.0 {
                                    Ok(v as usize)
                                } else {
                                    Err(Error::shape(format!("invalid index {v}")))
                                }
                            };
                            Ok(Input::Pair(idx(c[0])?, idx(c[1])?))
                        })
                        .collect::<Result<_>>()?
                }
            };
            Split::new(x, s.y)
        };
        let ds = LabeledDataset {
            task: self.task,
            train: unflat(self.train)?,
            test: unflat(self.test)?,
            generator: self.meta,
            seed: self.seed,
        };
        ds.validate()?;
        Ok(ds)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn modular_addition_counts_and_labels() {
        let ds = gen_modular_addition(97, 0.4, 0).unwrap();
        assert_eq!(ds.train.len(), 3764);
        assert_eq!(ds.test.len(), 9409 - 3764);

        let ds = gen_modular_addition(2, 0.5, 1).unwrap();
        let all: Vec<_> = ds.train.iter().chain(ds.test.iter()).collect();
        assert_eq!(all.len(), 4);
        for s in all {
            let Input::Pair(a, b) = *s.x else { panic!() };
            assert_eq!(s.y, ((a + b) % 2) as f64);
        }
    }

    #[test]
    fn modular_addition_split_is_disjoint() {
        let ds = gen_modular_addition(11, 0.3, 4).unwrap();
        let tr: HashSet<_> = ds.train.x.iter().map(|x| format!("{x:?}")).collect();
        assert!(ds.test.x.iter().all(|x| !tr.contains(&format!("{x:?}"))));
        assert_eq!(tr.len() + ds.test.len(), 121);
    }

    #[test]
    fn generators_are_deterministic() {
        assert_eq!(gen_modular_addition(13, 0.4, 9).unwrap(), gen_modular_addition(13, 0.4, 9).unwrap());
        assert_eq!(gen_sparse_linear(20, 3, 10, 5, 9).unwrap(), gen_sparse_linear(20, 3, 10, 5, 9).unwrap());
        assert_eq!(
            gen_margin_gaussian(8, 10, 5, 2.0, 9).unwrap(),
            gen_margin_gaussian(8, 10, 5, 2.0, 9).unwrap()
        );
        assert_eq!(
            gen_multiplication_table(6, 0.5, 9).unwrap(),
            gen_multiplication_table(6, 0.5, 9).unwrap()
        );
        assert_ne!(gen_sparse_linear(20, 3, 10, 5, 9).unwrap(), gen_sparse_linear(20, 3, 10, 5, 10).unwrap());
    }

    #[test]
    fn sparse_linear_rejects_even_k() {
        assert!(gen_sparse_linear(10, 2, 5, 5, 0).is_err());
        assert!(gen_sparse_linear(3, 5, 5, 5, 0).is_err());
    }

    #[test]
    fn sparse_linear_l1_margin_is_one_over_k() {
        let ds = gen_sparse_linear(30, 5, 200, 0, 3).unwrap();
        let Generator::SparseLinear { w_star, support, k, .. } = &ds.generator else { panic!() };
        assert_eq!(support.len(), *k);
        let l1: f64 = w_star.iter().map(|v| v.abs()).sum();
        let m = ds
            .train
            .iter()
            .map(|s| match s.x {
                Input::Dense(x) => s.y * dot(w_star, x) / l1,
                _ => unreachable!(),
            })
            .fold(f64::INFINITY, f64::min);
        assert!((m - 1.0 / 5.0).abs() < 1e-15);
    }

    #[test]
    fn margin_gaussian_respects_margin() {
        let gamma = 3.0;
        let ds = gen_margin_gaussian(16, 300, 300, gamma, 5).unwrap();
        let Generator::MarginGaussian { w_star, .. } = &ds.generator else { panic!() };
        for s in ds.train.iter().chain(ds.test.iter()) {
            let Input::Dense(x) = s.x else { panic!() };
            assert!(s.y * dot(x, w_star) >= gamma / 2.0 - 1e-12);
        }
    }

    #[test]
    fn multiplication_table_partitions_grid() {
        let ds = gen_multiplication_table(4, 0.5, 0).unwrap();
        assert_eq!(ds.train.len() + ds.test.len(), 16);
        let mut seen = HashSet::new();
        for s in ds.train.iter().chain(ds.test.iter()) {
            let Input::Pair(i, j) = *s.x else { panic!() };
            assert!(seen.insert((i, j)));
            assert_eq!(s.y, (i * j) as f64 / 16.0);
        }
        let t = multiplication_table(4);
        assert_eq!(t[2 * 4 + 3], 0.375);
    }

    #[test]
    fn json_round_trip() {
        for ds in [
            gen_modular_addition(5, 0.4, 1).unwrap(),
            gen_sparse_linear(7, 3, 6, 4, 1).unwrap(),
            gen_multiplication_table(5, 0.3, 1).unwrap(),
        ] {
            let back = LabeledDataset::from_json(&ds.to_json().unwrap()).unwrap();
            assert_eq!(back, ds);
        }
    }

    #[test]
    fn json_rejects_bad_labels() {
        let ds = gen_sparse_linear(3, 1, 2, 0, 1).unwrap();
        let text = ds.to_json().unwrap().replacen("\"y\": [\n      ", "\"y\": [\n      0.5, ", 1);
        assert!(LabeledDataset::from_json(&text).is_err());
    }
}
