//! One-vs-all linear SVMs and the multi-hypothesis bank built from them.
//!
//! Each classifier minimizes `lambda/2 |w|^2 + mean(hinge)` per class with
//! `lambda = 1 / (C * n)`, by per-sample subgradient steps of size
//! `1 / (lambda t)` over a fixed number of shuffled epochs; the returned
//! weights average the iterates of the second half. Features are
//! standardized with the training mean and deviation, which are stored with
//! the weights. The bias is an extra regularized weight on a constant input.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SvmParams {
    pub c_reg: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for SvmParams {
    fn default() -> Self {
        Self {
            c_reg: 1.0,
            epochs: 50,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearClassifier {
    /// Original class index of every output row.
    pub classes: Vec<u8>,
    /// `C' x D` weights on standardized features.
    pub weights: Array2<f64>,
    pub biases: Array1<f64>,
    pub mean: Array1<f64>,
    /// `1 / std` per feature, zero for features constant in training.
    pub inv_std: Array1<f64>,
}

impl LinearClassifier {
    /// A classifier with a single remaining class; it always answers that class.
    pub fn constant(class: u8, dim: usize) -> Self {
        Self {
            classes: vec![class],
            weights: Array2::zeros((1, dim)),
            biases: Array1::zeros(1),
            mean: Array1::zeros(dim),
            inv_std: Array1::zeros(dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn standardize(&self, x: ArrayView1<f64>) -> Array1<f64> {
        (&x - &self.mean) * &self.inv_std
    }

    pub fn decision_values(&self, x: ArrayView1<f64>) -> Array1<f64> {
        self.weights.dot(&self.standardize(x)) + &self.biases
    }

    /// Highest-scoring class; ties go to the earlier entry of `classes`.
    pub fn predict(&self, x: ArrayView1<f64>) -> u8 {
        let scores = self.decision_values(x);
        self.classes[argmax(scores.view())]
    }

    pub fn predict_rows(&self, rows: ArrayView2<f64>) -> Vec<u8> {
        let z = (&rows - &self.mean.view().insert_axis(Axis(0)))
            * self.inv_std.view().insert_axis(Axis(0));
        let scores = z.dot(&self.weights.t()) + self.biases.view().insert_axis(Axis(0));
        scores
            .outer_iter()
            .map(|s| self.classes[argmax(s)])
            .collect()
    }

    /// One-vs-all objective summed over classes, on raw (unstandardized) rows.
    pub fn objective(&self, rows: ArrayView2<f64>, labels: &[u8], c_reg: f64) -> f64 {
        let n = rows.nrows() as f64;
        let lambda = 1.0 / (c_reg * n);
        let mut total = 0.0;
        for (j, &class) in self.classes.iter().enumerate() {
            let w = self.weights.row(j);
            let b = self.biases[j];
            total += 0.5 * lambda * (w.dot(&w) + b * b);
            for (x, &y) in rows.outer_iter().zip(labels) {
                let sign = if y == class { 1.0 } else { -1.0 };
                let s = w.dot(&self.standardize(x)) + b;
                total += (1.0 - sign * s).max(0.0) / n;
            }
        }
        total
    }
}

fn argmax(scores: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Trains on the rows whose label is in `classes`.
pub fn train_linear_svm(
    x: ArrayView2<f64>,
    y: &[u8],
    classes: &[u8],
    params: &SvmParams,
) -> Result<LinearClassifier> {
    if x.nrows() != y.len() {
        return Err(Error::Dimension(format!(
            "{} rows for {} labels",
            x.nrows(),
            y.len()
        )));
    }
    let mut classes = classes.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let idx: Vec<usize> = (0..y.len()).filter(|&i| classes.contains(&y[i])).collect();
    for &c in &classes {
        if !idx.iter().any(|&i| y[i] == c) {
            return Err(Error::Config(format!("class {c} has no training rows")));
        }
    }
    if classes.len() < 2 {
        return Err(Error::Config(format!(
            "a linear SVM needs at least two classes, got {:?}",
            classes
        )));
    }
    if params.c_reg <= 0.0 || !params.c_reg.is_finite() {
        return Err(Error::Config(format!(
            "SVM C must be positive, got {}",
            params.c_reg
        )));
    }

    let rows = x.select(Axis(0), &idx);
    let labels: Vec<u8> = idx.iter().map(|&i| y[i]).collect();
    let n = rows.nrows();
    let dim = rows.ncols();

    let mean = rows.mean_axis(Axis(0)).expect("rows present");
    let var = rows.var_axis(Axis(0), 0.0);
    let inv_std = var.mapv(|v| if v > 1e-24 { 1.0 / v.sqrt() } else { 0.0 });

    // standardized rows with a trailing constant 1 for the bias
    let mut z = Array2::<f64>::ones((n, dim + 1));
    z.slice_mut(ndarray::s![.., ..dim]).assign(
        &((&rows - &mean.view().insert_axis(Axis(0))) * inv_std.view().insert_axis(Axis(0))),
    );

    let targets: Vec<Vec<f64>> = labels
        .iter()
        .map(|&l| {
            classes
                .iter()
                .map(|&c| if c == l { 1.0 } else { -1.0 })
                .collect()
        })
        .collect();

    let lambda = 1.0 / (params.c_reg * n as f64);
    let v = pegasos(z.view(), &targets, lambda, params.epochs, params.seed);

    Ok(LinearClassifier {
        classes,
        weights: v.slice(ndarray::s![.., ..dim]).to_owned(),
        biases: v.column(dim).to_owned(),
        mean,
        inv_std,
    })
}

/// Dot product with eight independent accumulators so it vectorizes.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut lanes = [0.0f64; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| x * y)
        .sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            lanes[k] += x[k] * y[k];
        }
    }
    lanes.iter().sum::<f64>() + tail
}

/// Per-sample subgradient steps with `w_t = (1 - 1/t) w_{t-1} + eta_t y x`
/// on violated outputs. Returns the uniform average of the iterates from the
/// second half of the steps. `w` is stored as `scale * v`, and the average
/// as `acc + v * s_cum - b`, so a step costs only the violated rows.
pub(crate) fn pegasos(
    z: ArrayView2<f64>,
    targets: &[Vec<f64>],
    lambda: f64,
    epochs: usize,
    seed: u64,
) -> Array2<f64> {
    let (n, width) = z.dim();
    let outputs = targets.first().map_or(0, Vec::len);
    let total = (epochs * n) as u64;
    let average_from = total / 2 + 1;

    let mut v = Array2::<f64>::zeros((outputs, width));
    let mut scale = 1.0f64;
    let mut acc = Array2::<f64>::zeros((outputs, width));
    let mut b = Array2::<f64>::zeros((outputs, width));
    let mut s_cum = 0.0f64;

    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = 0u64;
    let mut violated = Vec::with_capacity(outputs);

    for _ in 0..epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            t += 1;
            let eta = 1.0 / (lambda * t as f64);
            let xs = z.row(i).to_slice().expect("standard layout");
            violated.clear();
            for j in 0..outputs {
                if targets[i][j] * scale * dot(v.row(j).to_slice().unwrap(), xs) < 1.0 {
                    violated.push(j);
                }
            }
            if t == 1 {
                v.fill(0.0);
                scale = 1.0;
            } else {
                scale *= 1.0 - 1.0 / t as f64;
            }
            for &j in &violated {
                let step = eta * targets[i][j] / scale;
                for (w, &xv) in v.row_mut(j).as_slice_mut().unwrap().iter_mut().zip(xs) {
                    *w += step * xv;
                }
                if s_cum > 0.0 {
                    let bs = step * s_cum;
                    for (w, &xv) in b.row_mut(j).as_slice_mut().unwrap().iter_mut().zip(xs) {
                        *w += bs * xv;
                    }
                }
            }
            if t >= average_from {
                s_cum += scale;
            }
            if scale < 1e-9 {
                acc.scaled_add(s_cum, &v);
                acc -= &b;
                b.fill(0.0);
                s_cum = 0.0;
                v.mapv_inplace(|w| w * scale);
                scale = 1.0;
            }
        }
    }
    if total == 0 {
        return v;
    }
    acc.scaled_add(s_cum, &v);
    acc -= &b;
    acc / (total - average_from + 1) as f64
}

/// Full, leave-one-class-out and leave-pair-out classifiers.
#[derive(Debug, Clone, PartialEq)]
pub struct HypothesisBank {
    pub num_classes: usize,
    pub full: LinearClassifier,
    /// `leave_one[p]` never outputs `p`.
    pub leave_one: Vec<LinearClassifier>,
    /// Indexed by [`pair_index`]; never outputs either excluded class.
    pub leave_pair: Vec<LinearClassifier>,
}

/// Position of the unordered pair `{p, q}` (p != q) in the leave-pair list.
pub fn pair_index(p: u8, q: u8, num_classes: usize) -> usize {
    let (a, b) = if p < q {
        (p as usize, q as usize)
    } else {
        (q as usize, p as usize)
    };
    a * num_classes - a * (a + 1) / 2 + (b - a - 1)
}

pub fn pairs(num_classes: usize) -> Vec<(u8, u8)> {
    let mut out = Vec::new();
    for p in 0..num_classes {
        for q in p + 1..num_classes {
            out.push((p as u8, q as u8));
        }
    }
    out
}

#[derive(Debug, Clone)]
enum Exclusion {
    None,
    One(u8),
    Pair(u8, u8),
}

impl std::fmt::Display for Exclusion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Exclusion::None => write!(f, "full"),
            Exclusion::One(p) => write!(f, "excluding class {p}"),
            Exclusion::Pair(p, q) => write!(f, "excluding classes {p} and {q}"),
        }
    }
}

impl HypothesisBank {
    pub fn len(&self) -> usize {
        1 + self.leave_one.len() + self.leave_pair.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.full.dim()
    }

    pub fn pair(&self, p: u8, q: u8) -> &LinearClassifier {
        &self.leave_pair[pair_index(p, q, self.num_classes)]
    }

    /// First `m` class choices: `S(h)`, then `S^{y1}(h)`, then `S^{y1 y2}(h)`.
    pub fn hypotheses(&self, h2: ArrayView1<f64>, m: usize) -> Vec<u8> {
        let m = m.clamp(1, 3).min(self.num_classes);
        let y1 = self.full.predict(h2);
        let mut out = vec![y1];
        if m >= 2 {
            let y2 = self.leave_one[y1 as usize].predict(h2);
            out.push(y2);
            if m >= 3 {
                out.push(self.pair(y1, y2).predict(h2));
            }
        }
        out
    }
}

pub fn train_bank(x: ArrayView2<f64>, y: &[u8], params: &SvmParams) -> Result<HypothesisBank> {
    let num_classes = y.iter().map(|&l| l as usize + 1).max().unwrap_or(0);
    let all: Vec<u8> = (0..num_classes as u8).collect();
    for &c in &all {
        if !y.contains(&c) {
            return Err(Error::Config(format!(
                "class {c} is missing from the training set"
            )));
        }
    }
    let mut jobs = vec![Exclusion::None];
    jobs.extend(all.iter().map(|&p| Exclusion::One(p)));
    if num_classes >= 3 {
        jobs.extend(
            pairs(num_classes)
                .into_iter()
                .map(|(p, q)| Exclusion::Pair(p, q)),
        );
    }

    let trained = jobs
        .par_iter()
        .map(|job| {
            let keep: Vec<u8> = all
                .iter()
                .copied()
                .filter(|&c| match job {
                    Exclusion::None => true,
                    Exclusion::One(p) => c != *p,
                    Exclusion::Pair(p, q) => c != *p && c != *q,
                })
                .collect();
            let res = if keep.len() == 1 {
                Ok(LinearClassifier::constant(keep[0], x.ncols()))
            } else {
                train_linear_svm(x, y, &keep, params)
            };
            res.map_err(|e| Error::Exclusion {
                exclusion: job.to_string(),
                source: Box::new(e),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut it = trained.into_iter();
    let full = it.next().expect("full classifier");
    let leave_one: Vec<_> = it.by_ref().take(num_classes).collect();
    let leave_pair: Vec<_> = it.collect();
    Ok(HypothesisBank {
        num_classes,
        full,
        leave_one,
        leave_pair,
    })
}
