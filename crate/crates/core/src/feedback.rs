//! Pseudo-recurrent test loop: class hypotheses pick stored Layer-2 cluster
//! centers, which are merged back into the current activity, optionally
//! pushed down to Layer-1 and re-pooled, for a fixed number of iterations.

use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use ndarray::{Array1, ArrayView1, Axis};
use serde::Serialize;

use crate::classifiers::HypothesisBank;
use crate::dataset::ImageRecord;
use crate::error::{Error, Result};
use crate::features::{pool, Dictionary, Layer1Activity, Layer2Activity};
use crate::kmeans::{nearest_center, squared_distance};
use crate::memory::{activities, ActivityStore, ClusterMemory};

/// How the per-hypothesis samples are reduced to one feedback vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// The sample closest to the current activity.
    #[default]
    WinnerTakesAll,
    /// Mean of all samples.
    Average,
    /// Nearest center of the global memory, ignoring the hypotheses.
    NonClassSpecific,
}

impl FromStr for Scheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "wta" | "winner_takes_all" => Ok(Self::WinnerTakesAll),
            "average" => Ok(Self::Average),
            "ncs" | "non_class_specific" => Ok(Self::NonClassSpecific),
            other => Err(Error::Config(format!(
                "unknown scheme '{other}' (expected wta|average|ncs)"
            ))),
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::WinnerTakesAll => "wta",
            Self::Average => "average",
            Self::NonClassSpecific => "ncs",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FeedbackConfig {
    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
    pub iterations: usize,
    pub scheme: Scheme,
    pub m: usize,
    pub layer1_feedback: bool,
    pub anneal: bool,
    /// With the non-class-specific scheme, average the 3 nearest global
    /// centers instead of taking the nearest one.
    pub ncs_average3: bool,
}

impl Default for FeedbackConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 0.5,
            tau: 0.5,
            iterations: 3,
            scheme: Scheme::WinnerTakesAll,
            m: 3,
            layer1_feedback: false,
            anneal: true,
            ncs_average3: false,
        }
    }
}

impl FeedbackConfig {
    /// Feedforward only.
    pub fn feedforward() -> Self {
        Self {
            iterations: 0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("tau", self.tau),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "{name} must be a finite value >= 0, got {v}"
                )));
            }
        }
        if !(1..=3).contains(&self.m) {
            return Err(Error::Config(format!(
                "hypothesis count m must be 1, 2 or 3, got {}",
                self.m
            )));
        }
        Ok(())
    }
}

/// Nearest per-class center for one hypothesis.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassSample {
    pub class: u8,
    pub center: usize,
    /// Euclidean distance to the query.
    pub distance: f64,
    pub vector: Array1<f64>,
}

pub fn sample_per_class(
    h2: ArrayView1<f64>,
    hyps: &[u8],
    mem: &ClusterMemory,
) -> Result<Vec<ClassSample>> {
    hyps.iter()
        .map(|&class| {
            if class as usize >= mem.num_classes() {
                return Err(Error::Config(format!(
                    "hypothesis {class} outside the {} remembered classes",
                    mem.num_classes()
                )));
            }
            let centers = mem.class_centers(class);
            let (center, d2) = nearest_center(h2, centers)?;
            Ok(ClassSample {
                class,
                center,
                distance: d2.sqrt(),
                vector: centers.row(center).to_owned(),
            })
        })
        .collect()
}

/// Result of the competition between samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Competition {
    pub vector: Array1<f64>,
    /// Winning sample index (winner-takes-all) or global center
    /// (non-class-specific with a single center).
    pub chosen: Option<usize>,
    /// Up to 3 nearest global centers with distances (non-class-specific).
    pub global_nearest: Vec<(usize, f64)>,
}

pub fn compete(
    h2: ArrayView1<f64>,
    samples: &[ArrayView1<f64>],
    scheme: Scheme,
    ncs_average3: bool,
    mem: &ClusterMemory,
) -> Result<Competition> {
    match scheme {
        Scheme::WinnerTakesAll | Scheme::Average if samples.is_empty() => Err(Error::Config(
            format!("scheme {scheme} needs at least one class sample"),
        )),
        Scheme::WinnerTakesAll => {
            let q = h2.to_vec();
            let mut best = (0, f64::INFINITY);
            for (i, s) in samples.iter().enumerate() {
                let d = squared_distance(&q, &s.to_vec());
                if d < best.1 {
                    best = (i, d);
                }
            }
            Ok(Competition {
                vector: samples[best.0].to_owned(),
                chosen: Some(best.0),
                global_nearest: Vec::new(),
            })
        }
        Scheme::Average => {
            let mut sum = Array1::<f64>::zeros(h2.len());
            for s in samples {
                sum += s;
            }
            Ok(Competition {
                vector: sum / samples.len() as f64,
                chosen: None,
                global_nearest: Vec::new(),
            })
        }
        Scheme::NonClassSpecific => {
            let nearest = k_nearest(h2, mem, 3)?;
            let vector = if ncs_average3 {
                let mut sum = Array1::<f64>::zeros(h2.len());
                for &(i, _) in &nearest {
                    sum += &mem.global.row(i);
                }
                sum / nearest.len() as f64
            } else {
                mem.global.row(nearest[0].0).to_owned()
            };
            Ok(Competition {
                vector,
                chosen: (!ncs_average3).then_some(nearest[0].0),
                global_nearest: nearest,
            })
        }
    }
}

/// The `k` nearest global centers in increasing distance; ties by index.
fn k_nearest(h2: ArrayView1<f64>, mem: &ClusterMemory, k: usize) -> Result<Vec<(usize, f64)>> {
    if mem.global.nrows() == 0 {
        return Err(Error::EmptyCenters);
    }
    if mem.global.ncols() != h2.len() {
        return Err(Error::Dimension(format!(
            "activity has {} dims, global memory has {}",
            h2.len(),
            mem.global.ncols()
        )));
    }
    let q = h2.to_vec();
    let mut d: Vec<(usize, f64)> = mem
        .global
        .outer_iter()
        .enumerate()
        .map(|(i, row)| (i, squared_distance(&q, &row.to_vec())))
        .collect();
    d.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    d.truncate(k);
    Ok(d.into_iter().map(|(i, d2)| (i, d2.sqrt())).collect())
}

/// `(h2 + alpha * sample) / (1 + alpha)`.
pub fn merge_layer2(h2: ArrayView1<f64>, sample: ArrayView1<f64>, alpha: f64) -> Array1<f64> {
    let denom = 1.0 + alpha;
    ndarray::Zip::from(&h2)
        .and(&sample)
        .map_collect(|&h, &s| (h + alpha * s) / denom)
}

/// Layer-1 activity of the training image whose stored Layer-2 row is
/// closest to `h2_next`, with that row's index.
pub fn sample_layer1(
    h2_next: ArrayView1<f64>,
    store: &ActivityStore,
) -> Result<(usize, Layer1Activity)> {
    if !store.has_h1() {
        return Err(Error::Unsupported(
            "layer-1 feedback needs stored layer-1 activity; rebuild the store with --store-h1 on"
                .into(),
        ));
    }
    let (index, _) = nearest_center(h2_next, store.h2.view())?;
    Ok((index, store.layer1(index)?))
}

/// `(h1 + beta * sample) / (1 + beta)`.
pub fn merge_layer1(
    h1: &Layer1Activity,
    sample: &Layer1Activity,
    beta: f64,
) -> Result<Layer1Activity> {
    if h1.shape() != sample.shape() {
        return Err(Error::Dimension(format!(
            "layer-1 shapes differ: {:?} vs {:?}",
            h1.shape(),
            sample.shape()
        )));
    }
    let denom = 1.0 + beta;
    let data = h1
        .as_slice()
        .iter()
        .zip(sample.as_slice())
        .map(|(&h, &s)| ((h as f64 + beta * s as f64) / denom) as f32)
        .collect();
    Layer1Activity::from_vec(h1.side(), h1.k(), data)
}

/// `(h2_next + tau * pool(h1_next)) / (1 + tau)`.
pub fn repool_merge(h2_next: ArrayView1<f64>, h1_next: &Layer1Activity, tau: f64) -> Array1<f64> {
    let pooled = pool(h1_next);
    merge_layer2(h2_next, pooled.view(), tau)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleInfo {
    pub class: u8,
    pub center: usize,
    pub distance: f64,
}

/// One pass of the loop, or the final readout when `alpha` is `None`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub hypotheses: Vec<u8>,
    pub samples: Vec<SampleInfo>,
    pub chosen: Option<usize>,
    pub global_nearest: Vec<(usize, f64)>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    /// `|h2_after - h2_before|`.
    pub merge_norm: Option<f64>,
    pub layer1_sample: Option<usize>,
    pub layer1_merge_norm: Option<f64>,
    pub cluster_distance_evals: usize,
    pub store_distance_evals: usize,
    #[serde(serialize_with = "micros")]
    pub elapsed: Duration,
}

fn micros<S: serde::Serializer>(d: &Duration, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_u64(d.as_micros() as u64)
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct TrajectoryLog {
    pub records: Vec<IterationRecord>,
}

impl TrajectoryLog {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// First hypothesis after each iteration, starting with the feedforward one.
    pub fn labels(&self) -> Vec<u8> {
        self.records.iter().map(|r| r.hypotheses[0]).collect()
    }

    pub fn final_label(&self) -> Option<u8> {
        self.records.last().map(|r| r.hypotheses[0])
    }

    /// Log with wall-clock times zeroed, for comparing runs.
    pub fn without_timing(&self) -> Self {
        let mut out = self.clone();
        for r in &mut out.records {
            r.elapsed = Duration::ZERO;
        }
        out
    }
}

/// Checks that all artifacts agree before any test image is processed.
pub fn check_artifacts(
    dict: Option<&Dictionary>,
    mem: &ClusterMemory,
    store: &ActivityStore,
    bank: &HypothesisBank,
    cfg: &FeedbackConfig,
) -> Result<()> {
    cfg.validate()?;
    let dim = bank.dim();
    let mut dims = vec![
        ("bank", dim),
        ("cluster memory", mem.dim()),
        ("activity store", store.dim()),
    ];
    if let Some(d) = dict {
        dims.push(("dictionary", 4 * d.k()));
    }
    if let Some((name, d)) = dims.iter().find(|(_, d)| *d != dim) {
        return Err(Error::Dimension(format!(
            "{name} has layer-2 width {d} but the bank expects {dim}"
        )));
    }
    if mem.num_classes() != bank.num_classes {
        return Err(Error::Dimension(format!(
            "cluster memory covers {} classes, bank covers {}",
            mem.num_classes(),
            bank.num_classes
        )));
    }
    if cfg.layer1_feedback && cfg.iterations > 0 {
        if !store.has_h1() {
            return Err(Error::Unsupported(
                "layer-1 feedback needs stored layer-1 activity; rebuild the store with --store-h1 on".into(),
            ));
        }
        if let Some(d) = dict {
            if store.h1_side() != d.grid_side() || store.k() != d.k() {
                return Err(Error::Dimension(format!(
                    "stored layer-1 rows are {0}x{0}x{1}, the dictionary produces {2}x{2}x{3}",
                    store.h1_side(),
                    store.k(),
                    d.grid_side(),
                    d.k()
                )));
            }
        }
    }
    Ok(())
}

/// Runs the loop on already-encoded activity. `h1` is only read when
/// Layer-1 feedback is on.
pub fn run_feedback(
    h1: &Layer1Activity,
    h2: &Layer2Activity,
    mem: &ClusterMemory,
    store: &ActivityStore,
    bank: &HypothesisBank,
    cfg: &FeedbackConfig,
) -> Result<(u8, TrajectoryLog)> {
    check_artifacts(None, mem, store, bank, cfg)?;
    if h2.len() != bank.dim() {
        return Err(Error::Dimension(format!(
            "activity has width {}, the bank expects {}",
            h2.len(),
            bank.dim()
        )));
    }
    let use_l1 = cfg.layer1_feedback;
    if use_l1 && cfg.iterations > 0 && (h1.side() != store.h1_side() || h1.k() != store.k()) {
        return Err(Error::Dimension(format!(
            "layer-1 activity {:?} does not match stored rows {}x{}x{}",
            h1.shape(),
            store.h1_side(),
            store.h1_side(),
            store.k()
        )));
    }

    let mut h2 = Array1::from(h2.0.clone());
    let mut h1 = if use_l1 { Some(h1.clone()) } else { None };
    let (mut alpha, mut beta) = (cfg.alpha, cfg.beta);
    let mut log = TrajectoryLog::default();

    for iteration in 0..cfg.iterations {
        let start = Instant::now();
        let hyps = bank.hypotheses(h2.view(), cfg.m);
        let mut record = IterationRecord {
            iteration,
            hypotheses: hyps.clone(),
            samples: Vec::new(),
            chosen: None,
            global_nearest: Vec::new(),
            alpha: Some(alpha),
            beta: use_l1.then_some(beta),
            merge_norm: None,
            layer1_sample: None,
            layer1_merge_norm: None,
            cluster_distance_evals: 0,
            store_distance_evals: 0,
            elapsed: Duration::ZERO,
        };

        let competition = if cfg.scheme == Scheme::NonClassSpecific {
            record.cluster_distance_evals = mem.global.nrows();
            compete(h2.view(), &[], cfg.scheme, cfg.ncs_average3, mem)?
        } else {
            let samples = sample_per_class(h2.view(), &hyps, mem)?;
            record.cluster_distance_evals =
                hyps.iter().map(|&c| mem.class_centers(c).nrows()).sum();
            record.samples = samples
                .iter()
                .map(|s| SampleInfo {
                    class: s.class,
                    center: s.center,
                    distance: s.distance,
                })
                .collect();
            let views: Vec<_> = samples.iter().map(|s| s.vector.view()).collect();
            compete(h2.view(), &views, cfg.scheme, cfg.ncs_average3, mem)?
        };
        record.chosen = competition.chosen;
        record.global_nearest = competition.global_nearest;

        let mut next = merge_layer2(h2.view(), competition.vector.view(), alpha);

        if let Some(cur) = h1.as_mut() {
            let (index, sample) = sample_layer1(next.view(), store)?;
            record.store_distance_evals = store.len();
            record.layer1_sample = Some(index);
            let merged = merge_layer1(cur, &sample, beta)?;
            record.layer1_merge_norm = Some(
                cur.as_slice()
                    .iter()
                    .zip(merged.as_slice())
                    .map(|(&a, &b)| ((a - b) as f64).powi(2))
                    .sum::<f64>()
                    .sqrt(),
            );
            next = repool_merge(next.view(), &merged, cfg.tau);
            *cur = merged;
        }

        record.merge_norm = Some((&next - &h2).mapv(|v| v * v).sum().sqrt());
        h2 = next;
        if cfg.anneal {
            alpha *= 0.5;
            beta *= 0.5;
        }
        record.elapsed = start.elapsed();
        log.records.push(record);
    }

    let start = Instant::now();
    let hyps = bank.hypotheses(h2.view(), cfg.m);
    let label = hyps[0];
    log.records.push(IterationRecord {
        iteration: cfg.iterations,
        hypotheses: hyps,
        samples: Vec::new(),
        chosen: None,
        global_nearest: Vec::new(),
        alpha: None,
        beta: None,
        merge_norm: None,
        layer1_sample: None,
        layer1_merge_norm: None,
        cluster_distance_evals: 0,
        store_distance_evals: 0,
        elapsed: start.elapsed(),
    });
    Ok((label, log))
}

/// Encodes `image` and runs the loop.
pub fn classify_recurrent(
    image: &ImageRecord,
    dict: &Dictionary,
    mem: &ClusterMemory,
    store: &ActivityStore,
    bank: &HypothesisBank,
    cfg: &FeedbackConfig,
) -> Result<(u8, TrajectoryLog)> {
    check_artifacts(Some(dict), mem, store, bank, cfg)?;
    let (h1, h2) = activities(image, dict, store.lowpass);
    run_feedback(&h1, &h2, mem, store, bank, cfg)
}

/// Feedforward labels for a batch of Layer-2 rows.
pub fn feedforward_labels(h2_rows: ndarray::ArrayView2<f64>, bank: &HypothesisBank) -> Vec<u8> {
    h2_rows
        .axis_iter(Axis(0))
        .map(|row| bank.full.predict(row))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifiers::{train_bank, SvmParams};
    use crate::memory::{build_cluster_memory, MemoryParams};
    use ndarray::{array, Array2};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn memory_from(per_class: Vec<Array2<f64>>) -> ClusterMemory {
        let k2 = per_class[0].nrows();
        let dim = per_class[0].ncols();
        let mut global = Array2::zeros((0, dim));
        for c in &per_class {
            global.append(Axis(0), c.view()).unwrap();
        }
        ClusterMemory {
            k2,
            per_class,
            global,
        }
    }

    /// 4 classes in 8 dims: class c lives around 2 * e_c (first quadrant block).
    fn toy_world(seed: u64) -> (ActivityStore, ClusterMemory, HypothesisBank) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 80;
        let labels: Vec<u8> = (0..n).map(|i| (i % 4) as u8).collect();
        let h2 = Array2::from_shape_fn((n, 8), |(i, j)| {
            let base = if j == i % 4 { 2.0 } else { 0.0 };
            base + rng.random_range(-0.4..0.4)
        });
        let h1: Vec<f32> = (0..n * 2 * 2 * 2).map(|i| (i % 7) as f32).collect();
        let store = ActivityStore::from_rows(h2, labels)
            .unwrap()
            .with_h1_rows(2, h1)
            .unwrap();
        let mem = build_cluster_memory(&store, &MemoryParams::new(3, 1)).unwrap();
        let bank = train_bank(store.h2.view(), &store.labels, &SvmParams::default()).unwrap();
        (store, mem, bank)
    }

    #[test]
    fn scheme_parsing() {
        assert_eq!("wta".parse::<Scheme>().unwrap(), Scheme::WinnerTakesAll);
        assert_eq!("ncs".parse::<Scheme>().unwrap(), Scheme::NonClassSpecific);
        assert!(matches!(
            "majority".parse::<Scheme>(),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn exact_center_is_sampled_at_zero_distance() {
        let mem = memory_from(vec![
            array![[0.0, 0.0], [5.0, 5.0]],
            array![[1.0, 2.0], [3.0, 4.0]],
        ]);
        let s = sample_per_class(array![3.0, 4.0].view(), &[1], &mem).unwrap();
        assert_eq!((s[0].center, s[0].distance), (1, 0.0));
        let s = sample_per_class(array![3.0, 4.0].view(), &[1, 0], &mem).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!((s[1].class, s[1].center), (0, 1));
    }

    #[test]
    fn per_class_sampling_matches_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let per_class: Vec<Array2<f64>> = (0..3)
            .map(|_| Array2::from_shape_fn((50, 12), |_| rng.random_range(-1.0..1.0)))
            .collect();
        let mem = memory_from(per_class);
        for _ in 0..50 {
            let q = Array1::from_shape_fn(12, |_| rng.random_range(-1.0..1.0));
            let got = sample_per_class(q.view(), &[2, 0, 1], &mem).unwrap();
            for s in got {
                let c = mem.class_centers(s.class);
                let best = (0..50)
                    .min_by(|&a, &b| {
                        let da: f64 = (&c.row(a) - &q).mapv(|v| v * v).sum();
                        let db: f64 = (&c.row(b) - &q).mapv(|v| v * v).sum();
                        da.total_cmp(&db)
                    })
                    .unwrap();
                assert_eq!(s.center, best);
            }
        }
    }

    #[test]
    fn competition_schemes() {
        let mem = memory_from(vec![
            array![[0.0, 0.0]],
            array![[10.0, 0.0]],
            array![[0.0, 10.0]],
        ]);
        let h = array![0.0, 0.0];
        let a = array![3.0, 0.0];
        let b = array![0.0, 1.0];
        let c = array![2.0, 0.0];
        let views = [a.view(), b.view(), c.view()];
        let wta = compete(h.view(), &views, Scheme::WinnerTakesAll, false, &mem).unwrap();
        assert_eq!((wta.vector.clone(), wta.chosen), (b.clone(), Some(1)));

        let p = array![0.0, 2.0];
        let q = array![2.0, 0.0];
        let avg = compete(
            h.view(),
            &[p.view(), q.view()],
            Scheme::Average,
            false,
            &mem,
        )
        .unwrap();
        assert_eq!(avg.vector, array![1.0, 1.0]);

        for scheme in [Scheme::WinnerTakesAll, Scheme::Average] {
            let single = compete(h.view(), &[a.view()], scheme, false, &mem).unwrap();
            assert_eq!(single.vector, a);
        }

        let near = array![9.0, 1.0];
        let ncs = compete(near.view(), &[], Scheme::NonClassSpecific, false, &mem).unwrap();
        assert_eq!(
            (ncs.vector.clone(), ncs.chosen),
            (array![10.0, 0.0], Some(1))
        );
        assert_eq!(ncs.global_nearest.len(), 3);
        let ncs3 = compete(near.view(), &[], Scheme::NonClassSpecific, true, &mem).unwrap();
        assert!((&ncs3.vector - &array![10.0 / 3.0, 10.0 / 3.0])
            .iter()
            .all(|v| v.abs() < 1e-12));

        assert!(matches!(
            compete(h.view(), &[], Scheme::WinnerTakesAll, false, &mem),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn layer2_merge_examples() {
        let h = array![2.0, 0.0];
        let s = array![0.0, 2.0];
        assert_eq!(merge_layer2(h.view(), s.view(), 0.0), h);
        assert_eq!(merge_layer2(h.view(), s.view(), 1.0), array![1.0, 1.0]);
        let far = merge_layer2(h.view(), s.view(), 1e9);
        assert!((&far - &s).iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn layer1_merge_examples() {
        let twos = Layer1Activity::from_vec(2, 3, vec![2.0; 12]).unwrap();
        let fours = Layer1Activity::from_vec(2, 3, vec![4.0; 12]).unwrap();
        assert_eq!(merge_layer1(&twos, &fours, 0.0).unwrap(), twos);
        assert!(merge_layer1(&twos, &fours, 1.0)
            .unwrap()
            .as_slice()
            .iter()
            .all(|&v| v == 3.0));
        let other = Layer1Activity::zeros(3, 3);
        assert!(matches!(
            merge_layer1(&twos, &other, 1.0),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn repool_examples() {
        let h1 = Layer1Activity::from_vec(2, 1, vec![2.0; 4]).unwrap();
        let h2 = array![4.0, 4.0, 4.0, 4.0];
        assert_eq!(repool_merge(h2.view(), &h1, 0.0), h2);
        assert_eq!(
            repool_merge(h2.view(), &h1, 1.0),
            array![3.0, 3.0, 3.0, 3.0]
        );
        let fixed = array![2.0, 2.0, 2.0, 2.0];
        assert_eq!(repool_merge(fixed.view(), &h1, 1.0), fixed);
    }

    #[test]
    fn layer1_sampling_picks_matching_row() {
        let (store, _, _) = toy_world(5);
        let (idx, h1) = sample_layer1(store.h2.row(42), &store).unwrap();
        assert_eq!(idx, 42);
        assert_eq!(h1, store.layer1(42).unwrap());
    }

    #[test]
    fn layer1_sampling_ties_and_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 1000;
        let mut h2 = Array2::from_shape_fn((n, 6), |_| rng.random_range(0.0..1.0));
        let dup = h2.row(3).to_owned();
        h2.row_mut(9).assign(&dup);
        let rows: Vec<f32> = (0..n).map(|i| i as f32).collect();
        // k = 6/4 rounds to 1 map of a 1x1 grid per row
        let store = ActivityStore::from_rows(h2.clone(), vec![0; n])
            .unwrap()
            .with_h1_rows(1, rows)
            .unwrap();
        let (idx, h1) = sample_layer1(dup.view(), &store).unwrap();
        assert_eq!((idx, h1.as_slice()[0]), (3, 3.0));
        for _ in 0..100 {
            let q = Array1::from_shape_fn(6, |_| rng.random_range(0.0..1.0));
            let brute = (0..n)
                .min_by(|&a, &b| {
                    let da: f64 = (&h2.row(a) - &q).mapv(|v| v * v).sum();
                    let db: f64 = (&h2.row(b) - &q).mapv(|v| v * v).sum();
                    da.total_cmp(&db).then(a.cmp(&b))
                })
                .unwrap();
            assert_eq!(sample_layer1(q.view(), &store).unwrap().0, brute);
        }
    }

    #[test]
    fn layer1_sampling_without_rows_names_the_flag() {
        let store = ActivityStore::from_rows(Array2::zeros((2, 4)), vec![0, 1]).unwrap();
        let err = sample_layer1(array![0.0, 0.0, 0.0, 0.0].view(), &store).unwrap_err();
        assert!(matches!(err, Error::Unsupported(ref m) if m.contains("--store-h1")));
    }

    #[test]
    fn zero_iterations_is_feedforward() {
        let (store, mem, bank) = toy_world(1);
        let h1 = store.layer1(0).unwrap();
        let cfg = FeedbackConfig::feedforward();
        for i in 0..store.len() {
            let h2 = Layer2Activity(store.h2.row(i).to_vec());
            let (label, log) = run_feedback(&h1, &h2, &mem, &store, &bank, &cfg).unwrap();
            assert_eq!(label, bank.full.predict(store.h2.row(i)));
            assert_eq!(log.len(), 1);
        }
    }

    #[test]
    fn identity_merges_keep_the_feedforward_label() {
        let (store, mem, bank) = toy_world(2);
        let h1 = store.layer1(0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for layer1_feedback in [false, true] {
            let cfg = FeedbackConfig {
                alpha: 0.0,
                beta: 0.0,
                tau: 0.0,
                iterations: 4,
                layer1_feedback,
                ..Default::default()
            };
            for _ in 0..30 {
                let h2 = Layer2Activity((0..8).map(|_| rng.random_range(-1.0..3.0)).collect());
                let (label, log) = run_feedback(&h1, &h2, &mem, &store, &bank, &cfg).unwrap();
                assert_eq!(label, bank.full.predict(h2.view()));
                assert_eq!(log.len(), 5);
            }
        }
    }

    #[test]
    fn annealing_halves_alpha_and_beta() {
        let (store, mem, bank) = toy_world(3);
        let cfg = FeedbackConfig {
            alpha: 0.8,
            beta: 0.6,
            iterations: 3,
            layer1_feedback: true,
            ..Default::default()
        };
        let h1 = store.layer1(0).unwrap();
        let h2 = Layer2Activity(store.h2.row(0).to_vec());
        let (_, log) = run_feedback(&h1, &h2, &mem, &store, &bank, &cfg).unwrap();
        let alphas: Vec<f64> = log.records.iter().filter_map(|r| r.alpha).collect();
        let betas: Vec<f64> = log.records.iter().filter_map(|r| r.beta).collect();
        assert_eq!(alphas, vec![0.8, 0.4, 0.2]);
        assert_eq!(betas, vec![0.6, 0.3, 0.15]);
        assert_eq!(log.len(), 4);

        let flat = FeedbackConfig {
            anneal: false,
            ..cfg
        };
        let (_, log) = run_feedback(&h1, &h2, &mem, &store, &bank, &flat).unwrap();
        assert!(log.records.iter().filter_map(|r| r.alpha).all(|a| a == 0.8));
    }

    #[test]
    fn wta_log_invariants_and_counters() {
        let (store, mem, bank) = toy_world(4);
        let h1 = store.layer1(0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for m in 1..=3 {
            let cfg = FeedbackConfig {
                m,
                iterations: 3,
                ..Default::default()
            };
            for _ in 0..20 {
                let h2 = Layer2Activity((0..8).map(|_| rng.random_range(-1.0..3.0)).collect());
                let (label, log) = run_feedback(&h1, &h2, &mem, &store, &bank, &cfg).unwrap();
                assert_eq!(Some(label), log.final_label());
                for r in &log.records[..3] {
                    assert_eq!(r.cluster_distance_evals, m * mem.k2);
                    assert_eq!(r.samples.len(), m);
                    let chosen = &r.samples[r.chosen.unwrap()];
                    assert!(r.samples.iter().all(|s| chosen.distance <= s.distance));
                }
            }
        }
        let ncs = FeedbackConfig {
            scheme: Scheme::NonClassSpecific,
            ..Default::default()
        };
        let (_, log) = run_feedback(
            &h1,
            &Layer2Activity(store.h2.row(1).to_vec()),
            &mem,
            &store,
            &bank,
            &ncs,
        )
        .unwrap();
        assert_eq!(log.records[0].cluster_distance_evals, 4 * mem.k2);
    }

    #[test]
    fn runs_are_deterministic() {
        let (store, mem, bank) = toy_world(7);
        let cfg = FeedbackConfig {
            layer1_feedback: true,
            ..Default::default()
        };
        let h1 = store.layer1(5).unwrap();
        let h2 = Layer2Activity(store.h2.row(5).to_vec());
        let (a, la) = run_feedback(&h1, &h2, &mem, &store, &bank, &cfg).unwrap();
        let (b, lb) = run_feedback(&h1, &h2, &mem, &store, &bank, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(la.without_timing(), lb.without_timing());
    }

    #[test]
    fn inconsistent_artifacts_fail_at_entry() {
        let (store, mem, bank) = toy_world(9);
        let narrow = ActivityStore::from_rows(Array2::zeros((4, 4)), vec![0, 1, 2, 3]).unwrap();
        let h1 = Layer1Activity::zeros(2, 2);
        let h2 = Layer2Activity(vec![0.0; 8]);
        let err =
            run_feedback(&h1, &h2, &mem, &narrow, &bank, &FeedbackConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));

        let no_h1 = ActivityStore::from_rows(store.h2.clone(), store.labels.clone()).unwrap();
        let cfg = FeedbackConfig {
            layer1_feedback: true,
            ..Default::default()
        };
        assert!(matches!(
            run_feedback(&h1, &h2, &mem, &no_h1, &bank, &cfg),
            Err(Error::Unsupported(_))
        ));

        let bad = FeedbackConfig {
            m: 4,
            ..Default::default()
        };
        assert!(matches!(
            run_feedback(&h1, &h2, &mem, &store, &bank, &bad),
            Err(Error::Config(_))
        ));
        let bad = FeedbackConfig {
            alpha: -1.0,
            ..Default::default()
        };
        assert!(matches!(
            run_feedback(&h1, &h2, &mem, &store, &bank, &bad),
            Err(Error::Config(_))
        ));
    }

    fn vec_strategy(n: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-100.0f64..100.0, n)
    }

    proptest! {
        #[test]
        fn layer2_merge_is_a_contraction_towards_the_sample(
            h in vec_strategy(16), s in vec_strategy(16), alpha in 0.0f64..50.0
        ) {
            let (h, s) = (Array1::from(h), Array1::from(s));
            let m = merge_layer2(h.view(), s.view(), alpha);
            for ((&mv, &hv), &sv) in m.iter().zip(&h).zip(&s) {
                let (lo, hi) = (hv.min(sv), hv.max(sv));
                prop_assert!(mv >= lo - 1e-12 * lo.abs().max(1.0) && mv <= hi + 1e-12 * hi.abs().max(1.0));
            }
            let lhs = (&m - &s).mapv(|v| v * v).sum().sqrt();
            let rhs = (&h - &s).mapv(|v| v * v).sum().sqrt() / (1.0 + alpha);
            prop_assert!((lhs - rhs).abs() <= 1e-10 * rhs.max(1e-300), "{} vs {}", lhs, rhs);
        }

        #[test]
        fn layer1_merge_is_convex(
            a in proptest::collection::vec(0.0f32..10.0, 12),
            b in proptest::collection::vec(0.0f32..10.0, 12),
            beta in 0.0f64..20.0
        ) {
            let x = Layer1Activity::from_vec(2, 3, a).unwrap();
            let y = Layer1Activity::from_vec(2, 3, b).unwrap();
            let m = merge_layer1(&x, &y, beta).unwrap();
            for ((&mv, &p), &q) in m.as_slice().iter().zip(x.as_slice()).zip(y.as_slice()) {
                prop_assert!(mv >= p.min(q) && mv <= p.max(q));
            }
        }
    }
}
