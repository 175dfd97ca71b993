//! Experiment driver: occlusion sweeps over trained artifacts, the 2-D toy
//! imputation model, timing fits and result files.

pub mod config;
pub mod output;
pub mod timing;
pub mod toy;

use std::path::PathBuf;
use std::str::FromStr;
use std::time::{Duration, Instant};

use ndarray::{Array2, ArrayView2, Axis};
use rayon::prelude::*;
use serde::Serialize;

use crate::classifiers::{train_bank, HypothesisBank, SvmParams};
use crate::dataset::{
    augment_with_occlusions, load_test_dir, load_train_dir, occlude, synthetic::SyntheticShapes,
    ImageRecord, OcclusionSpec, NUM_CLASSES,
};
use crate::error::{Error, Result};
use crate::features::{learn_dictionary, Dictionary, DictionaryParams, Layer1Activity};
use crate::feedback::{run_feedback, FeedbackConfig};
use crate::memory::{
    activities, build_cluster_memory, build_store, ActivityStore, ClusterMemory, H1Mode, LowPass,
    MemoryParams, StoreOptions,
};
use crate::rbm::{train_rbm_baseline, GibbsReadout, RbmBaseline, RbmParams};

/// Occlusion levels used throughout the experiments.
pub const OCCLUSION_LEVELS: [f64; 5] = [0.0, 0.11, 0.25, 0.33, 0.50];

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum DataSource {
    Synthetic { seed: u64 },
    Cifar { dir: PathBuf },
}

impl DataSource {
    /// Training and test images, each a prefix of its split.
    pub fn load(&self, train: usize, test: usize) -> Result<(Vec<ImageRecord>, Vec<ImageRecord>)> {
        match self {
            DataSource::Synthetic { seed } => {
                let gen = SyntheticShapes::new(*seed);
                Ok((gen.generate(train), gen.test_split().generate(test)))
            }
            DataSource::Cifar { dir } => {
                let test_set = load_test_dir(dir, test)?;
                if test_set.len() < test {
                    return Err(Error::Config(format!(
                        "requested {test} test records, the test batch holds {}",
                        test_set.len()
                    )));
                }
                Ok((load_train_dir(dir, train)?, test_set))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Baseline {
    Feedforward,
    Feedback,
    Rbm,
}

impl FromStr for Baseline {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "feedforward" => Ok(Self::Feedforward),
            "feedback" => Ok(Self::Feedback),
            "rbm" => Ok(Self::Rbm),
            other => Err(Error::Config(format!(
                "unknown baseline '{other}' (expected feedforward|feedback|rbm)"
            ))),
        }
    }
}

impl std::fmt::Display for Baseline {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Feedforward => "feedforward",
            Self::Feedback => "feedback",
            Self::Rbm => "rbm",
        })
    }
}

/// Everything a sweep needs. Every list is a grid axis.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub source: DataSource,
    pub train_count: usize,
    pub test_count: usize,
    /// The `seed` field here is replaced by [`ExperimentSpec::seed`].
    pub dictionary: DictionaryParams,
    pub lowpass: LowPass,
    /// Keep Layer-1 rows in the store, needed by Layer-1 feedback.
    pub store_h1: bool,
    pub k2: Vec<usize>,
    /// The `seed` field here is replaced by [`ExperimentSpec::seed`].
    pub svm: SvmParams,
    pub feedback: Vec<FeedbackConfig>,
    pub occlusions: Vec<f64>,
    /// Train the bank on clean data (`false`) and/or on the augmented set (`true`).
    pub augment: Vec<bool>,
    pub augment_levels: Vec<f64>,
    pub baselines: Vec<Baseline>,
    /// The `seed` field here is replaced by [`ExperimentSpec::seed`].
    pub rbm: RbmParams,
    pub gibbs_epochs: Vec<usize>,
    pub binary_readout: bool,
    pub seed: u64,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self::desk()
    }
}

impl ExperimentSpec {
    /// 10k train / 2k test, K = 200, K2 = 50.
    pub fn desk() -> Self {
        Self {
            source: DataSource::Synthetic { seed: 0 },
            train_count: 10_000,
            test_count: 2_000,
            dictionary: DictionaryParams::default(),
            lowpass: LowPass::Box3,
            store_h1: false,
            k2: vec![50],
            svm: SvmParams::default(),
            feedback: vec![FeedbackConfig::default()],
            occlusions: OCCLUSION_LEVELS.to_vec(),
            augment: vec![false],
            augment_levels: OCCLUSION_LEVELS[1..].to_vec(),
            baselines: vec![Baseline::Feedforward, Baseline::Feedback],
            rbm: RbmParams::default(),
            gibbs_epochs: vec![0, 1, 5, 20],
            binary_readout: false,
            seed: 0,
        }
    }

    /// All 50k training and 10k test images.
    pub fn full_scale() -> Self {
        Self {
            train_count: 50_000,
            test_count: 10_000,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let empty = [
            ("k2", self.k2.is_empty()),
            ("feedback", self.feedback.is_empty()),
            ("occlusion", self.occlusions.is_empty()),
            ("augment", self.augment.is_empty()),
            ("baselines", self.baselines.is_empty()),
        ];
        if let Some((name, _)) = empty.iter().find(|(_, e)| *e) {
            return Err(Error::Config(format!("grid axis `{name}` is empty")));
        }
        if self.train_count == 0 || self.test_count == 0 {
            return Err(Error::Config(
                "train and test counts must be positive".into(),
            ));
        }
        for &f in self.occlusions.iter().chain(&self.augment_levels) {
            OcclusionSpec::new(f)?;
        }
        if self.augment.contains(&true) && self.augment_levels.is_empty() {
            return Err(Error::Config(
                "augmentation needs at least one level".into(),
            ));
        }
        if self.baselines.contains(&Baseline::Rbm) && self.gibbs_epochs.is_empty() {
            return Err(Error::Config(
                "rbm baseline needs at least one gibbs epoch count".into(),
            ));
        }
        Ok(())
    }

    fn dictionary_params(&self) -> DictionaryParams {
        DictionaryParams {
            seed: self.seed,
            ..self.dictionary
        }
    }

    fn svm_params(&self) -> SvmParams {
        SvmParams {
            seed: self.seed,
            ..self.svm
        }
    }

    fn rbm_params(&self) -> RbmParams {
        RbmParams {
            seed: self.seed,
            ..self.rbm
        }
    }
}

/// Wall-clock measurements, kept apart so the rest of a row is reproducible.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct RowTiming {
    /// Mean per-image time of the classification stage, after encoding.
    pub mean_test_us: f64,
    /// Mean per-image time spent inside feedback iterations.
    pub mean_loop_us: f64,
}

/// One evaluated grid point.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResultRow {
    pub baseline: Baseline,
    pub occlusion: f64,
    pub augmented: bool,
    pub k2: Option<usize>,
    pub feedback: Option<FeedbackConfig>,
    pub gibbs_epochs: Option<usize>,
    pub seed: u64,
    /// Reason the grid point could not be evaluated.
    pub failure: Option<String>,
    pub test_images: usize,
    pub accuracy: f64,
    /// Accuracy of the first hypothesis after 0, 1, ..., T iterations.
    pub accuracy_by_iteration: Vec<f64>,
    pub per_class: Vec<f64>,
    /// Per image, summed over iterations.
    pub cluster_distance_evals: f64,
    pub store_distance_evals: f64,
    /// Mean visible units flipped by one reconstruction of the binarized input.
    pub reconstruction_flips: Option<f64>,
    pub timing: RowTiming,
}

impl ResultRow {
    fn blank(baseline: Baseline, occlusion: f64, augmented: bool, seed: u64) -> Self {
        Self {
            baseline,
            occlusion,
            augmented,
            k2: None,
            feedback: None,
            gibbs_epochs: None,
            seed,
            failure: None,
            test_images: 0,
            accuracy: 0.0,
            accuracy_by_iteration: Vec::new(),
            per_class: Vec::new(),
            cluster_distance_evals: 0.0,
            store_distance_evals: 0.0,
            reconstruction_flips: None,
            timing: RowTiming::default(),
        }
    }

    fn fail(mut self, err: &Error) -> Self {
        self.failure = Some(err.to_string());
        self
    }

    fn with_labels(mut self, predicted: &[u8], truth: &[u8]) -> Self {
        self.test_images = truth.len();
        self.accuracy = accuracy(predicted, truth);
        self.per_class = per_class_accuracy(predicted, truth, NUM_CLASSES);
        self
    }

    pub fn is_ok(&self) -> bool {
        self.failure.is_none()
    }

    /// The row with wall-clock fields zeroed.
    pub fn without_timing(&self) -> Self {
        Self {
            timing: RowTiming::default(),
            ..self.clone()
        }
    }

    /// Gain of the final accuracy over the feedforward (iteration 0) accuracy.
    pub fn gain(&self) -> f64 {
        self.accuracy
            - self
                .accuracy_by_iteration
                .first()
                .copied()
                .unwrap_or(self.accuracy)
    }
}

pub fn accuracy(predicted: &[u8], truth: &[u8]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    predicted.iter().zip(truth).filter(|(p, t)| p == t).count() as f64 / truth.len() as f64
}

/// Accuracy within each true class; classes absent from `truth` get 0.
pub fn per_class_accuracy(predicted: &[u8], truth: &[u8], classes: usize) -> Vec<f64> {
    let mut hit = vec![0usize; classes];
    let mut total = vec![0usize; classes];
    for (&p, &t) in predicted.iter().zip(truth) {
        total[t as usize] += 1;
        if p == t {
            hit[t as usize] += 1;
        }
    }
    hit.iter()
        .zip(&total)
        .map(|(&h, &n)| if n == 0 { 0.0 } else { h as f64 / n as f64 })
        .collect()
}

/// Parameters that determine the trained artifacts.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainParams {
    pub dictionary: DictionaryParams,
    pub store: StoreOptions,
    pub memory: MemoryParams,
    pub svm: SvmParams,
    /// Occlusion levels added to the bank's training set; empty for clean training.
    pub augment_levels: Vec<f64>,
}

#[derive(Debug)]
pub struct Artifacts {
    pub dictionary: Dictionary,
    pub store: ActivityStore,
    pub memory: ClusterMemory,
    pub bank: HypothesisBank,
}

pub fn train_artifacts(train: &[ImageRecord], params: &TrainParams) -> Result<Artifacts> {
    let dictionary = learn_dictionary(train, &params.dictionary)?;
    let store = build_store(train, &dictionary, &params.store)?;
    let memory = build_cluster_memory(&store, &params.memory)?;
    let bank = train_bank_for(
        train,
        &dictionary,
        &store,
        &params.augment_levels,
        &params.svm,
    )?;
    Ok(Artifacts {
        dictionary,
        store,
        memory,
        bank,
    })
}

/// Layer-2 rows of `images` after occluding each one.
pub fn activity_rows(
    images: &[ImageRecord],
    dict: &Dictionary,
    filter: LowPass,
    occlusion: f64,
) -> Result<Array2<f64>> {
    let spec = OcclusionSpec::new(occlusion)?;
    let rows: Vec<Vec<f64>> = images
        .par_iter()
        .map(|img| activities(&occlude(img, &spec), dict, filter).1 .0)
        .collect();
    let mut out = Array2::zeros((images.len(), 4 * dict.k()));
    for (mut dst, src) in out.outer_iter_mut().zip(rows) {
        dst.assign(&ndarray::ArrayView1::from(&src));
    }
    Ok(out)
}

/// Bank on the store rows, plus the occluded copies when `levels` is non-empty.
/// The dictionary and store are not changed by augmentation.
pub fn train_bank_for(
    train: &[ImageRecord],
    dict: &Dictionary,
    store: &ActivityStore,
    levels: &[f64],
    svm: &SvmParams,
) -> Result<HypothesisBank> {
    if levels.is_empty() {
        return train_bank(store.h2.view(), &store.labels, svm);
    }
    let augmented = augment_with_occlusions(train, levels)?;
    let extra = &augmented[train.len()..];
    let extra_rows = activity_rows(extra, dict, store.lowpass, 0.0)?;
    let rows = ndarray::concatenate(Axis(0), &[store.h2.view(), extra_rows.view()])
        .map_err(|e| Error::Dimension(e.to_string()))?;
    let labels: Vec<u8> = augmented.iter().map(|r| r.label()).collect();
    train_bank(rows.view(), &labels, svm)
}

pub fn eval_feedforward(
    rows: ArrayView2<f64>,
    truth: &[u8],
    bank: &HypothesisBank,
) -> (Vec<u8>, RowTiming) {
    let timed: Vec<(u8, Duration)> = (0..rows.nrows())
        .into_par_iter()
        .map(|i| {
            let start = Instant::now();
            let label = bank.full.predict(rows.row(i));
            (label, start.elapsed())
        })
        .collect();
    let n = truth.len().max(1) as f64;
    let total: Duration = timed.iter().map(|t| t.1).sum();
    (
        timed.into_iter().map(|t| t.0).collect(),
        RowTiming {
            mean_test_us: total.as_secs_f64() * 1e6 / n,
            mean_loop_us: 0.0,
        },
    )
}

/// Feedback summary over a test set.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackEval {
    pub labels: Vec<u8>,
    pub accuracy_by_iteration: Vec<f64>,
    pub cluster_distance_evals: f64,
    pub store_distance_evals: f64,
    pub timing: RowTiming,
}

/// Runs the loop on every test image. `images` are the occluded test images,
/// needed only when Layer-1 feedback re-encodes them.
#[allow(clippy::too_many_arguments)]
pub fn eval_feedback(
    images: &[ImageRecord],
    rows: ArrayView2<f64>,
    truth: &[u8],
    dict: &Dictionary,
    mem: &ClusterMemory,
    store: &ActivityStore,
    bank: &HypothesisBank,
    cfg: &FeedbackConfig,
) -> Result<FeedbackEval> {
    cfg.validate()?;
    let empty = Layer1Activity::zeros(0, 0);
    let runs: Vec<Result<(Vec<u8>, usize, usize, Duration, Duration)>> = (0..rows.nrows())
        .into_par_iter()
        .map(|i| {
            let (h1, h2) = if cfg.layer1_feedback {
                activities(&images[i], dict, store.lowpass)
            } else {
                (empty.clone(), rows.row(i).to_owned().into())
            };
            let start = Instant::now();
            let (_, log) = run_feedback(&h1, &h2, mem, store, bank, cfg)?;
            let total = start.elapsed();
            let iterations = &log.records[..log.records.len() - 1];
            Ok((
                log.labels(),
                iterations.iter().map(|r| r.cluster_distance_evals).sum(),
                iterations.iter().map(|r| r.store_distance_evals).sum(),
                iterations.iter().map(|r| r.elapsed).sum(),
                total,
            ))
        })
        .collect();
    let runs = runs.into_iter().collect::<Result<Vec<_>>>()?;
    let n = truth.len().max(1) as f64;
    let steps = cfg.iterations + 1;
    let accuracy_by_iteration = (0..steps)
        .map(|t| runs.iter().zip(truth).filter(|(r, &y)| r.0[t] == y).count() as f64 / n)
        .collect();
    Ok(FeedbackEval {
        labels: runs.iter().map(|r| r.0[cfg.iterations]).collect(),
        accuracy_by_iteration,
        cluster_distance_evals: runs.iter().map(|r| r.1 as f64).sum::<f64>() / n,
        store_distance_evals: runs.iter().map(|r| r.2 as f64).sum::<f64>() / n,
        timing: RowTiming {
            mean_test_us: runs.iter().map(|r| r.4.as_secs_f64()).sum::<f64>() * 1e6 / n,
            mean_loop_us: runs.iter().map(|r| r.3.as_secs_f64()).sum::<f64>() * 1e6 / n,
        },
    })
}

pub fn eval_rbm(
    rows: ArrayView2<f64>,
    baseline: &RbmBaseline,
    readout: &GibbsReadout,
) -> Result<(Vec<u8>, f64, RowTiming)> {
    let start = Instant::now();
    let labels = baseline.classify_rows(rows, readout)?;
    let elapsed = start.elapsed();
    let binary = baseline.binarizer.apply_rows(rows);
    let flips: usize = (0..binary.nrows())
        .into_par_iter()
        .map(|i| baseline.model.reconstruction_flips(binary.row(i)))
        .sum();
    let n = rows.nrows().max(1) as f64;
    Ok((
        labels,
        flips as f64 / n,
        RowTiming {
            mean_test_us: elapsed.as_secs_f64() * 1e6 / n,
            mean_loop_us: 0.0,
        },
    ))
}

/// Trains what the experiment needs and evaluates every grid point. Grid points
/// that cannot be trained or evaluated become failed rows.
pub fn run_sweep(spec: &ExperimentSpec) -> Result<Vec<ResultRow>> {
    spec.validate()?;
    let (train, test) = spec.source.load(spec.train_count, spec.test_count)?;
    run_sweep_on(spec, &train, &test)
}

/// [`run_sweep`] on images already in memory.
pub fn run_sweep_on(
    spec: &ExperimentSpec,
    train: &[ImageRecord],
    test: &[ImageRecord],
) -> Result<Vec<ResultRow>> {
    spec.validate()?;
    let seed = spec.seed;
    let dict = learn_dictionary(train, &spec.dictionary_params())?;
    let store = build_store(
        train,
        &dict,
        &StoreOptions {
            lowpass: spec.lowpass,
            h1: if spec.store_h1 {
                H1Mode::Memory
            } else {
                H1Mode::Off
            },
        },
    )?;
    let truth: Vec<u8> = test.iter().map(|r| r.label()).collect();

    let wants = |b| spec.baselines.contains(&b);
    let memories: Vec<(usize, Result<ClusterMemory>)> = if wants(Baseline::Feedback) {
        spec.k2
            .iter()
            .map(|&k2| {
                (
                    k2,
                    build_cluster_memory(&store, &MemoryParams::new(k2, seed)),
                )
            })
            .collect()
    } else {
        Vec::new()
    };
    let banks: Vec<(bool, Result<HypothesisBank>)> =
        if wants(Baseline::Feedforward) || wants(Baseline::Feedback) {
            spec.augment
                .iter()
                .map(|&aug| {
                    let levels: &[f64] = if aug { &spec.augment_levels } else { &[] };
                    (
                        aug,
                        train_bank_for(train, &dict, &store, levels, &spec.svm_params()),
                    )
                })
                .collect()
        } else {
            Vec::new()
        };
    let rbm = if wants(Baseline::Rbm) {
        Some(train_rbm_baseline(
            store.h2.view(),
            &store.labels,
            &spec.rbm_params(),
            &spec.svm_params(),
        ))
    } else {
        None
    };

    let mut out = Vec::new();
    for &occlusion in &spec.occlusions {
        let spec_o = OcclusionSpec::new(occlusion)?;
        let occluded: Vec<ImageRecord> = test.iter().map(|r| occlude(r, &spec_o)).collect();
        let rows = activity_rows(&occluded, &dict, spec.lowpass, 0.0)?;

        for (aug, bank) in &banks {
            if wants(Baseline::Feedforward) {
                let row = ResultRow::blank(Baseline::Feedforward, occlusion, *aug, seed);
                out.push(match bank {
                    Ok(bank) => {
                        let (labels, timing) = eval_feedforward(rows.view(), &truth, bank);
                        let mut row = row.with_labels(&labels, &truth);
                        row.accuracy_by_iteration = vec![row.accuracy];
                        row.timing = timing;
                        row
                    }
                    Err(e) => row.fail(e),
                });
            }
            if !wants(Baseline::Feedback) {
                continue;
            }
            for (k2, mem) in &memories {
                for cfg in &spec.feedback {
                    let mut row = ResultRow::blank(Baseline::Feedback, occlusion, *aug, seed);
                    row.k2 = Some(*k2);
                    row.feedback = Some(cfg.clone());
                    let result = match (bank, mem) {
                        (Err(e), _) | (_, Err(e)) => Err(Error::Config(e.to_string())),
                        (Ok(bank), Ok(mem)) => eval_feedback(
                            &occluded,
                            rows.view(),
                            &truth,
                            &dict,
                            mem,
                            &store,
                            bank,
                            cfg,
                        ),
                    };
                    out.push(match result {
                        Ok(ev) => {
                            let mut row = row.with_labels(&ev.labels, &truth);
                            row.accuracy_by_iteration = ev.accuracy_by_iteration;
                            row.cluster_distance_evals = ev.cluster_distance_evals;
                            row.store_distance_evals = ev.store_distance_evals;
                            row.timing = ev.timing;
                            row
                        }
                        Err(e) => row.fail(&e),
                    });
                }
            }
        }

        if let Some(rbm) = &rbm {
            for &epochs in &spec.gibbs_epochs {
                let mut row = ResultRow::blank(Baseline::Rbm, occlusion, false, seed);
                row.gibbs_epochs = Some(epochs);
                let readout = GibbsReadout {
                    epochs,
                    seed,
                    binary: spec.binary_readout,
                };
                let result = rbm
                    .as_ref()
                    .map_err(|e| Error::Config(e.to_string()))
                    .and_then(|t| eval_rbm(rows.view(), &t.baseline, &readout));
                out.push(match result {
                    Ok((labels, flips, timing)) => {
                        let mut row = row.with_labels(&labels, &truth);
                        row.accuracy_by_iteration = vec![row.accuracy];
                        row.reconstruction_flips = Some(flips);
                        row.timing = timing;
                        row
                    }
                    Err(e) => row.fail(&e),
                });
            }
        }
    }
    Ok(out)
}
