//! Binary restricted Boltzmann machine over binarized Layer-2 activity,
//! used as a Gibbs-sampling alternative to the feedback loop.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::classifiers::{train_linear_svm, LinearClassifier, SvmParams};
use crate::dataset::ImageRecord;
use crate::error::{Error, Result};
use crate::features::Dictionary;
use crate::memory::{activities, LowPass};

/// Per-dimension thresholds; an entry is on when strictly above its threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct Binarizer {
    pub thresholds: Array1<f64>,
}

impl Binarizer {
    pub fn constant(dim: usize, threshold: f64) -> Self {
        Self {
            thresholds: Array1::from_elem(dim, threshold),
        }
    }

    /// Median of every column (mean of the two middle values for even counts).
    pub fn fit_median(rows: ArrayView2<f64>) -> Result<Self> {
        if rows.nrows() == 0 {
            return Err(Error::Config(
                "cannot fit binarization thresholds on zero rows".into(),
            ));
        }
        let thresholds = rows.map_axis(Axis(0), |col| {
            let mut v = col.to_vec();
            v.sort_by(f64::total_cmp);
            let n = v.len();
            if n % 2 == 1 {
                v[n / 2]
            } else {
                0.5 * (v[n / 2 - 1] + v[n / 2])
            }
        });
        Ok(Self { thresholds })
    }

    pub fn dim(&self) -> usize {
        self.thresholds.len()
    }

    pub fn apply(&self, h2: ArrayView1<f64>) -> Array1<f32> {
        ndarray::Zip::from(&h2)
            .and(&self.thresholds)
            .map_collect(|&v, &t| if v > t { 1.0 } else { 0.0 })
    }

    pub fn apply_rows(&self, rows: ArrayView2<f64>) -> Array2<f32> {
        let mut out = Array2::zeros(rows.dim());
        for (mut o, r) in out.outer_iter_mut().zip(rows.outer_iter()) {
            o.assign(&self.apply(r));
        }
        out
    }
}

/// Single-threshold binarization.
pub fn binarize(h2: ArrayView1<f64>, threshold: f64) -> Array1<f32> {
    h2.mapv(|v| if v > threshold { 1.0 } else { 0.0 })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RbmParams {
    pub hidden: usize,
    pub lr: f32,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Standard deviation of the initial weights.
    pub init_std: f32,
}

impl Default for RbmParams {
    fn default() -> Self {
        Self {
            hidden: 800,
            lr: 0.1,
            batch: 100,
            epochs: 100,
            seed: 0,
            init_std: 0.01,
        }
    }
}

/// The same `weights` matrix drives both conditionals: `p(h|v)` through
/// `v W` and `p(v|h)` through `h W^T`.
#[derive(Debug, Clone, PartialEq)]
pub struct RbmModel {
    /// `V x H`.
    pub weights: Array2<f32>,
    pub visible_bias: Array1<f32>,
    pub hidden_bias: Array1<f32>,
}

#[inline]
fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

impl RbmModel {
    pub fn zeros(visible: usize, hidden: usize) -> Self {
        Self {
            weights: Array2::zeros((visible, hidden)),
            visible_bias: Array1::zeros(visible),
            hidden_bias: Array1::zeros(hidden),
        }
    }

    pub fn visible(&self) -> usize {
        self.weights.nrows()
    }

    pub fn hidden(&self) -> usize {
        self.weights.ncols()
    }

    /// `p(h = 1 | v)` for each row of `v`.
    pub fn hidden_probs(&self, v: ArrayView2<f32>) -> Array2<f32> {
        let mut a = v.dot(&self.weights) + self.hidden_bias.view().insert_axis(Axis(0));
        a.mapv_inplace(sigmoid);
        a
    }

    /// `p(v = 1 | h)` for each row of `h`.
    pub fn visible_probs(&self, h: ArrayView2<f32>) -> Array2<f32> {
        let mut a = h.dot(&self.weights.t()) + self.visible_bias.view().insert_axis(Axis(0));
        a.mapv_inplace(sigmoid);
        a
    }

    /// `F(v) = -b.v - sum_j log(1 + exp(c_j + v.W_j))`; `-F` is the
    /// unnormalized log-probability of `v`.
    pub fn free_energy(&self, v: ArrayView1<f32>) -> f64 {
        let act = v.dot(&self.weights) + &self.hidden_bias;
        let softplus: f64 = act
            .iter()
            .map(|&x| {
                let x = x as f64;
                if x > 30.0 {
                    x
                } else {
                    x.exp().ln_1p()
                }
            })
            .sum();
        -(v.dot(&self.visible_bias) as f64) - softplus
    }

    /// Bits that differ between `v` and its thresholded mean-field reconstruction.
    pub fn reconstruction_flips(&self, v: ArrayView1<f32>) -> usize {
        let vv = v.insert_axis(Axis(0));
        let pv = self.visible_probs(self.hidden_probs(vv).view());
        v.iter()
            .zip(pv.iter())
            .filter(|(&a, &p)| (a > 0.5) != (p > 0.5))
            .count()
    }

    /// Squared error between `v` and its mean-field reconstruction.
    pub fn reconstruction_error(&self, v: ArrayView1<f32>) -> f64 {
        let vv = v.insert_axis(Axis(0));
        let pv = self.visible_probs(self.hidden_probs(vv).view());
        v.iter()
            .zip(pv.iter())
            .map(|(&a, &p)| ((a - p) as f64).powi(2))
            .sum()
    }
}

#[derive(Debug, Clone)]
pub struct RbmTraining {
    pub model: RbmModel,
    /// Mean over rows of the squared reconstruction error, one entry per epoch.
    pub reconstruction_error: Vec<f64>,
}

fn check_binary(data: ArrayView2<f32>) -> Result<()> {
    if let Some((i, v)) = data.iter().enumerate().find(|(_, &v)| v != 0.0 && v != 1.0) {
        return Err(Error::Config(format!(
            "RBM input must be binary; entry {i} is {v}"
        )));
    }
    Ok(())
}

fn bernoulli(p: &Array2<f32>, rng: &mut ChaCha8Rng) -> Array2<f32> {
    p.mapv(|p| if rng.random::<f32>() < p { 1.0 } else { 0.0 })
}

/// Contrastive divergence with one Gibbs step. Hidden states are sampled,
/// the reconstruction and negative-phase hidden units use probabilities.
pub fn train_rbm(data: ArrayView2<f32>, params: &RbmParams) -> Result<RbmTraining> {
    check_binary(data)?;
    if params.hidden == 0 || params.batch == 0 {
        return Err(Error::Config(
            "RBM hidden count and batch size must be positive".into(),
        ));
    }
    let (n, visible) = data.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut model = RbmModel::zeros(visible, params.hidden);
    if params.init_std > 0.0 {
        let normal = Normal::new(0.0, params.init_std).map_err(|e| Error::Config(e.to_string()))?;
        model.weights.mapv_inplace(|_| normal.sample(&mut rng));
    }

    let mut order: Vec<usize> = (0..n).collect();
    let mut errors = Vec::with_capacity(params.epochs);
    for _ in 0..params.epochs {
        order.shuffle(&mut rng);
        let mut err_sum = 0.0f64;
        for chunk in order.chunks(params.batch) {
            let v0 = data.select(Axis(0), chunk);
            let ph0 = model.hidden_probs(v0.view());
            let h0 = bernoulli(&ph0, &mut rng);
            let pv1 = model.visible_probs(h0.view());
            let ph1 = model.hidden_probs(pv1.view());

            let scale = params.lr / chunk.len() as f32;
            let pos = v0.t().dot(&ph0);
            let neg = pv1.t().dot(&ph1);
            model.weights.scaled_add(scale, &(pos - neg));
            model
                .visible_bias
                .scaled_add(scale, &(&v0 - &pv1).sum_axis(Axis(0)));
            model
                .hidden_bias
                .scaled_add(scale, &(&ph0 - &ph1).sum_axis(Axis(0)));

            err_sum += (&v0 - &pv1).mapv(|d| (d as f64) * (d as f64)).sum();
        }
        errors.push(err_sum / n.max(1) as f64);
    }
    if model.weights.iter().any(|w| !w.is_finite()) {
        return Err(Error::Degenerate(
            "RBM weights diverged; lower the learning rate".into(),
        ));
    }
    Ok(RbmTraining {
        model,
        reconstruction_error: errors,
    })
}

/// Alternating Gibbs sweeps started from `v0`. Returns the visible
/// probabilities of the last sweep, or a binary sample of them when
/// `binary_readout` is set; zero sweeps return `v0`.
pub fn gibbs_correct(
    v0: ArrayView1<f32>,
    model: &RbmModel,
    epochs: usize,
    seed: u64,
    binary_readout: bool,
) -> Array1<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = v0.to_owned().insert_axis(Axis(0));
    for sweep in 0..epochs {
        let ph = model.hidden_probs(v.view());
        let h = bernoulli(&ph, &mut rng);
        let pv = model.visible_probs(h.view());
        v = if sweep + 1 < epochs || binary_readout {
            bernoulli(&pv, &mut rng)
        } else {
            pv
        };
    }
    v.remove_axis(Axis(0))
}

/// Seed used for row `index` of a batch.
pub fn row_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// [`gibbs_correct`] on every row, row `i` seeded with [`row_seed`].
pub fn gibbs_correct_rows(
    rows: ArrayView2<f32>,
    model: &RbmModel,
    epochs: usize,
    seed: u64,
    binary_readout: bool,
) -> Array2<f32> {
    let out: Vec<Array1<f32>> = (0..rows.nrows())
        .into_par_iter()
        .map(|i| {
            gibbs_correct(
                rows.row(i),
                model,
                epochs,
                row_seed(seed, i),
                binary_readout,
            )
        })
        .collect();
    let mut m = Array2::zeros(rows.dim());
    for (mut dst, src) in m.outer_iter_mut().zip(out) {
        dst.assign(&src);
    }
    m
}

/// Binarizer, RBM and the linear classifier trained on binarized activity.
#[derive(Debug, Clone, PartialEq)]
pub struct RbmBaseline {
    pub binarizer: Binarizer,
    pub model: RbmModel,
    pub classifier: LinearClassifier,
}

#[derive(Debug, Clone)]
pub struct RbmBaselineTraining {
    pub baseline: RbmBaseline,
    pub reconstruction_error: Vec<f64>,
}

pub fn train_rbm_baseline(
    h2_rows: ArrayView2<f64>,
    labels: &[u8],
    rbm: &RbmParams,
    svm: &SvmParams,
) -> Result<RbmBaselineTraining> {
    let binarizer = Binarizer::fit_median(h2_rows)?;
    let binary = binarizer.apply_rows(h2_rows);
    let training = train_rbm(binary.view(), rbm)?;
    let classes: Vec<u8> = {
        let mut c = labels.to_vec();
        c.sort_unstable();
        c.dedup();
        c
    };
    let classifier = train_linear_svm(binary.mapv(f64::from).view(), labels, &classes, svm)?;
    Ok(RbmBaselineTraining {
        baseline: RbmBaseline {
            binarizer,
            model: training.model,
            classifier,
        },
        reconstruction_error: training.reconstruction_error,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct GibbsReadout {
    pub epochs: usize,
    pub seed: u64,
    pub binary: bool,
}

impl RbmBaseline {
    fn check(&self, dim: usize) -> Result<()> {
        let dims = [
            self.binarizer.dim(),
            self.model.visible(),
            self.classifier.dim(),
        ];
        if dims.iter().any(|&d| d != dim) {
            return Err(Error::Dimension(format!(
                "activity width {dim} vs binarizer/RBM/classifier widths {dims:?}"
            )));
        }
        Ok(())
    }

    /// Labels for Layer-2 rows; row `i` uses [`row_seed`]`(readout.seed, i)`.
    pub fn classify_rows(
        &self,
        h2_rows: ArrayView2<f64>,
        readout: &GibbsReadout,
    ) -> Result<Vec<u8>> {
        self.check(h2_rows.ncols())?;
        let binary = self.binarizer.apply_rows(h2_rows);
        let corrected = gibbs_correct_rows(
            binary.view(),
            &self.model,
            readout.epochs,
            readout.seed,
            readout.binary,
        );
        Ok(self
            .classifier
            .predict_rows(corrected.mapv(f64::from).view()))
    }
}

/// encode, pool, binarize, correct, classify.
pub fn classify_with_rbm(
    image: &ImageRecord,
    dict: &Dictionary,
    filter: LowPass,
    baseline: &RbmBaseline,
    readout: &GibbsReadout,
) -> Result<u8> {
    baseline.check(4 * dict.k())?;
    let (_, h2) = activities(image, dict, filter);
    let v0 = baseline.binarizer.apply(h2.view());
    let v = gibbs_correct(
        v0.view(),
        &baseline.model,
        readout.epochs,
        readout.seed,
        readout.binary,
    );
    Ok(baseline.classifier.predict(v.mapv(f64::from).view()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn binarize_examples() {
        assert_eq!(
            binarize(array![0.0, 0.0, 0.0].view(), 0.0),
            array![0.0f32, 0.0, 0.0]
        );
        assert_eq!(binarize(array![0.1, 0.9].view(), 0.5), array![0.0f32, 1.0]);
    }

    #[test]
    fn median_thresholds_balance_on_rates() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rows =
            Array2::from_shape_fn((501, 20), |(_, j)| rng.random::<f64>().powi(j as i32 + 1));
        let b = Binarizer::fit_median(rows.view()).unwrap();
        let on = b.apply_rows(rows.view());
        for col in on.axis_iter(Axis(1)) {
            let rate = col.sum() / col.len() as f32;
            assert!((0.4..=0.6).contains(&rate), "{rate}");
        }
    }

    #[test]
    fn defaults() {
        let p = RbmParams::default();
        assert_eq!((p.hidden, p.lr, p.batch, p.epochs), (800, 0.1, 100, 100));
    }

    #[test]
    fn zero_model_is_uniform() {
        let m = RbmModel::zeros(6, 4);
        let v = array![[1.0f32, 0.0, 1.0, 1.0, 0.0, 0.0]];
        assert!(m.hidden_probs(v.view()).iter().all(|&p| p == 0.5));
        assert!(m
            .visible_probs(array![[1.0f32, 0.0, 1.0, 0.0]].view())
            .iter()
            .all(|&p| p == 0.5));
    }

    #[test]
    fn non_binary_input_is_rejected() {
        let data = array![[0.0f32, 0.5]];
        assert!(matches!(
            train_rbm(data.view(), &RbmParams::default()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn first_update_raises_log_probability_of_the_data() {
        let v = array![1.0f32, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0];
        let data = Array2::from_shape_fn((10, 8), |(_, j)| v[j]);
        let before = RbmModel::zeros(8, 5);
        let params = RbmParams {
            hidden: 5,
            batch: 10,
            epochs: 1,
            init_std: 0.0,
            ..Default::default()
        };
        let after = train_rbm(data.view(), &params).unwrap().model;
        assert!(-after.free_energy(v.view()) > -before.free_energy(v.view()));
    }

    #[test]
    fn repeated_vector_is_memorized() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let v: Array1<f32> = (0..64)
            .map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 })
            .collect();
        let data = Array2::from_shape_fn((100, 64), |(_, j)| v[j]);
        let params = RbmParams {
            hidden: 32,
            batch: 10,
            epochs: 50,
            ..Default::default()
        };
        let model = train_rbm(data.view(), &params).unwrap().model;
        assert!((model.reconstruction_flips(v.view()) as f64) < 0.05 * 64.0);
    }

    #[test]
    fn reconstruction_error_drops_over_training() {
        // two prototypes with 5% bit noise
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let protos: Vec<Vec<bool>> = (0..2)
            .map(|_| (0..40).map(|_| rng.random_bool(0.5)).collect())
            .collect();
        let data = Array2::from_shape_fn((300, 40), |(i, j)| {
            let bit = protos[i % 2][j] ^ rng.random_bool(0.05);
            if bit {
                1.0f32
            } else {
                0.0
            }
        });
        let params = RbmParams {
            hidden: 20,
            epochs: 10,
            batch: 20,
            ..Default::default()
        };
        let log = train_rbm(data.view(), &params)
            .unwrap()
            .reconstruction_error;
        assert_eq!(log.len(), 10);
        assert!(log[9] <= log[0], "{log:?}");
    }

    fn small_model() -> RbmModel {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data = Array2::from_shape_fn(
            (50, 12),
            |_| if rng.random_bool(0.5) { 1.0f32 } else { 0.0 },
        );
        train_rbm(
            data.view(),
            &RbmParams {
                hidden: 6,
                epochs: 3,
                batch: 10,
                ..Default::default()
            },
        )
        .unwrap()
        .model
    }

    #[test]
    fn gibbs_correction_properties() {
        let model = small_model();
        let v0 = array![1.0f32, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0, 1.0];
        assert_eq!(gibbs_correct(v0.view(), &model, 0, 9, false), v0);
        let a = gibbs_correct(v0.view(), &model, 5, 9, false);
        assert!(a.iter().all(|&p| (0.0..=1.0).contains(&p)));
        assert_eq!(a, gibbs_correct(v0.view(), &model, 5, 9, false));
        let b = gibbs_correct(v0.view(), &model, 5, 9, true);
        assert!(b.iter().all(|&p| p == 0.0 || p == 1.0));
    }

    #[test]
    fn batch_correction_matches_single_rows() {
        let model = small_model();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rows =
            Array2::from_shape_fn((7, 12), |_| if rng.random_bool(0.5) { 1.0f32 } else { 0.0 });
        let batch = gibbs_correct_rows(rows.view(), &model, 3, 11, false);
        for i in 0..7 {
            assert_eq!(
                batch.row(i),
                gibbs_correct(rows.row(i), &model, 3, row_seed(11, i), false)
            );
        }
    }

    #[test]
    fn zero_sweeps_classify_the_binarized_activity() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let labels: Vec<u8> = (0..60).map(|i| (i % 3) as u8).collect();
        let h2 = Array2::from_shape_fn((60, 8), |(i, j)| {
            rng.random::<f64>() + if j % 3 == i % 3 { 1.0 } else { 0.0 }
        });
        let rbm = RbmParams {
            hidden: 6,
            epochs: 2,
            batch: 20,
            ..Default::default()
        };
        let base = train_rbm_baseline(h2.view(), &labels, &rbm, &SvmParams::default())
            .unwrap()
            .baseline;
        let got = base
            .classify_rows(h2.view(), &GibbsReadout::default())
            .unwrap();
        let direct = base
            .classifier
            .predict_rows(base.binarizer.apply_rows(h2.view()).mapv(f64::from).view());
        assert_eq!(got, direct);
        assert!(matches!(
            base.classify_rows(Array2::zeros((1, 4)).view(), &GibbsReadout::default()),
            Err(Error::Dimension(_))
        ));
    }
}
