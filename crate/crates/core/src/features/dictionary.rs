//! Patch dictionary: brightness/contrast normalization, ZCA whitening and
//! K-means receptive fields.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{ImageRecord, CHANNELS, IMAGE_SIDE};
use crate::error::{Error, Result};
use crate::kmeans::{kmeans, KMeansParams};

/// Added to the patch variance before contrast normalization (pixel units).
pub const CONTRAST_REGULARIZER: f64 = 10.0;
/// Added to covariance eigenvalues before inversion.
pub const ZCA_EPSILON: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DictionaryParams {
    pub k: usize,
    pub patch_size: usize,
    pub patches_per_image: usize,
    pub seed: u64,
    pub kmeans_iters: usize,
    pub zca_epsilon: f64,
}

impl DictionaryParams {
    pub fn new(k: usize, patch_size: usize, patches_per_image: usize, seed: u64) -> Self {
        Self {
            k,
            patch_size,
            patches_per_image,
            seed,
            kmeans_iters: 30,
            zca_epsilon: ZCA_EPSILON,
        }
    }
}

impl Default for DictionaryParams {
    fn default() -> Self {
        Self::new(200, 6, 10, 0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dictionary {
    pub patch_size: usize,
    pub channels: usize,
    /// Mean of the normalized training patches.
    pub mean: Array1<f32>,
    /// Symmetric ZCA matrix, `dim x dim`.
    pub whitener: Array2<f32>,
    /// Receptive fields in whitened space, `K x dim`.
    pub fields: Array2<f32>,
}

impl Dictionary {
    pub fn k(&self) -> usize {
        self.fields.nrows()
    }

    pub fn dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    /// Side of the Layer-1 grid for stride-1 valid convolution.
    pub fn grid_side(&self) -> usize {
        IMAGE_SIDE + 1 - self.patch_size
    }

    pub fn validate(&self) -> Result<()> {
        let dim = self.dim();
        if self.mean.len() != dim || self.whitener.dim() != (dim, dim) || self.fields.ncols() != dim
        {
            return Err(Error::Dimension(format!(
                "dictionary with patch {}x{}x{} has mean {}, whitener {:?}, fields {:?}",
                self.patch_size,
                self.patch_size,
                self.channels,
                self.mean.len(),
                self.whitener.dim(),
                self.fields.dim()
            )));
        }
        Ok(())
    }

    /// Whitens rows that were already contrast-normalized.
    pub fn whiten(&self, normalized: &Array2<f32>) -> Array2<f32> {
        (normalized - &self.mean.view().insert_axis(Axis(0))).dot(&self.whitener)
    }
}

/// Copies the `w x w` window at (row, col) in channel-major order.
pub fn extract_patch(image: &ImageRecord, row: usize, col: usize, w: usize, out: &mut [f64]) {
    let mut i = 0;
    for c in 0..CHANNELS {
        for r in row..row + w {
            for cc in col..col + w {
                out[i] = image.pixel(c, r, cc) as f64;
                i += 1;
            }
        }
    }
}

/// Subtracts the patch mean and divides by `sqrt(var + 10)`; returns false
/// (leaving the patch untouched) when every value is identical.
pub fn normalize_patch(patch: &mut [f64]) -> bool {
    let n = patch.len() as f64;
    let mean = patch.iter().sum::<f64>() / n;
    let first = patch[0];
    if patch.iter().all(|&v| v == first) {
        return false;
    }
    let var = patch.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    let scale = 1.0 / (var + CONTRAST_REGULARIZER).sqrt();
    for v in patch.iter_mut() {
        *v = (*v - mean) * scale;
    }
    true
}

/// Randomly positioned, normalized, non-constant patches.
pub fn sample_patches(train: &[ImageRecord], params: &DictionaryParams) -> Array2<f64> {
    let w = params.patch_size;
    let dim = w * w * CHANNELS;
    let span = IMAGE_SIDE + 1 - w;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut rows = Vec::with_capacity(train.len() * params.patches_per_image * dim);
    let mut buf = vec![0.0; dim];
    let mut count = 0;
    for image in train {
        for _ in 0..params.patches_per_image {
            let r = rng.random_range(0..span);
            let c = rng.random_range(0..span);
            extract_patch(image, r, c, w, &mut buf);
            if normalize_patch(&mut buf) {
                rows.extend_from_slice(&buf);
                count += 1;
            }
        }
    }
    Array2::from_shape_vec((count, dim), rows).expect("patch buffer matches shape")
}

pub struct Whitening {
    pub mean: Array1<f64>,
    pub matrix: Array2<f64>,
}

pub fn covariance(rows: &Array2<f64>) -> (Array1<f64>, Array2<f64>) {
    let n = rows.nrows() as f64;
    let mean = rows.mean_axis(Axis(0)).expect("non-empty sample");
    let centered = rows - &mean.view().insert_axis(Axis(0));
    let cov = centered.t().dot(&centered) / (n - 1.0);
    (mean, cov)
}

/// `V diag(1 / sqrt(lambda + eps)) V^T` of the sample covariance.
pub fn fit_zca(rows: &Array2<f64>, epsilon: f64) -> Result<Whitening> {
    if rows.nrows() < 2 {
        return Err(Error::Degenerate(
            "whitening needs at least two patches".into(),
        ));
    }
    let (mean, cov) = covariance(rows);
    let dim = cov.nrows();
    if cov.diag().iter().all(|&v| v <= 0.0) {
        return Err(Error::Degenerate("patch sample has zero variance".into()));
    }
    let eig = SymmetricEigen::new(DMatrix::from_fn(dim, dim, |i, j| cov[[i, j]]));
    let scales = eig.eigenvalues.map(|l| 1.0 / (l.max(0.0) + epsilon).sqrt());
    let v = &eig.eigenvectors;
    let w = v * DMatrix::from_diagonal(&scales) * v.transpose();
    // symmetrize away round-off
    let matrix = Array2::from_shape_fn((dim, dim), |(i, j)| 0.5 * (w[(i, j)] + w[(j, i)]));
    Ok(Whitening { mean, matrix })
}

/// Fits whitening and receptive fields to an already-normalized patch matrix.
pub fn fit_from_patches(
    patches: &Array2<f64>,
    patch_size: usize,
    params: &DictionaryParams,
) -> Result<Dictionary> {
    let dim = patch_size * patch_size * CHANNELS;
    if patches.ncols() != dim {
        return Err(Error::Dimension(format!(
            "patches have {} columns, expected {dim}",
            patches.ncols()
        )));
    }
    let zca = fit_zca(patches, params.zca_epsilon)?;
    let whitened = (patches - &zca.mean.view().insert_axis(Axis(0))).dot(&zca.matrix);
    let fit = kmeans(
        whitened.view(),
        &KMeansParams {
            max_iters: params.kmeans_iters,
            ..KMeansParams::new(params.k, params.seed ^ 0xd1c7)
        },
    )?;
    let dict = Dictionary {
        patch_size,
        channels: CHANNELS,
        mean: zca.mean.mapv(|v| v as f32),
        whitener: zca.matrix.mapv(|v| v as f32),
        fields: fit.centers.mapv(|v| v as f32),
    };
    for (i, row) in dict.fields.outer_iter().enumerate() {
        let norm = row.dot(&row);
        if !norm.is_finite() || norm <= 0.0 {
            return Err(Error::Degenerate(format!(
                "receptive field {i} has norm {norm}"
            )));
        }
    }
    Ok(dict)
}

pub fn learn_dictionary(train: &[ImageRecord], params: &DictionaryParams) -> Result<Dictionary> {
    if params.k < 2 {
        return Err(Error::Config(format!(
            "dictionary needs K >= 2, got {}",
            params.k
        )));
    }
    if params.patch_size == 0 || params.patch_size > IMAGE_SIDE {
        return Err(Error::Config(format!(
            "patch size must be in 1..=32, got {}",
            params.patch_size
        )));
    }
    let patches = sample_patches(train, params);
    if patches.nrows() == 0 {
        return Err(Error::Degenerate("every sampled patch is constant".into()));
    }
    if patches.nrows() < 10 * params.k {
        return Err(Error::Config(format!(
            "dictionary with K = {} needs at least {} non-constant patches, sampled {}",
            params.k,
            10 * params.k,
            patches.nrows()
        )));
    }
    fit_from_patches(&patches, params.patch_size, params)
}
