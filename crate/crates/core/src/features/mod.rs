//! Single-layer convolutional front end: Layer-1 triangle encoding of every
//! stride-1 patch and quadrant mean pooling into Layer-2.

pub mod dictionary;

use ndarray::{Array1, Array2, ArrayView1, Axis};

pub use dictionary::{learn_dictionary, Dictionary, DictionaryParams};

use crate::dataset::{ImageRecord, CHANNELS};
use crate::error::{Error, Result};
use dictionary::{extract_patch, normalize_patch};

/// Convolutional feature maps, laid out `[row][col][map]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer1Activity {
    side: usize,
    k: usize,
    data: Vec<f32>,
}

impl Layer1Activity {
    pub fn zeros(side: usize, k: usize) -> Self {
        Self {
            side,
            k,
            data: vec![0.0; side * side * k],
        }
    }

    pub fn from_vec(side: usize, k: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != side * side * k {
            return Err(Error::Dimension(format!(
                "layer-1 tensor {side}x{side}x{k} needs {} values, got {}",
                side * side * k,
                data.len()
            )));
        }
        Ok(Self { side, k, data })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.side, self.side, self.k)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, map: usize) -> f32 {
        self.data[(row * self.side + col) * self.k + map]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, map: usize, v: f32) {
        self.data[(row * self.side + col) * self.k + map] = v;
    }
}

/// Quadrant-pooled activity, laid out `[quadrant][map]` with quadrants in
/// the order top-left, top-right, bottom-left, bottom-right.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer2Activity(pub Vec<f64>);

impl Layer2Activity {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn view(&self) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.0[..])
    }

    pub fn get(&self, quadrant: usize, map: usize) -> f64 {
        self.0[quadrant * (self.0.len() / 4) + map]
    }
}

impl From<Array1<f64>> for Layer2Activity {
    fn from(a: Array1<f64>) -> Self {
        Self(a.to_vec())
    }
}

/// Triangle activation `max(0, mean(z) - z_k)` from whitened patch rows,
/// where `z_k` is the distance to field `k`.
pub fn triangle_activation(whitened: &Array2<f32>, dict: &Dictionary) -> Array2<f32> {
    let field_norms: Array1<f32> = dict.fields.map_axis(Axis(1), |f| f.dot(&f));
    let mut out = whitened.dot(&dict.fields.t());
    for (mut row, x) in out.outer_iter_mut().zip(whitened.outer_iter()) {
        let x_norm = x.dot(&x);
        for (v, &fnorm) in row.iter_mut().zip(field_norms.iter()) {
            *v = (x_norm - 2.0 * *v + fnorm).max(0.0).sqrt();
        }
        let mean = row.sum() / row.len() as f32;
        row.mapv_inplace(|z| (mean - z).max(0.0));
    }
    out
}

/// Encodes every `w x w` patch at stride 1. Constant patches (including any
/// patch fully inside an occluder) carry no contrast and produce an all-zero
/// activation row.
pub fn encode_layer1(image: &ImageRecord, dict: &Dictionary) -> Layer1Activity {
    let w = dict.patch_size;
    let side = dict.grid_side();
    let dim = w * w * CHANNELS;
    let mut patches = Array2::<f32>::zeros((side * side, dim));
    let mut live = vec![false; side * side];
    let mut buf = vec![0.0f64; dim];
    for r in 0..side {
        for c in 0..side {
            extract_patch(image, r, c, w, &mut buf);
            let idx = r * side + c;
            if normalize_patch(&mut buf) {
                live[idx] = true;
                for (dst, &src) in patches.row_mut(idx).iter_mut().zip(&buf) {
                    *dst = src as f32;
                }
            }
        }
    }
    let act = triangle_activation(&dict.whiten(&patches), dict);
    let k = dict.k();
    let mut data = act.into_raw_vec_and_offset().0;
    for (idx, _) in live.iter().enumerate().filter(|(_, &l)| !l) {
        data[idx * k..(idx + 1) * k].fill(0.0);
    }
    Layer1Activity { side, k, data }
}

/// Row/column split of a grid into two halves; the extra line of an odd grid
/// goes to the lower/right half.
#[inline]
pub fn quadrant_split(side: usize) -> usize {
    side / 2
}

/// Mean of each map over each quadrant.
pub fn pool(h1: &Layer1Activity) -> Layer2Activity {
    let (side, k) = (h1.side, h1.k);
    let half = quadrant_split(side);
    let mut sums = vec![0.0f64; 4 * k];
    for r in 0..side {
        let qr = usize::from(r >= half);
        for c in 0..side {
            let q = 2 * qr + usize::from(c >= half);
            let cell = &h1.data[(r * side + c) * k..(r * side + c + 1) * k];
            for (s, &v) in sums[q * k..(q + 1) * k].iter_mut().zip(cell) {
                *s += v as f64;
            }
        }
    }
    let rows = [half, side - half];
    for q in 0..4 {
        let area = (rows[q / 2] * rows[q % 2]) as f64;
        for s in &mut sums[q * k..(q + 1) * k] {
            *s /= area;
        }
    }
    Layer2Activity(sums)
}
