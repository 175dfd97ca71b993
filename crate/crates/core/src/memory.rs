//! Stored training activity and the K-means cluster memories built from it.

use std::fs::File;
use std::io::{BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;

use crate::dataset::ImageRecord;
use crate::error::{Error, Result};
use crate::features::{encode_layer1, pool, Dictionary, Layer1Activity, Layer2Activity};
use crate::kmeans::{kmeans, KMeansParams};

pub use crate::kmeans::nearest_center;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LowPass {
    /// 3x3 box filter per feature map, edges replicated.
    #[default]
    Box3,
    Off,
}

impl FromStr for LowPass {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "box3" => Ok(Self::Box3),
            "off" => Ok(Self::Off),
            other => Err(Error::Config(format!(
                "unknown low-pass filter '{other}' (expected box3|off)"
            ))),
        }
    }
}

impl std::fmt::Display for LowPass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Box3 => "box3",
            Self::Off => "off",
        })
    }
}

pub fn lowpass(h1: &Layer1Activity, mode: LowPass) -> Layer1Activity {
    match mode {
        LowPass::Off => h1.clone(),
        LowPass::Box3 => box3(h1),
    }
}

fn box3(h1: &Layer1Activity) -> Layer1Activity {
    let (side, _, k) = h1.shape();
    let src = h1.as_slice();
    let mut out = vec![0.0f32; src.len()];
    let last = side as isize - 1;
    for r in 0..side {
        for c in 0..side {
            let dst = &mut out[(r * side + c) * k..(r * side + c + 1) * k];
            for dr in -1isize..=1 {
                let rr = (r as isize + dr).clamp(0, last) as usize;
                for dc in -1isize..=1 {
                    let cc = (c as isize + dc).clamp(0, last) as usize;
                    let cell = &src[(rr * side + cc) * k..(rr * side + cc + 1) * k];
                    for (d, &v) in dst.iter_mut().zip(cell) {
                        *d += v;
                    }
                }
            }
            for d in dst.iter_mut() {
                *d /= 9.0;
            }
        }
    }
    Layer1Activity::from_vec(side, k, out).expect("same shape")
}

/// Encodes, filters and pools one image the way the store does.
pub fn activities(
    image: &ImageRecord,
    dict: &Dictionary,
    filter: LowPass,
) -> (Layer1Activity, Layer2Activity) {
    let h1 = lowpass(&encode_layer1(image, dict), filter);
    let h2 = pool(&h1);
    (h1, h2)
}

/// Where Layer-1 rows of the store live.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum H1Mode {
    #[default]
    Off,
    Memory,
    /// Rows spilled to a flat little-endian f32 file.
    Disk(PathBuf),
}

#[derive(Debug)]
pub enum H1Rows {
    Memory(Vec<f32>),
    Disk { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct StoreOptions {
    pub lowpass: LowPass,
    pub h1: H1Mode,
}

/// Low-pass filtered activity of every training image, row `i` from image `i`.
#[derive(Debug)]
pub struct ActivityStore {
    pub h2: Array2<f64>,
    pub labels: Vec<u8>,
    pub lowpass: LowPass,
    h1: Option<H1Rows>,
    h1_side: usize,
    k: usize,
}

impl ActivityStore {
    pub fn from_rows(h2: Array2<f64>, labels: Vec<u8>) -> Result<Self> {
        if h2.nrows() != labels.len() {
            return Err(Error::Dimension(format!(
                "{} activity rows for {} labels",
                h2.nrows(),
                labels.len()
            )));
        }
        let k = h2.ncols() / 4;
        Ok(Self {
            h2,
            labels,
            lowpass: LowPass::Off,
            h1: None,
            h1_side: 0,
            k,
        })
    }

    pub fn with_h1_rows(mut self, side: usize, rows: Vec<f32>) -> Result<Self> {
        if rows.len() != self.len() * side * side * self.k {
            return Err(Error::Dimension(format!(
                "{} layer-1 values do not form {} rows of {side}x{side}x{}",
                rows.len(),
                self.len(),
                self.k
            )));
        }
        self.h1_side = side;
        self.h1 = Some(H1Rows::Memory(rows));
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.h2.ncols()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn h1_side(&self) -> usize {
        self.h1_side
    }

    pub fn has_h1(&self) -> bool {
        self.h1.is_some()
    }

    pub fn h1_rows(&self) -> Option<&H1Rows> {
        self.h1.as_ref()
    }

    pub fn num_classes(&self) -> usize {
        self.labels
            .iter()
            .map(|&l| l as usize + 1)
            .max()
            .unwrap_or(0)
    }

    pub fn class_rows(&self, class: u8) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.labels[i] == class)
            .collect()
    }

    pub fn layer1(&self, index: usize) -> Result<Layer1Activity> {
        let row_len = self.h1_side * self.h1_side * self.k;
        match &self.h1 {
            None => Err(Error::Unsupported(
                "layer-1 feedback needs stored layer-1 activity; rebuild the store with --store-h1 on".into(),
            )),
            Some(H1Rows::Memory(rows)) => {
                Layer1Activity::from_vec(self.h1_side, self.k, rows[index * row_len..(index + 1) * row_len].to_vec())
            }
            Some(H1Rows::Disk { path }) => {
                let mut f = File::open(path)?;
                f.seek(SeekFrom::Start((index * row_len * 4) as u64))?;
                let mut bytes = vec![0u8; row_len * 4];
                f.read_exact(&mut bytes)?;
                let data = bytes
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                    .collect();
                Layer1Activity::from_vec(self.h1_side, self.k, data)
            }
        }
    }
}

const STORE_CHUNK: usize = 256;

pub fn build_store(
    train: &[ImageRecord],
    dict: &Dictionary,
    opts: &StoreOptions,
) -> Result<ActivityStore> {
    dict.validate()?;
    let k = dict.k();
    let side = dict.grid_side();
    let n = train.len();
    let mut h2 = Array2::<f64>::zeros((n, 4 * k));
    let mut h1_mem = match opts.h1 {
        H1Mode::Memory => Some(Vec::with_capacity(n * side * side * k)),
        _ => None,
    };
    let mut h1_disk = match &opts.h1 {
        H1Mode::Disk(path) => Some(BufWriter::new(File::create(path)?)),
        _ => None,
    };
    let keep_h1 = opts.h1 != H1Mode::Off;

    for (chunk_idx, chunk) in train.chunks(STORE_CHUNK).enumerate() {
        let encoded: Vec<(Option<Layer1Activity>, Layer2Activity)> = chunk
            .par_iter()
            .map(|img| {
                let (h1, h2) = activities(img, dict, opts.lowpass);
                (keep_h1.then_some(h1), h2)
            })
            .collect();
        for (j, (h1, row)) in encoded.into_iter().enumerate() {
            let i = chunk_idx * STORE_CHUNK + j;
            h2.row_mut(i).assign(&row.view());
            if let Some(h1) = h1 {
                if let Some(mem) = h1_mem.as_mut() {
                    mem.extend_from_slice(h1.as_slice());
                }
                if let Some(w) = h1_disk.as_mut() {
                    for v in h1.as_slice() {
                        w.write_all(&v.to_le_bytes())?;
                    }
                }
            }
        }
    }

    let h1 = match (&opts.h1, h1_mem, h1_disk) {
        (H1Mode::Memory, Some(rows), _) => Some(H1Rows::Memory(rows)),
        (H1Mode::Disk(path), _, Some(mut w)) => {
            w.flush()?;
            Some(H1Rows::Disk { path: path.clone() })
        }
        _ => None,
    };
    Ok(ActivityStore {
        h2,
        labels: train.iter().map(|r| r.label()).collect(),
        lowpass: opts.lowpass,
        h1,
        h1_side: side,
        k,
    })
}

/// Rebuilds a store around H1 rows kept on disk by an earlier run.
pub fn attach_h1_file(mut store: ActivityStore, side: usize, path: &Path) -> Result<ActivityStore> {
    let expected = (store.len() * side * side * store.k * 4) as u64;
    let actual = std::fs::metadata(path)?.len();
    if actual != expected {
        return Err(Error::Dimension(format!(
            "layer-1 row file {} has {actual} bytes, expected {expected}",
            path.display()
        )));
    }
    store.h1_side = side;
    store.h1 = Some(H1Rows::Disk {
        path: path.to_path_buf(),
    });
    Ok(store)
}

/// Per-class and global K-means centers of stored Layer-2 activity.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterMemory {
    pub k2: usize,
    /// One `K2 x 4K` matrix per class.
    pub per_class: Vec<Array2<f64>>,
    /// `(C * K2) x 4K` centers fitted without labels.
    pub global: Array2<f64>,
}

impl ClusterMemory {
    pub fn num_classes(&self) -> usize {
        self.per_class.len()
    }

    pub fn dim(&self) -> usize {
        self.global.ncols()
    }

    pub fn class_centers(&self, class: u8) -> ArrayView2<'_, f64> {
        self.per_class[class as usize].view()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MemoryParams {
    pub k2: usize,
    pub seed: u64,
    pub max_iters: usize,
    pub tol: f64,
}

impl MemoryParams {
    pub fn new(k2: usize, seed: u64) -> Self {
        Self {
            k2,
            seed,
            max_iters: 100,
            tol: 1e-4,
        }
    }
}

pub fn build_cluster_memory(store: &ActivityStore, params: &MemoryParams) -> Result<ClusterMemory> {
    let k2 = params.k2;
    if k2 == 0 {
        return Err(Error::Config("K2 must be at least 1".into()));
    }
    let classes = store.num_classes();
    let rows: Vec<Vec<usize>> = (0..classes).map(|c| store.class_rows(c as u8)).collect();
    for (c, r) in rows.iter().enumerate() {
        if r.len() < k2 {
            return Err(Error::Config(format!(
                "class {c} has {} training rows, fewer than K2 = {k2}",
                r.len()
            )));
        }
    }
    let kp = |k: usize, seed: u64| KMeansParams {
        k,
        seed,
        max_iters: params.max_iters,
        tol: params.tol,
    };

    let per_class = rows
        .par_iter()
        .enumerate()
        .map(|(c, idx)| {
            let data = store.h2.select(ndarray::Axis(0), idx);
            kmeans(data.view(), &kp(k2, params.seed.wrapping_add(c as u64 + 1))).map(|f| f.centers)
        })
        .collect::<Result<Vec<_>>>()?;
    let global = kmeans(store.h2.view(), &kp(classes * k2, params.seed))?.centers;
    Ok(ClusterMemory {
        k2,
        per_class,
        global,
    })
}
