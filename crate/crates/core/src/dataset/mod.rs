//! CIFAR-10 ingestion, center occlusion and occlusion-augmented training sets.
//!
//! Records use the CIFAR-10 binary layout: one label byte followed by the
//! 1024 red, 1024 green and 1024 blue bytes of a 32x32 image, each plane
//! row-major.

pub mod synthetic;

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const IMAGE_SIDE: usize = 32;
pub const CHANNELS: usize = 3;
pub const PLANE: usize = IMAGE_SIDE * IMAGE_SIDE;
pub const PIXEL_COUNT: usize = PLANE * CHANNELS;
pub const RECORD_BYTES: usize = PIXEL_COUNT + 1;
pub const NUM_CLASSES: usize = 10;

pub const TRAIN_BATCHES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const TEST_BATCH: &str = "test_batch.bin";

/// A labeled 32x32 RGB raster stored channel-planar.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageRecord {
    label: u8,
    pixels: Vec<u8>,
}

impl ImageRecord {
    pub fn new(label: u8, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != PIXEL_COUNT {
            return Err(Error::Dimension(format!(
                "image needs {PIXEL_COUNT} pixel values, got {}",
                pixels.len()
            )));
        }
        if label as usize >= NUM_CLASSES {
            return Err(Error::CorruptRecord { index: 0, label });
        }
        Ok(Self { label, pixels })
    }

    pub fn label(&self) -> u8 {
        self.label
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    #[inline]
    pub fn pixel(&self, channel: usize, row: usize, col: usize) -> u8 {
        self.pixels[channel * PLANE + row * IMAGE_SIDE + col]
    }

    pub fn set_pixel(&mut self, channel: usize, row: usize, col: usize, value: u8) {
        self.pixels[channel * PLANE + row * IMAGE_SIDE + col] = value;
    }

    /// Reorders color planes: output plane `c` is input plane `order[c]`.
    pub fn permute_channels(&self, order: [usize; CHANNELS]) -> Self {
        let mut pixels = Vec::with_capacity(PIXEL_COUNT);
        for &src in &order {
            pixels.extend_from_slice(&self.pixels[src * PLANE..(src + 1) * PLANE]);
        }
        Self {
            label: self.label,
            pixels,
        }
    }
}

/// Centered square occluder filled with zero intensity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OcclusionSpec {
    area_fraction: f64,
}

impl OcclusionSpec {
    pub const FILL_VALUE: u8 = 0;

    pub fn new(area_fraction: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&area_fraction) {
            return Err(Error::InvalidOcclusion(format!(
                "area fraction must lie in [0, 1), got {area_fraction}"
            )));
        }
        Ok(Self { area_fraction })
    }

    pub fn none() -> Self {
        Self { area_fraction: 0.0 }
    }

    pub fn area_fraction(&self) -> f64 {
        self.area_fraction
    }

    /// Side of the occluding square, `round(32 * sqrt(fraction))`.
    pub fn side(&self) -> usize {
        (IMAGE_SIDE as f64 * self.area_fraction.sqrt()).round() as usize
    }

    /// Half-open row/column span `[16 - ceil(s/2), 16 + floor(s/2))`.
    pub fn span(&self) -> Range<usize> {
        let s = self.side();
        let center = IMAGE_SIDE / 2;
        (center - s.div_ceil(2))..(center + s / 2)
    }

    pub fn realized_fraction(&self) -> f64 {
        let s = self.side();
        (s * s) as f64 / PLANE as f64
    }
}

pub fn occlude(image: &ImageRecord, spec: &OcclusionSpec) -> ImageRecord {
    let mut out = image.clone();
    let span = spec.span();
    for channel in 0..CHANNELS {
        for row in span.clone() {
            let start = channel * PLANE + row * IMAGE_SIDE;
            out.pixels[start + span.start..start + span.end].fill(OcclusionSpec::FILL_VALUE);
        }
    }
    out
}

/// Originals first, then one occluded copy of every image per level, in input order.
pub fn augment_with_occlusions(train: &[ImageRecord], levels: &[f64]) -> Result<Vec<ImageRecord>> {
    if levels.is_empty() {
        return Err(Error::Config(
            "augmentation needs at least one occlusion level".into(),
        ));
    }
    let specs = levels
        .iter()
        .map(|&f| OcclusionSpec::new(f))
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::with_capacity(train.len() * (1 + specs.len()));
    out.extend_from_slice(train);
    for spec in &specs {
        out.extend(train.iter().map(|img| occlude(img, spec)));
    }
    Ok(out)
}

fn parse_record(index: usize, bytes: &[u8]) -> Result<ImageRecord> {
    let label = bytes[0];
    if label as usize >= NUM_CLASSES {
        return Err(Error::CorruptRecord { index, label });
    }
    Ok(ImageRecord {
        label,
        pixels: bytes[1..].to_vec(),
    })
}

/// Reads one CIFAR-10 binary batch file. `subset` selects a record range in
/// file order; records past the end of the range are not read.
pub fn load_cifar10(path: &Path, subset: Option<Range<usize>>) -> Result<Vec<ImageRecord>> {
    let file = File::open(path)?;
    let len = file.metadata()?.len() as usize;
    let available = len / RECORD_BYTES;
    let has_partial = !len.is_multiple_of(RECORD_BYTES);

    let range = subset.unwrap_or(0..available + usize::from(has_partial));
    if range.is_empty() {
        return Ok(Vec::new());
    }
    if range.end > available {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            index: available.max(range.start),
        });
    }

    let mut reader = BufReader::new(file);
    let mut skip = vec![0u8; RECORD_BYTES];
    for _ in 0..range.start {
        reader.read_exact(&mut skip)?;
    }
    let mut records = Vec::with_capacity(range.len());
    let mut buf = vec![0u8; RECORD_BYTES];
    for index in range {
        reader.read_exact(&mut buf)?;
        records.push(parse_record(index, &buf)?);
    }
    Ok(records)
}

pub fn write_cifar10(path: &Path, records: &[ImageRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        w.write_all(&[r.label])?;
        w.write_all(&r.pixels)?;
    }
    w.flush()?;
    Ok(())
}

/// Loads the first `count` records of the concatenated training batches.
pub fn load_train_dir(dir: &Path, count: usize) -> Result<Vec<ImageRecord>> {
    let mut out = Vec::with_capacity(count);
    for name in TRAIN_BATCHES {
        if out.len() >= count {
            break;
        }
        let path: PathBuf = dir.join(name);
        let len = File::open(&path)?.metadata()?.len() as usize;
        let in_file = len.div_ceil(RECORD_BYTES);
        let take = (count - out.len()).min(in_file);
        out.extend(load_cifar10(&path, Some(0..take))?);
    }
    if out.len() < count {
        return Err(Error::Config(format!(
            "requested {count} training records but {} holds only {}",
            dir.display(),
            out.len()
        )));
    }
    Ok(out)
}

pub fn load_test_dir(dir: &Path, count: usize) -> Result<Vec<ImageRecord>> {
    load_cifar10(&dir.join(TEST_BATCH), Some(0..count))
}

pub fn label_histogram(records: &[ImageRecord]) -> [usize; NUM_CLASSES] {
    let mut hist = [0usize; NUM_CLASSES];
    for r in records {
        hist[r.label as usize] += 1;
    }
    hist
}
