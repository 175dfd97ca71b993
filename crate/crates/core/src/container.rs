//! Self-describing binary container shared by every trained artifact.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "FRCN" | version u32 | kind (u32 len + utf8) | entry count u32
//! entry: name (u32 len + utf8) | dtype u8 | rank u32 | dims u64 * rank | data
//! ```
//!
//! Tensors are row-major. Scalars are rank-0 tensors and strings are rank-1
//! `u8` tensors.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};

use crate::classifiers::{pairs, HypothesisBank, LinearClassifier};
use crate::error::{Error, Result};
use crate::features::Dictionary;
use crate::memory::{attach_h1_file, ActivityStore, ClusterMemory, H1Rows, LowPass};
use crate::rbm::{Binarizer, RbmBaseline, RbmModel};

pub const MAGIC: [u8; 4] = *b"FRCN";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Data {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
    U64(Vec<u64>),
}

impl Data {
    fn tag(&self) -> u8 {
        match self {
            Data::F32(_) => 0,
            Data::F64(_) => 1,
            Data::U8(_) => 2,
            Data::U64(_) => 3,
        }
    }

    fn len(&self) -> usize {
        match self {
            Data::F32(v) => v.len(),
            Data::F64(v) => v.len(),
            Data::U8(v) => v.len(),
            Data::U64(v) => v.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Data,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Data) -> Result<Self> {
        let count: usize = shape.iter().product();
        if count != data.len() {
            return Err(Error::Format(format!(
                "shape {shape:?} holds {count} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: String,
    pub entries: Vec<(String, Tensor)>,
}

impl Container {
    pub fn new(kind: &str) -> Self {
        Self {
            kind: kind.to_string(),
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.entries.push((name.into(), tensor));
    }

    pub fn put_u64(&mut self, name: &str, v: u64) {
        self.push(
            name,
            Tensor {
                shape: vec![],
                data: Data::U64(vec![v]),
            },
        );
    }

    pub fn put_str(&mut self, name: &str, s: &str) {
        self.push(
            name,
            Tensor {
                shape: vec![s.len()],
                data: Data::U8(s.as_bytes().to_vec()),
            },
        );
    }

    pub fn put_bytes(&mut self, name: &str, v: &[u8]) {
        self.push(
            name,
            Tensor {
                shape: vec![v.len()],
                data: Data::U8(v.to_vec()),
            },
        );
    }

    pub fn put_f32(&mut self, name: &str, shape: &[usize], v: Vec<f32>) {
        self.push(
            name,
            Tensor {
                shape: shape.to_vec(),
                data: Data::F32(v),
            },
        );
    }

    pub fn put_f64(&mut self, name: &str, shape: &[usize], v: Vec<f64>) {
        self.push(
            name,
            Tensor {
                shape: shape.to_vec(),
                data: Data::F64(v),
            },
        );
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Format(format!("{} container has no entry `{name}`", self.kind)))
    }

    pub fn has(&self, name: &str) -> bool {
        self.entries.iter().any(|(n, _)| n == name)
    }

    pub fn u64(&self, name: &str) -> Result<u64> {
        match &self.get(name)?.data {
            Data::U64(v) if v.len() == 1 => Ok(v[0]),
            _ => Err(self.wrong_type(name, "u64 scalar")),
        }
    }

    pub fn usize(&self, name: &str) -> Result<usize> {
        usize::try_from(self.u64(name)?)
            .map_err(|_| Error::Format(format!("`{name}` does not fit in usize")))
    }

    pub fn str(&self, name: &str) -> Result<String> {
        String::from_utf8(self.bytes(name)?.to_vec())
            .map_err(|_| Error::Format(format!("`{name}` is not utf-8")))
    }

    pub fn bytes(&self, name: &str) -> Result<&[u8]> {
        match &self.get(name)?.data {
            Data::U8(v) => Ok(v),
            _ => Err(self.wrong_type(name, "u8 tensor")),
        }
    }

    pub fn f32_vec(&self, name: &str, len: usize) -> Result<Array1<f32>> {
        let t = self.get(name)?;
        match &t.data {
            Data::F32(v) if t.shape == [len] => Ok(Array1::from(v.clone())),
            _ => Err(self.wrong_type(name, &format!("f32 vector of length {len}"))),
        }
    }

    pub fn f64_vec(&self, name: &str, len: usize) -> Result<Array1<f64>> {
        let t = self.get(name)?;
        match &t.data {
            Data::F64(v) if t.shape == [len] => Ok(Array1::from(v.clone())),
            _ => Err(self.wrong_type(name, &format!("f64 vector of length {len}"))),
        }
    }

    pub fn f32_mat(&self, name: &str) -> Result<Array2<f32>> {
        let t = self.get(name)?;
        match (&t.data, t.shape.as_slice()) {
            (Data::F32(v), &[r, c]) => {
                Ok(Array2::from_shape_vec((r, c), v.clone()).expect("shape checked on read"))
            }
            _ => Err(self.wrong_type(name, "f32 matrix")),
        }
    }

    pub fn f64_mat(&self, name: &str) -> Result<Array2<f64>> {
        let t = self.get(name)?;
        match (&t.data, t.shape.as_slice()) {
            (Data::F64(v), &[r, c]) => {
                Ok(Array2::from_shape_vec((r, c), v.clone()).expect("shape checked on read"))
            }
            _ => Err(self.wrong_type(name, "f64 matrix")),
        }
    }

    fn wrong_type(&self, name: &str, expected: &str) -> Error {
        Error::Format(format!("{} entry `{name}` is not a {expected}", self.kind))
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(&MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        write_name(w, &self.kind)?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (name, t) in &self.entries {
            write_name(w, name)?;
            w.write_all(&[t.data.tag()])?;
            w.write_all(&(t.shape.len() as u32).to_le_bytes())?;
            for &d in &t.shape {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            match &t.data {
                Data::F32(v) => v.iter().try_for_each(|x| w.write_all(&x.to_le_bytes()))?,
                Data::F64(v) => v.iter().try_for_each(|x| w.write_all(&x.to_le_bytes()))?,
                Data::U8(v) => w.write_all(v)?,
                Data::U64(v) => v.iter().try_for_each(|x| w.write_all(&x.to_le_bytes()))?,
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if magic != MAGIC {
            return Err(Error::Format(format!("bad magic {magic:?}")));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let kind = read_name(r)?;
        let count = read_u32(r)? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = read_name(r)?;
            let mut tag = [0u8; 1];
            r.read_exact(&mut tag)?;
            let rank = read_u32(r)? as usize;
            if rank > 8 {
                return Err(Error::Format(format!("entry `{name}` has rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u64(r)? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Format(format!("entry `{name}` shape overflows")))?;
            let width = match tag[0] {
                0 => 4,
                1 | 3 => 8,
                2 => 1,
                t => {
                    return Err(Error::Format(format!(
                        "entry `{name}` has unknown dtype {t}"
                    )))
                }
            };
            let mut raw = Vec::new();
            r.take((n * width) as u64).read_to_end(&mut raw)?;
            if raw.len() != n * width {
                return Err(Error::Format(format!("entry `{name}` is truncated")));
            }
            let data = match tag[0] {
                0 => Data::F32(
                    raw.chunks_exact(4)
                        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                        .collect(),
                ),
                1 => Data::F64(
                    raw.chunks_exact(8)
                        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                        .collect(),
                ),
                2 => Data::U8(raw),
                _ => Data::U64(
                    raw.chunks_exact(8)
                        .map(|b| u64::from_le_bytes(b.try_into().unwrap()))
                        .collect(),
                ),
            };
            entries.push((name, Tensor { shape, data }));
        }
        Ok(Self { kind, entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }

    fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Format(format!(
                "expected a {kind} container, found {}",
                self.kind
            )));
        }
        Ok(())
    }
}

fn write_name(w: &mut impl Write, s: &str) -> Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_name(r: &mut impl Read) -> Result<String> {
    let len = read_u32(r)? as usize;
    if len > 1 << 16 {
        return Err(Error::Format(format!("name of {len} bytes")));
    }
    let mut b = vec![0u8; len];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|_| Error::Format("name is not utf-8".into()))
}

/// An artifact that round-trips through a [`Container`].
pub trait Artifact: Sized {
    const KIND: &'static str;

    fn to_container(&self) -> Container;

    fn from_container(c: &Container) -> Result<Self>;

    fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    fn load(path: &Path) -> Result<Self> {
        let c = Container::load(path)?;
        c.expect_kind(Self::KIND)?;
        Self::from_container(&c)
    }
}

fn f32_rows(a: &Array2<f32>) -> Vec<f32> {
    a.iter().copied().collect()
}

impl Artifact for Dictionary {
    const KIND: &'static str = "dictionary";

    fn to_container(&self) -> Container {
        let mut c = Container::new(Self::KIND);
        c.put_u64("w", self.patch_size as u64);
        c.put_u64("d", self.channels as u64);
        c.put_u64("k", self.k() as u64);
        c.put_f32("mean", &[self.mean.len()], self.mean.to_vec());
        c.put_f32(
            "whitener",
            &[self.dim(), self.dim()],
            f32_rows(&self.whitener),
        );
        c.put_f32("fields", &[self.k(), self.dim()], f32_rows(&self.fields));
        c
    }

    fn from_container(c: &Container) -> Result<Self> {
        let patch_size = c.usize("w")?;
        let channels = c.usize("d")?;
        let dim = patch_size * patch_size * channels;
        let dict = Dictionary {
            patch_size,
            channels,
            mean: c.f32_vec("mean", dim)?,
            whitener: c.f32_mat("whitener")?,
            fields: c.f32_mat("fields")?,
        };
        if dict.k() != c.usize("k")? {
            return Err(Error::Format("field count disagrees with k".into()));
        }
        dict.validate()?;
        Ok(dict)
    }
}

impl Artifact for ClusterMemory {
    const KIND: &'static str = "cluster-memory";

    fn to_container(&self) -> Container {
        let mut c = Container::new(Self::KIND);
        let dim = self.dim();
        c.put_u64("k2", self.k2 as u64);
        c.put_u64("classes", self.num_classes() as u64);
        let per_class: Vec<f32> = self
            .per_class
            .iter()
            .flat_map(|m| m.iter().map(|&v| v as f32))
            .collect();
        c.put_f32("per_class", &[self.num_classes(), self.k2, dim], per_class);
        c.put_f32(
            "global",
            &[self.global.nrows(), dim],
            self.global.iter().map(|&v| v as f32).collect(),
        );
        c
    }

    fn from_container(c: &Container) -> Result<Self> {
        let k2 = c.usize("k2")?;
        let classes = c.usize("classes")?;
        let t = c.get("per_class")?;
        let (Data::F32(v), &[nc, nk, dim]) = (&t.data, t.shape.as_slice()) else {
            return Err(Error::Format("per_class is not a rank-3 f32 tensor".into()));
        };
        if nc != classes || nk != k2 {
            return Err(Error::Format(format!(
                "per_class shape {:?} disagrees with {classes} x {k2}",
                t.shape
            )));
        }
        let per_class = v
            .chunks_exact(k2 * dim)
            .map(|chunk| {
                Array2::from_shape_vec((k2, dim), chunk.iter().map(|&x| x as f64).collect())
                    .unwrap()
            })
            .collect();
        let global = c.f32_mat("global")?.mapv(|x| x as f64);
        if global.ncols() != dim {
            return Err(Error::Format("global centers have the wrong width".into()));
        }
        Ok(ClusterMemory {
            k2,
            per_class,
            global,
        })
    }
}

impl Artifact for ActivityStore {
    const KIND: &'static str = "activity-store";

    fn to_container(&self) -> Container {
        let mut c = Container::new(Self::KIND);
        c.put_str("lowpass", &self.lowpass.to_string());
        c.put_u64("k", self.k() as u64);
        c.put_u64("h1_side", self.h1_side() as u64);
        c.put_f32(
            "h2",
            &[self.len(), self.dim()],
            self.h2.iter().map(|&v| v as f32).collect(),
        );
        c.put_bytes("labels", &self.labels);
        match self.h1_rows() {
            Some(H1Rows::Memory(rows)) => {
                let s = self.h1_side();
                c.put_f32("h1", &[self.len(), s, s, self.k()], rows.clone());
            }
            Some(H1Rows::Disk { path }) => c.put_str("h1_path", &path.to_string_lossy()),
            None => {}
        }
        c
    }

    fn from_container(c: &Container) -> Result<Self> {
        let lowpass: LowPass = c.str("lowpass")?.parse()?;
        let h2 = c.f32_mat("h2")?.mapv(|v| v as f64);
        let labels = c.bytes("labels")?.to_vec();
        let side = c.usize("h1_side")?;
        let mut store = ActivityStore::from_rows(h2, labels)?;
        store.lowpass = lowpass;
        if store.k() != c.usize("k")? {
            return Err(Error::Format("activity width disagrees with k".into()));
        }
        if c.has("h1") {
            let Data::F32(rows) = &c.get("h1")?.data else {
                return Err(Error::Format("h1 is not an f32 tensor".into()));
            };
            store = store.with_h1_rows(side, rows.clone())?;
        } else if c.has("h1_path") {
            store = attach_h1_file(store, side, &PathBuf::from(c.str("h1_path")?))?;
        }
        Ok(store)
    }
}

fn put_classifier(c: &mut Container, prefix: &str, excluded: &[u8], m: &LinearClassifier) {
    c.put_bytes(&format!("{prefix}.excluded"), excluded);
    c.put_bytes(&format!("{prefix}.classes"), &m.classes);
    c.put_f64(
        &format!("{prefix}.weights"),
        &[m.weights.nrows(), m.weights.ncols()],
        m.weights.iter().copied().collect(),
    );
    c.put_f64(
        &format!("{prefix}.biases"),
        &[m.biases.len()],
        m.biases.to_vec(),
    );
    c.put_f64(&format!("{prefix}.mean"), &[m.mean.len()], m.mean.to_vec());
    c.put_f64(
        &format!("{prefix}.inv_std"),
        &[m.inv_std.len()],
        m.inv_std.to_vec(),
    );
}

fn get_classifier(c: &Container, prefix: &str, excluded: &[u8]) -> Result<LinearClassifier> {
    let stored = c.bytes(&format!("{prefix}.excluded"))?;
    if stored != excluded {
        return Err(Error::Format(format!(
            "{prefix} excludes {stored:?}, expected {excluded:?}"
        )));
    }
    let classes = c.bytes(&format!("{prefix}.classes"))?.to_vec();
    let weights = c.f64_mat(&format!("{prefix}.weights"))?;
    let dim = weights.ncols();
    if weights.nrows() != classes.len() {
        return Err(Error::Format(format!(
            "{prefix} has {} weight rows for {} classes",
            weights.nrows(),
            classes.len()
        )));
    }
    Ok(LinearClassifier {
        biases: c.f64_vec(&format!("{prefix}.biases"), classes.len())?,
        mean: c.f64_vec(&format!("{prefix}.mean"), dim)?,
        inv_std: c.f64_vec(&format!("{prefix}.inv_std"), dim)?,
        classes,
        weights,
    })
}

impl Artifact for HypothesisBank {
    const KIND: &'static str = "hypothesis-bank";

    fn to_container(&self) -> Container {
        let mut c = Container::new(Self::KIND);
        c.put_u64("classes", self.num_classes as u64);
        put_classifier(&mut c, "full", &[], &self.full);
        for (p, m) in self.leave_one.iter().enumerate() {
            put_classifier(&mut c, &format!("without.{p}"), &[p as u8], m);
        }
        for ((p, q), m) in pairs(self.num_classes).into_iter().zip(&self.leave_pair) {
            put_classifier(&mut c, &format!("without.{p}.{q}"), &[p, q], m);
        }
        c
    }

    fn from_container(c: &Container) -> Result<Self> {
        let num_classes = c.usize("classes")?;
        let full = get_classifier(c, "full", &[])?;
        let leave_one = (0..num_classes as u8)
            .map(|p| get_classifier(c, &format!("without.{p}"), &[p]))
            .collect::<Result<Vec<_>>>()?;
        let leave_pair = pairs(num_classes)
            .into_iter()
            .map(|(p, q)| get_classifier(c, &format!("without.{p}.{q}"), &[p, q]))
            .collect::<Result<Vec<_>>>()?;
        Ok(HypothesisBank {
            num_classes,
            full,
            leave_one,
            leave_pair,
        })
    }
}

impl Artifact for RbmBaseline {
    const KIND: &'static str = "rbm-baseline";

    fn to_container(&self) -> Container {
        let mut c = Container::new(Self::KIND);
        let m = &self.model;
        c.put_f64(
            "thresholds",
            &[self.binarizer.dim()],
            self.binarizer.thresholds.to_vec(),
        );
        c.put_f32("weights", &[m.visible(), m.hidden()], f32_rows(&m.weights));
        c.put_f32("visible_bias", &[m.visible()], m.visible_bias.to_vec());
        c.put_f32("hidden_bias", &[m.hidden()], m.hidden_bias.to_vec());
        put_classifier(&mut c, "classifier", &[], &self.classifier);
        c
    }

    fn from_container(c: &Container) -> Result<Self> {
        let weights = c.f32_mat("weights")?;
        let (v, h) = weights.dim();
        let model = RbmModel {
            visible_bias: c.f32_vec("visible_bias", v)?,
            hidden_bias: c.f32_vec("hidden_bias", h)?,
            weights,
        };
        Ok(RbmBaseline {
            binarizer: Binarizer {
                thresholds: c.f64_vec("thresholds", v)?,
            },
            model,
            classifier: get_classifier(c, "classifier", &[])?,
        })
    }
}
