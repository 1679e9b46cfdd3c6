//! Dataset loaders (IDX, CIFAR-10 binary), synthetic benchmarks, and the
//! FDUMP feature-dump container.
//!
//! FDUMP layout, little-endian throughout:
//!
//! ```text
//! magic "ABETFTR1"          8 bytes
//! array count               u32
//! per array:
//!   name length             u16
//!   name                    UTF-8 bytes
//!   rank                    u32
//!   dims                    rank x u64
//!   payload                 prod(dims) x f64
//! has labels                u8 (0 or 1)
//! if 1: label count         u64
//!       labels              count x u32
//! ```

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{norm, Matrix};
use crate::rng::{stream_rng, Stream};

pub const FDUMP_MAGIC: &[u8; 8] = b"ABETFTR1";

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    features: Matrix,
    labels: Vec<usize>,
    num_classes: usize,
}

impl LabeledDataset {
    pub fn new(features: Matrix, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.rows() == 0 {
            return Err(Error::Contract("dataset must have at least one row".into()));
        }
        if labels.len() != features.rows() {
            return Err(Error::Dimension(format!(
                "{} labels for {} rows",
                labels.len(),
                features.rows()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Domain(format!(
                "label {bad} outside [0, {num_classes})"
            )));
        }
        Ok(LabeledDataset {
            features,
            labels,
            num_classes,
        })
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn subset(&self, idx: &[usize]) -> Result<LabeledDataset> {
        LabeledDataset::new(
            self.features.select_rows(idx),
            idx.iter().map(|&i| self.labels[i]).collect(),
            self.num_classes,
        )
    }

    /// Stores the dataset as an FDUMP with a `features` array and labels.
    pub fn to_dump(&self) -> FeatureDump {
        let mut dump = FeatureDump::default();
        dump.push_matrix("features", &self.features)
            .expect("fresh dump has no duplicate names");
        dump.labels = Some(self.labels.iter().map(|&l| l as u32).collect());
        dump
    }

    /// Inverse of [`LabeledDataset::to_dump`]. Class count is taken from
    /// `num_classes` when given, else `max(label) + 1`.
    pub fn from_dump(dump: &FeatureDump, num_classes: Option<usize>) -> Result<Self> {
        let features = dump.matrix("features")?;
        let labels: Vec<usize> = match &dump.labels {
            Some(l) => l.iter().map(|&v| v as usize).collect(),
            None => vec![0; features.rows()],
        };
        let c = num_classes.unwrap_or_else(|| labels.iter().max().map_or(1, |m| m + 1));
        LabeledDataset::new(features, labels, c)
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], off: usize, path: &Path) -> Result<u32> {
    bytes
        .get(off..off + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::format(path, off as u64, "truncated header"))
}

/// Parses an IDX header, returning `(dims, payload offset)`.
fn idx_header(bytes: &[u8], path: &Path, expected_rank: &[u8]) -> Result<(Vec<usize>, usize)> {
    if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 {
        return Err(Error::format(path, 0, "bad IDX magic"));
    }
    if bytes[2] != 0x08 {
        return Err(Error::format(
            path,
            2,
            format!("unsupported IDX element type 0x{:02x}", bytes[2]),
        ));
    }
    let rank = bytes[3];
    if !expected_rank.contains(&rank) {
        return Err(Error::format(path, 3, format!("unexpected IDX rank {rank}")));
    }
    let mut dims = Vec::with_capacity(rank as usize);
    for i in 0..rank as usize {
        dims.push(be_u32(bytes, 4 + 4 * i, path)? as usize);
    }
    let offset = 4 + 4 * rank as usize;
    let want = dims
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| Error::format(path, 4, "dimension product overflows"))?;
    if bytes.len() - offset != want {
        return Err(Error::format(
            path,
            offset as u64,
            format!(
                "payload has {} bytes, header declares {want}",
                bytes.len() - offset
            ),
        ));
    }
    Ok((dims, offset))
}

/// Loads an MNIST-style IDX image/label pair. Pixels are scaled to `[0, 1]`
/// and images flattened row-major.
pub fn load_idx(image_path: &Path, label_path: &Path) -> Result<LabeledDataset> {
    let img = read_file(image_path)?;
    let lab = read_file(label_path)?;
    let (idims, ioff) = idx_header(&img, image_path, &[1, 2, 3])?;
    let (ldims, loff) = idx_header(&lab, label_path, &[1])?;
    let n = idims[0];
    if ldims[0] != n {
        return Err(Error::format(
            label_path,
            4,
            format!("{} labels but {n} images in {}", ldims[0], image_path.display()),
        ));
    }
    if n == 0 {
        return Err(Error::format(image_path, 4, "zero images"));
    }
    let d: usize = idims[1..].iter().product();
    let data: Vec<f64> = img[ioff..].iter().map(|&b| f64::from(b) / 255.0).collect();
    let labels: Vec<usize> = lab[loff..].iter().map(|&b| b as usize).collect();
    let num_classes = labels.iter().max().map_or(1, |m| m + 1).max(10);
    LabeledDataset::new(Matrix::new(n, d, data)?, labels, num_classes)
}

pub const CIFAR_RECORD: usize = 3073;

/// Loads CIFAR-10 binary batches: each record is one label byte followed by
/// 3072 channel-major pixel bytes.
pub fn load_cifar10_bin(paths: &[&Path]) -> Result<LabeledDataset> {
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for &path in paths {
        let bytes = read_file(path)?;
        if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
            return Err(Error::format(
                path,
                (bytes.len() - bytes.len() % CIFAR_RECORD) as u64,
                format!("length {} is not a multiple of {CIFAR_RECORD}", bytes.len()),
            ));
        }
        for (r, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
            if rec[0] > 9 {
                return Err(Error::format(
                    path,
                    (r * CIFAR_RECORD) as u64,
                    format!("label byte {} outside 0..=9", rec[0]),
                ));
            }
            labels.push(rec[0] as usize);
            data.extend(rec[1..].iter().map(|&b| f64::from(b) / 255.0));
        }
    }
    let n = labels.len();
    if n == 0 {
        return Err(Error::Contract("no CIFAR files given".into()));
    }
    LabeledDataset::new(Matrix::new(n, CIFAR_RECORD - 1, data)?, labels, 10)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SyntheticKind {
    /// Gaussian clusters, one per class.
    Blobs,
    /// Spherical shell with radius in `[inner_radius, outer_radius]`; labels all 0.
    Ring { inner_radius: f64, outer_radius: f64 },
    /// Uniform samples in `[-half_width, half_width]^D`; labels all 0.
    UniformBox { half_width: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    #[serde(flatten)]
    pub kind: SyntheticKind,
    pub dims: usize,
    pub classes: usize,
    /// Distance of every blob center from the origin.
    pub separation: f64,
    pub noise: f64,
    pub samples: usize,
    #[serde(default)]
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dims == 0 || self.classes == 0 || self.samples == 0 {
            return Err(Error::Domain("synthetic counts must be positive".into()));
        }
        if !(self.noise >= 0.0) || !self.separation.is_finite() {
            return Err(Error::Domain(format!(
                "bad noise {} / separation {}",
                self.noise, self.separation
            )));
        }
        match self.kind {
            SyntheticKind::Ring {
                inner_radius,
                outer_radius,
            } if !(inner_radius >= 0.0 && outer_radius >= inner_radius && outer_radius.is_finite()) => {
                Err(Error::Domain(format!(
                    "ring radii [{inner_radius}, {outer_radius}] invalid"
                )))
            }
            SyntheticKind::UniformBox { half_width } if !(half_width > 0.0 && half_width.is_finite()) => {
                Err(Error::Domain(format!("box half width {half_width} invalid")))
            }
            _ => Ok(()),
        }
    }

    /// Upper bound on the norm of a blob sample that holds with overwhelming
    /// probability: center radius plus six noise standard deviations per axis.
    pub fn blob_radius_bound(&self) -> f64 {
        self.separation + 6.0 * self.noise * (self.dims as f64).sqrt()
    }
}

fn gaussian_vec<R: Rng>(rng: &mut R, d: usize) -> Vec<f64> {
    (0..d).map(|_| StandardNormal.sample(rng)).collect()
}

fn unit_vec<R: Rng>(rng: &mut R, d: usize) -> Vec<f64> {
    loop {
        let v = gaussian_vec(rng, d);
        let n = norm(&v);
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Blob centers on the sphere of radius `separation`. When the class count
/// fits the dimension the directions are orthonormal (Gram-Schmidt on
/// Gaussian draws); otherwise they are independent random directions.
pub fn blob_centers(spec: &SyntheticSpec) -> Vec<Vec<f64>> {
    let mut rng = stream_rng(spec.seed, Stream::SynthCenters);
    let d = spec.dims;
    let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(spec.classes);
    for _ in 0..spec.classes {
        let mut v = unit_vec(&mut rng, d);
        if dirs.len() < d {
            for _ in 0..2 {
                for u in &dirs {
                    let proj: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                    v.iter_mut().zip(u).for_each(|(a, b)| *a -= proj * b);
                }
            }
            let n = norm(&v);
            v.iter_mut().for_each(|a| *a /= n);
        }
        dirs.push(v);
    }
    dirs.into_iter()
        .map(|v| v.into_iter().map(|x| x * spec.separation).collect())
        .collect()
}

/// Deterministic synthetic dataset; a pure function of `spec`.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<LabeledDataset> {
    spec.validate()?;
    let d = spec.dims;
    let n = spec.samples;
    let mut rng = stream_rng(spec.seed, Stream::Synth);
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    match spec.kind {
        SyntheticKind::Blobs => {
            let centers = blob_centers(spec);
            for i in 0..n {
                let c = i % spec.classes;
                for &m in &centers[c] {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    data.push(m + spec.noise * z);
                }
                labels.push(c);
            }
            return LabeledDataset::new(Matrix::new(n, d, data)?, labels, spec.classes);
        }
        SyntheticKind::Ring {
            inner_radius,
            outer_radius,
        } => {
            for _ in 0..n {
                let u = unit_vec(&mut rng, d);
                let r = if outer_radius > inner_radius {
                    rng.random_range(inner_radius..outer_radius)
                } else {
                    inner_radius
                };
                data.extend(u.into_iter().map(|x| x * r));
            }
            labels = vec![0; n];
        }
        SyntheticKind::UniformBox { half_width } => {
            for _ in 0..n * d {
                data.push(rng.random_range(-half_width..=half_width));
            }
            labels.resize(n, 0);
        }
    }
    LabeledDataset::new(Matrix::new(n, d, data)?, labels, spec.classes.max(1))
}

/// Seeded permutation followed by a prefix/suffix split; the prefix holds
/// `round(fraction * n)` rows.
pub fn split(ds: &LabeledDataset, fraction: f64, seed: u64) -> Result<(LabeledDataset, LabeledDataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Domain(format!("split fraction {fraction} not in (0, 1)")));
    }
    let n = ds.len();
    let cut = (fraction * n as f64).round() as usize;
    if cut == 0 || cut == n {
        return Err(Error::Domain(format!(
            "split fraction {fraction} of {n} rows leaves an empty side"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream_rng(seed, Stream::Split));
    Ok((ds.subset(&idx[..cut])?, ds.subset(&idx[cut..])?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Named real arrays plus optional labels, exchanged between pipeline stages.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeatureDump {
    arrays: Vec<NamedArray>,
    pub labels: Option<Vec<u32>>,
}

impl FeatureDump {
    pub fn arrays(&self) -> &[NamedArray] {
        &self.arrays
    }

    pub fn push(&mut self, name: &str, shape: Vec<usize>, data: Vec<f64>) -> Result<()> {
        if self.get(name).is_some() {
            return Err(Error::Contract(format!("duplicate array name {name:?}")));
        }
        if name.len() > u16::MAX as usize {
            return Err(Error::Contract("array name too long".into()));
        }
        let want: usize = shape.iter().product();
        if want != data.len() {
            return Err(Error::Dimension(format!(
                "array {name:?} shape {shape:?} needs {want} values, got {}",
                data.len()
            )));
        }
        self.arrays.push(NamedArray {
            name: name.to_string(),
            shape,
            data,
        });
        Ok(())
    }

    pub fn push_matrix(&mut self, name: &str, m: &Matrix) -> Result<()> {
        self.push(name, vec![m.rows(), m.cols()], m.data().to_vec())
    }

    pub fn push_vector(&mut self, name: &str, v: &[f64]) -> Result<()> {
        self.push(name, vec![v.len()], v.to_vec())
    }

    pub fn get(&self, name: &str) -> Option<&NamedArray> {
        self.arrays.iter().find(|a| a.name == name)
    }

    fn require(&self, name: &str) -> Result<&NamedArray> {
        self.get(name)
            .ok_or_else(|| Error::Contract(format!("feature dump lacks array {name:?}")))
    }

    /// A rank-2 array as a matrix (rank-1 arrays become a single column).
    pub fn matrix(&self, name: &str) -> Result<Matrix> {
        let a = self.require(name)?;
        match a.shape.as_slice() {
            [r, c] => Matrix::new(*r, *c, a.data.clone()),
            [r] => Matrix::new(*r, 1, a.data.clone()),
            s => Err(Error::Dimension(format!("array {name:?} has rank {}", s.len()))),
        }
    }

    pub fn vector(&self, name: &str) -> Result<Vec<f64>> {
        let a = self.require(name)?;
        if a.shape.len() != 1 {
            return Err(Error::Dimension(format!(
                "array {name:?} has shape {:?}, expected a vector",
                a.shape
            )));
        }
        Ok(a.data.clone())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(FDUMP_MAGIC);
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for a in &self.arrays {
            out.extend_from_slice(&(a.name.len() as u16).to_le_bytes());
            out.extend_from_slice(a.name.as_bytes());
            out.extend_from_slice(&(a.shape.len() as u32).to_le_bytes());
            for &d in &a.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in &a.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        match &self.labels {
            None => out.push(0),
            Some(l) => {
                out.push(1);
                out.extend_from_slice(&(l.len() as u64).to_le_bytes());
                for &v in l {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(8)? != FDUMP_MAGIC {
            return Err(Error::format(path, 0, "bad FDUMP magic"));
        }
        let count = r.u32()?;
        let mut dump = FeatureDump::default();
        let mut seen = HashSet::new();
        for _ in 0..count {
            let at = r.pos;
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::format(path, at as u64, "array name is not UTF-8"))?
                .to_string();
            if !seen.insert(name.clone()) {
                return Err(Error::format(path, at as u64, format!("duplicate array name {name:?}")));
            }
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(16));
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let total = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .and_then(|n| n.checked_mul(8))
                .ok_or_else(|| Error::format(path, r.pos as u64, "array size overflows"))?;
            let payload = r.take(total)?;
            let data = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            dump.arrays.push(NamedArray { name, shape, data });
        }
        match r.u8()? {
            0 => {}
            1 => {
                let n = r.u64()? as usize;
                let raw = r.take(n.checked_mul(4).ok_or_else(|| {
                    Error::format(path, r.pos as u64, "label count overflows")
                })?)?;
                dump.labels = Some(
                    raw.chunks_exact(4)
                        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                );
            }
            f => {
                return Err(Error::format(path, (r.pos - 1) as u64, format!("bad label flag {f}")));
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::format(path, r.pos as u64, "trailing bytes after dump"));
        }
        Ok(dump)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format(self.path, self.pos as u64, format!("truncated: need {n} more bytes")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Contract(format!("{} has no file name", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp-{}", file_name.to_string_lossy(), std::process::id()));
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

pub fn write_fdump(dump: &FeatureDump, path: &Path) -> Result<()> {
    write_atomic(path, &dump.to_bytes())
}

pub fn read_fdump(path: &Path) -> Result<FeatureDump> {
    FeatureDump::from_bytes(&read_file(path)?, path)
}
