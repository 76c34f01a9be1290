//! Synthetic desk-scale datasets and the IDX image-file reader.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Mixed into the seed so splitting does not reuse the generator stream.
const SPLIT_SALT: u64 = 0x5eed_0001;

/// Which side of the train/val partition a dataset is.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

/// Labelled examples stored as an `[N, features]` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T> {
    inputs: Tensor<T>,
    labels: Vec<usize>,
    num_classes: usize,
    /// `[features]` for flat data, `[height, width, channels]` for images.
    feature_shape: Vec<usize>,
    split: Split,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(inputs: Tensor<T>, labels: Vec<usize>, num_classes: usize, feature_shape: Vec<usize>, split: Split) -> Result<Self> {
        let (n, f) = inputs.dims2("dataset")?;
        if labels.len() != n {
            return Err(Error::shape("dataset", format!("{n} inputs but {} labels", labels.len())));
        }
        if feature_shape.iter().product::<usize>() != f {
            return Err(Error::shape("dataset", format!("feature shape {feature_shape:?} vs {f} columns")));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Domain(format!("label {bad} outside [0, {num_classes})")));
        }
        Ok(Self {
            inputs,
            labels,
            num_classes,
            feature_shape,
            split,
        })
    }

    pub fn inputs(&self) -> &Tensor<T> {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn feature_shape(&self) -> &[usize] {
        &self.feature_shape
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_features(&self) -> usize {
        self.inputs.shape()[1]
    }

    /// Inputs and labels of the given rows.
    pub fn batch(&self, rows: &[usize]) -> Result<(Tensor<T>, Vec<usize>)> {
        let x = self.inputs.select_rows(rows)?;
        Ok((x, rows.iter().map(|&r| self.labels[r]).collect()))
    }

    /// Per-class counts.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_classes];
        for &y in &self.labels {
            c[y] += 1;
        }
        c
    }

    /// Fraction of the most frequent class.
    pub fn majority_fraction(&self) -> f64 {
        let counts = self.class_counts();
        *counts.iter().max().unwrap_or(&0) as f64 / self.len().max(1) as f64
    }

    fn subset(&self, rows: &[usize], split: Split) -> Result<Self> {
        let (x, y) = self.batch(rows)?;
        Self::new(x, y, self.num_classes, self.feature_shape.clone(), split)
    }
}

/// `[N, C]` one-hot encoding.
pub fn one_hot<T: Scalar>(labels: &[usize], num_classes: usize) -> Result<Tensor<T>> {
    let mut data = vec![T::zero(); labels.len() * num_classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= num_classes {
            return Err(Error::Domain(format!("label {y} outside [0, {num_classes})")));
        }
        data[i * num_classes + y] = T::one();
    }
    Tensor::new(vec![labels.len(), num_classes], data)
}

/// Disjoint train and validation partitions.
#[derive(Clone, Debug, PartialEq)]
pub struct Splits<T> {
    pub train: Dataset<T>,
    pub val: Dataset<T>,
}

impl<T: Scalar> Splits<T> {
    /// Stratified partition: `val_fraction` of every class goes to validation.
    pub fn stratified(
        inputs: Tensor<T>,
        labels: Vec<usize>,
        num_classes: usize,
        feature_shape: Vec<usize>,
        val_fraction: f64,
        seed: u64,
    ) -> Result<Self> {
        if !(0.0..1.0).contains(&val_fraction) {
            return Err(Error::Domain(format!("validation fraction {val_fraction} outside [0, 1)")));
        }
        let all = Dataset::new(inputs, labels, num_classes, feature_shape, Split::Train)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SPLIT_SALT);
        let (mut train, mut val) = (Vec::new(), Vec::new());
        for c in 0..num_classes {
            let mut idx: Vec<usize> = (0..all.len()).filter(|&i| all.labels[i] == c).collect();
            idx.shuffle(&mut rng);
            let n_val = (idx.len() as f64 * val_fraction).round() as usize;
            val.extend_from_slice(&idx[..n_val]);
            train.extend_from_slice(&idx[n_val..]);
        }
        train.sort_unstable();
        val.sort_unstable();
        if train.is_empty() || val.is_empty() {
            return Err(Error::Domain("split leaves an empty partition".into()));
        }
        Ok(Self {
            train: all.subset(&train, Split::Train)?,
            val: all.subset(&val, Split::Val)?,
        })
    }
}

/// Fraction of each class held out for validation by the built-in loaders.
pub const DEFAULT_VAL_FRACTION: f64 = 0.2;

/// Synthetic two-class generators.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    /// Isotropic unit-variance blobs at `(−2, −2)` and `(2, 2)`.
    TwoGaussians,
    /// Noisy circles of radius 1 (class 0) and 2.5 (class 1) around the origin.
    ConcentricRings,
}

impl SyntheticKind {
    pub const ALL: [SyntheticKind; 2] = [SyntheticKind::TwoGaussians, SyntheticKind::ConcentricRings];

    pub fn as_str(self) -> &'static str {
        match self {
            SyntheticKind::TwoGaussians => "two_gaussians",
            SyntheticKind::ConcentricRings => "concentric_rings",
        }
    }
}

impl fmt::Display for SyntheticKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SyntheticKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SyntheticKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Unknown {
                what: "dataset",
                name: s.to_string(),
            })
    }
}

/// Radial noise of the ring generator.
const RING_NOISE: f64 = 0.15;

fn sample_normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// `n` points with labels alternating `0, 1, 0, …`, split stratified into
/// train and validation. Identical seeds give bit-identical data.
pub fn make_synthetic<T: Scalar>(kind: SyntheticKind, n: usize, seed: u64) -> Result<Splits<T>> {
    if n < 100 {
        return Err(Error::Domain(format!("synthetic datasets need n >= 100, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = i % 2;
        let (a, b) = match kind {
            SyntheticKind::TwoGaussians => {
                let c = if y == 0 { -2.0 } else { 2.0 };
                (c + sample_normal(&mut rng), c + sample_normal(&mut rng))
            }
            SyntheticKind::ConcentricRings => {
                let radius = if y == 0 { 1.0 } else { 2.5 };
                let r = radius + RING_NOISE * sample_normal(&mut rng);
                let theta = rng.random::<f64>() * std::f64::consts::TAU;
                (r * theta.cos(), r * theta.sin())
            }
        };
        data.push(T::lit(a));
        data.push(T::lit(b));
        labels.push(y);
    }
    Splits::stratified(Tensor::new(vec![n, 2], data)?, labels, 2, vec![2], DEFAULT_VAL_FRACTION, seed)
}

/// IDX element type code for unsigned bytes, the only one supported.
pub const IDX_UBYTE: u8 = 0x08;

/// A decoded IDX array: raw bytes and the header dimensions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub bytes: Vec<u8>,
}

impl IdxArray {
    /// Pixel values scaled to `[0, 1]` as a tensor of the header shape.
    pub fn to_tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        let scale = T::one() / T::lit(255.0);
        Tensor::new(self.dims.clone(), self.bytes.iter().map(|&b| T::lit(b as f64) * scale).collect())
    }
}

fn format_err(offset: usize, detail: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        detail: detail.into(),
    }
}

/// Parses an IDX buffer: magic `00 00 08 ndim`, big-endian `u32` dims, payload.
pub fn parse_idx(buf: &[u8]) -> Result<IdxArray> {
    if buf.len() < 4 {
        return Err(format_err(buf.len(), format!("truncated magic: {} of 4 bytes", buf.len())));
    }
    if let Some(i) = buf[..2].iter().position(|&b| b != 0) {
        return Err(format_err(i, format!("bad magic byte {:#04x}, expected 0x00", buf[i])));
    }
    if buf[2] != IDX_UBYTE {
        return Err(format_err(2, format!("unsupported dtype {:#04x}, only unsigned byte (0x08)", buf[2])));
    }
    let ndim = buf[3] as usize;
    if ndim == 0 {
        return Err(format_err(3, "zero dimensions"));
    }
    let header = 4 + 4 * ndim;
    if buf.len() < header {
        return Err(format_err(buf.len(), format!("truncated header: expected {header} bytes, found {}", buf.len())));
    }
    let mut dims = Vec::with_capacity(ndim);
    for d in 0..ndim {
        let off = 4 + 4 * d;
        let v = u32::from_be_bytes([buf[off], buf[off + 1], buf[off + 2], buf[off + 3]]) as usize;
        if v == 0 {
            return Err(format_err(off, "zero-length dimension"));
        }
        dims.push(v);
    }
    let expected = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| format_err(4, "dimension product overflows"))?;
    let actual = buf.len() - header;
    if actual != expected {
        return Err(format_err(
            header + actual.min(expected),
            format!("payload length: expected {expected} bytes, found {actual}"),
        ));
    }
    Ok(IdxArray {
        dims,
        bytes: buf[header..].to_vec(),
    })
}

/// Reads an IDX file; pixel bytes become floats in `[0, 1]`.
pub fn read_idx<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    read_idx_raw(path)?.to_tensor()
}

fn read_idx_raw(path: impl AsRef<Path>) -> Result<IdxArray> {
    let path = path.as_ref();
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_idx(&buf)
}

/// Loads an IDX image file and its 1-D label file as stratified splits.
/// Images `[N, H, W]` or `[N, H, W, C]` become `[N, H·W·C]` rows.
pub fn load_idx_dataset<T: Scalar>(images: impl AsRef<Path>, labels: impl AsRef<Path>, seed: u64) -> Result<Splits<T>> {
    let img = read_idx_raw(images)?;
    let lab = read_idx_raw(labels)?;
    if lab.dims.len() != 1 {
        return Err(format_err(3, format!("label file must be 1-D, has {} dims", lab.dims.len())));
    }
    let n = img.dims[0];
    if lab.dims[0] != n {
        return Err(Error::shape("load_idx_dataset", format!("{n} images but {} labels", lab.dims[0])));
    }
    let feature_shape = match img.dims[1..] {
        [h, w] => vec![h, w, 1],
        [h, w, c] => vec![h, w, c],
        _ => {
            return Err(format_err(3, format!("image file must have 3 or 4 dims, has {}", img.dims.len())));
        }
    };
    let features: usize = feature_shape.iter().product();
    let labels: Vec<usize> = lab.bytes.iter().map(|&b| b as usize).collect();
    let num_classes = labels.iter().max().map_or(1, |&m| m + 1);
    let x = img.to_tensor::<T>()?.reshape(vec![n, features])?;
    Splits::stratified(x, labels, num_classes, feature_shape, DEFAULT_VAL_FRACTION, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_header(dims: &[u32]) -> Vec<u8> {
        let mut v = vec![0, 0, IDX_UBYTE, dims.len() as u8];
        for d in dims {
            v.extend_from_slice(&d.to_be_bytes());
        }
        v
    }

    #[test]
    fn two_gaussians_is_balanced_and_deterministic() {
        let a = make_synthetic::<f64>(SyntheticKind::TwoGaussians, 1000, 7).unwrap();
        let b = make_synthetic::<f64>(SyntheticKind::TwoGaussians, 1000, 7).unwrap();
        assert_eq!(a, b);
        let total: Vec<usize> = a
            .train
            .class_counts()
            .iter()
            .zip(a.val.class_counts())
            .map(|(x, y)| x + y)
            .collect();
        assert_eq!(total, vec![500, 500]);
        assert_eq!(a.train.len() + a.val.len(), 1000);
        let c = make_synthetic::<f64>(SyntheticKind::TwoGaussians, 1000, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn odd_n_is_balanced_within_one() {
        let s = make_synthetic::<f64>(SyntheticKind::ConcentricRings, 101, 1).unwrap();
        let c0 = s.train.class_counts()[0] + s.val.class_counts()[0];
        let c1 = s.train.class_counts()[1] + s.val.class_counts()[1];
        assert!(c0.abs_diff(c1) <= 1);
    }

    #[test]
    fn synthetic_rejects_small_n_and_unknown_kind() {
        assert!(make_synthetic::<f64>(SyntheticKind::TwoGaussians, 99, 0).is_err());
        assert!(matches!("spirals".parse::<SyntheticKind>(), Err(Error::Unknown { .. })));
        assert_eq!("concentric_rings".parse::<SyntheticKind>().unwrap(), SyntheticKind::ConcentricRings);
    }

    #[test]
    fn idx_header_arithmetic() {
        let mut buf = idx_header(&[10, 28, 28]);
        buf.extend(std::iter::repeat(0u8).take(7840));
        let arr = parse_idx(&buf).unwrap();
        assert_eq!(arr.dims, vec![10, 28, 28]);
        assert_eq!(arr.to_tensor::<f64>().unwrap().shape(), &[10, 28, 28]);
    }

    #[test]
    fn idx_pixel_scaling() {
        let mut buf = idx_header(&[2]);
        buf.extend_from_slice(&[255, 0]);
        let t = parse_idx(&buf).unwrap().to_tensor::<f64>().unwrap();
        assert_eq!(t.data(), &[1.0, 0.0]);
    }

    #[test]
    fn idx_errors_name_offsets() {
        let mut buf = idx_header(&[10, 28, 28]);
        buf.extend(std::iter::repeat(0u8).take(100));
        match parse_idx(&buf) {
            Err(Error::Format { offset, detail }) => {
                assert_eq!(offset, 16 + 100);
                assert!(detail.contains("expected 7840"), "{detail}");
                assert!(detail.contains("found 100"), "{detail}");
            }
            other => panic!("unexpected {other:?}"),
        }
        let mut bad = idx_header(&[1]);
        bad.push(0);
        bad[1] = 0x01;
        assert!(matches!(parse_idx(&bad), Err(Error::Format { offset: 1, .. })));
        let mut float = idx_header(&[1]);
        float.extend_from_slice(&[0, 0, 0, 0]);
        float[2] = 0x0d;
        assert!(matches!(parse_idx(&float), Err(Error::Format { offset: 2, .. })));
        assert!(matches!(parse_idx(&[0, 0]), Err(Error::Format { offset: 2, .. })));
    }

    #[test]
    fn idx_dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = idx_header(&[10, 2, 2]);
        img.extend((0..40).map(|v| v as u8));
        let mut lab = idx_header(&[10]);
        lab.extend((0..10).map(|v| (v % 2) as u8));
        std::fs::write(dir.path().join("img"), &img).unwrap();
        std::fs::write(dir.path().join("lab"), &lab).unwrap();
        let s = load_idx_dataset::<f64>(dir.path().join("img"), dir.path().join("lab"), 3).unwrap();
        assert_eq!(s.train.feature_shape(), &[2, 2, 1]);
        assert_eq!(s.train.len() + s.val.len(), 10);
        assert_eq!(s.val.len(), 2);
    }

    #[test]
    fn split_is_disjoint() {
        let s = make_synthetic::<f64>(SyntheticKind::TwoGaussians, 200, 4).unwrap();
        for r in 0..s.val.len() {
            let v = s.val.inputs().row(r);
            assert!((0..s.train.len()).all(|t| s.train.inputs().row(t) != v));
        }
    }
}
