//! Datasets: the synthetic Gaussian-mixture generator, the i.i.d. splitter
//! and an IDX (MNIST container) reader.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::FedError;
use crate::seed;

/// Row-major `f32` features with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientDataset {
    features: Vec<f32>,
    labels: Vec<u32>,
    num_features: usize,
    num_classes: usize,
}

impl ClientDataset {
    pub fn new(
        features: Vec<f32>,
        labels: Vec<u32>,
        num_features: usize,
        num_classes: usize,
    ) -> Result<Self, FedError> {
        if labels.is_empty() || num_features == 0 || num_classes == 0 {
            return Err(FedError::InvalidDataset("empty dataset".into()));
        }
        if features.len() != labels.len() * num_features {
            return Err(FedError::InvalidDataset(format!(
                "{} feature values for {} rows of width {num_features}",
                features.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(FedError::InvalidDataset(format!(
                "label {bad} outside [0, {num_classes})"
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(FedError::InvalidDataset("non-finite feature".into()));
        }
        Ok(Self {
            features,
            labels,
            num_features,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_features(&self) -> usize {
        self.num_features
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.features[i * self.num_features..(i + 1) * self.num_features]
    }

    pub fn label(&self, i: usize) -> u32 {
        self.labels[i]
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn features(&self) -> &[f32] {
        &self.features
    }

    /// Rows `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let mut features = Vec::with_capacity(indices.len() * self.num_features);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Self {
            features,
            labels,
            num_features: self.num_features,
            num_classes: self.num_classes,
        }
    }

    /// Concatenates datasets of the same width and class count.
    pub fn concat(parts: &[ClientDataset]) -> Result<Self, FedError> {
        let first = parts
            .first()
            .ok_or_else(|| FedError::InvalidDataset("nothing to concatenate".into()))?;
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for p in parts {
            if p.num_features != first.num_features || p.num_classes != first.num_classes {
                return Err(FedError::DimensionMismatch(
                    "concatenated datasets disagree on dimensions".into(),
                ));
            }
            features.extend_from_slice(&p.features);
            labels.extend_from_slice(&p.labels);
        }
        ClientDataset::new(features, labels, first.num_features, first.num_classes)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub num_samples: usize,
    pub num_features: usize,
    pub num_classes: usize,
    /// Standard deviation of the class centres; samples add unit noise.
    pub separation: f32,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_samples: 2000,
            num_features: 32,
            num_classes: 10,
            separation: 1.0,
            seed: 0,
        }
    }
}

/// Gaussian mixture with one isotropic component per class. Labels cycle
/// through the classes so every class is represented.
pub fn synthetic(spec: &SyntheticSpec) -> Result<ClientDataset, FedError> {
    if spec.num_samples == 0 || spec.num_features == 0 || spec.num_classes == 0 {
        return Err(FedError::InvalidDataset("synthetic spec has a zero dimension".into()));
    }
    let mut rng = seed::derived_rng(spec.seed, "synthetic", &[]);
    let centres: Vec<f32> = (0..spec.num_classes * spec.num_features)
        .map(|_| {
            let z: f32 = StandardNormal.sample(&mut rng);
            z * spec.separation
        })
        .collect();
    let mut features = Vec::with_capacity(spec.num_samples * spec.num_features);
    let mut labels = Vec::with_capacity(spec.num_samples);
    for i in 0..spec.num_samples {
        let class = i % spec.num_classes;
        let centre = &centres[class * spec.num_features..(class + 1) * spec.num_features];
        for &c in centre {
            let z: f32 = StandardNormal.sample(&mut rng);
            features.push(c + z);
        }
        labels.push(class as u32);
    }
    ClientDataset::new(features, labels, spec.num_features, spec.num_classes)
}

/// Shuffles with a seeded PRNG and cuts into `m` shards whose sizes differ by
/// at most one; the first `len % m` shards get the extra sample.
pub fn split_iid(data: &ClientDataset, m: usize, seed: u64) -> Result<Vec<ClientDataset>, FedError> {
    if m == 0 || data.len() < m {
        return Err(FedError::TooFewSamples {
            samples: data.len(),
            shards: m,
        });
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut seed::derived_rng(seed, "split-iid", &[]));
    let base = data.len() / m;
    let extra = data.len() % m;
    let mut shards = Vec::with_capacity(m);
    let mut start = 0;
    for k in 0..m {
        let size = base + usize::from(k < extra);
        shards.push(data.select(&order[start..start + size]));
        start += size;
    }
    Ok(shards)
}

/// Shuffled row order for one epoch.
pub(crate) fn epoch_order<R: Rng>(len: usize, rng: &mut R) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(rng);
    order
}

/// An IDX array of unsigned bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

const IDX_UBYTE: u8 = 0x08;

pub fn parse_idx(bytes: &[u8]) -> Result<IdxArray, FedError> {
    let bad = |m: String| FedError::InvalidDataset(format!("idx: {m}"));
    if bytes.len() < 4 {
        return Err(bad("file shorter than magic".into()));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(bad(format!("bad magic {:02x?}", &bytes[..4])));
    }
    if bytes[2] != IDX_UBYTE {
        return Err(bad(format!("unsupported element type 0x{:02x}", bytes[2])));
    }
    let ndims = bytes[3] as usize;
    if ndims == 0 {
        return Err(bad("zero dimensions".into()));
    }
    let header_len = 4 + 4 * ndims;
    if bytes.len() < header_len {
        return Err(bad("truncated dimension list".into()));
    }
    let dims: Vec<usize> = bytes[4..header_len]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes(c.try_into().expect("4 bytes")) as usize)
        .collect();
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| bad("element count overflow".into()))?;
    let data = &bytes[header_len..];
    if data.len() != count {
        return Err(bad(format!("expected {count} elements, found {}", data.len())));
    }
    Ok(IdxArray {
        dims,
        data: data.to_vec(),
    })
}

/// Loads an image/label IDX pair, keeping the first `subset` samples when
/// given. Pixels are scaled to [0, 1].
pub fn load_idx(
    images: &Path,
    labels: &Path,
    subset: Option<usize>,
    num_classes: usize,
) -> Result<ClientDataset, FedError> {
    let read = |p: &Path| {
        fs::read(p).map_err(|e| FedError::InvalidDataset(format!("{}: {e}", p.display())))
    };
    let img = parse_idx(&read(images)?)?;
    let lab = parse_idx(&read(labels)?)?;
    if lab.dims.len() != 1 || img.dims.is_empty() || img.dims[0] != lab.dims[0] {
        return Err(FedError::InvalidDataset(format!(
            "image dims {:?} do not match label dims {:?}",
            img.dims, lab.dims
        )));
    }
    let total = lab.dims[0];
    let n = subset.map_or(total, |s| s.min(total));
    let width: usize = img.dims[1..].iter().product();
    let features = img.data[..n * width].iter().map(|&b| f32::from(b) / 255.0).collect();
    let labels = lab.data[..n].iter().map(|&b| u32::from(b)).collect();
    ClientDataset::new(features, labels, width, num_classes)
}
