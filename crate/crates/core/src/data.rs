//! In-memory dataset container plus deterministic batching.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// A labeled dataset held fully in memory. `sample_shape` excludes the
/// batch axis; features are stored row-major, one sample after another.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    labels: Vec<usize>,
    sample_shape: Vec<usize>,
    classes: usize,
}

impl Dataset {
    pub fn new(features: Vec<f64>, labels: Vec<usize>, sample_shape: Vec<usize>, classes: usize) -> Result<Dataset> {
        let per: usize = sample_shape.iter().product();
        if per == 0 {
            return Err(Error::invalid("dataset", "sample shape must be non-empty"));
        }
        if features.len() != labels.len() * per {
            return Err(Error::invalid(
                "dataset",
                format!(
                    "{} feature values do not tile {} samples of {} values each",
                    features.len(),
                    labels.len(),
                    per
                ),
            ));
        }
        if let Some((row, &label)) = labels.iter().enumerate().find(|&(_, &l)| l >= classes) {
            return Err(Error::LabelOutOfRange {
                label,
                classes,
                row,
            });
        }
        Ok(Dataset {
            features,
            labels,
            sample_shape,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.sample_shape
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    /// Copies the selected rows into a batch tensor of shape
    /// [indices.len(), sample_shape...] plus their labels.
    pub fn gather(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let per: usize = self.sample_shape.iter().product();
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::invalid(
                    "gather",
                    format!("index {i} out of range for {} samples", self.len()),
                ));
            }
            data.extend_from_slice(&self.features[i * per..(i + 1) * per]);
            labels.push(self.labels[i]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(&self.sample_shape);
        Ok((Tensor::new(shape, data)?, labels))
    }

    /// Splits off the last `frac` of the samples as a held-out set,
    /// preserving order: (front, back).
    pub fn split_tail(&self, frac: f64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&frac) {
            return Err(Error::invalid("split_tail", format!("fraction {frac} outside [0,1)")));
        }
        let tail = ((self.len() as f64) * frac).round() as usize;
        let cut = self.len() - tail;
        let per: usize = self.sample_shape.iter().product();
        let front = Dataset {
            features: self.features[..cut * per].to_vec(),
            labels: self.labels[..cut].to_vec(),
            sample_shape: self.sample_shape.clone(),
            classes: self.classes,
        };
        let back = Dataset {
            features: self.features[cut * per..].to_vec(),
            labels: self.labels[cut..].to_vec(),
            sample_shape: self.sample_shape.clone(),
            classes: self.classes,
        };
        Ok((front, back))
    }

    /// Retains only the rows with the given labels and remaps each label to
    /// its position in `keep` (so keep=[4,5] yields labels 0 and 1).
    pub fn filter_remap(&self, keep: &[usize]) -> Result<Dataset> {
        let per: usize = self.sample_shape.iter().product();
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for (i, &l) in self.labels.iter().enumerate() {
            if let Some(pos) = keep.iter().position(|&k| k == l) {
                features.extend_from_slice(&self.features[i * per..(i + 1) * per]);
                labels.push(pos);
            }
        }
        Dataset::new(features, labels, self.sample_shape.clone(), keep.len())
    }
}

/// Epoch-deterministic batch order: indices 0..n shuffled with a seeded
/// generator, then cut into consecutive batches (last one may be short).
pub fn shuffled_batches(n: usize, batch: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if batch == 0 {
        return Err(Error::invalid("shuffled_batches", "batch size must be positive"));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    Ok(idx.chunks(batch).map(<[usize]>::to_vec).collect())
}
