//! Synthetic sequence-classification data.
//!
//! Each class owns a random prototype sequence (`seq_len` vectors of
//! `input_dim` standard-normal entries); samples are the prototype plus
//! i.i.d. Gaussian noise of scale `noise_sigma`. Features are stored in single
//! precision and widened on batch extraction.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticDatasetConfig {
    pub num_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub seq_len: usize,
    pub input_dim: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SyntheticDatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::validation("dataset needs at least 2 classes"));
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(Error::validation("samples per class must be positive"));
        }
        if self.seq_len == 0 || self.input_dim == 0 {
            return Err(Error::validation("seq_len and input_dim must be positive"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::validation("noise_sigma must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Labelled fixed-length sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    seq_len: usize,
    input_dim: usize,
    num_classes: usize,
    features: Vec<f32>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn from_parts(
        seq_len: usize,
        input_dim: usize,
        num_classes: usize,
        features: Vec<f32>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        if features.len() != labels.len() * seq_len * input_dim {
            return Err(Error::Dimension {
                op: "dataset",
                left: vec![labels.len(), seq_len, input_dim],
                right: vec![features.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::validation(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Self {
            seq_len,
            input_dim,
            num_classes,
            features,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        let n = self.seq_len * self.input_dim;
        &self.features[i * n..(i + 1) * n]
    }

    /// Indices of samples whose label is in `classes`, in dataset order.
    pub fn indices_of(&self, classes: &[usize]) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, l)| classes.contains(l))
            .map(|(i, _)| i)
            .collect()
    }

    /// Stacks the selected samples into `[n, seq_len, input_dim]`.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        if indices.is_empty() {
            return Err(Error::validation("empty batch"));
        }
        let n = self.seq_len * self.input_dim;
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            if i >= self.len() {
                return Err(Error::validation(format!("sample index {i} out of range")));
            }
            data.extend(self.sample(i).iter().map(|&v| f64::from(v)));
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        let t = Tensor::new(vec![indices.len(), self.seq_len, self.input_dim], data)?;
        Ok((t, labels))
    }

    /// Copy with labels replaced; used for relabelled baselines.
    pub fn with_labels(&self, labels: Vec<usize>) -> Result<Self> {
        Self::from_parts(
            self.seq_len,
            self.input_dim,
            self.num_classes,
            self.features.clone(),
            labels,
        )
    }

    /// Subset in the given order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let n = self.seq_len * self.input_dim;
        let mut features = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            features.extend_from_slice(self.sample(i));
        }
        Self {
            seq_len: self.seq_len,
            input_dim: self.input_dim,
            num_classes: self.num_classes,
            features,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Concatenation of two datasets with matching geometry.
    pub fn concat(&self, other: &Dataset) -> Result<Self> {
        if (self.seq_len, self.input_dim, self.num_classes)
            != (other.seq_len, other.input_dim, other.num_classes)
        {
            return Err(Error::Dimension {
                op: "concat",
                left: vec![self.seq_len, self.input_dim, self.num_classes],
                right: vec![other.seq_len, other.input_dim, other.num_classes],
            });
        }
        let mut out = self.clone();
        out.features.extend_from_slice(&other.features);
        out.labels.extend_from_slice(&other.labels);
        Ok(out)
    }
}

/// Balanced train/test splits drawn from the same class prototypes.
#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub test: Dataset,
}

pub fn generate_dataset(cfg: &SyntheticDatasetConfig) -> Result<Splits> {
    cfg.validate()?;
    let mut rng = rng::stream(cfg.seed, Stream::Data);
    let n = cfg.seq_len * cfg.input_dim;
    let prototypes: Vec<Vec<f64>> = (0..cfg.num_classes)
        .map(|_| (0..n).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();

    let mut draw = |per_class: usize| -> Result<Dataset> {
        let mut features = Vec::with_capacity(cfg.num_classes * per_class * n);
        let mut labels = Vec::with_capacity(cfg.num_classes * per_class);
        for (c, proto) in prototypes.iter().enumerate() {
            for _ in 0..per_class {
                features.extend(proto.iter().map(|&p| {
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    (p + cfg.noise_sigma * noise) as f32
                }));
                labels.push(c);
            }
        }
        Dataset::from_parts(cfg.seq_len, cfg.input_dim, cfg.num_classes, features, labels)
    };
    let train = draw(cfg.train_per_class)?;
    let test = draw(cfg.test_per_class)?;
    Ok(Splits { train, test })
}
