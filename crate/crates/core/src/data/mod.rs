//! Datasets, synthetic generation, CSV ingestion, splitting and partitioning.

mod csv;
mod partition;
mod split;
mod synthetic;

pub use self::csv::{load_csv, CategoricalColumn, LoadWarning, Schema, TargetColumn};
pub use partition::{partition_dirichlet, partition_indices};
pub use split::{split, SplitSpec, Splits};
pub use synthetic::{generate_pool, generate_synthetic};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Features with binary labels and a binary sensitive attribute.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    features: Tensor,
    labels: Vec<u8>,
    sensitive: Vec<u8>,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<u8>, sensitive: Vec<u8>) -> Result<Self> {
        let (n, _) = features.dims2();
        if features.shape().len() != 2 || n == 0 {
            return Err(Error::contract(format!(
                "features must be a non-empty matrix, got {:?}",
                features.shape()
            )));
        }
        if labels.len() != n || sensitive.len() != n {
            return Err(Error::Dimension {
                op: "dataset",
                left: vec![n],
                right: vec![labels.len(), sensitive.len()],
            });
        }
        if labels.iter().chain(&sensitive).any(|&v| v > 1) {
            return Err(Error::contract("labels and sensitive values must be 0 or 1"));
        }
        if !features.is_finite() {
            return Err(Error::Numeric("dataset features".into()));
        }
        Ok(Dataset {
            features,
            labels,
            sensitive,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.dims2().1
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn sensitive(&self) -> &[u8] {
        &self.sensitive
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            sensitive: idx.iter().map(|&i| self.sensitive[i]).collect(),
        }
    }

    /// Row-wise concatenation; all parts must share a feature width.
    pub fn concat(parts: &[&Dataset]) -> Result<Dataset> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("cannot concatenate zero datasets"))?;
        let d = first.dim();
        let mut data = Vec::new();
        let mut labels = Vec::new();
        let mut sensitive = Vec::new();
        for p in parts {
            if p.dim() != d {
                return Err(Error::Dimension {
                    op: "concat",
                    left: vec![d],
                    right: vec![p.dim()],
                });
            }
            data.extend_from_slice(p.features.data());
            labels.extend_from_slice(&p.labels);
            sensitive.extend_from_slice(&p.sensitive);
        }
        Dataset::new(Tensor::matrix(labels.len(), d, data)?, labels, sensitive)
    }

    pub fn has_both_labels(&self) -> bool {
        has_both(&self.labels)
    }

    pub fn has_both_groups(&self) -> bool {
        has_both(&self.sensitive)
    }

    /// Fraction of rows with label 1.
    pub fn positive_fraction(&self) -> f64 {
        fraction_ones(&self.labels)
    }

    /// Fraction of rows in sensitive group 1.
    pub fn group_fraction(&self) -> f64 {
        fraction_ones(&self.sensitive)
    }
}

/// Encoder outputs for a client's training rows, shipped to the server for
/// fusion training.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentDataset {
    latents: Tensor,
    labels: Vec<u8>,
    sensitive: Vec<u8>,
}

impl LatentDataset {
    pub fn new(latents: Tensor, labels: Vec<u8>, sensitive: Vec<u8>) -> Result<Self> {
        let (n, _) = latents.dims2();
        if labels.len() != n || sensitive.len() != n {
            return Err(Error::Dimension {
                op: "latent dataset",
                left: vec![n],
                right: vec![labels.len(), sensitive.len()],
            });
        }
        if !latents.is_finite() {
            return Err(Error::Numeric("latent features".into()));
        }
        Ok(LatentDataset {
            latents,
            labels,
            sensitive,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn latents(&self) -> &Tensor {
        &self.latents
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn sensitive(&self) -> &[u8] {
        &self.sensitive
    }
}

fn has_both(v: &[u8]) -> bool {
    v.contains(&0) && v.contains(&1)
}

fn fraction_ones(v: &[u8]) -> f64 {
    v.iter().filter(|&&x| x == 1).count() as f64 / v.len().max(1) as f64
}
