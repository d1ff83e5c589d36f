//! Labelled datasets, the synthetic blob generator, IDX loading and the
//! heterogeneous n-way k-shot partitioner.

mod idx;
mod partition;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::rng::{stream_rng, streams};
use crate::{Error, Result};

pub use idx::{load_idx, read_idx_images, read_idx_labels, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC};
pub use partition::{partition, PartitionConfig, Shard, ShardDump};

/// One labelled example. `id` is its index in the source [`Dataset`] and fixes
/// the reduction order inside a batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: usize,
    pub features: Vec<f64>,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub num_classes: usize,
    pub input_dim: usize,
}

impl Dataset {
    /// Builds a dataset, assigning ids by position and checking invariants.
    pub fn new(rows: Vec<(Vec<f64>, usize)>, num_classes: usize, input_dim: usize) -> Result<Self> {
        let mut samples = Vec::with_capacity(rows.len());
        for (id, (features, label)) in rows.into_iter().enumerate() {
            if features.len() != input_dim {
                return Err(Error::input(format!(
                    "sample {id} has {} features, expected {input_dim}",
                    features.len()
                )));
            }
            if label >= num_classes {
                return Err(Error::input(format!(
                    "sample {id} has label {label} ≥ num_classes {num_classes}"
                )));
            }
            if features.iter().any(|v| !v.is_finite()) {
                return Err(Error::input(format!("sample {id} has non-finite features")));
            }
            samples.push(Sample {
                id,
                features,
                label,
            });
        }
        Ok(Dataset {
            samples,
            num_classes,
            input_dim,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Sample ids grouped by label.
    pub fn class_pools(&self) -> Vec<Vec<usize>> {
        let mut pools = vec![Vec::new(); self.num_classes];
        for s in &self.samples {
            pools[s.label].push(s.id);
        }
        pools
    }

    pub fn class_counts(&self) -> Vec<usize> {
        self.class_pools().iter().map(Vec::len).collect()
    }
}

/// Isotropic Gaussian blob per class. Class means are `N(0, I / input_dim)`
/// draws, so their expected squared norm is 1; samples add
/// `cluster_spread · N(0, I)` noise.
pub fn generate_synthetic(
    num_classes: usize,
    input_dim: usize,
    samples_per_class: usize,
    cluster_spread: f64,
    seed: u64,
) -> Result<Dataset> {
    if num_classes == 0 || input_dim == 0 || samples_per_class == 0 {
        return Err(Error::input("synthetic dataset sizes must be positive"));
    }
    if !(cluster_spread > 0.0 && cluster_spread.is_finite()) {
        return Err(Error::input("cluster_spread must be positive and finite"));
    }
    let mut rng = stream_rng(seed, &[streams::SYNTHETIC]);
    let scale = (input_dim as f64).sqrt().recip();
    let means: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| {
            normal_vec(&mut rng, input_dim)
                .into_iter()
                .map(|z| scale * z)
                .collect()
        })
        .collect();
    let mut rows = Vec::with_capacity(num_classes * samples_per_class);
    for _ in 0..samples_per_class {
        for (label, mean) in means.iter().enumerate() {
            let x = mean
                .iter()
                .zip(normal_vec(&mut rng, input_dim))
                .map(|(m, z)| m + cluster_spread * z)
                .collect();
            rows.push((x, label));
        }
    }
    Dataset::new(rows, num_classes, input_dim)
}

fn normal_vec<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}
