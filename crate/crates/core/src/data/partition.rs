use std::collections::BTreeMap;

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Dataset, Sample};
use crate::rng::{stream_rng, streams};
use crate::{Error, Result};

/// Knobs of the n-way k-shot partitioner. Each client draws
/// `n_i = round(n_avg + N(0, stdev_n))` classes and `k_i = round(k_avg + N(0, stdev_k))`
/// training samples per class, both clamped to what the data allows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionConfig {
    pub clients: usize,
    pub n_avg: f64,
    pub k_avg: f64,
    pub stdev_n: f64,
    pub stdev_k: f64,
    /// Held-out fraction per class per client, relative to `k_i`.
    pub test_fraction: f64,
    /// Forbid two clients from drawing the same sample.
    pub disjoint_pools: bool,
    pub seed: u64,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        PartitionConfig {
            clients: 20,
            n_avg: 3.0,
            k_avg: 100.0,
            stdev_n: 2.0,
            stdev_k: 0.0,
            test_fraction: 0.2,
            disjoint_pools: false,
            seed: 0,
        }
    }
}

/// One client's local data: a class subset with disjoint train and test
/// splits.
#[derive(Clone, Debug, PartialEq)]
pub struct Shard {
    pub client_id: u32,
    /// Ascending class ids.
    pub class_space: Vec<usize>,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Shard {
    /// |D_{i,j}| for every class in the training split.
    pub fn train_counts(&self) -> BTreeMap<usize, usize> {
        let mut counts = BTreeMap::new();
        for s in &self.train {
            *counts.entry(s.label).or_insert(0) += 1;
        }
        counts
    }

    pub fn train_refs(&self) -> Vec<&Sample> {
        self.train.iter().collect()
    }

    pub fn test_refs(&self) -> Vec<&Sample> {
        self.test.iter().collect()
    }

    pub fn dump(&self) -> ShardDump {
        ShardDump {
            client_id: self.client_id,
            class_space: self.class_space.clone(),
            train_indices: self.train.iter().map(|s| s.id).collect(),
            test_indices: self.test.iter().map(|s| s.id).collect(),
        }
    }

    /// Rebuilds a shard from a dump against the dataset it was cut from.
    pub fn from_dump(dump: &ShardDump, ds: &Dataset) -> Result<Shard> {
        let fetch = |ids: &[usize]| -> Result<Vec<Sample>> {
            ids.iter()
                .map(|&i| {
                    ds.samples
                        .get(i)
                        .cloned()
                        .ok_or_else(|| Error::input(format!("sample index {i} out of range")))
                })
                .collect()
        };
        Ok(Shard {
            client_id: dump.client_id,
            class_space: dump.class_space.clone(),
            train: fetch(&dump.train_indices)?,
            test: fetch(&dump.test_indices)?,
        })
    }
}

/// Debug form of a [`Shard`]: sample indices instead of feature vectors.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardDump {
    pub client_id: u32,
    pub class_space: Vec<usize>,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
}

fn test_size(k: usize, fraction: f64) -> usize {
    if fraction <= 0.0 {
        0
    } else {
        ((fraction * k as f64).round() as usize).max(1)
    }
}

/// Largest `k ≥ 1` with `k + test_size(k) ≤ available`, if any.
fn max_train(available: usize, fraction: f64) -> Option<usize> {
    (1..=available)
        .rev()
        .find(|&k| k + test_size(k, fraction) <= available)
}

fn noisy_round<R: Rng + ?Sized>(rng: &mut R, mean: f64, stdev: f64) -> i64 {
    let z: f64 = StandardNormal.sample(rng);
    (mean + stdev * z).round() as i64
}

/// Splits `ds` into `cfg.clients` heterogeneous shards.
///
/// Classes are drawn uniformly without replacement. By default every client
/// samples its per-class instances from the full class pool, so two clients
/// may share samples; within a client train and test never overlap.
pub fn partition(ds: &Dataset, cfg: &PartitionConfig) -> Result<Vec<Shard>> {
    if ds.is_empty() {
        return Err(Error::input("cannot partition an empty dataset"));
    }
    if cfg.clients == 0 {
        return Err(Error::input("need at least one client"));
    }
    if !(cfg.n_avg >= 1.0 && cfg.n_avg <= ds.num_classes as f64) {
        return Err(Error::input(format!(
            "n_avg = {} outside [1, {}]",
            cfg.n_avg, ds.num_classes
        )));
    }
    if !(cfg.k_avg >= 1.0) {
        return Err(Error::input(format!("k_avg = {} must be ≥ 1", cfg.k_avg)));
    }
    if cfg.stdev_n < 0.0 || cfg.stdev_k < 0.0 || !(0.0..1.0).contains(&cfg.test_fraction) {
        return Err(Error::input(
            "stdevs must be ≥ 0 and test_fraction in [0, 1)",
        ));
    }

    let mut rng = stream_rng(cfg.seed, &[streams::PARTITION]);
    let pools = ds.class_pools();
    let candidates: Vec<usize> = (0..ds.num_classes)
        .filter(|&c| max_train(pools[c].len(), cfg.test_fraction).is_some())
        .collect();
    if candidates.is_empty() {
        return Err(Error::input("no class has enough samples to split"));
    }
    // Disjoint mode consumes each class pool through a shuffled cursor.
    let mut cursors: Vec<(Vec<usize>, usize)> = pools
        .iter()
        .map(|p| {
            let mut shuffled = p.clone();
            if cfg.disjoint_pools {
                let perm = index::sample(&mut rng, p.len(), p.len());
                shuffled = perm.iter().map(|i| p[i]).collect();
            }
            (shuffled, 0)
        })
        .collect();

    let mut shards = Vec::with_capacity(cfg.clients);
    for client in 0..cfg.clients {
        let n = noisy_round(&mut rng, cfg.n_avg, cfg.stdev_n).clamp(1, candidates.len() as i64)
            as usize;
        let k_raw = noisy_round(&mut rng, cfg.k_avg, cfg.stdev_k).max(1) as usize;
        let mut class_space: Vec<usize> = index::sample(&mut rng, candidates.len(), n)
            .iter()
            .map(|i| candidates[i])
            .collect();
        class_space.sort_unstable();

        let available = class_space
            .iter()
            .map(|&c| {
                if cfg.disjoint_pools {
                    cursors[c].0.len() - cursors[c].1
                } else {
                    pools[c].len()
                }
            })
            .min()
            .expect("n ≥ 1");
        let k = max_train(available, cfg.test_fraction)
            .map(|cap| k_raw.min(cap))
            .ok_or_else(|| {
                Error::input(format!(
                    "client {client}: class pools exhausted (disjoint_pools needs a larger dataset)"
                ))
            })?;
        let t = test_size(k, cfg.test_fraction);

        let mut train = Vec::with_capacity(n * k);
        let mut test = Vec::with_capacity(n * t);
        for &c in &class_space {
            let chosen: Vec<usize> = if cfg.disjoint_pools {
                let (order, cursor) = &mut cursors[c];
                let ids = order[*cursor..*cursor + k + t].to_vec();
                *cursor += k + t;
                ids
            } else {
                let pool = &pools[c];
                index::sample(&mut rng, pool.len(), k + t)
                    .iter()
                    .map(|i| pool[i])
                    .collect()
            };
            // Test split first, so it is held out before the training draw.
            test.extend(chosen[..t].iter().map(|&i| ds.samples[i].clone()));
            train.extend(chosen[t..].iter().map(|&i| ds.samples[i].clone()));
        }
        train.sort_by_key(|s| s.id);
        test.sort_by_key(|s| s.id);
        shards.push(Shard {
            client_id: client as u32,
            class_space,
            train,
            test,
        });
    }
    Ok(shards)
}
