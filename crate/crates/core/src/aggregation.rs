//! Server-side fusion of client uploads and payload accounting.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::model::{ModelState, Prototype, PrototypeSet};
use crate::{Error, Result};

/// Parameter count of the reference MNIST CNN used when comparing FedAvg's
/// per-round payload against prototype exchange.
pub const REFERENCE_MNIST_MODEL_PARAMS: usize = 21_500;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AggregationMode {
    /// Convex combination weighted by per-class sample counts.
    #[default]
    NormalizedMean,
    /// The convex combination further scaled by `1/|𝒩_j|`.
    Literal,
}

impl fmt::Display for AggregationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AggregationMode::NormalizedMean => "normalized-mean",
            AggregationMode::Literal => "literal-eq6",
        })
    }
}

impl FromStr for AggregationMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "normalized-mean" => Ok(AggregationMode::NormalizedMean),
            "literal-eq6" => Ok(AggregationMode::Literal),
            other => Err(format!(
                "unknown aggregation mode `{other}` (expected normalized-mean or literal-eq6)"
            )),
        }
    }
}

/// How uploads are fused. Uploads are always summed in ascending client id
/// order, independent of arrival order.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AggregationPolicy {
    pub mode: AggregationMode,
}

fn sorted_by_client<T>(uploads: &[(u32, T)]) -> Result<Vec<&(u32, T)>> {
    let mut sorted: Vec<&(u32, T)> = uploads.iter().collect();
    sorted.sort_by_key(|(id, _)| *id);
    if let Some(w) = sorted.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(Error::protocol(format!("client {} uploaded twice", w[0].0)));
    }
    Ok(sorted)
}

/// Fuses per-client prototype sets class by class.
///
/// For class `j` with contributors `𝒩_j` and `N_j = Σ_{i∈𝒩_j} |D_{i,j}|`, the
/// normalized mean is `Σ (|D_{i,j}|/N_j) C_i^(j)`; the literal mode multiplies
/// that by `1/|𝒩_j|`. The output count for `j` is `N_j`.
pub fn aggregate_prototypes(
    uploads: &[(u32, PrototypeSet)],
    policy: &AggregationPolicy,
) -> Result<PrototypeSet> {
    if uploads.is_empty() {
        return Err(Error::input("no uploads to aggregate"));
    }
    let sorted = sorted_by_client(uploads)?;
    let mut dim: Option<usize> = None;
    let mut by_class: BTreeMap<usize, Vec<&Prototype>> = BTreeMap::new();
    for (client, set) in &sorted {
        for (c, p) in set.iter() {
            match dim {
                None => dim = Some(p.vector.len()),
                Some(d) if d != p.vector.len() => {
                    return Err(Error::protocol(format!(
                        "client {client} class {c}: dimension {} differs from {d}",
                        p.vector.len()
                    )))
                }
                _ => {}
            }
            if p.count == 0 {
                return Err(Error::protocol(format!(
                    "client {client} class {c}: zero sample count"
                )));
            }
            by_class.entry(c).or_default().push(p);
        }
    }
    let dim = dim.unwrap_or(0);
    let mut out = PrototypeSet::new();
    for (c, contributions) in by_class {
        let total: u64 = contributions.iter().map(|p| p.count).sum();
        let mut v = vec![0.0; dim];
        for p in &contributions {
            let w = p.count as f64 / total as f64;
            v.iter_mut().zip(&p.vector).for_each(|(a, b)| *a += w * b);
        }
        if policy.mode == AggregationMode::Literal {
            let k = contributions.len() as f64;
            v.iter_mut().for_each(|a| *a /= k);
        }
        out.insert(c, v, total)?;
    }
    Ok(out)
}

/// FedAvg: parameter-wise convex combination with weights `w_i / Σ w`.
/// Every state must share one architecture and shape.
pub fn average_parameters(uploads: &[(u32, &ModelState, f64)]) -> Result<ModelState> {
    let mut sorted: Vec<&(u32, &ModelState, f64)> = uploads.iter().collect();
    sorted.sort_by_key(|(id, _, _)| *id);
    let first = sorted
        .first()
        .ok_or_else(|| Error::input("no models to average"))?
        .1;
    for (id, m, w) in &sorted {
        if m.arch != first.arch
            || m.input_dim != first.input_dim
            || m.embed_dim != first.embed_dim
            || m.class_space != first.class_space
            || !m.params.same_shape(&first.params)
        {
            return Err(Error::Heterogeneity(format!(
                "client {id} runs {} with {} parameters, client {} runs {} with {}",
                m.arch,
                m.num_params(),
                sorted[0].0,
                first.arch,
                first.num_params()
            )));
        }
        if !(*w > 0.0 && w.is_finite()) {
            return Err(Error::input(format!(
                "client {id}: weight {w} must be positive"
            )));
        }
    }
    let total: f64 = sorted.iter().map(|(_, _, w)| w).sum();
    let mut acc = vec![0.0; first.num_params()];
    for (_, m, w) in &sorted {
        let scale = w / total;
        acc.iter_mut()
            .zip(m.params.flatten())
            .for_each(|(a, p)| *a += scale * p);
    }
    let mut out = (*first).clone();
    out.params.assign_flat(&acc)?;
    Ok(out)
}

/// Contents of one message, for parameter accounting.
#[derive(Clone, Copy, Debug)]
pub enum Payload<'a> {
    Prototypes(&'a PrototypeSet),
    Model(&'a ModelState),
    /// A model known only by its parameter count.
    ModelParams(usize),
}

/// Scalar parameters carried by a message, excluding framing.
pub fn payload_params(payload: Payload<'_>) -> usize {
    match payload {
        Payload::Prototypes(set) => set.num_scalars(),
        Payload::Model(m) => m.num_params(),
        Payload::ModelParams(n) => n,
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::model::Arch;

    fn set(entries: &[(usize, &[f64], u64)]) -> PrototypeSet {
        let mut s = PrototypeSet::new();
        for (c, v, n) in entries {
            s.insert(*c, v.to_vec(), *n).unwrap();
        }
        s
    }

    const NORMALIZED: AggregationPolicy = AggregationPolicy {
        mode: AggregationMode::NormalizedMean,
    };
    const LITERAL: AggregationPolicy = AggregationPolicy {
        mode: AggregationMode::Literal,
    };

    #[test]
    fn single_client_unchanged() {
        let a = set(&[(1, &[0.5, -2.0], 4), (3, &[1.0, 1.0], 2)]);
        assert_eq!(
            aggregate_prototypes(&[(9, a.clone())], &NORMALIZED).unwrap(),
            a
        );
    }

    #[test]
    fn hand_weighted_mean() {
        let uploads = vec![
            (0, set(&[(7, &[1.0, 0.0], 10)])),
            (1, set(&[(7, &[0.0, 1.0], 30)])),
        ];
        let n = aggregate_prototypes(&uploads, &NORMALIZED).unwrap();
        assert_eq!(n.get(7).unwrap().vector, vec![0.25, 0.75]);
        assert_eq!(n.get(7).unwrap().count, 40);
        let l = aggregate_prototypes(&uploads, &LITERAL).unwrap();
        assert_eq!(l.get(7).unwrap().vector, vec![0.125, 0.375]);
    }

    #[test]
    fn disjoint_classes_pass_through() {
        let a = set(&[(2, &[1.0], 1), (3, &[2.0], 5)]);
        let b = set(&[(4, &[3.0], 2), (5, &[4.0], 7)]);
        let out = aggregate_prototypes(&[(0, a), (1, b)], &NORMALIZED).unwrap();
        assert_eq!(out.classes(), vec![2, 3, 4, 5]);
        assert_eq!(out.get(3).unwrap().vector, vec![2.0]);
        assert_eq!(out.get(5).unwrap().vector, vec![4.0]);
    }

    #[test]
    fn aggregation_errors() {
        assert!(matches!(
            aggregate_prototypes(&[], &NORMALIZED),
            Err(Error::Input(_))
        ));
        let a = set(&[(0, &[1.0, 2.0], 1)]);
        let b = set(&[(0, &[1.0], 1)]);
        assert!(matches!(
            aggregate_prototypes(&[(0, a.clone()), (1, b)], &NORMALIZED),
            Err(Error::Protocol(_))
        ));
        assert!(aggregate_prototypes(&[(0, a.clone()), (0, a)], &NORMALIZED).is_err());
    }

    #[test]
    fn permutation_invariant() {
        let uploads = vec![
            (3, set(&[(0, &[0.1, 0.7], 3)])),
            (1, set(&[(0, &[0.3, -0.2], 5)])),
            (2, set(&[(0, &[-0.9, 0.4], 11)])),
        ];
        let mut rev = uploads.clone();
        rev.reverse();
        assert_eq!(
            aggregate_prototypes(&uploads, &NORMALIZED).unwrap(),
            aggregate_prototypes(&rev, &NORMALIZED).unwrap()
        );
    }

    fn scalar_model(v: f64) -> ModelState {
        let mut m = ModelState::zeros(Arch::LinearEmbed, 1, 1, vec![0]).unwrap();
        let n = m.num_params();
        m.params.assign_flat(&vec![v; n]).unwrap();
        m
    }

    #[test]
    fn symmetric_average() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = ModelState::new(Arch::LinearEmbed, 3, 2, vec![0, 1], &mut rng).unwrap();
        let b = ModelState::new(Arch::LinearEmbed, 3, 2, vec![0, 1], &mut rng).unwrap();
        let avg = average_parameters(&[(0, &a, 5.0), (1, &b, 5.0)]).unwrap();
        for ((m, x), y) in avg
            .params
            .flatten()
            .iter()
            .zip(a.params.flatten())
            .zip(b.params.flatten())
        {
            assert!((m - (x + y) / 2.0).abs() < 1e-15);
        }
    }

    #[test]
    fn weighted_average() {
        let a = scalar_model(0.0);
        let b = scalar_model(4.0);
        let avg = average_parameters(&[(0, &a, 1.0), (1, &b, 3.0)]).unwrap();
        assert!(avg.params.flatten().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn heterogeneous_models_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = ModelState::new(Arch::LinearEmbed, 3, 2, vec![0, 1], &mut rng).unwrap();
        let b = ModelState::new(Arch::Mlp1Embed { hidden: 4 }, 3, 2, vec![0, 1], &mut rng).unwrap();
        let err = average_parameters(&[(0, &a, 1.0), (1, &b, 1.0)]).unwrap_err();
        assert!(matches!(err, Error::Heterogeneity(_)));
        assert!(err
            .to_string()
            .contains("model heterogeneity unsupported by FedAvg"));
    }

    #[test]
    fn payload_counts() {
        let mut four = PrototypeSet::new();
        for c in 0..4 {
            four.insert(c, vec![0.0; 50], 100).unwrap();
        }
        let per_round: usize = (0..20)
            .map(|_| payload_params(Payload::Prototypes(&four)))
            .sum();
        assert_eq!(per_round, 4_000);
        let models: usize = (0..20)
            .map(|_| payload_params(Payload::ModelParams(REFERENCE_MNIST_MODEL_PARAMS)))
            .sum();
        assert_eq!(models, 430_000);
        assert_eq!(payload_params(Payload::Prototypes(&PrototypeSet::new())), 0);
        let m = scalar_model(1.0);
        assert_eq!(payload_params(Payload::Model(&m)), 4);
    }
}
