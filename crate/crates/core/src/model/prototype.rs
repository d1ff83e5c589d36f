use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::ModelState;
use crate::data::Sample;
use crate::{Error, Result};

/// Mean embedding of one class together with the number of samples behind it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prototype {
    pub vector: Vec<f64>,
    pub count: u64,
}

/// Class id → prototype. Classes without samples are absent rather than
/// stored as zero vectors.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PrototypeSet {
    entries: BTreeMap<usize, Prototype>,
}

impl PrototypeSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Class-space announcement: every class present with count 0 and an empty
    /// vector. Only meaningful as a registration body on the wire.
    pub fn stubs(classes: &[usize]) -> Self {
        let entries = classes
            .iter()
            .map(|&c| {
                (
                    c,
                    Prototype {
                        vector: Vec::new(),
                        count: 0,
                    },
                )
            })
            .collect();
        PrototypeSet { entries }
    }

    pub fn insert(&mut self, class: usize, vector: Vec<f64>, count: u64) -> Result<()> {
        if count == 0 {
            return Err(Error::input(format!(
                "class {class}: prototype count must be ≥ 1"
            )));
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::input(format!("class {class}: non-finite prototype")));
        }
        if let Some(dim) = self.dim() {
            if dim != vector.len() {
                return Err(Error::protocol(format!(
                    "class {class}: prototype dimension {} differs from {dim}",
                    vector.len()
                )));
            }
        }
        self.entries.insert(class, Prototype { vector, count });
        Ok(())
    }

    /// Inserts without validation; the wire decoder enforces its own checks.
    pub(crate) fn insert_raw(&mut self, class: usize, vector: Vec<f64>, count: u64) {
        self.entries.insert(class, Prototype { vector, count });
    }

    pub fn get(&self, class: usize) -> Option<&Prototype> {
        self.entries.get(&class)
    }

    pub fn contains(&self, class: usize) -> bool {
        self.entries.contains_key(&class)
    }

    /// Entries in ascending class order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, &Prototype)> {
        self.entries.iter().map(|(&c, p)| (c, p))
    }

    pub fn classes(&self) -> Vec<usize> {
        self.entries.keys().copied().collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Shared vector length, or `None` for an empty set.
    pub fn dim(&self) -> Option<usize> {
        self.entries.values().next().map(|p| p.vector.len())
    }

    /// Subset containing only the listed classes that are present.
    pub fn restrict(&self, classes: &[usize]) -> PrototypeSet {
        let entries = classes
            .iter()
            .filter_map(|c| self.entries.get(c).map(|p| (*c, p.clone())))
            .collect();
        PrototypeSet { entries }
    }

    /// Overwrites (or adds) every class present in `other`.
    pub fn merge_from(&mut self, other: &PrototypeSet) {
        for (c, p) in other.iter() {
            self.entries.insert(c, p.clone());
        }
    }

    /// Scalar parameters carried: Σ over classes of the vector length.
    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|p| p.vector.len()).sum()
    }
}

impl FromIterator<(usize, Prototype)> for PrototypeSet {
    fn from_iter<I: IntoIterator<Item = (usize, Prototype)>>(iter: I) -> Self {
        PrototypeSet {
            entries: iter.into_iter().collect(),
        }
    }
}

/// Sorted copy of a batch so every reduction runs in sample-id order.
pub(crate) fn canonical<'a>(batch: &[&'a Sample]) -> Vec<&'a Sample> {
    let mut sorted = batch.to_vec();
    sorted.sort_by_key(|s| s.id);
    sorted
}

/// Per-class mean embeddings over `batch`.
pub fn compute_local_prototypes(state: &ModelState, batch: &[&Sample]) -> Result<PrototypeSet> {
    if batch.is_empty() {
        return Err(Error::input("cannot compute prototypes of an empty batch"));
    }
    let mut sums: BTreeMap<usize, (Vec<f64>, u64)> = BTreeMap::new();
    for s in canonical(batch) {
        let e = state.embed(&s.features)?;
        let (sum, n) = sums
            .entry(s.label)
            .or_insert_with(|| (vec![0.0; state.embed_dim], 0));
        sum.iter_mut().zip(&e).for_each(|(a, b)| *a += b);
        *n += 1;
    }
    Ok(sums
        .into_iter()
        .map(|(c, (sum, n))| {
            let vector = sum.into_iter().map(|v| v / n as f64).collect();
            (c, Prototype { vector, count: n })
        })
        .collect())
}

fn nearest(e: &[f64], protos: &PrototypeSet) -> Result<usize> {
    if protos.is_empty() {
        return Err(Error::input("no prototypes to classify against"));
    }
    let mut best: Option<(usize, f64)> = None;
    for (c, p) in protos.iter() {
        if p.vector.len() != e.len() {
            return Err(Error::protocol(format!(
                "prototype for class {c} has dimension {}, embedding has {}",
                p.vector.len(),
                e.len()
            )));
        }
        let d: f64 = p.vector.iter().zip(e).map(|(a, b)| (a - b) * (a - b)).sum();
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some((c, d));
        }
    }
    Ok(best.map(|(c, _)| c).expect("non-empty"))
}

fn argmax_class(state: &ModelState, logits: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = k;
        }
    }
    state.class_space[best]
}

/// Nearest prototype by Euclidean distance; ties go to the smallest class id.
pub fn predict_by_prototype(state: &ModelState, x: &[f64], protos: &PrototypeSet) -> Result<usize> {
    nearest(&state.embed(x)?, protos)
}

/// Argmax of the decision head; ties go to the smallest class id.
pub fn predict_by_decision(state: &ModelState, x: &[f64]) -> Result<usize> {
    Ok(argmax_class(state, &state.logits(x)?))
}

/// `(predict_by_prototype, predict_by_decision)` from one forward pass.
pub fn predict_both(
    state: &ModelState,
    x: &[f64],
    protos: &PrototypeSet,
) -> Result<(usize, usize)> {
    state.check_input(x)?;
    let t = state.trace(x);
    Ok((
        nearest(&t.embedding, protos)?,
        argmax_class(state, &t.logits),
    ))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::model::Arch;

    fn identity(dim: usize, classes: Vec<usize>) -> ModelState {
        let mut m = ModelState::zeros(Arch::LinearEmbed, dim, dim, classes).unwrap();
        for i in 0..dim {
            m.params.embedding[0].weight[i * dim + i] = 1.0;
        }
        m
    }

    fn sample(id: usize, features: Vec<f64>, label: usize) -> Sample {
        Sample {
            id,
            features,
            label,
        }
    }

    fn set(entries: &[(usize, &[f64], u64)]) -> PrototypeSet {
        let mut s = PrototypeSet::new();
        for (c, v, n) in entries {
            s.insert(*c, v.to_vec(), *n).unwrap();
        }
        s
    }

    #[test]
    fn singleton_mean() {
        let m = identity(2, vec![4]);
        let s = sample(0, vec![0.5, -1.5], 4);
        let p = compute_local_prototypes(&m, &[&s]).unwrap();
        assert_eq!(p.get(4).unwrap().vector, m.embed(&s.features).unwrap());
        assert_eq!(p.get(4).unwrap().count, 1);
    }

    #[test]
    fn hand_mean() {
        let m = identity(2, vec![1]);
        let a = sample(0, vec![0.0, 2.0], 1);
        let b = sample(1, vec![2.0, 0.0], 1);
        let p = compute_local_prototypes(&m, &[&a, &b]).unwrap();
        assert_eq!(p.get(1).unwrap().vector, vec![1.0, 1.0]);
        assert_eq!(p.get(1).unwrap().count, 2);
    }

    #[test]
    fn support_preserved() {
        let m = identity(2, vec![2, 3]);
        let batch = [
            sample(0, vec![1.0, 0.0], 3),
            sample(1, vec![0.0, 1.0], 2),
            sample(2, vec![1.0, 1.0], 3),
        ];
        let refs: Vec<&Sample> = batch.iter().collect();
        let p = compute_local_prototypes(&m, &refs).unwrap();
        assert_eq!(p.classes(), vec![2, 3]);
    }

    #[test]
    fn empty_batch_rejected() {
        let m = identity(2, vec![0]);
        assert!(compute_local_prototypes(&m, &[]).is_err());
    }

    #[test]
    fn nearest_prototype() {
        let m = identity(2, vec![0, 1]);
        let protos = set(&[(0, &[0.0, 0.0], 1), (1, &[10.0, 10.0], 1)]);
        assert_eq!(predict_by_prototype(&m, &[1.0, 1.0], &protos).unwrap(), 0);
    }

    #[test]
    fn exact_prototype_hit() {
        let m = identity(2, vec![5]);
        let protos = set(&[(2, &[0.0, 9.0], 1), (5, &[3.0, -1.0], 1)]);
        assert_eq!(predict_by_prototype(&m, &[3.0, -1.0], &protos).unwrap(), 5);
    }

    #[test]
    fn prototype_tie_goes_to_smallest_id() {
        let m = identity(2, vec![3, 7]);
        let protos = set(&[(7, &[1.0, 0.0], 1), (3, &[-1.0, 0.0], 1)]);
        assert_eq!(predict_by_prototype(&m, &[0.0, 0.0], &protos).unwrap(), 3);
    }

    #[test]
    fn empty_prototypes_rejected() {
        let m = identity(2, vec![0]);
        assert!(matches!(
            predict_by_prototype(&m, &[0.0, 0.0], &PrototypeSet::new()),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn decision_argmax() {
        let mut m = ModelState::zeros(Arch::LinearEmbed, 1, 1, vec![4, 9]).unwrap();
        m.params.decision.bias = vec![0.1, 0.9];
        assert_eq!(predict_by_decision(&m, &[0.0]).unwrap(), 9);
    }

    #[test]
    fn decision_tie_goes_to_smallest_id() {
        let m = ModelState::zeros(Arch::LinearEmbed, 1, 1, vec![1, 2, 3]).unwrap();
        assert_eq!(predict_by_decision(&m, &[5.0]).unwrap(), 1);
    }

    #[test]
    fn decision_matches_recomputed_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let m = ModelState::new(
            Arch::Mlp1Embed { hidden: 6 },
            4,
            3,
            vec![0, 2, 5, 6],
            &mut rng,
        )
        .unwrap();
        for k in 0..20 {
            let x: Vec<f64> = (0..4)
                .map(|i| ((k * 7 + i * 3) % 11) as f64 / 5.0 - 1.0)
                .collect();
            // recompute scores from the embedding with explicit loops
            let e = m.embed(&x).unwrap();
            let d = &m.params.decision;
            let mut best = (0usize, f64::NEG_INFINITY);
            for r in 0..d.outputs {
                let mut s = d.bias[r];
                for c in 0..d.inputs {
                    s += d.weight[r * d.inputs + c] * e[c];
                }
                if s > best.1 {
                    best = (r, s);
                }
            }
            assert_eq!(predict_by_decision(&m, &x).unwrap(), m.class_space[best.0]);
        }
    }

    #[test]
    fn insert_rejects_dim_mismatch() {
        let mut s = set(&[(0, &[1.0, 2.0], 1)]);
        assert!(matches!(s.insert(1, vec![1.0], 1), Err(Error::Protocol(_))));
        assert!(s.insert(1, vec![f64::NAN, 0.0], 1).is_err());
        assert!(s.insert(1, vec![0.0, 0.0], 0).is_err());
    }

    #[test]
    fn restrict_keeps_listed_present_classes() {
        let s = set(&[(0, &[1.0], 1), (3, &[2.0], 2), (5, &[3.0], 3)]);
        assert_eq!(s.restrict(&[3, 4, 5]).classes(), vec![3, 5]);
    }
}
