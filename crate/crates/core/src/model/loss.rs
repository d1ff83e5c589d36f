use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::prototype::{canonical, Prototype};
use super::{Gradient, ModelState, PrototypeSet};
use crate::data::Sample;
use crate::{Error, Result};

/// Distance between a local and a global prototype.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Metric {
    #[serde(rename = "l2")]
    L2,
    #[default]
    #[serde(rename = "sq-l2")]
    SqL2,
    #[serde(rename = "l1")]
    L1,
}

impl Metric {
    pub fn distance(self, a: &[f64], b: &[f64]) -> f64 {
        let diffs = a.iter().zip(b).map(|(x, y)| x - y);
        match self {
            Metric::SqL2 => diffs.map(|d| d * d).sum(),
            Metric::L2 => diffs.map(|d| d * d).sum::<f64>().sqrt(),
            Metric::L1 => diffs.map(f64::abs).sum(),
        }
    }

    /// ∂d(a, b)/∂a. `l2` and `l1` use subgradient 0 where they are not
    /// differentiable.
    pub fn grad_wrt_first(self, a: &[f64], b: &[f64]) -> Vec<f64> {
        let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
        match self {
            Metric::SqL2 => diffs.iter().map(|d| 2.0 * d).collect(),
            Metric::L2 => {
                let norm = diffs.iter().map(|d| d * d).sum::<f64>().sqrt();
                if norm == 0.0 {
                    vec![0.0; diffs.len()]
                } else {
                    diffs.iter().map(|d| d / norm).collect()
                }
            }
            Metric::L1 => diffs
                .iter()
                .map(|&d| {
                    if d > 0.0 {
                        1.0
                    } else if d < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                })
                .collect(),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::L2 => "l2",
            Metric::SqL2 => "sq-l2",
            Metric::L1 => "l1",
        })
    }
}

impl FromStr for Metric {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "l2" => Ok(Metric::L2),
            "sq-l2" => Ok(Metric::SqL2),
            "l1" => Ok(Metric::L1),
            other => Err(format!(
                "unknown metric `{other}` (expected l2, sq-l2 or l1)"
            )),
        }
    }
}

/// What the regularizer compares against the global prototypes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegOperand {
    /// Σ_j d(mean embedding of class j in the batch, global prototype j).
    #[default]
    ClassMean,
    /// Batch mean of d(embedding of x, global prototype of x's class).
    PerSample,
}

impl fmt::Display for RegOperand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RegOperand::ClassMean => "class-mean",
            RegOperand::PerSample => "per-sample",
        })
    }
}

impl FromStr for RegOperand {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "class-mean" => Ok(RegOperand::ClassMean),
            "per-sample" => Ok(RegOperand::PerSample),
            other => Err(format!(
                "unknown reg_operand `{other}` (expected class-mean or per-sample)"
            )),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda: f64,
    pub metric: Metric,
    pub operand: RegOperand,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 1.0,
            metric: Metric::SqL2,
            operand: RegOperand::ClassMean,
        }
    }
}

/// `total = supervised + λ · regularizer`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub supervised: f64,
    pub regularizer: f64,
}

impl LossBreakdown {
    fn new(supervised: f64, regularizer: f64, lambda: f64) -> Self {
        LossBreakdown {
            total: supervised + lambda * regularizer,
            supervised,
            regularizer,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite() && self.supervised.is_finite() && self.regularizer.is_finite()
    }
}

fn label_index(state: &ModelState, s: &Sample) -> Result<usize> {
    state.class_index(s.label).ok_or_else(|| {
        Error::input(format!(
            "sample {} has label {} outside the class space {:?}",
            s.id, s.label, state.class_space
        ))
    })
}

/// `log Σ exp(z)` and the softmax probabilities.
fn softmax(logits: &[f64]) -> (f64, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    (max + sum.ln(), exps.into_iter().map(|e| e / sum).collect())
}

/// Mean softmax cross-entropy of the decision head over `batch`.
pub fn supervised_loss(state: &ModelState, batch: &[&Sample]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::input("empty batch"));
    }
    let mut total = 0.0;
    for s in canonical(batch) {
        let k = label_index(state, s)?;
        let logits = state.logits(&s.features)?;
        let (lse, _) = softmax(&logits);
        total += lse - logits[k];
    }
    Ok(total / batch.len() as f64)
}

/// Σ over classes of `local` of `metric(local_j, global_j)`.
pub fn regularizer(local: &PrototypeSet, global: &PrototypeSet, metric: Metric) -> Result<f64> {
    let mut total = 0.0;
    for (c, p) in local.iter() {
        let g = global.get(c).ok_or_else(|| {
            Error::protocol(format!(
                "class {c} has a local prototype but no global prototype was downloaded"
            ))
        })?;
        if g.vector.len() != p.vector.len() {
            return Err(Error::protocol(format!(
                "class {c}: global prototype dimension {} differs from local {}",
                g.vector.len(),
                p.vector.len()
            )));
        }
        total += metric.distance(&p.vector, &g.vector);
    }
    Ok(total)
}

fn global_vector<'a>(global: &'a PrototypeSet, class: usize, dim: usize) -> Result<&'a [f64]> {
    let g = global
        .get(class)
        .ok_or_else(|| Error::protocol(format!("no global prototype for class {class}")))?;
    if g.vector.len() != dim {
        return Err(Error::protocol(format!(
            "class {class}: global prototype dimension {} differs from embed_dim {dim}",
            g.vector.len()
        )));
    }
    Ok(&g.vector)
}

#[cfg(test)]
fn regularizer_value(
    state: &ModelState,
    batch: &[&Sample],
    global: &PrototypeSet,
    cfg: &LossConfig,
) -> Result<f64> {
    match cfg.operand {
        RegOperand::ClassMean => {
            let local = super::compute_local_prototypes(state, batch)?;
            regularizer(&local, global, cfg.metric)
        }
        RegOperand::PerSample => {
            let mut total = 0.0;
            for s in canonical(batch) {
                let e = state.embed(&s.features)?;
                let g = global_vector(global, s.label, state.embed_dim)?;
                total += cfg.metric.distance(&e, g);
            }
            Ok(total / batch.len() as f64)
        }
    }
}

/// Supervised loss plus `λ` times the prototype regularizer. With no global
/// prototypes the regularizer is 0.
pub fn local_loss_breakdown(
    state: &ModelState,
    batch: &[&Sample],
    global: Option<&PrototypeSet>,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    loss_and_prototypes(state, batch, global, cfg).map(|(l, _)| l)
}

/// [`local_loss_breakdown`] and [`compute_local_prototypes`] from one forward
/// pass over `batch`.
pub fn loss_and_prototypes(
    state: &ModelState,
    batch: &[&Sample],
    global: Option<&PrototypeSet>,
    cfg: &LossConfig,
) -> Result<(LossBreakdown, PrototypeSet)> {
    if batch.is_empty() {
        return Err(Error::input("empty batch"));
    }
    let n = batch.len() as f64;
    let mut supervised = 0.0;
    let mut per_sample = 0.0;
    let mut sums: BTreeMap<usize, (Vec<f64>, u64)> = BTreeMap::new();
    for s in canonical(batch) {
        let k = label_index(state, s)?;
        state.check_input(&s.features)?;
        let trace = state.trace(&s.features);
        let (lse, _) = softmax(&trace.logits);
        supervised += lse - trace.logits[k];
        if let (Some(g), RegOperand::PerSample) = (global, cfg.operand) {
            let g = global_vector(g, s.label, state.embed_dim)?;
            per_sample += cfg.metric.distance(&trace.embedding, g);
        }
        let (sum, count) = sums
            .entry(s.label)
            .or_insert_with(|| (vec![0.0; state.embed_dim], 0));
        sum.iter_mut()
            .zip(&trace.embedding)
            .for_each(|(a, b)| *a += b);
        *count += 1;
    }
    let protos: PrototypeSet = sums
        .into_iter()
        .map(|(c, (sum, count))| {
            let vector = sum.into_iter().map(|v| v / count as f64).collect();
            (c, Prototype { vector, count })
        })
        .collect();
    let reg = match (global, cfg.operand) {
        (None, _) => 0.0,
        (Some(g), RegOperand::ClassMean) => regularizer(&protos, g, cfg.metric)?,
        (Some(_), RegOperand::PerSample) => per_sample / n,
    };
    Ok((LossBreakdown::new(supervised / n, reg, cfg.lambda), protos))
}

/// Reference evaluation of the regularizer through the public building
/// blocks; kept for cross-checking [`loss_and_prototypes`].
#[cfg(test)]
fn local_loss_reference(
    state: &ModelState,
    batch: &[&Sample],
    global: Option<&PrototypeSet>,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    let supervised = supervised_loss(state, batch)?;
    let reg = match global {
        Some(g) => regularizer_value(state, batch, g, cfg)?,
        None => 0.0,
    };
    Ok(LossBreakdown::new(supervised, reg, cfg.lambda))
}

pub fn local_loss(
    state: &ModelState,
    batch: &[&Sample],
    global: Option<&PrototypeSet>,
    cfg: &LossConfig,
) -> Result<f64> {
    local_loss_breakdown(state, batch, global, cfg).map(|l| l.total)
}

pub fn local_loss_gradient(
    state: &ModelState,
    batch: &[&Sample],
    global: Option<&PrototypeSet>,
    cfg: &LossConfig,
) -> Result<Gradient> {
    loss_and_gradient(state, batch, global, cfg).map(|(_, g)| g)
}

/// Loss and its exact gradient from a single forward pass.
///
/// The decision head only sees the cross-entropy term. The embedding sees
/// both: the class-mean operand spreads `∂d/∂C_j` evenly over the `n_j`
/// members of class `j`, the per-sample operand routes `∂d/∂f(x)/B` to each
/// sample.
pub fn loss_and_gradient(
    state: &ModelState,
    batch: &[&Sample],
    global: Option<&PrototypeSet>,
    cfg: &LossConfig,
) -> Result<(LossBreakdown, Gradient)> {
    if batch.is_empty() {
        return Err(Error::input("empty batch"));
    }
    let samples = canonical(batch);
    let n = samples.len() as f64;
    let mut indices = Vec::with_capacity(samples.len());
    let mut traces = Vec::with_capacity(samples.len());
    for s in &samples {
        indices.push(label_index(state, s)?);
        if s.features.len() != state.input_dim {
            return Err(Error::input(format!(
                "sample {} has {} features, model expects {}",
                s.id,
                s.features.len(),
                state.input_dim
            )));
        }
        traces.push(state.trace(&s.features));
    }

    let mut grad = state.params.zeros_like();
    let mut supervised = 0.0;
    let mut d_embed = Vec::with_capacity(samples.len());
    for (trace, &k) in traces.iter().zip(&indices) {
        let (lse, mut probs) = softmax(&trace.logits);
        supervised += lse - trace.logits[k];
        probs[k] -= 1.0;
        probs.iter_mut().for_each(|p| *p /= n);
        d_embed.push(state.backprop_decision(trace, &probs, &mut grad));
    }
    supervised /= n;

    let mut reg = 0.0;
    if let Some(global) = global {
        let dim = state.embed_dim;
        match cfg.operand {
            RegOperand::ClassMean => {
                let mut members: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
                for (i, s) in samples.iter().enumerate() {
                    members.entry(s.label).or_default().push(i);
                }
                for (class, idx) in members {
                    let mut mean = vec![0.0; dim];
                    for &i in &idx {
                        mean.iter_mut()
                            .zip(&traces[i].embedding)
                            .for_each(|(m, e)| *m += e);
                    }
                    let count = idx.len() as f64;
                    mean.iter_mut().for_each(|m| *m /= count);
                    let g = global_vector(global, class, dim)?;
                    reg += cfg.metric.distance(&mean, g);
                    if cfg.lambda != 0.0 {
                        let dc = cfg.metric.grad_wrt_first(&mean, g);
                        for &i in &idx {
                            d_embed[i]
                                .iter_mut()
                                .zip(&dc)
                                .for_each(|(d, v)| *d += cfg.lambda * v / count);
                        }
                    }
                }
            }
            RegOperand::PerSample => {
                for (i, s) in samples.iter().enumerate() {
                    let g = global_vector(global, s.label, dim)?;
                    let e = &traces[i].embedding;
                    reg += cfg.metric.distance(e, g);
                    if cfg.lambda != 0.0 {
                        let de = cfg.metric.grad_wrt_first(e, g);
                        d_embed[i]
                            .iter_mut()
                            .zip(&de)
                            .for_each(|(d, v)| *d += cfg.lambda * v / n);
                    }
                }
                reg /= n;
            }
        }
    }

    for ((s, trace), d) in samples.iter().zip(&traces).zip(&d_embed) {
        state.backprop_embedding(&s.features, trace, d, &mut grad);
    }
    if let Some(location) = grad.first_non_finite() {
        return Err(Error::Numeric { location });
    }
    let loss = LossBreakdown::new(supervised, reg, cfg.lambda);
    if !loss.is_finite() {
        return Err(Error::Numeric {
            location: "loss".into(),
        });
    }
    let l2_norm = grad.l2_norm();
    Ok((
        loss,
        Gradient {
            params: grad,
            l2_norm,
        },
    ))
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::model::compute_local_prototypes;
    use crate::model::Arch;

    fn sample(id: usize, features: Vec<f64>, label: usize) -> Sample {
        Sample {
            id,
            features,
            label,
        }
    }

    fn random_batch(rng: &mut ChaCha8Rng, n: usize, dim: usize, classes: &[usize]) -> Vec<Sample> {
        (0..n)
            .map(|i| {
                let x = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
                sample(i, x, classes[i % classes.len()])
            })
            .collect()
    }

    fn set(entries: &[(usize, &[f64])]) -> PrototypeSet {
        let mut s = PrototypeSet::new();
        for (c, v) in entries {
            s.insert(*c, v.to_vec(), 1).unwrap();
        }
        s
    }

    #[test]
    fn uniform_softmax_gives_ln_classes() {
        let m = ModelState::zeros(Arch::LinearEmbed, 3, 2, vec![0, 1, 2, 3]).unwrap();
        let a = sample(0, vec![1.0, 2.0, 3.0], 2);
        let loss = supervised_loss(&m, &[&a]).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
        assert!((loss - 1.3863).abs() < 1e-4);
    }

    #[test]
    fn saturated_logits_give_near_zero_loss() {
        let mut m = ModelState::zeros(Arch::LinearEmbed, 1, 1, vec![0, 1]).unwrap();
        m.params.decision.bias = vec![0.0, 50.0];
        let a = sample(0, vec![0.0], 1);
        assert!(supervised_loss(&m, &[&a]).unwrap() < 1e-6);
    }

    #[test]
    fn label_outside_class_space() {
        let m = ModelState::zeros(Arch::LinearEmbed, 1, 1, vec![0, 1]).unwrap();
        let a = sample(0, vec![0.0], 5);
        assert!(matches!(supervised_loss(&m, &[&a]), Err(Error::Input(_))));
    }

    #[test]
    fn supervised_loss_matches_scalar_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let classes = [1, 3, 4];
        let m = ModelState::new(
            Arch::Mlp1Embed { hidden: 5 },
            3,
            4,
            classes.to_vec(),
            &mut rng,
        )
        .unwrap();
        let batch = random_batch(&mut rng, 8, 3, &classes);
        let refs: Vec<&Sample> = batch.iter().collect();
        let mut want = 0.0;
        for s in &batch {
            let z = m.logits(&s.features).unwrap();
            let denom: f64 = z.iter().map(|v| v.exp()).sum();
            let k = classes.iter().position(|&c| c == s.label).unwrap();
            want += -(z[k].exp() / denom).ln();
        }
        want /= 8.0;
        assert!((supervised_loss(&m, &refs).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn regularizer_hand_values() {
        let local = set(&[(4, &[0.0, 0.0])]);
        let global = set(&[(4, &[3.0, 4.0]), (9, &[1.0, 1.0])]);
        assert_eq!(regularizer(&local, &global, Metric::L2).unwrap(), 5.0);
        assert_eq!(regularizer(&local, &global, Metric::SqL2).unwrap(), 25.0);
        assert_eq!(regularizer(&local, &global, Metric::L1).unwrap(), 7.0);
        for metric in [Metric::L2, Metric::SqL2, Metric::L1] {
            assert_eq!(regularizer(&global, &global, metric).unwrap(), 0.0);
        }
    }

    #[test]
    fn regularizer_requires_download_first() {
        let local = set(&[(1, &[0.0])]);
        let global = set(&[(2, &[0.0])]);
        assert!(matches!(
            regularizer(&local, &global, Metric::SqL2),
            Err(Error::Protocol(_))
        ));
    }

    #[test]
    fn lambda_zero_is_supervised_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = ModelState::new(Arch::LinearEmbed, 3, 2, vec![0, 1], &mut rng).unwrap();
        let batch = random_batch(&mut rng, 6, 3, &[0, 1]);
        let refs: Vec<&Sample> = batch.iter().collect();
        let global = set(&[(0, &[5.0, 5.0]), (1, &[-5.0, 2.0])]);
        let cfg = LossConfig {
            lambda: 0.0,
            ..Default::default()
        };
        assert_eq!(
            local_loss(&m, &refs, Some(&global), &cfg).unwrap(),
            supervised_loss(&m, &refs).unwrap()
        );
    }

    #[test]
    fn coincident_global_adds_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let m = ModelState::new(Arch::Mlp1Embed { hidden: 4 }, 3, 2, vec![0, 1], &mut rng).unwrap();
        let batch = random_batch(&mut rng, 6, 3, &[0, 1]);
        let refs: Vec<&Sample> = batch.iter().collect();
        let global = compute_local_prototypes(&m, &refs).unwrap();
        for lambda in [0.5, 1.0, 7.0] {
            let cfg = LossConfig {
                lambda,
                ..Default::default()
            };
            assert_eq!(
                local_loss(&m, &refs, Some(&global), &cfg).unwrap(),
                supervised_loss(&m, &refs).unwrap()
            );
        }
    }

    #[test]
    fn components_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let m =
            ModelState::new(Arch::Mlp1Embed { hidden: 6 }, 4, 3, vec![0, 1, 2], &mut rng).unwrap();
        let batch = random_batch(&mut rng, 8, 4, &[0, 1, 2]);
        let refs: Vec<&Sample> = batch.iter().collect();
        let global = set(&[
            (0, &[0.1, 0.2, 0.3]),
            (1, &[-1.0, 0.0, 1.0]),
            (2, &[0.0, 0.5, 0.0]),
        ]);
        let cfg = LossConfig::default();
        let ls = supervised_loss(&m, &refs).unwrap();
        let lr = regularizer(
            &compute_local_prototypes(&m, &refs).unwrap(),
            &global,
            Metric::SqL2,
        )
        .unwrap();
        let total = local_loss(&m, &refs, Some(&global), &cfg).unwrap();
        assert!((total - (ls + lr)).abs() < 1e-12);
    }

    #[test]
    fn single_pass_matches_separate_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let m =
            ModelState::new(Arch::Mlp1Embed { hidden: 5 }, 4, 3, vec![0, 1, 2], &mut rng).unwrap();
        let batch = random_batch(&mut rng, 9, 4, &[0, 1, 2]);
        let refs: Vec<&Sample> = batch.iter().collect();
        let global = set(&[
            (0, &[0.1, 0.2, 0.3]),
            (1, &[-1.0, 0.0, 1.0]),
            (2, &[0.0, 0.5, 0.0]),
        ]);
        for metric in [Metric::SqL2, Metric::L2, Metric::L1] {
            for operand in [RegOperand::ClassMean, RegOperand::PerSample] {
                let cfg = LossConfig {
                    lambda: 0.7,
                    metric,
                    operand,
                };
                for g in [None, Some(&global)] {
                    let (loss, protos) = loss_and_prototypes(&m, &refs, g, &cfg).unwrap();
                    let want = local_loss_reference(&m, &refs, g, &cfg).unwrap();
                    assert!((loss.total - want.total).abs() < 1e-12);
                    assert!((loss.regularizer - want.regularizer).abs() < 1e-12);
                    assert_eq!(protos, compute_local_prototypes(&m, &refs).unwrap());
                }
            }
        }
    }

    /// Two classes, two features, identity embedding and identity decision
    /// head: ∂L/∂W_d = (softmax(z) − onehot) xᵀ, ∂L/∂b_d = softmax(z) − onehot.
    #[test]
    fn hand_softmax_gradient() {
        let mut m = ModelState::zeros(Arch::LinearEmbed, 2, 2, vec![0, 1]).unwrap();
        m.params.embedding[0].weight = vec![1.0, 0.0, 0.0, 1.0];
        m.params.decision.weight = vec![1.0, 0.0, 0.0, 1.0];
        let a = sample(0, vec![1.0, 0.0], 0);
        let cfg = LossConfig {
            lambda: 0.0,
            ..Default::default()
        };
        let g = local_loss_gradient(&m, &[&a], None, &cfg).unwrap();
        let e = std::f64::consts::E;
        let p0 = e / (e + 1.0);
        let p1 = 1.0 / (e + 1.0);
        let d = [p0 - 1.0, p1];
        let want_w = [d[0] * 1.0, d[0] * 0.0, d[1] * 1.0, d[1] * 0.0];
        for (got, want) in g.params.decision.weight.iter().zip(want_w) {
            assert!((got - want).abs() < 1e-15);
        }
        for (got, want) in g.params.decision.bias.iter().zip(d) {
            assert!((got - want).abs() < 1e-15);
        }
        // Embedding gradient is W_dᵀ d xᵀ with W_d = I.
        let want_e = [d[0], 0.0, d[1], 0.0];
        for (got, want) in g.params.embedding[0].weight.iter().zip(want_e) {
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn gradient_norm_matches_flat_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m = ModelState::new(Arch::Mlp1Embed { hidden: 5 }, 3, 3, vec![0, 1], &mut rng).unwrap();
        let batch = random_batch(&mut rng, 5, 3, &[0, 1]);
        let refs: Vec<&Sample> = batch.iter().collect();
        let global = set(&[(0, &[1.0, 1.0, 1.0]), (1, &[0.0, 0.0, 0.0])]);
        let g = local_loss_gradient(&m, &refs, Some(&global), &LossConfig::default()).unwrap();
        let flat: f64 = g.flatten().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((g.l2_norm - flat).abs() <= 1e-9 * flat);
    }

    #[test]
    fn non_finite_gradient_reports_location() {
        let mut m = ModelState::zeros(Arch::LinearEmbed, 1, 1, vec![0, 1]).unwrap();
        m.params.embedding[0].weight = vec![f64::NAN];
        let a = sample(0, vec![1.0], 0);
        let err = local_loss_gradient(&m, &[&a], None, &LossConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Numeric { .. }), "{err}");
    }

    #[test]
    fn subgradient_zero_at_kink() {
        let a = [1.0, 2.0];
        assert_eq!(Metric::L2.grad_wrt_first(&a, &a), vec![0.0, 0.0]);
        assert_eq!(Metric::L1.grad_wrt_first(&a, &a), vec![0.0, 0.0]);
    }
}
