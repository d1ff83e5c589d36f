//! Empirical surrogates for the smoothness, Lipschitz, gradient-bound and
//! variance constants, measured on the region a run actually visits.

use rand::Rng;
use rand_distr::StandardNormal;

use super::TheoryConstants;
use crate::data::Sample;
use crate::model::{
    compute_local_prototypes, loss_and_gradient, LossConfig, ModelState, PrototypeSet,
};
use crate::rng::{stream_rng, streams};
use crate::{Error, Result};

const MAX_RESAMPLES: usize = 100;

/// Gradient safety factor applied to the largest observed norm.
pub const G_SAFETY: f64 = 1.5;

/// A differentiable objective over a flat parameter vector whose first
/// `embedding_len()` entries parameterise the embedding.
pub trait Objective: Sync {
    fn gradient(&self, w: &[f64]) -> Result<Vec<f64>>;

    /// Gradients of the mini-batches one epoch visits; a single entry equal to
    /// [`Objective::gradient`] for full-batch training.
    fn minibatch_gradients(&self, w: &[f64]) -> Result<Vec<Vec<f64>>>;

    fn embedding_len(&self) -> usize;

    /// The class-mean embeddings, concatenated.
    fn mean_embedding(&self, w: &[f64]) -> Result<Vec<f64>>;
}

/// Centre of a probe ball and its radius.
#[derive(Clone, Debug, PartialEq)]
pub struct Probe {
    pub center: Vec<f64>,
    pub radius: f64,
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

fn norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn in_ball<R: Rng + ?Sized>(rng: &mut R, center: &[f64], radius: f64) -> Vec<f64> {
    let dir: Vec<f64> = (0..center.len())
        .map(|_| rng.sample(StandardNormal))
        .collect();
    let n = norm(&dir);
    let r = radius * rng.random_range(0.0..=1.0f64);
    center
        .iter()
        .zip(&dir)
        .map(|(c, d)| if n > 0.0 { c + r * d / n } else { *c })
        .collect()
}

#[derive(Default)]
struct Acc {
    l1: f64,
    l2: f64,
    g: f64,
    sigma2: f64,
}

impl Acc {
    fn point(&mut self, obj: &dyn Objective, w: &[f64]) -> Result<Vec<f64>> {
        let g = obj.gradient(w)?;
        self.g = self.g.max(norm(&g));
        let batches = obj.minibatch_gradients(w)?;
        if !batches.is_empty() {
            let var =
                batches.iter().map(|b| dist(b, &g).powi(2)).sum::<f64>() / batches.len() as f64;
            self.sigma2 = self.sigma2.max(var);
        }
        Ok(g)
    }

    fn pair(&mut self, obj: &dyn Objective, a: &[f64], b: &[f64]) -> Result<()> {
        let ga = self.point(obj, a)?;
        let gb = self.point(obj, b)?;
        let d = dist(a, b);
        self.l1 = self.l1.max(dist(&ga, &gb) / d);
        let k = obj.embedding_len();
        let dphi = dist(&a[..k], &b[..k]);
        if dphi > 0.0 {
            let ma = obj.mean_embedding(a)?;
            let mb = obj.mean_embedding(b)?;
            self.l2 = self.l2.max(dist(&ma, &mb) / dphi);
        }
        Ok(())
    }
}

/// Estimates the constants from `num_probes` random pairs inside every probe
/// ball plus the explicit `pairs` (typically consecutive iterates).
///
/// `L1` and `L2` are the largest observed ratios, `G` is [`G_SAFETY`] times
/// the largest gradient norm and `σ²` the largest mean squared deviation of
/// mini-batch gradients from the full gradient. Pairs at zero distance are
/// redrawn; a ball that keeps producing them is a numeric error.
pub fn estimate_constants(
    obj: &dyn Objective,
    probes: &[Probe],
    pairs: &[(Vec<f64>, Vec<f64>)],
    num_probes: usize,
    seed: u64,
) -> Result<TheoryConstants> {
    if num_probes < 2 {
        return Err(Error::input("need at least 2 probes"));
    }
    let k = obj.embedding_len();
    let mut acc = Acc::default();
    for (a, b) in pairs {
        if dist(a, b) > 0.0 {
            acc.pair(obj, a, b)?;
        }
    }
    for (i, probe) in probes.iter().enumerate() {
        acc.point(obj, &probe.center)?;
        let mut rng = stream_rng(seed, &[streams::PROBE, i as u64]);
        for _ in 0..num_probes {
            let mut attempt = 0;
            let (a, b) = loop {
                let a = in_ball(&mut rng, &probe.center, probe.radius);
                let b = in_ball(&mut rng, &probe.center, probe.radius);
                if dist(&a, &b) > 0.0 && (k == 0 || dist(&a[..k], &b[..k]) > 0.0) {
                    break (a, b);
                }
                attempt += 1;
                if attempt >= MAX_RESAMPLES {
                    return Err(Error::Numeric {
                        location: format!(
                            "probe ball {i}: {MAX_RESAMPLES} degenerate pairs in a row"
                        ),
                    });
                }
            };
            acc.pair(obj, &a, &b)?;
        }
    }
    Ok(TheoryConstants {
        l1: acc.l1,
        l2: acc.l2,
        g: G_SAFETY * acc.g,
        sigma2: acc.sigma2,
    })
}

/// One client's local objective with a fixed reference prototype set.
pub struct ClientObjective<'a> {
    template: ModelState,
    samples: Vec<&'a Sample>,
    reference: Option<PrototypeSet>,
    loss: LossConfig,
    batch_size: Option<usize>,
}

impl<'a> ClientObjective<'a> {
    pub fn new(
        template: &ModelState,
        samples: Vec<&'a Sample>,
        reference: Option<PrototypeSet>,
        loss: LossConfig,
        batch_size: Option<usize>,
    ) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::input("objective needs samples"));
        }
        let mut samples = samples;
        samples.sort_by_key(|s| s.id);
        Ok(ClientObjective {
            template: template.clone(),
            samples,
            reference,
            loss,
            batch_size,
        })
    }

    fn model_at(&self, w: &[f64]) -> Result<ModelState> {
        let mut m = self.template.clone();
        m.params.assign_flat(w)?;
        Ok(m)
    }

    fn grad_on(&self, w: &[f64], batch: &[&Sample]) -> Result<Vec<f64>> {
        let m = self.model_at(w)?;
        let (_, g) = loss_and_gradient(&m, batch, self.reference.as_ref(), &self.loss)?;
        Ok(g.flatten())
    }
}

impl Objective for ClientObjective<'_> {
    fn gradient(&self, w: &[f64]) -> Result<Vec<f64>> {
        self.grad_on(w, &self.samples)
    }

    fn minibatch_gradients(&self, w: &[f64]) -> Result<Vec<Vec<f64>>> {
        match self.batch_size {
            Some(b) if b < self.samples.len() => self
                .samples
                .chunks(b)
                .map(|chunk| self.grad_on(w, chunk))
                .collect(),
            _ => Ok(vec![self.gradient(w)?]),
        }
    }

    fn embedding_len(&self) -> usize {
        self.template.params.embedding_len()
    }

    fn mean_embedding(&self, w: &[f64]) -> Result<Vec<f64>> {
        let m = self.model_at(w)?;
        let protos = compute_local_prototypes(&m, &self.samples)?;
        Ok(protos
            .iter()
            .flat_map(|(_, p)| p.vector.iter().copied())
            .collect())
    }
}
