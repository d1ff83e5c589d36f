//! Client models: an embedding network `f(φ)` feeding a linear decision head
//! `g(ν)`, plus the prototype-regularized loss and both inference paths.

mod loss;
mod prototype;

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use loss::{
    local_loss, local_loss_breakdown, local_loss_gradient, loss_and_gradient, loss_and_prototypes,
    regularizer, supervised_loss, LossBreakdown, LossConfig, Metric, RegOperand,
};
pub use prototype::{
    compute_local_prototypes, predict_both, predict_by_decision, predict_by_prototype, Prototype,
    PrototypeSet,
};

/// Default width of the hidden layer in [`Arch::Mlp1Embed`].
pub const DEFAULT_HIDDEN: usize = 64;

/// Embedding architecture. Both variants emit `embed_dim` outputs so that
/// their prototypes live in one shared space.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Arch {
    /// `f(x) = W x + b`.
    LinearEmbed,
    /// `f(x) = W2 tanh(W1 x + b1) + b2`.
    Mlp1Embed { hidden: usize },
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Arch::LinearEmbed => write!(f, "linear-embed"),
            Arch::Mlp1Embed { hidden } => write!(f, "mlp1-embed({hidden})"),
        }
    }
}

/// Dot product with four independent partial sums so the loop vectorizes.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| x * y)
        .sum();
    for (x, y) in ca.zip(cb) {
        let x: &[f64; 4] = x.try_into().expect("chunk of 4");
        let y: &[f64; 4] = y.try_into().expect("chunk of 4");
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Fully connected layer computing `W x + b`, `W` stored row-major with one
/// row per output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Dense {
            inputs,
            outputs,
            weight: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    /// Uniform `±1/sqrt(fan_in)` initialisation.
    pub fn random<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (inputs.max(1) as f64).sqrt();
        let mut draw = || rng.random_range(-bound..=bound);
        let weight = (0..inputs * outputs).map(|_| draw()).collect();
        let bias = (0..outputs).map(|_| draw()).collect();
        Dense {
            inputs,
            outputs,
            weight,
            bias,
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.inputs);
        self.weight
            .chunks_exact(self.inputs.max(1))
            .take(self.outputs)
            .zip(&self.bias)
            .map(|(row, b)| b + dot(row, x))
            .collect()
    }

    /// `Wᵀ d` for an upstream gradient `d` of length `outputs`.
    fn backward_input(&self, d: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.inputs];
        for (row, &dv) in self.weight.chunks_exact(self.inputs.max(1)).zip(d) {
            for (o, w) in out.iter_mut().zip(row) {
                *o += w * dv;
            }
        }
        out
    }

    /// Accumulates `d xᵀ` into the weight gradient and `d` into the bias.
    fn accumulate(&mut self, d: &[f64], x: &[f64]) {
        for ((row, b), &dv) in self
            .weight
            .chunks_exact_mut(self.inputs.max(1))
            .zip(self.bias.iter_mut())
            .zip(d)
        {
            *b += dv;
            for (w, xv) in row.iter_mut().zip(x) {
                *w += dv * xv;
            }
        }
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    fn same_shape(&self, other: &Dense) -> bool {
        self.inputs == other.inputs && self.outputs == other.outputs
    }
}

/// Parameter stack `(φ, ν)`: embedding layers followed by the decision head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub embedding: Vec<Dense>,
    pub decision: Dense,
}

impl Params {
    pub fn zeros_like(&self) -> Params {
        Params {
            embedding: self
                .embedding
                .iter()
                .map(|l| Dense::zeros(l.inputs, l.outputs))
                .collect(),
            decision: Dense::zeros(self.decision.inputs, self.decision.outputs),
        }
    }

    fn layers(&self) -> impl Iterator<Item = &Dense> {
        self.embedding.iter().chain(std::iter::once(&self.decision))
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut Dense> {
        self.embedding
            .iter_mut()
            .chain(std::iter::once(&mut self.decision))
    }

    pub fn num_params(&self) -> usize {
        self.layers().map(Dense::num_params).sum()
    }

    /// Number of leading entries of [`Params::flatten`] that belong to `φ`.
    pub fn embedding_len(&self) -> usize {
        self.embedding.iter().map(Dense::num_params).sum()
    }

    /// Flat view in layer order, each layer as weight then bias.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for layer in self.layers() {
            out.extend_from_slice(&layer.weight);
            out.extend_from_slice(&layer.bias);
        }
        out
    }

    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::input(format!(
                "flat parameter vector has length {}, model has {}",
                flat.len(),
                self.num_params()
            )));
        }
        let mut rest = flat;
        for layer in self.layers_mut() {
            let (w, tail) = rest.split_at(layer.weight.len());
            layer.weight.copy_from_slice(w);
            let (b, tail) = tail.split_at(layer.bias.len());
            layer.bias.copy_from_slice(b);
            rest = tail;
        }
        Ok(())
    }

    pub fn same_shape(&self, other: &Params) -> bool {
        self.embedding.len() == other.embedding.len()
            && self
                .layers()
                .zip(other.layers())
                .all(|(a, b)| a.same_shape(b))
    }

    pub fn l2_norm(&self) -> f64 {
        self.layers()
            .flat_map(|l| l.weight.iter().chain(&l.bias))
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Name of the first non-finite entry, if any.
    pub fn first_non_finite(&self) -> Option<String> {
        let names = self
            .embedding
            .iter()
            .enumerate()
            .map(|(i, l)| (format!("embedding[{i}]"), l))
            .chain(std::iter::once(("decision".to_string(), &self.decision)));
        for (name, layer) in names {
            if let Some(k) = layer.weight.iter().position(|v| !v.is_finite()) {
                return Some(format!("{name}.weight[{k}]"));
            }
            if let Some(k) = layer.bias.iter().position(|v| !v.is_finite()) {
                return Some(format!("{name}.bias[{k}]"));
            }
        }
        None
    }
}

/// Gradient of the local loss, shaped like the model's [`Params`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gradient {
    pub params: Params,
    pub l2_norm: f64,
}

impl Gradient {
    pub fn flatten(&self) -> Vec<f64> {
        self.params.flatten()
    }
}

/// One client's model `ω = (φ, ν)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub arch: Arch,
    pub input_dim: usize,
    pub embed_dim: usize,
    /// Global class ids recognised by the decision head, ascending.
    pub class_space: Vec<usize>,
    pub params: Params,
}

/// Intermediate values of one forward pass, kept for backpropagation.
pub(crate) struct Trace {
    /// Hidden activations after tanh (empty for the linear variant).
    pub hidden: Vec<f64>,
    pub embedding: Vec<f64>,
    pub logits: Vec<f64>,
}

impl ModelState {
    pub fn new<R: Rng + ?Sized>(
        arch: Arch,
        input_dim: usize,
        embed_dim: usize,
        class_space: Vec<usize>,
        rng: &mut R,
    ) -> Result<Self> {
        Self::validate_dims(arch, input_dim, embed_dim, &class_space)?;
        let embedding = match arch {
            Arch::LinearEmbed => vec![Dense::random(input_dim, embed_dim, rng)],
            Arch::Mlp1Embed { hidden } => vec![
                Dense::random(input_dim, hidden, rng),
                Dense::random(hidden, embed_dim, rng),
            ],
        };
        let decision = Dense::random(embed_dim, class_space.len(), rng);
        Ok(ModelState {
            arch,
            input_dim,
            embed_dim,
            class_space,
            params: Params {
                embedding,
                decision,
            },
        })
    }

    /// All-zero parameters; mostly useful for fixtures.
    pub fn zeros(
        arch: Arch,
        input_dim: usize,
        embed_dim: usize,
        class_space: Vec<usize>,
    ) -> Result<Self> {
        Self::validate_dims(arch, input_dim, embed_dim, &class_space)?;
        let embedding = match arch {
            Arch::LinearEmbed => vec![Dense::zeros(input_dim, embed_dim)],
            Arch::Mlp1Embed { hidden } => vec![
                Dense::zeros(input_dim, hidden),
                Dense::zeros(hidden, embed_dim),
            ],
        };
        Ok(ModelState {
            arch,
            input_dim,
            embed_dim,
            params: Params {
                embedding,
                decision: Dense::zeros(embed_dim, class_space.len()),
            },
            class_space,
        })
    }

    fn validate_dims(
        arch: Arch,
        input_dim: usize,
        embed_dim: usize,
        class_space: &[usize],
    ) -> Result<()> {
        if input_dim == 0 || embed_dim == 0 {
            return Err(Error::input("input_dim and embed_dim must be positive"));
        }
        if let Arch::Mlp1Embed { hidden: 0 } = arch {
            return Err(Error::input("hidden width must be positive"));
        }
        if class_space.is_empty() {
            return Err(Error::input("class space is empty"));
        }
        if class_space.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::input("class space must be strictly ascending"));
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.params.num_params()
    }

    pub(crate) fn class_index(&self, class: usize) -> Option<usize> {
        self.class_space.binary_search(&class).ok()
    }

    pub(crate) fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim {
            return Err(Error::input(format!(
                "input has length {}, model expects {}",
                x.len(),
                self.input_dim
            )));
        }
        Ok(())
    }

    pub(crate) fn trace(&self, x: &[f64]) -> Trace {
        let (hidden, embedding) = match self.arch {
            Arch::LinearEmbed => (Vec::new(), self.params.embedding[0].forward(x)),
            Arch::Mlp1Embed { .. } => {
                let mut h = self.params.embedding[0].forward(x);
                h.iter_mut().for_each(|v| *v = v.tanh());
                let e = self.params.embedding[1].forward(&h);
                (h, e)
            }
        };
        let logits = self.params.decision.forward(&embedding);
        Trace {
            hidden,
            embedding,
            logits,
        }
    }

    /// Embedding `f(φ; x)`.
    pub fn embed(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        Ok(self.trace(x).embedding)
    }

    /// Decision scores `g(ν; f(φ; x))`, one per entry of `class_space`.
    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        Ok(self.trace(x).logits)
    }

    /// Adds `d_embedding` backpropagated through `f` into `grad.embedding`.
    pub(crate) fn backprop_embedding(
        &self,
        x: &[f64],
        trace: &Trace,
        d_embedding: &[f64],
        grad: &mut Params,
    ) {
        match self.arch {
            Arch::LinearEmbed => grad.embedding[0].accumulate(d_embedding, x),
            Arch::Mlp1Embed { .. } => {
                grad.embedding[1].accumulate(d_embedding, &trace.hidden);
                let mut d_hidden = self.params.embedding[1].backward_input(d_embedding);
                for (d, h) in d_hidden.iter_mut().zip(&trace.hidden) {
                    *d *= 1.0 - h * h;
                }
                grad.embedding[0].accumulate(&d_hidden, x);
            }
        }
    }

    pub(crate) fn backprop_decision(
        &self,
        trace: &Trace,
        d_logits: &[f64],
        grad: &mut Params,
    ) -> Vec<f64> {
        grad.decision.accumulate(d_logits, &trace.embedding);
        self.params.decision.backward_input(d_logits)
    }
}
