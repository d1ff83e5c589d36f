use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{Sample, Shard};
use crate::model::{
    compute_local_prototypes, local_loss_breakdown, loss_and_gradient, loss_and_prototypes,
    predict_both, predict_by_decision, predict_by_prototype, regularizer, LossBreakdown,
    LossConfig, ModelState, Params, PrototypeSet, RegOperand,
};
use crate::rng::{stream_rng, streams};
use crate::transport::quantize;
use crate::{Error, Result};

use super::TrainingConfig;

/// Heavy-ball SGD: `v ← μ v + g`, `w ← w − η v`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Optimizer {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<f64>,
}

impl Optimizer {
    pub fn new(lr: f64, momentum: f64, num_params: usize) -> Result<Self> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::input(format!(
                "learning rate {lr} must be finite and ≥ 0"
            )));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::input(format!(
                "momentum {momentum} must be in [0, 1)"
            )));
        }
        Ok(Optimizer {
            lr,
            momentum,
            velocity: vec![0.0; num_params],
        })
    }

    pub fn velocity(&self) -> &[f64] {
        &self.velocity
    }

    pub fn step(&mut self, params: &mut Params, grad: &Params) -> Result<()> {
        let g = grad.flatten();
        if g.len() != self.velocity.len() {
            return Err(Error::input(format!(
                "gradient has {} entries, optimizer tracks {}",
                g.len(),
                self.velocity.len()
            )));
        }
        let mut w = params.flatten();
        for ((w, v), g) in w.iter_mut().zip(&mut self.velocity).zip(&g) {
            *v = self.momentum * *v + g;
            *w -= self.lr * *v;
        }
        params.assign_flat(&w)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    Prototype,
    Decision,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub loss: LossBreakdown,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocalUpdate {
    /// Prototypes over the whole training split after the last step.
    pub prototypes: PrototypeSet,
    /// Training-split loss after the last step, same reference.
    pub loss_end: LossBreakdown,
    pub steps: Vec<StepRecord>,
    /// Flattened parameters before every step and after the last one; only
    /// filled when requested.
    pub iterates: Vec<Vec<f64>>,
}

/// Client half of one round, between its upload and the next download.
#[derive(Clone, Debug)]
pub struct PendingRound {
    pub round: usize,
    pub loss_start: Option<LossBreakdown>,
    pub loss_local_end: Option<LossBreakdown>,
    pub steps: Vec<StepRecord>,
    /// Already narrowed to binary32; `None` when the client failed.
    pub upload: Option<PrototypeSet>,
    pub error: Option<String>,
    pub iterates: Vec<Vec<f64>>,
}

/// Per-client metrics for one round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientRoundRecord {
    pub client_id: u32,
    /// Full-training-set loss right after the round's download, before any step.
    pub loss_start: Option<LossBreakdown>,
    /// Same reference prototypes, after the local steps.
    pub loss_local_end: Option<LossBreakdown>,
    /// After the round's aggregation, against the new reference.
    pub loss: LossBreakdown,
    pub steps: Vec<StepRecord>,
    /// Accuracy in the method's primary inference mode.
    pub accuracy: f64,
    pub accuracy_prototype: f64,
    pub accuracy_decision: f64,
    pub error: Option<String>,
    /// Parameter trajectory of the round, kept only for bound verification.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub iterates: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClientState {
    pub client_id: u32,
    pub model: ModelState,
    pub shard: Shard,
    pub optimizer: Optimizer,
    /// Downloaded global prototypes used by the regularizer.
    pub reference: Option<PrototypeSet>,
    pub last_local_prototypes: PrototypeSet,
    seed: u64,
    loss_cache: Option<LossCacheEntry>,
}

/// Last training-split loss with everything it depends on.
#[derive(Clone, Debug, PartialEq)]
struct LossCacheEntry {
    params: Params,
    reference: Option<PrototypeSet>,
    loss: LossConfig,
    value: LossBreakdown,
    prototypes: PrototypeSet,
}

impl ClientState {
    pub fn new(model: ModelState, shard: Shard, optimizer: Optimizer, seed: u64) -> Result<Self> {
        if shard.train.is_empty() {
            return Err(Error::input(format!(
                "client {} has an empty training split",
                shard.client_id
            )));
        }
        if let Some(c) = shard
            .class_space
            .iter()
            .find(|c| model.class_space.binary_search(c).is_err())
        {
            return Err(Error::input(format!(
                "client {}: class {c} is outside the model's class space",
                shard.client_id
            )));
        }
        if optimizer.velocity.len() != model.num_params() {
            return Err(Error::input("optimizer state does not match the model"));
        }
        let last_local_prototypes = compute_local_prototypes(&model, &shard.train_refs())?;
        Ok(ClientState {
            client_id: shard.client_id,
            model,
            shard,
            optimizer,
            reference: None,
            last_local_prototypes,
            seed,
            loss_cache: None,
        })
    }

    /// Loss over the full training split.
    pub fn train_loss(
        &self,
        reference: Option<&PrototypeSet>,
        training: &TrainingConfig,
    ) -> Result<LossBreakdown> {
        local_loss_breakdown(
            &self.model,
            &self.shard.train_refs(),
            reference,
            &training.loss,
        )
    }

    /// [`ClientState::train_loss`], reusing the last full pass when the
    /// parameters and loss settings are unchanged. With the class-mean
    /// operand only the regularizer depends on the reference, so a new
    /// reference costs no forward pass either.
    fn train_loss_cached(
        &mut self,
        reference: Option<&PrototypeSet>,
        training: &TrainingConfig,
    ) -> Result<LossBreakdown> {
        if let Some(c) = &self.loss_cache {
            if c.loss == training.loss && c.params == self.model.params {
                if c.reference.as_ref() == reference {
                    return Ok(c.value);
                }
                if c.loss.operand == RegOperand::ClassMean {
                    let reg = match reference {
                        Some(g) => regularizer(&c.prototypes, g, c.loss.metric)?,
                        None => 0.0,
                    };
                    return Ok(LossBreakdown {
                        total: c.value.supervised + c.loss.lambda * reg,
                        supervised: c.value.supervised,
                        regularizer: reg,
                    });
                }
            }
        }
        let (value, prototypes) = loss_and_prototypes(
            &self.model,
            &self.shard.train_refs(),
            reference,
            &training.loss,
        )?;
        self.remember_loss(reference, training, value, prototypes);
        Ok(value)
    }

    fn remember_loss(
        &mut self,
        reference: Option<&PrototypeSet>,
        training: &TrainingConfig,
        value: LossBreakdown,
        prototypes: PrototypeSet,
    ) {
        self.loss_cache = Some(LossCacheEntry {
            params: self.model.params.clone(),
            reference: reference.cloned(),
            loss: training.loss,
            value,
            prototypes,
        });
    }

    /// Index batches of the training split for one epoch.
    fn batches(&self, round: usize, epoch: usize, batch_size: Option<usize>) -> Vec<Vec<usize>> {
        let n = self.shard.train.len();
        match batch_size {
            Some(b) if b < n => {
                let mut order: Vec<usize> = (0..n).collect();
                let mut rng = stream_rng(
                    self.seed,
                    &[
                        streams::SHUFFLE,
                        u64::from(self.client_id),
                        round as u64,
                        epoch as u64,
                    ],
                );
                order.shuffle(&mut rng);
                order.chunks(b).map(<[usize]>::to_vec).collect()
            }
            _ => vec![(0..n).collect()],
        }
    }

    /// `E` epochs of mini-batch momentum SGD against `reference`, then
    /// prototypes over the whole training split.
    pub fn local_update(
        &mut self,
        round: usize,
        reference: Option<&PrototypeSet>,
        training: &TrainingConfig,
    ) -> Result<LocalUpdate> {
        if training.epochs == 0 {
            return Err(Error::input("local epochs must be ≥ 1"));
        }
        if training.batch_size == Some(0) {
            return Err(Error::input("batch size must be ≥ 1"));
        }
        if let Some(r) = reference {
            if let Some(c) = self.shard.class_space.iter().find(|&&c| !r.contains(c)) {
                return Err(Error::protocol(format!(
                    "client {}: no global prototype downloaded for class {c}",
                    self.client_id
                )));
            }
        }
        let mut steps = Vec::new();
        let mut iterates = Vec::new();
        for epoch in 0..training.epochs {
            let batches = self.batches(round, epoch, training.batch_size);
            for indices in batches {
                let batch: Vec<&Sample> = indices.iter().map(|&i| &self.shard.train[i]).collect();
                if training.capture_iterates {
                    iterates.push(self.model.params.flatten());
                }
                let (loss, grad) =
                    loss_and_gradient(&self.model, &batch, reference, &training.loss)?;
                if !loss.is_finite() {
                    return Err(Error::Numeric {
                        location: format!(
                            "client {} round {round} step {}: loss {}",
                            self.client_id,
                            steps.len(),
                            loss.total
                        ),
                    });
                }
                self.optimizer.step(&mut self.model.params, &grad.params)?;
                if let Some(loc) = self.model.params.first_non_finite() {
                    return Err(Error::Numeric {
                        location: format!(
                            "client {} after step {}: {loc}",
                            self.client_id,
                            steps.len()
                        ),
                    });
                }
                steps.push(StepRecord {
                    loss,
                    grad_norm: grad.l2_norm,
                });
            }
        }
        if training.capture_iterates {
            iterates.push(self.model.params.flatten());
        }
        let (loss_end, prototypes) = loss_and_prototypes(
            &self.model,
            &self.shard.train_refs(),
            reference,
            &training.loss,
        )?;
        self.remember_loss(reference, training, loss_end, prototypes.clone());
        self.last_local_prototypes = prototypes.clone();
        Ok(LocalUpdate {
            prototypes,
            loss_end,
            steps,
            iterates,
        })
    }

    /// Fraction of the local test split classified correctly.
    pub fn evaluate(&self, global: &PrototypeSet, mode: EvalMode) -> Result<f64> {
        if self.shard.test.is_empty() {
            return Err(Error::input(format!(
                "client {} has an empty test split",
                self.client_id
            )));
        }
        let protos = global.restrict(&self.model.class_space);
        let mut correct = 0usize;
        for s in &self.shard.test {
            let predicted = match mode {
                EvalMode::Prototype => predict_by_prototype(&self.model, &s.features, &protos)?,
                EvalMode::Decision => predict_by_decision(&self.model, &s.features)?,
            };
            correct += usize::from(predicted == s.label);
        }
        Ok(correct as f64 / self.shard.test.len() as f64)
    }

    /// Prototype-inference and decision-head accuracy from one pass over the
    /// test split.
    pub fn accuracies(&self, global: &PrototypeSet) -> Result<(f64, f64)> {
        if self.shard.test.is_empty() {
            return Err(Error::input(format!(
                "client {} has an empty test split",
                self.client_id
            )));
        }
        let protos = global.restrict(&self.model.class_space);
        let (mut by_proto, mut by_head) = (0usize, 0usize);
        for s in &self.shard.test {
            let (p, h) = predict_both(&self.model, &s.features, &protos)?;
            by_proto += usize::from(p == s.label);
            by_head += usize::from(h == s.label);
        }
        let n = self.shard.test.len() as f64;
        Ok((by_proto as f64 / n, by_head as f64 / n))
    }

    /// Round 0: untrained prototypes, no local steps.
    pub fn bootstrap_round(&mut self) -> PendingRound {
        let upload = compute_local_prototypes(&self.model, &self.shard.train_refs())
            .and_then(|p| quantize(&p));
        let (upload, error) = match upload {
            Ok(p) => (Some(p), None),
            Err(e) => (None, Some(e.to_string())),
        };
        PendingRound {
            round: 0,
            loss_start: None,
            loss_local_end: None,
            steps: Vec::new(),
            upload,
            error,
            iterates: Vec::new(),
        }
    }

    /// Installs the download (if any) as the new reference and runs the local
    /// update. A failure restores the pre-round model and is reported in the
    /// returned record instead of aborting the round.
    pub fn begin_round(
        &mut self,
        round: usize,
        download: Option<PrototypeSet>,
        training: &TrainingConfig,
    ) -> PendingRound {
        if download.is_some() {
            self.reference = download;
        }
        let backup = (self.model.clone(), self.optimizer.clone());
        let reference = self.reference.clone();
        let attempt = (|| {
            let start = self.train_loss_cached(reference.as_ref(), training)?;
            let update = self.local_update(round, reference.as_ref(), training)?;
            let end = update.loss_end;
            let upload = quantize(&update.prototypes)?;
            Ok::<_, Error>((start, end, update, upload))
        })();
        match attempt {
            Ok((start, end, update, upload)) => PendingRound {
                round,
                loss_start: Some(start),
                loss_local_end: Some(end),
                steps: update.steps,
                upload: Some(upload),
                error: None,
                iterates: update.iterates,
            },
            Err(e) => {
                log::warn!("client {} excluded from round {round}: {e}", self.client_id);
                (self.model, self.optimizer) = backup;
                PendingRound {
                    round,
                    loss_start: None,
                    loss_local_end: None,
                    steps: Vec::new(),
                    upload: None,
                    error: Some(e.to_string()),
                    iterates: Vec::new(),
                }
            }
        }
    }

    /// Closes a round once the post-aggregation state is known: `reference`
    /// becomes the regularizer target, `protos` drive prototype inference.
    pub fn finish_round(
        &mut self,
        pending: PendingRound,
        reference: Option<PrototypeSet>,
        protos: &PrototypeSet,
        primary: EvalMode,
        training: &TrainingConfig,
    ) -> Result<ClientRoundRecord> {
        if reference.is_some() {
            self.reference = reference;
        }
        let reference = self.reference.clone();
        let loss = self.train_loss_cached(reference.as_ref(), training)?;
        let (accuracy_prototype, accuracy_decision) = self.accuracies(protos)?;
        Ok(ClientRoundRecord {
            client_id: self.client_id,
            loss_start: pending.loss_start,
            loss_local_end: pending.loss_local_end,
            loss,
            steps: pending.steps,
            accuracy: match primary {
                EvalMode::Prototype => accuracy_prototype,
                EvalMode::Decision => accuracy_decision,
            },
            accuracy_prototype,
            accuracy_decision,
            error: pending.error,
            iterates: pending.iterates,
        })
    }
}
