//! The federated training loop: client local updates, the server barrier,
//! and the FedProto, FedAvg and Local variants built from them.

mod client;
mod experiment;
mod report;

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregation::{aggregate_prototypes, AggregationPolicy};
use crate::config::{ExperimentConfig, Method};
use crate::model::{LossConfig, PrototypeSet};
use crate::transport::quantize;
use crate::Result;

pub use client::{
    ClientRoundRecord, ClientState, EvalMode, LocalUpdate, Optimizer, PendingRound, StepRecord,
};
pub use experiment::{
    build_clients, build_dataset, client_arch, comm_table, run_experiment, run_sweep, CommRow,
    Experiment,
};
pub use report::{ClientSummary, ExperimentReport, SweepReport, SweepRow, Totals};

/// Knobs of the local solver shared by every client in a run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainingConfig {
    pub loss: LossConfig,
    pub epochs: usize,
    /// `None` means full batch.
    pub batch_size: Option<usize>,
    pub parallel: bool,
    pub record_timing: bool,
    pub capture_iterates: bool,
}

impl TrainingConfig {
    pub fn from_config(cfg: &ExperimentConfig) -> Result<Self> {
        Ok(TrainingConfig {
            loss: cfg.loss_config()?,
            epochs: cfg.local_epochs,
            batch_size: cfg.batch_size,
            parallel: cfg.parallel,
            record_timing: cfg.record_timing,
            capture_iterates: false,
        })
    }
}

/// Aggregated metrics of one communication round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    /// Ascending client id.
    pub clients: Vec<ClientRoundRecord>,
    pub params_up: u64,
    pub params_down: u64,
    pub params_communicated: u64,
    pub mean_accuracy: f64,
    /// Population standard deviation over clients.
    pub std_accuracy: f64,
    pub mean_accuracy_prototype: f64,
    pub mean_accuracy_decision: f64,
    pub mean_loss: f64,
    pub mean_regularizer: f64,
    /// Clients left out of this round's aggregation.
    pub excluded: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_clock_ms: Option<f64>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl RoundRecord {
    pub fn from_clients(
        round: usize,
        mut clients: Vec<ClientRoundRecord>,
        params_up: u64,
        params_down: u64,
        mut excluded: Vec<u32>,
    ) -> Self {
        clients.sort_by_key(|c| c.client_id);
        excluded.extend(
            clients
                .iter()
                .filter(|c| c.error.is_some())
                .map(|c| c.client_id),
        );
        excluded.sort_unstable();
        excluded.dedup();
        let pick = |f: fn(&ClientRoundRecord) -> f64| clients.iter().map(f).collect::<Vec<_>>();
        let (mean_accuracy, std_accuracy) = mean_std(&pick(|c| c.accuracy));
        RoundRecord {
            round,
            params_up,
            params_down,
            params_communicated: params_up + params_down,
            mean_accuracy,
            std_accuracy,
            mean_accuracy_prototype: mean_std(&pick(|c| c.accuracy_prototype)).0,
            mean_accuracy_decision: mean_std(&pick(|c| c.accuracy_decision)).0,
            mean_loss: mean_std(&pick(|c| c.loss.total)).0,
            mean_regularizer: mean_std(&pick(|c| c.loss.regularizer)).0,
            excluded,
            wall_clock_ms: None,
            clients,
        }
    }
}

/// Server side of FedProto.
#[derive(Clone, Debug, PartialEq)]
pub struct ServerState {
    pub global_prototypes: PrototypeSet,
    /// Completed training rounds; the bootstrap upload does not count.
    pub round: usize,
    pub policy: AggregationPolicy,
    pub history: Vec<RoundRecord>,
}

impl ServerState {
    pub fn new(policy: AggregationPolicy) -> Self {
        ServerState {
            global_prototypes: PrototypeSet::new(),
            round: 0,
            policy,
            history: Vec::new(),
        }
    }

    /// Aggregates the uploads and overwrites the global entry of every
    /// uploaded class; other classes keep their previous value.
    pub fn absorb(&mut self, uploads: &[(u32, PrototypeSet)]) -> Result<()> {
        if uploads.is_empty() {
            log::warn!("no uploads this round; global prototypes unchanged");
            return Ok(());
        }
        let fresh = aggregate_prototypes(uploads, &self.policy)?;
        self.global_prototypes.merge_from(&fresh);
        Ok(())
    }

    /// The binary32 global prototypes restricted to `class_space`.
    pub fn download_for(&self, class_space: &[usize]) -> Result<PrototypeSet> {
        quantize(&self.global_prototypes.restrict(class_space))
    }
}

pub(crate) fn map_clients<T, F>(clients: &mut [ClientState], parallel: bool, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(&mut ClientState) -> T + Sync + Send,
{
    if parallel {
        clients.par_iter_mut().map(f).collect()
    } else {
        clients.iter_mut().map(f).collect()
    }
}

fn collect_uploads(pending: &[PendingRound], clients: &[ClientState]) -> Vec<(u32, PrototypeSet)> {
    pending
        .iter()
        .zip(clients)
        .filter_map(|(p, c)| p.upload.clone().map(|u| (c.client_id, u)))
        .collect()
}

fn finish_fedproto(
    server: &ServerState,
    clients: &mut [ClientState],
    pending: Vec<PendingRound>,
    training: &TrainingConfig,
) -> Result<Vec<ClientRoundRecord>> {
    let views = clients
        .iter()
        .map(|c| server.download_for(&c.model.class_space))
        .collect::<Result<Vec<_>>>()?;
    let mut work: Vec<_> = clients.iter_mut().zip(pending).zip(views).collect();
    let run = |((c, p), view): &mut ((&mut ClientState, PendingRound), PrototypeSet)| {
        c.finish_round(
            p.clone(),
            Some(view.clone()),
            view,
            EvalMode::Prototype,
            training,
        )
    };
    if training.parallel {
        work.par_iter_mut().map(run).collect()
    } else {
        work.iter_mut().map(run).collect()
    }
}

/// FedProto round 0: every client uploads the prototypes of its untrained
/// model and the aggregate becomes the first global set.
pub fn bootstrap(
    server: &mut ServerState,
    clients: &mut [ClientState],
    training: &TrainingConfig,
) -> Result<RoundRecord> {
    let started = Instant::now();
    let pending = map_clients(clients, training.parallel, |c| c.bootstrap_round());
    let uploads = collect_uploads(&pending, clients);
    let up: usize = uploads.iter().map(|(_, u)| u.num_scalars()).sum();
    server.absorb(&uploads)?;
    let records = finish_fedproto(server, clients, pending, training)?;
    let mut record = RoundRecord::from_clients(0, records, up as u64, 0, Vec::new());
    if training.record_timing {
        record.wall_clock_ms = Some(started.elapsed().as_secs_f64() * 1e3);
    }
    Ok(record)
}

/// One FedProto round: dispatch restricted global prototypes, local updates,
/// upload, aggregate at the barrier.
pub fn run_round(
    server: &mut ServerState,
    clients: &mut [ClientState],
    training: &TrainingConfig,
) -> Result<RoundRecord> {
    let started = Instant::now();
    let round = server.round + 1;
    let downloads = clients
        .iter()
        .map(|c| server.download_for(&c.model.class_space))
        .collect::<Result<Vec<_>>>()?;
    let down: usize = downloads.iter().map(PrototypeSet::num_scalars).sum();
    let mut work: Vec<_> = clients.iter_mut().zip(downloads).collect();
    let run = |(c, d): &mut (&mut ClientState, PrototypeSet)| {
        c.begin_round(round, Some(std::mem::take(d)), training)
    };
    let pending: Vec<PendingRound> = if training.parallel {
        work.par_iter_mut().map(run).collect()
    } else {
        work.iter_mut().map(run).collect()
    };
    let uploads = collect_uploads(&pending, clients);
    let up: usize = uploads.iter().map(|(_, u)| u.num_scalars()).sum();
    server.absorb(&uploads)?;
    server.round = round;
    let records = finish_fedproto(server, clients, pending, training)?;
    let mut record = RoundRecord::from_clients(round, records, up as u64, down as u64, Vec::new());
    if training.record_timing {
        record.wall_clock_ms = Some(started.elapsed().as_secs_f64() * 1e3);
    }
    Ok(record)
}

/// Which inference mode a method reports as its headline accuracy.
pub fn primary_mode(method: Method) -> EvalMode {
    match method {
        Method::FedProto => EvalMode::Prototype,
        Method::FedAvg | Method::Local => EvalMode::Decision,
    }
}
