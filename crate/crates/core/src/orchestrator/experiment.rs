use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::aggregation::average_parameters;
use crate::config::{DatasetSource, ExperimentConfig, Method};
use crate::data::{generate_synthetic, load_idx, partition, Dataset};
use crate::model::{compute_local_prototypes, Arch, ModelState, PrototypeSet};
use crate::rng::{stream_rng, streams};
use crate::{Error, Result};

use super::client::{ClientRoundRecord, ClientState, EvalMode, Optimizer, PendingRound};
use super::report::{ClientSummary, ExperimentReport, SweepReport, SweepRow};
use super::{
    bootstrap, map_clients, primary_mode, run_round, RoundRecord, ServerState, TrainingConfig,
};

pub fn build_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    match &cfg.dataset {
        DatasetSource::Synthetic => generate_synthetic(
            cfg.num_classes,
            cfg.input_dim,
            cfg.samples_per_class,
            cfg.cluster_spread,
            cfg.seed,
        ),
        DatasetSource::Idx { images, labels } => load_idx(images, labels),
    }
}

/// Architecture of the client at `index`: mlp1 clients are spread evenly
/// according to `mlp_fraction` and cycle through the `hidden` widths.
pub fn client_arch(cfg: &ExperimentConfig, index: usize) -> Arch {
    let f = cfg.mlp_fraction;
    let before = (index as f64 * f).floor();
    if ((index + 1) as f64 * f).floor() > before {
        Arch::Mlp1Embed {
            hidden: cfg.hidden[before as usize % cfg.hidden.len()],
        }
    } else {
        Arch::LinearEmbed
    }
}

/// Partitions `ds` and initialises one client per shard. FedAvg clients get
/// the full class space and one shared initialisation stream.
pub fn build_clients(cfg: &ExperimentConfig, ds: &Dataset) -> Result<Vec<ClientState>> {
    let shards = partition(ds, &cfg.partition_config())?;
    shards
        .into_iter()
        .enumerate()
        .map(|(i, shard)| {
            let (class_space, mut rng) = match cfg.method {
                Method::FedAvg => (
                    (0..ds.num_classes).collect(),
                    stream_rng(cfg.seed, &[streams::MODEL_INIT]),
                ),
                _ => (
                    shard.class_space.clone(),
                    stream_rng(cfg.seed, &[streams::MODEL_INIT, u64::from(shard.client_id)]),
                ),
            };
            let model = ModelState::new(
                client_arch(cfg, i),
                ds.input_dim,
                cfg.embed_dim,
                class_space,
                &mut rng,
            )?;
            let optimizer = Optimizer::new(cfg.lr, cfg.momentum, model.num_params())?;
            ClientState::new(model, shard, optimizer, cfg.seed)
        })
        .collect()
}

fn idle(round: usize) -> PendingRound {
    PendingRound {
        round,
        loss_start: None,
        loss_local_end: None,
        steps: Vec::new(),
        upload: None,
        error: None,
        iterates: Vec::new(),
    }
}

fn own_prototypes(c: &ClientState) -> Result<PrototypeSet> {
    compute_local_prototypes(&c.model, &c.shard.train_refs())
}

/// A configured run that can be advanced one round at a time.
pub struct Experiment {
    config: ExperimentConfig,
    training: TrainingConfig,
    clients: Vec<ClientState>,
    server: ServerState,
    global_model: Option<ModelState>,
}

impl Experiment {
    /// Validates, builds data and clients, and records round 0.
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        config.single_lambda()?;
        let ds = build_dataset(&config)?;
        Self::with_dataset(config, &ds)
    }

    pub fn with_dataset(config: ExperimentConfig, ds: &Dataset) -> Result<Self> {
        let training = TrainingConfig::from_config(&config)?;
        let clients = build_clients(&config, ds)?;
        Self::from_clients(config, training, clients)
    }

    /// Starts from explicit clients, e.g. with a modified [`TrainingConfig`].
    pub fn from_clients(
        config: ExperimentConfig,
        training: TrainingConfig,
        clients: Vec<ClientState>,
    ) -> Result<Self> {
        if clients.is_empty() {
            return Err(Error::input("no clients"));
        }
        let global_model = match config.method {
            Method::FedAvg => {
                let uploads: Vec<_> = clients
                    .iter()
                    .map(|c| (c.client_id, &c.model, c.shard.train.len() as f64))
                    .collect();
                Some(average_parameters(&uploads)?)
            }
            _ => None,
        };
        let mut exp = Experiment {
            server: ServerState::new(config.policy()),
            config,
            training,
            clients,
            global_model,
        };
        let record = exp.round_zero()?;
        exp.server.history.push(record);
        Ok(exp)
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn training(&self) -> &TrainingConfig {
        &self.training
    }

    pub fn training_mut(&mut self) -> &mut TrainingConfig {
        &mut self.training
    }

    pub fn clients(&self) -> &[ClientState] {
        &self.clients
    }

    pub fn server(&self) -> &ServerState {
        &self.server
    }

    pub fn history(&self) -> &[RoundRecord] {
        &self.server.history
    }

    pub fn rounds_completed(&self) -> usize {
        self.server.round
    }

    fn evaluate_only(&mut self, round: usize) -> Result<Vec<ClientRoundRecord>> {
        let training = self.training;
        let mode = primary_mode(self.config.method);
        map_clients(&mut self.clients, training.parallel, |c| {
            let protos = own_prototypes(c)?;
            c.finish_round(idle(round), None, &protos, mode, &training)
        })
        .into_iter()
        .collect()
    }

    fn round_zero(&mut self) -> Result<RoundRecord> {
        match self.config.method {
            Method::FedProto => bootstrap(&mut self.server, &mut self.clients, &self.training),
            Method::FedAvg | Method::Local => {
                let records = self.evaluate_only(0)?;
                Ok(RoundRecord::from_clients(0, records, 0, 0, Vec::new()))
            }
        }
    }

    fn local_round(&mut self, round: usize) -> Result<RoundRecord> {
        let training = self.training;
        map_clients(&mut self.clients, training.parallel, |c| {
            let pending = c.begin_round(round, None, &training);
            let protos = c.last_local_prototypes.clone();
            c.finish_round(pending, None, &protos, EvalMode::Decision, &training)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()
        .map(|records| RoundRecord::from_clients(round, records, 0, 0, Vec::new()))
    }

    fn fedavg_round(&mut self, round: usize) -> Result<RoundRecord> {
        let training = self.training;
        let global = self
            .global_model
            .take()
            .ok_or_else(|| Error::protocol("FedAvg run without a global model"))?;
        let mut down = 0u64;
        for c in &mut self.clients {
            c.model.params = global.params.clone();
            down += global.num_params() as u64;
        }
        let pending = map_clients(&mut self.clients, training.parallel, |c| {
            c.begin_round(round, None, &training)
        });
        let uploads: Vec<_> = self
            .clients
            .iter()
            .zip(&pending)
            .filter(|(_, p)| p.error.is_none())
            .map(|(c, _)| (c.client_id, &c.model, c.shard.train.len() as f64))
            .collect();
        let up: u64 = uploads.iter().map(|(_, m, _)| m.num_params() as u64).sum();
        let next = if uploads.is_empty() {
            global
        } else {
            average_parameters(&uploads)?
        };
        let mut records = Vec::with_capacity(self.clients.len());
        for (c, p) in self.clients.iter_mut().zip(pending) {
            c.model.params = next.params.clone();
            let protos = own_prototypes(c)?;
            records.push(c.finish_round(p, None, &protos, EvalMode::Decision, &training)?);
        }
        self.global_model = Some(next);
        Ok(RoundRecord::from_clients(
            round,
            records,
            up,
            down,
            Vec::new(),
        ))
    }

    /// Advances one communication round of the configured method.
    pub fn run_round(&mut self) -> Result<&RoundRecord> {
        let started = Instant::now();
        let round = self.server.round + 1;
        let mut record = match self.config.method {
            Method::FedProto => run_round(&mut self.server, &mut self.clients, &self.training)?,
            Method::FedAvg => self.fedavg_round(round)?,
            Method::Local => self.local_round(round)?,
        };
        self.server.round = round;
        if self.training.record_timing && record.wall_clock_ms.is_none() {
            record.wall_clock_ms = Some(started.elapsed().as_secs_f64() * 1e3);
        }
        self.server.history.push(record);
        Ok(self.server.history.last().expect("just pushed"))
    }

    /// Runs until `config.rounds` rounds are complete.
    pub fn run(&mut self) -> Result<()> {
        while self.server.round < self.config.rounds {
            let r = self.run_round()?;
            log::info!(
                "round {}: mean acc {:.4} ± {:.4}, mean loss {:.4}",
                r.round,
                r.mean_accuracy,
                r.std_accuracy,
                r.mean_loss
            );
        }
        Ok(())
    }

    pub fn client_summaries(&self) -> Vec<ClientSummary> {
        self.clients.iter().map(ClientSummary::of).collect()
    }

    pub fn report(&self) -> ExperimentReport {
        ExperimentReport::new(
            &self.config,
            self.client_summaries(),
            self.server.history.clone(),
        )
    }
}

/// Builds, runs and reports a single-λ experiment.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    let mut exp = Experiment::new(config.clone())?;
    exp.run()?;
    Ok(exp.report())
}

/// One run per λ in `config.lambda`.
pub fn run_sweep(config: &ExperimentConfig) -> Result<SweepReport> {
    config.validate()?;
    let ds = build_dataset(config)?;
    let mut rows = Vec::new();
    let mut runs = Vec::new();
    for &lambda in &config.lambda {
        let mut exp = Experiment::with_dataset(config.with_lambda(lambda), &ds)?;
        exp.run()?;
        let report = exp.report();
        rows.push(SweepRow::of(lambda, &report));
        runs.push(report);
    }
    Ok(SweepReport::new(config, rows, runs))
}

/// Per-round parameter counts of one method, derived from the partition alone.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommRow {
    pub method: Method,
    pub params_up: u64,
    pub params_down: u64,
    pub params_per_round: u64,
}

/// Communication cost per round for fedproto, fedavg and local on the
/// configured partition. `model_params` overrides the FedAvg model size.
pub fn comm_table(cfg: &ExperimentConfig) -> Result<Vec<CommRow>> {
    cfg.validate()?;
    let ds = build_dataset(cfg)?;
    let shards = partition(&ds, &cfg.partition_config())?;
    let proto: u64 = shards
        .iter()
        .map(|s| (s.class_space.len() * cfg.embed_dim) as u64)
        .sum();
    let mut model = 0u64;
    for i in 0..shards.len() {
        model += match cfg.model_params {
            Some(p) => p as u64,
            None => ModelState::zeros(
                client_arch(cfg, i),
                ds.input_dim,
                cfg.embed_dim,
                (0..ds.num_classes).collect(),
            )?
            .num_params() as u64,
        };
    }
    let row = |method, per_direction: u64| CommRow {
        method,
        params_up: per_direction,
        params_down: per_direction,
        params_per_round: 2 * per_direction,
    };
    Ok(vec![
        row(Method::FedProto, proto),
        row(Method::FedAvg, model),
        row(Method::Local, 0),
    ])
}
