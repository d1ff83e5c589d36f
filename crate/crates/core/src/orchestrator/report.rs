use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Method};
use crate::model::Arch;
use crate::Result;

use super::client::ClientState;
use super::RoundRecord;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientSummary {
    pub client_id: u32,
    pub arch: Arch,
    pub class_space: Vec<usize>,
    pub shard_classes: Vec<usize>,
    pub train_size: usize,
    pub test_size: usize,
    pub num_params: usize,
}

impl ClientSummary {
    pub fn of(c: &ClientState) -> Self {
        ClientSummary {
            client_id: c.client_id,
            arch: c.model.arch,
            class_space: c.model.class_space.clone(),
            shard_classes: c.shard.class_space.clone(),
            train_size: c.shard.train.len(),
            test_size: c.shard.test.len(),
            num_params: c.model.num_params(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientAccuracy {
    pub client_id: u32,
    pub accuracy: f64,
    pub accuracy_prototype: f64,
    pub accuracy_decision: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Totals {
    pub rounds: usize,
    pub params_up: u64,
    pub params_down: u64,
    pub params_communicated: u64,
    pub final_mean_accuracy: f64,
    pub final_std_accuracy: f64,
    pub final_mean_accuracy_prototype: f64,
    pub final_mean_accuracy_decision: f64,
    pub final_mean_loss: f64,
    pub final_mean_regularizer: f64,
}

/// Everything a run produced, with the configuration that reproduces it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    /// `config` in the flat file format; feed it back to re-run.
    pub config_text: String,
    pub method: Method,
    pub lambda: f64,
    pub clients: Vec<ClientSummary>,
    pub rounds: Vec<RoundRecord>,
    pub final_accuracies: Vec<ClientAccuracy>,
    pub totals: Totals,
}

impl ExperimentReport {
    pub fn new(
        config: &ExperimentConfig,
        clients: Vec<ClientSummary>,
        rounds: Vec<RoundRecord>,
    ) -> Self {
        let last = rounds.last();
        let final_accuracies = last
            .map(|r| {
                r.clients
                    .iter()
                    .map(|c| ClientAccuracy {
                        client_id: c.client_id,
                        accuracy: c.accuracy,
                        accuracy_prototype: c.accuracy_prototype,
                        accuracy_decision: c.accuracy_decision,
                    })
                    .collect()
            })
            .unwrap_or_default();
        let sum = |f: fn(&RoundRecord) -> u64| rounds.iter().map(f).sum();
        let last_or = |f: fn(&RoundRecord) -> f64| last.map_or(0.0, f);
        let totals = Totals {
            rounds: last.map_or(0, |r| r.round),
            params_up: sum(|r| r.params_up),
            params_down: sum(|r| r.params_down),
            params_communicated: sum(|r| r.params_communicated),
            final_mean_accuracy: last_or(|r| r.mean_accuracy),
            final_std_accuracy: last_or(|r| r.std_accuracy),
            final_mean_accuracy_prototype: last_or(|r| r.mean_accuracy_prototype),
            final_mean_accuracy_decision: last_or(|r| r.mean_accuracy_decision),
            final_mean_loss: last_or(|r| r.mean_loss),
            final_mean_regularizer: last_or(|r| r.mean_regularizer),
        };
        ExperimentReport {
            config: config.clone(),
            config_text: config.to_kv_string(),
            method: config.method,
            lambda: config.lambda.first().copied().unwrap_or(0.0),
            clients,
            rounds,
            final_accuracies,
            totals,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// `round,mean_acc,std_acc,mean_loss,params_comm`, one line per round.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("round,mean_acc,std_acc,mean_loss,params_comm\n");
        for r in &self.rounds {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.round, r.mean_accuracy, r.std_accuracy, r.mean_loss, r.params_communicated
            );
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub mean_regularizer: f64,
    pub mean_loss: f64,
}

impl SweepRow {
    pub fn of(lambda: f64, report: &ExperimentReport) -> Self {
        SweepRow {
            lambda,
            mean_accuracy: report.totals.final_mean_accuracy,
            std_accuracy: report.totals.final_std_accuracy,
            mean_regularizer: report.totals.final_mean_regularizer,
            mean_loss: report.totals.final_mean_loss,
        }
    }
}

/// λ against final accuracy and regularizer, one full run per λ.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub config: ExperimentConfig,
    pub config_text: String,
    pub rows: Vec<SweepRow>,
    pub runs: Vec<ExperimentReport>,
}

impl SweepReport {
    pub fn new(
        config: &ExperimentConfig,
        rows: Vec<SweepRow>,
        runs: Vec<ExperimentReport>,
    ) -> Self {
        SweepReport {
            config: config.clone(),
            config_text: config.to_kv_string(),
            rows,
            runs,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// `lambda,mean_acc,std_acc,mean_reg,mean_loss`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("lambda,mean_acc,std_acc,mean_reg,mean_loss\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.lambda, r.mean_accuracy, r.std_accuracy, r.mean_regularizer, r.mean_loss
            );
        }
        out
    }
}
