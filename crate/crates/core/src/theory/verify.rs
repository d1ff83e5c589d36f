//! Checking recorded runs against the one-round bound, the admissible
//! `(η, λ)` region and the round count for a target `ε`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::probe::{estimate_constants, ClientObjective, Objective, Probe};
use super::{
    eta_bound, lambda_bound, one_round_terms, rounds_for_epsilon, BoundTerms, TheoryConstants,
};
use crate::config::{ExperimentConfig, Method};
use crate::model::PrototypeSet;
use crate::orchestrator::{ClientState, Experiment, RoundRecord};
use crate::rng::{derive_seed, streams};
use crate::{Error, Result};

/// Slack for floating-point noise when comparing a loss change to its bound.
pub const BOUND_TOLERANCE: f64 = 1e-9;

/// Slack for the monotone-decrease check.
pub const MONOTONE_TOLERANCE: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundTrace {
    pub round: usize,
    /// Loss right after the download, before the first local step.
    pub loss_start: f64,
    /// Loss after the local steps and the next download.
    pub loss_end: f64,
    /// `‖∇L‖²` at every local step.
    pub grad_sq_norms: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientTrace {
    pub client_id: u32,
    pub rounds: Vec<RoundTrace>,
}

impl ClientTrace {
    /// Extracts one client's trace from a run history, skipping round 0 and
    /// rounds in which the client failed.
    pub fn from_history(client_id: u32, history: &[RoundRecord]) -> Self {
        let rounds = history
            .iter()
            .filter_map(|r| {
                let c = r.clients.iter().find(|c| c.client_id == client_id)?;
                let start = c.loss_start?;
                Some(RoundTrace {
                    round: r.round,
                    loss_start: start.total,
                    loss_end: c.loss.total,
                    grad_sq_norms: c.steps.iter().map(|s| s.grad_norm * s.grad_norm).collect(),
                })
            })
            .collect();
        ClientTrace { client_id, rounds }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundBound {
    pub round: usize,
    pub observed: f64,
    pub predicted: f64,
    pub terms: BoundTerms,
    /// Smallest step-size limit over the round's local steps.
    pub eta_max: f64,
    pub lambda_max: f64,
    pub eta_inside: bool,
    pub lambda_inside: bool,
    pub satisfied: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundCountCheck {
    pub epsilon: f64,
    /// Initial loss; the loss is bounded below by 0.
    pub delta: f64,
    pub rounds_formula: Option<f64>,
    pub rounds_needed: Option<usize>,
    pub rounds_available: usize,
    /// Mean `‖∇L‖²` over the first `rounds_needed` rounds.
    pub empirical_avg_grad_sq: Option<f64>,
    pub satisfied: bool,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub client_id: u32,
    pub constants: TheoryConstants,
    pub eta: f64,
    pub lambda: f64,
    pub local_steps: usize,
    pub rounds: Vec<RoundBound>,
    pub violations: usize,
    /// Set when `η` or `λ` left the admissible region in some round, so the
    /// bound no longer guarantees anything.
    pub violations_possible: bool,
    pub all_satisfied: bool,
    pub monotone: bool,
    pub avg_grad_sq: f64,
    pub epsilon: f64,
    pub epsilon_satisfied: bool,
    pub round_count: RoundCountCheck,
}

fn mean_grad_sq(rounds: &[RoundTrace]) -> f64 {
    let (sum, n) = rounds
        .iter()
        .flat_map(|r| &r.grad_sq_norms)
        .fold((0.0, 0usize), |(s, n), g| (s + g, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn round_count(
    trace: &ClientTrace,
    c: &TheoryConstants,
    eta: f64,
    lambda: f64,
    steps: usize,
    eps: f64,
) -> RoundCountCheck {
    let delta = trace.rounds.first().map_or(0.0, |r| r.loss_start.max(0.0));
    let mut check = RoundCountCheck {
        epsilon: eps,
        delta,
        rounds_formula: None,
        rounds_needed: None,
        rounds_available: trace.rounds.len(),
        empirical_avg_grad_sq: None,
        satisfied: false,
        error: None,
    };
    match rounds_for_epsilon(delta, eps, c, eta, lambda, steps) {
        Ok(t) => {
            let needed = t.ceil() as usize;
            check.rounds_formula = Some(t);
            check.rounds_needed = Some(needed);
            if needed == 0 {
                check.satisfied = true;
            } else if needed <= trace.rounds.len() {
                let avg = mean_grad_sq(&trace.rounds[..needed]);
                check.empirical_avg_grad_sq = Some(avg);
                check.satisfied = avg < eps;
            } else {
                check.error = Some(format!(
                    "{needed} rounds needed, only {} recorded",
                    trace.rounds.len()
                ));
            }
        }
        Err(e) => check.error = Some(e.to_string()),
    }
    check
}

/// Compares every round of `trace` with the one-round bound and the run's
/// average squared gradient norm with `eps`.
pub fn verify_run(
    trace: &ClientTrace,
    c: &TheoryConstants,
    eta: f64,
    lambda: f64,
    steps: usize,
    eps: f64,
) -> BoundReport {
    let rounds: Vec<RoundBound> = trace
        .rounds
        .iter()
        .map(|r| {
            let terms = one_round_terms(c, &r.grad_sq_norms, eta, lambda, steps);
            let predicted = terms.total();
            let observed = r.loss_end - r.loss_start;
            let partial: Vec<f64> = r
                .grad_sq_norms
                .iter()
                .scan(0.0, |acc, g| {
                    *acc += g;
                    Some(*acc)
                })
                .collect();
            let eta_max = eta_bound(&partial, lambda, c, steps)
                .ok()
                .and_then(|b| b.into_iter().reduce(f64::min))
                .unwrap_or(0.0);
            let lambda_max = r
                .grad_sq_norms
                .first()
                .and_then(|g| lambda_bound(*g, c, steps).ok())
                .unwrap_or(0.0);
            RoundBound {
                round: r.round,
                observed,
                predicted,
                terms,
                eta_max,
                lambda_max,
                eta_inside: eta < eta_max,
                lambda_inside: lambda < lambda_max,
                satisfied: observed <= predicted + BOUND_TOLERANCE,
            }
        })
        .collect();
    let violations = rounds.iter().filter(|r| !r.satisfied).count();
    let avg_grad_sq = mean_grad_sq(&trace.rounds);
    BoundReport {
        client_id: trace.client_id,
        constants: *c,
        eta,
        lambda,
        local_steps: steps,
        violations,
        violations_possible: rounds.iter().any(|r| !r.eta_inside || !r.lambda_inside),
        all_satisfied: violations == 0,
        monotone: trace
            .rounds
            .iter()
            .all(|r| r.loss_end <= r.loss_start + MONOTONE_TOLERANCE),
        avg_grad_sq,
        epsilon: eps,
        epsilon_satisfied: avg_grad_sq < eps,
        round_count: round_count(trace, c, eta, lambda, steps, eps),
        rounds,
    }
}

/// Output of [`run_theory_check`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoryCheckReport {
    pub config: ExperimentConfig,
    pub config_text: String,
    pub eta: f64,
    pub lambda: f64,
    pub rounds_run: usize,
    pub clients: Vec<BoundReport>,
    pub all_satisfied: bool,
    pub violations_possible: bool,
    pub monotone: bool,
    pub round_count_satisfied: bool,
}

impl TheoryCheckReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

fn steps_per_round(c: &ClientState, cfg: &ExperimentConfig) -> usize {
    let n = c.shard.train.len();
    let batches = match cfg.batch_size {
        Some(b) if b < n => n.div_ceil(b),
        _ => 1,
    };
    cfg.local_epochs * batches
}

fn objective<'a>(
    c: &'a ClientState,
    reference: Option<PrototypeSet>,
    cfg: &ExperimentConfig,
) -> Result<ClientObjective<'a>> {
    ClientObjective::new(
        &c.model,
        c.shard.train_refs(),
        reference,
        cfg.loss_config()?,
        cfg.batch_size,
    )
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Constants for one client over rounds `from..` of the history, probing a
/// ball of the round's path length around each round's start and the
/// consecutive iterates themselves.
fn trajectory_constants(
    client: &ClientState,
    index: usize,
    history: &[RoundRecord],
    references: &[Vec<Option<PrototypeSet>>],
    from: usize,
    cfg: &ExperimentConfig,
) -> Result<TheoryConstants> {
    let mut c = TheoryConstants::default();
    for r in history.iter().filter(|r| r.round >= from && r.round > 0) {
        let rec = &r.clients[index];
        if rec.iterates.len() < 2 {
            continue;
        }
        let obj = objective(client, references[r.round - 1][index].clone(), cfg)?;
        let path: f64 = rec.steps.iter().map(|s| cfg.lr * s.grad_norm).sum();
        let probes = [Probe {
            center: rec.iterates[0].clone(),
            radius: path,
        }];
        let mut pairs: Vec<(Vec<f64>, Vec<f64>)> = rec
            .iterates
            .windows(2)
            .map(|w| (w[0].clone(), w[1].clone()))
            .collect();
        pairs.push((
            rec.iterates[0].clone(),
            rec.iterates[rec.iterates.len() - 1].clone(),
        ));
        let seed = derive_seed(
            cfg.seed,
            &[streams::PROBE, u64::from(client.client_id), r.round as u64],
        );
        c = c.max(estimate_constants(
            &obj,
            &probes,
            &pairs,
            cfg.theory_probes,
            seed,
        )?);
    }
    Ok(c)
}

/// Runs rounds until `until`, recording each client's reference beforehand.
fn advance(
    exp: &mut Experiment,
    references: &mut Vec<Vec<Option<PrototypeSet>>>,
    until: usize,
) -> Result<()> {
    while exp.rounds_completed() < until {
        references.push(exp.clients().iter().map(|c| c.reference.clone()).collect());
        exp.run_round()?;
    }
    Ok(())
}

/// Runs the configured FedProto experiment with instrumentation and checks
/// every client against the one-round bound, the admissible `(η, λ)` region
/// and the round count for `ε` (twice the run's mean squared gradient norm
/// unless `epsilon` is configured).
///
/// Refuses to start when `λ` already exceeds its admissible bound at the
/// initial point.
pub fn run_theory_check(cfg: &ExperimentConfig) -> Result<TheoryCheckReport> {
    cfg.validate()?;
    if cfg.method != Method::FedProto {
        return Err(Error::config("method", "bound verification runs fedproto"));
    }
    if cfg.momentum != 0.0 {
        return Err(Error::config(
            "momentum",
            "bound verification assumes plain SGD; set momentum = 0",
        ));
    }
    let lambda = cfg.single_lambda()?;
    let eta = cfg.lr;
    let mut exp = Experiment::new(cfg.clone())?;
    exp.training_mut().capture_iterates = true;

    for c in exp.clients() {
        let obj = objective(c, c.reference.clone(), cfg)?;
        let center = c.model.params.flatten();
        let g = obj.gradient(&center)?;
        let steps = steps_per_round(c, cfg);
        let probes = [Probe {
            center,
            radius: steps as f64 * eta * norm(&g),
        }];
        let seed = derive_seed(cfg.seed, &[streams::PROBE, u64::from(c.client_id)]);
        let consts = estimate_constants(&obj, &probes, &[], cfg.theory_probes, seed)?;
        let bound = lambda_bound(norm(&g).powi(2), &consts, steps)?;
        if lambda >= bound {
            return Err(Error::input(format!(
                "λ = {lambda} violates Corollary 1: client {} admits only \
                 λ < ‖∇L‖²/(L2·E·G) = {bound:.6e}; run refused",
                c.client_id
            )));
        }
    }

    let mut references: Vec<Vec<Option<PrototypeSet>>> = Vec::new();
    advance(&mut exp, &mut references, cfg.rounds)?;

    let n = exp.clients().len();
    let estimate = |exp: &Experiment, refs: &[Vec<Option<PrototypeSet>>], from: usize| {
        (0..n)
            .into_par_iter()
            .map(|i| trajectory_constants(&exp.clients()[i], i, exp.history(), refs, from, cfg))
            .collect::<Result<Vec<_>>>()
    };
    // The constants are assumptions on every local objective at once, so each
    // client is checked against the maximum over all of them.
    let pooled = |v: Vec<TheoryConstants>| {
        let c = v
            .into_iter()
            .fold(TheoryConstants::default(), TheoryConstants::max);
        vec![c; n]
    };
    let mut constants = pooled(estimate(&exp, &references, 1)?);
    let ids: Vec<u32> = exp.clients().iter().map(|c| c.client_id).collect();
    let steps: Vec<usize> = exp
        .clients()
        .iter()
        .map(|c| steps_per_round(c, cfg))
        .collect();
    let epsilons: Vec<f64> = ids
        .iter()
        .map(|&id| {
            cfg.epsilon.unwrap_or_else(|| {
                2.0 * mean_grad_sq(&ClientTrace::from_history(id, exp.history()).rounds)
            })
        })
        .collect();

    // Extend the run until every client has the rounds its bound asks for.
    let cap = (10 * cfg.rounds).max(100);
    loop {
        let needed = (0..n)
            .filter_map(|i| {
                let trace = ClientTrace::from_history(ids[i], exp.history());
                let delta = trace.rounds.first()?.loss_start.max(0.0);
                rounds_for_epsilon(delta, epsilons[i], &constants[i], eta, lambda, steps[i])
                    .ok()
                    .map(|t| t.ceil() as usize)
            })
            .max()
            .unwrap_or(0);
        let done = exp.rounds_completed();
        if needed <= done || done >= cap {
            break;
        }
        let target = needed.min(cap);
        log::info!("extending the run from {done} to {target} rounds for the ε check");
        advance(&mut exp, &mut references, target)?;
        let mut extra = estimate(&exp, &references, done + 1)?;
        extra.push(constants[0]);
        constants = pooled(extra);
    }

    let clients: Vec<BoundReport> = (0..n)
        .map(|i| {
            let trace = ClientTrace::from_history(ids[i], exp.history());
            verify_run(&trace, &constants[i], eta, lambda, steps[i], epsilons[i])
        })
        .collect();
    Ok(TheoryCheckReport {
        config: cfg.clone(),
        config_text: cfg.to_kv_string(),
        eta,
        lambda,
        rounds_run: exp.rounds_completed(),
        all_satisfied: clients.iter().all(|c| c.all_satisfied),
        violations_possible: clients.iter().any(|c| c.violations_possible),
        monotone: clients.iter().all(|c| c.monotone),
        round_count_satisfied: clients.iter().all(|c| c.round_count.satisfied),
        clients,
    })
}
