use fedproto::aggregation::aggregate_prototypes;
use fedproto::model::compute_local_prototypes;
use fedproto::orchestrator::{
    build_clients, build_dataset, run_experiment, Experiment, TrainingConfig,
};
use fedproto::transport::quantize;
use fedproto::{Error, ExperimentConfig, Method};

fn small() -> ExperimentConfig {
    ExperimentConfig {
        clients: 6,
        k_avg: 30.0,
        rounds: 4,
        ..Default::default()
    }
}

#[test]
fn same_config_same_report() {
    let a = run_experiment(&small()).unwrap().to_json().unwrap();
    let b = run_experiment(&small()).unwrap().to_json().unwrap();
    assert_eq!(a, b);
}

#[test]
fn parallel_and_sequential_agree() {
    for method in [Method::FedProto, Method::FedAvg, Method::Local] {
        let cfg = ExperimentConfig {
            method,
            mlp_fraction: if method == Method::FedAvg { 1.0 } else { 0.5 },
            ..small()
        };
        let par = run_experiment(&cfg).unwrap();
        let seq = run_experiment(&ExperimentConfig {
            parallel: false,
            ..cfg
        })
        .unwrap();
        assert_eq!(par.rounds, seq.rounds, "{method}");
    }
}

#[test]
fn zero_rounds_reports_untrained_evaluation() {
    for method in [Method::FedProto, Method::FedAvg, Method::Local] {
        let r = run_experiment(&ExperimentConfig {
            method,
            rounds: 0,
            ..small()
        })
        .unwrap();
        assert_eq!(r.rounds.len(), 1);
        assert_eq!(r.rounds[0].round, 0);
        assert!(r.rounds[0].clients.iter().all(|c| c.steps.is_empty()));
    }
}

#[test]
fn local_never_communicates() {
    let r = run_experiment(&ExperimentConfig {
        method: Method::Local,
        ..small()
    })
    .unwrap();
    assert!(r.rounds.iter().all(|x| x.params_communicated == 0));
    assert_eq!(r.totals.params_communicated, 0);
}

#[test]
fn round_counter_advances_by_one() {
    let mut exp = Experiment::new(small()).unwrap();
    assert_eq!(exp.rounds_completed(), 0);
    assert_eq!(exp.run_round().unwrap().round, 1);
    assert_eq!(exp.rounds_completed(), 1);
    assert_eq!(exp.server().round, 1);
}

#[test]
fn fedavg_rejects_mixed_architectures() {
    let err = run_experiment(&ExperimentConfig {
        method: Method::FedAvg,
        mlp_fraction: 0.5,
        ..small()
    })
    .unwrap_err();
    assert!(matches!(err, Error::Heterogeneity(_)), "{err}");
}

#[test]
fn fedproto_accounting_per_round() {
    let cfg = ExperimentConfig {
        stdev_n: 0.0,
        ..small()
    };
    let r = run_experiment(&cfg).unwrap();
    let per_direction = (cfg.clients * 3 * cfg.embed_dim) as u64;
    assert_eq!(r.rounds[0].params_up, per_direction);
    assert_eq!(r.rounds[0].params_down, 0);
    for x in &r.rounds[1..] {
        assert_eq!(x.params_up, per_direction);
        assert_eq!(x.params_down, per_direction);
    }
}

#[test]
fn recorded_loss_is_sum_of_parts() {
    let cfg = ExperimentConfig {
        lambda: vec![0.7],
        ..small()
    };
    let r = run_experiment(&cfg).unwrap();
    for c in r.rounds.iter().flat_map(|x| &x.clients) {
        let l = c.loss;
        assert!((l.total - (l.supervised + 0.7 * l.regularizer)).abs() < 1e-9);
        for s in &c.steps {
            let l = s.loss;
            assert!((l.total - (l.supervised + 0.7 * l.regularizer)).abs() < 1e-9);
        }
    }
}

#[test]
fn references_stay_inside_class_space() {
    let mut exp = Experiment::new(small()).unwrap();
    exp.run().unwrap();
    for c in exp.clients() {
        let r = c.reference.as_ref().unwrap();
        assert_eq!(r.classes(), c.model.class_space);
    }
}

#[test]
fn frozen_identical_clients_aggregate_initial_prototypes() {
    let cfg = ExperimentConfig {
        n_avg: 10.0,
        stdev_n: 0.0,
        lr: 0.0,
        rounds: 1,
        ..small()
    };
    let ds = build_dataset(&cfg).unwrap();
    let mut clients = build_clients(&cfg, &ds).unwrap();
    let shared = clients[0].model.params.clone();
    for c in &mut clients {
        c.model.params = shared.clone();
    }
    let uploads: Vec<_> = clients
        .iter()
        .map(|c| {
            let p = compute_local_prototypes(&c.model, &c.shard.train_refs()).unwrap();
            (c.client_id, quantize(&p).unwrap())
        })
        .collect();
    let expected = aggregate_prototypes(&uploads, &cfg.policy()).unwrap();
    let training = TrainingConfig::from_config(&cfg).unwrap();
    let mut exp = Experiment::from_clients(cfg, training, clients).unwrap();
    exp.run_round().unwrap();
    assert_eq!(exp.server().global_prototypes, expected);
}

#[test]
fn separable_blobs_are_learned() {
    let r = run_experiment(&ExperimentConfig {
        cluster_spread: 0.02,
        rounds: 20,
        ..small()
    })
    .unwrap();
    assert!(
        (r.totals.final_mean_accuracy - 1.0).abs() <= 0.02,
        "{}",
        r.totals.final_mean_accuracy
    );
}

#[test]
fn untrained_models_sit_near_chance() {
    let cfg = ExperimentConfig {
        method: Method::Local,
        clients: 40,
        stdev_n: 0.0,
        rounds: 0,
        ..Default::default()
    };
    let r = run_experiment(&cfg).unwrap();
    let tested: usize = r.clients.iter().map(|c| c.test_size).sum();
    let p = 1.0 / 3.0;
    let sigma = (p * (1.0 - p) / tested as f64).sqrt();
    let acc = r.rounds[0].mean_accuracy;
    // Each client is one random model, so allow for the between-model spread.
    let spread = r.rounds[0].std_accuracy / (cfg.clients as f64).sqrt();
    assert!(
        (acc - p).abs() <= 3.0 * (sigma + spread),
        "{acc} vs {p} (σ {sigma}, spread {spread})"
    );
}

#[test]
fn invalid_config_fails_before_work() {
    let err = run_experiment(&ExperimentConfig {
        embed_dim: 0,
        ..small()
    })
    .unwrap_err();
    assert!(matches!(err, Error::Config { .. }), "{err}");
}
