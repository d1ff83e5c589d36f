#![allow(dead_code)]

use std::io::Write;
use std::net::TcpListener;
use std::thread;

use fedproto::orchestrator::{build_clients, build_dataset, TrainingConfig};
use fedproto::transport::{assemble_report, run_remote_client, serve, ServeConfig};
use fedproto::{ExperimentConfig, ExperimentReport, RoundRecord};

/// Writes straight to the process stderr so the line survives test capture.
pub fn report_line(line: &str) {
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "{line}");
}

/// Runs `cfg` as one server and one client thread per shard over loopback TCP.
pub fn socket_run(cfg: &ExperimentConfig) -> ExperimentReport {
    let ds = build_dataset(cfg).unwrap();
    let clients = build_clients(cfg, &ds).unwrap();
    let training = TrainingConfig::from_config(cfg).unwrap();
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let serve_cfg = ServeConfig::from_config(cfg).unwrap();
    let server = thread::spawn(move || serve(listener, &serve_cfg));
    let rounds = cfg.rounds;
    let handles: Vec<_> = clients
        .into_iter()
        .map(|mut c| thread::spawn(move || run_remote_client(addr, &mut c, &training, rounds)))
        .collect();
    let reports: Vec<_> = handles
        .into_iter()
        .map(|h| h.join().unwrap().unwrap())
        .collect();
    let server = server.join().unwrap().unwrap();
    assemble_report(cfg, &server, reports).unwrap()
}

/// Round records with timing stripped.
pub fn metrics(report: &ExperimentReport) -> Vec<RoundRecord> {
    report
        .rounds
        .iter()
        .cloned()
        .map(|mut r| {
            r.wall_clock_ms = None;
            r
        })
        .collect()
}
