//! `fedproto` command-line driver.

use std::fs;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use fedproto::data::partition;
use fedproto::orchestrator::{
    build_clients, build_dataset, comm_table, run_experiment, run_sweep, TrainingConfig,
};
use fedproto::theory::run_theory_check;
use fedproto::transport::{
    assemble_report, run_remote_client, serve, ClientReport, ServeConfig, ServerReport,
};
use fedproto::{Error, ExperimentConfig, Method};

#[derive(Parser)]
#[command(name = "fedproto", version, about = "Federated prototype learning experiments")]
struct Cli {
    /// Log progress (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat `key = value` config file, or a JSON artifact whose config echo
    /// should be re-run.
    config: PathBuf,
    /// Override one key after the file is read; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment, or a λ sweep when `lambda` lists several values.
    Run(ConfigArgs),
    /// Run a λ sweep and emit the (λ, accuracy, L_R) table.
    Sweep(ConfigArgs),
    /// Per-round parameter counts for fedproto, fedavg and local.
    BenchComm(ConfigArgs),
    /// Instrumented fedproto run checked against the convergence bounds.
    TheoryCheck(ConfigArgs),
    /// Serve a networked fedproto run on `bind`.
    Serve(ConfigArgs),
    /// Join a networked run at `server` as `client_id`.
    Client(ConfigArgs),
    /// Join a server report and client reports into an experiment report.
    Assemble {
        #[command(flatten)]
        args: ConfigArgs,
        /// JSON written by `serve`.
        #[arg(long)]
        server: PathBuf,
        /// JSON written by `client`; one per client.
        #[arg(long = "client", required = true)]
        clients: Vec<PathBuf>,
    },
    /// Write the partition as sample indices per client.
    PartitionDump(ConfigArgs),
}

/// Failure class, mapped to the process exit code.
#[derive(Debug)]
enum Failure {
    Validation(String),
    Runtime(String),
    Network(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Validation(_) => 2,
            Failure::Runtime(_) => 3,
            Failure::Network(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Validation(m) | Failure::Runtime(m) | Failure::Network(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let m = e.to_string();
        match e {
            Error::Config { .. } | Error::Input(_) | Error::Format { .. } => Failure::Validation(m),
            Error::Network(_) | Error::Decode(_) => Failure::Network(m),
            _ => Failure::Runtime(m),
        }
    }
}

type Outcome<T = ()> = std::result::Result<T, Failure>;

fn read_text(path: &Path) -> Outcome<String> {
    fs::read_to_string(path)
        .map_err(|e| Failure::Validation(format!("cannot read {}: {e}", path.display())))
}

/// The config echo of a JSON artifact, or the file itself.
fn config_text(path: &Path) -> Outcome<String> {
    let text = read_text(path)?;
    if !text.trim_start().starts_with('{') {
        return Ok(text);
    }
    let v: Value = serde_json::from_str(&text)
        .map_err(|e| Failure::Validation(format!("{}: {e}", path.display())))?;
    v.get("config_text")
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| {
            Failure::Validation(format!("{} carries no config_text", path.display()))
        })
}

fn load(args: &ConfigArgs) -> Outcome<ExperimentConfig> {
    let mut cfg = ExperimentConfig::from_kv_str(&config_text(&args.config)?)?;
    for kv in &args.overrides {
        let (key, value) = kv
            .split_once('=')
            .ok_or_else(|| Failure::Validation(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(key.trim(), value.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write(path: &Path, contents: &str) -> Outcome {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)
            .map_err(|e| Failure::Runtime(format!("cannot create {}: {e}", dir.display())))?;
    }
    fs::write(path, contents)
        .map_err(|e| Failure::Runtime(format!("cannot write {}: {e}", path.display())))?;
    log::info!("wrote {}", path.display());
    Ok(())
}

/// Writes JSON to `output_json`, or stdout when unset, and CSV to
/// `output_csv` when both are given.
fn emit(cfg: &ExperimentConfig, json: String, csv: Option<String>) -> Outcome {
    match &cfg.output_json {
        Some(p) => write(p, &json)?,
        None => print!("{json}"),
    }
    if let (Some(p), Some(csv)) = (&cfg.output_csv, csv) {
        write(p, &csv)?;
    }
    Ok(())
}

fn pretty(v: &Value) -> Outcome<String> {
    serde_json::to_string_pretty(v)
        .map(|s| s + "\n")
        .map_err(|e| Failure::Runtime(e.to_string()))
}

/// Wraps a payload with the config echo every artifact carries.
fn with_echo(cfg: &ExperimentConfig, key: &str, payload: Value) -> Value {
    json!({
        "config": cfg,
        "config_text": cfg.to_kv_string(),
        key: payload,
    })
}

fn to_value<T: serde::Serialize>(v: &T) -> Outcome<Value> {
    serde_json::to_value(v).map_err(|e| Failure::Runtime(e.to_string()))
}

fn sweep(cfg: &ExperimentConfig) -> Outcome {
    let report = run_sweep(cfg)?;
    for r in &report.rows {
        eprintln!(
            "λ = {:<6} accuracy {:.4} ± {:.4}  L_R {:.6}",
            r.lambda, r.mean_accuracy, r.std_accuracy, r.mean_regularizer
        );
    }
    emit(cfg, report.to_json()?, Some(report.to_csv()))
}

fn run(cfg: &ExperimentConfig) -> Outcome {
    if cfg.lambda.len() > 1 {
        return sweep(cfg);
    }
    let report = run_experiment(cfg)?;
    let t = &report.totals;
    eprintln!(
        "{} after {} rounds: accuracy {:.4} ± {:.4}, {} parameters communicated",
        report.method, t.rounds, t.final_mean_accuracy, t.final_std_accuracy, t.params_communicated
    );
    emit(cfg, report.to_json()?, Some(report.to_csv()))
}

fn bench_comm(cfg: &ExperimentConfig) -> Outcome {
    let rows = comm_table(cfg)?;
    eprintln!("{:<10} {:>14} {:>14} {:>16}", "method", "up", "down", "per round");
    let mut csv = String::from("method,params_up,params_down,params_per_round\n");
    for r in &rows {
        eprintln!(
            "{:<10} {:>14} {:>14} {:>16}",
            r.method.to_string(),
            r.params_up,
            r.params_down,
            r.params_per_round
        );
        csv += &format!(
            "{},{},{},{}\n",
            r.method, r.params_up, r.params_down, r.params_per_round
        );
    }
    let json = pretty(&with_echo(cfg, "rows", to_value(&rows)?))?;
    emit(cfg, json, Some(csv))
}

fn theory_check(cfg: &ExperimentConfig) -> Outcome {
    let report = run_theory_check(cfg)?;
    eprintln!(
        "{} rounds: bound satisfied {}, monotone {}, round count suffices {}, \
         (η, λ) possibly outside the bounds {}",
        report.rounds_run,
        report.all_satisfied,
        report.monotone,
        report.round_count_satisfied,
        report.violations_possible
    );
    emit(cfg, report.to_json()?, None)
}

fn require_fedproto(cfg: &ExperimentConfig) -> Outcome {
    if cfg.method != Method::FedProto {
        return Err(Failure::Validation(
            "config key `method`: networked runs support fedproto only".into(),
        ));
    }
    Ok(())
}

fn serve_cmd(cfg: &ExperimentConfig) -> Outcome {
    require_fedproto(cfg)?;
    let serve_cfg = ServeConfig::from_config(cfg)?;
    let listener = TcpListener::bind(cfg.bind.as_str())
        .map_err(|e| Failure::Network(format!("cannot bind {}: {e}", cfg.bind)))?;
    let addr = listener
        .local_addr()
        .map_err(|e| Failure::Network(e.to_string()))?;
    eprintln!("listening on {addr}");
    let report = serve(listener, &serve_cfg)?;
    eprintln!(
        "served {} rounds to {} clients",
        cfg.rounds,
        report.clients.len()
    );
    emit(cfg, pretty(&with_echo(cfg, "server", to_value(&report)?))?, None)
}

fn client(cfg: &ExperimentConfig) -> Outcome {
    require_fedproto(cfg)?;
    let id = cfg
        .client_id
        .ok_or_else(|| Failure::Validation("config key `client_id`: required by `client`".into()))?;
    let ds = build_dataset(cfg)?;
    let mut state = build_clients(cfg, &ds)?
        .into_iter()
        .find(|c| c.client_id == id)
        .ok_or_else(|| {
            Failure::Validation(format!(
                "config key `client_id`: no client {id} among {}",
                cfg.clients
            ))
        })?;
    let training = TrainingConfig::from_config(cfg)?;
    let report = run_remote_client(cfg.server.as_str(), &mut state, &training, cfg.rounds)?;
    emit(cfg, pretty(&with_echo(cfg, "client", to_value(&report)?))?, None)
}

fn payload<T: serde::de::DeserializeOwned>(path: &Path, key: &str) -> Outcome<T> {
    let text = read_text(path)?;
    let mut v: Value = serde_json::from_str(&text)
        .map_err(|e| Failure::Validation(format!("{}: {e}", path.display())))?;
    let inner = v
        .get_mut(key)
        .map(Value::take)
        .ok_or_else(|| Failure::Validation(format!("{} has no `{key}` entry", path.display())))?;
    serde_json::from_value(inner)
        .map_err(|e| Failure::Validation(format!("{}: {e}", path.display())))
}

fn assemble(cfg: &ExperimentConfig, server: &Path, clients: &[PathBuf]) -> Outcome {
    let server: ServerReport = payload(server, "server")?;
    let clients = clients
        .iter()
        .map(|p| payload::<ClientReport>(p, "client"))
        .collect::<Outcome<Vec<_>>>()?;
    let report = assemble_report(cfg, &server, clients)?;
    emit(cfg, report.to_json()?, Some(report.to_csv()))
}

fn partition_dump(cfg: &ExperimentConfig) -> Outcome {
    let ds = build_dataset(cfg)?;
    let shards = partition(&ds, &cfg.partition_config())?;
    let dumps: Vec<_> = shards.iter().map(|s| s.dump()).collect();
    emit(cfg, pretty(&with_echo(cfg, "shards", to_value(&dumps)?))?, None)
}

fn dispatch(command: &Command) -> Outcome {
    match command {
        Command::Run(a) => run(&load(a)?),
        Command::Sweep(a) => sweep(&load(a)?),
        Command::BenchComm(a) => bench_comm(&load(a)?),
        Command::TheoryCheck(a) => theory_check(&load(a)?),
        Command::Serve(a) => serve_cmd(&load(a)?),
        Command::Client(a) => client(&load(a)?),
        Command::Assemble {
            args,
            server,
            clients,
        } => assemble(&load(args)?, server, clients),
        Command::PartitionDump(a) => partition_dump(&load(a)?),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match dispatch(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
