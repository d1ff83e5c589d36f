use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter};
use std::net::{Shutdown, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::codec::{encode, read_frame, write_frame, MessageKind, WireMessage, REJECT_ROUND};
use crate::aggregation::AggregationPolicy;
use crate::config::ExperimentConfig;
use crate::model::PrototypeSet;
use crate::orchestrator::{
    ClientRoundRecord, ClientState, ClientSummary, EvalMode, ExperimentReport, PendingRound,
    RoundRecord, ServerState, TrainingConfig,
};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ServeConfig {
    pub expected_clients: usize,
    pub rounds: usize,
    pub policy: AggregationPolicy,
    /// Upload deadline per round; also bounds the registration wait.
    pub round_timeout: Duration,
}

impl ServeConfig {
    pub fn from_config(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(ServeConfig {
            expected_clients: cfg.expected_clients(),
            rounds: cfg.rounds,
            policy: cfg.policy(),
            round_timeout: Duration::from_millis(cfg.round_timeout_ms),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegisteredClient {
    pub client_id: u32,
    pub class_space: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ServerRoundRecord {
    pub round: usize,
    pub params_up: u64,
    pub params_down: u64,
    pub participants: Vec<u32>,
    pub excluded: Vec<u32>,
    /// SHA-256 of the encoded global prototype set after the barrier.
    pub global_digest: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ServerReport {
    pub clients: Vec<RegisteredClient>,
    pub rounds: Vec<ServerRoundRecord>,
    pub final_global: PrototypeSet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientReport {
    pub client_id: u32,
    pub summary: ClientSummary,
    /// One record per round, starting at round 0.
    pub records: Vec<ClientRoundRecord>,
}

enum Event {
    Connected(usize, TcpStream),
    Frame(usize, WireMessage),
    Closed(usize, Option<String>),
}

fn spawn_reader(conn: usize, stream: TcpStream, tx: Sender<Event>) {
    thread::spawn(move || {
        let mut reader = BufReader::new(stream);
        loop {
            let event = match read_frame(&mut reader) {
                Ok(Some(msg)) => Event::Frame(conn, msg),
                Ok(None) => Event::Closed(conn, None),
                Err(e) => Event::Closed(conn, Some(e.to_string())),
            };
            let done = matches!(event, Event::Closed(..));
            if tx.send(event).is_err() || done {
                break;
            }
        }
    });
}

fn spawn_acceptor(listener: TcpListener, tx: Sender<Event>, stop: Arc<AtomicBool>) -> Result<()> {
    listener.set_nonblocking(true)?;
    thread::spawn(move || {
        let mut next = 0usize;
        while !stop.load(Ordering::Relaxed) {
            match listener.accept() {
                Ok((stream, _)) => {
                    if stream.set_nonblocking(false).is_err() {
                        continue;
                    }
                    let _ = stream.set_nodelay(true);
                    let Ok(read_half) = stream.try_clone() else {
                        continue;
                    };
                    if tx.send(Event::Connected(next, stream)).is_err() {
                        break;
                    }
                    spawn_reader(next, read_half, tx.clone());
                    next += 1;
                }
                Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                    thread::sleep(Duration::from_millis(5));
                }
                Err(e) => {
                    log::warn!("accept failed: {e}");
                    thread::sleep(Duration::from_millis(5));
                }
            }
        }
    });
    Ok(())
}

fn digest(set: &PrototypeSet) -> Result<String> {
    let bytes = encode(&WireMessage::new(MessageKind::Global, 0, 0, set.clone()))?;
    Ok(Sha256::digest(&bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

struct Registration {
    conn: usize,
    class_space: Vec<usize>,
    alive: bool,
}

struct Hub {
    rx: Receiver<Event>,
    streams: BTreeMap<usize, TcpStream>,
    clients: BTreeMap<u32, Registration>,
}

impl Hub {
    fn client_of(&self, conn: usize) -> Option<u32> {
        self.clients
            .iter()
            .find(|(_, r)| r.conn == conn && r.alive)
            .map(|(id, _)| *id)
    }

    fn send(&mut self, conn: usize, msg: &WireMessage) -> Result<()> {
        let stream = self
            .streams
            .get(&conn)
            .ok_or_else(|| Error::Network(format!("connection {conn} is gone")))?;
        write_frame(&mut BufWriter::new(stream), msg)
    }

    fn send_to(&mut self, client: u32, msg: &WireMessage) {
        let Some(conn) = self
            .clients
            .get(&client)
            .filter(|r| r.alive)
            .map(|r| r.conn)
        else {
            return;
        };
        if let Err(e) = self.send(conn, msg) {
            log::warn!("client {client}: send failed, dropping it: {e}");
            self.drop_conn(conn);
        }
    }

    fn drop_conn(&mut self, conn: usize) {
        if let Some(s) = self.streams.remove(&conn) {
            let _ = s.shutdown(Shutdown::Both);
        }
        for r in self.clients.values_mut().filter(|r| r.conn == conn) {
            r.alive = false;
        }
    }

    fn reject(&mut self, conn: usize, client: u32) {
        log::warn!("rejecting registration of client {client} on connection {conn}");
        let _ = self.send(conn, &WireMessage::ack(REJECT_ROUND, client));
        self.drop_conn(conn);
    }

    /// Handles one event; returns a non-registration frame from a registered
    /// client for the caller to interpret.
    fn handle(&mut self, event: Event, accepting: bool) -> Option<(u32, WireMessage)> {
        match event {
            Event::Connected(conn, stream) => {
                self.streams.insert(conn, stream);
                None
            }
            Event::Closed(conn, err) => {
                if let Some(id) = self.client_of(conn) {
                    match err {
                        Some(e) => log::warn!("client {id} disconnected: {e}"),
                        None => log::info!("client {id} closed its connection"),
                    }
                }
                self.drop_conn(conn);
                None
            }
            Event::Frame(conn, msg) if msg.kind == MessageKind::Register => {
                let id = msg.client_id;
                if !accepting || self.clients.contains_key(&id) {
                    self.reject(conn, id);
                } else {
                    self.clients.insert(
                        id,
                        Registration {
                            conn,
                            class_space: msg.body.classes(),
                            alive: true,
                        },
                    );
                    if self.send(conn, &WireMessage::ack(0, id)).is_err() {
                        self.drop_conn(conn);
                    } else {
                        log::info!("client {id} registered");
                    }
                }
                None
            }
            Event::Frame(conn, msg) => match self.client_of(conn) {
                Some(id) if id == msg.client_id => Some((id, msg)),
                Some(id) => {
                    log::warn!(
                        "client {id} sent a frame claiming id {}; ignored",
                        msg.client_id
                    );
                    None
                }
                None => {
                    log::warn!("frame from unregistered connection {conn}; ignored");
                    None
                }
            },
        }
    }

    fn alive(&self) -> Vec<u32> {
        self.clients
            .iter()
            .filter(|(_, r)| r.alive)
            .map(|(id, _)| *id)
            .collect()
    }

    /// Collects `kind` frames for `round` from every live client until all
    /// arrived or the deadline passed. Returns the bodies by client id.
    fn collect(
        &mut self,
        kind: MessageKind,
        round: u32,
        timeout: Duration,
    ) -> BTreeMap<u32, PrototypeSet> {
        let deadline = Instant::now() + timeout;
        let mut got = BTreeMap::new();
        loop {
            let waiting = self
                .alive()
                .into_iter()
                .filter(|id| !got.contains_key(id))
                .count();
            if waiting == 0 {
                break;
            }
            let now = Instant::now();
            if now >= deadline {
                break;
            }
            match self.rx.recv_timeout(deadline - now) {
                Ok(event) => {
                    if let Some((id, msg)) = self.handle(event, false) {
                        if msg.kind == kind && msg.round == round {
                            got.insert(id, msg.body);
                        } else {
                            log::debug!(
                                "client {id}: discarding {:?} for round {} while in round {round}",
                                msg.kind,
                                msg.round
                            );
                        }
                    }
                }
                Err(RecvTimeoutError::Timeout) => break,
                Err(RecvTimeoutError::Disconnected) => break,
            }
        }
        got
    }
}

/// Runs the FedProto server over `listener` until `cfg.rounds` rounds and
/// the final broadcast are done.
///
/// Clients register with their class space, receive `GLOBAL(0)` to trigger
/// the bootstrap upload, then for `r = 1..=T` a `GLOBAL(r)` carrying the
/// current global prototypes restricted to their classes, answered by
/// `UPLOAD(r)`. `GLOBAL(T+1)` closes the run and is acknowledged. Clients
/// missing the round deadline are excluded from that round only.
pub fn serve(listener: TcpListener, cfg: &ServeConfig) -> Result<ServerReport> {
    if cfg.expected_clients == 0 {
        return Err(Error::config("expected_clients", "must be ≥ 1"));
    }
    let (tx, rx) = mpsc::channel();
    let stop = Arc::new(AtomicBool::new(false));
    spawn_acceptor(listener, tx, Arc::clone(&stop))?;
    let result = serve_inner(rx, cfg);
    stop.store(true, Ordering::Relaxed);
    result
}

/// Binds `addr` and serves.
pub fn serve_addr(addr: impl ToSocketAddrs, cfg: &ServeConfig) -> Result<ServerReport> {
    let listener =
        TcpListener::bind(addr).map_err(|e| Error::Network(format!("cannot bind: {e}")))?;
    serve(listener, cfg)
}

fn serve_inner(rx: Receiver<Event>, cfg: &ServeConfig) -> Result<ServerReport> {
    let mut hub = Hub {
        rx,
        streams: BTreeMap::new(),
        clients: BTreeMap::new(),
    };
    let deadline = Instant::now() + cfg.round_timeout;
    while hub.alive().len() < cfg.expected_clients {
        let now = Instant::now();
        let event = if now < deadline {
            hub.rx.recv_timeout(deadline - now).ok()
        } else {
            None
        };
        let Some(event) = event else {
            return Err(Error::Network(format!(
                "{} of {} clients registered before the timeout",
                hub.alive().len(),
                cfg.expected_clients
            )));
        };
        if let Some((id, msg)) = hub.handle(event, true) {
            log::warn!(
                "client {id}: unexpected {:?} before the run started",
                msg.kind
            );
        }
    }
    let registered: Vec<RegisteredClient> = hub
        .clients
        .iter()
        .map(|(id, r)| RegisteredClient {
            client_id: *id,
            class_space: r.class_space.clone(),
        })
        .collect();

    let mut server = ServerState::new(cfg.policy);
    let mut rounds = Vec::new();
    for round in 0..=cfg.rounds {
        let mut down = 0u64;
        for id in hub.alive() {
            let body = if round == 0 {
                PrototypeSet::new()
            } else {
                server.download_for(&hub.clients[&id].class_space)?
            };
            down += body.num_scalars() as u64;
            hub.send_to(
                id,
                &WireMessage::new(MessageKind::Global, round as u32, 0, body),
            );
        }
        let got = hub.collect(MessageKind::Upload, round as u32, cfg.round_timeout);
        let uploads: Vec<(u32, PrototypeSet)> = got
            .into_iter()
            .filter(|(_, body)| !body.is_empty())
            .collect();
        let participants: Vec<u32> = uploads.iter().map(|(id, _)| *id).collect();
        let excluded: Vec<u32> = registered
            .iter()
            .map(|c| c.client_id)
            .filter(|id| !participants.contains(id))
            .collect();
        if !excluded.is_empty() {
            log::warn!("round {round}: excluded clients {excluded:?}");
        }
        let up: u64 = uploads.iter().map(|(_, u)| u.num_scalars() as u64).sum();
        server.absorb(&uploads)?;
        if round > 0 {
            server.round = round;
        }
        rounds.push(ServerRoundRecord {
            round,
            params_up: up,
            params_down: down,
            participants,
            excluded,
            global_digest: digest(&server.global_prototypes)?,
        });
    }

    let last = cfg.rounds as u32 + 1;
    for id in hub.alive() {
        let body = server.download_for(&hub.clients[&id].class_space)?;
        hub.send_to(id, &WireMessage::new(MessageKind::Global, last, 0, body));
    }
    hub.collect(MessageKind::Ack, last, cfg.round_timeout);
    for conn in hub.streams.keys().copied().collect::<Vec<_>>() {
        hub.drop_conn(conn);
    }
    Ok(ServerReport {
        clients: registered,
        rounds,
        final_global: server.global_prototypes,
    })
}

fn send_upload(stream: &TcpStream, round: usize, client: u32, p: &PendingRound) -> Result<()> {
    let body = p.upload.clone().unwrap_or_default();
    write_frame(
        &mut BufWriter::new(stream),
        &WireMessage::new(MessageKind::Upload, round as u32, client, body),
    )
}

/// Client side of [`serve`]: registers `client`, follows the server's rounds
/// and returns the client's per-round records. A failed local update is
/// reported to the server as an empty upload.
pub fn run_remote_client(
    addr: impl ToSocketAddrs,
    client: &mut ClientState,
    training: &TrainingConfig,
    rounds: usize,
) -> Result<ClientReport> {
    let stream =
        TcpStream::connect(addr).map_err(|e| Error::Network(format!("cannot connect: {e}")))?;
    stream.set_nodelay(true)?;
    let mut reader = BufReader::new(stream.try_clone()?);
    let id = client.client_id;
    write_frame(
        &mut BufWriter::new(&stream),
        &WireMessage::new(
            MessageKind::Register,
            0,
            id,
            PrototypeSet::stubs(&client.model.class_space),
        ),
    )?;
    let next = |reader: &mut BufReader<TcpStream>| -> Result<WireMessage> {
        read_frame(reader)?.ok_or_else(|| Error::Network("server closed the connection".into()))
    };
    let ack = next(&mut reader)?;
    if ack.kind != MessageKind::Ack || ack.round == REJECT_ROUND {
        return Err(Error::Network(format!(
            "registration of client {id} rejected (duplicate id?)"
        )));
    }

    let summary = ClientSummary::of(client);
    let mut records = Vec::new();
    let mut pending: Option<PendingRound> = None;
    loop {
        let msg = next(&mut reader)?;
        if msg.kind != MessageKind::Global {
            log::warn!("client {id}: unexpected {:?} ignored", msg.kind);
            continue;
        }
        let round = msg.round as usize;
        let body = msg.body;
        if let Some(p) = pending.take() {
            records.push(client.finish_round(
                p,
                Some(body.clone()),
                &body,
                EvalMode::Prototype,
                training,
            )?);
        }
        if round > rounds {
            write_frame(
                &mut BufWriter::new(&stream),
                &WireMessage::ack(msg.round, id),
            )?;
            break;
        }
        let p = if round == 0 {
            client.bootstrap_round()
        } else {
            client.begin_round(round, Some(body), training)
        };
        send_upload(&stream, round, id, &p)?;
        pending = Some(p);
    }
    let _ = stream.shutdown(Shutdown::Both);
    Ok(ClientReport {
        client_id: id,
        summary,
        records,
    })
}

/// Joins a server report and its clients' reports into the report an
/// in-process run of the same configuration produces.
pub fn assemble_report(
    config: &ExperimentConfig,
    server: &ServerReport,
    mut clients: Vec<ClientReport>,
) -> Result<ExperimentReport> {
    clients.sort_by_key(|c| c.client_id);
    let mut rounds = Vec::with_capacity(server.rounds.len());
    for s in &server.rounds {
        let records = clients
            .iter()
            .filter_map(|c| c.records.get(s.round).cloned())
            .collect();
        rounds.push(RoundRecord::from_clients(
            s.round,
            records,
            s.params_up,
            s.params_down,
            s.excluded.clone(),
        ));
    }
    let summaries = clients.into_iter().map(|c| c.summary).collect();
    Ok(ExperimentReport::new(config, summaries, rounds))
}
