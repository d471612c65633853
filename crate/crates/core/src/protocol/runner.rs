use std::collections::BTreeMap;
use std::net::{TcpListener, TcpStream};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::Arc;
use std::thread;
use std::time::Instant;

use log::{debug, info, warn};

use super::client::{client_step, ClientReply, ClientState};
use super::server::{distribute_model, server_collect_and_verify, ServerState};
use super::{
    setup_keys, KeyRegistry, PhaseTimings, ProtocolConfig, ProtocolError, RoundOutcome, UplinkRecord, SERVER_ID,
};
use crate::bench::{quantize_secs, RoundMetrics, RoundSink};
use crate::channel::{
    self, AttackConfig, Attacker, ChannelError, ChannelStats, ClientEndpoint, Direction,
    ServerEndpoint, TcpClientEndpoint, TcpServerEndpoint,
};
use crate::codec::{self, MessageHeader, MessageType, SignedEnvelope};
use crate::fedcore::{Architecture, ClientDataset, FederatedSetup, GlobalModel, TrainConfig};
use crate::seed;
use crate::sig::{self, ParameterSet};

/// Largest frame accepted on a TCP link.
pub const DEFAULT_MAX_FRAME: usize = 256 << 20;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Transport {
    InProcess,
    /// Listen on this address; use port 0 for an ephemeral port.
    Tcp(String),
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub params: ParameterSet,
    pub protocol: ProtocolConfig,
    pub attack: AttackConfig,
    pub transport: Transport,
}

impl RunOptions {
    pub fn new(params: ParameterSet) -> Self {
        Self {
            params,
            protocol: ProtocolConfig::default(),
            attack: AttackConfig::none(),
            transport: Transport::InProcess,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainingResult {
    pub model: GlobalModel,
    pub outcomes: Vec<RoundOutcome>,
    pub metrics: Vec<RoundMetrics>,
    pub channel: ChannelStats,
    pub registry: Arc<KeyRegistry>,
}

/// Side report a client sends just before each reply frame.
#[derive(Debug, Clone)]
pub struct ClientReport {
    pub client_id: u32,
    pub timings: PhaseTimings,
    pub abstain: Option<String>,
}

impl RoundOutcome {
    pub fn metrics(&self, scheme: &str) -> RoundMetrics {
        RoundMetrics {
            scheme: scheme.to_string(),
            round: self.round,
            wall_time_s: quantize_secs(self.timings.wall),
            train_time_s: quantize_secs(self.timings.train),
            sign_time_s: quantize_secs(self.timings.sign),
            verify_time_s: quantize_secs(self.timings.verify),
            serialize_time_s: quantize_secs(self.timings.serialize),
            payload_bytes: self.payload_bytes,
            signature_bytes: self.signature_bytes,
            verified_count: self.verified.len() as u32,
            rejected_count: self.rejected.len() as u32,
            global_loss: self.global_loss,
        }
    }
}

/// Runs one round from the server's side: broadcast, collect one reply per
/// client, verify, aggregate. Every message passes through `attacker`,
/// clients in ascending id order.
pub fn run_round(
    server: &mut ServerState,
    link: &mut dyn ServerEndpoint,
    attacker: &mut Attacker,
    reports: Option<&Receiver<ClientReport>>,
) -> Result<RoundOutcome, ProtocolError> {
    let started = Instant::now();
    let round = server.round();
    let ids: Vec<u32> = server.registry().client_ids().collect();

    let (env, mut timings) = distribute_model(server)?;
    let t = Instant::now();
    let frame = codec::encode_envelope(&env)?;
    timings.serialize += t.elapsed();
    let mut payload_bytes = 0u64;
    let mut signature_bytes = 0u64;
    for &id in &ids {
        let delivery = attacker.deliver(&frame, Direction::ServerToClient, id);
        payload_bytes += frame.len() as u64;
        signature_bytes += env.signature.bytes.len() as u64;
        link.send(id, &delivery.bytes)?;
    }

    let mut frames = Vec::with_capacity(ids.len());
    let mut uplink = Vec::with_capacity(ids.len());
    let mut silent = Vec::new();
    for &id in &ids {
        let reply = link.recv(id)?;
        if reply.is_empty() {
            silent.push(id);
            continue;
        }
        payload_bytes += reply.len() as u64;
        signature_bytes += codec::decode_envelope(&reply)
            .map(|e| e.signature.bytes.len() as u64)
            .unwrap_or(0);
        let delivery = attacker.deliver(&reply, Direction::ClientToServer, id);
        frames.push(delivery.bytes);
        uplink.push(UplinkRecord {
            link: id,
            action: delivery.action,
            accepted: false,
        });
    }

    let mut reasons = BTreeMap::new();
    if let Some(rx) = reports {
        while let Ok(r) = rx.try_recv() {
            timings += r.timings;
            if let Some(why) = r.abstain {
                reasons.insert(r.client_id, why);
            }
        }
    }
    let abstained: Vec<(u32, String)> = silent
        .into_iter()
        .map(|id| (id, reasons.remove(&id).unwrap_or_else(|| "no update".into())))
        .collect();
    for (id, why) in &abstained {
        warn!("round {round}: client {id} sent no update: {why}");
    }

    let collected = server_collect_and_verify(server, &frames);
    timings += collected.timings;
    for (rec, ok) in uplink.iter_mut().zip(&collected.accepted) {
        rec.accepted = *ok;
    }
    for (sender, why) in &collected.rejected {
        warn!("round {round}: rejected update claiming sender {sender}: {why}");
    }
    let verified: Vec<u32> = collected.verified.iter().map(|u| u.client_id).collect();
    let skipped = server.advance(&collected.verified)?;
    let global_loss = server.eval_loss()?;
    timings.wall = started.elapsed();
    info!(
        "round {round}: verified {}/{} loss {global_loss:.6}",
        verified.len(),
        ids.len()
    );
    Ok(RoundOutcome {
        round,
        verified,
        rejected: collected.rejected,
        abstained,
        uplink,
        skipped,
        global_loss,
        timings,
        payload_bytes,
        signature_bytes,
    })
}

/// Client loop: one reply per broadcast for every configured round. A
/// client that refuses a broadcast replies with an empty frame.
pub fn run_client(
    mut client: ClientState,
    link: &mut dyn ClientEndpoint,
    reports: Option<Sender<ClientReport>>,
) -> Result<ClientState, ProtocolError> {
    for _ in 0..client.rounds() {
        let frame = link.recv()?;
        let (reply, timings) = client_step(&mut client, &frame);
        let (bytes, abstain) = match reply {
            ClientReply::Update(bytes) => (bytes, None),
            ClientReply::Abstain(why) => {
                debug!("client {} abstains: {why}", client.id());
                (Vec::new(), Some(why))
            }
        };
        if let Some(tx) = &reports {
            let _ = tx.send(ClientReport {
                client_id: client.id(),
                timings,
                abstain,
            });
        }
        link.send(&bytes)?;
    }
    Ok(client)
}

fn announce_envelope(client: &ClientState, protocol: ProtocolConfig) -> Result<SignedEnvelope, ProtocolError> {
    let kp = client.keypair();
    let payload = kp.public_key.clone();
    let header = MessageHeader {
        msg_type: MessageType::PublicKeyAnnounce,
        scheme: kp.scheme(),
        round: 0,
        sender_id: client.id(),
        payload_len: payload.len() as u64,
    };
    let signature = sig::sign(kp, &protocol.message_to_sign(&header, &payload))?;
    Ok(SignedEnvelope {
        header,
        payload,
        signature,
    })
}

/// Announces the client on a fresh connection with a signed envelope
/// carrying its public key.
pub fn tcp_client_handshake(
    stream: &mut TcpStream,
    client: &ClientState,
    protocol: ProtocolConfig,
) -> Result<(), ProtocolError> {
    let env = announce_envelope(client, protocol)?;
    channel::tcp_send_frame(stream, &codec::encode_envelope(&env)?)?;
    Ok(())
}

/// Accepts one connection per registered client and maps each to the id
/// it proves. The announced key must equal the registered one.
pub fn tcp_accept_clients(
    listener: &TcpListener,
    registry: &KeyRegistry,
    protocol: ProtocolConfig,
    max_frame: usize,
) -> Result<BTreeMap<u32, TcpStream>, ProtocolError> {
    let expected = registry.client_ids().count();
    let mut streams = BTreeMap::new();
    while streams.len() < expected {
        let (mut stream, peer) = listener.accept().map_err(ChannelError::from)?;
        stream.set_nodelay(true).map_err(ChannelError::from)?;
        let env = channel::tcp_recv_envelope(&mut stream, max_frame)?;
        let h = env.header;
        let entry = registry
            .get(h.sender_id)
            .filter(|_| h.sender_id != SERVER_ID)
            .ok_or(ProtocolError::UnknownParticipant(h.sender_id))?;
        if h.msg_type != MessageType::PublicKeyAnnounce {
            return Err(ProtocolError::WrongMessageType(h.msg_type));
        }
        if env.payload != entry.public_key {
            return Err(ProtocolError::Handshake(format!(
                "client {} announced a key that is not registered",
                h.sender_id
            )));
        }
        if protocol.verify_signatures
            && !sig::verify(
                &entry.public_key,
                entry.params,
                &protocol.message_to_sign(&h, &env.payload),
                &env.signature,
            )
        {
            return Err(ProtocolError::SignatureInvalid);
        }
        if streams.insert(h.sender_id, stream).is_some() {
            return Err(ProtocolError::Handshake(format!("client {} connected twice", h.sender_id)));
        }
        debug!("client {} connected from {peer}", h.sender_id);
    }
    Ok(streams)
}

fn serve(
    server: &mut ServerState,
    mut link: Box<dyn ServerEndpoint + '_>,
    attacker: &mut Attacker,
    reports: &Receiver<ClientReport>,
    sink: Option<&dyn RoundSink>,
    scheme: &str,
) -> Result<(Vec<RoundOutcome>, Vec<RoundMetrics>), ProtocolError> {
    let mut outcomes = Vec::new();
    let mut metrics = Vec::new();
    for _ in 0..server.config().num_rounds {
        let outcome = run_round(server, link.as_mut(), attacker, Some(reports))?;
        let m = outcome.metrics(scheme);
        if let Some(sink) = sink {
            sink.record(m.clone())?;
        }
        metrics.push(m);
        outcomes.push(outcome);
    }
    Ok((outcomes, metrics))
}

/// Runs the full protocol over a prepared setup, clients on their own
/// threads.
pub fn run_training_with_setup(
    setup: &FederatedSetup,
    opts: &RunOptions,
    sink: Option<&dyn RoundSink>,
) -> Result<TrainingResult, ProtocolError> {
    let key_seed = seed::derive_seed(setup.cfg.seed, "keys", &[]);
    let (mut server, clients, registry) = setup_keys(setup, opts.params, opts.protocol, key_seed)?;
    let mut attacker = Attacker::new(opts.attack.clone())?;
    let scheme = opts.params.scheme().name();
    let (report_tx, report_rx) = mpsc::channel();

    let served = thread::scope(|scope| {
        let mut handles = Vec::new();
        let link: Box<dyn ServerEndpoint> = match &opts.transport {
            Transport::InProcess => {
                let (link, ends) = channel::in_process(clients.iter().map(ClientState::id));
                for (client, mut end) in clients.into_iter().zip(ends) {
                    let tx = report_tx.clone();
                    handles.push(scope.spawn(move || run_client(client, &mut end, Some(tx)).map(|_| ())));
                }
                Box::new(link)
            }
            Transport::Tcp(addr) => {
                let listener = channel::tcp_listen(addr.as_str())?;
                let local = listener.local_addr().map_err(ChannelError::from)?;
                info!("listening on {local}");
                let protocol = opts.protocol;
                for client in clients {
                    let tx = report_tx.clone();
                    handles.push(scope.spawn(move || {
                        let mut stream = channel::tcp_connect(local)?;
                        tcp_client_handshake(&mut stream, &client, protocol)?;
                        let mut end = TcpClientEndpoint::new(stream, DEFAULT_MAX_FRAME);
                        run_client(client, &mut end, Some(tx)).map(|_| ())
                    }));
                }
                let streams = tcp_accept_clients(&listener, &registry, opts.protocol, DEFAULT_MAX_FRAME)?;
                Box::new(TcpServerEndpoint::new(streams, DEFAULT_MAX_FRAME))
            }
        };
        let served = serve(&mut server, link, &mut attacker, &report_rx, sink, scheme);
        let mut failure = None;
        for h in handles {
            match h.join() {
                Ok(Ok(())) => {}
                Ok(Err(e)) => failure = failure.or(Some(e.to_string())),
                Err(_) => failure = failure.or(Some("client thread panicked".to_string())),
            }
        }
        match (served, failure) {
            (Ok(v), None) => Ok(v),
            (Ok(_), Some(f)) => Err(ProtocolError::ClientFailed(f)),
            (Err(e), _) => Err(e),
        }
    });
    let (outcomes, metrics) = served?;
    Ok(TrainingResult {
        model: server.model().clone(),
        outcomes,
        metrics,
        channel: *attacker.stats(),
        registry,
    })
}

/// Partitions `dataset` IID over the configured clients and runs the
/// protocol.
pub fn run_training(
    dataset: ClientDataset,
    architecture: Architecture,
    cfg: TrainConfig,
    opts: &RunOptions,
    sink: Option<&dyn RoundSink>,
) -> Result<TrainingResult, ProtocolError> {
    let setup = FederatedSetup::new(dataset, architecture, cfg)?;
    run_training_with_setup(&setup, opts, sink)
}
