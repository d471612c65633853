//! Signed FedAvg: key generation, signed model distribution, signed update
//! submission, verification-gated aggregation.
//!
//! Every message is a [`SignedEnvelope`]. By default the signature covers
//! the 23-byte header as well as the payload, binding message type, round
//! and sender; [`ProtocolConfig::bind_header`] turns that off to show what a
//! payload-only signature lets a replaying attacker get away with.

mod client;
mod runner;
mod server;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;
use std::time::Duration;

use thiserror::Error;

pub use client::{client_receive_model, client_receive_model_bytes, client_step, client_submit_update, ClientReply, ClientState};
pub use runner::{
    run_client, run_round, run_training, run_training_with_setup, tcp_accept_clients, tcp_client_handshake,
    ClientReport, RunOptions, TrainingResult, Transport, DEFAULT_MAX_FRAME,
};
pub use server::{distribute_model, server_collect_and_verify, verify_submission, Collected, ServerState};

use crate::channel::{ChannelError, DeliveryAction};
use crate::codec::{self, CodecError, MessageHeader};
use crate::fedcore::{FedError, FederatedSetup};
use crate::seed;
use crate::sig::{self, ParameterSet, SchemeId, SigError};

/// Participant id of the server.
pub const SERVER_ID: u32 = 0;

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error(transparent)]
    Sig(#[from] SigError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Fed(#[from] FedError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Metrics(#[from] crate::bench::BenchError),
    #[error("signature does not verify")]
    SignatureInvalid,
    #[error("replay detected: round {round} is not newer than {last}")]
    ReplayDetected { round: u32, last: u32 },
    #[error("envelope claims sender {got}, expected {expected}")]
    WrongSender { expected: u32, got: u32 },
    #[error("unexpected message type {0:?}")]
    WrongMessageType(codec::MessageType),
    #[error("envelope round {got} is ahead of expected round {expected}")]
    UnexpectedRound { expected: u32, got: u32 },
    #[error("envelope scheme {got} does not match registered scheme {expected}")]
    SchemeMismatch { expected: SchemeId, got: SchemeId },
    #[error("all {0} configured rounds already ran")]
    RoundsExhausted(u32),
    #[error("participant {0} is not in the key registry")]
    UnknownParticipant(u32),
    #[error("client {client} cannot submit for round {update}; current round is {current:?}")]
    NotCurrentRound { client: u32, update: u32, current: Option<u32> },
    #[error("handshake failed: {0}")]
    Handshake(String),
    #[error("client thread failed: {0}")]
    ClientFailed(String),
}

/// Protocol switches that are not training hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProtocolConfig {
    /// Refuse schemes that are not post-quantum.
    pub strict: bool,
    /// When false nobody checks signatures: the unsecured baseline.
    pub verify_signatures: bool,
    /// Sign header ‖ payload (true) or the payload alone (false).
    pub bind_header: bool,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            strict: false,
            verify_signatures: true,
            bind_header: true,
        }
    }
}

impl ProtocolConfig {
    pub fn baseline() -> Self {
        Self {
            verify_signatures: false,
            ..Self::default()
        }
    }

    /// Bytes that get signed and verified for an envelope.
    pub fn message_to_sign(&self, header: &MessageHeader, payload: &[u8]) -> Vec<u8> {
        if self.bind_header {
            codec::signed_bytes(header, payload)
        } else {
            payload.to_vec()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegistryEntry {
    pub params: ParameterSet,
    pub public_key: Vec<u8>,
}

/// Trusted id -> public key map, established out of band before training
/// and read-only afterwards.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyRegistry {
    entries: BTreeMap<u32, RegistryEntry>,
}

impl KeyRegistry {
    pub fn new(entries: BTreeMap<u32, RegistryEntry>) -> Self {
        Self { entries }
    }

    pub fn get(&self, id: u32) -> Option<&RegistryEntry> {
        self.entries.get(&id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, &RegistryEntry)> {
        self.entries.iter().map(|(&id, e)| (id, e))
    }

    pub fn client_ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.entries.keys().copied().filter(|&id| id != SERVER_ID)
    }
}

/// Why the server left an update out of the verified set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Rejection {
    Malformed(String),
    WrongMessageType(u8),
    UnknownSender(u32),
    SchemeMismatch,
    /// Round older than the current one: a replay.
    StaleRound(u32),
    FutureRound(u32),
    SignatureInvalid,
    Duplicate,
    InvalidPayload(String),
}

impl Rejection {
    pub fn is_replay(&self) -> bool {
        matches!(self, Rejection::StaleRound(_) | Rejection::Duplicate)
    }
}

impl fmt::Display for Rejection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Rejection::Malformed(m) => write!(f, "malformed envelope: {m}"),
            Rejection::WrongMessageType(t) => write!(f, "wrong message type {t}"),
            Rejection::UnknownSender(s) => write!(f, "unknown sender {s}"),
            Rejection::SchemeMismatch => f.write_str("scheme mismatch"),
            Rejection::StaleRound(r) => write!(f, "replay detected: stale round {r}"),
            Rejection::FutureRound(r) => write!(f, "round mismatch: future round {r}"),
            Rejection::SignatureInvalid => f.write_str("signature invalid"),
            Rejection::Duplicate => f.write_str("duplicate"),
            Rejection::InvalidPayload(m) => write!(f, "invalid payload: {m}"),
        }
    }
}

/// Time spent per phase, summed over every participant.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PhaseTimings {
    pub wall: Duration,
    pub train: Duration,
    pub sign: Duration,
    pub verify: Duration,
    pub serialize: Duration,
}

impl std::ops::AddAssign for PhaseTimings {
    fn add_assign(&mut self, o: Self) {
        self.wall += o.wall;
        self.train += o.train;
        self.sign += o.sign;
        self.verify += o.verify;
        self.serialize += o.serialize;
    }
}

/// What happened to one uplink message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UplinkRecord {
    /// Client whose link carried the message.
    pub link: u32,
    pub action: DeliveryAction,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundOutcome {
    pub round: u32,
    /// Client ids whose updates were aggregated, ascending.
    pub verified: Vec<u32>,
    /// `(claimed sender, reason)` for every received update left out.
    pub rejected: Vec<(u32, Rejection)>,
    /// Clients that sent no update, with the reason they gave.
    pub abstained: Vec<(u32, String)>,
    pub uplink: Vec<UplinkRecord>,
    pub skipped: bool,
    pub global_loss: f64,
    pub timings: PhaseTimings,
    /// Encoded envelope bytes that crossed the wire this round.
    pub payload_bytes: u64,
    pub signature_bytes: u64,
}

impl RoundOutcome {
    pub fn received(&self) -> usize {
        self.verified.len() + self.rejected.len()
    }

    /// Uplink messages the attacker touched that still made it into S.
    pub fn attacked_accepted(&self) -> usize {
        self.uplink
            .iter()
            .filter(|u| u.accepted && u.action != DeliveryAction::Untouched)
            .count()
    }
}

/// Generates the server key pair and one per client, and freezes the
/// registry.
pub fn setup_keys(
    setup: &FederatedSetup,
    params: ParameterSet,
    protocol: ProtocolConfig,
    key_seed: u64,
) -> Result<(ServerState, Vec<ClientState>, Arc<KeyRegistry>), ProtocolError> {
    sig::ensure_allowed(params.scheme(), protocol.strict)?;
    let mut keypairs = BTreeMap::new();
    let ids = std::iter::once(SERVER_ID).chain(setup.client_ids());
    for id in ids {
        let seed = seed::derive_bytes(key_seed, "keygen", &[u64::from(id)]);
        keypairs.insert(id, sig::keygen(params, Some(&seed))?);
    }
    let registry = Arc::new(KeyRegistry::new(
        keypairs
            .iter()
            .map(|(&id, kp)| {
                (
                    id,
                    RegistryEntry {
                        params,
                        public_key: kp.public_key.clone(),
                    },
                )
            })
            .collect(),
    ));
    let server_key = registry.get(SERVER_ID).expect("server registered").clone();
    let clients = setup
        .client_ids()
        .map(|id| {
            ClientState::new(
                id,
                keypairs[&id].clone(),
                server_key.clone(),
                setup.shard(id).clone(),
                setup.initial.architecture.clone(),
                setup.cfg.clone(),
                protocol,
            )
        })
        .collect();
    let server = ServerState::new(
        setup.initial.clone(),
        keypairs.remove(&SERVER_ID).expect("server key"),
        Arc::clone(&registry),
        setup.cfg.clone(),
        protocol,
        setup.eval.clone(),
    );
    Ok((server, clients, registry))
}
