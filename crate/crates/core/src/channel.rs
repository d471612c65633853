//! Transports between the server and its clients, and the outsider who sits
//! on them.
//!
//! The [`Attacker`] sees every encoded envelope on the wire. It can flip
//! bits, substitute the parameter payload, strip the signature or replay an
//! earlier envelope, but it holds no signing keys. Its decisions come from a
//! seeded PRNG and depend only on the sequence of messages it is shown.
//!
//! Two transports implement [`ServerEndpoint`]/[`ClientEndpoint`]: an
//! in-process one built on `std::sync::mpsc` and a TCP one whose frames are
//! a 4-byte big-endian length followed by the envelope bytes.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fmt;
use std::io::{self, Read, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::str::FromStr;
use std::sync::mpsc::{self, Receiver, Sender};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::codec::{self, CodecError, ParameterVector, SignedEnvelope};
use crate::fedcore::ModelUpdate;
use crate::seed;

/// 256 MiB.
pub const DEFAULT_MAX_FRAME: usize = 256 << 20;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ChannelError {
    #[error("connection failed: {0}")]
    ConnectionFailed(String),
    #[error("frame of {len} bytes exceeds the {max}-byte cap")]
    FrameTooLarge { len: usize, max: usize },
    #[error("peer closed the connection")]
    PeerClosed,
    #[error("cannot decode envelope: {0}")]
    DecodeError(String),
    #[error("no link to client {0}")]
    UnknownPeer(u32),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("invalid attack configuration: {0}")]
    InvalidAttack(String),
}

impl From<io::Error> for ChannelError {
    fn from(e: io::Error) -> Self {
        match e.kind() {
            io::ErrorKind::UnexpectedEof
            | io::ErrorKind::ConnectionReset
            | io::ErrorKind::BrokenPipe
            | io::ErrorKind::ConnectionAborted => ChannelError::PeerClosed,
            _ => ChannelError::Io(e.to_string()),
        }
    }
}

impl From<CodecError> for ChannelError {
    fn from(e: CodecError) -> Self {
        ChannelError::DecodeError(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    ClientToServer,
    ServerToClient,
}

impl Direction {
    fn index(self) -> usize {
        match self {
            Direction::ClientToServer => 0,
            Direction::ServerToClient => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DirectionFilter {
    ClientToServer,
    ServerToClient,
    Both,
}

impl DirectionFilter {
    fn matches(self, d: Direction) -> bool {
        match self {
            DirectionFilter::Both => true,
            DirectionFilter::ClientToServer => d == Direction::ClientToServer,
            DirectionFilter::ServerToClient => d == Direction::ServerToClient,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    Client(u32),
    All,
}

/// How a substitution attacker builds the replacement parameters from the
/// intercepted ones.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PoisonSource {
    /// `-scale * original`: pushes the model against the honest direction.
    Negate { scale: f32 },
    /// Every value replaced by a constant.
    Constant(f32),
    /// Original plus Gaussian noise of the given standard deviation.
    Noise { std: f32 },
}

impl PoisonSource {
    pub fn apply<R: Rng>(&self, original: &ParameterVector, rng: &mut R) -> ParameterVector {
        let values = original
            .values()
            .iter()
            .map(|&v| match *self {
                PoisonSource::Negate { scale } => -scale * v,
                PoisonSource::Constant(c) => c,
                PoisonSource::Noise { std } => {
                    let z: f32 = StandardNormal.sample(rng);
                    v + std * z
                }
            })
            .map(|v| if v.is_finite() { v } else { 0.0 })
            .collect();
        ParameterVector::new(original.shape().to_vec(), values).expect("shape preserved")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackKind {
    None,
    BitFlip,
    Substitute,
    Replay,
    Strip,
}

/// Which earlier envelopes a replaying attacker may pick from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReplayScope {
    /// Only envelopes whose header round is older than the message being
    /// replaced.
    PriorRounds,
    /// Anything seen before on the same direction.
    Any,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackConfig {
    pub kind: AttackKind,
    pub target: Target,
    pub direction: DirectionFilter,
    pub probability: f64,
    pub seed: u64,
    /// Required for [`AttackKind::Substitute`].
    pub poison: Option<PoisonSource>,
    pub replay_scope: ReplayScope,
    /// Rewrite the replayed envelope's round to the current one. Only an
    /// envelope format that does not sign its header would accept this.
    pub restamp: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self::none()
    }
}

impl AttackConfig {
    pub fn none() -> Self {
        Self {
            kind: AttackKind::None,
            target: Target::All,
            direction: DirectionFilter::Both,
            probability: 0.0,
            seed: 0,
            poison: None,
            replay_scope: ReplayScope::PriorRounds,
            restamp: false,
        }
    }

    pub fn new(kind: AttackKind, target: Target, direction: DirectionFilter, probability: f64, seed: u64) -> Self {
        Self {
            kind,
            target,
            direction,
            probability,
            seed,
            poison: (kind == AttackKind::Substitute).then_some(PoisonSource::Negate { scale: 1.0 }),
            ..Self::none()
        }
    }

    pub fn validate(&self) -> Result<(), ChannelError> {
        if !(0.0..=1.0).contains(&self.probability) {
            return Err(ChannelError::InvalidAttack(format!(
                "probability {} outside [0, 1]",
                self.probability
            )));
        }
        if self.kind == AttackKind::Substitute && self.poison.is_none() {
            return Err(ChannelError::InvalidAttack(
                "substitution needs a poison source".into(),
            ));
        }
        Ok(())
    }
}

impl fmt::Display for AttackConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.kind {
            AttackKind::None => return f.write_str("none"),
            AttackKind::BitFlip => "bitflip",
            AttackKind::Substitute => "substitute",
            AttackKind::Replay => "replay",
            AttackKind::Strip => "strip",
        };
        let target = match self.target {
            Target::All => "all".to_string(),
            Target::Client(c) => c.to_string(),
        };
        let dir = match self.direction {
            DirectionFilter::ClientToServer => "up",
            DirectionFilter::ServerToClient => "down",
            DirectionFilter::Both => "both",
        };
        write!(f, "{kind}:target={target}:dir={dir}:p={}:seed={}", self.probability, self.seed)?;
        if let Some(poison) = self.poison {
            match poison {
                PoisonSource::Negate { scale } => write!(f, ":poison=negate:scale={scale}")?,
                PoisonSource::Constant(c) => write!(f, ":poison=constant:value={c}")?,
                PoisonSource::Noise { std } => write!(f, ":poison=noise:std={std}")?,
            }
        }
        if self.kind == AttackKind::Replay {
            let scope = match self.replay_scope {
                ReplayScope::PriorRounds => "prior",
                ReplayScope::Any => "any",
            };
            write!(f, ":scope={scope}:restamp={}", self.restamp)?;
        }
        Ok(())
    }
}

/// Parses `kind[:key=value]...`, e.g. `bitflip:target=1:p=1.0`.
///
/// Keys: `target` (client id or `all`), `dir` (`up`, `down`, `both`), `p`,
/// `seed`, `poison` (`negate`, `constant`, `noise`), `scale`, `value`,
/// `std`, `scope` (`prior`, `any`), `restamp`.
impl FromStr for AttackConfig {
    type Err = ChannelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = |m: String| ChannelError::InvalidAttack(m);
        let mut parts = s.split(':');
        let kind = match parts.next().unwrap_or("").to_ascii_lowercase().as_str() {
            "none" => AttackKind::None,
            "bitflip" | "bit-flip" => AttackKind::BitFlip,
            "substitute" | "substitution" => AttackKind::Substitute,
            "replay" => AttackKind::Replay,
            "strip" => AttackKind::Strip,
            other => return Err(bad(format!("unknown attack kind {other:?}"))),
        };
        let mut cfg = AttackConfig {
            kind,
            probability: if kind == AttackKind::None { 0.0 } else { 1.0 },
            ..AttackConfig::none()
        };
        let mut poison_kind: Option<String> = None;
        let (mut scale, mut value, mut std) = (1.0f32, 0.0f32, 1.0f32);
        for part in parts {
            let (key, val) = part
                .split_once('=')
                .ok_or_else(|| bad(format!("expected key=value, got {part:?}")))?;
            let num = |v: &str| v.parse::<f64>().map_err(|_| bad(format!("bad number {v:?} for {key}")));
            match key {
                "target" => {
                    cfg.target = if val == "all" {
                        Target::All
                    } else {
                        Target::Client(val.parse().map_err(|_| bad(format!("bad target {val:?}")))?)
                    }
                }
                "dir" | "direction" => {
                    cfg.direction = match val {
                        "up" | "c2s" | "client-to-server" => DirectionFilter::ClientToServer,
                        "down" | "s2c" | "server-to-client" => DirectionFilter::ServerToClient,
                        "both" => DirectionFilter::Both,
                        _ => return Err(bad(format!("bad direction {val:?}"))),
                    }
                }
                "p" | "prob" | "probability" => cfg.probability = num(val)?,
                "seed" => cfg.seed = val.parse().map_err(|_| bad(format!("bad seed {val:?}")))?,
                "poison" => poison_kind = Some(val.to_string()),
                "scale" => scale = num(val)? as f32,
                "value" => value = num(val)? as f32,
                "std" => std = num(val)? as f32,
                "scope" => {
                    cfg.replay_scope = match val {
                        "prior" => ReplayScope::PriorRounds,
                        "any" => ReplayScope::Any,
                        _ => return Err(bad(format!("bad replay scope {val:?}"))),
                    }
                }
                "restamp" => cfg.restamp = val.parse().map_err(|_| bad(format!("bad bool {val:?}")))?,
                _ => return Err(bad(format!("unknown attack key {key:?}"))),
            }
        }
        if kind == AttackKind::Substitute {
            cfg.poison = Some(match poison_kind.as_deref().unwrap_or("negate") {
                "negate" => PoisonSource::Negate { scale },
                "constant" => PoisonSource::Constant(value),
                "noise" => PoisonSource::Noise { std },
                other => return Err(bad(format!("unknown poison {other:?}"))),
            });
        } else if poison_kind.is_some() {
            return Err(bad("poison only applies to substitute".into()));
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ChannelStats {
    pub delivered_up: u64,
    pub delivered_down: u64,
    pub tampered: u64,
    pub replayed: u64,
    pub bytes_up: u64,
    pub bytes_down: u64,
}

impl ChannelStats {
    pub fn delivered(&self) -> u64 {
        self.delivered_up + self.delivered_down
    }
}

/// Flips one uniformly chosen bit.
pub fn bit_flip<R: Rng>(msg: &[u8], rng: &mut R) -> Vec<u8> {
    let mut out = msg.to_vec();
    if !out.is_empty() {
        let bit = rng.random_range(0..out.len() * 8);
        out[bit / 8] ^= 1 << (bit % 8);
    }
    out
}

/// Swaps the payload for `poison.delta`, keeping the original header and
/// signature. Messages that are not envelopes pass through unchanged.
pub fn substitute_update(original: &[u8], poison: &ModelUpdate) -> Vec<u8> {
    substitute_params(original, &poison.delta)
}

fn substitute_params(original: &[u8], poison: &ParameterVector) -> Vec<u8> {
    let Ok(mut env) = codec::decode_envelope(original) else {
        return original.to_vec();
    };
    let Ok(payload) = codec::encode_params(poison) else {
        return original.to_vec();
    };
    env.header.payload_len = payload.len() as u64;
    env.payload = payload;
    codec::encode_envelope(&env).unwrap_or_else(|_| original.to_vec())
}

/// Drops the signature bytes.
pub fn strip_signature(original: &[u8]) -> Vec<u8> {
    let Ok(mut env) = codec::decode_envelope(original) else {
        return original.to_vec();
    };
    env.signature.bytes.clear();
    codec::encode_envelope(&env).unwrap_or_else(|_| original.to_vec())
}

/// Re-emits a uniformly chosen envelope from `history`.
pub fn replay<R: Rng>(history: &[Vec<u8>], rng: &mut R) -> Option<Vec<u8>> {
    if history.is_empty() {
        return None;
    }
    Some(history[rng.random_range(0..history.len())].clone())
}

fn header_round(msg: &[u8]) -> Option<u32> {
    codec::MessageHeader::decode(msg).ok().map(|h| h.round)
}

fn restamp_round(msg: &mut [u8], round: u32) {
    if msg.len() >= codec::HEADER_LEN {
        msg[7..11].copy_from_slice(&round.to_le_bytes());
    }
}

/// Outsider on the wire. Feed it every message in a fixed order to get
/// reproducible attacks.
#[derive(Debug)]
pub struct Attacker {
    cfg: AttackConfig,
    rng: ChaCha8Rng,
    history: [Vec<Vec<u8>>; 2],
    stats: ChannelStats,
}

impl Attacker {
    pub fn new(cfg: AttackConfig) -> Result<Self, ChannelError> {
        cfg.validate()?;
        Ok(Self {
            rng: seed::derived_rng(cfg.seed, "attacker", &[]),
            cfg,
            history: [Vec::new(), Vec::new()],
            stats: ChannelStats::default(),
        })
    }

    pub fn passive() -> Self {
        Self::new(AttackConfig::none()).expect("valid")
    }

    pub fn config(&self) -> &AttackConfig {
        &self.cfg
    }

    pub fn stats(&self) -> &ChannelStats {
        &self.stats
    }

    /// Passes `msg`, travelling in `direction` to or from client `peer`,
    /// through the attacker. Returns the bytes that arrive and whether they
    /// were altered.
    pub fn deliver(&mut self, msg: &[u8], direction: Direction, peer: u32) -> Delivery {
        let targeted = self.cfg.kind != AttackKind::None
            && self.cfg.direction.matches(direction)
            && match self.cfg.target {
                Target::All => true,
                Target::Client(c) => c == peer,
            };
        let fire = targeted && self.rng.random_bool(self.cfg.probability);
        let mut action = DeliveryAction::Untouched;
        let bytes = if fire {
            match self.cfg.kind {
                AttackKind::None => msg.to_vec(),
                AttackKind::BitFlip => {
                    action = DeliveryAction::Tampered;
                    bit_flip(msg, &mut self.rng)
                }
                AttackKind::Strip => {
                    action = DeliveryAction::Tampered;
                    strip_signature(msg)
                }
                AttackKind::Substitute => {
                    let poison = self.cfg.poison.expect("validated");
                    match codec::decode_envelope(msg).ok().and_then(|e| codec::decode_params(&e.payload).ok()) {
                        Some(original) => {
                            action = DeliveryAction::Tampered;
                            substitute_params(msg, &poison.apply(&original, &mut self.rng))
                        }
                        None => msg.to_vec(),
                    }
                }
                AttackKind::Replay => {
                    let current = header_round(msg);
                    let pool: Vec<Vec<u8>> = self.history[direction.index()]
                        .iter()
                        .filter(|h| match (self.cfg.replay_scope, current, header_round(h)) {
                            (ReplayScope::Any, ..) => true,
                            (ReplayScope::PriorRounds, Some(now), Some(then)) => then < now,
                            (ReplayScope::PriorRounds, ..) => false,
                        })
                        .cloned()
                        .collect();
                    match replay(&pool, &mut self.rng) {
                        Some(mut old) => {
                            action = DeliveryAction::Replayed;
                            if self.cfg.restamp {
                                if let Some(now) = current {
                                    restamp_round(&mut old, now);
                                }
                            }
                            old
                        }
                        None => msg.to_vec(),
                    }
                }
            }
        } else {
            msg.to_vec()
        };
        match action {
            DeliveryAction::Tampered => self.stats.tampered += 1,
            DeliveryAction::Replayed => self.stats.replayed += 1,
            DeliveryAction::Untouched => {}
        }
        match direction {
            Direction::ClientToServer => {
                self.stats.delivered_up += 1;
                self.stats.bytes_up += bytes.len() as u64;
            }
            Direction::ServerToClient => {
                self.stats.delivered_down += 1;
                self.stats.bytes_down += bytes.len() as u64;
            }
        }
        self.history[direction.index()].push(bytes.clone());
        Delivery { bytes, action }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeliveryAction {
    Untouched,
    Tampered,
    Replayed,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Delivery {
    pub bytes: Vec<u8>,
    pub action: DeliveryAction,
}

/// Server side of a transport: one logical link per client.
pub trait ServerEndpoint: Send {
    fn send(&mut self, client_id: u32, frame: &[u8]) -> Result<(), ChannelError>;
    /// Next frame from `client_id`, FIFO per sender.
    fn recv(&mut self, client_id: u32) -> Result<Vec<u8>, ChannelError>;
}

pub trait ClientEndpoint: Send {
    fn send(&mut self, frame: &[u8]) -> Result<(), ChannelError>;
    fn recv(&mut self) -> Result<Vec<u8>, ChannelError>;
}

/// In-process transport: a dedicated downlink per client and one shared
/// multi-producer uplink queue.
pub struct InProcessServer {
    down: BTreeMap<u32, Sender<Vec<u8>>>,
    up: Receiver<(u32, Vec<u8>)>,
    pending: HashMap<u32, VecDeque<Vec<u8>>>,
}

pub struct InProcessClient {
    id: u32,
    down: Receiver<Vec<u8>>,
    up: Sender<(u32, Vec<u8>)>,
}

pub fn in_process(client_ids: impl IntoIterator<Item = u32>) -> (InProcessServer, Vec<InProcessClient>) {
    let (up_tx, up_rx) = mpsc::channel();
    let mut down = BTreeMap::new();
    let mut clients = Vec::new();
    for id in client_ids {
        let (tx, rx) = mpsc::channel();
        down.insert(id, tx);
        clients.push(InProcessClient {
            id,
            down: rx,
            up: up_tx.clone(),
        });
    }
    (
        InProcessServer {
            down,
            up: up_rx,
            pending: HashMap::new(),
        },
        clients,
    )
}

impl InProcessClient {
    pub fn id(&self) -> u32 {
        self.id
    }
}

impl ServerEndpoint for InProcessServer {
    fn send(&mut self, client_id: u32, frame: &[u8]) -> Result<(), ChannelError> {
        self.down
            .get(&client_id)
            .ok_or(ChannelError::UnknownPeer(client_id))?
            .send(frame.to_vec())
            .map_err(|_| ChannelError::PeerClosed)
    }

    fn recv(&mut self, client_id: u32) -> Result<Vec<u8>, ChannelError> {
        if !self.down.contains_key(&client_id) {
            return Err(ChannelError::UnknownPeer(client_id));
        }
        if let Some(frame) = self.pending.get_mut(&client_id).and_then(VecDeque::pop_front) {
            return Ok(frame);
        }
        loop {
            let (from, frame) = self.up.recv().map_err(|_| ChannelError::PeerClosed)?;
            if from == client_id {
                return Ok(frame);
            }
            self.pending.entry(from).or_default().push_back(frame);
        }
    }
}

impl ClientEndpoint for InProcessClient {
    fn send(&mut self, frame: &[u8]) -> Result<(), ChannelError> {
        self.up
            .send((self.id, frame.to_vec()))
            .map_err(|_| ChannelError::PeerClosed)
    }

    fn recv(&mut self) -> Result<Vec<u8>, ChannelError> {
        self.down.recv().map_err(|_| ChannelError::PeerClosed)
    }
}

pub fn write_frame<W: Write>(w: &mut W, bytes: &[u8]) -> Result<(), ChannelError> {
    let len = u32::try_from(bytes.len()).map_err(|_| ChannelError::FrameTooLarge {
        len: bytes.len(),
        max: u32::MAX as usize,
    })?;
    w.write_all(&len.to_be_bytes())?;
    w.write_all(bytes)?;
    w.flush()?;
    Ok(())
}

/// Reads one frame, refusing lengths above `max_frame` before allocating.
pub fn read_frame<R: Read>(r: &mut R, max_frame: usize) -> Result<Vec<u8>, ChannelError> {
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let len = u32::from_be_bytes(len) as usize;
    if len > max_frame {
        return Err(ChannelError::FrameTooLarge { len, max: max_frame });
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

pub fn tcp_listen<A: ToSocketAddrs>(addr: A) -> Result<TcpListener, ChannelError> {
    TcpListener::bind(addr).map_err(|e| ChannelError::ConnectionFailed(e.to_string()))
}

pub fn tcp_connect<A: ToSocketAddrs>(addr: A) -> Result<TcpStream, ChannelError> {
    let stream = TcpStream::connect(addr).map_err(|e| ChannelError::ConnectionFailed(e.to_string()))?;
    stream.set_nodelay(true)?;
    Ok(stream)
}

pub fn tcp_send_frame(stream: &mut TcpStream, bytes: &[u8]) -> Result<(), ChannelError> {
    write_frame(stream, bytes)
}

pub fn tcp_recv_frame(stream: &mut TcpStream, max_frame: usize) -> Result<Vec<u8>, ChannelError> {
    read_frame(stream, max_frame)
}

/// Receives a frame and decodes it as an envelope.
pub fn tcp_recv_envelope(stream: &mut TcpStream, max_frame: usize) -> Result<SignedEnvelope, ChannelError> {
    Ok(codec::decode_envelope(&tcp_recv_frame(stream, max_frame)?)?)
}

pub struct TcpServerEndpoint {
    streams: BTreeMap<u32, TcpStream>,
    max_frame: usize,
}

impl TcpServerEndpoint {
    pub fn new(streams: BTreeMap<u32, TcpStream>, max_frame: usize) -> Self {
        Self { streams, max_frame }
    }
}

impl ServerEndpoint for TcpServerEndpoint {
    fn send(&mut self, client_id: u32, frame: &[u8]) -> Result<(), ChannelError> {
        let s = self.streams.get_mut(&client_id).ok_or(ChannelError::UnknownPeer(client_id))?;
        write_frame(s, frame)
    }

    fn recv(&mut self, client_id: u32) -> Result<Vec<u8>, ChannelError> {
        let max = self.max_frame;
        let s = self.streams.get_mut(&client_id).ok_or(ChannelError::UnknownPeer(client_id))?;
        read_frame(s, max)
    }
}

pub struct TcpClientEndpoint {
    stream: TcpStream,
    max_frame: usize,
}

impl TcpClientEndpoint {
    pub fn new(stream: TcpStream, max_frame: usize) -> Self {
        Self { stream, max_frame }
    }
}

impl ClientEndpoint for TcpClientEndpoint {
    fn send(&mut self, frame: &[u8]) -> Result<(), ChannelError> {
        write_frame(&mut self.stream, frame)
    }

    fn recv(&mut self) -> Result<Vec<u8>, ChannelError> {
        read_frame(&mut self.stream, self.max_frame)
    }
}
