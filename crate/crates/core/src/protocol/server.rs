use std::collections::BTreeSet;
use std::sync::Arc;
use std::time::{Duration, Instant};

use log::warn;

use super::{KeyRegistry, PhaseTimings, ProtocolConfig, ProtocolError, Rejection, SERVER_ID};
use crate::codec::{self, MessageHeader, MessageType, SignedEnvelope};
use crate::fedcore::{aggregate, forward_loss, ClientDataset, FedError, GlobalModel, ModelUpdate, TrainConfig};
use crate::sig::{self, KeyPair};

pub struct ServerState {
    pub(crate) model: GlobalModel,
    keypair: KeyPair,
    registry: Arc<KeyRegistry>,
    cfg: TrainConfig,
    protocol: ProtocolConfig,
    eval: ClientDataset,
}

impl ServerState {
    pub fn new(
        model: GlobalModel,
        keypair: KeyPair,
        registry: Arc<KeyRegistry>,
        cfg: TrainConfig,
        protocol: ProtocolConfig,
        eval: ClientDataset,
    ) -> Self {
        Self {
            model,
            keypair,
            registry,
            cfg,
            protocol,
            eval,
        }
    }

    pub fn model(&self) -> &GlobalModel {
        &self.model
    }

    pub fn round(&self) -> u32 {
        self.model.round
    }

    pub fn registry(&self) -> &KeyRegistry {
        &self.registry
    }

    pub fn public_key(&self) -> &[u8] {
        &self.keypair.public_key
    }

    pub fn protocol(&self) -> ProtocolConfig {
        self.protocol
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn eval_loss(&self) -> Result<f64, FedError> {
        forward_loss(&self.model, &self.eval)
    }

    /// Aggregates `verified` into the model, or carries the parameters over
    /// unchanged when nothing verified. Either way the round advances.
    /// Returns whether the round was skipped.
    pub fn advance(&mut self, verified: &[ModelUpdate]) -> Result<bool, ProtocolError> {
        match aggregate(&self.model, verified) {
            Ok(next) => {
                self.model = next;
                Ok(false)
            }
            Err(FedError::EmptyVerifiedSet) => {
                warn!("round {}: no verified updates, keeping the global model", self.model.round);
                self.model = self.model.with_params(self.model.params.clone(), self.model.round + 1)?;
                Ok(true)
            }
            Err(e) => Err(e.into()),
        }
    }
}

/// Signs the current global model for broadcast. Also returns the time
/// spent serialising and signing.
pub fn distribute_model(server: &ServerState) -> Result<(SignedEnvelope, PhaseTimings), ProtocolError> {
    let round = server.model.round;
    if round >= server.cfg.num_rounds {
        return Err(ProtocolError::RoundsExhausted(server.cfg.num_rounds));
    }
    let mut timings = PhaseTimings::default();
    let start = Instant::now();
    let payload = codec::encode_params(&server.model.params)?;
    timings.serialize += start.elapsed();
    let header = MessageHeader {
        msg_type: MessageType::ModelDistribution,
        scheme: server.keypair.scheme(),
        round,
        sender_id: SERVER_ID,
        payload_len: payload.len() as u64,
    };
    let start = Instant::now();
    let signature = sig::sign(&server.keypair, &server.protocol.message_to_sign(&header, &payload))?;
    timings.sign += start.elapsed();
    Ok((
        SignedEnvelope {
            header,
            payload,
            signature,
        },
        timings,
    ))
}

/// Checks one submission against the registry and the current round.
/// Duplicates are the caller's concern.
pub fn verify_submission(
    server: &ServerState,
    env: &SignedEnvelope,
    verify_time: &mut Duration,
) -> Result<ModelUpdate, Rejection> {
    let h = &env.header;
    if h.msg_type != MessageType::UpdateSubmission {
        return Err(Rejection::WrongMessageType(h.msg_type.code()));
    }
    let entry = match server.registry.get(h.sender_id) {
        Some(e) if h.sender_id != SERVER_ID => e,
        _ => return Err(Rejection::UnknownSender(h.sender_id)),
    };
    if h.scheme != entry.params.scheme() {
        return Err(Rejection::SchemeMismatch);
    }
    let current = server.model.round;
    if h.round < current {
        return Err(Rejection::StaleRound(h.round));
    }
    if h.round > current {
        return Err(Rejection::FutureRound(h.round));
    }
    if server.protocol.verify_signatures {
        let start = Instant::now();
        let ok = sig::verify(
            &entry.public_key,
            entry.params,
            &server.protocol.message_to_sign(h, &env.payload),
            &env.signature,
        );
        *verify_time += start.elapsed();
        if !ok {
            return Err(Rejection::SignatureInvalid);
        }
    }
    let delta = codec::decode_params(&env.payload).map_err(|e| Rejection::InvalidPayload(e.to_string()))?;
    if delta.shape() != server.model.params.shape() {
        return Err(Rejection::InvalidPayload(format!(
            "shape {:?} does not match model {:?}",
            delta.shape(),
            server.model.params.shape()
        )));
    }
    Ok(ModelUpdate {
        delta,
        client_id: h.sender_id,
        round: h.round,
    })
}

/// Result of checking one round's submissions.
#[derive(Debug, Clone, Default)]
pub struct Collected {
    /// The verified set S, ascending by client id.
    pub verified: Vec<ModelUpdate>,
    /// `(claimed sender, reason)`; the sender is 0 when the envelope did not
    /// decode.
    pub rejected: Vec<(u32, Rejection)>,
    /// For each input frame, whether it entered S.
    pub accepted: Vec<bool>,
    pub timings: PhaseTimings,
}

/// Builds S from raw submission frames: each must decode, be an update for
/// the current round from a registered client, verify under that client's
/// registered key, and be the first valid one from that client.
pub fn server_collect_and_verify(server: &ServerState, frames: &[Vec<u8>]) -> Collected {
    let mut out = Collected::default();
    let mut seen = BTreeSet::new();
    for frame in frames {
        let start = Instant::now();
        let decoded = codec::decode_envelope(frame);
        out.timings.serialize += start.elapsed();
        let env = match decoded {
            Ok(env) => env,
            Err(e) => {
                out.rejected.push((0, Rejection::Malformed(e.to_string())));
                out.accepted.push(false);
                continue;
            }
        };
        let sender = env.header.sender_id;
        match verify_submission(server, &env, &mut out.timings.verify) {
            Ok(update) => {
                if seen.insert(update.client_id) {
                    out.verified.push(update);
                    out.accepted.push(true);
                } else {
                    out.rejected.push((sender, Rejection::Duplicate));
                    out.accepted.push(false);
                }
            }
            Err(reason) => {
                out.rejected.push((sender, reason));
                out.accepted.push(false);
            }
        }
    }
    out.verified.sort_by_key(|u| u.client_id);
    out
}
