use std::time::Instant;

use super::{PhaseTimings, ProtocolConfig, ProtocolError, RegistryEntry, SERVER_ID};
use crate::codec::{self, CodecError, MessageHeader, MessageType, SignedEnvelope};
use crate::fedcore::{client_train_seed, local_train, Architecture, ClientDataset, GlobalModel, ModelUpdate, TrainConfig};
use crate::sig::{self, KeyPair};

pub struct ClientState {
    client_id: u32,
    keypair: KeyPair,
    server_key: RegistryEntry,
    dataset: ClientDataset,
    architecture: Architecture,
    cfg: TrainConfig,
    protocol: ProtocolConfig,
    last_accepted: Option<u32>,
    /// One model broadcast arrives per round, so the n-th broadcast a
    /// client sees must carry round n.
    expected_round: u32,
}

impl ClientState {
    pub fn new(
        client_id: u32,
        keypair: KeyPair,
        server_key: RegistryEntry,
        dataset: ClientDataset,
        architecture: Architecture,
        cfg: TrainConfig,
        protocol: ProtocolConfig,
    ) -> Self {
        Self {
            client_id,
            keypair,
            server_key,
            dataset,
            architecture,
            cfg,
            protocol,
            last_accepted: None,
            expected_round: 0,
        }
    }

    pub fn id(&self) -> u32 {
        self.client_id
    }

    pub fn last_accepted_round(&self) -> Option<u32> {
        self.last_accepted
    }

    pub fn keypair(&self) -> &KeyPair {
        &self.keypair
    }

    pub fn rounds(&self) -> u32 {
        self.cfg.num_rounds
    }
}

/// Accepts a model broadcast if it comes from the server, verifies under
/// the server key and is newer than anything accepted before.
pub fn client_receive_model(client: &mut ClientState, env: &SignedEnvelope) -> Result<GlobalModel, ProtocolError> {
    let mut timings = PhaseTimings::default();
    receive(client, env, &mut timings)
}

/// Decodes the frame first; undecodable bytes are `MalformedEnvelope`.
pub fn client_receive_model_bytes(client: &mut ClientState, frame: &[u8]) -> Result<GlobalModel, ProtocolError> {
    let mut timings = PhaseTimings::default();
    receive_bytes(client, frame, &mut timings)
}

fn receive_bytes(client: &mut ClientState, frame: &[u8], timings: &mut PhaseTimings) -> Result<GlobalModel, ProtocolError> {
    let start = Instant::now();
    let decoded = codec::decode_envelope(frame);
    timings.serialize += start.elapsed();
    match decoded {
        Ok(env) => receive(client, &env, timings),
        Err(e) => {
            client.expected_round += 1;
            Err(e.into())
        }
    }
}

fn receive(client: &mut ClientState, env: &SignedEnvelope, timings: &mut PhaseTimings) -> Result<GlobalModel, ProtocolError> {
    let expected = client.expected_round;
    client.expected_round += 1;
    let h = &env.header;
    if h.msg_type != MessageType::ModelDistribution {
        return Err(ProtocolError::WrongMessageType(h.msg_type));
    }
    if h.sender_id != SERVER_ID {
        return Err(ProtocolError::WrongSender {
            expected: SERVER_ID,
            got: h.sender_id,
        });
    }
    if client.protocol.verify_signatures {
        let start = Instant::now();
        let ok = h.scheme == client.server_key.params.scheme()
            && sig::verify(
                &client.server_key.public_key,
                client.server_key.params,
                &client.protocol.message_to_sign(h, &env.payload),
                &env.signature,
            );
        timings.verify += start.elapsed();
        if !ok {
            return Err(ProtocolError::SignatureInvalid);
        }
    }
    if let Some(last) = client.last_accepted {
        if h.round <= last {
            return Err(ProtocolError::ReplayDetected { round: h.round, last });
        }
    }
    if h.round < expected {
        return Err(ProtocolError::ReplayDetected {
            round: h.round,
            last: expected.saturating_sub(1),
        });
    }
    if h.round > expected {
        return Err(ProtocolError::UnexpectedRound { expected, got: h.round });
    }
    let start = Instant::now();
    let params = codec::decode_params(&env.payload)?;
    timings.serialize += start.elapsed();
    if params.len() != client.architecture.param_count() {
        return Err(CodecError::MalformedPayload(format!(
            "model has {} values, architecture needs {}",
            params.len(),
            client.architecture.param_count()
        ))
        .into());
    }
    let model = GlobalModel {
        params,
        architecture: client.architecture.clone(),
        round: h.round,
    };
    client.last_accepted = Some(h.round);
    Ok(model)
}

/// Signs an update for the round this client last accepted.
pub fn client_submit_update(client: &ClientState, update: &ModelUpdate) -> Result<SignedEnvelope, ProtocolError> {
    let mut timings = PhaseTimings::default();
    submit(client, update, &mut timings)
}

fn submit(client: &ClientState, update: &ModelUpdate, timings: &mut PhaseTimings) -> Result<SignedEnvelope, ProtocolError> {
    if client.last_accepted != Some(update.round) {
        return Err(ProtocolError::NotCurrentRound {
            client: client.client_id,
            update: update.round,
            current: client.last_accepted,
        });
    }
    let start = Instant::now();
    let payload = codec::encode_params(&update.delta)?;
    timings.serialize += start.elapsed();
    let header = MessageHeader {
        msg_type: MessageType::UpdateSubmission,
        scheme: client.keypair.scheme(),
        round: update.round,
        sender_id: client.client_id,
        payload_len: payload.len() as u64,
    };
    let start = Instant::now();
    let signature = sig::sign(&client.keypair, &client.protocol.message_to_sign(&header, &payload))?;
    timings.sign += start.elapsed();
    Ok(SignedEnvelope {
        header,
        payload,
        signature,
    })
}

/// What a client sends back for one broadcast.
#[derive(Debug)]
pub enum ClientReply {
    /// Encoded, signed update envelope.
    Update(Vec<u8>),
    /// The client sits this round out.
    Abstain(String),
}

/// One full client turn: verify the broadcast, train, sign the delta.
pub fn client_step(client: &mut ClientState, frame: &[u8]) -> (ClientReply, PhaseTimings) {
    let mut timings = PhaseTimings::default();
    let reply = match step(client, frame, &mut timings) {
        Ok(bytes) => ClientReply::Update(bytes),
        Err(e) => ClientReply::Abstain(e.to_string()),
    };
    (reply, timings)
}

fn step(client: &mut ClientState, frame: &[u8], timings: &mut PhaseTimings) -> Result<Vec<u8>, ProtocolError> {
    let model = receive_bytes(client, frame, timings)?;
    let start = Instant::now();
    let update = local_train(
        &model,
        &client.dataset,
        &client.cfg,
        client.client_id,
        client_train_seed(client.cfg.seed, model.round, client.client_id),
    )?;
    timings.train += start.elapsed();
    let env = submit(client, &update, timings)?;
    let start = Instant::now();
    let bytes = codec::encode_envelope(&env)?;
    timings.serialize += start.elapsed();
    Ok(bytes)
}
