//! Federated averaging with post-quantum signed model exchange.
//!
//! Every model broadcast and every client update travels as a
//! [`codec::SignedEnvelope`] whose signature binds the payload, the round
//! and the sender. The server aggregates only the updates that verify under
//! the trusted [`protocol::KeyRegistry`], which defeats outsider tampering,
//! substitution and replay on the wire.
//!
//! Modules, bottom up:
//! - [`sig`]: signature adapters (ML-DSA, Falcon, SPHINCS+, and an HMAC test scheme)
//! - [`codec`]: canonical byte layouts for parameter vectors and envelopes
//! - [`fedcore`]: datasets, MLP training, FedAvg aggregation
//! - [`channel`]: in-process and TCP transports with attack injection
//! - [`protocol`]: server/client state machines and the round driver
//! - [`bench`]: round metrics, CSV output, signature microbenchmarks

pub mod bench;
pub mod channel;
pub mod codec;
pub mod fedcore;
pub mod protocol;
pub mod seed;
pub mod sig;
