//! Digital-signature abstraction used for every protocol message.
//!
//! Schemes are selected by [`SchemeId`] (the one-byte wire code) and a
//! concrete [`ParameterSet`]. Each parameter set is served by a stateless
//! [`SignatureAdapter`]; adapters are `Send + Sync` so that simulated clients
//! can sign and verify from their own threads.
//!
//! The post-quantum adapters wrap the PQClean implementations and sign a
//! SHA-256 prehash of the message (see [`pqclean`]). [`SchemeId::TestScheme`]
//! is an HMAC construction that exists for fast tests only: it is not
//! post-quantum, not even asymmetric, and is refused in strict mode.

mod pqclean;
mod test_scheme;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SigError {
    #[error("unsupported signature scheme (wire code {0})")]
    UnsupportedScheme(u8),
    #[error("unknown scheme or parameter set name {0:?}")]
    UnknownName(String),
    #[error("parameter set {params} does not belong to scheme {scheme}")]
    ParameterSetMismatch { scheme: SchemeId, params: ParameterSet },
    #[error("{0} is not post-quantum and is refused in strict mode")]
    StrictModeViolation(SchemeId),
    #[error("refusing to sign an empty message")]
    EmptyMessage,
    #[error("signature adapter failure: {0}")]
    AdapterFailure(String),
}

/// Signature scheme family, carried on the wire as a single byte.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SchemeId {
    Dilithium,
    Falcon,
    SphincsPlus,
    TestScheme,
}

impl SchemeId {
    pub const ALL: [SchemeId; 4] = [
        SchemeId::Dilithium,
        SchemeId::Falcon,
        SchemeId::SphincsPlus,
        SchemeId::TestScheme,
    ];

    /// The three NIST-standardized families.
    pub const POST_QUANTUM: [SchemeId; 3] =
        [SchemeId::Dilithium, SchemeId::Falcon, SchemeId::SphincsPlus];

    pub fn code(self) -> u8 {
        match self {
            SchemeId::Dilithium => 1,
            SchemeId::Falcon => 2,
            SchemeId::SphincsPlus => 3,
            SchemeId::TestScheme => 4,
        }
    }

    pub fn from_code(code: u8) -> Result<Self, SigError> {
        match code {
            1 => Ok(SchemeId::Dilithium),
            2 => Ok(SchemeId::Falcon),
            3 => Ok(SchemeId::SphincsPlus),
            4 => Ok(SchemeId::TestScheme),
            other => Err(SigError::UnsupportedScheme(other)),
        }
    }

    pub fn is_post_quantum(self) -> bool {
        self != SchemeId::TestScheme
    }

    /// Parameter set used when none is configured: the lowest standardized
    /// level for Dilithium and SPHINCS+, and Falcon-1024 for Falcon so that
    /// Falcon keeps the largest public key of the three.
    pub fn default_params(self) -> ParameterSet {
        match self {
            SchemeId::Dilithium => ParameterSet::MlDsa44,
            SchemeId::Falcon => ParameterSet::Falcon1024,
            SchemeId::SphincsPlus => ParameterSet::SphincsSha2_128s,
            SchemeId::TestScheme => ParameterSet::HmacSha256,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SchemeId::Dilithium => "dilithium",
            SchemeId::Falcon => "falcon",
            SchemeId::SphincsPlus => "sphincsplus",
            SchemeId::TestScheme => "test",
        }
    }
}

impl fmt::Display for SchemeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SchemeId {
    type Err = SigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "dilithium" | "ml-dsa" | "mldsa" => Ok(SchemeId::Dilithium),
            "falcon" | "fn-dsa" => Ok(SchemeId::Falcon),
            "sphincsplus" | "sphincs+" | "sphincs" | "slh-dsa" => Ok(SchemeId::SphincsPlus),
            "test" | "testscheme" | "test-scheme" => Ok(SchemeId::TestScheme),
            _ => Err(SigError::UnknownName(s.to_string())),
        }
    }
}

/// Concrete parameter set of a scheme family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ParameterSet {
    MlDsa44,
    MlDsa65,
    MlDsa87,
    Falcon512,
    Falcon1024,
    SphincsSha2_128s,
    SphincsSha2_128f,
    HmacSha256,
}

impl ParameterSet {
    pub const ALL: [ParameterSet; 8] = [
        ParameterSet::MlDsa44,
        ParameterSet::MlDsa65,
        ParameterSet::MlDsa87,
        ParameterSet::Falcon512,
        ParameterSet::Falcon1024,
        ParameterSet::SphincsSha2_128s,
        ParameterSet::SphincsSha2_128f,
        ParameterSet::HmacSha256,
    ];

    pub fn scheme(self) -> SchemeId {
        match self {
            ParameterSet::MlDsa44 | ParameterSet::MlDsa65 | ParameterSet::MlDsa87 => {
                SchemeId::Dilithium
            }
            ParameterSet::Falcon512 | ParameterSet::Falcon1024 => SchemeId::Falcon,
            ParameterSet::SphincsSha2_128s | ParameterSet::SphincsSha2_128f => {
                SchemeId::SphincsPlus
            }
            ParameterSet::HmacSha256 => SchemeId::TestScheme,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ParameterSet::MlDsa44 => "ML-DSA-44",
            ParameterSet::MlDsa65 => "ML-DSA-65",
            ParameterSet::MlDsa87 => "ML-DSA-87",
            ParameterSet::Falcon512 => "Falcon-512",
            ParameterSet::Falcon1024 => "Falcon-1024",
            ParameterSet::SphincsSha2_128s => "SPHINCS+-SHA2-128s-simple",
            ParameterSet::SphincsSha2_128f => "SPHINCS+-SHA2-128f-simple",
            ParameterSet::HmacSha256 => "HMAC-SHA256",
        }
    }
}

impl fmt::Display for ParameterSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ParameterSet {
    type Err = SigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let wanted = s.to_ascii_lowercase();
        ParameterSet::ALL
            .into_iter()
            .find(|p| p.name().to_ascii_lowercase() == wanted)
            .or(match wanted.as_str() {
                "sphincs-128s" | "slh-dsa-128s" => Some(ParameterSet::SphincsSha2_128s),
                "sphincs-128f" | "slh-dsa-128f" => Some(ParameterSet::SphincsSha2_128f),
                "hmac" => Some(ParameterSet::HmacSha256),
                _ => None,
            })
            .ok_or_else(|| SigError::UnknownName(s.to_string()))
    }
}

/// Machine-readable size characteristics of a parameter set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SchemeMetadata {
    pub name: &'static str,
    pub parameter_set: &'static str,
    pub public_key_len: usize,
    pub secret_key_len: usize,
    pub signature_max_len: usize,
    pub post_quantum: bool,
}

#[derive(Clone, PartialEq, Eq)]
pub struct KeyPair {
    pub params: ParameterSet,
    pub public_key: Vec<u8>,
    pub secret_key: Vec<u8>,
}

impl KeyPair {
    pub fn scheme(&self) -> SchemeId {
        self.params.scheme()
    }
}

// Keeps secret keys out of logs.
impl fmt::Debug for KeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeyPair")
            .field("params", &self.params)
            .field("public_key_len", &self.public_key.len())
            .field("secret_key", &"<redacted>")
            .finish()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SignatureBytes {
    pub scheme: SchemeId,
    pub bytes: Vec<u8>,
}

impl SignatureBytes {
    pub fn len(&self) -> usize {
        self.bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }
}

/// One signature implementation behind the common interface.
///
/// `verify` must never panic and must map every cryptographic or parsing
/// failure to `false`.
pub trait SignatureAdapter: Send + Sync {
    fn params(&self) -> ParameterSet;
    fn metadata(&self) -> SchemeMetadata;
    fn keygen(&self, seed: Option<&[u8; 32]>) -> Result<(Vec<u8>, Vec<u8>), SigError>;
    fn sign(&self, secret_key: &[u8], message: &[u8]) -> Result<Vec<u8>, SigError>;
    fn verify(&self, public_key: &[u8], message: &[u8], signature: &[u8]) -> bool;
}

/// Returns the compiled-in adapter for a parameter set.
pub fn adapter(params: ParameterSet) -> &'static dyn SignatureAdapter {
    match params {
        ParameterSet::MlDsa44 => &pqclean::ML_DSA_44,
        ParameterSet::MlDsa65 => &pqclean::ML_DSA_65,
        ParameterSet::MlDsa87 => &pqclean::ML_DSA_87,
        ParameterSet::Falcon512 => &pqclean::FALCON_512,
        ParameterSet::Falcon1024 => &pqclean::FALCON_1024,
        ParameterSet::SphincsSha2_128s => &pqclean::SPHINCS_SHA2_128S,
        ParameterSet::SphincsSha2_128f => &pqclean::SPHINCS_SHA2_128F,
        ParameterSet::HmacSha256 => &test_scheme::HMAC_SHA256,
    }
}

/// Fails when `strict` is set and the scheme is not post-quantum.
pub fn ensure_allowed(scheme: SchemeId, strict: bool) -> Result<(), SigError> {
    if strict && !scheme.is_post_quantum() {
        return Err(SigError::StrictModeViolation(scheme));
    }
    Ok(())
}

/// Generates a key pair. The seed is honoured by [`SchemeId::TestScheme`]
/// only; PQClean draws its own system entropy and ignores it.
pub fn keygen(params: ParameterSet, seed: Option<&[u8; 32]>) -> Result<KeyPair, SigError> {
    let (public_key, secret_key) = adapter(params).keygen(seed)?;
    Ok(KeyPair {
        params,
        public_key,
        secret_key,
    })
}

pub fn sign(keypair: &KeyPair, message: &[u8]) -> Result<SignatureBytes, SigError> {
    if message.is_empty() {
        return Err(SigError::EmptyMessage);
    }
    let bytes = adapter(keypair.params).sign(&keypair.secret_key, message)?;
    Ok(SignatureBytes {
        scheme: keypair.scheme(),
        bytes,
    })
}

/// Checks `signature` over `message`. A signature tagged with a different
/// scheme family than `params` is simply invalid.
pub fn verify(
    public_key: &[u8],
    params: ParameterSet,
    message: &[u8],
    signature: &SignatureBytes,
) -> bool {
    signature.scheme == params.scheme()
        && signature.bytes.len() <= metadata(params).signature_max_len
        && adapter(params).verify(public_key, message, &signature.bytes)
}

/// Same as [`verify`] but addressed by wire code, which is where
/// `UnsupportedScheme` can arise.
pub fn verify_by_code(
    public_key: &[u8],
    scheme_code: u8,
    message: &[u8],
    signature: &SignatureBytes,
) -> Result<bool, SigError> {
    let scheme = SchemeId::from_code(scheme_code)?;
    Ok(verify(public_key, scheme.default_params(), message, signature))
}

pub fn metadata(params: ParameterSet) -> SchemeMetadata {
    adapter(params).metadata()
}
