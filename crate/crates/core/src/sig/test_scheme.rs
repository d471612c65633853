//! HMAC-SHA256 presented through the signature interface.
//!
//! Public key and secret key are the same 32-byte shared key, so anyone who
//! can verify can also sign. Only for fast deterministic tests.

use hmac::{Hmac, Mac};
use rand::RngCore;
use sha2::{Digest, Sha256};

use super::{ParameterSet, SchemeMetadata, SigError, SignatureAdapter};

pub const KEY_LEN: usize = 32;
pub const TAG_LEN: usize = 32;

type HmacSha256 = Hmac<Sha256>;

pub(crate) struct HmacAdapter;

pub(crate) static HMAC_SHA256: HmacAdapter = HmacAdapter;

impl SignatureAdapter for HmacAdapter {
    fn params(&self) -> ParameterSet {
        ParameterSet::HmacSha256
    }

    fn metadata(&self) -> SchemeMetadata {
        SchemeMetadata {
            name: "TestScheme",
            parameter_set: ParameterSet::HmacSha256.name(),
            public_key_len: KEY_LEN,
            secret_key_len: KEY_LEN,
            signature_max_len: TAG_LEN,
            post_quantum: false,
        }
    }

    fn keygen(&self, seed: Option<&[u8; 32]>) -> Result<(Vec<u8>, Vec<u8>), SigError> {
        let key: [u8; KEY_LEN] = match seed {
            Some(seed) => {
                let mut h = Sha256::new();
                h.update(b"pqfl/test-scheme/keygen");
                h.update(seed);
                h.finalize().into()
            }
            None => {
                let mut k = [0u8; KEY_LEN];
                rand::rng().fill_bytes(&mut k);
                k
            }
        };
        Ok((key.to_vec(), key.to_vec()))
    }

    fn sign(&self, secret_key: &[u8], message: &[u8]) -> Result<Vec<u8>, SigError> {
        if secret_key.len() != KEY_LEN {
            return Err(SigError::AdapterFailure(format!(
                "test scheme key must be {KEY_LEN} bytes, got {}",
                secret_key.len()
            )));
        }
        let mut mac = HmacSha256::new_from_slice(secret_key)
            .map_err(|e| SigError::AdapterFailure(e.to_string()))?;
        mac.update(message);
        Ok(mac.finalize().into_bytes().to_vec())
    }

    fn verify(&self, public_key: &[u8], message: &[u8], signature: &[u8]) -> bool {
        if public_key.len() != KEY_LEN || signature.len() != TAG_LEN {
            return false;
        }
        let Ok(mut mac) = HmacSha256::new_from_slice(public_key) else {
            return false;
        };
        mac.update(message);
        mac.verify_slice(signature).is_ok()
    }
}
