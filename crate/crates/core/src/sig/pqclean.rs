//! Adapters over the PQClean reference implementations.
//!
//! Every adapter signs `PREHASH_TAG || SHA-256(message)` instead of the raw
//! message, so the per-scheme cost does not drown in hashing multi-megabyte
//! payloads with each scheme's internal XOF. Keygen draws system entropy; a
//! supplied seed is ignored because PQClean exposes no seeded keygen.

use pqcrypto_traits::sign::{DetachedSignature, PublicKey, SecretKey};
use sha2::{Digest, Sha256};

use super::{ParameterSet, SchemeMetadata, SigError, SignatureAdapter};

const PREHASH_TAG: &[u8; 16] = b"pqfl/sha256/v1\0\0";

pub(crate) fn prehash(message: &[u8]) -> [u8; 48] {
    let mut out = [0u8; 48];
    out[..16].copy_from_slice(PREHASH_TAG);
    out[16..].copy_from_slice(&Sha256::digest(message));
    out
}

macro_rules! pqclean_adapter {
    ($adapter:ident, $konst:ident, $module:path, $params:expr, $family:expr, [$pk:expr, $sk:expr, $sig:expr]) => {
        pub(crate) struct $adapter;

        pub(crate) static $konst: $adapter = $adapter;

        impl SignatureAdapter for $adapter {
            fn params(&self) -> ParameterSet {
                $params
            }

            fn metadata(&self) -> SchemeMetadata {
                SchemeMetadata {
                    name: $family,
                    parameter_set: $params.name(),
                    public_key_len: $pk,
                    secret_key_len: $sk,
                    signature_max_len: $sig,
                    post_quantum: true,
                }
            }

            fn keygen(&self, _seed: Option<&[u8; 32]>) -> Result<(Vec<u8>, Vec<u8>), SigError> {
                use $module as imp;
                let (pk, sk) = imp::keypair();
                Ok((pk.as_bytes().to_vec(), sk.as_bytes().to_vec()))
            }

            fn sign(&self, secret_key: &[u8], message: &[u8]) -> Result<Vec<u8>, SigError> {
                use $module as imp;
                let sk = imp::SecretKey::from_bytes(secret_key)
                    .map_err(|e| SigError::AdapterFailure(e.to_string()))?;
                let sig = imp::detached_sign(&prehash(message), &sk);
                Ok(sig.as_bytes().to_vec())
            }

            fn verify(&self, public_key: &[u8], message: &[u8], signature: &[u8]) -> bool {
                use $module as imp;
                if signature.is_empty() {
                    return false;
                }
                let (Ok(pk), Ok(sig)) = (
                    imp::PublicKey::from_bytes(public_key),
                    imp::DetachedSignature::from_bytes(signature),
                ) else {
                    return false;
                };
                imp::verify_detached_signature(&sig, &prehash(message), &pk).is_ok()
            }
        }
    };
}

pqclean_adapter!(MlDsa44, ML_DSA_44, pqcrypto_mldsa::mldsa44, ParameterSet::MlDsa44, "Dilithium", [1312, 2560, 2420]);
pqclean_adapter!(MlDsa65, ML_DSA_65, pqcrypto_mldsa::mldsa65, ParameterSet::MlDsa65, "Dilithium", [1952, 4032, 3309]);
pqclean_adapter!(MlDsa87, ML_DSA_87, pqcrypto_mldsa::mldsa87, ParameterSet::MlDsa87, "Dilithium", [2592, 4896, 4627]);
pqclean_adapter!(Falcon512, FALCON_512, pqcrypto_falcon::falcon512, ParameterSet::Falcon512, "Falcon", [897, 1281, 752]);
pqclean_adapter!(Falcon1024, FALCON_1024, pqcrypto_falcon::falcon1024, ParameterSet::Falcon1024, "Falcon", [1793, 2305, 1462]);
pqclean_adapter!(
    SphincsSha2_128s,
    SPHINCS_SHA2_128S,
    pqcrypto_sphincsplus::sphincssha2128ssimple,
    ParameterSet::SphincsSha2_128s,
    "SPHINCS+",
    [32, 64, 7856]
);
pqclean_adapter!(
    SphincsSha2_128f,
    SPHINCS_SHA2_128F,
    pqcrypto_sphincsplus::sphincssha2128fsimple,
    ParameterSet::SphincsSha2_128f,
    "SPHINCS+",
    [32, 64, 17088]
);

#[cfg(test)]
mod tests {
    use super::*;

    // The literal sizes above are checked against the library constants.
    #[test]
    fn literal_sizes_match_library_constants() {
        let cases: [(ParameterSet, [usize; 3]); 7] = [
            (
                ParameterSet::MlDsa44,
                [
                    pqcrypto_mldsa::mldsa44::public_key_bytes(),
                    pqcrypto_mldsa::mldsa44::secret_key_bytes(),
                    pqcrypto_mldsa::mldsa44::signature_bytes(),
                ],
            ),
            (
                ParameterSet::MlDsa65,
                [
                    pqcrypto_mldsa::mldsa65::public_key_bytes(),
                    pqcrypto_mldsa::mldsa65::secret_key_bytes(),
                    pqcrypto_mldsa::mldsa65::signature_bytes(),
                ],
            ),
            (
                ParameterSet::MlDsa87,
                [
                    pqcrypto_mldsa::mldsa87::public_key_bytes(),
                    pqcrypto_mldsa::mldsa87::secret_key_bytes(),
                    pqcrypto_mldsa::mldsa87::signature_bytes(),
                ],
            ),
            (
                ParameterSet::Falcon512,
                [
                    pqcrypto_falcon::falcon512::public_key_bytes(),
                    pqcrypto_falcon::falcon512::secret_key_bytes(),
                    pqcrypto_falcon::falcon512::signature_bytes(),
                ],
            ),
            (
                ParameterSet::Falcon1024,
                [
                    pqcrypto_falcon::falcon1024::public_key_bytes(),
                    pqcrypto_falcon::falcon1024::secret_key_bytes(),
                    pqcrypto_falcon::falcon1024::signature_bytes(),
                ],
            ),
            (
                ParameterSet::SphincsSha2_128s,
                [
                    pqcrypto_sphincsplus::sphincssha2128ssimple::public_key_bytes(),
                    pqcrypto_sphincsplus::sphincssha2128ssimple::secret_key_bytes(),
                    pqcrypto_sphincsplus::sphincssha2128ssimple::signature_bytes(),
                ],
            ),
            (
                ParameterSet::SphincsSha2_128f,
                [
                    pqcrypto_sphincsplus::sphincssha2128fsimple::public_key_bytes(),
                    pqcrypto_sphincsplus::sphincssha2128fsimple::secret_key_bytes(),
                    pqcrypto_sphincsplus::sphincssha2128fsimple::signature_bytes(),
                ],
            ),
        ];
        for (params, [pk, sk, sig]) in cases {
            let meta = super::super::metadata(params);
            assert_eq!(meta.public_key_len, pk, "{params}");
            assert_eq!(meta.secret_key_len, sk, "{params}");
            assert_eq!(meta.signature_max_len, sig, "{params}");
        }
    }

    #[test]
    fn prehash_is_tagged_digest() {
        let h = prehash(b"abc");
        assert_eq!(&h[..16], PREHASH_TAG);
        assert_eq!(&h[16..], Sha256::digest(b"abc").as_slice());
    }

    #[test]
    fn bad_key_bytes_surface_as_adapter_failure() {
        let err = FALCON_1024.sign(&[0u8; 3], b"m").unwrap_err();
        assert!(matches!(err, SigError::AdapterFailure(_)));
        assert!(!FALCON_1024.verify(&[0u8; 3], b"m", &[1, 2, 3]));
    }
}
