//! Cross-checks vetting signatures against an independent Ed25519
//! implementation.

use airlock_core::attestation::{sign_offline, SecretSeed, SignatureBytes, VettingSignature};
use airlock_core::{Digest, Random256, Timestamp};
use ed25519_dalek::VerifyingKey;
use proptest::prelude::*;
use ring::signature::{Ed25519KeyPair, KeyPair, UnparsedPublicKey, ED25519};

// RFC 8032 section 7.1, test 1 (empty message).
const RFC_SEED: &str = "9d61b19deffd5a60ba844af492ec2cc44449c5697b326919703bac031cae7f60";
const RFC_PUBLIC: &str = "d75a980182b10ab7d54bfed3c964073a0ee172f3daa62325af021a68f707511a";
const RFC_SIG: &str = "e5564300c360ac729086e2cc806e828a84877f1eb8e5d974d873e065224901555fb8821590a33bacc61e39701cf9b46bd25bf5f0595bbe24655141438e7a100b";

#[test]
fn ring_agrees_with_the_published_vector() {
    let seed = hex::decode(RFC_SEED).unwrap();
    let pair = Ed25519KeyPair::from_seed_unchecked(&seed).unwrap();
    assert_eq!(hex::encode(pair.public_key().as_ref()), RFC_PUBLIC);
    assert_eq!(hex::encode(pair.sign(b"").as_ref()), RFC_SIG);
    assert_eq!(hex::encode(SecretSeed::from_bytes(&seed).unwrap().public_key().0), RFC_PUBLIC);
}

fn sample(seed: &[u8; 32], nonce: [u8; 32], at: i64) -> VettingSignature {
    sign_offline(
        "6f1d2c3b-4a59-4e8d-9c7b-0a1b2c3d4e5f",
        "vetter-7",
        Digest::of(b"bundle bytes"),
        Random256(nonce),
        &SecretSeed::from_bytes(seed).unwrap(),
        Timestamp::from_millis(at),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn signatures_match_ring_byte_for_byte(seed in any::<[u8; 32]>(), nonce in any::<[u8; 32]>(), at in 0i64..4_102_444_800_000) {
        let ours = sample(&seed, nonce, at);
        let pair = Ed25519KeyPair::from_seed_unchecked(&seed).unwrap();
        let public = SecretSeed::from_bytes(&seed).unwrap().public_key();
        prop_assert_eq!(pair.public_key().as_ref(), &public.0[..]);

        let message = ours.signed_message();
        let reference = pair.sign(&message);
        prop_assert_eq!(reference.as_ref(), &ours.signature.0[..]);
        prop_assert!(UnparsedPublicKey::new(&ED25519, public.0).verify(&message, &ours.signature.0).is_ok());

        // A signature produced by ring verifies through our path.
        let mut theirs = ours.clone();
        theirs.signature = SignatureBytes(reference.as_ref().try_into().unwrap());
        prop_assert!(theirs.verify_with(&VerifyingKey::from_bytes(&public.0).unwrap()));

        // Neither side accepts a flipped signature.
        let mut bad = ours.signature.0;
        bad[(at as usize) % 64] ^= 0x80;
        prop_assert!(UnparsedPublicKey::new(&ED25519, public.0).verify(&message, &bad).is_err());
        theirs.signature = SignatureBytes(bad);
        prop_assert!(!theirs.verify_with(&VerifyingKey::from_bytes(&public.0).unwrap()));
    }
}
