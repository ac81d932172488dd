//! Canonical wire encoding shared by every zone.
//!
//! All inter-zone payloads, audit records and signed messages are JSON with
//! lexicographically sorted keys and no insignificant whitespace. Byte strings
//! travel as lowercase hex. Digests are SHA-256 over that canonical form.

use std::fmt;
use std::sync::Mutex;

use chrono::{DateTime, Duration, NaiveDateTime, TimeZone, Utc};
use serde::de::{self, DeserializeOwned};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest as _, Sha256};

/// Serialises `value` to canonical JSON bytes.
///
/// `serde_json::Value` keeps object keys in a `BTreeMap`, so a round trip
/// through it yields sorted keys; `to_vec` emits no whitespace.
pub fn to_canonical_json<T: Serialize + ?Sized>(value: &T) -> Vec<u8> {
    let tree = serde_json::to_value(value).expect("domain types serialise to JSON");
    serde_json::to_vec(&tree).expect("JSON values always encode")
}

/// Parses canonical JSON and rejects any input that is not byte-identical to
/// its own canonical re-encoding.
pub fn from_canonical_json<T: Serialize + DeserializeOwned>(bytes: &[u8]) -> Result<T, CanonicalError> {
    let value: T = serde_json::from_slice(bytes).map_err(|e| CanonicalError::Parse(e.to_string()))?;
    if to_canonical_json(&value) != bytes {
        return Err(CanonicalError::NotCanonical);
    }
    Ok(value)
}

/// SHA-256 of the canonical JSON encoding of `value`.
pub fn digest_canonical<T: Serialize + ?Sized>(value: &T) -> Digest {
    Digest::of(&to_canonical_json(value))
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CanonicalError {
    #[error("malformed JSON: {0}")]
    Parse(String),
    #[error("JSON is not in canonical form")]
    NotCanonical,
}

/// Decodes lowercase hex only. Uppercase digits are rejected so that every
/// value has exactly one textual encoding.
pub fn decode_lower_hex(text: &str) -> Result<Vec<u8>, HexError> {
    if text.bytes().any(|b| b.is_ascii_uppercase()) {
        return Err(HexError::NotLowercase);
    }
    hex::decode(text).map_err(|_| HexError::Invalid)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum HexError {
    #[error("invalid hex")]
    Invalid,
    #[error("hex must be lowercase")]
    NotLowercase,
    #[error("expected {expected} bytes, got {actual}")]
    Length { expected: usize, actual: usize },
}

macro_rules! fixed_hex {
    ($(#[$meta:meta])* $name:ident, $len:expr) => {
        $(#[$meta])*
        #[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub struct $name(pub [u8; $len]);

        impl $name {
            pub const LEN: usize = $len;

            pub fn as_bytes(&self) -> &[u8; $len] {
                &self.0
            }

            pub fn to_hex(&self) -> String {
                hex::encode(self.0)
            }

            pub fn from_hex(text: &str) -> Result<Self, $crate::codec::HexError> {
                let raw = $crate::codec::decode_lower_hex(text)?;
                let actual = raw.len();
                let bytes: [u8; $len] = raw
                    .try_into()
                    .map_err(|_| $crate::codec::HexError::Length { expected: $len, actual })?;
                Ok(Self(bytes))
            }
        }

        impl ::std::fmt::Display for $name {
            fn fmt(&self, f: &mut ::std::fmt::Formatter<'_>) -> ::std::fmt::Result {
                f.write_str(&self.to_hex())
            }
        }

        impl ::std::fmt::Debug for $name {
            fn fmt(&self, f: &mut ::std::fmt::Formatter<'_>) -> ::std::fmt::Result {
                write!(f, concat!(stringify!($name), "({})"), self.to_hex())
            }
        }

        impl ::std::str::FromStr for $name {
            type Err = $crate::codec::HexError;
            fn from_str(s: &str) -> Result<Self, Self::Err> {
                Self::from_hex(s)
            }
        }

        impl ::serde::Serialize for $name {
            fn serialize<S: ::serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
                serializer.serialize_str(&self.to_hex())
            }
        }

        impl<'de> ::serde::Deserialize<'de> for $name {
            fn deserialize<D: ::serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
                let text = <String as ::serde::Deserialize>::deserialize(deserializer)?;
                Self::from_hex(&text).map_err(<D::Error as ::serde::de::Error>::custom)
            }
        }
    };
}

pub(crate) use fixed_hex;

fixed_hex!(
    /// A 256-bit SHA-256 digest.
    Digest,
    32
);

fixed_hex!(
    /// 256 bits of fresh randomness (nonces, credential tokens).
    Random256,
    32
);

impl Digest {
    pub const ZERO: Digest = Digest([0u8; 32]);

    pub fn of(data: &[u8]) -> Digest {
        Digest(Sha256::digest(data).into())
    }
}

impl Random256 {
    pub fn generate() -> Random256 {
        use rand::RngCore;
        let mut bytes = [0u8; 32];
        rand::rngs::OsRng.fill_bytes(&mut bytes);
        Random256(bytes)
    }
}

/// Serde adapter for `Vec<u8>` fields encoded as lowercase hex.
pub mod hex_bytes {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&hex::encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(deserializer: D) -> Result<Vec<u8>, D::Error> {
        let text = String::deserialize(deserializer)?;
        super::decode_lower_hex(&text).map_err(de::Error::custom)
    }
}

const TIMESTAMP_FORMAT: &str = "%Y-%m-%dT%H:%M:%S%.3fZ";

/// UTC instant with millisecond resolution, rendered as RFC 3339
/// (`2026-01-02T03:04:05.678Z`).
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Timestamp(DateTime<Utc>);

impl Timestamp {
    pub fn from_millis(millis: i64) -> Timestamp {
        Timestamp(Utc.timestamp_millis_opt(millis).single().expect("millisecond timestamp in range"))
    }

    pub fn as_millis(&self) -> i64 {
        self.0.timestamp_millis()
    }

    pub fn now() -> Timestamp {
        Timestamp::from_millis(Utc::now().timestamp_millis())
    }

    pub fn plus_millis(&self, millis: i64) -> Timestamp {
        Timestamp(self.0 + Duration::milliseconds(millis))
    }

    pub fn plus_secs(&self, secs: i64) -> Timestamp {
        self.plus_millis(secs * 1000)
    }

    pub fn to_rfc3339(&self) -> String {
        self.0.format(TIMESTAMP_FORMAT).to_string()
    }

    pub fn parse(text: &str) -> Result<Timestamp, TimestampError> {
        let naive = NaiveDateTime::parse_from_str(text, TIMESTAMP_FORMAT).map_err(|_| TimestampError(text.to_owned()))?;
        let ts = Timestamp(Utc.from_utc_datetime(&naive));
        // %.3f accepts other precisions on input; insist on the exact rendering.
        if ts.to_rfc3339() != text {
            return Err(TimestampError(text.to_owned()));
        }
        Ok(ts)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("timestamp {0:?} is not RFC 3339 UTC with millisecond precision")]
pub struct TimestampError(String);

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_rfc3339())
    }
}

impl fmt::Debug for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Timestamp({})", self.to_rfc3339())
    }
}

impl Serialize for Timestamp {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_rfc3339())
    }
}

impl<'de> Deserialize<'de> for Timestamp {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let text = String::deserialize(deserializer)?;
        Timestamp::parse(&text).map_err(de::Error::custom)
    }
}

/// Source of "now" for a zone. Each zone is its own ordering authority.
pub trait Clock: Send + Sync {
    fn now(&self) -> Timestamp;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> Timestamp {
        Timestamp::now()
    }
}

/// Manually advanced clock for expiry tests.
#[derive(Debug)]
pub struct ManualClock(Mutex<Timestamp>);

impl ManualClock {
    pub fn new(start: Timestamp) -> ManualClock {
        ManualClock(Mutex::new(start))
    }

    pub fn advance_secs(&self, secs: i64) {
        let mut now = self.0.lock().unwrap();
        *now = now.plus_secs(secs);
    }

    pub fn set(&self, at: Timestamp) {
        *self.0.lock().unwrap() = at;
    }
}

impl Clock for ManualClock {
    fn now(&self) -> Timestamp {
        *self.0.lock().unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    #[derive(Serialize, Deserialize, PartialEq, Debug)]
    struct Sample {
        zeta: u32,
        alpha: String,
        #[serde(with = "hex_bytes")]
        blob: Vec<u8>,
    }

    #[test]
    fn canonical_json_sorts_keys_without_whitespace() {
        let s = Sample { zeta: 7, alpha: "a b".into(), blob: vec![0xde, 0xad] };
        assert_eq!(to_canonical_json(&s), br#"{"alpha":"a b","blob":"dead","zeta":7}"#.to_vec());
    }

    #[test]
    fn nested_maps_are_sorted_too() {
        let mut inner = BTreeMap::new();
        inner.insert("b", 1);
        inner.insert("a", 2);
        let v = serde_json::json!({"z": inner, "m": [ {"y": 1, "x": 2} ]});
        assert_eq!(to_canonical_json(&v), br#"{"m":[{"x":2,"y":1}],"z":{"a":2,"b":1}}"#.to_vec());
    }

    #[test]
    fn from_canonical_rejects_whitespace_and_key_order() {
        let ok: Result<Sample, _> = from_canonical_json(br#"{"alpha":"x","blob":"00","zeta":1}"#);
        assert!(ok.is_ok());
        let spaced: Result<Sample, _> = from_canonical_json(br#"{"alpha": "x","blob":"00","zeta":1}"#);
        assert_eq!(spaced.unwrap_err(), CanonicalError::NotCanonical);
        let reordered: Result<Sample, _> = from_canonical_json(br#"{"blob":"00","alpha":"x","zeta":1}"#);
        assert_eq!(reordered.unwrap_err(), CanonicalError::NotCanonical);
    }

    #[test]
    fn hex_is_lowercase_only() {
        let d = Digest::of(b"abc");
        assert_eq!(d.to_hex(), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
        assert_eq!(Digest::from_hex(&d.to_hex()).unwrap(), d);
        assert_eq!(Digest::from_hex(&d.to_hex().to_uppercase()), Err(HexError::NotLowercase));
        assert_eq!(Digest::from_hex("abcd"), Err(HexError::Length { expected: 32, actual: 2 }));
    }

    #[test]
    fn timestamps_are_millisecond_rfc3339() {
        let ts = Timestamp::from_millis(1_700_000_000_123);
        assert_eq!(ts.to_rfc3339(), "2023-11-14T22:13:20.123Z");
        assert_eq!(Timestamp::parse("2023-11-14T22:13:20.123Z").unwrap(), ts);
        assert!(Timestamp::parse("2023-11-14T22:13:20.123z").is_err());
        assert!(Timestamp::parse("2023-11-14T22:13:20.12Z").is_err());
        assert!(Timestamp::parse("2023-11-14T22:13:20Z").is_err());
        assert_eq!(ts.plus_secs(2).as_millis(), 1_700_000_002_123);
    }

    #[test]
    fn random_values_differ() {
        assert_ne!(Random256::generate(), Random256::generate());
    }
}
