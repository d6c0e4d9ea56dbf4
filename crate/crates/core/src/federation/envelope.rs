//! HMAC-SHA256 request signing with clock-skew and replay checks.

use std::collections::HashMap;
use std::sync::Mutex;

use hmac::{Hmac, Mac};
use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::FederationError;

type HmacSha256 = Hmac<Sha256>;

pub const MAX_CLOCK_SKEW_SECS: i64 = 300;
pub const REPLAY_WINDOW_SECS: i64 = 600;
pub const SIGNATURE_HEADER: &str = "x-fed-signature";

/// A 32-byte link key. Never printed.
#[derive(Clone, PartialEq, Eq)]
pub struct SharedSecret(pub [u8; 32]);

impl std::fmt::Debug for SharedSecret {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("SharedSecret(..)")
    }
}

impl SharedSecret {
    pub fn random() -> Self {
        let mut k = [0u8; 32];
        rand::thread_rng().fill_bytes(&mut k);
        SharedSecret(k)
    }

    /// HMAC-SHA256 keyed by `key` over `label ‖ data`.
    pub fn derive(key: &[u8], label: &str, data: &[u8]) -> Self {
        let mut mac = HmacSha256::new_from_slice(key).expect("hmac takes any key length");
        mac.update(label.as_bytes());
        mac.update(data);
        SharedSecret(mac.finalize().into_bytes().into())
    }
}

impl Serialize for SharedSecret {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(self.0))
    }
}

impl<'de> Deserialize<'de> for SharedSecret {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        let bytes: [u8; 32] = hex::decode(&s)
            .ok()
            .and_then(|b| b.try_into().ok())
            .ok_or_else(|| serde::de::Error::custom("secret must be 64 hex digits"))?;
        Ok(SharedSecret(bytes))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SignedEnvelope {
    pub method: String,
    pub path: String,
    /// UTC seconds.
    pub timestamp: i64,
    pub nonce: [u8; 16],
    pub body: Vec<u8>,
    pub signature: [u8; 32],
}

/// `method \n path \n hex(sha256(body)) \n timestamp \n hex(nonce)`.
pub fn canonical_string(method: &str, path: &str, body: &[u8], timestamp: i64, nonce: &[u8; 16]) -> String {
    format!("{method}\n{path}\n{}\n{timestamp}\n{}", hex::encode(Sha256::digest(body)), hex::encode(nonce))
}

fn mac_of(secret: &SharedSecret, canonical: &str) -> HmacSha256 {
    let mut mac = HmacSha256::new_from_slice(&secret.0).expect("hmac takes any key length");
    mac.update(canonical.as_bytes());
    mac
}

pub fn sign_envelope_at(
    secret: &SharedSecret,
    method: &str,
    path: &str,
    body: &[u8],
    timestamp: i64,
    nonce: [u8; 16],
) -> SignedEnvelope {
    let signature = mac_of(secret, &canonical_string(method, path, body, timestamp, &nonce))
        .finalize()
        .into_bytes()
        .into();
    SignedEnvelope { method: method.into(), path: path.into(), timestamp, nonce, body: body.to_vec(), signature }
}

pub fn sign_envelope(secret: &SharedSecret, method: &str, path: &str, body: &[u8], now: i64) -> SignedEnvelope {
    let mut nonce = [0u8; 16];
    rand::thread_rng().fill_bytes(&mut nonce);
    sign_envelope_at(secret, method, path, body, now, nonce)
}

impl SignedEnvelope {
    /// `ts=<secs>,nonce=<hex>,mac=<hex>`.
    pub fn header_value(&self) -> String {
        format!("ts={},nonce={},mac={}", self.timestamp, hex::encode(self.nonce), hex::encode(self.signature))
    }

    /// Rebuilds an envelope from a request; a malformed header is a bad
    /// signature.
    pub fn from_parts(method: &str, path: &str, header: &str, body: Vec<u8>) -> Result<Self, FederationError> {
        let mut ts = None;
        let mut nonce = None;
        let mut mac = None;
        for part in header.split(',') {
            let (k, v) = part.trim().split_once('=').ok_or(FederationError::BadSignature)?;
            match k {
                "ts" => ts = v.parse::<i64>().ok(),
                "nonce" => nonce = hex::decode(v).ok().and_then(|b| <[u8; 16]>::try_from(b).ok()),
                "mac" => mac = hex::decode(v).ok().and_then(|b| <[u8; 32]>::try_from(b).ok()),
                _ => return Err(FederationError::BadSignature),
            }
        }
        match (ts, nonce, mac) {
            (Some(timestamp), Some(nonce), Some(signature)) => Ok(SignedEnvelope {
                method: method.into(),
                path: path.into(),
                timestamp,
                nonce,
                body,
                signature,
            }),
            _ => Err(FederationError::BadSignature),
        }
    }
}

/// Nonces seen per key scope within the replay window.
#[derive(Debug, Default)]
pub struct ReplayCache {
    seen: Mutex<HashMap<(String, [u8; 16]), i64>>,
}

impl ReplayCache {
    pub fn new() -> Self {
        ReplayCache::default()
    }

    /// Records the nonce; false if it was already present.
    fn insert(&self, scope: &str, nonce: [u8; 16], now: i64) -> bool {
        let mut seen = self.seen.lock().expect("replay lock");
        seen.retain(|_, at| now - *at < REPLAY_WINDOW_SECS);
        match seen.entry((scope.to_string(), nonce)) {
            std::collections::hash_map::Entry::Occupied(_) => false,
            std::collections::hash_map::Entry::Vacant(v) => {
                v.insert(now);
                true
            }
        }
    }

    pub fn len(&self) -> usize {
        self.seen.lock().expect("replay lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Checks, in order: MAC (constant time), clock skew, nonce freshness.
/// `scope` names the key so nonces of different links do not collide.
pub fn verify_envelope<'a>(
    secret: &SharedSecret,
    env: &'a SignedEnvelope,
    now: i64,
    cache: &ReplayCache,
    scope: &str,
) -> Result<&'a [u8], FederationError> {
    let canonical = canonical_string(&env.method, &env.path, &env.body, env.timestamp, &env.nonce);
    mac_of(secret, &canonical)
        .verify_slice(&env.signature)
        .map_err(|_| FederationError::BadSignature)?;
    if (now - env.timestamp).abs() > MAX_CLOCK_SKEW_SECS {
        return Err(FederationError::ClockSkew);
    }
    if !cache.insert(scope, env.nonce, now) {
        return Err(FederationError::ReplayDetected);
    }
    Ok(&env.body)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_mac() {
        // Oracle (Python): hmac.new(bytes(range(32)), canonical.encode(), sha256).hexdigest()
        //   with canonical = "POST\n/fed/v1/handshake\n" + sha256(b'{}').hexdigest()
        //   + "\n1700000000\n" + "00"*16
        let secret = SharedSecret(core::array::from_fn(|i| i as u8));
        let env = sign_envelope_at(&secret, "POST", "/fed/v1/handshake", b"{}", 1_700_000_000, [0; 16]);
        assert_eq!(hex::encode(env.signature), REFERENCE_MAC);
    }

    const REFERENCE_MAC: &str = "f8604169f32fc24ff280d72dec338645272f479b543118a01bc948dfe4e99943";

    #[test]
    fn round_trip_tamper_skew_replay() {
        let secret = SharedSecret::random();
        let cache = ReplayCache::new();
        let env = sign_envelope(&secret, "POST", "/p", b"hello", 1000);
        let parsed = SignedEnvelope::from_parts("POST", "/p", &env.header_value(), b"hello".to_vec()).unwrap();
        assert_eq!(parsed, env);
        assert_eq!(verify_envelope(&secret, &env, 1000, &cache, "l").unwrap(), b"hello");
        assert!(matches!(verify_envelope(&secret, &env, 1000, &cache, "l"), Err(FederationError::ReplayDetected)));
        let mut bad = sign_envelope(&secret, "POST", "/p", b"hello", 1000);
        bad.body[0] ^= 1;
        assert!(matches!(verify_envelope(&secret, &bad, 1000, &cache, "l"), Err(FederationError::BadSignature)));
        let stale = sign_envelope(&secret, "POST", "/p", b"x", 1000 - 301);
        assert!(matches!(verify_envelope(&secret, &stale, 1000, &cache, "l"), Err(FederationError::ClockSkew)));
        let edge = sign_envelope(&secret, "POST", "/p", b"x", 1000 + 300);
        assert!(verify_envelope(&secret, &edge, 1000, &cache, "l").is_ok());
        let other = SharedSecret::random();
        let env = sign_envelope(&other, "POST", "/p", b"x", 1000);
        assert!(matches!(verify_envelope(&secret, &env, 1000, &cache, "l"), Err(FederationError::BadSignature)));
        assert!(format!("{secret:?}").contains(".."));
    }
}
