//! Token issuance and verification for scope-checked publishing.
//!
//! Tokens are JWTs signed with Ed25519 (`alg: EdDSA`). The scope claim is a
//! single string of the form
//! `<server>.write:<vhost>/<exchange>/<key_pattern>` granting write access
//! to one exchange for topic keys matching the pattern. Issuance mimics the
//! configuration-service flow: a toolkit asks for its configuration, the
//! issuer checks that the requesting IP matches the registered IP for that
//! hostname, and hands back a short-lived token carrying the registered
//! scope.

use std::collections::BTreeMap;
use std::net::IpAddr;
use std::path::Path;

use base64::engine::general_purpose::URL_SAFE_NO_PAD;
use base64::Engine;
use ed25519_dalek::{Signature, Signer, SigningKey, Verifier, VerifyingKey};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bus::topic::{match_topic, Pattern, TopicKey};

pub const DEFAULT_TTL_SECS: u64 = 4 * 3600;

#[derive(Debug, Error)]
pub enum AuthError {
    #[error("malformed scope: {0}")]
    MalformedScope(String),
    #[error("unknown subject {0}")]
    UnknownSubject(String),
    #[error("requester ip {got} does not match registered ip {registered} for {subject}")]
    IpMismatch {
        subject: String,
        registered: IpAddr,
        got: IpAddr,
    },
    #[error("key material: {0}")]
    KeyMaterial(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Machine-readable verification failure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DenyReason {
    BadSignature,
    Expired,
    WrongAudience,
    ScopeMismatch,
}

impl std::fmt::Display for DenyReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            DenyReason::BadSignature => "bad-signature",
            DenyReason::Expired => "expired",
            DenyReason::WrongAudience => "wrong-audience",
            DenyReason::ScopeMismatch => "scope-mismatch",
        };
        f.write_str(s)
    }
}

/// Parsed form of the scope claim.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scope {
    pub server: String,
    pub vhost: String,
    pub exchange: String,
    pub key_pattern: Pattern,
}

impl Scope {
    /// Canonical string form; `parse_scope` round-trips this.
    pub fn to_scope_string(&self) -> String {
        format!(
            "{}.write:{}/{}/{}",
            self.server, self.vhost, self.exchange, self.key_pattern
        )
    }
}

/// Parse `<server>.<action>:<vhost>/<exchange>/<key_pattern>`. Only the
/// `write` action exists.
pub fn parse_scope(s: &str) -> Result<Scope, AuthError> {
    let (left, right) = s
        .split_once(':')
        .ok_or_else(|| AuthError::MalformedScope(format!("missing ':' in {s:?}")))?;
    let (server, action) = left
        .rsplit_once('.')
        .ok_or_else(|| AuthError::MalformedScope(format!("missing action in {left:?}")))?;
    if server.is_empty() {
        return Err(AuthError::MalformedScope(format!("empty server in {s:?}")));
    }
    if action != "write" {
        return Err(AuthError::MalformedScope(format!(
            "unsupported action {action:?} (only write)"
        )));
    }
    let mut parts = right.splitn(3, '/');
    let vhost = parts.next().unwrap_or("");
    let exchange = parts.next().unwrap_or("");
    let key_pattern = parts.next().unwrap_or("");
    if vhost.is_empty() {
        return Err(AuthError::MalformedScope(format!("empty vhost in {s:?}")));
    }
    if exchange.is_empty() {
        return Err(AuthError::MalformedScope(format!("empty exchange in {s:?}")));
    }
    if key_pattern.is_empty() {
        return Err(AuthError::MalformedScope(format!(
            "missing key pattern in {s:?}"
        )));
    }
    let key_pattern = Pattern::new(key_pattern)
        .map_err(|_| AuthError::MalformedScope(format!("bad key pattern in {s:?}")))?;
    Ok(Scope {
        server: server.to_string(),
        vhost: vhost.to_string(),
        exchange: exchange.to_string(),
        key_pattern,
    })
}

/// JWT payload. `sub` and `client_id` both carry the toolkit hostname;
/// neither participates in authorization decisions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenClaims {
    pub scope: String,
    pub exp: u64,
    pub aud: String,
    pub sub: String,
    pub client_id: String,
}

/// One registered toolkit: where pushes may come from and what they may
/// write.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegistryEntry {
    pub registered_ip: IpAddr,
    pub allowed_scope: String,
}

/// hostname -> registration. Loaded from a JSON file.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ToolkitRegistry {
    pub entries: BTreeMap<String, RegistryEntry>,
}

impl ToolkitRegistry {
    pub fn load(path: &Path) -> Result<Self, AuthError> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| AuthError::KeyMaterial(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<(), AuthError> {
        std::fs::write(path, serde_json::to_string_pretty(self).unwrap())?;
        Ok(())
    }
}

fn b64(data: &[u8]) -> String {
    URL_SAFE_NO_PAD.encode(data)
}

fn sign_jwt(claims: &TokenClaims, key: &SigningKey) -> String {
    let header = b64(br#"{"alg":"EdDSA","typ":"JWT"}"#);
    let payload = b64(serde_json::to_string(claims).unwrap().as_bytes());
    let signing_input = format!("{header}.{payload}");
    let sig: Signature = key.sign(signing_input.as_bytes());
    format!("{signing_input}.{}", b64(&sig.to_bytes()))
}

/// Decode without verifying. Used by tests and for inspecting tokens.
pub fn decode_claims(token: &str) -> Option<TokenClaims> {
    let payload = token.split('.').nth(1)?;
    let bytes = URL_SAFE_NO_PAD.decode(payload).ok()?;
    serde_json::from_slice(&bytes).ok()
}

/// Issue a token for `subject` if the requesting IP matches its
/// registration. The scope comes from the registry, never the request.
pub fn issue_token(
    subject: &str,
    requester_ip: IpAddr,
    registry: &ToolkitRegistry,
    server_name: &str,
    now: f64,
    ttl_secs: u64,
    signing_key: &SigningKey,
) -> Result<String, AuthError> {
    let entry = registry
        .entries
        .get(subject)
        .ok_or_else(|| AuthError::UnknownSubject(subject.to_string()))?;
    if entry.registered_ip != requester_ip {
        return Err(AuthError::IpMismatch {
            subject: subject.to_string(),
            registered: entry.registered_ip,
            got: requester_ip,
        });
    }
    // validate the registered scope before embedding it
    parse_scope(&entry.allowed_scope)?;
    let claims = TokenClaims {
        scope: entry.allowed_scope.clone(),
        exp: now as u64 + ttl_secs,
        aud: server_name.to_string(),
        sub: subject.to_string(),
        client_id: subject.to_string(),
    };
    Ok(sign_jwt(&claims, signing_key))
}

/// Build a token directly from claims. Lets tests reproduce the published
/// example token byte-for-byte.
pub fn sign_claims(claims: &TokenClaims, signing_key: &SigningKey) -> String {
    sign_jwt(claims, signing_key)
}

/// Full verification: signature, expiry, audience, then scope. Returns the
/// subject (traceability only) on success.
pub fn verify_and_authorize(
    token: &str,
    server_name: &str,
    now: f64,
    vhost: &str,
    exchange: &str,
    key: &TopicKey,
    public_key: &VerifyingKey,
) -> Result<String, DenyReason> {
    let mut parts = token.split('.');
    let (header, payload, sig) = match (parts.next(), parts.next(), parts.next(), parts.next()) {
        (Some(h), Some(p), Some(s), None) => (h, p, s),
        _ => return Err(DenyReason::BadSignature),
    };
    let signing_input = format!("{header}.{payload}");
    let sig_bytes = URL_SAFE_NO_PAD
        .decode(sig)
        .map_err(|_| DenyReason::BadSignature)?;
    let sig_arr: [u8; 64] = sig_bytes.try_into().map_err(|_| DenyReason::BadSignature)?;
    let signature = Signature::from_bytes(&sig_arr);
    public_key
        .verify(signing_input.as_bytes(), &signature)
        .map_err(|_| DenyReason::BadSignature)?;

    let payload_bytes = URL_SAFE_NO_PAD
        .decode(payload)
        .map_err(|_| DenyReason::BadSignature)?;
    let claims: TokenClaims =
        serde_json::from_slice(&payload_bytes).map_err(|_| DenyReason::BadSignature)?;

    if now >= claims.exp as f64 {
        return Err(DenyReason::Expired);
    }
    if claims.aud != server_name {
        return Err(DenyReason::WrongAudience);
    }
    let scope = parse_scope(&claims.scope).map_err(|_| DenyReason::ScopeMismatch)?;
    if scope.server != server_name || scope.vhost != vhost || scope.exchange != exchange {
        return Err(DenyReason::ScopeMismatch);
    }
    if !match_topic(scope.key_pattern.as_str(), key) {
        return Err(DenyReason::ScopeMismatch);
    }
    Ok(claims.sub)
}

/// Generate a fresh Ed25519 keypair and write both halves as hex.
pub fn generate_keypair(private_path: &Path, public_path: &Path) -> Result<(), AuthError> {
    use rand::RngCore;
    let mut seed = [0u8; 32];
    rand::thread_rng().fill_bytes(&mut seed);
    let signing = SigningKey::from_bytes(&seed);
    std::fs::write(private_path, hex::encode(signing.to_bytes()))?;
    std::fs::write(public_path, hex::encode(signing.verifying_key().to_bytes()))?;
    Ok(())
}

pub fn load_signing_key(path: &Path) -> Result<SigningKey, AuthError> {
    let text = std::fs::read_to_string(path)?;
    let bytes = hex::decode(text.trim()).map_err(|e| AuthError::KeyMaterial(e.to_string()))?;
    let arr: [u8; 32] = bytes
        .try_into()
        .map_err(|_| AuthError::KeyMaterial("signing key must be 32 bytes".into()))?;
    Ok(SigningKey::from_bytes(&arr))
}

pub fn load_verifying_key(path: &Path) -> Result<VerifyingKey, AuthError> {
    let text = std::fs::read_to_string(path)?;
    let bytes = hex::decode(text.trim()).map_err(|e| AuthError::KeyMaterial(e.to_string()))?;
    let arr: [u8; 32] = bytes
        .try_into()
        .map_err(|_| AuthError::KeyMaterial("verifying key must be 32 bytes".into()))?;
    VerifyingKey::from_bytes(&arr).map_err(|e| AuthError::KeyMaterial(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub const EXAMPLE_SCOPE: &str = "rabbit_server.write:osg-nma/osg.ps-push.raw/perfsonar.raw.*";

    fn test_key() -> SigningKey {
        SigningKey::from_bytes(&[7u8; 32])
    }

    fn example_claims() -> TokenClaims {
        TokenClaims {
            scope: EXAMPLE_SCOPE.to_string(),
            exp: 1_618_444_800,
            aud: "rabbit_server".to_string(),
            sub: "ps.example.edu".to_string(),
            client_id: "ps.example.edu".to_string(),
        }
    }

    fn key(s: &str) -> TopicKey {
        TopicKey::new(s).unwrap()
    }

    #[test]
    fn parse_example_scope() {
        let scope = parse_scope(EXAMPLE_SCOPE).unwrap();
        assert_eq!(scope.server, "rabbit_server");
        assert_eq!(scope.vhost, "osg-nma");
        assert_eq!(scope.exchange, "osg.ps-push.raw");
        assert_eq!(scope.key_pattern.as_str(), "perfsonar.raw.*");
        assert_eq!(scope.to_scope_string(), EXAMPLE_SCOPE);
    }

    #[test]
    fn parse_scope_rejects_read_action_and_missing_pattern() {
        assert!(parse_scope("x.read:a/b/c").is_err());
        assert!(parse_scope("rabbit_server.write:osg-nma/osg.ps-push.raw").is_err());
        assert!(parse_scope("no-colon").is_err());
    }

    #[test]
    fn example_token_authorizes_matching_keys() {
        let sk = test_key();
        let token = sign_claims(&example_claims(), &sk);
        let pk = sk.verifying_key();
        let now = 1_618_000_000.0;
        let ok = verify_and_authorize(
            &token, "rabbit_server", now, "osg-nma", "osg.ps-push.raw",
            &key("perfsonar.raw.latency"), &pk,
        );
        assert_eq!(ok.unwrap(), "ps.example.edu");

        // write restriction: other exchanges are out of scope
        let deny = verify_and_authorize(
            &token, "rabbit_server", now, "osg-nma", "osg.ps.raw",
            &key("perfsonar.raw.latency"), &pk,
        );
        assert_eq!(deny.unwrap_err(), DenyReason::ScopeMismatch);

        // `*` is exactly one word
        let deny = verify_and_authorize(
            &token, "rabbit_server", now, "osg-nma", "osg.ps-push.raw",
            &key("perfsonar.raw.latency.extra"), &pk,
        );
        assert_eq!(deny.unwrap_err(), DenyReason::ScopeMismatch);
    }

    #[test]
    fn expiry_and_audience() {
        let sk = test_key();
        let token = sign_claims(&example_claims(), &sk);
        let pk = sk.verifying_key();
        let deny = verify_and_authorize(
            &token, "rabbit_server", 1_618_444_800.0, "osg-nma", "osg.ps-push.raw",
            &key("perfsonar.raw.latency"), &pk,
        );
        assert_eq!(deny.unwrap_err(), DenyReason::Expired);
        let deny = verify_and_authorize(
            &token, "other_server", 1_618_000_000.0, "osg-nma", "osg.ps-push.raw",
            &key("perfsonar.raw.latency"), &pk,
        );
        assert_eq!(deny.unwrap_err(), DenyReason::WrongAudience);
    }

    #[test]
    fn tampered_token_is_bad_signature() {
        let sk = test_key();
        let token = sign_claims(&example_claims(), &sk);
        let pk = sk.verifying_key();
        // flip one byte inside the payload segment
        let mut parts: Vec<String> = token.split('.').map(String::from).collect();
        let mut payload = URL_SAFE_NO_PAD.decode(&parts[1]).unwrap();
        payload[5] ^= 0x01;
        parts[1] = URL_SAFE_NO_PAD.encode(&payload);
        let tampered = parts.join(".");
        let deny = verify_and_authorize(
            &tampered, "rabbit_server", 1_618_000_000.0, "osg-nma", "osg.ps-push.raw",
            &key("perfsonar.raw.latency"), &pk,
        );
        assert_eq!(deny.unwrap_err(), DenyReason::BadSignature);
        assert_eq!(
            verify_and_authorize("garbage", "rabbit_server", 0.0, "v", "e", &key("a"), &pk)
                .unwrap_err(),
            DenyReason::BadSignature
        );
    }

    #[test]
    fn authorization_ignores_subject() {
        // same claims but different sub must authorize identically
        let sk = test_key();
        let pk = sk.verifying_key();
        let mut claims = example_claims();
        claims.sub = "someone.else.edu".to_string();
        claims.client_id = "someone.else.edu".to_string();
        let token = sign_claims(&claims, &sk);
        let ok = verify_and_authorize(
            &token, "rabbit_server", 1_618_000_000.0, "osg-nma", "osg.ps-push.raw",
            &key("perfsonar.raw.latency"), &pk,
        );
        assert_eq!(ok.unwrap(), "someone.else.edu");
    }

    #[test]
    fn issuance_checks_registration() {
        let sk = test_key();
        let mut registry = ToolkitRegistry::default();
        registry.entries.insert(
            "ps.example.edu".to_string(),
            RegistryEntry {
                registered_ip: "192.0.2.10".parse().unwrap(),
                allowed_scope: EXAMPLE_SCOPE.to_string(),
            },
        );
        let now = 1_618_000_000.0;
        let token = issue_token(
            "ps.example.edu",
            "192.0.2.10".parse().unwrap(),
            &registry,
            "rabbit_server",
            now,
            DEFAULT_TTL_SECS,
            &sk,
        )
        .unwrap();
        let claims = decode_claims(&token).unwrap();
        assert_eq!(claims.scope, EXAMPLE_SCOPE);
        assert_eq!(claims.sub, claims.client_id);
        assert_eq!(claims.exp, now as u64 + DEFAULT_TTL_SECS);

        // wrong ip
        assert!(matches!(
            issue_token(
                "ps.example.edu",
                "203.0.113.9".parse().unwrap(),
                &registry,
                "rabbit_server",
                now,
                DEFAULT_TTL_SECS,
                &sk,
            ),
            Err(AuthError::IpMismatch { .. })
        ));
        // unknown host
        assert!(matches!(
            issue_token(
                "nobody.example.org",
                "192.0.2.10".parse().unwrap(),
                &registry,
                "rabbit_server",
                now,
                DEFAULT_TTL_SECS,
                &sk,
            ),
            Err(AuthError::UnknownSubject(_))
        ));
    }

    #[test]
    fn keypair_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let priv_path = dir.path().join("signing.key");
        let pub_path = dir.path().join("verify.key");
        generate_keypair(&priv_path, &pub_path).unwrap();
        let sk = load_signing_key(&priv_path).unwrap();
        let pk = load_verifying_key(&pub_path).unwrap();
        assert_eq!(sk.verifying_key(), pk);
    }
}
