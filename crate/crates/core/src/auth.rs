//! Mock OpenID identity provider and token verifier.
//!
//! Tokens carry the usual OIDC claims (issuer, subject, audience, issue and
//! expiry times) and are authenticated with HMAC-SHA256 under the provider's
//! secret. Serialized form:
//!
//! ```text
//! v1|<issuer>|<subject>|<audience>|<issued_at>|<expires_at>.<hex mac>
//! ```
//!
//! `%`, `|` and `.` inside string claims are percent-escaped so the encoding
//! is unambiguous. A token is valid on `[issued_at, expires_at)`.

use std::fmt;

use hmac::{Hmac, Mac};
use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};
use sha2::Sha256;
use thiserror::Error;

/// Audience every storage requires.
pub const KMS_AUDIENCE: &str = "kms";

type HmacSha256 = Hmac<Sha256>;

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum AuthError {
    #[error("token signature invalid")]
    BadSignature,
    #[error("token outside its validity window")]
    Expired,
    #[error("token audience mismatch")]
    AudienceMismatch,
}

/// `(verifier_url, verifier_id)`: the only user key in the system.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Identity {
    pub verifier_url: String,
    pub verifier_id: String,
}

impl Identity {
    pub fn new(verifier_url: impl Into<String>, verifier_id: impl Into<String>) -> Self {
        let id = Identity {
            verifier_url: verifier_url.into(),
            verifier_id: verifier_id.into(),
        };
        assert!(
            !id.verifier_url.is_empty() && !id.verifier_id.is_empty(),
            "identity fields must be nonempty"
        );
        id
    }

    /// Stable byte key, used wherever an identity indexes stored state.
    pub fn key_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for part in [&self.verifier_url, &self.verifier_id] {
            out.extend_from_slice(&(part.len() as u32).to_be_bytes());
            out.extend_from_slice(part.as_bytes());
        }
        out
    }
}

impl fmt::Display for Identity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{}", self.verifier_url, self.verifier_id)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdToken {
    pub issuer: String,
    pub subject: String,
    pub audience: String,
    pub issued_at: u64,
    pub expires_at: u64,
    pub signature: Vec<u8>,
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '%' => out.push_str("%25"),
            '|' => out.push_str("%7C"),
            '.' => out.push_str("%2E"),
            c => out.push(c),
        }
    }
    out
}

fn unescape(s: &str) -> Option<String> {
    let mut out = String::with_capacity(s.len());
    let mut rest = s;
    while let Some(i) = rest.find('%') {
        out.push_str(&rest[..i]);
        let code = rest.get(i + 1..i + 3)?;
        out.push(match code {
            "25" => '%',
            "7C" => '|',
            "2E" => '.',
            _ => return None,
        });
        rest = &rest[i + 3..];
    }
    out.push_str(rest);
    Some(out)
}

impl IdToken {
    fn payload(&self) -> String {
        format!(
            "v1|{}|{}|{}|{}|{}",
            escape(&self.issuer),
            escape(&self.subject),
            escape(&self.audience),
            self.issued_at,
            self.expires_at
        )
    }

    pub fn identity(&self) -> Identity {
        Identity {
            verifier_url: self.issuer.clone(),
            verifier_id: self.subject.clone(),
        }
    }

    pub fn serialize(&self) -> String {
        format!("{}.{}", self.payload(), hex::encode(&self.signature))
    }

    /// Parses the serialized form. Anything unparseable is reported as
    /// [`AuthError::BadSignature`]: a token that cannot be checked is not
    /// authenticated.
    pub fn parse(s: &str) -> Result<IdToken, AuthError> {
        let (payload, mac) = s.rsplit_once('.').ok_or(AuthError::BadSignature)?;
        let signature = hex::decode(mac).map_err(|_| AuthError::BadSignature)?;
        let parts: Vec<&str> = payload.split('|').collect();
        let [version, iss, sub, aud, iat, exp] = parts.as_slice() else {
            return Err(AuthError::BadSignature);
        };
        if *version != "v1" {
            return Err(AuthError::BadSignature);
        }
        let field = |s: &str| unescape(s).ok_or(AuthError::BadSignature);
        let num = |s: &str| s.parse::<u64>().map_err(|_| AuthError::BadSignature);
        Ok(IdToken {
            issuer: field(iss)?,
            subject: field(sub)?,
            audience: field(aud)?,
            issued_at: num(iat)?,
            expires_at: num(exp)?,
            signature,
        })
    }
}

fn mac_for(secret: &[u8], payload: &str) -> HmacSha256 {
    let mut mac = HmacSha256::new_from_slice(secret).expect("hmac accepts any key length");
    mac.update(payload.as_bytes());
    mac
}

/// Stand-in for the social login provider.
#[derive(Clone)]
pub struct MockIdp {
    secret: [u8; 32],
}

impl fmt::Debug for MockIdp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MockIdp").finish_non_exhaustive()
    }
}

impl MockIdp {
    pub fn new(secret: [u8; 32]) -> Self {
        MockIdp { secret }
    }

    pub fn generate<R: RngCore + CryptoRng + ?Sized>(rng: &mut R) -> Self {
        let mut secret = [0u8; 32];
        rng.fill_bytes(&mut secret);
        MockIdp { secret }
    }

    pub fn secret(&self) -> &[u8; 32] {
        &self.secret
    }

    pub fn verifier(&self) -> TokenVerifier {
        TokenVerifier {
            secret: self.secret,
        }
    }

    pub fn issue_token(&self, identity: &Identity, audience: &str, ttl_seconds: u64, now: u64) -> IdToken {
        assert!(ttl_seconds > 0, "token ttl must be positive");
        let mut token = IdToken {
            issuer: identity.verifier_url.clone(),
            subject: identity.verifier_id.clone(),
            audience: audience.to_string(),
            issued_at: now,
            expires_at: now + ttl_seconds,
            signature: Vec::new(),
        };
        token.signature = mac_for(&self.secret, &token.payload()).finalize().into_bytes().to_vec();
        token
    }
}

/// Immutable verifier; share freely across threads.
#[derive(Clone)]
pub struct TokenVerifier {
    secret: [u8; 32],
}

impl fmt::Debug for TokenVerifier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TokenVerifier").finish_non_exhaustive()
    }
}

impl TokenVerifier {
    pub fn new(secret: [u8; 32]) -> Self {
        TokenVerifier { secret }
    }

    /// Checks signature, then audience, then the validity window.
    pub fn verify(&self, token: &IdToken, expected_audience: &str, now: u64) -> Result<Identity, AuthError> {
        mac_for(&self.secret, &token.payload())
            .verify_slice(&token.signature)
            .map_err(|_| AuthError::BadSignature)?;
        if token.audience != expected_audience {
            return Err(AuthError::AudienceMismatch);
        }
        if now < token.issued_at || now >= token.expires_at {
            return Err(AuthError::Expired);
        }
        if token.issuer.is_empty() || token.subject.is_empty() {
            return Err(AuthError::BadSignature);
        }
        Ok(token.identity())
    }

    pub fn verify_serialized(&self, token: &str, expected_audience: &str, now: u64) -> Result<Identity, AuthError> {
        self.verify(&IdToken::parse(token)?, expected_audience, now)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn setup() -> (MockIdp, Identity) {
        (MockIdp::new([9u8; 32]), Identity::new("https://accounts.example", "user-42"))
    }

    #[test]
    fn round_trip_and_boundaries() {
        let (idp, u) = setup();
        let t = 1_700_000_000;
        let tok = idp.issue_token(&u, KMS_AUDIENCE, 600, t);
        let v = idp.verifier();
        assert_eq!(v.verify(&tok, KMS_AUDIENCE, t + 1), Ok(u.clone()));
        assert_eq!(v.verify(&tok, KMS_AUDIENCE, t), Ok(u.clone()));
        assert_eq!(v.verify(&tok, KMS_AUDIENCE, t + 599), Ok(u.clone()));
        assert_eq!(v.verify(&tok, KMS_AUDIENCE, t + 600), Err(AuthError::Expired));
        assert_eq!(v.verify(&tok, KMS_AUDIENCE, t + 601), Err(AuthError::Expired));
        assert_eq!(v.verify(&tok, KMS_AUDIENCE, t - 1), Err(AuthError::Expired));
        assert_eq!(v.verify(&tok, "other", t + 1), Err(AuthError::AudienceMismatch));
    }

    #[test]
    fn tampering_is_bad_signature() {
        let (idp, u) = setup();
        let mut tok = idp.issue_token(&u, KMS_AUDIENCE, 600, 100);
        tok.signature[0] ^= 1;
        assert_eq!(idp.verifier().verify(&tok, KMS_AUDIENCE, 101), Err(AuthError::BadSignature));

        let mut tok = idp.issue_token(&u, KMS_AUDIENCE, 600, 100);
        tok.subject = "user-43".into();
        assert_eq!(idp.verifier().verify(&tok, KMS_AUDIENCE, 101), Err(AuthError::BadSignature));

        let foreign = MockIdp::new([1u8; 32]).issue_token(&u, KMS_AUDIENCE, 600, 100);
        assert_eq!(idp.verifier().verify(&foreign, KMS_AUDIENCE, 101), Err(AuthError::BadSignature));
    }

    #[test]
    fn serialization_is_stable_and_truncation_fails() {
        let (idp, u) = setup();
        let s = idp.issue_token(&u, KMS_AUDIENCE, 600, 100).serialize();
        assert_eq!(s, idp.issue_token(&u, KMS_AUDIENCE, 600, 100).serialize());
        assert!(s.starts_with("v1|https://accounts%2Eexample|user-42|kms|100|700."));
        let v = idp.verifier();
        assert_eq!(v.verify_serialized(&s, KMS_AUDIENCE, 150), Ok(u));
        for cut in [1, 10, 64, s.len() - 1] {
            assert_eq!(
                v.verify_serialized(&s[..s.len() - cut], KMS_AUDIENCE, 150),
                Err(AuthError::BadSignature),
                "cut {cut}"
            );
        }
    }

    proptest! {
        #[test]
        fn escaped_claims_round_trip(url in "[a-z.|%:/]{1,20}", sub in "[A-Za-z0-9.|%]{1,20}") {
            let idp = MockIdp::new([3u8; 32]);
            let u = Identity::new(url, sub);
            let tok = idp.issue_token(&u, KMS_AUDIENCE, 10, 0);
            let parsed = IdToken::parse(&tok.serialize()).unwrap();
            prop_assert_eq!(&parsed, &tok);
            prop_assert_eq!(idp.verifier().verify(&parsed, KMS_AUDIENCE, 5), Ok(u));
        }
    }
}
