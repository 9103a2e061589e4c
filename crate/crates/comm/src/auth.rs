//! Per-call access tokens: clients attach one to every frame, the server maps
//! it to a client identity or rejects the call.

use std::collections::BTreeMap;

use subtle::ConstantTimeEq;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("unauthenticated")]
pub struct Unauthenticated;

/// Server side.
pub trait Authenticator: Send + Sync {
    /// Whether tokens are checked at all.
    fn enabled(&self) -> bool {
        true
    }

    fn validate(&self, token: &[u8]) -> Result<String, Unauthenticated>;
}

/// Client side.
pub trait TokenProvider: Send + Sync {
    fn token(&self) -> Vec<u8>;
}

/// Accepts everything; the identity comes from the request itself.
pub struct NoAuth;

impl Authenticator for NoAuth {
    fn enabled(&self) -> bool {
        false
    }

    fn validate(&self, _token: &[u8]) -> Result<String, Unauthenticated> {
        Ok(String::new())
    }
}

/// Shared-secret table `token → client_id`.
#[derive(Debug, Clone, Default)]
pub struct StaticTokenAuth {
    table: Vec<(Vec<u8>, String)>,
}

impl StaticTokenAuth {
    pub fn new(tokens: &BTreeMap<String, String>) -> Self {
        Self { table: tokens.iter().map(|(client, tok)| (tok.as_bytes().to_vec(), client.clone())).collect() }
    }
}

/// Compares without early exit on the first differing byte.
pub fn tokens_equal(a: &[u8], b: &[u8]) -> bool {
    a.ct_eq(b).into()
}

impl Authenticator for StaticTokenAuth {
    fn validate(&self, token: &[u8]) -> Result<String, Unauthenticated> {
        if token.is_empty() {
            return Err(Unauthenticated);
        }
        // Scan the whole table so the match position does not leak.
        let mut found = None;
        for (t, client) in &self.table {
            if tokens_equal(t, token) {
                found = Some(client);
            }
        }
        found.cloned().ok_or(Unauthenticated)
    }
}

pub struct StaticToken(pub Vec<u8>);

impl TokenProvider for StaticToken {
    fn token(&self) -> Vec<u8> {
        self.0.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn auth() -> StaticTokenAuth {
        StaticTokenAuth::new(&BTreeMap::from([
            ("alice".to_string(), "tok-a-123".to_string()),
            ("bob".to_string(), "tok-b-456".to_string()),
        ]))
    }

    #[test]
    fn token_checks() {
        let a = auth();
        assert_eq!(a.validate(b"tok-a-123"), Ok("alice".to_string()));
        assert_eq!(a.validate(b"tok-b-456"), Ok("bob".to_string()));
        assert_eq!(a.validate(b""), Err(Unauthenticated));
        assert_eq!(a.validate(b"tok-a-124"), Err(Unauthenticated));
        assert_eq!(a.validate(b"tok-a-12"), Err(Unauthenticated));
        assert!(NoAuth.validate(b"").is_ok());
    }

    #[test]
    fn comparison_is_constant_time_primitive() {
        // Delegates to subtle's ConstantTimeEq rather than slice equality.
        assert!(tokens_equal(b"abc", b"abc"));
        assert!(!tokens_equal(b"abc", b"abd"));
        assert!(!tokens_equal(b"abc", b"ab"));
    }
}
