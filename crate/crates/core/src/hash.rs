//! DAG hashes. The digest function is pinned here and nowhere else.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid hash {0:?}: expected 64 lowercase hex characters")]
pub struct HashFormatError(pub String);

/// A 64-character lowercase hex digest.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct DagHash(String);

impl DagHash {
    /// Digest of an already-canonical byte document.
    pub fn of_bytes(doc: &[u8]) -> Self {
        DagHash(hex::encode(Sha256::digest(doc)))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// Sorts before every real digest; only used as a range bound.
    pub(crate) fn min_bound() -> Self {
        DagHash(String::new())
    }

    /// The leading eight characters, used in prefixes and listings.
    pub fn short(&self) -> &str {
        &self.0[..8]
    }
}

impl FromStr for DagHash {
    type Err = HashFormatError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.len() == 64 && s.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f')) {
            Ok(DagHash(s.to_string()))
        } else {
            Err(HashFormatError(s.to_string()))
        }
    }
}

impl TryFrom<String> for DagHash {
    type Error = HashFormatError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<DagHash> for String {
    fn from(h: DagHash) -> String {
        h.0
    }
}

impl fmt::Display for DagHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Debug for DagHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.short())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_digest() {
        let h = DagHash::of_bytes(b"abc");
        assert_eq!(
            h.as_str(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        assert_eq!(h.short(), "ba7816bf");
    }

    #[test]
    fn parse_rejects_uppercase_and_short() {
        assert!("ABC".parse::<DagHash>().is_err());
        let upper = "BA7816BF8F01CFEA414140DE5DAE2223B00361A396177A9CB410FF61F20015AD";
        assert!(upper.parse::<DagHash>().is_err());
        let h = DagHash::of_bytes(b"x");
        assert_eq!(h.as_str().parse::<DagHash>().unwrap(), h);
    }
}
