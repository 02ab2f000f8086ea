//! Dotted-decimal versions and the range constraints written after `@`.
//!
//! A constraint is a pair of optional bounds. The upper bound is
//! *prefix-inclusive*: `@1.0:1.5` admits `1.5.3`, and a bare `@1.2` is the
//! range `1.2:1.2`, which admits `1.2` and every `1.2.x`.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum VersionError {
    #[error("empty version")]
    Empty,
    #[error("invalid version component {0:?}")]
    Component(String),
    #[error("malformed version range {0:?}")]
    Range(String),
    #[error("empty version range {0:?}")]
    EmptyRange(String),
}

/// A version such as `1.14.5`.
///
/// Ordering is lexicographic on components; a missing trailing component
/// sorts lower, so `1.2 < 1.2.0 < 1.2.11`.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Version(Vec<u64>);

impl Version {
    pub fn new(components: Vec<u64>) -> Result<Self, VersionError> {
        if components.is_empty() {
            return Err(VersionError::Empty);
        }
        Ok(Version(components))
    }

    pub fn components(&self) -> &[u64] {
        &self.0
    }

    /// True if `self`'s components are a leading run of `other`'s.
    pub fn is_prefix_of(&self, other: &Version) -> bool {
        other.0.len() >= self.0.len() && other.0[..self.0.len()] == self.0[..]
    }
}

impl FromStr for Version {
    type Err = VersionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.is_empty() {
            return Err(VersionError::Empty);
        }
        let components = s
            .split('.')
            .map(|part| {
                if part.is_empty() || !part.bytes().all(|b| b.is_ascii_digit()) {
                    return Err(VersionError::Component(part.to_string()));
                }
                part.parse::<u64>()
                    .map_err(|_| VersionError::Component(part.to_string()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Version::new(components)
    }
}

impl TryFrom<String> for Version {
    type Error = VersionError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<Version> for String {
    fn from(v: Version) -> String {
        v.to_string()
    }
}

impl fmt::Display for Version {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, c) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(".")?;
            }
            write!(f, "{c}")?;
        }
        Ok(())
    }
}

impl fmt::Debug for Version {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Version({self})")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConstraintKind {
    ExactOrPrefix,
    Range,
}

/// A non-empty set of versions bounded by optional `lo` and `hi`.
#[derive(Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct VersionConstraint {
    lo: Option<Version>,
    hi: Option<Version>,
}

/// `v` lies under the prefix-inclusive upper bound `hi`.
fn below_upper(v: &Version, hi: &Version) -> bool {
    v <= hi || hi.is_prefix_of(v)
}

/// The set admitted by upper bound `a` is contained in the one admitted by `b`.
///
/// `:1.2` admits `1.2.9`, so it is not within `:1.2.5` even though `1.2 < 1.2.5`.
fn upper_within(a: &Version, b: &Version) -> bool {
    b.is_prefix_of(a) || (a < b && !a.is_prefix_of(b))
}

impl VersionConstraint {
    /// Build a constraint; `None` when the bounds admit no version or are both absent.
    pub fn new(lo: Option<Version>, hi: Option<Version>) -> Option<Self> {
        if lo.is_none() && hi.is_none() {
            return None;
        }
        if let (Some(l), Some(h)) = (&lo, &hi) {
            if !below_upper(l, h) {
                return None;
            }
        }
        Some(VersionConstraint { lo, hi })
    }

    pub fn exact(v: Version) -> Self {
        VersionConstraint {
            lo: Some(v.clone()),
            hi: Some(v),
        }
    }

    pub fn lo(&self) -> Option<&Version> {
        self.lo.as_ref()
    }

    pub fn hi(&self) -> Option<&Version> {
        self.hi.as_ref()
    }

    pub fn kind(&self) -> ConstraintKind {
        match (&self.lo, &self.hi) {
            (Some(l), Some(h)) if l == h => ConstraintKind::ExactOrPrefix,
            _ => ConstraintKind::Range,
        }
    }

    pub fn contains(&self, v: &Version) -> bool {
        self.lo.as_ref().is_none_or(|lo| v >= lo)
            && self.hi.as_ref().is_none_or(|hi| below_upper(v, hi))
    }

    /// Intersection of two constraints, `None` when it is empty.
    pub fn intersect(&self, other: &VersionConstraint) -> Option<VersionConstraint> {
        let lo = match (&self.lo, &other.lo) {
            (Some(a), Some(b)) => Some(a.max(b).clone()),
            (a, b) => a.clone().or_else(|| b.clone()),
        };
        let hi = match (&self.hi, &other.hi) {
            (Some(a), Some(b)) => Some(if upper_within(a, b) { a.clone() } else { b.clone() }),
            (a, b) => a.clone().or_else(|| b.clone()),
        };
        VersionConstraint::new(lo, hi)
    }

    /// Every version admitted by `self` is admitted by `other`.
    pub fn is_subset_of(&self, other: &VersionConstraint) -> bool {
        let lo_ok = match (&self.lo, &other.lo) {
            (_, None) => true,
            (None, Some(_)) => false,
            (Some(a), Some(b)) => a >= b,
        };
        let hi_ok = match (&self.hi, &other.hi) {
            (_, None) => true,
            (None, Some(_)) => false,
            (Some(a), Some(b)) => upper_within(a, b),
        };
        lo_ok && hi_ok
    }
}

impl FromStr for VersionConstraint {
    type Err = VersionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (lo, hi) = match s.split_once(':') {
            None => {
                let v: Version = s.parse()?;
                (Some(v.clone()), Some(v))
            }
            Some((l, h)) => {
                if h.contains(':') || (l.is_empty() && h.is_empty()) {
                    return Err(VersionError::Range(s.to_string()));
                }
                let lo = if l.is_empty() { None } else { Some(l.parse()?) };
                let hi = if h.is_empty() { None } else { Some(h.parse()?) };
                (lo, hi)
            }
        };
        VersionConstraint::new(lo, hi).ok_or_else(|| VersionError::EmptyRange(s.to_string()))
    }
}

impl TryFrom<String> for VersionConstraint {
    type Error = VersionError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<VersionConstraint> for String {
    fn from(v: VersionConstraint) -> String {
        v.to_string()
    }
}

impl fmt::Display for VersionConstraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (&self.lo, &self.hi) {
            (Some(l), Some(h)) if l == h => write!(f, "{l}"),
            (Some(l), Some(h)) => write!(f, "{l}:{h}"),
            (Some(l), None) => write!(f, "{l}:"),
            (None, Some(h)) => write!(f, ":{h}"),
            (None, None) => Ok(()),
        }
    }
}

impl fmt::Debug for VersionConstraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "VersionConstraint(@{self})")
    }
}

/// Newest-first position of `v` in `versions`, or `versions.len()` if absent.
pub fn recency_index(versions: &[Version], v: &Version) -> usize {
    versions
        .iter()
        .position(|x| x == v)
        .unwrap_or(versions.len())
}

pub(crate) fn cmp_newest_first(a: &Version, b: &Version) -> Ordering {
    b.cmp(a)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(s: &str) -> Version {
        s.parse().unwrap()
    }

    fn c(s: &str) -> VersionConstraint {
        s.parse().unwrap()
    }

    #[test]
    fn ordering_treats_missing_components_as_lower() {
        assert!(v("1.2") < v("1.2.0"));
        assert!(v("1.2.0") < v("1.2.11"));
        assert!(v("1.2.11") < v("1.3"));
        assert!(v("1.10") > v("1.9"));
    }

    #[test]
    fn prefix_constraint_accepts_longer_versions() {
        let zlib12 = c("1.2");
        assert_eq!(zlib12.kind(), ConstraintKind::ExactOrPrefix);
        assert!(zlib12.contains(&v("1.2")));
        assert!(zlib12.contains(&v("1.2.11")));
        assert!(!zlib12.contains(&v("1.3")));
        assert!(!zlib12.contains(&v("1.1.9")));
        assert!(!zlib12.contains(&v("1.20")));
    }

    #[test]
    fn ranges_are_prefix_inclusive_at_the_top() {
        let r = c("1.0:1.5");
        assert!(r.contains(&v("1.5.3")));
        assert!(r.contains(&v("1.0")));
        assert!(!r.contains(&v("1.6")));
        assert!(!r.contains(&v("0.9")));
        assert!(c("2:").contains(&v("10.1")));
        assert!(c(":1").contains(&v("1.9")));
        assert!(!c(":1").contains(&v("2")));
    }

    #[test]
    fn malformed_versions_are_rejected() {
        for bad in ["", "1..2", "a.b", "1.", ":", "1:2:3", "2.0:1.0", "1.-1"] {
            assert!(bad.parse::<VersionConstraint>().is_err(), "{bad}");
        }
    }

    #[test]
    fn intersect_prefix_with_longer_prefix() {
        assert_eq!(c("1.2").intersect(&c("1.2.11")), Some(c("1.2.11")));
        assert_eq!(c("1.2").intersect(&c("1.3")), None);
    }

    #[test]
    fn upper_bound_containment_respects_prefixes() {
        assert!(c(":1.2.5").is_subset_of(&c(":1.2")));
        assert!(!c(":1.2").is_subset_of(&c(":1.2.5")));
        assert!(c(":1.2").is_subset_of(&c(":1.3")));
        assert_eq!(c(":1.2").intersect(&c(":1.2.5")), Some(c(":1.2.5")));
    }

    #[test]
    fn intersect_overlapping_ranges() {
        let merged = c("1.0:1.5").intersect(&c("1.3:2.0")).unwrap();
        assert_eq!(merged.to_string(), "1.3:1.5");
    }

    #[test]
    fn display_round_trips() {
        for s in ["1.2", "1.0:1.5", "3:", ":4.1", "1.2.5:1.2"] {
            assert_eq!(c(s).to_string(), s);
        }
    }

    #[test]
    fn recency_index_counts_from_newest() {
        let vs = vec![v("1.1.0"), v("1.0.0")];
        assert_eq!(recency_index(&vs, &v("1.1.0")), 0);
        assert_eq!(recency_index(&vs, &v("1.0.0")), 1);
        assert_eq!(recency_index(&vs, &v("0.9")), 2);
    }
}
