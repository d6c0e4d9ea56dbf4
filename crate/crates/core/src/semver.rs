//! Semantic versions (`MAJOR.MINOR.PATCH[-PRE]`) and the requirement forms
//! used by extension manifests: `*`, `=V` or bare `V`, `>=V`, `>V`, `<=V`,
//! `<V`, `^V`, joined by commas or whitespace as a conjunction.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid semantic version {input:?}: {reason}")]
pub struct SemverError {
    pub input: String,
    pub reason: &'static str,
}

fn err(input: &str, reason: &'static str) -> SemverError {
    SemverError {
        input: input.to_string(),
        reason,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Version {
    pub major: u64,
    pub minor: u64,
    pub patch: u64,
    /// Dot-separated pre-release identifiers; empty for a release.
    pub pre: Vec<String>,
}

impl Version {
    pub const fn new(major: u64, minor: u64, patch: u64) -> Self {
        Version {
            major,
            minor,
            patch,
            pre: Vec::new(),
        }
    }
}

fn numeric(part: &str, input: &str) -> Result<u64, SemverError> {
    if part.is_empty() || !part.bytes().all(|b| b.is_ascii_digit()) {
        return Err(err(input, "components must be decimal integers"));
    }
    if part.len() > 1 && part.starts_with('0') {
        return Err(err(input, "leading zeros are not allowed"));
    }
    part.parse().map_err(|_| err(input, "component out of range"))
}

impl FromStr for Version {
    type Err = SemverError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (core, pre) = match s.split_once('-') {
            Some((core, pre)) => (core, Some(pre)),
            None => (s, None),
        };
        if core.contains('+') || pre.is_some_and(|p| p.contains('+')) {
            return Err(err(s, "build metadata is not supported"));
        }
        let parts: Vec<&str> = core.split('.').collect();
        if parts.len() != 3 {
            return Err(err(s, "expected MAJOR.MINOR.PATCH"));
        }
        let pre = match pre {
            None => Vec::new(),
            Some(p) => {
                let ids: Vec<String> = p.split('.').map(str::to_string).collect();
                for id in &ids {
                    if id.is_empty() || !id.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'-') {
                        return Err(err(s, "invalid pre-release identifier"));
                    }
                    if id.bytes().all(|b| b.is_ascii_digit()) && id.len() > 1 && id.starts_with('0') {
                        return Err(err(s, "leading zeros are not allowed"));
                    }
                }
                ids
            }
        };
        Ok(Version {
            major: numeric(parts[0], s)?,
            minor: numeric(parts[1], s)?,
            patch: numeric(parts[2], s)?,
            pre,
        })
    }
}

impl fmt::Display for Version {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}.{}", self.major, self.minor, self.patch)?;
        if !self.pre.is_empty() {
            write!(f, "-{}", self.pre.join("."))?;
        }
        Ok(())
    }
}

fn cmp_pre(a: &[String], b: &[String]) -> Ordering {
    match (a.is_empty(), b.is_empty()) {
        (true, true) => return Ordering::Equal,
        (true, false) => return Ordering::Greater,
        (false, true) => return Ordering::Less,
        _ => {}
    }
    for (x, y) in a.iter().zip(b) {
        let ord = match (x.parse::<u64>(), y.parse::<u64>()) {
            (Ok(m), Ok(n)) => m.cmp(&n),
            (Ok(_), Err(_)) => Ordering::Less,
            (Err(_), Ok(_)) => Ordering::Greater,
            (Err(_), Err(_)) => x.cmp(y),
        };
        if ord != Ordering::Equal {
            return ord;
        }
    }
    a.len().cmp(&b.len())
}

impl Ord for Version {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.major, self.minor, self.patch)
            .cmp(&(other.major, other.minor, other.patch))
            .then_with(|| cmp_pre(&self.pre, &other.pre))
    }
}

impl PartialOrd for Version {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Serialize for Version {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Version {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Op {
    Exact,
    Greater,
    GreaterEq,
    Less,
    LessEq,
    Caret,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Comparator {
    op: Op,
    version: Version,
}

impl Comparator {
    fn matches(&self, v: &Version) -> bool {
        let c = &self.version;
        match self.op {
            Op::Exact => v == c,
            Op::Greater => v > c,
            Op::GreaterEq => v >= c,
            Op::Less => v < c,
            Op::LessEq => v <= c,
            Op::Caret => {
                let upper = if c.major > 0 {
                    Version::new(c.major + 1, 0, 0)
                } else if c.minor > 0 {
                    Version::new(0, c.minor + 1, 0)
                } else {
                    Version::new(0, 0, c.patch + 1)
                };
                v >= c && *v < upper
            }
        }
    }
}

/// A conjunction of comparators; the empty conjunction (`*`) matches every version.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VersionReq {
    text: String,
    comparators: Vec<Comparator>,
}

impl VersionReq {
    pub fn any() -> Self {
        VersionReq {
            text: "*".into(),
            comparators: Vec::new(),
        }
    }

    pub fn matches(&self, v: &Version) -> bool {
        self.comparators.iter().all(|c| c.matches(v))
    }
}

impl FromStr for VersionReq {
    type Err = SemverError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let trimmed = s.trim();
        if trimmed.is_empty() {
            return Err(err(s, "empty requirement"));
        }
        if trimmed == "*" {
            return Ok(VersionReq::any());
        }
        let mut comparators = Vec::new();
        for term in trimmed.split([',', ' ']).map(str::trim).filter(|t| !t.is_empty()) {
            let (op, rest) = [
                (">=", Op::GreaterEq),
                ("<=", Op::LessEq),
                (">", Op::Greater),
                ("<", Op::Less),
                ("^", Op::Caret),
                ("=", Op::Exact),
            ]
            .iter()
            .find_map(|(prefix, op)| term.strip_prefix(prefix).map(|rest| (*op, rest)))
            .unwrap_or((Op::Exact, term));
            let version = rest.trim().parse().map_err(|_| err(s, "invalid version in requirement"))?;
            comparators.push(Comparator { op, version });
        }
        Ok(VersionReq {
            text: trimmed.to_string(),
            comparators,
        })
    }
}

impl fmt::Display for VersionReq {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text)
    }
}

impl Serialize for VersionReq {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for VersionReq {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(s: &str) -> Version {
        s.parse().unwrap()
    }

    fn req(s: &str) -> VersionReq {
        s.parse().unwrap()
    }

    #[test]
    fn parse_and_order() {
        assert_eq!(v("1.2.3"), Version::new(1, 2, 3));
        assert!(v("1.0.0-alpha") < v("1.0.0-alpha.1"));
        assert!(v("1.0.0-alpha.1") < v("1.0.0-alpha.beta"));
        assert!(v("1.0.0-beta.2") < v("1.0.0-beta.11"));
        assert!(v("1.0.0-rc.1") < v("1.0.0"));
        assert!(v("1.10.0") > v("1.9.9"));
        for bad in ["1.2", "1.2.3.4", "01.2.3", "1.2.x", "", "1.2.3-", "1.2.3+build", "1.2.3-01"] {
            assert!(bad.parse::<Version>().is_err(), "{bad}");
        }
        assert_eq!(v("2.0.0-rc.1").to_string(), "2.0.0-rc.1");
    }

    #[test]
    fn requirements() {
        assert!(req("*").matches(&v("0.0.1")));
        assert!(req("1.2.3").matches(&v("1.2.3")) && !req("=1.2.3").matches(&v("1.2.4")));
        assert!(req(">=1.2.0, <2.0.0").matches(&v("1.9.0")));
        assert!(!req(">=1.2.0 <2.0.0").matches(&v("2.0.0")));
        assert!(req("^1.2.3").matches(&v("1.9.0")) && !req("^1.2.3").matches(&v("2.0.0")));
        assert!(req("^0.2.3").matches(&v("0.2.9")) && !req("^0.2.3").matches(&v("0.3.0")));
        assert!(req("^0.0.3").matches(&v("0.0.3")) && !req("^0.0.3").matches(&v("0.0.4")));
        assert!(req(">1.0.0").matches(&v("1.0.1")) && req("<=1.0.0").matches(&v("1.0.0")));
        assert!("~1.2".parse::<VersionReq>().is_err());
        assert!("".parse::<VersionReq>().is_err());
    }
}
