//! Open-universe Bayesian networks.
//!
//! A [`Model`] is declarative: for any [`Address`] it returns the node's
//! distribution, reading the values of other nodes through an [`Env`]. The
//! reads made while evaluating a node are recorded as its parents, so the
//! network structure is discovered rather than declared, and may change
//! when latent values change.

mod world;

pub use world::{ancestral_sample, NodeSnapshot, NodeState, World, WorldDiff, WorldSnapshot};

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::distributions::Distribution;
use crate::error::{Error, Result};
use crate::seed;

/// Identity of a random variable: a family name plus integer indices.
///
/// Ordering is lexicographic on the family, then on the indices.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Address {
    pub family: Arc<str>,
    pub args: Vec<i64>,
}

impl Address {
    pub fn new(family: &str) -> Self {
        Self { family: Arc::from(family), args: Vec::new() }
    }

    pub fn indexed(family: &str, args: impl Into<Vec<i64>>) -> Self {
        Self { family: Arc::from(family), args: args.into() }
    }

    /// Stable hash used to key per-node random streams.
    pub fn stable_hash(&self) -> u64 {
        self.args
            .iter()
            .fold(seed::fnv1a(self.family.as_bytes()), |h, a| seed::mix(h, *a as u64))
    }

    /// Arguments joined with `;`, the form used in CSV output.
    pub fn args_string(&self) -> String {
        self.args.iter().map(i64::to_string).collect::<Vec<_>>().join(";")
    }
}

impl fmt::Display for Address {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.args.is_empty() {
            write!(f, "{}", self.family)
        } else {
            write!(f, "{}({})", self.family, self.args_string().replace(';', ","))
        }
    }
}

impl fmt::Debug for Address {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Bool(bool),
    Index(usize),
    Real(f64),
}

impl Value {
    pub fn as_real(&self) -> Option<f64> {
        match self {
            Self::Real(x) => Some(*x),
            _ => None,
        }
    }

    pub fn as_bool(&self) -> Option<bool> {
        match self {
            Self::Bool(b) => Some(*b),
            _ => None,
        }
    }

    /// Position in a discrete support (`false` = 0, `true` = 1).
    pub fn as_index(&self) -> Option<usize> {
        match self {
            Self::Bool(b) => Some(usize::from(*b)),
            Self::Index(k) => Some(*k),
            Self::Real(_) => None,
        }
    }

    /// Numeric view used by diagnostics and CSV output.
    pub fn as_f64(&self) -> f64 {
        match self {
            Self::Real(x) => *x,
            Self::Bool(b) => f64::from(u8::from(*b)),
            Self::Index(k) => *k as f64,
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Real(x) => write!(f, "{x:?}"),
            Self::Bool(b) => write!(f, "{b}"),
            Self::Index(k) => write!(f, "{k}"),
        }
    }
}

/// Read access to other nodes while a model evaluates a distribution. Every
/// read becomes a parent edge.
pub trait Env {
    fn read(&mut self, addr: &Address) -> Result<Value>;

    fn real(&mut self, addr: &Address) -> Result<f64> {
        let v = self.read(addr)?;
        v.as_real()
            .ok_or_else(|| Error::TypeMismatch(format!("{addr} holds {v:?}, expected real")))
    }

    fn boolean(&mut self, addr: &Address) -> Result<bool> {
        let v = self.read(addr)?;
        v.as_bool()
            .ok_or_else(|| Error::TypeMismatch(format!("{addr} holds {v:?}, expected bool")))
    }

    fn index(&mut self, addr: &Address) -> Result<usize> {
        let v = self.read(addr)?;
        v.as_index()
            .ok_or_else(|| Error::TypeMismatch(format!("{addr} holds {v:?}, expected index")))
    }
}

/// A declarative generative model.
///
/// `distribution` must be pure: identical reads give an identical result.
pub trait Model: Send + Sync {
    fn name(&self) -> &str;

    fn distribution(&self, addr: &Address, env: &mut dyn Env) -> Result<Distribution>;

    /// Addresses that are always part of a world, whatever the observations.
    fn queries(&self) -> Vec<Address>;

    /// Declared observations. Their addresses have the observed role even in
    /// forward samples where nothing is clamped.
    fn observations(&self) -> BTreeMap<Address, Value>;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn address_order_is_family_then_args() {
        let mut v = [Address::indexed("b", [0]),
            Address::indexed("a", [2]),
            Address::new("a"),
            Address::indexed("a", [1, 5]),
            Address::indexed("a", [1])];
        v.sort();
        let shown: Vec<String> = v.iter().map(ToString::to_string).collect();
        assert_eq!(shown, ["a", "a(1)", "a(1,5)", "a(2)", "b(0)"]);
    }

    #[test]
    fn stable_hash_distinguishes_args() {
        assert_ne!(
            Address::indexed("n", [1]).stable_hash(),
            Address::indexed("n", [2]).stable_hash()
        );
        assert_eq!(Address::new("x").stable_hash(), Address::new("x").stable_hash());
    }

    #[test]
    fn value_json_shapes() {
        assert_eq!(serde_json::to_string(&Value::Real(2.0)).unwrap(), "2.0");
        assert_eq!(serde_json::to_string(&Value::Index(2)).unwrap(), "2");
        let back: Value = serde_json::from_str("2.0").unwrap();
        assert_eq!(back, Value::Real(2.0));
        let back: Value = serde_json::from_str("2").unwrap();
        assert_eq!(back, Value::Index(2));
    }
}
