use std::collections::BTreeMap;

use crate::distributions::Distribution;
use crate::error::{Error, Result};
use crate::graph::{Address, Env, Model, Value};

/// `x, y ~ N(0, 10)`, `n` unrelated `nuisance(i) ~ N(0, 10)`, and
/// `noisy_sq_length ~ N(x^2 + y^2, 0.1)` observed.
#[derive(Clone, Debug, PartialEq)]
pub struct Nuisance {
    pub n_nuisance: usize,
    pub observed: f64,
}

impl Nuisance {
    pub fn new(n_nuisance: usize) -> Self {
        Self { n_nuisance, observed: 25.0 }
    }

    pub fn x() -> Address {
        Address::new("x")
    }

    pub fn y() -> Address {
        Address::new("y")
    }

    pub fn nuisance(i: usize) -> Address {
        Address::indexed("nuisance", [i as i64])
    }

    pub fn noisy_sq_length() -> Address {
        Address::new("noisy_sq_length")
    }

    /// Families whose networks must not depend on the nuisance count.
    pub const CORE_FAMILIES: [&'static str; 3] = ["noisy_sq_length", "x", "y"];
}

impl Model for Nuisance {
    fn name(&self) -> &str {
        "nuisance"
    }

    fn distribution(&self, addr: &Address, env: &mut dyn Env) -> Result<Distribution> {
        match (&*addr.family, addr.args.as_slice()) {
            ("x" | "y", []) => Distribution::normal(0.0, 10.0),
            ("nuisance", [i]) if (0..self.n_nuisance as i64).contains(i) => {
                Distribution::normal(0.0, 10.0)
            }
            ("noisy_sq_length", []) => {
                let x = env.real(&Self::x())?;
                let y = env.real(&Self::y())?;
                Distribution::normal(x * x + y * y, 0.1)
            }
            _ => Err(Error::UndefinedVariable(addr.clone())),
        }
    }

    fn queries(&self) -> Vec<Address> {
        let mut q = vec![Self::x(), Self::y()];
        q.extend((0..self.n_nuisance).map(Self::nuisance));
        q
    }

    fn observations(&self) -> BTreeMap<Address, Value> {
        BTreeMap::from([(Self::noisy_sq_length(), Value::Real(self.observed))])
    }
}
