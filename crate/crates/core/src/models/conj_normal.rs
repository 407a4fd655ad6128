use std::collections::BTreeMap;

use crate::distributions::Distribution;
use crate::error::{Error, Result};
use crate::graph::{Address, Env, Model, Value, World};

/// `x ~ N(0, sigma_x)`, `y ~ N(x, sigma_y)`, with `y` observed.
#[derive(Clone, Debug, PartialEq)]
pub struct ConjNormal {
    pub sigma_x: f64,
    pub sigma_y: f64,
    pub y_obs: f64,
}

impl Default for ConjNormal {
    fn default() -> Self {
        Self { sigma_x: 2.0, sigma_y: 0.1, y_obs: 0.25 }
    }
}

impl ConjNormal {
    pub fn new(sigma_x: f64, sigma_y: f64, y_obs: f64) -> Result<Self> {
        if !(sigma_x > 0.0 && sigma_y > 0.0) {
            return Err(Error::Config("scales must be positive".into()));
        }
        Ok(Self { sigma_x, sigma_y, y_obs })
    }

    pub fn x() -> Address {
        Address::new("x")
    }

    pub fn y() -> Address {
        Address::new("y")
    }

    /// Weight on `y` in the posterior mean.
    pub fn shrinkage(&self) -> f64 {
        let (px, py) = (self.sigma_x.powi(-2), self.sigma_y.powi(-2));
        py / (px + py)
    }

    /// Posterior `(mean, sd)` of `x` given `y`.
    pub fn posterior(&self, y: f64) -> (f64, f64) {
        let precision = self.sigma_x.powi(-2) + self.sigma_y.powi(-2);
        (self.shrinkage() * y, precision.sqrt().recip())
    }

    /// Exact conditional of `x` given the current `y` in `world`.
    pub fn exact_conditional(&self, world: &World) -> Result<Distribution> {
        let y = world
            .value(&Self::y())
            .and_then(Value::as_real)
            .ok_or_else(|| Error::UnknownAddress(Self::y()))?;
        let (m, s) = self.posterior(y);
        Distribution::normal(m, s)
    }
}

impl Model for ConjNormal {
    fn name(&self) -> &str {
        "conj-normal"
    }

    fn distribution(&self, addr: &Address, env: &mut dyn Env) -> Result<Distribution> {
        match (&*addr.family, addr.args.as_slice()) {
            ("x", []) => Distribution::normal(0.0, self.sigma_x),
            ("y", []) => Distribution::normal(env.real(&Self::x())?, self.sigma_y),
            _ => Err(Error::UndefinedVariable(addr.clone())),
        }
    }

    fn queries(&self) -> Vec<Address> {
        vec![Self::x()]
    }

    fn observations(&self) -> BTreeMap<Address, Value> {
        BTreeMap::from([(Self::y(), Value::Real(self.y_obs))])
    }
}
