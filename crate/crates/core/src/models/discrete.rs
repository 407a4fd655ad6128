use std::collections::BTreeMap;

use crate::distributions::Distribution;
use crate::error::{Error, Result};
use crate::graph::{Address, Env, Model, Value};

/// A reduced mixture with every variable discretized, small enough to
/// enumerate: a component indicator `c`, a three-bin position `x`, a noise
/// switch `z` and a three-bin reading `y`, observed. The 12 latent states
/// are `2 * 3 * 2`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteChain {
    pub y_obs: usize,
}

impl Default for DiscreteChain {
    fn default() -> Self {
        Self { y_obs: 1 }
    }
}

const POSITION: [[f64; 3]; 2] = [[0.7, 0.2, 0.1], [0.1, 0.2, 0.7]];
const SWITCH: [f64; 3] = [0.2, 0.5, 0.9];
/// `READING[z][x]` is the distribution of `y`.
const READING: [[[f64; 3]; 3]; 2] = [
    [[0.8, 0.15, 0.05], [0.15, 0.7, 0.15], [0.05, 0.15, 0.8]],
    [[0.4, 0.3, 0.3], [0.3, 0.4, 0.3], [0.3, 0.3, 0.4]],
];

impl DiscreteChain {
    pub fn c() -> Address {
        Address::new("c")
    }

    pub fn x() -> Address {
        Address::new("x")
    }

    pub fn z() -> Address {
        Address::new("z")
    }

    pub fn y() -> Address {
        Address::new("y")
    }

    /// Latents with support size and whether they are boolean.
    pub fn latents() -> Vec<(Address, usize, bool)> {
        vec![(Self::c(), 2, true), (Self::x(), 3, false), (Self::z(), 2, true)]
    }
}

impl Model for DiscreteChain {
    fn name(&self) -> &str {
        "discrete"
    }

    fn distribution(&self, addr: &Address, env: &mut dyn Env) -> Result<Distribution> {
        match (&*addr.family, addr.args.as_slice()) {
            ("c", []) => Distribution::bernoulli(0.6),
            ("x", []) => {
                let c = usize::from(env.boolean(&Self::c())?);
                Distribution::categorical(POSITION[c].to_vec())
            }
            ("z", []) => Distribution::bernoulli(SWITCH[env.index(&Self::x())?]),
            ("y", []) => {
                let x = env.index(&Self::x())?;
                let z = usize::from(env.boolean(&Self::z())?);
                Distribution::categorical(READING[z][x].to_vec())
            }
            _ => Err(Error::UndefinedVariable(addr.clone())),
        }
    }

    fn queries(&self) -> Vec<Address> {
        vec![Self::c()]
    }

    fn observations(&self) -> BTreeMap<Address, Value> {
        BTreeMap::from([(Self::y(), Value::Index(self.y_obs))])
    }
}
