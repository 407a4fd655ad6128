use std::collections::BTreeMap;

use crate::distributions::log_sum_exp;
use crate::error::{Error, Result};
use crate::graph::{Address, Env, Model, Value};

struct MapEnv<'a>(&'a BTreeMap<Address, Value>);

impl Env for MapEnv<'_> {
    fn read(&mut self, addr: &Address) -> Result<Value> {
        self.0.get(addr).cloned().ok_or_else(|| Error::UnknownAddress(addr.clone()))
    }
}

/// Normalized joint over every assignment of a fixed set of discrete
/// latents, with the given observations held fixed.
#[derive(Clone, Debug)]
pub struct Enumeration {
    pub latents: Vec<Address>,
    /// Each assignment, with its posterior probability.
    pub states: Vec<(BTreeMap<Address, Value>, f64)>,
}

fn discrete_values(support: usize, binary: bool) -> Vec<Value> {
    if binary {
        vec![Value::Bool(false), Value::Bool(true)]
    } else {
        (0..support).map(Value::Index).collect()
    }
}

/// Enumerates the joint of a closed-universe discrete model. `latents`
/// gives each latent with its support size and whether it is boolean.
pub fn enumerate_joint(
    model: &dyn Model,
    latents: &[(Address, usize, bool)],
    observations: &BTreeMap<Address, Value>,
) -> Result<Enumeration> {
    let mut states: Vec<BTreeMap<Address, Value>> = vec![observations.clone()];
    for (a, n, binary) in latents {
        states = states
            .into_iter()
            .flat_map(|s| {
                discrete_values(*n, *binary).into_iter().map(move |v| {
                    let mut t = s.clone();
                    t.insert(a.clone(), v);
                    t
                })
            })
            .collect();
    }
    let log_w: Vec<f64> = states
        .iter()
        .map(|s| {
            s.iter()
                .map(|(a, v)| model.distribution(a, &mut MapEnv(s))?.log_prob(v))
                .sum::<Result<f64>>()
        })
        .collect::<Result<_>>()?;
    let z = log_sum_exp(&log_w);
    Ok(Enumeration {
        latents: latents.iter().map(|(a, ..)| a.clone()).collect(),
        states: states.into_iter().zip(log_w).map(|(s, w)| (s, (w - z).exp())).collect(),
    })
}

impl Enumeration {
    /// Posterior marginal of one latent over its support indices.
    pub fn marginal(&self, addr: &Address, size: usize) -> Vec<f64> {
        let mut m = vec![0.0; size];
        for (s, p) in &self.states {
            if let Some(k) = s.get(addr).and_then(Value::as_index) {
                m[k] += p;
            }
        }
        m
    }
}

/// Exact single-site conditional of `addr` with every other node fixed at
/// `state`: proportional to the node's own factor times its children's.
pub fn single_site_conditional(
    model: &dyn Model,
    state: &BTreeMap<Address, Value>,
    addr: &Address,
    size: usize,
    binary: bool,
) -> Result<Vec<f64>> {
    let log_w: Vec<f64> = discrete_values(size, binary)
        .into_iter()
        .map(|v| {
            let mut s = state.clone();
            s.insert(addr.clone(), v);
            s.iter()
                .map(|(a, x)| model.distribution(a, &mut MapEnv(&s))?.log_prob(x))
                .sum::<Result<f64>>()
        })
        .collect::<Result<_>>()?;
    let z = log_sum_exp(&log_w);
    Ok(log_w.iter().map(|w| (w - z).exp()).collect())
}
