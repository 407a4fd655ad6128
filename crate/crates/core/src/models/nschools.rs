use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::DataTable;
use crate::distributions::Distribution;
use crate::error::{Error, Result};
use crate::graph::{Address, Env, Model, Value};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NSchoolsConfig {
    pub n_schools: usize,
    pub n_states: usize,
    pub n_districts: usize,
    pub n_types: usize,
    /// Scale of the half-Cauchy prior on each level's spread.
    pub level_scale: f64,
    pub seed: u64,
}

impl Default for NSchoolsConfig {
    fn default() -> Self {
        Self { n_schools: 50, n_states: 8, n_districts: 5, n_types: 5, level_scale: 1.0, seed: 0 }
    }
}

/// Grouping levels, in the order used for `school_groups`.
pub const LEVELS: [&str; 3] = ["state", "district", "type"];

/// Hierarchical model of school effects:
/// `beta0 ~ StudentT(3, 0, 10)`, `tau_l ~ HalfCauchy(level_scale)`,
/// `beta_l(j) ~ N(0, tau_l)` and
/// `y(k) ~ N(beta0 + sum_l beta_l(g_l(k)), sigma_k)`, with `y` observed.
#[derive(Clone, Debug, PartialEq)]
pub struct NSchools {
    pub config: NSchoolsConfig,
    /// Group of each school at each level.
    pub school_groups: Vec<[usize; 3]>,
    pub sigmas: Vec<f64>,
    pub y: Vec<f64>,
    /// Data-generating values keyed by address.
    pub truth: BTreeMap<String, f64>,
}

impl NSchools {
    /// Assignments and scales are drawn uniformly, then every latent from
    /// its prior, then the observations.
    pub fn generate(cfg: &NSchoolsConfig) -> Result<Self> {
        let sizes = [cfg.n_states, cfg.n_districts, cfg.n_types];
        if cfg.n_schools == 0 || sizes.contains(&0) || cfg.level_scale.is_nan() || cfg.level_scale <= 0.0 {
            return Err(Error::Config("nschools needs positive counts and scale".into()));
        }
        let mut rng = seed::substream(cfg.seed, "nschools");
        let school_groups: Vec<[usize; 3]> =
            (0..cfg.n_schools).map(|_| sizes.map(|n| rng.random_range(0..n))).collect();
        let sigmas: Vec<f64> = (0..cfg.n_schools).map(|_| rng.random_range(0.5..1.5)).collect();

        let mut truth = BTreeMap::new();
        let beta0 = Distribution::student_t(3.0, 0.0, 10.0)?.sample(&mut rng).as_f64();
        truth.insert(Self::beta0().to_string(), beta0);
        let mut effects: Vec<Vec<f64>> = Vec::new();
        for (l, n) in sizes.iter().enumerate() {
            let tau = Distribution::half_cauchy(cfg.level_scale)?.sample(&mut rng).as_f64();
            truth.insert(Self::tau(l).to_string(), tau);
            let d = Distribution::normal(0.0, tau)?;
            let e: Vec<f64> = (0..*n).map(|_| d.sample(&mut rng).as_f64()).collect();
            for (j, v) in e.iter().enumerate() {
                truth.insert(Self::effect(l, j).to_string(), *v);
            }
            effects.push(e);
        }
        let mut y = Vec::with_capacity(cfg.n_schools);
        for (g, s) in school_groups.iter().zip(&sigmas) {
            let mean = beta0 + (0..3).map(|l| effects[l][g[l]]).sum::<f64>();
            y.push(Distribution::normal(mean, *s)?.sample(&mut rng).as_f64());
        }
        Ok(Self { config: cfg.clone(), school_groups, sigmas, y, truth })
    }

    pub fn beta0() -> Address {
        Address::new("beta0")
    }

    pub fn tau(level: usize) -> Address {
        Address::new(&format!("tau_{}", LEVELS[level]))
    }

    pub fn effect(level: usize, group: usize) -> Address {
        Address::indexed(&format!("beta_{}", LEVELS[level]), [group as i64])
    }

    pub fn y(k: usize) -> Address {
        Address::indexed("y", [k as i64])
    }

    fn level_sizes(&self) -> [usize; 3] {
        [self.config.n_states, self.config.n_districts, self.config.n_types]
    }

    /// Number of latent variables.
    pub fn latent_dim(&self) -> usize {
        1 + 3 + self.level_sizes().iter().sum::<usize>()
    }

    pub fn table(&self) -> DataTable {
        DataTable {
            header: ["school", "state", "district", "type", "sigma", "y"].map(String::from).to_vec(),
            rows: (0..self.y.len())
                .map(|k| {
                    let g = self.school_groups[k];
                    vec![k as f64, g[0] as f64, g[1] as f64, g[2] as f64, self.sigmas[k], self.y[k]]
                })
                .collect(),
        }
    }

    pub fn manifest(&self) -> serde_json::Value {
        serde_json::json!({
            "config": self.config,
            "latent_dim": self.latent_dim(),
            "truth": self.truth,
        })
    }

    fn level_of(family: &str) -> Option<usize> {
        LEVELS.iter().position(|l| family.strip_prefix("beta_") == Some(l))
    }

    fn tau_level(family: &str) -> Option<usize> {
        LEVELS.iter().position(|l| family.strip_prefix("tau_") == Some(l))
    }
}

impl Model for NSchools {
    fn name(&self) -> &str {
        "nschools"
    }

    fn distribution(&self, addr: &Address, env: &mut dyn Env) -> Result<Distribution> {
        let family = &*addr.family;
        let sizes = self.level_sizes();
        match addr.args.as_slice() {
            [] if family == "beta0" => return Distribution::student_t(3.0, 0.0, 10.0),
            [] => {
                if let Some(_l) = Self::tau_level(family) {
                    return Distribution::half_cauchy(self.config.level_scale);
                }
            }
            [j] => {
                if let Some(l) = Self::level_of(family) {
                    if (0..sizes[l] as i64).contains(j) {
                        return Distribution::normal(0.0, env.real(&Self::tau(l))?);
                    }
                }
                if family == "y" && (0..self.y.len() as i64).contains(j) {
                    let k = *j as usize;
                    let g = self.school_groups[k];
                    let mut mean = env.real(&Self::beta0())?;
                    for (l, group) in g.iter().enumerate() {
                        mean += env.real(&Self::effect(l, *group))?;
                    }
                    return Distribution::normal(mean, self.sigmas[k]);
                }
            }
            _ => {}
        }
        Err(Error::UndefinedVariable(addr.clone()))
    }

    /// Every latent is a query, so groups without schools still exist.
    fn queries(&self) -> Vec<Address> {
        let mut q = vec![Self::beta0()];
        for (l, n) in self.level_sizes().iter().enumerate() {
            q.push(Self::tau(l));
            q.extend((0..*n).map(|j| Self::effect(l, j)));
        }
        q
    }

    fn observations(&self) -> BTreeMap<Address, Value> {
        self.y.iter().enumerate().map(|(k, v)| (Self::y(k), Value::Real(*v))).collect()
    }
}
