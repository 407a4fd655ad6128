//! Benchmark models with data generators and, where tractable, exact
//! posterior oracles.

mod blr;
mod conj_normal;
mod discrete;
mod enumerate;
mod gmm2d;
mod nschools;
mod nuisance;

pub use blr::{Blr, BlrConfig};
pub use conj_normal::ConjNormal;
pub use discrete::DiscreteChain;
pub use enumerate::{enumerate_joint, single_site_conditional, Enumeration};
pub use gmm2d::Gmm2d;
pub use nschools::{NSchools, NSchoolsConfig};
pub use nuisance::Nuisance;

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Address, Model, Value};

/// Tabular data emitted by a generator, written next to its manifest.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DataTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

/// A model with its default observations and generated data.
#[derive(Clone)]
pub struct ZooModel {
    pub name: String,
    pub model: Arc<dyn Model>,
    pub observations: BTreeMap<Address, Value>,
    /// Held-out observations for predictive log likelihood; may be empty.
    pub heldout: BTreeMap<Address, Value>,
    /// Counts, seeds and true parameters of the generated data.
    pub manifest: serde_json::Value,
    pub data: Option<DataTable>,
}

/// Parameters accepted by [`build`]. Unset fields take each model's
/// defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelParams {
    pub n_nuisance: Option<usize>,
    pub n_rows: Option<usize>,
    pub n_features: Option<usize>,
    pub prior_scales_are_sds: Option<bool>,
    pub n_schools: Option<usize>,
    pub n_states: Option<usize>,
    pub n_districts: Option<usize>,
    pub n_types: Option<usize>,
    pub level_scale: Option<f64>,
    pub observed: Option<f64>,
    pub data_seed: Option<u64>,
}

pub const MODEL_NAMES: [&str; 6] = ["gmm2d", "conj-normal", "nuisance", "blr", "nschools", "discrete"];

fn wrap<M: Model + 'static>(name: &str, m: M, manifest: serde_json::Value) -> ZooModel {
    let observations = m.observations();
    ZooModel {
        name: name.to_string(),
        model: Arc::new(m),
        observations,
        heldout: BTreeMap::new(),
        manifest,
        data: None,
    }
}

/// Builds a model by name.
pub fn build(name: &str, p: &ModelParams) -> Result<ZooModel> {
    let seed = p.data_seed.unwrap_or(0);
    match name {
        "gmm2d" => {
            let mut m = Gmm2d::default();
            if let Some(y) = p.observed {
                m.y_obs = y;
            }
            let manifest = serde_json::json!({"y": m.y_obs});
            Ok(wrap(name, m, manifest))
        }
        "conj-normal" => {
            let mut m = ConjNormal::default();
            if let Some(y) = p.observed {
                m.y_obs = y;
            }
            let manifest = serde_json::json!({
                "sigma_x": m.sigma_x, "sigma_y": m.sigma_y, "y": m.y_obs
            });
            Ok(wrap(name, m, manifest))
        }
        "nuisance" => {
            let mut m = Nuisance::new(p.n_nuisance.unwrap_or(100));
            if let Some(v) = p.observed {
                m.observed = v;
            }
            let manifest = serde_json::json!({
                "n_nuisance": m.n_nuisance, "noisy_sq_length": m.observed
            });
            Ok(wrap(name, m, manifest))
        }
        "blr" => {
            let cfg = BlrConfig {
                n_rows: p.n_rows.unwrap_or(2000),
                n_features: p.n_features.unwrap_or(10),
                prior_scales_are_sds: p.prior_scales_are_sds.unwrap_or(false),
                seed,
            };
            let m = Blr::generate(&cfg)?;
            let heldout = m.heldout();
            let data = m.table();
            let manifest = m.manifest();
            let mut z = wrap(name, m, manifest);
            z.heldout = heldout;
            z.data = Some(data);
            Ok(z)
        }
        "nschools" => {
            let d = NSchoolsConfig::default();
            let cfg = NSchoolsConfig {
                n_schools: p.n_schools.unwrap_or(d.n_schools),
                n_states: p.n_states.unwrap_or(d.n_states),
                n_districts: p.n_districts.unwrap_or(d.n_districts),
                n_types: p.n_types.unwrap_or(d.n_types),
                level_scale: p.level_scale.unwrap_or(d.level_scale),
                seed,
            };
            let m = NSchools::generate(&cfg)?;
            let data = m.table();
            let manifest = m.manifest();
            let mut z = wrap(name, m, manifest);
            z.data = Some(data);
            Ok(z)
        }
        "discrete" => {
            let m = DiscreteChain::default();
            let manifest = serde_json::json!({"y": m.y_obs});
            Ok(wrap(name, m, manifest))
        }
        other => Err(Error::UnknownModel(other.to_string())),
    }
}
