//! Run settings: defaults, JSON config overlays, flag overrides and
//! seed derivation.

use std::path::{Path, PathBuf};

use blanket::compile::TrainingConfig;
use blanket::models::{ModelParams, MODEL_NAMES};
use blanket::seed;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value as Json;

use crate::Failure;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ProposerKind {
    Lic,
    Prior,
    Rwmh,
}

impl ProposerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Lic => "lic",
            Self::Prior => "prior",
            Self::Rwmh => "rwmh",
        }
    }
}

/// Seeds derived from the master seed. Every run records them in its
/// manifest.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub master: u64,
    pub data: u64,
    pub compile: u64,
    pub infer: u64,
}

impl Seeds {
    /// `data_seed` pins the data stream when set; otherwise it is derived.
    pub fn derive(master: u64, data_seed: Option<u64>) -> Self {
        Self {
            master,
            data: data_seed.unwrap_or_else(|| seed::derive(master, "data")),
            compile: seed::derive(master, "compile"),
            infer: seed::derive(master, "infer"),
        }
    }
}

/// Everything a `compile`, `infer` or `diagnose` run needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSpec {
    pub model: String,
    pub model_params: ModelParams,
    pub proposer: ProposerKind,
    /// Its `seed` is replaced by the one derived from the master seed.
    pub training: TrainingConfig,
    pub num_samples: usize,
    pub burn_in: usize,
    pub thinning: usize,
    pub n_chains: usize,
    pub seed: u64,
    pub out: PathBuf,
    pub artifact: Option<PathBuf>,
}

impl Default for RunSpec {
    fn default() -> Self {
        Self {
            model: String::new(),
            model_params: ModelParams::default(),
            proposer: ProposerKind::Lic,
            training: TrainingConfig::default(),
            num_samples: 1000,
            burn_in: 1000,
            thinning: 1,
            n_chains: 4,
            seed: 0,
            out: PathBuf::from("out"),
            artifact: None,
        }
    }
}

/// Command-line values shared by every command. `None` leaves the config
/// file or default value in place.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub model: Option<String>,
    pub proposer: Option<ProposerKind>,
    pub seed: Option<u64>,
    pub chains: Option<usize>,
    pub samples: Option<usize>,
    pub burn_in: Option<usize>,
    pub out: Option<PathBuf>,
    pub artifact: Option<PathBuf>,
    pub config: Option<PathBuf>,
}

fn overlay(base: &mut Json, patch: Json) {
    match (base, patch) {
        (Json::Object(b), Json::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => overlay(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, p) => *b = p,
    }
}

/// Reads a config file. A manifest written by a previous run is accepted
/// too: its `spec` entry is used.
pub fn read_config(path: &Path) -> Result<Json, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?;
    let mut json: Json = serde_json::from_str(&text)
        .map_err(|e| Failure::Usage(format!("config {} is not valid JSON: {e}", path.display())))?;
    if let Some(spec) = json.get_mut("spec") {
        json = spec.take();
    }
    if !json.is_object() {
        return Err(Failure::Usage(format!("config {} must be a JSON object", path.display())));
    }
    Ok(json)
}

/// `defaults` with the config file, if any, laid over it.
pub fn with_config<T: Clone + Serialize + DeserializeOwned>(
    defaults: &T,
    config: Option<&Path>,
) -> Result<T, Failure> {
    let Some(path) = config else {
        return Ok(defaults.clone());
    };
    let mut base = serde_json::to_value(defaults).expect("serializable");
    overlay(&mut base, read_config(path)?);
    serde_json::from_value(base)
        .map_err(|e| Failure::Usage(format!("invalid config {}: {e}", path.display())))
}

impl RunSpec {
    /// Defaults, then the config file, then flags.
    pub fn resolve(o: &Overrides) -> Result<Self, Failure> {
        let mut s = with_config(&Self::default(), o.config.as_deref())?;
        if let Some(v) = &o.model {
            s.model.clone_from(v);
        }
        if let Some(v) = o.proposer {
            s.proposer = v;
        }
        if let Some(v) = o.seed {
            s.seed = v;
        }
        if let Some(v) = o.chains {
            s.n_chains = v;
        }
        if let Some(v) = o.samples {
            s.num_samples = v;
        }
        if let Some(v) = o.burn_in {
            s.burn_in = v;
        }
        if let Some(v) = &o.out {
            s.out.clone_from(v);
        }
        if let Some(v) = &o.artifact {
            s.artifact = Some(v.clone());
        }
        s.training.seed = s.seeds().compile;
        s.validate()?;
        Ok(s)
    }

    pub fn seeds(&self) -> Seeds {
        Seeds::derive(self.seed, self.model_params.data_seed)
    }

    /// Model parameters with the data seed filled in.
    pub fn resolved_params(&self) -> ModelParams {
        ModelParams { data_seed: Some(self.seeds().data), ..self.model_params.clone() }
    }

    pub fn validate(&self) -> Result<(), Failure> {
        if self.model.is_empty() {
            return Err(Failure::Usage("--model is required".into()));
        }
        if !MODEL_NAMES.contains(&self.model.as_str()) {
            return Err(Failure::Usage(format!(
                "unknown model `{}` (expected one of {})",
                self.model,
                MODEL_NAMES.join(", ")
            )));
        }
        if self.n_chains == 0 {
            return Err(Failure::Usage("--chains must be at least 1".into()));
        }
        if self.thinning == 0 {
            return Err(Failure::Usage("thinning must be at least 1".into()));
        }
        self.training.validate().map_err(|e| Failure::Usage(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn flags_win_over_config_and_config_over_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = write(
            dir.path(),
            "c.json",
            r#"{"model": "gmm2d", "n_chains": 7, "burn_in": 3, "training": {"epochs": 2}}"#,
        );
        let o = Overrides { config: Some(cfg), chains: Some(2), ..Overrides::default() };
        let s = RunSpec::resolve(&o).unwrap();
        assert_eq!(s.model, "gmm2d");
        assert_eq!(s.n_chains, 2);
        assert_eq!(s.burn_in, 3);
        assert_eq!(s.training.epochs, 2);
        assert_eq!(s.training.num_worlds, TrainingConfig::default().num_worlds);
        assert_eq!(s.num_samples, RunSpec::default().num_samples);
    }

    #[test]
    fn seeds_come_from_the_master_seed() {
        let o = Overrides { model: Some("conj-normal".into()), seed: Some(5), ..Overrides::default() };
        let s = RunSpec::resolve(&o).unwrap();
        assert_eq!(s.training.seed, seed::derive(5, "compile"));
        assert_eq!(s.resolved_params().data_seed, Some(seed::derive(5, "data")));
        assert_ne!(s.seeds().infer, s.seeds().compile);
    }

    #[test]
    fn resolving_a_resolved_spec_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        let o = Overrides { model: Some("blr".into()), seed: Some(9), ..Overrides::default() };
        let s = RunSpec::resolve(&o).unwrap();
        let manifest = serde_json::json!({"command": "infer", "spec": s});
        let p = write(dir.path(), "manifest.json", &manifest.to_string());
        let again = RunSpec::resolve(&Overrides { config: Some(p), ..Overrides::default() }).unwrap();
        assert_eq!(again, s);
    }

    #[test]
    fn invalid_specs_are_usage_errors() {
        let dir = tempfile::tempdir().unwrap();
        for o in [
            Overrides::default(),
            Overrides { model: Some("nope".into()), ..Overrides::default() },
            Overrides { model: Some("gmm2d".into()), chains: Some(0), ..Overrides::default() },
            Overrides { config: Some(write(dir.path(), "u.json", r#"{"modle": "x"}"#)), ..Overrides::default() },
            Overrides { config: Some(write(dir.path(), "b.json", "{")), ..Overrides::default() },
            Overrides { config: Some(dir.path().join("missing.json")), ..Overrides::default() },
        ] {
            assert!(matches!(RunSpec::resolve(&o), Err(Failure::Usage(_))), "{o:?}");
        }
    }
}
