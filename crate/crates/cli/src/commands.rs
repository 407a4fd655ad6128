//! `compile`, `infer` and `diagnose`.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use anyhow::Context;
use blanket::compile::{train_with_report, ArtifactStore, TrainingConfig, TrainingReport};
use blanket::infer::{run_chains, ChainConfig, Proposer, RwmhConfig};
use blanket::models::{self, ZooModel};
use serde::Serialize;

use crate::output::{self, MetricsFile};
use crate::spec::{ProposerKind, RunSpec};
use crate::Failure;

/// Contents of `training_report.json`.
#[derive(Clone, Debug, Serialize)]
pub struct TrainingReportFile {
    pub model: String,
    pub param_count: usize,
    pub compile_seconds: f64,
    pub final_loss: f64,
    pub num_worlds: usize,
    pub epoch_losses: Vec<f64>,
}

pub fn build_model(name: &str, spec: &RunSpec) -> Result<ZooModel, Failure> {
    models::build(name, &spec.resolved_params()).map_err(|e| match e {
        blanket::Error::UnknownModel(_) | blanket::Error::Config(_) => Failure::Usage(e.to_string()),
        other => Failure::Runtime(other.into()),
    })
}

fn manifest(command: &str, spec: &RunSpec, z: &ZooModel) -> serde_json::Value {
    serde_json::json!({
        "command": command,
        "spec": spec,
        "seeds": spec.seeds(),
        "versions": output::versions(),
        "dataset": z.manifest,
    })
}

fn prepare_out(dir: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(dir)
        .with_context(|| format!("creating {}", dir.display()))
        .map_err(Failure::Runtime)
}

/// Trains proposals and writes the artifact plus its training report into
/// `dir`.
pub fn compile_into(
    dir: &Path,
    z: &ZooModel,
    training: &TrainingConfig,
) -> anyhow::Result<(ArtifactStore, TrainingReportFile)> {
    std::fs::create_dir_all(dir)?;
    let start = Instant::now();
    let (store, report): (ArtifactStore, TrainingReport) = train_with_report(&*z.model, training)?;
    let compile_seconds = start.elapsed().as_secs_f64();
    store.save(&dir.join(output::ARTIFACT))?;
    let file = TrainingReportFile {
        model: z.name.clone(),
        param_count: report.param_count,
        compile_seconds,
        final_loss: report.final_loss,
        num_worlds: report.num_worlds,
        epoch_losses: report.epoch_losses,
    };
    output::write_json(&dir.join(output::TRAINING_REPORT), &file)?;
    output::write_json(&dir.join(output::TIMINGS), &serde_json::json!({ "compile_seconds": compile_seconds }))?;
    Ok((store, file))
}

pub fn cmd_compile(spec: &RunSpec) -> Result<(), Failure> {
    let z = build_model(&spec.model, spec)?;
    prepare_out(&spec.out)?;
    output::write_json(&spec.out.join(output::MANIFEST), &manifest("compile", spec, &z))?;
    output::write_data(&spec.out, &z)?;
    let (_, report) = compile_into(&spec.out, &z, &spec.training)?;
    if let Some(path) = &spec.artifact {
        std::fs::copy(spec.out.join(output::ARTIFACT), path)
            .with_context(|| format!("copying artifact to {}", path.display()))?;
    }
    eprintln!(
        "compiled {}: {} parameters, final loss {:.4}, {:.1}s",
        z.name, report.param_count, report.final_loss, report.compile_seconds
    );
    Ok(())
}

pub fn proposer_for(kind: ProposerKind, artifact: Option<Arc<ArtifactStore>>) -> Proposer {
    match (kind, artifact) {
        (ProposerKind::Lic, Some(store)) => Proposer::Lic(store),
        (ProposerKind::Lic, None) => unreachable!("lic requires an artifact"),
        (ProposerKind::Prior, _) => Proposer::Prior,
        (ProposerKind::Rwmh, _) => Proposer::AdaptiveRwmh(RwmhConfig::default()),
    }
}

fn load_artifact(path: &Path, z: &ZooModel) -> Result<ArtifactStore, Failure> {
    let store = ArtifactStore::load(path).map_err(|e| match e {
        blanket::Error::Io(_) => Failure::Usage(format!("cannot read artifact {}: {e}", path.display())),
        other => Failure::Runtime(anyhow::Error::new(other).context(format!("loading {}", path.display()))),
    })?;
    if store.model != z.model.name() {
        return Err(Failure::Usage(format!(
            "artifact {} was compiled for `{}`, not `{}`",
            path.display(),
            store.model,
            z.model.name()
        )));
    }
    Ok(store)
}

pub fn chain_config(spec: &RunSpec) -> ChainConfig {
    ChainConfig {
        num_samples: spec.num_samples,
        burn_in: spec.burn_in,
        seed: spec.seeds().infer,
        thinning: spec.thinning,
        init: BTreeMap::new(),
    }
}

pub fn cmd_infer(spec: &RunSpec) -> Result<(), Failure> {
    match (spec.proposer, &spec.artifact) {
        (ProposerKind::Lic, None) => {
            return Err(Failure::Usage("--proposer lic requires --artifact".into()));
        }
        (kind, Some(_)) if kind != ProposerKind::Lic => {
            return Err(Failure::Usage(format!("--artifact is only used by --proposer lic, not {}", kind.as_str())));
        }
        _ => {}
    }
    let z = build_model(&spec.model, spec)?;
    let store = match &spec.artifact {
        Some(p) => Some(Arc::new(load_artifact(p, &z)?)),
        None => None,
    };
    prepare_out(&spec.out)?;
    output::write_json(&spec.out.join(output::MANIFEST), &manifest("infer", spec, &z))?;
    output::write_data(&spec.out, &z)?;
    let proposer = proposer_for(spec.proposer, store);
    let chains = match run_chains(&*z.model, &z.observations, &proposer, &chain_config(spec), spec.n_chains) {
        Ok(c) => c,
        Err(e) => {
            output::write_failure(&spec.out, &z, spec.proposer.as_str(), &e.to_string())?;
            return Err(Failure::Runtime(e.into()));
        }
    };
    let m = output::write_run(&spec.out, &z, spec.proposer.as_str(), &chains)?;
    eprintln!(
        "{} chains x {} draws: min ESS {}, max R-hat {}{}",
        m.num_chains,
        m.num_draws,
        fmt_opt(m.min_ess),
        fmt_opt(m.max_rhat),
        if m.flags.is_empty() { String::new() } else { format!(" [{}]", m.flags.join("; ")) }
    );
    Ok(())
}

pub fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "n/a".into(), |v| format!("{v:.3}"))
}

/// Recomputes `metrics.json` from the `samples.csv` and `manifest.json` in
/// `dir`. Acceptance rates are not recoverable from draws and are carried
/// over from an existing `metrics.json`.
pub fn cmd_diagnose(dir: &Path) -> Result<(), Failure> {
    let manifest_path = dir.join(output::MANIFEST);
    let manifest: serde_json::Value = output::read_json(&manifest_path)
        .map_err(|e| Failure::Usage(format!("{e:#}")))?;
    let spec: RunSpec = serde_json::from_value(manifest.get("spec").cloned().unwrap_or_default())
        .map_err(|e| Failure::Usage(format!("{}: bad spec: {e}", manifest_path.display())))?;
    let z = build_model(&spec.model, &spec)?;
    let chains = output::read_samples(&dir.join(output::SAMPLES), spec.n_chains, spec.num_samples)
        .map_err(|e| Failure::Usage(format!("{e:#}")))?;
    let mut metrics = output::diagnose(&z, &chains)?;
    let metrics_path = dir.join(output::METRICS);
    if metrics_path.exists() {
        let old: serde_json::Value = output::read_json(&metrics_path)?;
        if let Some(rates) = old.get("acceptance_rate") {
            metrics.acceptance_rate = serde_json::from_value(rates.clone()).context("acceptance_rate")?;
        }
    }
    let file = MetricsFile {
        model: z.name.clone(),
        proposer: spec.proposer.as_str().into(),
        status: "ok".into(),
        metrics,
    };
    output::write_json(&metrics_path, &file)?;
    Ok(())
}
