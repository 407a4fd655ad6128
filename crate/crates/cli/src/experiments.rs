//! End-to-end experiments: generate, compile, infer with each configured
//! proposer, diagnose, and compare against oracles where they exist.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use anyhow::{anyhow, Context};
use blanket::compile::{ArtifactStore, TrainingConfig};
use blanket::diagnostics::Metrics;
use blanket::infer::{mh_step_with_value, run_chains, ChainConfig, ChainOutput, Proposer};
use blanket::models::{self, ConjNormal, Gmm2d, ModelParams, Nuisance, ZooModel};
use blanket::nn::{compute_phi, ProposalDistribution};
use blanket::{ancestral_sample, seed, Address, Model, Value, World};
use serde::{Deserialize, Serialize};

use crate::commands::{compile_into, proposer_for};
use crate::output::{self, write_json};
use crate::spec::{with_config, ProposerKind, Seeds};
use crate::Failure;

pub const EXPERIMENTS: [&str; 5] = ["mode-escape", "conj-normal", "nuisance", "blr", "nschools"];

/// A resolved experiment configuration. Fields that an experiment does not
/// use keep their defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub name: String,
    pub seed: u64,
    pub model_params: ModelParams,
    /// Its `seed` is replaced by the one derived from the master seed.
    pub training: TrainingConfig,
    pub proposers: Vec<ProposerKind>,
    pub n_chains: usize,
    pub num_samples: usize,
    pub burn_in: usize,
    /// conj-normal: points of the observation grid over [-4, 4].
    pub grid_points: usize,
    /// conj-normal: random states for the exact-conditional check.
    pub gibbs_states: usize,
    /// mode-escape: replicates, length and step of the fixed random walk.
    pub control_replicates: usize,
    pub control_steps: usize,
    pub control_sd: f64,
    /// nuisance: counts compared against the baseline without nuisance.
    pub nuisance_counts: Vec<usize>,
    /// Wall-clock budget of the whole experiment.
    pub budget_seconds: f64,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            name: String::new(),
            seed: 0,
            model_params: ModelParams::default(),
            training: TrainingConfig::default(),
            proposers: vec![ProposerKind::Lic],
            n_chains: 10,
            num_samples: 100,
            burn_in: 100,
            grid_points: 33,
            gibbs_states: 1000,
            control_replicates: 5,
            control_steps: 1000,
            control_sd: 0.5,
            nuisance_counts: vec![10, 100],
            budget_seconds: 600.0,
        }
    }
}

impl ExperimentSpec {
    pub fn preset(name: &str) -> Result<Self, Failure> {
        use ProposerKind::{Lic, Prior, Rwmh};
        let base = Self { name: name.to_string(), ..Self::default() };
        let training = |num_worlds, epochs, lr, components| TrainingConfig {
            num_worlds,
            epochs,
            lr,
            components,
            ..TrainingConfig::default()
        };
        Ok(match name {
            "conj-normal" => Self {
                training: training(1000, 500, 1e-3, 1),
                proposers: vec![Lic, Prior, Rwmh],
                budget_seconds: 300.0,
                ..base
            },
            "mode-escape" => Self {
                training: training(10_000, 20, 1e-2, 2),
                proposers: vec![Lic, Prior],
                n_chains: 4,
                num_samples: 1000,
                budget_seconds: 600.0,
                ..base
            },
            "nuisance" => Self {
                training: training(10_000, 20, 1e-3, 10),
                budget_seconds: 900.0,
                ..base
            },
            "blr" => Self {
                model_params: ModelParams { n_rows: Some(500), n_features: Some(5), ..ModelParams::default() },
                training: training(2000, 20, 1e-2, 3),
                proposers: vec![Lic, Rwmh, Prior],
                burn_in: 500,
                budget_seconds: 1200.0,
                ..base
            },
            "nschools" => Self {
                training: training(2000, 20, 1e-2, 3),
                proposers: vec![Lic, Prior, Rwmh],
                burn_in: 1000,
                budget_seconds: 1800.0,
                ..base
            },
            other => {
                return Err(Failure::Usage(format!(
                    "unknown experiment `{other}` (expected one of {})",
                    EXPERIMENTS.join(", ")
                )))
            }
        })
    }

    pub fn seeds(&self) -> Seeds {
        Seeds::derive(self.seed, self.model_params.data_seed)
    }

    pub fn validate(&self) -> Result<(), Failure> {
        let fail = |m: String| Err(Failure::Usage(m));
        if self.n_chains == 0 {
            return fail("--chains must be at least 1".into());
        }
        if self.proposers.is_empty() {
            return fail("at least one proposer is required".into());
        }
        if self.name == "conj-normal" && self.grid_points < 2 {
            return fail("grid_points must be at least 2".into());
        }
        if self.name == "mode-escape" && (self.control_sd <= 0.0 || !self.control_sd.is_finite()) {
            return fail("control_sd must be positive".into());
        }
        self.training.validate().map_err(|e| Failure::Usage(e.to_string()))
    }

    fn params(&self) -> ModelParams {
        ModelParams { data_seed: Some(self.seeds().data), ..self.model_params.clone() }
    }

    fn chain_config(&self) -> ChainConfig {
        ChainConfig {
            num_samples: self.num_samples,
            burn_in: self.burn_in,
            seed: self.seeds().infer,
            thinning: 1,
            init: BTreeMap::new(),
        }
    }
}

/// Command-line overrides for `experiment`.
#[derive(Clone, Debug, Default)]
pub struct ExperimentOverrides {
    pub seed: Option<u64>,
    pub chains: Option<usize>,
    pub samples: Option<usize>,
    pub burn_in: Option<usize>,
    pub config: Option<PathBuf>,
    pub nuisance: Vec<usize>,
}

/// Preset, then the config file, then flags.
pub fn resolve(name: &str, o: &ExperimentOverrides) -> Result<ExperimentSpec, Failure> {
    let mut s = with_config(&ExperimentSpec::preset(name)?, o.config.as_deref())?;
    if s.name != name {
        return Err(Failure::Usage(format!("config is for experiment `{}`, not `{name}`", s.name)));
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
    if !o.nuisance.is_empty() {
        if name != "nuisance" {
            return Err(Failure::Usage("--n only applies to the nuisance experiment".into()));
        }
        s.nuisance_counts.clone_from(&o.nuisance);
    }
    s.training.seed = s.seeds().compile;
    s.validate()?;
    Ok(s)
}

/// Verdict on one acceptance criterion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub id: u32,
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

/// Contents of `report.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub experiment: String,
    pub pass: bool,
    pub criteria: Vec<Verdict>,
    pub results: serde_json::Value,
    pub seconds: f64,
}

struct Ctx<'a> {
    spec: &'a ExperimentSpec,
    out: &'a Path,
    start: Instant,
}

impl Ctx<'_> {
    fn elapsed(&self) -> f64 {
        self.start.elapsed().as_secs_f64()
    }

    fn within_budget(&self) -> (bool, String) {
        let t = self.elapsed();
        (t <= self.spec.budget_seconds, format!("runtime {t:.0}s (budget {:.0}s)", self.spec.budget_seconds))
    }

    fn build(&self, name: &str, params: &ModelParams) -> anyhow::Result<ZooModel> {
        Ok(models::build(name, params)?)
    }

    /// Runs chains with `proposer` and writes them to `dir`.
    fn infer(
        &self,
        dir: &Path,
        z: &ZooModel,
        label: &str,
        proposer: &Proposer,
        cfg: &ChainConfig,
        n_chains: usize,
    ) -> anyhow::Result<(Vec<ChainOutput>, Metrics)> {
        let chains = match run_chains(&*z.model, &z.observations, proposer, cfg, n_chains) {
            Ok(c) => c,
            Err(e) => {
                output::write_failure(dir, z, label, &e.to_string())?;
                return Err(anyhow!(e).context(format!("{label} chains on {}", z.name)));
            }
        };
        let m = output::write_run(dir, z, label, &chains)?;
        eprintln!(
            "  {label}: min ESS {}, max R-hat {}",
            crate::commands::fmt_opt(m.min_ess),
            crate::commands::fmt_opt(m.max_rhat)
        );
        Ok((chains, m))
    }

    /// Every configured proposer on `z`, written under `dir/infer-<name>`.
    fn infer_all(
        &self,
        dir: &Path,
        z: &ZooModel,
        store: &Arc<ArtifactStore>,
        cfg: &ChainConfig,
    ) -> anyhow::Result<BTreeMap<ProposerKind, (Vec<ChainOutput>, Metrics)>> {
        let mut out = BTreeMap::new();
        for &kind in &self.spec.proposers {
            if out.contains_key(&kind) {
                continue;
            }
            let p = proposer_for(kind, Some(store.clone()));
            let sub = dir.join(format!("infer-{}", kind.as_str()));
            out.insert(kind, self.infer(&sub, z, kind.as_str(), &p, cfg, self.spec.n_chains)?);
        }
        Ok(out)
    }

    fn compile(&self, dir: &Path, z: &ZooModel) -> anyhow::Result<Arc<ArtifactStore>> {
        let (store, report) = compile_into(dir, z, &self.spec.training)?;
        eprintln!(
            "  compiled {}: {} parameters, final loss {:.4}, {:.1}s",
            z.name, report.param_count, report.final_loss, report.compile_seconds
        );
        Ok(Arc::new(store))
    }
}

fn metrics_json(m: &Metrics) -> serde_json::Value {
    serde_json::json!({
        "min_ess": m.min_ess,
        "max_rhat": m.max_rhat,
        "median_ess": m.median_ess,
        "pll": m.pll,
        "flags": m.flags,
    })
}

fn summary(runs: &BTreeMap<ProposerKind, (Vec<ChainOutput>, Metrics)>) -> serde_json::Value {
    runs.iter().map(|(k, (_, m))| (k.as_str().to_string(), metrics_json(m))).collect()
}

fn missing(runs: &BTreeMap<ProposerKind, (Vec<ChainOutput>, Metrics)>, need: &[ProposerKind]) -> Option<String> {
    let absent: Vec<&str> = need.iter().filter(|k| !runs.contains_key(k)).map(|k| k.as_str()).collect();
    (!absent.is_empty()).then(|| format!("not evaluated: proposers {} not configured", absent.join(", ")))
}

/// Mean of a proposal over the constrained value; exact for the identity
/// transform.
fn proposal_mean(q: &ProposalDistribution) -> anyhow::Result<f64> {
    match q {
        ProposalDistribution::Gmm { weights, means, .. } => {
            Ok(weights.iter().zip(means).map(|(w, m)| w * m).sum())
        }
        ProposalDistribution::Discrete { .. } => Err(anyhow!("expected a continuous proposal")),
    }
}

fn conj_normal(cx: &Ctx) -> anyhow::Result<(Vec<Verdict>, serde_json::Value)> {
    let spec = cx.spec;
    let z = cx.build("conj-normal", &spec.params())?;
    output::write_data(cx.out, &z)?;
    let store = cx.compile(&cx.out.join("compile"), &z)?;
    let base = ConjNormal {
        y_obs: spec.model_params.observed.unwrap_or(ConjNormal::default().y_obs),
        ..ConjNormal::default()
    };

    // Proposal means over the observation grid.
    let mut grid = csv::Writer::from_path(cx.out.join("grid.csv"))?;
    grid.write_record(["y", "proposal_mean", "posterior_mean", "abs_error"])?;
    let mut errors = Vec::with_capacity(spec.grid_points);
    let mut rng = seed::substream(spec.seeds().infer, "grid");
    for i in 0..spec.grid_points {
        let y = -4.0 + 8.0 * i as f64 / (spec.grid_points - 1) as f64;
        let m = ConjNormal { y_obs: y, ..base.clone() };
        let w = ancestral_sample(&m, &mut rng, Some(&m.observations()))?;
        let mean = proposal_mean(&compute_phi(&store, &w, &ConjNormal::x())?)?;
        let exact = m.posterior(y).0;
        errors.push((mean - exact).abs());
        grid.write_record([y, mean, exact, (mean - exact).abs()].map(|v| format!("{v:?}")))?;
    }
    grid.flush()?;
    let max_err = errors.iter().copied().fold(0.0, f64::max);
    let mean_err = errors.iter().sum::<f64>() / errors.len() as f64;

    // Exact conditional as the proposal at random joint states.
    let mut rng = seed::substream(spec.seeds().infer, "gibbs");
    let mut worst = 0.0_f64;
    let mut rejected = 0;
    for _ in 0..spec.gibbs_states {
        let joint = ancestral_sample(&base, &mut rng, None)?;
        let value = |a| joint.value(&a).and_then(Value::as_real).ok_or_else(|| anyhow!("missing {a}"));
        let (x, y) = (value(ConjNormal::x())?, value(ConjNormal::y())?);
        let m = ConjNormal { y_obs: y, ..base.clone() };
        let mut w = ancestral_sample(&m, &mut rng, Some(&m.observations()))?;
        w.set_value(&m, &ConjNormal::x(), Value::Real(x), &mut rng)?;
        let exact = m.clone();
        let p = Proposer::Conditional(Arc::new(move |w: &World, _: &Address| {
            exact.exact_conditional(w)
        }));
        let proposed = m.exact_conditional(&w)?.sample(&mut rng);
        let o = mh_step_with_value(&mut w, &m, &ConjNormal::x(), &p, proposed, &mut rng)?;
        worst = worst.max(o.log_alpha.abs());
        rejected += usize::from(!o.accepted);
    }

    let runs = cx.infer_all(cx.out, &z, &store, &spec.chain_config())?;
    let (ok_time, time) = cx.within_budget();
    let pass1 = max_err <= 0.1 && mean_err <= 0.05 && ok_time;
    let verdicts = vec![
        Verdict {
            id: 1,
            name: "conjugate tracking".into(),
            pass: pass1,
            detail: format!(
                "max |error| {max_err:.4} (<= 0.1), mean {mean_err:.4} (<= 0.05) over {} points; {time}",
                spec.grid_points
            ),
        },
        Verdict {
            id: 2,
            name: "exact conditional is always accepted".into(),
            pass: worst < 1e-9 && rejected == 0 && spec.gibbs_states > 0,
            detail: format!("max |log alpha| {worst:.3e} over {} states, {rejected} rejected", spec.gibbs_states),
        },
    ];
    let results = serde_json::json!({
        "max_abs_mean_error": max_err,
        "mean_abs_mean_error": mean_err,
        "grid_points": spec.grid_points,
        "exact_conditional_max_abs_log_alpha": worst,
        "param_count": store.param_count(),
        "runs": summary(&runs),
    });
    Ok((verdicts, results))
}

fn right_mass(xs: &[f64], boundary: f64) -> f64 {
    xs.iter().filter(|&&x| x > boundary).count() as f64 / xs.len().max(1) as f64
}

fn mode_escape(cx: &Ctx) -> anyhow::Result<(Vec<Verdict>, serde_json::Value)> {
    let spec = cx.spec;
    let z = cx.build("gmm2d", &spec.params())?;
    output::write_data(cx.out, &z)?;
    let g = Gmm2d { y_obs: spec.model_params.observed.unwrap_or(Gmm2d::default().y_obs), ..Gmm2d::default() };
    let oracle = g.right_mode_mass(g.y_obs);
    let boundary = g.mode_boundary();
    let store = cx.compile(&cx.out.join("compile"), &z)?;
    let from_left = ChainConfig {
        init: BTreeMap::from([(Gmm2d::x(), Value::Real(g.x_means[0]))]),
        ..spec.chain_config()
    };
    let runs = cx.infer_all(cx.out, &z, &store, &from_left)?;
    let per_run: BTreeMap<&str, serde_json::Value> = runs
        .iter()
        .map(|(k, (chains, _))| {
            let pooled: Vec<f64> = chains.iter().flat_map(|c| c.values(&Gmm2d::x())).collect();
            let both: Vec<bool> = chains
                .iter()
                .map(|c| {
                    let xs = c.values(&Gmm2d::x());
                    xs.iter().any(|&x| x < boundary) && xs.iter().any(|&x| x > boundary)
                })
                .collect();
            (k.as_str(), serde_json::json!({"right_mode_mass": right_mass(&pooled, boundary), "chains_visiting_both_modes": both}))
        })
        .collect();

    // Energy-barrier control: a fixed-step walk from the left mode.
    let control_cfg = ChainConfig {
        num_samples: spec.control_steps,
        burn_in: 0,
        seed: seed::derive(spec.seeds().infer, "control"),
        ..from_left.clone()
    };
    let walk = Proposer::RandomWalk { sd: spec.control_sd };
    let reached = if spec.control_replicates == 0 {
        0
    } else {
        let (chains, _) =
            cx.infer(&cx.out.join("control-random-walk"), &z, "random-walk", &walk, &control_cfg, spec.control_replicates)?;
        chains.iter().filter(|c| c.values(&Gmm2d::x()).iter().any(|&x| x > 5.0)).count()
    };

    let (ok_time, time) = cx.within_budget();
    let verdict = match missing(&runs, &[ProposerKind::Lic]) {
        Some(m) => Verdict { id: 3, name: "mode escape".into(), pass: false, detail: m },
        None => {
            let (chains, _) = &runs[&ProposerKind::Lic];
            let pooled: Vec<f64> = chains.iter().flat_map(|c| c.values(&Gmm2d::x())).collect();
            let mass = right_mass(&pooled, boundary);
            let visiting = chains
                .iter()
                .filter(|c| {
                    let xs = c.values(&Gmm2d::x());
                    xs.iter().any(|&x| x < boundary) && xs.iter().any(|&x| x > boundary)
                })
                .count();
            let pass = visiting == chains.len()
                && (mass - oracle).abs() <= 0.1
                && reached == 0
                && spec.control_replicates > 0
                && ok_time;
            Verdict {
                id: 3,
                name: "mode escape".into(),
                pass,
                detail: format!(
                    "lic: {visiting}/{} chains visit both modes, right-mode mass {mass:.3} vs oracle {oracle:.3} \
                     (±0.1); random walk sd {} reached x > 5 in {reached}/{} replicates; {time}",
                    chains.len(),
                    spec.control_sd,
                    spec.control_replicates
                ),
            }
        }
    };
    let lic_mass = per_run.get("lic").and_then(|r| r["right_mode_mass"].as_f64());
    let results = serde_json::json!({
        "right_mode_mass": lic_mass,
        "oracle_right_mode_mass": oracle,
        "control_replicates_reaching_right_mode": reached,
        "per_proposer": per_run,
        "runs": summary(&runs),
    });
    Ok((vec![verdict], results))
}

fn nuisance(cx: &Ctx) -> anyhow::Result<(Vec<Verdict>, serde_json::Value)> {
    let spec = cx.spec;
    let mut counts = spec.nuisance_counts.clone();
    counts.push(0);
    counts.sort_unstable();
    counts.dedup();
    let mut per_n = BTreeMap::new();
    for &n in &counts {
        eprintln!("  n_nuisance = {n}");
        let params = ModelParams { n_nuisance: Some(n), ..spec.params() };
        let z = cx.build("nuisance", &params)?;
        let dir = cx.out.join(format!("n{n}"));
        std::fs::create_dir_all(&dir)?;
        output::write_data(&dir, &z)?;
        let store = cx.compile(&dir.join("compile"), &z)?;
        let runs = cx.infer_all(&dir, &z, &store, &spec.chain_config())?;
        let ess_x = runs.get(&ProposerKind::Lic).and_then(|(_, m)| m.ess.get("x").copied());
        per_n.insert(
            n,
            (store.param_count_of(Nuisance::CORE_FAMILIES), store.param_count(), ess_x, summary(&runs)),
        );
    }
    let base_core = per_n[&0].0;
    let deltas: BTreeMap<String, i64> =
        per_n.iter().map(|(n, p)| (n.to_string(), p.0 as i64 - base_core as i64)).collect();
    let max_delta = deltas.values().map(|d| d.abs()).max().unwrap_or(0);
    let largest = *counts.last().expect("baseline is present");
    let (ess0, ess_n) = (per_n[&0].2, per_n[&largest].2);
    let ratio = match (ess0, ess_n) {
        (Some(a), Some(b)) if a > 0.0 && b > 0.0 => Some(a.max(b) / a.min(b)),
        _ => None,
    };
    let (ok_time, time) = cx.within_budget();
    let pass = max_delta == 0 && largest > 0 && ratio.is_some_and(|r| r < 2.0) && ok_time;
    let verdict = Verdict {
        id: 4,
        name: "nuisance invariance".into(),
        pass,
        detail: format!(
            "parameters of {{{}}}: {} for n in {counts:?} (max delta {max_delta}); lic ESS(x) {} at n=0 vs {} at n={largest}, \
             ratio {} (< 2); {time}",
            Nuisance::CORE_FAMILIES.join(", "),
            base_core,
            crate::commands::fmt_opt(ess0),
            crate::commands::fmt_opt(ess_n),
            crate::commands::fmt_opt(ratio),
        ),
    };
    let results = serde_json::json!({
        "param_count_delta_nonnuisance_families": max_delta,
        "param_count_delta_by_n": deltas,
        "ess_x_ratio": ratio,
        "per_n": per_n.iter().map(|(n, (core, total, ess, runs))| (n.to_string(), serde_json::json!({
            "param_count_nonnuisance_families": core,
            "param_count": total,
            "ess_x": ess,
            "runs": runs,
        }))).collect::<serde_json::Map<_, _>>(),
    });
    Ok((vec![verdict], results))
}

fn blr(cx: &Ctx) -> anyhow::Result<(Vec<Verdict>, serde_json::Value)> {
    let spec = cx.spec;
    let z = cx.build("blr", &spec.params())?;
    output::write_data(cx.out, &z)?;
    let n_test = z.heldout.len();
    let store = cx.compile(&cx.out.join("compile"), &z)?;
    let runs = cx.infer_all(cx.out, &z, &store, &spec.chain_config())?;
    let (ok_time, time) = cx.within_budget();
    let verdict = match missing(&runs, &[ProposerKind::Lic, ProposerKind::Rwmh]) {
        Some(m) => Verdict { id: 10, name: "logistic regression".into(), pass: false, detail: m },
        None => {
            let lic = &runs[&ProposerKind::Lic].1;
            let rw = &runs[&ProposerKind::Rwmh].1;
            let tol = 0.02 * n_test as f64;
            let ess_ok = matches!((lic.min_ess, rw.min_ess), (Some(a), Some(b)) if a >= b);
            let pll_ok = matches!((lic.pll, rw.pll), (Some(a), Some(b)) if a >= b - tol);
            let rhat_ok = lic.max_rhat.is_some_and(|r| r <= 1.1);
            Verdict {
                id: 10,
                name: "logistic regression".into(),
                pass: ess_ok && pll_ok && rhat_ok && ok_time,
                detail: format!(
                    "min ESS lic {} vs rwmh {} (lic >= rwmh); PLL lic {} vs rwmh {} (tolerance {tol:.2}); \
                     lic max R-hat {} (<= 1.1); {time}",
                    crate::commands::fmt_opt(lic.min_ess),
                    crate::commands::fmt_opt(rw.min_ess),
                    crate::commands::fmt_opt(lic.pll),
                    crate::commands::fmt_opt(rw.pll),
                    crate::commands::fmt_opt(lic.max_rhat),
                ),
            }
        }
    };
    let results = serde_json::json!({
        "n_test": n_test,
        "param_count": store.param_count(),
        "runs": summary(&runs),
    });
    Ok((vec![verdict], results))
}

fn nschools(cx: &Ctx) -> anyhow::Result<(Vec<Verdict>, serde_json::Value)> {
    let spec = cx.spec;
    let z = cx.build("nschools", &spec.params())?;
    output::write_data(cx.out, &z)?;
    let store = cx.compile(&cx.out.join("compile"), &z)?;
    let runs = cx.infer_all(cx.out, &z, &store, &spec.chain_config())?;
    let (ok_time, time) = cx.within_budget();
    let verdict = match missing(&runs, &[ProposerKind::Lic, ProposerKind::Prior]) {
        Some(m) => Verdict { id: 11, name: "hierarchical schools".into(), pass: false, detail: m },
        None => {
            let lic = &runs[&ProposerKind::Lic].1;
            let prior = &runs[&ProposerKind::Prior].1;
            let rhat_ok = lic.max_rhat.is_some_and(|r| r <= 1.1);
            let ess_ok = matches!((lic.min_ess, prior.min_ess), (Some(a), Some(b)) if a >= b);
            Verdict {
                id: 11,
                name: "hierarchical schools".into(),
                pass: rhat_ok && ess_ok && ok_time,
                detail: format!(
                    "lic max R-hat {} (<= 1.1); min ESS lic {} vs prior {} (lic >= prior); {time}",
                    crate::commands::fmt_opt(lic.max_rhat),
                    crate::commands::fmt_opt(lic.min_ess),
                    crate::commands::fmt_opt(prior.min_ess),
                ),
            }
        }
    };
    let results = serde_json::json!({
        "latent_dim": z.manifest.get("latent_dim"),
        "param_count": store.param_count(),
        "runs": summary(&runs),
    });
    Ok((vec![verdict], results))
}

/// Runs experiment `spec.name`, writing every output under `out`.
pub fn run_experiment(spec: &ExperimentSpec, out: &Path) -> Result<Report, Failure> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_json(
        &out.join(output::MANIFEST),
        &serde_json::json!({
            "command": "experiment",
            "spec": spec,
            "seeds": spec.seeds(),
            "versions": output::versions(),
        }),
    )?;
    let cx = Ctx { spec, out, start: Instant::now() };
    eprintln!("experiment {}", spec.name);
    let (criteria, results) = match spec.name.as_str() {
        "conj-normal" => conj_normal(&cx),
        "mode-escape" => mode_escape(&cx),
        "nuisance" => nuisance(&cx),
        "blr" => blr(&cx),
        "nschools" => nschools(&cx),
        other => return Err(Failure::Usage(format!("unknown experiment `{other}`"))),
    }
    .map_err(Failure::Runtime)?;
    let report = Report {
        experiment: spec.name.clone(),
        pass: criteria.iter().all(|c| c.pass),
        criteria,
        results,
        seconds: cx.elapsed(),
    };
    write_json(&out.join(output::REPORT), &report)?;
    Ok(report)
}
