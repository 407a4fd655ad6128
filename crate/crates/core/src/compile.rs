//! Compilation: forward-sample the model, fit every family's proposal
//! networks by minimizing the summed negative proposal log density of the
//! sampled latent values given their sampled blankets, and persist the
//! result.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, AdamConfig, Tape, Tensor, Var};
use crate::distributions::{Distribution, Support};
use crate::error::{Error, Result};
use crate::graph::{ancestral_sample, Address, Env, Model, Value, World};
use crate::nn::{
    aggregate_terms, blanket_terms, embed_features, head_output, masked_features,
    traced_log_q_batch, FamilyArtifact, FamilySupport, NetVars, Normalization,
};
use crate::seed;

pub const ARTIFACT_VERSION: &str = "1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub num_worlds: usize,
    pub epochs: usize,
    pub minibatch: usize,
    pub lr: f64,
    pub components: usize,
    pub seed: u64,
    /// Multiplier on the scale of parentless continuous nodes while sampling
    /// training worlds.
    pub prior_inflation: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            num_worlds: 10_000,
            epochs: 20,
            minibatch: 64,
            lr: 1e-3,
            components: 10,
            seed: 0,
            prior_inflation: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.num_worlds == 0 {
            return fail("num_worlds must be at least 1");
        }
        if self.epochs == 0 {
            return fail("epochs must be at least 1");
        }
        if self.components == 0 {
            return fail("components must be at least 1");
        }
        if self.minibatch == 0 {
            return fail("minibatch must be at least 1");
        }
        if !is_positive(self.lr) || !is_positive(self.prior_inflation) {
            return fail("lr and prior_inflation must be positive");
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: self.eps }
    }
}

/// Compiled proposal networks for every family seen during training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtifactStore {
    pub version: String,
    pub model: String,
    pub config: TrainingConfig,
    pub final_loss: f64,
    pub families: BTreeMap<String, FamilyArtifact>,
}

impl ArtifactStore {
    pub fn family(&self, name: &str) -> Result<&FamilyArtifact> {
        self.families.get(name).ok_or_else(|| Error::MissingArtifact(name.to_string()))
    }

    pub fn param_count(&self) -> usize {
        self.families.values().map(FamilyArtifact::param_count).sum()
    }

    /// Parameter count restricted to the named families.
    pub fn param_count_of<'a>(&self, families: impl IntoIterator<Item = &'a str>) -> usize {
        families
            .into_iter()
            .filter_map(|f| self.families.get(f))
            .map(FamilyArtifact::param_count)
            .sum()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::Malformed(e.to_string()))?;
        match raw.get("version").and_then(serde_json::Value::as_str) {
            Some(ARTIFACT_VERSION) => {}
            Some(other) => {
                return Err(Error::Version {
                    found: other.to_string(),
                    expected: ARTIFACT_VERSION.to_string(),
                })
            }
            None => return Err(Error::Malformed("missing version".into())),
        }
        let store: Self =
            serde_json::from_value(raw).map_err(|e| Error::Malformed(e.to_string()))?;
        for (name, fam) in &store.families {
            fam.validate(name)?;
            for t in fam.tensors() {
                if t.shape.iter().product::<usize>() != t.data.len()
                    || t.data.iter().any(|x| !x.is_finite())
                {
                    return Err(Error::Malformed(format!("family {name}: bad tensor")));
                }
            }
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// The store without one family; that family's nodes then fall back to
    /// prior proposals.
    pub fn without_family(&self, family: &str) -> Self {
        let mut s = self.clone();
        s.families.remove(family);
        s
    }
}

/// Per-epoch record of a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub epoch_losses: Vec<f64>,
    pub final_loss: f64,
    pub param_count: usize,
    pub num_worlds: usize,
}

/// Scales parentless continuous nodes during forward sampling.
struct Inflated<'a> {
    inner: &'a dyn Model,
    factor: f64,
}

struct CountingEnv<'e> {
    inner: &'e mut dyn Env,
    reads: usize,
}

impl Env for CountingEnv<'_> {
    fn read(&mut self, addr: &Address) -> Result<Value> {
        self.reads += 1;
        self.inner.read(addr)
    }
}

impl Model for Inflated<'_> {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn distribution(&self, addr: &Address, env: &mut dyn Env) -> Result<Distribution> {
        let mut counting = CountingEnv { inner: env, reads: 0 };
        let d = self.inner.distribution(addr, &mut counting)?;
        if counting.reads > 0 {
            return Ok(d);
        }
        let f = self.factor;
        Ok(match d {
            Distribution::Normal { mean, sd } => Distribution::normal(mean, sd * f)?,
            Distribution::StudentT { dof, loc, scale } => {
                Distribution::student_t(dof, loc, scale * f)?
            }
            Distribution::HalfCauchy { scale } => Distribution::half_cauchy(scale * f)?,
            Distribution::NormalMixture { weights, means, sds } => {
                Distribution::normal_mixture(weights, means, sds.iter().map(|s| s * f).collect())?
            }
            other => other,
        })
    }

    fn queries(&self) -> Vec<Address> {
        self.inner.queries()
    }

    fn observations(&self) -> BTreeMap<Address, Value> {
        self.inner.observations()
    }
}

fn dataset_with_inflation(
    model: &dyn Model,
    n: usize,
    seed: u64,
    inflation: f64,
) -> Result<Vec<World>> {
    if n == 0 {
        return Err(Error::Config("dataset size must be at least 1".into()));
    }
    let inflated = Inflated { inner: model, factor: inflation };
    let m: &dyn Model = if inflation == 1.0 { model } else { &inflated };
    (0..n)
        .into_par_iter()
        .map(|i| ancestral_sample(m, &mut seed::rng_from(seed::mix(seed, i as u64)), None))
        .collect()
}

/// `n` independent forward samples with nothing clamped: declared
/// observations are sampled along with the latents.
pub fn generate_dataset(model: &dyn Model, n: usize, seed: u64) -> Result<Vec<World>> {
    dataset_with_inflation(model, n, seed, 1.0)
}

/// Support metadata for every family present in `worlds`.
pub fn family_supports(worlds: &[World]) -> Result<BTreeMap<String, FamilySupport>> {
    struct Acc {
        support: Support,
        max: Option<usize>,
        sum: f64,
        sum_sq: f64,
        n: usize,
    }
    let mut acc: BTreeMap<String, Acc> = BTreeMap::new();
    for w in worlds {
        for node in w.nodes() {
            let s = node.dist.support();
            let e = acc.entry(node.address.family.to_string()).or_insert(Acc {
                support: s,
                max: s.size(),
                sum: 0.0,
                sum_sq: 0.0,
                n: 0,
            });
            if e.support.is_discrete() != s.is_discrete() {
                return Err(Error::Config(format!(
                    "family {} mixes discrete and continuous nodes",
                    node.address.family
                )));
            }
            if let (Some(a), Some(b)) = (e.max, s.size()) {
                e.max = Some(a.max(b));
            }
            if let Some(x) = node.value.as_real() {
                let z = s.transform()?.to_unconstrained(x);
                e.sum += z;
                e.sum_sq += z * z;
                e.n += 1;
            }
        }
    }
    Ok(acc
        .into_iter()
        .map(|(name, a)| {
            let normalization = if a.n == 0 {
                Normalization::default()
            } else {
                let mean = a.sum / a.n as f64;
                let var = (a.sum_sq / a.n as f64 - mean * mean).max(0.0);
                let sd = var.sqrt();
                Normalization { shift: mean, scale: if sd > 1e-6 { sd } else { 1.0 } }
            };
            (name, FamilySupport { support: a.support, max_size: a.max, normalization })
        })
        .collect())
}

/// A world reduced to what the loss needs: for each latent-role node, its
/// value and merged blanket terms with interned features.
struct PreparedWorld {
    targets: Vec<Target>,
}

struct Target {
    family: usize,
    support: Support,
    value: Value,
    /// `(feature id, coefficient)` in canonical blanket order.
    terms: Vec<(usize, f64)>,
}

/// Distinct `(family, features)` blanket inputs across a dataset.
#[derive(Default)]
struct FeatureTable {
    ids: HashMap<(usize, Vec<u64>), usize>,
    entries: Vec<(usize, Vec<f64>)>,
}

impl FeatureTable {
    fn intern(&mut self, family: usize, features: Vec<f64>) -> usize {
        let key = (family, features.iter().map(|x| x.to_bits()).collect());
        let next = self.entries.len();
        *self.ids.entry(key).or_insert_with(|| {
            self.entries.push((family, features));
            next
        })
    }
}

/// `x > 0`, false for NaN.
fn is_positive(x: f64) -> bool {
    x > 0.0
}

/// One latent-role node: family index, support, value and blanket terms
/// as (family index, features, coefficient).
type RawTarget = (usize, Support, Value, Vec<(usize, Vec<f64>, f64)>);

/// Latent-role targets of `world` with blanket terms still carrying their
/// features.
fn world_targets(
    world: &World,
    family_index: &BTreeMap<String, usize>,
    supports: &[FamilySupport],
    observed_role: &BTreeSet<Address>,
) -> Result<Vec<RawTarget>> {
    let fam_of = |f: &str| {
        family_index.get(f).copied().ok_or_else(|| Error::MissingArtifact(f.to_string()))
    };
    let mut out = Vec::new();
    for node in world.nodes() {
        if observed_role.contains(&node.address) {
            continue;
        }
        let terms = blanket_terms(world, &node.address, |f| Ok(&supports[fam_of(f)?]))?;
        let terms = terms
            .into_iter()
            .map(|t| Ok((fam_of(&t.family)?, t.features, t.coef)))
            .collect::<Result<Vec<_>>>()?;
        out.push((fam_of(&node.address.family)?, node.dist.support(), node.value.clone(), terms));
    }
    Ok(out)
}

fn prepare_all(
    worlds: &[World],
    family_index: &BTreeMap<String, usize>,
    supports: &[FamilySupport],
    observed_role: &BTreeSet<Address>,
) -> Result<(Vec<PreparedWorld>, FeatureTable)> {
    let raw = worlds
        .par_iter()
        .map(|w| world_targets(w, family_index, supports, observed_role))
        .collect::<Result<Vec<_>>>()?;
    let mut table = FeatureTable::default();
    let prepared = raw
        .into_iter()
        .map(|targets| PreparedWorld {
            targets: targets
                .into_iter()
                .map(|(family, support, value, terms)| Target {
                    family,
                    support,
                    value,
                    terms: terms
                        .into_iter()
                        .map(|(f, features, coef)| (table.intern(f, features), coef))
                        .collect(),
                })
                .collect(),
        })
        .collect();
    Ok((prepared, table))
}

/// Bit pattern of a support, for grouping targets.
fn support_key(s: Support) -> (u8, u64, u64) {
    match s {
        Support::RealLine => (0, 0, 0),
        Support::Positive => (1, 0, 0),
        Support::Interval { lo, hi } => (2, lo.to_bits(), hi.to_bits()),
        Support::Binary => (3, 0, 0),
        Support::Finite(n) => (4, n as u64, 0),
    }
}

/// Traced loss summed over a set of prepared worlds. Embeddings of equal
/// inputs, and head outputs of targets with equal blankets, are computed
/// once; the log densities of targets sharing a head output are evaluated
/// in one batch.
fn traced_loss(
    tape: &mut Tape,
    vars: &[NetVars],
    supports: &[FamilySupport],
    table: &FeatureTable,
    worlds: &[&PreparedWorld],
) -> Result<Var> {
    let mut masked: HashMap<usize, Var> = HashMap::new();
    let mut embs: HashMap<usize, Var> = HashMap::new();
    let mut heads: HashMap<(usize, Vec<(usize, u64)>), Var> = HashMap::new();
    let mut group_of: HashMap<(Var, (u8, u64, u64)), usize> = HashMap::new();
    let mut groups: Vec<(Var, usize, Support, Vec<Value>)> = Vec::new();
    for w in worlds {
        for t in &w.targets {
            let key = (t.family, t.terms.iter().map(|(id, c)| (*id, c.to_bits())).collect());
            let out = match heads.get(&key) {
                Some(v) => *v,
                None => {
                    let own = &vars[t.family];
                    let self_emb = match masked.get(&t.family) {
                        Some(v) => *v,
                        None => {
                            let e = embed_features(tape, own, masked_features(&supports[t.family]))?;
                            masked.insert(t.family, e);
                            e
                        }
                    };
                    let mut members = Vec::with_capacity(t.terms.len());
                    for &(id, coef) in &t.terms {
                        let e = match embs.get(&id) {
                            Some(v) => *v,
                            None => {
                                let (f, features) = &table.entries[id];
                                let e = embed_features(tape, &vars[*f], features.clone())?;
                                embs.insert(id, e);
                                e
                            }
                        };
                        members.push((e, coef));
                    }
                    let summary = aggregate_terms(tape, &own.agg, &members)?;
                    let out = head_output(tape, own, self_emb, summary)?;
                    heads.insert(key, out);
                    out
                }
            };
            let g = *group_of.entry((out, support_key(t.support))).or_insert_with(|| {
                groups.push((out, t.family, t.support, Vec::new()));
                groups.len() - 1
            });
            groups[g].3.push(t.value.clone());
        }
    }
    let mut total: Option<Var> = None;
    for (out, family, support, values) in &groups {
        let lq = traced_log_q_batch(tape, *out, &supports[*family], *support, values)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, lq)?,
            None => lq,
        });
    }
    Ok(match total {
        Some(t) => tape.scale(t, -1.0),
        None => tape.leaf(Tensor::scalar(0.0)),
    })
}

fn observed_role(model: &dyn Model) -> BTreeSet<Address> {
    model.observations().into_keys().collect()
}

/// Traced `sum over latent-role nodes of -log q(value | blanket)` for one
/// world. Returns the loss and the parameter handles, in store family order.
pub fn loss(
    store: &ArtifactStore,
    model: &dyn Model,
    world: &World,
    tape: &mut Tape,
) -> Result<(Var, Vec<NetVars>)> {
    let names: Vec<&String> = store.families.keys().collect();
    let index: BTreeMap<String, usize> =
        names.iter().enumerate().map(|(i, n)| ((*n).clone(), i)).collect();
    let supports: Vec<FamilySupport> =
        store.families.values().map(|f| f.support.clone()).collect();
    let (prepared, table) =
        prepare_all(std::slice::from_ref(world), &index, &supports, &observed_role(model))?;
    let vars: Vec<NetVars> = store.families.values().map(|f| NetVars::load(tape, f)).collect();
    let l = traced_loss(tape, &vars, &supports, &table, &[&prepared[0]])?;
    Ok((l, vars))
}

/// Compiles proposals for `model`.
pub fn train(model: &dyn Model, cfg: &TrainingConfig) -> Result<ArtifactStore> {
    train_with_report(model, cfg).map(|(s, _)| s)
}

pub fn train_with_report(
    model: &dyn Model,
    cfg: &TrainingConfig,
) -> Result<(ArtifactStore, TrainingReport)> {
    cfg.validate()?;
    let worlds = dataset_with_inflation(
        model,
        cfg.num_worlds,
        seed::derive(cfg.seed, "data"),
        cfg.prior_inflation,
    )?;
    let supports_map = family_supports(&worlds)?;
    let names: Vec<String> = supports_map.keys().cloned().collect();
    let index: BTreeMap<String, usize> =
        names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
    let supports: Vec<FamilySupport> = supports_map.values().cloned().collect();
    let observed = observed_role(model);
    let (prepared, table) = prepare_all(&worlds, &index, &supports, &observed)?;
    drop(worlds);

    // Each family is initialized from its own stream so that adding a
    // family leaves the others untouched.
    let mut families: Vec<FamilyArtifact> = names
        .iter()
        .zip(&supports)
        .map(|(n, s)| {
            let mut rng = seed::substream(cfg.seed, &format!("init/{n}"));
            FamilyArtifact::init(s.clone(), cfg.components, &mut rng)
        })
        .collect();
    let mut params: Vec<Tensor> =
        families.iter().flat_map(|f| f.tensors().cloned()).collect();
    let mut adam = Adam::new(cfg.adam(), &params);
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut shuffle_rng = seed::substream(cfg.seed, "shuffle");
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_total = 0.0;
        for batch in order.chunks(cfg.minibatch) {
            let mut tape = Tape::new();
            let vars: Vec<NetVars> = families.iter().map(|f| NetVars::load(&mut tape, f)).collect();
            let worlds: Vec<&PreparedWorld> = batch.iter().map(|&i| &prepared[i]).collect();
            let total = traced_loss(&mut tape, &vars, &supports, &table, &worlds)?;
            let value = tape.scalar(total);
            if !value.is_finite() {
                return Err(Error::Divergence { epoch, loss: value });
            }
            epoch_total += value;
            let mean = tape.scale(total, 1.0 / batch.len() as f64);
            let grads = tape.backward(mean)?;
            let g: Vec<Tensor> =
                vars.iter().flat_map(|v| v.vars().collect::<Vec<_>>()).map(|v| grads.get(&tape, v)).collect();
            adam.step(&mut params, &g)?;
            let mut it = params.iter();
            for f in &mut families {
                for t in f.tensors_mut() {
                    t.clone_from(it.next().expect("parameter layout"));
                }
            }
        }
        epoch_losses.push(epoch_total / prepared.len() as f64);
    }

    let final_loss = epoch_losses.last().copied().unwrap_or(f64::NAN);
    let store = ArtifactStore {
        version: ARTIFACT_VERSION.to_string(),
        model: model.name().to_string(),
        config: cfg.clone(),
        final_loss,
        families: names.into_iter().zip(families).collect(),
    };
    let report = TrainingReport {
        epoch_losses,
        final_loss,
        param_count: store.param_count(),
        num_worlds: cfg.num_worlds,
    };
    Ok((store, report))
}
