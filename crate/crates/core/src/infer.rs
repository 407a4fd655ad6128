//! Single-site Metropolis-Hastings with pluggable proposers.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;
use std::time::Instant;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::compile::ArtifactStore;
use crate::distributions::{normal_lpdf, Distribution, Transform};
use crate::error::{Error, Result};
use crate::graph::{ancestral_sample, Address, Model, Value, World};
use crate::nn::{compute_phi, ProposalDistribution};
use crate::seed;

/// Robbins-Monro settings for the adaptive random walk.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RwmhConfig {
    pub initial_log_sd: f64,
    pub target: f64,
    pub gain: f64,
}

impl Default for RwmhConfig {
    fn default() -> Self {
        Self { initial_log_sd: 0.0, target: 0.44, gain: 1.0 }
    }
}

/// Proposal for a site given the world: `(addr, world) -> q`.
pub type ConditionalFn = dyn Fn(&World, &Address) -> Result<Distribution> + Send + Sync;

#[derive(Clone)]
pub enum Proposer {
    /// Compiled proposals; families without an artifact use the prior.
    Lic(Arc<ArtifactStore>),
    /// The node's parent-conditional distribution.
    Prior,
    /// Gaussian random walk in unconstrained space, step size adapted
    /// during burn-in.
    AdaptiveRwmh(RwmhConfig),
    /// Gaussian random walk in unconstrained space with a fixed step.
    RandomWalk { sd: f64 },
    /// A user-supplied independence proposal.
    Conditional(Arc<ConditionalFn>),
}

impl fmt::Debug for Proposer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Lic(s) => write!(f, "Lic({})", s.model),
            Self::Prior => write!(f, "Prior"),
            Self::AdaptiveRwmh(c) => write!(f, "AdaptiveRwmh({c:?})"),
            Self::RandomWalk { sd } => write!(f, "RandomWalk({sd})"),
            Self::Conditional(_) => write!(f, "Conditional"),
        }
    }
}

impl Proposer {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Lic(_) => "lic",
            Self::Prior => "prior",
            Self::AdaptiveRwmh(_) => "rwmh",
            Self::RandomWalk { .. } => "random-walk",
            Self::Conditional(_) => "conditional",
        }
    }
}

/// Per-chain proposer state: random-walk step sizes and adaptation counters.
#[derive(Clone, Debug, Default)]
pub struct SamplerState {
    pub log_sd: BTreeMap<Address, f64>,
    pub adapt_iter: BTreeMap<Address, u64>,
    pub adapting: bool,
}

/// One Robbins-Monro update of a log step size.
pub fn adapt_rwmh(log_sd: f64, accepted: bool, iteration: u64, cfg: &RwmhConfig) -> f64 {
    let hit = if accepted { 1.0 } else { 0.0 };
    log_sd + cfg.gain * (hit - cfg.target) / (iteration as f64 / 50.0).max(1.0)
}

/// A concrete proposal at one site.
enum Site {
    Prior(Distribution),
    Compiled(ProposalDistribution),
    Walk { center: f64, sd: f64, transform: Transform },
    Independent(Distribution),
}

impl Site {
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Value {
        match self {
            Self::Prior(d) | Self::Independent(d) => d.sample(rng),
            Self::Compiled(q) => q.sample(rng),
            Self::Walk { center, sd, transform } => {
                let e: f64 = rng.sample(StandardNormal);
                Value::Real(transform.from_unconstrained(center + sd * e))
            }
        }
    }

    fn log_prob(&self, v: &Value) -> Result<f64> {
        match self {
            Self::Prior(d) | Self::Independent(d) => d.log_prob(v),
            Self::Compiled(q) => q.log_prob(v),
            Self::Walk { center, sd, transform } => {
                let x = v.as_real().ok_or_else(|| {
                    Error::TypeMismatch(format!("{v:?} for random-walk proposal"))
                })?;
                Ok(normal_lpdf(transform.to_unconstrained(x), *center, *sd)
                    - transform.log_abs_det_jacobian(x))
            }
        }
    }
}

fn site_proposal(
    world: &World,
    addr: &Address,
    proposer: &Proposer,
    state: &SamplerState,
) -> Result<Site> {
    let node = world.node(addr)?;
    let prior = || Site::Prior(node.dist.clone());
    let walk = |sd: f64| -> Result<Site> {
        let support = node.dist.support();
        if support.is_discrete() {
            return Ok(prior());
        }
        let transform = support.transform()?;
        let center = transform.to_unconstrained(node.value.as_real().ok_or_else(|| {
            Error::TypeMismatch(format!("{addr} holds {:?}", node.value))
        })?);
        Ok(Site::Walk { center, sd, transform })
    };
    match proposer {
        Proposer::Prior => Ok(prior()),
        Proposer::Lic(store) => match compute_phi(store, world, addr) {
            Ok(q) => Ok(Site::Compiled(q)),
            Err(Error::MissingArtifact(_)) => Ok(prior()),
            Err(e) => Err(e),
        },
        Proposer::RandomWalk { sd } => walk(*sd),
        Proposer::AdaptiveRwmh(cfg) => {
            walk(state.log_sd.get(addr).copied().unwrap_or(cfg.initial_log_sd).exp())
        }
        Proposer::Conditional(f) => Ok(Site::Independent(f(world, addr)?)),
    }
}

/// Result of one Metropolis-Hastings update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MhOutcome {
    pub accepted: bool,
    pub log_alpha: f64,
}

/// Proposes a new value for the latent node `addr` and accepts or rejects
/// it. A rejected move leaves `world` exactly as it was.
///
/// The acceptance ratio includes the densities of nodes the move creates
/// or destroys, which are proposed from and returned to their priors.
pub fn mh_step<R: Rng + ?Sized>(
    world: &mut World,
    model: &dyn Model,
    addr: &Address,
    proposer: &Proposer,
    state: &mut SamplerState,
    rng: &mut R,
) -> Result<MhOutcome> {
    let node = world.node(addr)?;
    if node.observed {
        return Err(Error::ObservedMutation(addr.clone()));
    }
    let old = node.value.clone();
    let forward = site_proposal(world, addr, proposer, state)?;
    let proposed = forward.sample(rng);
    let outcome = evaluate_move(world, model, addr, proposer, state, &forward, old, proposed, rng)?;
    if let (Proposer::AdaptiveRwmh(cfg), true) = (proposer, state.adapting) {
        if !world.node(addr)?.dist.support().is_discrete() {
            let it = state.adapt_iter.entry(addr.clone()).or_insert(0);
            *it += 1;
            let ls = state.log_sd.entry(addr.clone()).or_insert(cfg.initial_log_sd);
            *ls = adapt_rwmh(*ls, outcome.accepted, *it, cfg);
        }
    }
    Ok(outcome)
}

/// Metropolis-Hastings test of a specific proposed value, as drawn from
/// `proposer` in the current world.
pub fn mh_step_with_value<R: Rng + ?Sized>(
    world: &mut World,
    model: &dyn Model,
    addr: &Address,
    proposer: &Proposer,
    proposed: Value,
    rng: &mut R,
) -> Result<MhOutcome> {
    let state = SamplerState::default();
    let old = world.node(addr)?.value.clone();
    let forward = site_proposal(world, addr, proposer, &state)?;
    evaluate_move(world, model, addr, proposer, &state, &forward, old, proposed, rng)
}

#[allow(clippy::too_many_arguments)]
fn evaluate_move<R: Rng + ?Sized>(
    world: &mut World,
    model: &dyn Model,
    addr: &Address,
    proposer: &Proposer,
    state: &SamplerState,
    forward: &Site,
    old: Value,
    proposed: Value,
    rng: &mut R,
) -> Result<MhOutcome> {
    let reject = MhOutcome { accepted: false, log_alpha: f64::NEG_INFINITY };
    let node = world.node(addr)?;
    let in_support = match &proposed {
        Value::Real(x) => x.is_finite() && node.dist.log_prob(&proposed)?.is_finite(),
        v => node.dist.log_prob(v)?.is_finite(),
    };
    if !in_support {
        return Ok(reject);
    }
    let log_q_fwd = forward.log_prob(&proposed)?;
    let diff = world.set_value(model, addr, proposed, rng)?;
    let reverse = site_proposal(world, addr, proposer, state)?;
    let log_q_rev = reverse.log_prob(&old)?;
    let log_alpha = diff.delta_log_joint - diff.created_log_prob + diff.destroyed_log_prob
        + log_q_rev
        - log_q_fwd;
    if log_alpha.is_nan() || log_alpha == f64::INFINITY {
        let detail = format!(
            "delta {} created {} destroyed {} q_rev {} q_fwd {}",
            diff.delta_log_joint,
            diff.created_log_prob,
            diff.destroyed_log_prob,
            log_q_rev,
            log_q_fwd
        );
        world.revert(diff)?;
        return Err(Error::NonFiniteAcceptance { addr: addr.clone(), detail });
    }
    let accepted = log_alpha >= 0.0 || rng.random::<f64>().ln() < log_alpha;
    if !accepted {
        world.revert(diff)?;
    }
    Ok(MhOutcome { accepted, log_alpha })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainConfig {
    pub num_samples: usize,
    pub burn_in: usize,
    pub seed: u64,
    pub thinning: usize,
    /// Values assigned to latent nodes before the first sweep.
    #[serde(default, with = "pairs")]
    pub init: BTreeMap<Address, Value>,
}

/// Address-keyed maps as `[address, value]` pairs, since JSON object keys
/// must be strings.
mod pairs {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(m: &BTreeMap<Address, Value>, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(m.iter())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<Address, Value>, D::Error> {
        Vec::<(Address, Value)>::deserialize(d).map(|v| v.into_iter().collect())
    }
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self { num_samples: 1000, burn_in: 1000, seed: 0, thinning: 1, init: BTreeMap::new() }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Acceptance {
    pub proposed: u64,
    pub accepted: u64,
}

impl Acceptance {
    pub fn rate(&self) -> f64 {
        if self.proposed == 0 {
            0.0
        } else {
            self.accepted as f64 / self.proposed as f64
        }
    }
}

/// Recorded draws of one chain. Every sequence has `num_samples` entries;
/// `None` marks draws at which the address did not exist.
#[derive(Clone, Debug, PartialEq)]
pub struct ChainOutput {
    pub chain: usize,
    pub seed: u64,
    pub draws: BTreeMap<Address, Vec<Option<Value>>>,
    /// Counts over post-burn-in sweeps.
    pub acceptance: BTreeMap<Address, Acceptance>,
    pub num_samples: usize,
    pub infer_seconds: f64,
}

impl ChainOutput {
    /// Numeric draws of `addr`, skipping absent entries.
    pub fn values(&self, addr: &Address) -> Vec<f64> {
        self.draws
            .get(addr)
            .map(|d| d.iter().flatten().map(Value::as_f64).collect())
            .unwrap_or_default()
    }

    pub fn acceptance_rate(&self) -> f64 {
        let (a, p) = self
            .acceptance
            .values()
            .fold((0, 0), |(a, p), x| (a + x.accepted, p + x.proposed));
        if p == 0 {
            0.0
        } else {
            a as f64 / p as f64
        }
    }
}

fn sweep_rng(chain_seed: u64, sweep: usize, addr: &Address) -> seed::Rng64 {
    seed::rng_from(seed::mix(seed::mix(chain_seed, sweep as u64), addr.stable_hash()))
}

/// Runs one chain from an ancestral sample conditioned on `observations`.
///
/// Each sweep updates every latent node alive at its start, in address
/// order. Each site update draws from its own stream keyed by the sweep and
/// the address, so nodes outside a blanket cannot perturb its randomness.
pub fn run_chain(
    model: &dyn Model,
    observations: &BTreeMap<Address, Value>,
    proposer: &Proposer,
    cfg: &ChainConfig,
) -> Result<ChainOutput> {
    run_chain_indexed(model, observations, proposer, cfg, 0)
}

fn run_chain_indexed(
    model: &dyn Model,
    observations: &BTreeMap<Address, Value>,
    proposer: &Proposer,
    cfg: &ChainConfig,
    chain: usize,
) -> Result<ChainOutput> {
    if cfg.thinning == 0 {
        return Err(Error::Config("thinning must be at least 1".into()));
    }
    let start = Instant::now();
    let mut world =
        ancestral_sample(model, &mut seed::substream(cfg.seed, "init"), Some(observations))?;
    let mut init_rng = seed::substream(cfg.seed, "init-values");
    for (a, v) in &cfg.init {
        world.set_value(model, a, v.clone(), &mut init_rng)?;
    }
    world.refresh_log_joint();
    let mut state = SamplerState { adapting: true, ..SamplerState::default() };
    let mut draws: BTreeMap<Address, Vec<Option<Value>>> = BTreeMap::new();
    let mut acceptance: BTreeMap<Address, Acceptance> = BTreeMap::new();
    let total = cfg.burn_in + cfg.num_samples * cfg.thinning;
    let mut recorded = 0;
    for sweep in 0..total {
        let sampling = sweep >= cfg.burn_in;
        state.adapting = !sampling;
        for addr in world.latent_addresses() {
            if !world.contains(&addr) {
                continue;
            }
            let mut rng = sweep_rng(cfg.seed, sweep, &addr);
            let out = mh_step(&mut world, model, &addr, proposer, &mut state, &mut rng)?;
            if sampling {
                let a = acceptance.entry(addr).or_default();
                a.proposed += 1;
                a.accepted += u64::from(out.accepted);
            }
        }
        world.refresh_log_joint();
        if sampling && (sweep - cfg.burn_in + 1).is_multiple_of(cfg.thinning) {
            for node in world.nodes().filter(|n| !n.observed) {
                let seq = draws
                    .entry(node.address.clone())
                    .or_insert_with(|| vec![None; recorded]);
                seq.push(Some(node.value.clone()));
            }
            recorded += 1;
            for seq in draws.values_mut() {
                seq.resize(recorded, None);
            }
        }
    }
    Ok(ChainOutput {
        chain,
        seed: cfg.seed,
        draws,
        acceptance,
        num_samples: recorded,
        infer_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Runs `n_chains` independent chains, chain `i` seeded with `seed + i`.
/// Chains run in parallel; output is ordered by chain index.
pub fn run_chains(
    model: &dyn Model,
    observations: &BTreeMap<Address, Value>,
    proposer: &Proposer,
    cfg: &ChainConfig,
    n_chains: usize,
) -> Result<Vec<ChainOutput>> {
    if n_chains == 0 {
        return Err(Error::Config("n_chains must be at least 1".into()));
    }
    (0..n_chains)
        .into_par_iter()
        .map(|i| {
            let c = ChainConfig { seed: cfg.seed.wrapping_add(i as u64), ..cfg.clone() };
            run_chain_indexed(model, observations, proposer, &c, i)
                .map_err(|e| Error::Chain { index: i, source: Box::new(e) })
        })
        .collect::<Vec<_>>()
        .into_iter()
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compile::{train, TrainingConfig};
    use crate::graph::Env;
    use crate::models::{ConjNormal, Nuisance};
    use crate::seed::rng_from;

    /// `a ~ Bern(0.3)`, `b ~ Bern(a ? 0.8 : 0.2)`, `o ~ Bern(b ? 0.9 : 0.3)`
    /// with `o = true` observed.
    struct TwoBits;

    impl Model for TwoBits {
        fn name(&self) -> &str {
            "two-bits"
        }
        fn distribution(&self, addr: &Address, env: &mut dyn Env) -> Result<Distribution> {
            match &*addr.family {
                "a" => Distribution::bernoulli(0.3),
                "b" => Distribution::bernoulli(if env.boolean(&Address::new("a"))? { 0.8 } else { 0.2 }),
                "o" => Distribution::bernoulli(if env.boolean(&Address::new("b"))? { 0.9 } else { 0.3 }),
                _ => Err(Error::UndefinedVariable(addr.clone())),
            }
        }
        fn queries(&self) -> Vec<Address> {
            vec![Address::new("a")]
        }
        fn observations(&self) -> BTreeMap<Address, Value> {
            BTreeMap::from([(Address::new("o"), Value::Bool(true))])
        }
    }

    fn two_bits_posterior() -> [f64; 4] {
        let mut p = [0.0; 4];
        for (i, slot) in p.iter_mut().enumerate() {
            let (a, b) = (i / 2 == 1, i % 2 == 1);
            let pa = if a { 0.3 } else { 0.7 };
            let pb1 = if a { 0.8 } else { 0.2 };
            let pb = if b { pb1 } else { 1.0 - pb1 };
            let po = if b { 0.9 } else { 0.3 };
            *slot = pa * pb * po;
        }
        let z: f64 = p.iter().sum();
        p.map(|x| x / z)
    }

    /// `x ~ N(0, 1)` alone.
    struct StdNormal;

    impl Model for StdNormal {
        fn name(&self) -> &str {
            "std-normal"
        }
        fn distribution(&self, _: &Address, _: &mut dyn Env) -> Result<Distribution> {
            Distribution::normal(0.0, 1.0)
        }
        fn queries(&self) -> Vec<Address> {
            vec![Address::new("x")]
        }
        fn observations(&self) -> BTreeMap<Address, Value> {
            BTreeMap::new()
        }
    }

    fn exact_conditional(m: ConjNormal) -> Proposer {
        Proposer::Conditional(Arc::new(move |w: &World, _: &Address| m.exact_conditional(w)))
    }

    #[test]
    fn exact_conditional_is_always_accepted() {
        let mut rng = rng_from(0);
        let base = ConjNormal::default();
        for _ in 0..1000 {
            let y = rng.random_range(-4.0..4.0);
            let x = rng.random_range(-6.0..6.0);
            let m = ConjNormal { y_obs: y, ..base.clone() };
            let obs = BTreeMap::from([(ConjNormal::y(), Value::Real(y)), (ConjNormal::x(), Value::Real(x))]);
            let mut w = ancestral_sample(&m, &mut rng_from(1), Some(&m.observations())).unwrap();
            w.set_value(&m, &ConjNormal::x(), obs[&ConjNormal::x()].clone(), &mut rng).unwrap();
            let p = exact_conditional(m.clone());
            let proposed = m.exact_conditional(&w).unwrap().sample(&mut rng);
            let out = mh_step_with_value(&mut w, &m, &ConjNormal::x(), &p, proposed, &mut rng).unwrap();
            assert!(out.log_alpha.abs() < 1e-9, "{}", out.log_alpha);
            assert!(out.accepted);
        }
    }

    #[test]
    fn chain_config_with_init_round_trips_through_json() {
        let cfg = ChainConfig {
            init: BTreeMap::from([
                (Address::indexed("mu", [1]), Value::Real(0.5)),
                (Address::new("c"), Value::Bool(true)),
            ]),
            ..ChainConfig::default()
        };
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<ChainConfig>(&text).unwrap(), cfg);
    }

    #[test]
    fn proposing_the_current_value_is_neutral() {
        let m = ConjNormal::default();
        let mut w = ancestral_sample(&m, &mut rng_from(2), Some(&m.observations())).unwrap();
        let current = w.value(&ConjNormal::x()).unwrap().clone();
        for p in [Proposer::Prior, Proposer::RandomWalk { sd: 0.3 }] {
            let out = mh_step_with_value(&mut w, &m, &ConjNormal::x(), &p, current.clone(), &mut rng_from(0)).unwrap();
            assert_eq!(out.log_alpha, 0.0);
            assert!(out.accepted);
        }
    }

    #[test]
    fn rejection_leaves_world_bit_identical() {
        let m = ConjNormal::default();
        let mut w = ancestral_sample(&m, &mut rng_from(2), Some(&m.observations())).unwrap();
        w.set_value(&m, &ConjNormal::x(), Value::Real(0.25), &mut rng_from(0)).unwrap();
        let before = w.clone();
        let out = mh_step_with_value(&mut w, &m, &ConjNormal::x(), &Proposer::Prior, Value::Real(5.0), &mut rng_from(0)).unwrap();
        assert!(!out.accepted);
        assert_eq!(w, before);
        assert_eq!(w.to_json(), before.to_json());
    }

    #[test]
    fn observed_sites_are_not_updated() {
        let m = ConjNormal::default();
        let mut w = ancestral_sample(&m, &mut rng_from(2), Some(&m.observations())).unwrap();
        let mut st = SamplerState::default();
        assert!(matches!(
            mh_step(&mut w, &m, &ConjNormal::y(), &Proposer::Prior, &mut st, &mut rng_from(0)),
            Err(Error::ObservedMutation(_))
        ));
    }

    fn two_bits_tv(p: &Proposer) -> f64 {
        let cfg = ChainConfig { num_samples: 20_000, burn_in: 500, seed: 3, ..Default::default() };
        let out = run_chain(&TwoBits, &TwoBits.observations(), p, &cfg).unwrap();
        let a = out.values(&Address::new("a"));
        let b = out.values(&Address::new("b"));
        let mut counts = [0.0; 4];
        for (x, y) in a.iter().zip(&b) {
            counts[(*x as usize) * 2 + *y as usize] += 1.0;
        }
        let exact = two_bits_posterior();
        0.5 * counts.iter().zip(exact).map(|(c, e)| (c / a.len() as f64 - e).abs()).sum::<f64>()
    }

    #[test]
    fn prior_proposer_matches_enumeration() {
        assert!(two_bits_tv(&Proposer::Prior) < 0.05);
        // Discrete sites fall back to the prior under the random walk.
        assert!(two_bits_tv(&Proposer::AdaptiveRwmh(RwmhConfig::default())) < 0.05);
    }

    #[test]
    fn empty_run_has_valid_timing() {
        let m = ConjNormal::default();
        let cfg = ChainConfig { num_samples: 0, burn_in: 5, ..Default::default() };
        let out = run_chain(&m, &m.observations(), &Proposer::Prior, &cfg).unwrap();
        assert_eq!(out.num_samples, 0);
        assert!(out.draws.is_empty());
        assert!(out.infer_seconds >= 0.0);
        assert_eq!(out.acceptance_rate(), 0.0);
    }

    #[test]
    fn chains_are_seeded_by_index() {
        let m = ConjNormal::default();
        let cfg = ChainConfig { num_samples: 50, burn_in: 10, seed: 7, ..Default::default() };
        let p = Proposer::AdaptiveRwmh(RwmhConfig::default());
        let one = run_chains(&m, &m.observations(), &p, &cfg, 1).unwrap();
        let mut single = run_chain(&m, &m.observations(), &p, &cfg).unwrap();
        single.infer_seconds = one[0].infer_seconds;
        assert_eq!(one[0], single);
        let two = run_chains(&m, &m.observations(), &p, &cfg, 2).unwrap();
        assert_eq!(two[0].chain, 0);
        assert_eq!(two[1].seed, 8);
        assert_ne!(two[0].values(&ConjNormal::x()), two[1].values(&ConjNormal::x()));
        assert!(run_chains(&m, &m.observations(), &p, &cfg, 0).is_err());
    }

    #[test]
    fn chains_are_deterministic() {
        let m = Nuisance::new(3);
        let cfg = ChainConfig { num_samples: 30, burn_in: 30, seed: 1, ..Default::default() };
        let p = Proposer::AdaptiveRwmh(RwmhConfig::default());
        let strip = |mut v: Vec<ChainOutput>| {
            v.iter_mut().for_each(|c| c.infer_seconds = 0.0);
            v
        };
        let a = strip(run_chains(&m, &m.observations(), &p, &cfg, 4).unwrap());
        let b = strip(run_chains(&m, &m.observations(), &p, &cfg, 4).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn thinning_and_init() {
        let m = ConjNormal::default();
        let cfg = ChainConfig {
            num_samples: 10,
            burn_in: 0,
            thinning: 3,
            init: BTreeMap::from([(ConjNormal::x(), Value::Real(3.0))]),
            ..Default::default()
        };
        let out = run_chain(&m, &m.observations(), &Proposer::Prior, &cfg).unwrap();
        assert_eq!(out.values(&ConjNormal::x()).len(), 10);
        assert_eq!(out.acceptance[&ConjNormal::x()].proposed, 30);
        let bad = ChainConfig { thinning: 0, ..cfg };
        assert!(run_chain(&m, &m.observations(), &Proposer::Prior, &bad).is_err());
    }

    #[test]
    fn conjugate_posterior_mean_with_compiled_proposals() {
        let m = ConjNormal::default();
        let store = train(&m, &TrainingConfig { num_worlds: 1000, epochs: 100, lr: 1e-2, components: 1, ..Default::default() }).unwrap();
        let cfg = ChainConfig { num_samples: 4000, burn_in: 200, seed: 5, ..Default::default() };
        let out = run_chain(&m, &m.observations(), &Proposer::Lic(Arc::new(store)), &cfg).unwrap();
        let xs = out.values(&ConjNormal::x());
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let ess = crate::diagnostics::ess(&[xs]).unwrap();
        let (truth, sd) = m.posterior(0.25);
        let se = sd / ess.sqrt();
        assert!((mean - truth).abs() < 3.0 * se, "{mean} vs {truth} (se {se})");
        assert!(out.acceptance_rate() > 0.5);
    }

    #[test]
    fn conjugate_chains_agree() {
        let m = ConjNormal::default();
        let cfg = ChainConfig { num_samples: 100, burn_in: 1000, seed: 11, ..Default::default() };
        let chains = run_chains(&m, &m.observations(), &Proposer::AdaptiveRwmh(RwmhConfig::default()), &cfg, 10).unwrap();
        let metrics = crate::diagnostics::summarize(&chains);
        assert!(metrics.max_rhat.unwrap() < 1.05, "{metrics:?}");
    }

    #[test]
    fn adaptation_schedule() {
        let cfg = RwmhConfig { target: 0.5, ..Default::default() };
        // Full-size steps cancel exactly in pairs.
        let mut ls = 0.3;
        for i in 0..50 {
            ls = adapt_rwmh(ls, i % 2 == 0, 1 + i, &cfg);
        }
        assert!((ls - 0.3).abs() < 1e-12);
        // Decayed steps telescope: a pair at iteration t leaves about
        // 25 / t^2, which sums below 1e-3 over 100 steps once t >= 2000.
        for start in [2000u64, 5000, 50_000] {
            let mut ls = 0.3;
            for i in 0..100 {
                ls = adapt_rwmh(ls, i % 2 == 0, start + i, &cfg);
            }
            assert!((ls - 0.3).abs() < 1e-3, "{start}: {ls}");
        }
        let cfg = RwmhConfig::default();
        let mut ls = 0.0;
        for i in 1..300 {
            let next = adapt_rwmh(ls, false, i, &cfg);
            assert!(next < ls);
            ls = next;
        }
    }

    #[test]
    fn adaptive_walk_reaches_target_rate() {
        let cfg = ChainConfig { num_samples: 5000, burn_in: 5000, seed: 2, ..Default::default() };
        let out = run_chain(&StdNormal, &BTreeMap::new(), &Proposer::AdaptiveRwmh(RwmhConfig::default()), &cfg).unwrap();
        let rate = out.acceptance_rate();
        assert!((0.34..=0.54).contains(&rate), "{rate}");
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn independence_sampler_balances_flows() {
        // A state-independent proposal, as a frozen compiled proposer would
        // be, on a one-dimensional target.
        let q = Distribution::normal(0.5, 1.5).unwrap();
        let p = Proposer::Conditional(Arc::new(move |_: &World, _: &Address| Ok(q.clone())));
        let cfg = ChainConfig { num_samples: 40_000, burn_in: 100, seed: 4, ..Default::default() };
        let xs = run_chain(&StdNormal, &BTreeMap::new(), &p, &cfg).unwrap().values(&Address::new("x"));
        let bin = |x: f64| (((x + 1.5) / 1.0).floor().clamp(-1.0, 3.0) + 1.0) as usize;
        let mut flow = [[0.0f64; 5]; 5];
        for w in xs.windows(2) {
            flow[bin(w[0])][bin(w[1])] += 1.0;
        }
        for i in 0..5 {
            for j in i + 1..5 {
                let (a, b) = (flow[i][j], flow[j][i]);
                // Counts are roughly Poisson; allow four standard errors.
                assert!((a - b).abs() <= 4.0 * (a + b).sqrt().max(1.0), "{i}->{j}: {a} vs {j}->{i}: {b}");
            }
        }
    }

    #[test]
    fn missing_family_falls_back_to_prior() {
        let m = Nuisance::new(3);
        let store = train(&m, &TrainingConfig { num_worlds: 300, epochs: 2, components: 2, ..Default::default() }).unwrap();
        let cfg = ChainConfig { num_samples: 40, burn_in: 10, seed: 6, ..Default::default() };
        let full = run_chain(&m, &m.observations(), &Proposer::Lic(Arc::new(store.clone())), &cfg).unwrap();
        let partial = Proposer::Lic(Arc::new(store.without_family("nuisance")));
        let partial = run_chain(&m, &m.observations(), &partial, &cfg).unwrap();
        let prior = run_chain(&m, &m.observations(), &Proposer::Prior, &cfg).unwrap();
        for a in [Nuisance::x(), Nuisance::y()] {
            assert_eq!(full.draws[&a], partial.draws[&a]);
        }
        for i in 0..3 {
            let a = Nuisance::nuisance(i);
            assert_eq!(partial.draws[&a], prior.draws[&a]);
            assert_ne!(full.draws[&a], partial.draws[&a]);
        }
    }
}
