//! Proposal networks.
//!
//! Every family owns three small networks: a node embedding (one tanh
//! layer), a Markov-blanket aggregator (three bias-free tanh layers, the
//! first of which performs the degree-normalized sum over the blanket) and a
//! linear head. A node's proposal parameters are computed from its own
//! masked embedding and the aggregate of its blanket members' embeddings,
//! each embedded by the member's own family network.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::compile::ArtifactStore;
use crate::distributions::{log_sum_exp, normal_lpdf, Support, Transform, LN_SQRT_2PI};
use crate::error::{Error, Result};
use crate::graph::{Address, NodeState, Value, World};

pub const EMBED_DIM: usize = 4;
pub const HIDDEN_DIM: usize = 8;
pub const AGG_LAYERS: usize = 3;
pub const LOG_SD_MIN: f64 = -7.0;
pub const LOG_SD_MAX: f64 = 4.0;

/// Affine standardization of a continuous family's unconstrained values,
/// estimated from the training worlds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub shift: f64,
    pub scale: f64,
}

impl Default for Normalization {
    fn default() -> Self {
        Self { shift: 0.0, scale: 1.0 }
    }
}

/// Support metadata of a family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FamilySupport {
    pub support: Support,
    /// Largest discrete support seen for the family; the width of one-hot
    /// features and of the logit head.
    pub max_size: Option<usize>,
    pub normalization: Normalization,
}

impl FamilySupport {
    pub fn feature_dim(&self) -> usize {
        self.max_size.map_or(2, |n| n + 1)
    }
}

/// The three networks of one family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FamilyArtifact {
    /// `[weight, bias]`, `EMBED_DIM x feature_dim`.
    pub embed: Vec<Tensor>,
    /// Bias-free layer weights: `HIDDEN_DIM x EMBED_DIM`, then two
    /// `HIDDEN_DIM x HIDDEN_DIM`.
    pub agg: Vec<Tensor>,
    /// `[weight, bias]` over `concat(self embedding, blanket summary)`.
    pub head: Vec<Tensor>,
    pub support: FamilySupport,
}

fn xavier<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-a..a)).collect();
    Tensor::matrix(rows, cols, data).expect("consistent dims")
}

impl FamilyArtifact {
    /// Fresh networks; `components` is the mixture size for continuous
    /// families.
    pub fn init<R: Rng + ?Sized>(support: FamilySupport, components: usize, rng: &mut R) -> Self {
        let out = match support.max_size {
            Some(n) => n,
            None => 3 * components,
        };
        let embed = vec![
            xavier(EMBED_DIM, support.feature_dim(), rng),
            Tensor::zeros(&[EMBED_DIM]),
        ];
        let mut agg = vec![xavier(HIDDEN_DIM, EMBED_DIM, rng)];
        for _ in 1..AGG_LAYERS {
            agg.push(xavier(HIDDEN_DIM, HIDDEN_DIM, rng));
        }
        let head = vec![xavier(out, EMBED_DIM + HIDDEN_DIM, rng), Tensor::zeros(&[out])];
        Self { embed, agg, head, support }
    }

    pub fn components(&self) -> Option<usize> {
        match self.support.max_size {
            Some(_) => None,
            None => Some(self.head[1].len() / 3),
        }
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.embed.iter().chain(&self.agg).chain(&self.head)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.embed.iter_mut().chain(self.agg.iter_mut()).chain(self.head.iter_mut())
    }

    pub fn param_count(&self) -> usize {
        self.tensors().map(Tensor::len).sum()
    }

    /// Checks that the three networks fit together.
    pub fn validate(&self, family: &str) -> Result<()> {
        let bad = |what: &str| Err(Error::Malformed(format!("family {family}: {what}")));
        let fdim = self.support.feature_dim();
        if self.embed.len() != 2
            || self.embed[0].shape != [EMBED_DIM, fdim]
            || self.embed[1].shape != [EMBED_DIM]
        {
            return bad("embedding shapes");
        }
        if self.agg.len() != AGG_LAYERS {
            return bad("aggregator depth");
        }
        for (i, w) in self.agg.iter().enumerate() {
            let cols = if i == 0 { EMBED_DIM } else { HIDDEN_DIM };
            if w.shape != [HIDDEN_DIM, cols] {
                return bad("aggregator shapes");
            }
        }
        let out = self.head.get(1).map_or(0, Tensor::len);
        if self.head.len() != 2 || self.head[0].shape != [out, EMBED_DIM + HIDDEN_DIM] {
            return bad("head shapes");
        }
        match self.support.max_size {
            Some(n) if out != n => bad("logit head width"),
            None if out == 0 || !out.is_multiple_of(3) => bad("mixture head width"),
            _ => Ok(()),
        }
    }
}

/// Raw features of a node: `[unconstrained value, 1]` for continuous
/// nodes, a padded one-hot plus `1` for discrete ones. Masking zeroes the
/// value part and keeps the presence flag.
pub fn featurize(node: &NodeState, mask_self: bool, max_support: Option<usize>) -> Result<Vec<f64>> {
    let support = node.dist.support();
    match (support.size(), max_support) {
        (None, _) => {
            let z = if mask_self {
                0.0
            } else {
                let x = node.value.as_real().ok_or_else(|| {
                    Error::TypeMismatch(format!("{} holds {:?}", node.address, node.value))
                })?;
                support.transform()?.to_unconstrained(x)
            };
            Ok(vec![z, 1.0])
        }
        (Some(_), Some(width)) => {
            let mut f = vec![0.0; width + 1];
            f[width] = 1.0;
            if !mask_self {
                let k = node.value.as_index().ok_or_else(|| {
                    Error::TypeMismatch(format!("{} holds {:?}", node.address, node.value))
                })?;
                if k >= width {
                    return Err(Error::Shape(format!(
                        "{}: index {k} exceeds family support {width}",
                        node.address
                    )));
                }
                f[k] = 1.0;
            }
            Ok(f)
        }
        (Some(n), None) => Err(Error::Shape(format!(
            "{}: discrete node of size {n} in a continuous family",
            node.address
        ))),
    }
}

/// Tape handles for one family's parameters, in `FamilyArtifact::tensors`
/// order.
#[derive(Clone, Debug)]
pub struct NetVars {
    pub embed: [Var; 2],
    pub agg: Vec<Var>,
    pub head: [Var; 2],
}

impl NetVars {
    pub fn load(tape: &mut Tape, art: &FamilyArtifact) -> Self {
        let embed = [tape.leaf(art.embed[0].clone()), tape.leaf(art.embed[1].clone())];
        let agg = art.agg.iter().map(|w| tape.leaf(w.clone())).collect();
        let head = [tape.leaf(art.head[0].clone()), tape.leaf(art.head[1].clone())];
        Self { embed, agg, head }
    }

    pub fn vars(&self) -> impl Iterator<Item = Var> + '_ {
        self.embed.iter().chain(&self.agg).chain(&self.head).copied()
    }
}

/// Network input for a node: [`featurize`] with the continuous value
/// standardized by the family normalization.
pub fn node_features(node: &NodeState, support: &FamilySupport, mask_self: bool) -> Result<Vec<f64>> {
    let mut features = featurize(node, mask_self, support.max_size)?;
    if !mask_self && support.max_size.is_none() {
        let Normalization { shift, scale } = support.normalization;
        features[0] = (features[0] - shift) / scale;
    }
    Ok(features)
}

/// Input of the masked self embedding, which depends only on the family.
pub fn masked_features(support: &FamilySupport) -> Vec<f64> {
    let mut f = vec![0.0; support.feature_dim()];
    f[support.feature_dim() - 1] = 1.0;
    f
}

pub fn embed_features(tape: &mut Tape, vars: &NetVars, features: Vec<f64>) -> Result<Var> {
    let x = tape.leaf(Tensor::vector(features));
    let h = tape.affine(vars.embed[0], x, vars.embed[1])?;
    Ok(tape.tanh(h))
}

/// Embeds a node with its family network.
pub fn embed_node(
    tape: &mut Tape,
    vars: &NetVars,
    support: &FamilySupport,
    node: &NodeState,
    mask_self: bool,
) -> Result<Var> {
    embed_features(tape, vars, node_features(node, support, mask_self)?)
}

/// One distinct input to a blanket sum. Members of one family with equal
/// features have equal embeddings, so they are merged and their
/// coefficients added.
#[derive(Clone, Debug, PartialEq)]
pub struct BlanketTerm {
    pub family: Arc<str>,
    pub features: Vec<f64>,
    pub coef: f64,
}

/// The blanket of `addr` as merged terms with coefficients
/// `1/sqrt(|MB(addr)| |MB(member)|)`, in canonical order (family, then
/// feature bits), so the result does not depend on how the world was
/// built.
pub fn blanket_terms<'a>(
    world: &World,
    addr: &Address,
    support_of: impl Fn(&str) -> Result<&'a FamilySupport>,
) -> Result<Vec<BlanketTerm>> {
    let blanket = world.markov_blanket(addr)?;
    let own = blanket.len() as f64;
    // Keyed by family and feature bits; holds features and summed coefficient.
    type Merged = BTreeMap<(Arc<str>, Vec<u64>), (Vec<f64>, f64)>;
    let mut merged = Merged::new();
    for b in &blanket {
        let node = world.node(b)?;
        let features = node_features(node, support_of(&b.family)?, false)?;
        let coef = 1.0 / (own * world.markov_blanket_size(b)?.max(1) as f64).sqrt();
        let key = (b.family.clone(), features.iter().map(|x| x.to_bits()).collect());
        merged.entry(key).or_insert((features, 0.0)).1 += coef;
    }
    Ok(merged
        .into_iter()
        .map(|((family, _), (features, coef))| BlanketTerm { family, features, coef })
        .collect())
}

/// `AGG_LAYERS` tanh layers over the weighted sum of blanket embeddings.
/// An empty blanket sums to the zero vector.
pub fn aggregate_terms(tape: &mut Tape, layers: &[Var], terms: &[(Var, f64)]) -> Result<Var> {
    let mut h = tape.weighted_sum(terms, EMBED_DIM)?;
    for w in layers {
        let a = tape.matvec(*w, h)?;
        h = tape.tanh(a);
    }
    Ok(h)
}

/// Degree-normalized blanket aggregation. `blanket` holds each member's
/// embedding and the size of that member's own blanket.
pub fn aggregate_mb(tape: &mut Tape, layers: &[Var], blanket: &[(Var, usize)]) -> Result<Var> {
    let own = blanket.len() as f64;
    let terms: Vec<(Var, f64)> = blanket
        .iter()
        .map(|(e, n)| (*e, 1.0 / (own * (*n).max(1) as f64).sqrt()))
        .collect();
    aggregate_terms(tape, layers, &terms)
}

/// Head output for one node: mixture parameters or logits, unnormalized.
pub fn head_output(tape: &mut Tape, vars: &NetVars, self_emb: Var, summary: Var) -> Result<Var> {
    let joined = tape.concat(&[self_emb, summary])?;
    tape.affine(vars.head[0], joined, vars.head[1])
}

/// Traced `sum_i log q(values[i])` for values that share the head output
/// `out` and the node support.
pub fn traced_log_q_batch(
    tape: &mut Tape,
    out: Var,
    fam: &FamilySupport,
    node_support: Support,
    values: &[Value],
) -> Result<Var> {
    match node_support.size() {
        Some(n) => {
            let ks = values
                .iter()
                .map(|v| {
                    v.as_index()
                        .ok_or_else(|| Error::TypeMismatch(format!("{v:?} for discrete proposal")))
                })
                .collect::<Result<Vec<_>>>()?;
            tape.categorical_log_mass(out, n, &ks)
        }
        None => {
            let t = node_support.transform()?;
            let Normalization { shift, scale } = fam.normalization;
            let mut zs = Vec::with_capacity(values.len());
            let mut constant = 0.0;
            for v in values {
                let x = v.as_real().ok_or_else(|| {
                    Error::TypeMismatch(format!("{v:?} for continuous proposal"))
                })?;
                zs.push((t.to_unconstrained(x) - shift) / scale);
                // Gaussian normalizer, standardization and the change of
                // variables back to the constrained value.
                constant += -LN_SQRT_2PI - scale.ln() - t.log_abs_det_jacobian(x);
            }
            let lq = tape.mixture_log_density(out, &zs, LOG_SD_MIN, LOG_SD_MAX)?;
            tape.add_const(lq, &Tensor::scalar(constant))
        }
    }
}

/// Traced `log q(value)` for the head output `out`.
pub fn traced_log_q(
    tape: &mut Tape,
    out: Var,
    fam: &FamilySupport,
    node_support: Support,
    value: &Value,
) -> Result<Var> {
    traced_log_q_batch(tape, out, fam, node_support, std::slice::from_ref(value))
}

/// A node's proposal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum ProposalDistribution {
    /// Mixture over the unconstrained coordinate `z`, mapped back through
    /// `transform`.
    Gmm { weights: Vec<f64>, means: Vec<f64>, sds: Vec<f64>, transform: Transform },
    /// Scores over a discrete support; `binary` supports produce booleans.
    Discrete { logits: Vec<f64>, binary: bool },
}

impl ProposalDistribution {
    /// Builds the proposal from a head output.
    pub fn from_head(out: &[f64], fam: &FamilySupport, node_support: Support) -> Result<Self> {
        match node_support.size() {
            Some(n) => Ok(Self::Discrete {
                logits: out[..n].to_vec(),
                binary: node_support == Support::Binary,
            }),
            None => {
                let k = out.len() / 3;
                let Normalization { shift, scale } = fam.normalization;
                let lse = log_sum_exp(&out[..k]);
                Ok(Self::Gmm {
                    weights: out[..k].iter().map(|a| (a - lse).exp()).collect(),
                    means: out[k..2 * k].iter().map(|m| shift + scale * m).collect(),
                    sds: out[2 * k..]
                        .iter()
                        .map(|l| scale * l.clamp(LOG_SD_MIN, LOG_SD_MAX).exp())
                        .collect(),
                    transform: node_support.transform()?,
                })
            }
        }
    }

    pub fn log_prob(&self, v: &Value) -> Result<f64> {
        match self {
            Self::Gmm { weights, means, sds, transform } => {
                let x = v
                    .as_real()
                    .ok_or_else(|| Error::TypeMismatch(format!("{v:?} for mixture proposal")))?;
                let z = transform.to_unconstrained(x);
                if !z.is_finite() {
                    return Ok(f64::NEG_INFINITY);
                }
                let terms: Vec<f64> = weights
                    .iter()
                    .zip(means.iter().zip(sds))
                    .map(|(w, (m, s))| w.ln() + normal_lpdf(z, *m, *s))
                    .collect();
                Ok(log_sum_exp(&terms) - transform.log_abs_det_jacobian(x))
            }
            Self::Discrete { logits, binary } => {
                let k = match (v, binary) {
                    (Value::Bool(b), true) => usize::from(*b),
                    (Value::Index(k), false) => *k,
                    _ => return Err(Error::TypeMismatch(format!("{v:?} for discrete proposal"))),
                };
                Ok(logits.get(k).map_or(f64::NEG_INFINITY, |l| l - log_sum_exp(logits)))
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Value {
        match self {
            Self::Gmm { weights, means, sds, transform } => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut k = weights.len() - 1;
                for (i, w) in weights.iter().enumerate() {
                    acc += w;
                    if u < acc {
                        k = i;
                        break;
                    }
                }
                let e: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng);
                Value::Real(transform.from_unconstrained(means[k] + sds[k] * e))
            }
            Self::Discrete { logits, binary } => {
                let lse = log_sum_exp(logits);
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut k = logits.len() - 1;
                for (i, l) in logits.iter().enumerate() {
                    acc += (l - lse).exp();
                    if u < acc {
                        k = i;
                        break;
                    }
                }
                if *binary {
                    Value::Bool(k == 1)
                } else {
                    Value::Index(k)
                }
            }
        }
    }
}

/// Proposal parameters for `addr` from the compiled store.
///
/// Fails with [`Error::MissingArtifact`] when the node's family or any
/// blanket member's family was never compiled.
pub fn compute_phi(store: &ArtifactStore, world: &World, addr: &Address) -> Result<ProposalDistribution> {
    let node = world.node(addr)?;
    let art = store.family(&addr.family)?;
    let terms = blanket_terms(world, addr, |f| store.family(f).map(|a| &a.support))?;

    let mut tape = Tape::new();
    let own = NetVars::load(&mut tape, art);
    let self_emb = embed_features(&mut tape, &own, masked_features(&art.support))?;
    let mut loaded: BTreeMap<&str, NetVars> = BTreeMap::from([(&*addr.family, own.clone())]);
    let mut embs = Vec::with_capacity(terms.len());
    for t in &terms {
        let vars = match loaded.get(&*t.family) {
            Some(v) => v.clone(),
            None => {
                let v = NetVars::load(&mut tape, store.family(&t.family)?);
                loaded.insert(&t.family, v.clone());
                v
            }
        };
        embs.push((embed_features(&mut tape, &vars, t.features.clone())?, t.coef));
    }
    let summary = aggregate_terms(&mut tape, &own.agg, &embs)?;
    let out = head_output(&mut tape, &own, self_emb, summary)?;
    ProposalDistribution::from_head(&tape.value(out).data, &art.support, node.dist.support())
}
