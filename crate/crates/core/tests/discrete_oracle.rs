//! Sampler and compiled-proposal correctness on a model small enough to
//! enumerate.

use std::collections::BTreeMap;
use std::sync::Arc;

use blanket::compile::{train, ArtifactStore, TrainingConfig};
use blanket::infer::{run_chain, ChainConfig, Proposer};
use blanket::models::{enumerate_joint, single_site_conditional, DiscreteChain, Enumeration};
use blanket::nn::{compute_phi, ProposalDistribution};
use blanket::{seed, Address, Model, Value, World};

fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

fn exact() -> Enumeration {
    let m = DiscreteChain::default();
    enumerate_joint(&m, &DiscreteChain::latents(), &m.observations()).unwrap()
}

fn key(s: &BTreeMap<Address, Value>) -> Vec<usize> {
    DiscreteChain::latents().iter().map(|(a, ..)| s[a].as_index().unwrap()).collect()
}

/// TV between the chain's empirical joint over the latents and the
/// enumerated posterior.
fn joint_tv(p: &Proposer, samples: usize) -> f64 {
    let m = DiscreteChain::default();
    let cfg = ChainConfig { num_samples: samples, burn_in: 500, seed: 11, ..ChainConfig::default() };
    let out = run_chain(&m, &m.observations(), p, &cfg).unwrap();
    let e = exact();
    let mut counts: BTreeMap<Vec<usize>, f64> = BTreeMap::new();
    for t in 0..out.num_samples {
        let k: Vec<usize> = DiscreteChain::latents()
            .iter()
            .map(|(a, ..)| out.draws[a][t].as_ref().unwrap().as_index().unwrap())
            .collect();
        *counts.entry(k).or_default() += 1.0 / out.num_samples as f64;
    }
    let (emp, ex): (Vec<f64>, Vec<f64>) =
        e.states.iter().map(|(s, p)| (counts.get(&key(s)).copied().unwrap_or(0.0), *p)).unzip();
    total_variation(&emp, &ex)
}

fn compiled() -> ArtifactStore {
    let cfg = TrainingConfig { num_worlds: 30_000, epochs: 100, lr: 3e-4, ..TrainingConfig::default() };
    train(&DiscreteChain::default(), &cfg).unwrap()
}

fn world_at(state: &BTreeMap<Address, Value>) -> World {
    let m = DiscreteChain::default();
    let mut w = blanket::ancestral_sample(&m, &mut seed::rng_from(0), Some(&m.observations())).unwrap();
    for (a, v) in state {
        if !m.observations().contains_key(a) {
            w.set_value(&m, a, v.clone(), &mut seed::rng_from(0)).unwrap();
        }
    }
    w
}

fn probs(q: &ProposalDistribution) -> Vec<f64> {
    match q {
        ProposalDistribution::Discrete { logits, .. } => {
            let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            logits.iter().map(|l| (l - m).exp() / z).collect()
        }
        ProposalDistribution::Gmm { .. } => panic!("expected a discrete proposal"),
    }
}

#[test]
fn enumeration_sums_to_one_and_matches_bayes_by_hand() {
    let e = exact();
    let total: f64 = e.states.iter().map(|(_, p)| p).sum();
    assert!((total - 1.0).abs() < 1e-12);
    // P(c = 1 | y = 1) by hand from the model tables.
    let position = [[0.7, 0.2, 0.1], [0.1, 0.2, 0.7]];
    let switch = [0.2, 0.5, 0.9];
    let reading_1 = [[0.15, 0.7, 0.15], [0.3, 0.4, 0.3]];
    let joint = |c: usize| -> f64 {
        let pc = if c == 1 { 0.6 } else { 0.4 };
        (0..3)
            .map(|x| {
                let pz1 = switch[x];
                pc * position[c][x] * ((1.0 - pz1) * reading_1[0][x] + pz1 * reading_1[1][x])
            })
            .sum()
    };
    let by_hand = joint(1) / (joint(0) + joint(1));
    let m = e.marginal(&DiscreteChain::c(), 2);
    assert!((m[1] - by_hand).abs() < 1e-12, "{} vs {by_hand}", m[1]);
}

#[test]
fn prior_proposer_matches_enumeration() {
    let tv = joint_tv(&Proposer::Prior, 20_000);
    assert!(tv < 0.05, "{tv}");
}

#[test]
fn compiled_proposals_match_conditionals_and_sample_correctly() {
    let store = compiled();
    let m = DiscreteChain::default();
    let e = exact();
    let mut worst = 0.0_f64;
    for (state, _) in &e.states {
        let w = world_at(state);
        for (a, n, binary) in DiscreteChain::latents() {
            let exact = single_site_conditional(&m, state, &a, n, binary).unwrap();
            let q = probs(&compute_phi(&store, &w, &a).unwrap());
            worst = worst.max(total_variation(&exact, &q));
        }
    }
    assert!(worst < 0.05, "worst per-node TV {worst}");
    let tv = joint_tv(&Proposer::Lic(Arc::new(store)), 20_000);
    assert!(tv < 0.05, "{tv}");
}
