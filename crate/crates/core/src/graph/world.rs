use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Address, Env, Model, Value};
use crate::distributions::Distribution;
use crate::error::{Error, Result};
use crate::seed;

#[derive(Clone, Debug, PartialEq)]
pub struct NodeState {
    pub address: Address,
    pub dist: Distribution,
    pub value: Value,
    pub observed: bool,
    pub parents: BTreeSet<Address>,
    pub children: BTreeSet<Address>,
    /// Cached `log p(value | parents)`.
    pub log_prob: f64,
}

/// An instantiated network.
#[derive(Clone, Debug, PartialEq)]
pub struct World {
    nodes: BTreeMap<Address, NodeState>,
    log_joint: f64,
    clamped: BTreeMap<Address, Value>,
    roots: BTreeSet<Address>,
    depth: u64,
}

/// Record of one `set_value`, sufficient to undo it.
#[derive(Debug)]
pub struct WorldDiff {
    pub addr: Address,
    saved: BTreeMap<Address, NodeState>,
    created: BTreeSet<Address>,
    destroyed: BTreeSet<Address>,
    pub delta_log_joint: f64,
    /// Log density of nodes instantiated by the mutation.
    pub created_log_prob: f64,
    /// Log density the destroyed nodes had before the mutation.
    pub destroyed_log_prob: f64,
    old_log_joint: f64,
    depth_before: u64,
    depth_after: u64,
}

impl WorldDiff {
    /// Nodes that existed before and were modified or destroyed.
    pub fn changed(&self) -> impl Iterator<Item = &Address> {
        self.saved.keys()
    }

    pub fn created(&self) -> &BTreeSet<Address> {
        &self.created
    }

    pub fn destroyed(&self) -> &BTreeSet<Address> {
        &self.destroyed
    }

    pub fn is_empty(&self) -> bool {
        self.saved.is_empty() && self.created.is_empty()
    }

    /// State of a node before the mutation, if the mutation touched it.
    pub fn before(&self, addr: &Address) -> Option<&NodeState> {
        self.saved.get(addr)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeSnapshot {
    pub family: String,
    pub args: Vec<i64>,
    pub value: Value,
    pub observed: bool,
    pub log_prob: f64,
    pub parents: Vec<Address>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldSnapshot {
    pub nodes: Vec<NodeSnapshot>,
    pub log_joint: f64,
}

fn node_rng(seed: u64, addr: &Address) -> seed::Rng64 {
    seed::rng_from(seed::mix(seed, addr.stable_hash()))
}

/// Instantiates nodes on demand while recording what it changed.
struct Builder<'a> {
    world: &'a mut World,
    model: &'a dyn Model,
    seed: u64,
    stack: Vec<Address>,
    tracking: bool,
    saved: BTreeMap<Address, NodeState>,
    created: BTreeSet<Address>,
    delta: f64,
}

struct Recorder<'b, 'a> {
    builder: &'b mut Builder<'a>,
    reads: BTreeSet<Address>,
}

impl Env for Recorder<'_, '_> {
    fn read(&mut self, addr: &Address) -> Result<Value> {
        self.reads.insert(addr.clone());
        self.builder.ensure(addr)
    }
}

impl<'a> Builder<'a> {
    fn new(world: &'a mut World, model: &'a dyn Model, seed: u64, tracking: bool) -> Self {
        Self {
            world,
            model,
            seed,
            stack: Vec::new(),
            tracking,
            saved: BTreeMap::new(),
            created: BTreeSet::new(),
            delta: 0.0,
        }
    }

    fn touch(&mut self, addr: &Address) {
        if self.tracking && !self.created.contains(addr) && !self.saved.contains_key(addr) {
            if let Some(n) = self.world.nodes.get(addr) {
                self.saved.insert(addr.clone(), n.clone());
            }
        }
    }

    fn ensure(&mut self, addr: &Address) -> Result<Value> {
        if let Some(n) = self.world.nodes.get(addr) {
            return Ok(n.value.clone());
        }
        if self.stack.contains(addr) {
            return Err(Error::Cycle(addr.clone()));
        }
        self.instantiate(addr)?;
        Ok(self.world.nodes[addr].value.clone())
    }

    fn evaluate(&mut self, addr: &Address) -> Result<(Distribution, BTreeSet<Address>)> {
        self.stack.push(addr.clone());
        let model = self.model;
        let mut env = Recorder { builder: self, reads: BTreeSet::new() };
        let dist = model.distribution(addr, &mut env);
        let reads = env.reads;
        self.stack.pop();
        Ok((dist?, reads))
    }

    fn instantiate(&mut self, addr: &Address) -> Result<()> {
        let (dist, parents) = self.evaluate(addr)?;
        // A read may have instantiated `addr` through a cycle-free detour.
        if self.world.nodes.contains_key(addr) {
            return Ok(());
        }
        let (value, observed) = match self.world.clamped.get(addr) {
            Some(v) => (v.clone(), true),
            None => (dist.sample(&mut node_rng(self.seed, addr)), false),
        };
        let log_prob = dist.log_prob(&value)?;
        if !log_prob.is_finite() {
            return Err(Error::OutOfSupport { addr: addr.clone(), value: value.to_string() });
        }
        for p in &parents {
            self.touch(p);
            if let Some(pn) = self.world.nodes.get_mut(p) {
                pn.children.insert(addr.clone());
            }
        }
        self.world.nodes.insert(
            addr.clone(),
            NodeState {
                address: addr.clone(),
                dist,
                value,
                observed,
                parents,
                children: BTreeSet::new(),
                log_prob,
            },
        );
        if self.tracking {
            self.created.insert(addr.clone());
        }
        self.delta += log_prob;
        Ok(())
    }

    /// Re-runs the model for an existing node, re-recording its parents.
    /// Returns parents that lost this node as a child.
    fn reevaluate(&mut self, addr: &Address) -> Result<Vec<Address>> {
        let (dist, parents) = self.evaluate(addr)?;
        self.touch(addr);
        let node = self.world.nodes.get_mut(addr).expect("re-evaluated node exists");
        let log_prob = dist.log_prob(&node.value)?;
        self.delta += log_prob - node.log_prob;
        node.log_prob = log_prob;
        node.dist = dist;
        let old = std::mem::replace(&mut node.parents, parents.clone());
        let dropped: Vec<Address> = old.difference(&parents).cloned().collect();
        let added: Vec<Address> = parents.difference(&old).cloned().collect();
        for p in &dropped {
            self.touch(p);
            if let Some(pn) = self.world.nodes.get_mut(p) {
                pn.children.remove(addr);
            }
        }
        for p in &added {
            self.touch(p);
            if let Some(pn) = self.world.nodes.get_mut(p) {
                pn.children.insert(addr.clone());
            }
        }
        Ok(dropped)
    }

    /// Destroys nodes that no longer lead to a root.
    fn collect_garbage(&mut self, mut pending: Vec<Address>) {
        while let Some(a) = pending.pop() {
            let orphan = match self.world.nodes.get(&a) {
                Some(n) => n.children.is_empty() && !self.world.roots.contains(&a),
                None => false,
            };
            if !orphan {
                continue;
            }
            self.touch(&a);
            let node = self.world.nodes.remove(&a).expect("checked above");
            self.delta -= node.log_prob;
            self.created.remove(&a);
            for p in &node.parents {
                self.touch(p);
                if let Some(pn) = self.world.nodes.get_mut(p) {
                    pn.children.remove(&a);
                }
                pending.push(p.clone());
            }
        }
    }
}

/// Samples a world from the model, clamping `observe` where given.
///
/// Unobserved values come from per-address streams derived from one draw of
/// `rng`, so a node's value does not depend on instantiation order.
pub fn ancestral_sample<R: Rng + ?Sized>(
    model: &dyn Model,
    rng: &mut R,
    observe: Option<&BTreeMap<Address, Value>>,
) -> Result<World> {
    let clamped = observe.cloned().unwrap_or_default();
    let mut roots: BTreeSet<Address> = model.queries().into_iter().collect();
    roots.extend(model.observations().into_keys());
    roots.extend(clamped.keys().cloned());
    let mut world = World {
        nodes: BTreeMap::new(),
        log_joint: 0.0,
        clamped,
        roots: roots.clone(),
        depth: 0,
    };
    let seed = rng.next_u64();
    {
        let mut b = Builder::new(&mut world, model, seed, false);
        for r in &roots {
            b.ensure(r)?;
        }
    }
    world.refresh_log_joint();
    Ok(world)
}

impl World {
    pub fn get(&self, addr: &Address) -> Option<&NodeState> {
        self.nodes.get(addr)
    }

    pub fn node(&self, addr: &Address) -> Result<&NodeState> {
        self.nodes.get(addr).ok_or_else(|| Error::UnknownAddress(addr.clone()))
    }

    pub fn value(&self, addr: &Address) -> Option<&Value> {
        self.nodes.get(addr).map(|n| &n.value)
    }

    pub fn contains(&self, addr: &Address) -> bool {
        self.nodes.contains_key(addr)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &NodeState> {
        self.nodes.values()
    }

    pub fn addresses(&self) -> impl Iterator<Item = &Address> {
        self.nodes.keys()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn log_joint(&self) -> f64 {
        self.log_joint
    }

    /// Unobserved addresses in sorted order.
    pub fn latent_addresses(&self) -> Vec<Address> {
        self.nodes.values().filter(|n| !n.observed).map(|n| n.address.clone()).collect()
    }

    pub fn clamped(&self) -> &BTreeMap<Address, Value> {
        &self.clamped
    }

    /// Recomputes the cached joint from the node caches, in address order.
    pub fn refresh_log_joint(&mut self) {
        self.log_joint = self.nodes.values().map(|n| n.log_prob).sum();
    }

    /// Parents, children and co-parents of `addr`, sorted, excluding `addr`.
    pub fn markov_blanket(&self, addr: &Address) -> Result<Vec<Address>> {
        let node = self.node(addr)?;
        let mut mb: BTreeSet<&Address> = node.parents.iter().collect();
        for c in &node.children {
            mb.insert(c);
            mb.extend(self.nodes[c].parents.iter());
        }
        mb.remove(addr);
        Ok(mb.into_iter().cloned().collect())
    }

    /// Size of the Markov blanket without materializing it.
    pub fn markov_blanket_size(&self, addr: &Address) -> Result<usize> {
        let node = self.node(addr)?;
        if node.children.is_empty() {
            return Ok(node.parents.len());
        }
        Ok(self.markov_blanket(addr)?.len())
    }

    /// `log p(x | parents) + sum over children of log p(child | its parents)`.
    pub fn mb_log_prob(&self, addr: &Address) -> Result<f64> {
        let node = self.node(addr)?;
        Ok(node.log_prob + node.children.iter().map(|c| self.nodes[c].log_prob).sum::<f64>())
    }

    /// Replaces the value of a latent node, re-evaluating its children.
    ///
    /// Children may read different nodes than before: missing nodes are
    /// instantiated from their priors and nodes that no longer lead to a
    /// query or observation are destroyed.
    pub fn set_value<R: Rng + ?Sized>(
        &mut self,
        model: &dyn Model,
        addr: &Address,
        value: Value,
        rng: &mut R,
    ) -> Result<WorldDiff> {
        let node = self.node(addr)?;
        if node.observed {
            return Err(Error::ObservedMutation(addr.clone()));
        }
        let seed = rng.next_u64();
        let empty = |w: &World| WorldDiff {
            addr: addr.clone(),
            saved: BTreeMap::new(),
            created: BTreeSet::new(),
            destroyed: BTreeSet::new(),
            delta_log_joint: 0.0,
            created_log_prob: 0.0,
            destroyed_log_prob: 0.0,
            old_log_joint: w.log_joint,
            depth_before: w.depth,
            depth_after: w.depth,
        };
        if node.value == value {
            return Ok(empty(self));
        }
        if matches!(value, Value::Real(x) if !x.is_finite()) {
            return Err(Error::OutOfSupport { addr: addr.clone(), value: value.to_string() });
        }
        let log_prob = node.dist.log_prob(&value)?;
        if !log_prob.is_finite() {
            return Err(Error::OutOfSupport { addr: addr.clone(), value: value.to_string() });
        }
        let children: Vec<Address> = node.children.iter().cloned().collect();
        let old_log_joint = self.log_joint;
        let depth_before = self.depth;

        let mut b = Builder::new(self, model, seed, true);
        b.touch(addr);
        {
            let n = b.world.nodes.get_mut(addr).expect("checked above");
            b.delta += log_prob - n.log_prob;
            n.value = value;
            n.log_prob = log_prob;
        }
        let mut dropped = Vec::new();
        let mut failure = None;
        for c in &children {
            match b.reevaluate(c) {
                Ok(d) => dropped.extend(d),
                Err(e) => {
                    failure = Some(e);
                    break;
                }
            }
        }
        if failure.is_none() {
            b.collect_garbage(dropped);
        }
        let Builder { saved, created, delta, .. } = b;

        let destroyed: BTreeSet<Address> =
            saved.keys().filter(|a| !self.nodes.contains_key(*a)).cloned().collect();
        let created_log_prob = created.iter().map(|a| self.nodes[a].log_prob).sum();
        let destroyed_log_prob = destroyed.iter().map(|a| saved[a].log_prob).sum();
        self.depth += 1;
        self.log_joint = old_log_joint + delta;
        let diff = WorldDiff {
            addr: addr.clone(),
            saved,
            created,
            destroyed,
            delta_log_joint: delta,
            created_log_prob,
            destroyed_log_prob,
            old_log_joint,
            depth_before,
            depth_after: self.depth,
        };
        match failure {
            None => Ok(diff),
            Some(e) => {
                self.revert(diff)?;
                Err(e)
            }
        }
    }

    /// Undoes the most recent unreverted `set_value`.
    pub fn revert(&mut self, diff: WorldDiff) -> Result<()> {
        if diff.depth_after != self.depth {
            return Err(Error::StaleDiff(format!(
                "diff for {} ends at depth {}, world is at {}",
                diff.addr, diff.depth_after, self.depth
            )));
        }
        for a in &diff.created {
            self.nodes.remove(a);
        }
        for (a, n) in diff.saved {
            self.nodes.insert(a, n);
        }
        self.log_joint = diff.old_log_joint;
        self.depth = diff.depth_before;
        Ok(())
    }

    pub fn snapshot(&self) -> WorldSnapshot {
        WorldSnapshot {
            nodes: self
                .nodes
                .values()
                .map(|n| NodeSnapshot {
                    family: n.address.family.to_string(),
                    args: n.address.args.clone(),
                    value: n.value.clone(),
                    observed: n.observed,
                    log_prob: n.log_prob,
                    parents: n.parents.iter().cloned().collect(),
                })
                .collect(),
            log_joint: self.log_joint,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.snapshot()).expect("snapshot serializes")
    }
}
