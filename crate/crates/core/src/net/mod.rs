//! Deterministic simulated network of approved nodes.
//!
//! Every node holds a full replica. A proposal is broadcast to all other
//! approved nodes; honest nodes confirm when replaying the command on their
//! own replica yields the proposer's resulting state and a clean
//! `verify_tree`. The command commits when the confirmations, proposer
//! included, strictly exceed the confirmation threshold. Tampered replicas
//! are repaired block by block from any version held by at least the repair
//! threshold of nodes.

mod script;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::blocks::{Block, CatalogEntry, Edit};
use crate::ledger::{default_catalog, verify_tree, BlockRef, LedgerError, LedgerState, Request, Response, TamperError};
use crate::store::state_digest;

pub use script::{parse_script, run_scenario, Scenario, ScriptError, ScriptLine, ScriptOp};

/// A threshold `num/den` compared in exact integer arithmetic.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Ratio {
    pub num: u64,
    pub den: u64,
}

impl Ratio {
    pub const fn new(num: u64, den: u64) -> Self {
        Ratio { num, den }
    }

    /// `count / total > num / den`
    pub fn exceeded_by(self, count: usize, total: usize) -> bool {
        count as u128 * self.den as u128 > self.num as u128 * total as u128
    }

    /// `count / total >= num / den`
    pub fn reached_by(self, count: usize, total: usize) -> bool {
        count as u128 * self.den as u128 >= self.num as u128 * total as u128
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

/// Confirmations must be strictly more than 51% of approved nodes.
pub const CONFIRM_THRESHOLD: Ratio = Ratio::new(51, 100);
/// A repair version must be held by at least 51% of approved nodes.
pub const REPAIR_THRESHOLD: Ratio = Ratio::new(51, 100);

/// Commit rule with the default threshold.
pub fn quorum_reached(confirmations: usize, nodes: usize) -> bool {
    CONFIRM_THRESHOLD.exceeded_by(confirmations, nodes)
}

/// Repair rule with the default threshold.
pub fn repair_majority(holders: usize, nodes: usize) -> bool {
    REPAIR_THRESHOLD.reached_by(holders, nodes)
}

#[derive(thiserror::Error, Debug, Clone, PartialEq, Eq)]
pub enum NetError {
    #[error("NotAuthorized: {0} is not on the approved node list")]
    NotAuthorized(String),
    #[error("NoSuchBlock: {block} on {node}")]
    NoSuchBlock { node: String, block: BlockRef },
    #[error("InvalidField: {0}")]
    InvalidField(String),
    #[error("InvalidConfig: {0}")]
    InvalidConfig(String),
}

impl NetError {
    pub fn name(&self) -> &'static str {
        match self {
            NetError::NotAuthorized(_) => "NotAuthorized",
            NetError::NoSuchBlock { .. } => "NoSuchBlock",
            NetError::InvalidField(_) => "InvalidField",
            NetError::InvalidConfig(_) => "InvalidConfig",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimConfig {
    pub node_count: usize,
    pub seed: u64,
    pub byzantine: BTreeSet<String>,
    /// Probability that a proposal message to one node is lost.
    pub drop_rate: f64,
    pub confirm_threshold: Ratio,
    pub repair_threshold: Ratio,
    pub catalog: Vec<CatalogEntry>,
}

impl SimConfig {
    pub fn new(node_count: usize, seed: u64) -> Self {
        SimConfig {
            node_count,
            seed,
            byzantine: BTreeSet::new(),
            drop_rate: 0.0,
            confirm_threshold: CONFIRM_THRESHOLD,
            repair_threshold: REPAIR_THRESHOLD,
            catalog: default_catalog(),
        }
    }

    /// Approved node ids `n1..nN`.
    pub fn node_ids(&self) -> Vec<String> {
        (1..=self.node_count).map(|i| format!("n{i}")).collect()
    }

    pub fn validate(&self) -> Result<(), NetError> {
        if self.node_count == 0 {
            return Err(NetError::InvalidConfig("node_count must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.drop_rate) {
            return Err(NetError::InvalidConfig(format!("drop_rate {} outside [0, 1)", self.drop_rate)));
        }
        for r in [self.confirm_threshold, self.repair_threshold] {
            if r.den == 0 || r.num > r.den {
                return Err(NetError::InvalidConfig(format!("threshold {r} outside [0, 1]")));
            }
        }
        let ids = self.node_ids();
        if let Some(b) = self.byzantine.iter().find(|b| !ids.contains(b)) {
            return Err(NetError::InvalidConfig(format!("byzantine node {b} is not approved")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Node {
    pub id: String,
    pub replica: LedgerState,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Refusal {
    /// The proposal never reached the node.
    Dropped,
    Byzantine,
    /// Replaying the command on the node's replica disagreed with the proposer.
    Invalid,
}

impl Refusal {
    pub fn name(self) -> &'static str {
        match self {
            Refusal::Dropped => "dropped",
            Refusal::Byzantine => "byzantine",
            Refusal::Invalid => "invalid",
        }
    }
}

#[derive(Clone, Debug)]
pub struct Proposal {
    pub round: u64,
    pub proposer: String,
    pub confirmations: Vec<String>,
    pub refusals: Vec<(String, Refusal)>,
    pub committed: bool,
    /// The proposer's outcome, meaningful when committed.
    pub outcome: Result<Response, LedgerError>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum RepairAction {
    Replaced,
    Inserted,
    Removed,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum RepairEntry {
    Repaired { node: String, block: BlockRef, action: RepairAction },
    /// No eligible version reached the repair threshold; `best` is the
    /// largest number of nodes agreeing on a self-consistent version.
    Unrepairable { block: BlockRef, best: usize },
}

impl fmt::Display for RepairEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RepairEntry::Repaired { node, block, action } => {
                let a = match action {
                    RepairAction::Replaced => "replaced",
                    RepairAction::Inserted => "inserted",
                    RepairAction::Removed => "removed",
                };
                write!(f, "REPAIR {node} {block} {a}")
            }
            RepairEntry::Unrepairable { block, best } => write!(f, "UNREPAIRABLE {block} best={best}"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RepairReport {
    pub entries: Vec<RepairEntry>,
}

impl RepairReport {
    pub fn repaired(&self) -> usize {
        self.entries.iter().filter(|e| matches!(e, RepairEntry::Repaired { .. })).count()
    }

    pub fn unrepairable(&self) -> Vec<BlockRef> {
        self.entries
            .iter()
            .filter_map(|e| match e {
                RepairEntry::Unrepairable { block, .. } => Some(*block),
                _ => None,
            })
            .collect()
    }
}

pub struct Network {
    config: SimConfig,
    nodes: Vec<Node>,
    rng: ChaCha8Rng,
    round: u64,
}

impl Network {
    pub fn new(config: SimConfig) -> Result<Self, NetError> {
        config.validate()?;
        let genesis = LedgerState::new(config.catalog.clone()).map_err(|e| NetError::InvalidConfig(e.to_string()))?;
        let nodes = config.node_ids().into_iter().map(|id| Node { id, replica: genesis.clone() }).collect();
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Network { config, nodes, rng, round: 0 })
    }

    /// Network whose nodes start from existing replicas, one per approved
    /// node in order.
    pub fn from_replicas(config: SimConfig, replicas: Vec<LedgerState>) -> Result<Self, NetError> {
        config.validate()?;
        if replicas.len() != config.node_count {
            return Err(NetError::InvalidConfig(format!(
                "{} replicas for {} nodes",
                replicas.len(),
                config.node_count
            )));
        }
        let nodes = config.node_ids().into_iter().zip(replicas).map(|(id, replica)| Node { id, replica }).collect();
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Network { config, nodes, rng, round: 0 })
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn replica(&self, node: &str) -> Option<&LedgerState> {
        self.index(node).map(|i| &self.nodes[i].replica)
    }

    fn index(&self, node: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.id == node)
    }

    /// True when every replica holds exactly the same blocks.
    pub fn converged(&self) -> bool {
        self.nodes.windows(2).all(|w| w[0].replica == w[1].replica)
    }

    /// Broadcasts `req` from `node` and commits it on every replica if the
    /// quorum confirms.
    pub fn propose(&mut self, node: &str, req: &Request) -> Result<Proposal, NetError> {
        let p = self.index(node).ok_or_else(|| NetError::NotAuthorized(node.to_string()))?;
        self.round += 1;
        let mut proposed = self.nodes[p].replica.clone();
        let outcome = proposed.execute(req);

        let mut confirmations = vec![node.to_string()];
        let mut refusals = Vec::new();
        for i in 0..self.nodes.len() {
            if i == p {
                continue;
            }
            let id = self.nodes[i].id.clone();
            let dropped = self.rng.gen_bool(self.config.drop_rate);
            let refusal = if dropped {
                Some(Refusal::Dropped)
            } else if self.config.byzantine.contains(&id) {
                Some(Refusal::Byzantine)
            } else {
                let mut mine = self.nodes[i].replica.clone();
                let _ = mine.execute(req);
                if mine == proposed && verify_tree(&mine).is_empty() {
                    None
                } else {
                    Some(Refusal::Invalid)
                }
            };
            match refusal {
                None => confirmations.push(id),
                Some(r) => refusals.push((id, r)),
            }
        }

        let committed = self.config.confirm_threshold.exceeded_by(confirmations.len(), self.nodes.len());
        if committed {
            for (i, n) in self.nodes.iter_mut().enumerate() {
                if i == p {
                    n.replica = proposed.clone();
                } else {
                    let _ = n.replica.execute(req);
                }
            }
        }
        Ok(Proposal { round: self.round, proposer: node.to_string(), confirmations, refusals, committed, outcome })
    }

    /// Edits one block on one node only, bypassing every check.
    pub fn tamper(&mut self, node: &str, block: BlockRef, field: &str, edit: &Edit) -> Result<(), NetError> {
        let i = self.index(node).ok_or_else(|| NetError::NotAuthorized(node.to_string()))?;
        self.nodes[i].replica.tamper(block, field, edit).map_err(|e| match e {
            TamperError::NoSuchBlock(b) => NetError::NoSuchBlock { node: node.to_string(), block: b },
            TamperError::Field(f) => NetError::InvalidField(f.to_string()),
        })
    }

    /// Compares every block coordinate across nodes and replaces divergent
    /// blocks with the version held by at least the repair threshold.
    /// Only versions whose stored self hash is valid are eligible; a
    /// missing block counts as its own version.
    pub fn audit_and_repair(&mut self) -> RepairReport {
        let n = self.nodes.len();
        let threshold = self.config.repair_threshold;
        let mut report = RepairReport::default();

        let mut yellow_keys = BTreeSet::new();
        let mut red_keys = BTreeSet::new();
        for node in &self.nodes {
            yellow_keys.extend(node.replica.yellow_chains().keys().copied());
            red_keys.extend(node.replica.red_chains().keys().copied());
        }

        let ids: Vec<String> = self.nodes.iter().map(|n| n.id.clone()).collect();
        let mut reps: Vec<LedgerState> = self.nodes.iter().map(|n| n.replica.clone()).collect();

        let main = vote(&reps.iter().map(|r| r.main_chain()).collect::<Vec<_>>(), threshold, n);
        main.report(&ids, BlockRef::Main, |i| i as u32, &mut report);
        for (r, chain) in reps.iter_mut().zip(main.chains) {
            *r.chains_mut().0 = chain;
        }

        for p in &yellow_keys {
            let v = vote(&reps.iter().map(|r| r.yellow(*p)).collect::<Vec<_>>(), threshold, n);
            v.report(&ids, |record| BlockRef::Yellow { patient: *p, record }, |i| i as u32 + 1, &mut report);
            for (r, chain) in reps.iter_mut().zip(v.chains) {
                let yellow = r.chains_mut().1;
                if !chain.is_empty() || yellow.contains_key(p) {
                    yellow.insert(*p, chain);
                }
            }
        }
        for p in &red_keys {
            let v = vote(&reps.iter().map(|r| r.red(*p)).collect::<Vec<_>>(), threshold, n);
            v.report(&ids, |log| BlockRef::Red { patient: *p, log }, |i| i as u32 + 1, &mut report);
            for (r, chain) in reps.iter_mut().zip(v.chains) {
                let red = r.chains_mut().2;
                if chain.is_empty() {
                    red.remove(p);
                } else {
                    red.insert(*p, chain);
                }
            }
        }
        let notes = vote(&reps.iter().map(|r| r.audit_notes()).collect::<Vec<_>>(), threshold, n);
        notes.report(&ids, BlockRef::Global, |i| i as u32 + 1, &mut report);
        for (r, chain) in reps.iter_mut().zip(notes.chains) {
            *r.chains_mut().3 = chain;
        }

        for (node, mut r) in self.nodes.iter_mut().zip(reps) {
            r.recompute_derived();
            node.replica = r;
        }
        report
    }

    /// `node digest violations` per node, in node order.
    pub fn state_lines(&self) -> Vec<String> {
        self.nodes
            .iter()
            .map(|n| format!("STATE {} {} violations={}", n.id, state_digest(&n.replica), verify_tree(&n.replica).len()))
            .collect()
    }
}

struct Vote<B> {
    chains: Vec<Vec<B>>,
    /// (node index, position, action)
    changes: Vec<(usize, usize, RepairAction)>,
    /// (position, best eligible count)
    unrepairable: Vec<(usize, usize)>,
}

impl<B> Vote<B> {
    fn report(
        &self,
        ids: &[String],
        make: impl Fn(u32) -> BlockRef,
        pos: impl Fn(usize) -> u32,
        out: &mut RepairReport,
    ) {
        let mut events: Vec<(usize, usize, RepairEntry)> = Vec::new();
        for (node, i, action) in &self.changes {
            events.push((*i, *node, RepairEntry::Repaired { node: ids[*node].clone(), block: make(pos(*i)), action: action.clone() }));
        }
        for (i, best) in &self.unrepairable {
            events.push((*i, usize::MAX, RepairEntry::Unrepairable { block: make(pos(*i)), best: *best }));
        }
        events.sort_by_key(|(i, node, _)| (*i, *node));
        out.entries.extend(events.into_iter().map(|(_, _, e)| e));
    }
}

/// Majority vote per position over one chain held by every node.
fn vote<B: Block + Clone>(chains: &[&[B]], threshold: Ratio, n: usize) -> Vote<B> {
    let max_len = chains.iter().map(|c| c.len()).max().unwrap_or(0);
    let mut out: Vec<Vec<B>> = vec![Vec::new(); chains.len()];
    let mut ended = vec![false; chains.len()];
    let mut changes = Vec::new();
    let mut unrepairable = Vec::new();

    for i in 0..max_len {
        // version bytes (None = absent) -> (holders, sample, eligible)
        let mut versions: BTreeMap<Option<Vec<u8>>, (usize, Option<&B>, bool)> = BTreeMap::new();
        for c in chains {
            let b = c.get(i);
            let e = versions.entry(b.map(|b| b.to_record())).or_insert((0, b, b.is_none_or(|b| b.self_hash_valid())));
            e.0 += 1;
        }
        let winner = versions.iter().find(|(_, (count, _, ok))| *ok && threshold.reached_by(*count, n));
        match winner {
            Some((None, _)) => {
                for (node, c) in chains.iter().enumerate() {
                    if !ended[node] && c.len() > i {
                        changes.push((node, i, RepairAction::Removed));
                    }
                }
                break;
            }
            Some((Some(bytes), (_, sample, _))) => {
                let sample = sample.expect("present version has a block");
                for (node, c) in chains.iter().enumerate() {
                    if ended[node] {
                        continue;
                    }
                    match c.get(i) {
                        Some(b) if b.to_record() == *bytes => out[node].push(b.clone()),
                        Some(_) => {
                            out[node].push(sample.clone());
                            changes.push((node, i, RepairAction::Replaced));
                        }
                        None => {
                            out[node].push(sample.clone());
                            changes.push((node, i, RepairAction::Inserted));
                        }
                    }
                }
            }
            None => {
                let best = versions.iter().filter(|(v, (_, _, ok))| v.is_some() && *ok).map(|(_, (c, _, _))| *c).max();
                unrepairable.push((i, best.unwrap_or(0)));
                for (node, c) in chains.iter().enumerate() {
                    match c.get(i) {
                        Some(b) if !ended[node] => out[node].push(b.clone()),
                        _ => ended[node] = true,
                    }
                }
            }
        }
    }
    Vote { chains: out, changes, unrepairable }
}
