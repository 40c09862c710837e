//! Whole-tree integrity check.
//!
//! A reference (chain link or cross-hash) holds only if it equals the
//! referenced block's recomputed hash *and* that block's stored seal is
//! intact. Once a chain has a failing block, every later block of that chain
//! that has no failure of its own is reported as unanchored.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use super::{BlockRef, LedgerState};
use crate::blocks::{Block, BlockCoord, IdentityBlock, IdentityVariant, LogEvent, MedicalBlock};
use crate::merkle::Digest;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Check {
    /// Stored self hash differs from the recomputed block hash.
    SelfHash,
    /// Previous-block link of the chain is wrong.
    Link,
    /// Block is intact but descends from a broken block.
    Unanchored,
    /// Coordinate does not match the block's position.
    Coord,
    /// Genesis block malformed.
    Genesis,
    /// Variant and payload disagree.
    Variant,
    FiscalLink,
    CatalogLink,
    /// Final-block rules.
    Final,
    /// Same-type backlink of a record entry is wrong.
    TypeLink,
    /// Record type outside the active catalog.
    Catalog,
    CrossMain,
    CrossYellow,
    CrossPrevRed,
    /// Timestamps not strictly increasing.
    Order,
    /// Subchain without a matching patient.
    Orphan,
    /// Medical block without the write log that records its creation.
    Coupling,
    /// Patient without its log chain.
    Missing,
}

impl Check {
    pub fn name(self) -> &'static str {
        match self {
            Check::SelfHash => "SELF_HASH",
            Check::Link => "LINK",
            Check::Unanchored => "UNANCHORED",
            Check::Coord => "COORD",
            Check::Genesis => "GENESIS",
            Check::Variant => "VARIANT",
            Check::FiscalLink => "FISCAL_LINK",
            Check::CatalogLink => "CATALOG_LINK",
            Check::Final => "FINAL",
            Check::TypeLink => "TYPE_LINK",
            Check::Catalog => "CATALOG",
            Check::CrossMain => "CROSS_MAIN",
            Check::CrossYellow => "CROSS_YELLOW",
            Check::CrossPrevRed => "CROSS_PREV_RED",
            Check::Order => "ORDER",
            Check::Orphan => "ORPHAN",
            Check::Coupling => "COUPLING",
            Check::Missing => "MISSING",
        }
    }

    pub fn is_cross_hash(self) -> bool {
        matches!(self, Check::CrossMain | Check::CrossYellow | Check::CrossPrevRed)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Violation {
    pub block: BlockRef,
    pub check: Check,
    pub detail: String,
}

impl fmt::Display for Violation {
    /// `CHAIN coord CHECK detail`
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {} {}", self.block.chain_name(), self.block.position(), self.check.name(), self.detail)
    }
}

/// A reference is sound iff it names the parent's true hash and the parent's
/// own seal is intact.
fn sound(reference: &Digest, parent: &dyn Block) -> bool {
    let h = parent.block_hash();
    *reference == h && parent.self_hash() == h
}

struct Collector {
    out: Vec<Violation>,
}

impl Collector {
    fn push(&mut self, block: BlockRef, check: Check, detail: impl Into<String>) {
        self.out.push(Violation { block, check, detail: detail.into() });
    }

    /// Runs `check_one` over positions `0..len` and adds unanchored entries
    /// after the first failing position.
    fn chain(&mut self, len: usize, at: impl Fn(usize) -> BlockRef, mut check_one: impl FnMut(&mut Self, usize)) {
        let mut broken: Option<BlockRef> = None;
        for i in 0..len {
            let before = self.out.len();
            check_one(self, i);
            let failed = self.out.len() > before;
            match (failed, broken) {
                (true, None) => broken = Some(at(i)),
                (false, Some(origin)) => self.push(at(i), Check::Unanchored, format!("descends from broken {origin}")),
                _ => {}
            }
        }
    }
}

/// Checks every link and cross-hash in the tree. Empty iff intact.
pub fn verify_tree(state: &LedgerState) -> Vec<Violation> {
    let mut c = Collector { out: Vec::new() };
    let main = state.main_chain();

    // Identity lineage per patient, as (block, main height), in main order.
    let mut lineage: BTreeMap<u32, Vec<&IdentityBlock>> = BTreeMap::new();
    let mut patients_seen = 0u32;
    let mut catalog_codes: BTreeSet<&str> = BTreeSet::new();

    c.chain(main.len(), |i| BlockRef::Main(i as u32), |c, i| {
        let b = &main[i];
        let at = BlockRef::Main(i as u32);
        if !b.self_hash_valid() {
            c.push(at, Check::SelfHash, format!("stored {} computed {}", b.self_hash, b.block_hash()));
        }
        if b.coord.record.is_some() || b.coord.log.is_some() {
            c.push(at, Check::Coord, format!("main block carries subchain coordinate {}", b.coord));
        }
        if i == 0 {
            let ok = b.variant == IdentityVariant::SystemGenesis
                && b.prev_main.is_zero()
                && b.coord.patient == 0
                && b.fiscal_change.is_none()
                && b.catalog.as_ref().is_some_and(|cat| !cat.entries.is_empty() && cat.prev_catalog.is_none());
            if !ok {
                c.push(at, Check::Genesis, "first main block is not a well-formed system genesis");
            }
        } else {
            if !sound(&b.prev_main, &main[i - 1]) {
                c.push(at, Check::Link, "prev_main does not match block below");
            }
            if b.variant == IdentityVariant::SystemGenesis {
                c.push(at, Check::Variant, "system genesis above height 0");
            }
        }
        match b.variant {
            IdentityVariant::SystemGenesis | IdentityVariant::Catalog => {
                if b.coord.patient != 0 || b.fiscal_change.is_some() || !b.fiscal_code.is_empty() || !b.personal_info.is_empty() {
                    c.push(at, Check::Variant, "catalog block carries patient data");
                }
                match &b.catalog {
                    None => c.push(at, Check::Variant, "catalog block without catalog payload"),
                    Some(cat) => {
                        if cat.entries.is_empty() {
                            c.push(at, Check::Variant, "catalog block with empty list");
                        }
                        for e in &cat.entries {
                            if e.code.is_empty() || !catalog_codes.insert(e.code.as_str()) {
                                c.push(at, Check::Catalog, format!("duplicate or empty catalog code {:?}", e.code));
                            }
                        }
                        if b.variant == IdentityVariant::Catalog {
                            let prev = main[..i].iter().rev().find(|x| x.variant.is_catalog());
                            let ok = match (cat.prev_catalog, prev) {
                                (Some(h), Some(p)) => sound(&h, p),
                                _ => false,
                            };
                            if !ok {
                                c.push(at, Check::CatalogLink, "prev_catalog does not match previous catalog block");
                            }
                        }
                    }
                }
            }
            IdentityVariant::Patient => {
                if b.fiscal_change.is_some() || b.catalog.is_some() || b.fiscal_code.is_empty() {
                    c.push(at, Check::Variant, "patient block with foreign payload or empty code");
                }
                if b.coord.patient != patients_seen + 1 {
                    c.push(at, Check::Coord, format!("expected patient {} got {}", patients_seen + 1, b.coord.patient));
                }
                patients_seen += 1;
                lineage.entry(b.coord.patient).or_default().push(b);
            }
            IdentityVariant::FiscalChange => {
                let prev = lineage.get(&b.coord.patient).and_then(|l| l.last().copied());
                match (&b.fiscal_change, prev) {
                    (Some(fc), Some(prev)) if b.catalog.is_none() => {
                        if fc.new_code != b.fiscal_code || fc.old_code == fc.new_code || fc.old_code != prev.fiscal_code {
                            c.push(at, Check::Variant, "fiscal change codes inconsistent");
                        }
                        if !sound(&fc.prev_identity, prev) {
                            c.push(at, Check::FiscalLink, "prev_identity does not match previous identity block");
                        }
                    }
                    (_, None) => c.push(at, Check::Coord, format!("fiscal change for unknown patient {}", b.coord.patient)),
                    _ => c.push(at, Check::Variant, "fiscal change block without its payload"),
                }
                lineage.entry(b.coord.patient).or_default().push(b);
            }
        }
    });

    // Codes must stay unique across every catalog list; the active set is
    // needed for record-type checks below.
    let patients = patients_seen;
    let lineage_pos = |p: u32, h: &Digest| -> Option<usize> {
        lineage.get(&p).and_then(|l| l.iter().position(|b| sound(h, *b)))
    };

    for (&p, chain) in state.yellow_chains() {
        if (p == 0 || p > patients)
            && !chain.is_empty() {
                c.push(BlockRef::Yellow { patient: p, record: 1 }, Check::Orphan, format!("no patient {p}"));
            }
        let at = |j: usize| BlockRef::Yellow { patient: p, record: j as u32 + 1 };
        c.chain(chain.len(), at, |c, j| {
            let b = &chain[j];
            if !b.self_hash_valid() {
                c.push(at(j), Check::SelfHash, format!("stored {} computed {}", b.self_hash, b.block_hash()));
            }
            if b.coord != BlockCoord::medical(p, j as u32 + 1) {
                c.push(at(j), Check::Coord, format!("block claims {}", b.coord));
            }
            let link_ok = if j == 0 { lineage_pos(p, &b.prev_yellow).is_some() } else { sound(&b.prev_yellow, &chain[j - 1]) };
            if !link_ok {
                c.push(at(j), Check::Link, if j == 0 { "prev_yellow is not an identity block of the patient" } else { "prev_yellow does not match block below" });
            }
            if b.is_final && (!b.entries.is_empty() || j + 1 != chain.len()) {
                c.push(at(j), Check::Final, "final block must be empty and last");
            }
            if !b.is_final && b.entries.is_empty() {
                c.push(at(j), Check::Final, "non-final block without entries");
            }
            for (k, e) in b.entries.iter().enumerate() {
                if !catalog_codes.contains(e.record_type.as_str()) {
                    c.push(at(j), Check::Catalog, format!("entry {k} type {:?} not in catalog", e.record_type));
                }
                let expected = chain[..j].iter().rev().find(|x| x.entries.iter().any(|y| y.record_type == e.record_type));
                let ok = match (e.prev_same_type, expected) {
                    (None, None) => true,
                    (Some(h), Some(x)) => sound(&h, x as &MedicalBlock),
                    _ => false,
                };
                if !ok {
                    c.push(at(j), Check::TypeLink, format!("entry {k} same-type backlink is wrong"));
                }
            }
        });
    }

    for p in 1..=patients {
        if state.red(p).is_empty() {
            c.push(BlockRef::Red { patient: p, log: 1 }, Check::Missing, "patient has no log chain");
        }
    }

    for (&p, chain) in state.red_chains() {
        if (p == 0 || p > patients)
            && !chain.is_empty() {
                c.push(BlockRef::Red { patient: p, log: 1 }, Check::Orphan, format!("no patient {p}"));
            }
        let yellow = state.yellow(p);
        let at = |k: usize| BlockRef::Red { patient: p, log: k as u32 + 1 };
        let mut generation = 0usize;
        c.chain(chain.len(), at, |c, k| {
            let l = &chain[k];
            if !l.self_hash_valid() {
                c.push(at(k), Check::SelfHash, format!("stored {} computed {}", l.self_hash, l.block_hash()));
            }
            let record_ok = l.coord.record.is_none_or(|r| r >= 1 && r as usize <= yellow.len());
            if l.coord.patient != p || l.coord.log != Some(k as u32 + 1) || !record_ok {
                c.push(at(k), Check::Coord, format!("block claims {}", l.coord));
            }
            match lineage_pos(p, &l.h_main) {
                Some(g) if g >= generation => generation = g,
                Some(_) => c.push(at(k), Check::CrossMain, "h_main points to a superseded identity"),
                None => c.push(at(k), Check::CrossMain, "h_main is not an identity block of the patient"),
            }
            let yellow_ok = match l.coord.record {
                None => l.h_yellow.is_zero(),
                Some(r) => (r as usize).checked_sub(1).and_then(|i| yellow.get(i)).is_some_and(|y| sound(&l.h_yellow, y)),
            };
            if !yellow_ok {
                c.push(at(k), Check::CrossYellow, "h_yellow does not match the referenced medical block");
            }
            let prev_ok = if k == 0 { lineage_pos(p, &l.h_prev_red).is_some() } else { sound(&l.h_prev_red, &chain[k - 1]) };
            if !prev_ok {
                c.push(at(k), Check::CrossPrevRed, "h_prev_red does not match the previous log block");
            }
            if k > 0 && l.timestamp <= chain[k - 1].timestamp {
                c.push(at(k), Check::Order, format!("timestamp {} not after {}", l.timestamp, chain[k - 1].timestamp));
            }
        });
    }

    for (&p, chain) in state.yellow_chains() {
        let logged: BTreeSet<u32> =
            state.red(p).iter().filter(|l| l.event == LogEvent::Write).filter_map(|l| l.coord.record).collect();
        for j in 1..=chain.len() as u32 {
            if !logged.contains(&j) {
                c.push(BlockRef::Yellow { patient: p, record: j }, Check::Coupling, "no write log references this block");
            }
        }
    }

    let notes = state.audit_notes();
    c.chain(notes.len(), |i| BlockRef::Global(i as u32 + 1), |c, i| {
        let n = &notes[i];
        let at = BlockRef::Global(i as u32 + 1);
        if !n.self_hash_valid() {
            c.push(at, Check::SelfHash, format!("stored {} computed {}", n.self_hash, n.block_hash()));
        }
        if n.coord.record.is_some() || n.coord.log != Some(i as u32 + 1) {
            c.push(at, Check::Coord, format!("note claims {}", n.coord));
        }
        let link_ok = if i == 0 { n.prev.is_zero() } else { sound(&n.prev, &notes[i - 1]) };
        if !link_ok {
            c.push(at, Check::Link, "prev does not match previous note");
        }
        if i > 0 && n.timestamp <= notes[i - 1].timestamp {
            c.push(at, Check::Order, format!("timestamp {} not after {}", n.timestamp, notes[i - 1].timestamp));
        }
    });

    c.out
}
