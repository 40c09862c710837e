//! The blockchain-tree state machine.
//!
//! The main chain holds the system genesis block (with the initial catalog),
//! one identity block per patient, fiscal-code changes and catalog updates.
//! Each patient identity block anchors two subchains: medical records
//! ("yellow") and access logs ("red"). Every access attempt against a known
//! patient, successful or not, appends exactly one log block; attempts that
//! cannot be tied to a patient go to a separate chain of [`AuditNote`]s.

mod command;
mod verify;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use crate::blocks::{
    AuditNote, Block, BlockCoord, BlockError, CatalogEntry, CatalogPayload, FiscalChange, IdentityBlock, IdentityVariant, LogBlock,
    LogEvent, MedicalBlock, RecordEntry, Edit,
};
use crate::merkle::Digest;

pub use command::{escape, unescape, Command, CommandParseError, Request, Response};
pub use verify::{verify_tree, Check, Violation};

/// `viewed` descriptor of the log written when a patient is onboarded.
pub const VIEWED_ONBOARD: &str = "ONBOARD";
/// `viewed` descriptor of the log written when Subchain 1 is closed.
pub const VIEWED_FINAL: &str = "FINAL";
/// `viewed` descriptor of the log written on a fiscal-code change.
pub const VIEWED_FISCAL_CHANGE: &str = "FISCAL_CHANGE";

#[derive(thiserror::Error, Debug, Clone, PartialEq, Eq)]
pub enum LedgerError {
    #[error("AccessDenied: {0}")]
    AccessDenied(String),
    #[error("DuplicateIdentity: fiscal code {0} is already active")]
    DuplicateIdentity(String),
    #[error("UnknownPatient: no patient {0}")]
    UnknownPatient(u32),
    #[error("SubchainClosed: medical chain of patient {0} is closed")]
    SubchainClosed(u32),
    #[error("UnknownRecordType: {0} is not in the catalog")]
    UnknownRecordType(String),
    #[error("EmptyRecord: a record write needs at least one entry")]
    EmptyRecord,
    #[error("NoChange: patient {0} already has this fiscal code")]
    NoChange(u32),
    #[error("DuplicateCatalogCode: {0}")]
    DuplicateCatalogCode(String),
    #[error("EmptyCatalogUpdate: a catalog update needs at least one entry")]
    EmptyCatalogUpdate,
    #[error("InvalidArgument: {0}")]
    InvalidArgument(String),
    #[error("BrokenLink: {0}")]
    BrokenLink(String),
}

/// Failure of [`LedgerState::tamper`].
#[derive(thiserror::Error, Debug, Clone, PartialEq, Eq)]
pub enum TamperError {
    #[error("NoSuchBlock: {0}")]
    NoSuchBlock(BlockRef),
    #[error(transparent)]
    Field(#[from] BlockError),
}

impl LedgerError {
    /// Stable error name used in logs, transcripts and CLI output.
    pub fn name(&self) -> &'static str {
        match self {
            LedgerError::AccessDenied(_) => "AccessDenied",
            LedgerError::DuplicateIdentity(_) => "DuplicateIdentity",
            LedgerError::UnknownPatient(_) => "UnknownPatient",
            LedgerError::SubchainClosed(_) => "SubchainClosed",
            LedgerError::UnknownRecordType(_) => "UnknownRecordType",
            LedgerError::EmptyRecord => "EmptyRecord",
            LedgerError::NoChange(_) => "NoChange",
            LedgerError::DuplicateCatalogCode(_) => "DuplicateCatalogCode",
            LedgerError::EmptyCatalogUpdate => "EmptyCatalogUpdate",
            LedgerError::InvalidArgument(_) => "InvalidArgument",
            LedgerError::BrokenLink(_) => "BrokenLink",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Role {
    Patient,
    Doctor,
    Authority,
}

impl Role {
    pub fn name(self) -> &'static str {
        match self {
            Role::Patient => "patient",
            Role::Doctor => "doctor",
            Role::Authority => "authority",
        }
    }
}

impl FromStr for Role {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "patient" => Ok(Role::Patient),
            "doctor" => Ok(Role::Doctor),
            "authority" => Ok(Role::Authority),
            other => Err(format!("unknown role `{other}`")),
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Opaque credential stub; real authentication happens elsewhere.
///
/// A patient credential's `actor_id` is the patient's current fiscal code.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Credential {
    pub actor_id: String,
    pub role: Role,
    pub valid: bool,
}

impl Credential {
    pub fn new(actor_id: impl Into<String>, role: Role) -> Self {
        Credential { actor_id: actor_id.into(), role, valid: true }
    }

    pub fn invalid(actor_id: impl Into<String>, role: Role) -> Self {
        Credential { actor_id: actor_id.into(), role, valid: false }
    }
}

/// Who is acting, from where, and (optionally) at which logical tick.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct AccessCtx {
    pub cred: Credential,
    pub place: String,
    /// Lower bound for the timestamp of any block this access creates.
    pub tick: Option<u64>,
}

impl AccessCtx {
    pub fn new(cred: Credential, place: impl Into<String>) -> Self {
        AccessCtx { cred, place: place.into(), tick: None }
    }

    pub fn at(mut self, tick: u64) -> Self {
        self.tick = Some(tick);
        self
    }
}

/// A record entry as supplied by a writer, before backlinks are resolved.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct EntryInput {
    pub record_type: String,
    pub payload: Vec<u8>,
}

impl EntryInput {
    pub fn new(record_type: impl Into<String>, payload: impl Into<Vec<u8>>) -> Self {
        EntryInput { record_type: record_type.into(), payload: payload.into() }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum ReadQuery {
    /// Entries of the newest non-final medical block.
    Latest,
    /// Entries of this type in the newest block holding that type.
    Type(String),
}

/// Address of a block by chain and storage position.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum BlockRef {
    /// Main chain, 0-based height (0 is the system genesis block).
    Main(u32),
    /// Medical chain of `patient`, 1-based record index.
    Yellow { patient: u32, record: u32 },
    /// Log chain of `patient`, 1-based log index.
    Red { patient: u32, log: u32 },
    /// Ledger-level audit note, 1-based sequence number.
    Global(u32),
}

impl BlockRef {
    pub fn chain_name(&self) -> &'static str {
        match self {
            BlockRef::Main(_) => "MAIN",
            BlockRef::Yellow { .. } => "YELLOW",
            BlockRef::Red { .. } => "RED",
            BlockRef::Global(_) => "GLOBAL",
        }
    }

    /// Position text without the chain prefix.
    pub fn position(&self) -> String {
        match self {
            BlockRef::Main(h) => h.to_string(),
            BlockRef::Yellow { patient, record } => format!("{patient}.{record}"),
            BlockRef::Red { patient, log } => format!("{patient}.{log}"),
            BlockRef::Global(s) => s.to_string(),
        }
    }
}

impl fmt::Display for BlockRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let chain = match self {
            BlockRef::Main(_) => "main",
            BlockRef::Yellow { .. } => "yellow",
            BlockRef::Red { .. } => "red",
            BlockRef::Global(_) => "global",
        };
        write!(f, "{chain}/{}", self.position())
    }
}

impl FromStr for BlockRef {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || format!("invalid block reference `{s}` (expected main/H, yellow/P.R, red/P.L or global/S)");
        let (chain, pos) = s.split_once('/').ok_or_else(bad)?;
        let pair = || -> Result<(u32, u32), String> {
            let (a, b) = pos.split_once('.').ok_or_else(bad)?;
            Ok((a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?))
        };
        match chain {
            "main" => Ok(BlockRef::Main(pos.parse().map_err(|_| bad())?)),
            "yellow" => pair().map(|(patient, record)| BlockRef::Yellow { patient, record }),
            "red" => pair().map(|(patient, log)| BlockRef::Red { patient, log }),
            "global" => Ok(BlockRef::Global(pos.parse().map_err(|_| bad())?)),
            _ => Err(bad()),
        }
    }
}

/// The whole tree plus derived bookkeeping.
///
/// `closed`, `catalog_head`, `clock` and `patients` are always recomputable
/// from the chains (see [`LedgerState::from_chains`]).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LedgerState {
    main: Vec<IdentityBlock>,
    yellow: BTreeMap<u32, Vec<MedicalBlock>>,
    red: BTreeMap<u32, Vec<LogBlock>>,
    notes: Vec<AuditNote>,
    closed: BTreeSet<u32>,
    catalog_head: Digest,
    clock: u64,
    patients: u32,
}

/// Catalog installed by `init` when none is given.
pub fn default_catalog() -> Vec<CatalogEntry> {
    vec![
        CatalogEntry::new("blood_test", "Complete blood count"),
        CatalogEntry::new("xray", "Radiography"),
        CatalogEntry::new("diagnosis", "Clinical diagnosis"),
        CatalogEntry::new("prescription", "Prescribed treatment"),
    ]
}

impl LedgerState {
    /// New ledger whose genesis block carries `catalog`.
    pub fn new(catalog: Vec<CatalogEntry>) -> Result<Self, LedgerError> {
        if catalog.is_empty() {
            return Err(LedgerError::EmptyCatalogUpdate);
        }
        check_unique_codes(&catalog, &BTreeMap::new())?;
        let genesis = IdentityBlock::genesis(catalog);
        Ok(Self::from_chains(vec![genesis], BTreeMap::new(), BTreeMap::new(), Vec::new()))
    }

    /// Rebuilds derived state from raw chains. Performs no verification.
    pub fn from_chains(
        main: Vec<IdentityBlock>,
        yellow: BTreeMap<u32, Vec<MedicalBlock>>,
        red: BTreeMap<u32, Vec<LogBlock>>,
        notes: Vec<AuditNote>,
    ) -> Self {
        let mut s = LedgerState {
            main,
            yellow,
            red,
            notes,
            closed: BTreeSet::new(),
            catalog_head: Digest::ZERO,
            clock: 0,
            patients: 0,
        };
        s.recompute_derived();
        s
    }

    pub(crate) fn recompute_derived(&mut self) {
        self.patients = self.main.iter().filter(|b| b.variant == IdentityVariant::Patient).count() as u32;
        self.catalog_head =
            self.main.iter().rev().find(|b| b.variant.is_catalog()).map_or(Digest::ZERO, |b| b.self_hash);
        self.closed = self
            .yellow
            .iter()
            .filter(|(_, chain)| chain.last().is_some_and(|b| b.is_final))
            .map(|(p, _)| *p)
            .collect();
        let red_max = self.red.values().flatten().map(|l| l.timestamp).max().unwrap_or(0);
        let note_max = self.notes.iter().map(|n| n.timestamp).max().unwrap_or(0);
        self.clock = red_max.max(note_max);
    }

    pub fn main_chain(&self) -> &[IdentityBlock] {
        &self.main
    }

    pub fn yellow(&self, patient: u32) -> &[MedicalBlock] {
        self.yellow.get(&patient).map_or(&[], Vec::as_slice)
    }

    pub fn red(&self, patient: u32) -> &[LogBlock] {
        self.red.get(&patient).map_or(&[], Vec::as_slice)
    }

    pub fn yellow_chains(&self) -> &BTreeMap<u32, Vec<MedicalBlock>> {
        &self.yellow
    }

    pub fn red_chains(&self) -> &BTreeMap<u32, Vec<LogBlock>> {
        &self.red
    }

    pub fn audit_notes(&self) -> &[AuditNote] {
        &self.notes
    }

    pub fn closed(&self) -> &BTreeSet<u32> {
        &self.closed
    }

    pub fn is_closed(&self, patient: u32) -> bool {
        self.closed.contains(&patient)
    }

    pub fn catalog_head(&self) -> Digest {
        self.catalog_head
    }

    pub fn clock(&self) -> u64 {
        self.clock
    }

    pub fn patient_count(&self) -> u32 {
        self.patients
    }

    pub fn patient_exists(&self, patient: u32) -> bool {
        patient >= 1 && patient <= self.patients
    }

    /// Identity blocks of `patient` in main-chain order: the onboarding block
    /// followed by each fiscal-code change.
    pub fn identity_lineage(&self, patient: u32) -> Vec<&IdentityBlock> {
        self.main.iter().filter(|b| b.variant.is_identity() && b.coord.patient == patient).collect()
    }

    pub fn current_identity(&self, patient: u32) -> Option<&IdentityBlock> {
        self.main.iter().rev().find(|b| b.variant.is_identity() && b.coord.patient == patient)
    }

    /// Patient whose current fiscal code is `code`.
    pub fn patient_by_code(&self, code: &str) -> Option<u32> {
        (1..=self.patients).find(|p| self.current_identity(*p).is_some_and(|b| b.fiscal_code == code))
    }

    /// Union of all catalog lists, code → label.
    pub fn active_catalog(&self) -> BTreeMap<String, String> {
        self.main
            .iter()
            .filter(|b| b.variant.is_catalog())
            .filter_map(|b| b.catalog.as_ref())
            .flat_map(|c| c.entries.iter().map(|e| (e.code.clone(), e.label.clone())))
            .collect()
    }

    /// Catalog blocks reached by following `prev_catalog` links from the head.
    pub fn catalog_chain(&self) -> Vec<&IdentityBlock> {
        let by_hash: HashMap<Digest, &IdentityBlock> =
            self.main.iter().filter(|b| b.variant.is_catalog()).map(|b| (b.self_hash, b)).collect();
        let mut out = Vec::new();
        let mut cursor = Some(self.catalog_head);
        while let Some(h) = cursor {
            let Some(b) = by_hash.get(&h) else { break };
            out.push(*b);
            cursor = b.catalog.as_ref().and_then(|c| c.prev_catalog);
            if out.len() > self.main.len() {
                break;
            }
        }
        out
    }

    pub fn block(&self, r: BlockRef) -> Option<&dyn Block> {
        match r {
            BlockRef::Main(h) => self.main.get(h as usize).map(|b| b as &dyn Block),
            BlockRef::Yellow { patient, record } => {
                record.checked_sub(1).and_then(|i| self.yellow(patient).get(i as usize)).map(|b| b as &dyn Block)
            }
            BlockRef::Red { patient, log } => {
                log.checked_sub(1).and_then(|i| self.red(patient).get(i as usize)).map(|b| b as &dyn Block)
            }
            BlockRef::Global(s) => s.checked_sub(1).and_then(|i| self.notes.get(i as usize)).map(|b| b as &dyn Block),
        }
    }

    /// Mutable access that bypasses every check. Derived state is not
    /// refreshed; callers that change chain shape must call
    /// [`LedgerState::recompute_derived`].
    pub(crate) fn block_mut(&mut self, r: BlockRef) -> Option<&mut dyn Block> {
        match r {
            BlockRef::Main(h) => self.main.get_mut(h as usize).map(|b| b as &mut dyn Block),
            BlockRef::Yellow { patient, record } => record
                .checked_sub(1)
                .and_then(|i| self.yellow.get_mut(&patient)?.get_mut(i as usize))
                .map(|b| b as &mut dyn Block),
            BlockRef::Red { patient, log } => log
                .checked_sub(1)
                .and_then(|i| self.red.get_mut(&patient)?.get_mut(i as usize))
                .map(|b| b as &mut dyn Block),
            BlockRef::Global(s) => {
                s.checked_sub(1).and_then(|i| self.notes.get_mut(i as usize)).map(|b| b as &mut dyn Block)
            }
        }
    }

    /// Edits one field of one block in place, bypassing every check. The
    /// stored self hash is left as is unless the edited field is `self_hash`.
    pub fn tamper(&mut self, r: BlockRef, field: &str, edit: &Edit) -> Result<(), TamperError> {
        self.block_mut(r).ok_or(TamperError::NoSuchBlock(r))?.edit_field(field, edit)?;
        self.recompute_derived();
        Ok(())
    }

    /// Every block address currently present, in a fixed order.
    pub fn block_refs(&self) -> Vec<BlockRef> {
        let mut out: Vec<BlockRef> = (0..self.main.len() as u32).map(BlockRef::Main).collect();
        for (p, chain) in &self.yellow {
            out.extend((1..=chain.len() as u32).map(|record| BlockRef::Yellow { patient: *p, record }));
        }
        for (p, chain) in &self.red {
            out.extend((1..=chain.len() as u32).map(|log| BlockRef::Red { patient: *p, log }));
        }
        out.extend((1..=self.notes.len() as u32).map(BlockRef::Global));
        out
    }

    pub(crate) fn chains_mut(
        &mut self,
    ) -> (
        &mut Vec<IdentityBlock>,
        &mut BTreeMap<u32, Vec<MedicalBlock>>,
        &mut BTreeMap<u32, Vec<LogBlock>>,
        &mut Vec<AuditNote>,
    ) {
        (&mut self.main, &mut self.yellow, &mut self.red, &mut self.notes)
    }

    fn next_tick(&mut self, ctx: &AccessCtx) -> u64 {
        let t = (self.clock + 1).max(ctx.tick.unwrap_or(0));
        self.clock = t;
        t
    }

    fn main_tip(&self) -> Digest {
        self.main.last().expect("genesis always present").self_hash
    }

    /// Newest medical block of `patient` as (index, hash).
    fn latest_yellow(&self, patient: u32) -> (Option<u32>, Digest) {
        let chain = self.yellow(patient);
        match chain.last() {
            Some(b) => (Some(chain.len() as u32), b.self_hash),
            None => (None, Digest::ZERO),
        }
    }

    fn append_log(&mut self, ctx: &AccessCtx, patient: u32, event: LogEvent, viewed: String, record: Option<u32>, h_yellow: Digest) -> LogBlock {
        let timestamp = self.next_tick(ctx);
        let identity = self.current_identity(patient).expect("patient exists").self_hash;
        let chain = self.red.entry(patient).or_default();
        let h_prev_red = chain.last().map_or(identity, |l| l.self_hash);
        let mut log = LogBlock {
            coord: BlockCoord::log(patient, record, chain.len() as u32 + 1),
            event,
            actor: ctx.cred.actor_id.clone(),
            timestamp,
            place: ctx.place.clone(),
            viewed,
            h_main: identity,
            h_yellow,
            h_prev_red,
            self_hash: Digest::ZERO,
        };
        log.seal();
        chain.push(log.clone());
        log
    }

    /// Appends a failed-attempt log for a known patient and hands back `err`.
    fn fail_patient(&mut self, ctx: &AccessCtx, patient: u32, op: &str, err: LedgerError) -> LedgerError {
        let (record, h_yellow) = self.latest_yellow(patient);
        self.append_log(ctx, patient, LogEvent::FailedAttempt, format!("{op} {}", err.name()), record, h_yellow);
        err
    }

    /// Records a failure that has no patient chain to go to.
    fn fail_global(&mut self, ctx: &AccessCtx, target: u32, op: &str, err: LedgerError) -> LedgerError {
        let timestamp = self.next_tick(ctx);
        let prev = self.notes.last().map_or(Digest::ZERO, |n| n.self_hash);
        let mut note = AuditNote {
            coord: BlockCoord::log(target, None, self.notes.len() as u32 + 1),
            timestamp,
            actor: ctx.cred.actor_id.clone(),
            place: ctx.place.clone(),
            operation: op.to_string(),
            reason: err.name().to_string(),
            prev,
            self_hash: Digest::ZERO,
        };
        note.seal();
        self.notes.push(note);
        err
    }

    fn require_patient(&mut self, ctx: &AccessCtx, patient: u32, op: &str) -> Result<(), LedgerError> {
        if self.patient_exists(patient) {
            Ok(())
        } else {
            Err(self.fail_global(ctx, patient, op, LedgerError::UnknownPatient(patient)))
        }
    }

    fn can_read(&self, cred: &Credential, patient: u32) -> bool {
        cred.valid
            && match cred.role {
                Role::Doctor | Role::Authority => true,
                Role::Patient => self.current_identity(patient).is_some_and(|b| b.fiscal_code == cred.actor_id),
            }
    }

    /// Adds a patient identity block to the main chain and returns the new
    /// patient index. The identity block is the genesis of both subchains;
    /// the registration itself is the first entry of the patient's log chain.
    pub fn onboard_patient(&mut self, ctx: &AccessCtx, fiscal_code: &str, personal_info: BTreeMap<String, String>) -> Result<u32, LedgerError> {
        const OP: &str = "onboard";
        if !ctx.cred.valid {
            return Err(self.fail_global(ctx, 0, OP, LedgerError::AccessDenied("invalid credential".into())));
        }
        if fiscal_code.is_empty() {
            return Err(self.fail_global(ctx, 0, OP, LedgerError::InvalidArgument("empty fiscal code".into())));
        }
        if self.patient_by_code(fiscal_code).is_some() {
            return Err(self.fail_global(ctx, 0, OP, LedgerError::DuplicateIdentity(fiscal_code.to_string())));
        }
        let patient = self.patients + 1;
        let mut block = IdentityBlock {
            coord: BlockCoord::main(patient),
            fiscal_code: fiscal_code.to_string(),
            personal_info,
            prev_main: self.main_tip(),
            variant: IdentityVariant::Patient,
            fiscal_change: None,
            catalog: None,
            self_hash: Digest::ZERO,
        };
        block.seal();
        self.main.push(block);
        self.patients = patient;
        self.yellow.entry(patient).or_default();
        self.append_log(ctx, patient, LogEvent::Write, VIEWED_ONBOARD.to_string(), None, Digest::ZERO);
        Ok(patient)
    }

    /// Appends one medical block and its write log.
    pub fn write_record(&mut self, ctx: &AccessCtx, patient: u32, entries: Vec<EntryInput>) -> Result<(MedicalBlock, LogBlock), LedgerError> {
        const OP: &str = "write";
        self.require_patient(ctx, patient, OP)?;
        if !ctx.cred.valid || ctx.cred.role != Role::Doctor {
            return Err(self.fail_patient(ctx, patient, OP, LedgerError::AccessDenied("doctor credential required".into())));
        }
        if self.is_closed(patient) {
            return Err(self.fail_patient(ctx, patient, OP, LedgerError::SubchainClosed(patient)));
        }
        if entries.is_empty() {
            return Err(self.fail_patient(ctx, patient, OP, LedgerError::EmptyRecord));
        }
        let catalog = self.active_catalog();
        if let Some(bad) = entries.iter().find(|e| !catalog.contains_key(&e.record_type)) {
            let err = LedgerError::UnknownRecordType(bad.record_type.clone());
            return Err(self.fail_patient(ctx, patient, OP, err));
        }

        let chain = self.yellow(patient);
        let record_entries: Vec<RecordEntry> = entries
            .into_iter()
            .map(|e| {
                let prev_same_type = chain
                    .iter()
                    .rev()
                    .find(|b| b.entries.iter().any(|x| x.record_type == e.record_type))
                    .map(|b| b.self_hash);
                RecordEntry { record_type: e.record_type, payload: e.payload, prev_same_type }
            })
            .collect();
        let types: Vec<&str> = dedup_in_order(record_entries.iter().map(|e| e.record_type.as_str()));
        let viewed = format!("WRITE {}", types.join(","));
        let block = self.append_yellow(patient, record_entries, false);
        let log = self.append_log(ctx, patient, LogEvent::Write, viewed, block.coord.record, block.self_hash);
        Ok((block, log))
    }

    fn append_yellow(&mut self, patient: u32, entries: Vec<RecordEntry>, is_final: bool) -> MedicalBlock {
        let identity = self.current_identity(patient).expect("patient exists").self_hash;
        let chain = self.yellow.entry(patient).or_default();
        let mut block = MedicalBlock {
            coord: BlockCoord::medical(patient, chain.len() as u32 + 1),
            entries,
            prev_yellow: chain.last().map_or(identity, |b| b.self_hash),
            is_final,
            self_hash: Digest::ZERO,
        };
        block.seal();
        chain.push(block.clone());
        if is_final {
            self.closed.insert(patient);
        }
        block
    }

    /// Returns matching entries with their coordinates and logs the read.
    /// Subchain 1 is never modified; closed patients remain readable.
    pub fn read_record(&mut self, ctx: &AccessCtx, patient: u32, query: &ReadQuery) -> Result<(Vec<(BlockCoord, RecordEntry)>, LogBlock), LedgerError> {
        const OP: &str = "read";
        self.require_patient(ctx, patient, OP)?;
        if !self.can_read(&ctx.cred, patient) {
            return Err(self.fail_patient(ctx, patient, OP, LedgerError::AccessDenied("read not permitted".into())));
        }
        let chain = self.yellow(patient);
        let (found, viewed) = match query {
            ReadQuery::Latest => {
                let found = chain
                    .iter()
                    .rev()
                    .find(|b| !b.is_final)
                    .map(|b| b.entries.iter().map(|e| (b.coord, e.clone())).collect())
                    .unwrap_or_default();
                (found, "READ latest".to_string())
            }
            ReadQuery::Type(t) => {
                let found = chain
                    .iter()
                    .rev()
                    .find(|b| b.entries.iter().any(|e| &e.record_type == t))
                    .map(|b| b.entries.iter().filter(|e| &e.record_type == t).map(|e| (b.coord, e.clone())).collect())
                    .unwrap_or_default();
                (found, format!("READ type={t}"))
            }
        };
        let (record, h_yellow) = self.latest_yellow(patient);
        let log = self.append_log(ctx, patient, LogEvent::Read, viewed, record, h_yellow);
        Ok((found, log))
    }

    /// Walks the same-type backlinks from the newest entry of `record_type`
    /// and returns `(coord, payload)` newest first. One log block covers the
    /// whole report.
    pub fn assemble_report(&mut self, ctx: &AccessCtx, patient: u32, record_type: &str) -> Result<(Vec<(BlockCoord, Vec<u8>)>, LogBlock), LedgerError> {
        const OP: &str = "report";
        self.require_patient(ctx, patient, OP)?;
        if !self.can_read(&ctx.cred, patient) {
            return Err(self.fail_patient(ctx, patient, OP, LedgerError::AccessDenied("read not permitted".into())));
        }
        let traversal = report_traversal(self.yellow(patient), record_type);
        let (record, h_yellow) = self.latest_yellow(patient);
        let log = self.append_log(ctx, patient, LogEvent::Read, format!("REPORT type={record_type}"), record, h_yellow);
        traversal.map(|items| (items, log))
    }

    /// Appends the Final Block, after which Subchain 1 accepts no writes.
    pub fn close_subchain(&mut self, ctx: &AccessCtx, patient: u32) -> Result<(MedicalBlock, LogBlock), LedgerError> {
        const OP: &str = "close";
        self.require_patient(ctx, patient, OP)?;
        if !ctx.cred.valid || ctx.cred.role != Role::Authority {
            return Err(self.fail_patient(ctx, patient, OP, LedgerError::AccessDenied("authority credential required".into())));
        }
        if self.is_closed(patient) {
            return Err(self.fail_patient(ctx, patient, OP, LedgerError::SubchainClosed(patient)));
        }
        let block = self.append_yellow(patient, Vec::new(), true);
        let log = self.append_log(ctx, patient, LogEvent::Write, VIEWED_FINAL.to_string(), block.coord.record, block.self_hash);
        Ok((block, log))
    }

    /// Appends a fiscal-change identity block linking the old code, the new
    /// code and the previous identity block. Later subchain blocks of the
    /// patient cross-hash against the new block; nothing is rewritten.
    pub fn change_fiscal_code(&mut self, ctx: &AccessCtx, patient: u32, new_code: &str) -> Result<(IdentityBlock, LogBlock), LedgerError> {
        const OP: &str = "change-code";
        self.require_patient(ctx, patient, OP)?;
        if !ctx.cred.valid || ctx.cred.role != Role::Authority {
            return Err(self.fail_patient(ctx, patient, OP, LedgerError::AccessDenied("authority credential required".into())));
        }
        let current = self.current_identity(patient).expect("patient exists").clone();
        if current.fiscal_code == new_code {
            return Err(self.fail_patient(ctx, patient, OP, LedgerError::NoChange(patient)));
        }
        if new_code.is_empty() {
            return Err(self.fail_patient(ctx, patient, OP, LedgerError::InvalidArgument("empty fiscal code".into())));
        }
        if self.patient_by_code(new_code).is_some() {
            return Err(self.fail_patient(ctx, patient, OP, LedgerError::DuplicateIdentity(new_code.to_string())));
        }
        let mut block = IdentityBlock {
            coord: BlockCoord::main(patient),
            fiscal_code: new_code.to_string(),
            personal_info: current.personal_info.clone(),
            prev_main: self.main_tip(),
            variant: IdentityVariant::FiscalChange,
            fiscal_change: Some(FiscalChange {
                new_code: new_code.to_string(),
                old_code: current.fiscal_code.clone(),
                prev_identity: current.self_hash,
            }),
            catalog: None,
            self_hash: Digest::ZERO,
        };
        block.seal();
        self.main.push(block.clone());
        let (record, h_yellow) = self.latest_yellow(patient);
        let log = self.append_log(ctx, patient, LogEvent::Write, VIEWED_FISCAL_CHANGE.to_string(), record, h_yellow);
        Ok((block, log))
    }

    /// Appends a catalog block extending the active list of tests and
    /// illnesses; it links back to the previous catalog block.
    pub fn update_catalog(&mut self, ctx: &AccessCtx, new_entries: Vec<CatalogEntry>) -> Result<IdentityBlock, LedgerError> {
        const OP: &str = "catalog-add";
        if !ctx.cred.valid || ctx.cred.role != Role::Authority {
            return Err(self.fail_global(ctx, 0, OP, LedgerError::AccessDenied("authority credential required".into())));
        }
        if new_entries.is_empty() {
            return Err(self.fail_global(ctx, 0, OP, LedgerError::EmptyCatalogUpdate));
        }
        if let Err(e) = check_unique_codes(&new_entries, &self.active_catalog()) {
            return Err(self.fail_global(ctx, 0, OP, e));
        }
        let mut block = IdentityBlock {
            coord: BlockCoord::main(0),
            fiscal_code: String::new(),
            personal_info: BTreeMap::new(),
            prev_main: self.main_tip(),
            variant: IdentityVariant::Catalog,
            fiscal_change: None,
            catalog: Some(CatalogPayload { entries: new_entries, prev_catalog: Some(self.catalog_head) }),
            self_hash: Digest::ZERO,
        };
        block.seal();
        self.catalog_head = block.self_hash;
        self.main.push(block.clone());
        Ok(block)
    }
}

fn check_unique_codes(entries: &[CatalogEntry], existing: &BTreeMap<String, String>) -> Result<(), LedgerError> {
    let mut seen = BTreeSet::new();
    for e in entries {
        if e.code.is_empty() {
            return Err(LedgerError::InvalidArgument("empty catalog code".into()));
        }
        if existing.contains_key(&e.code) || !seen.insert(e.code.as_str()) {
            return Err(LedgerError::DuplicateCatalogCode(e.code.clone()));
        }
    }
    Ok(())
}

fn dedup_in_order<'a>(items: impl Iterator<Item = &'a str>) -> Vec<&'a str> {
    let mut out: Vec<&str> = Vec::new();
    for it in items {
        if !out.contains(&it) {
            out.push(it);
        }
    }
    out
}

/// Link-following report traversal over one medical chain.
fn report_traversal(chain: &[MedicalBlock], record_type: &str) -> Result<Vec<(BlockCoord, Vec<u8>)>, LedgerError> {
    let by_hash: HashMap<Digest, &MedicalBlock> = chain.iter().map(|b| (b.self_hash, b)).collect();
    let has_type = |b: &MedicalBlock| b.entries.iter().any(|e| e.record_type == record_type);

    // Read blocks from the newest until one holds the requested type.
    let mut cursor = chain.iter().rev().find(|b| has_type(b));
    let mut out = Vec::new();
    let mut hops = 0usize;
    while let Some(block) = cursor {
        hops += 1;
        if hops > chain.len() {
            return Err(LedgerError::BrokenLink(format!("cycle in {record_type} links")));
        }
        let mut link = None;
        for e in block.entries.iter().rev().filter(|e| e.record_type == record_type) {
            out.push((block.coord, e.payload.clone()));
            link = link.or(Some(e.prev_same_type));
        }
        cursor = match link.flatten() {
            None => None,
            Some(h) => match by_hash.get(&h) {
                Some(b) if has_type(b) => Some(*b),
                _ => return Err(LedgerError::BrokenLink(format!("{record_type} link from {} is dangling", block.coord))),
            },
        };
    }
    Ok(out)
}
