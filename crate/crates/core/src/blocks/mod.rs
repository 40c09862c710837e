//! Block types of the three chains, their canonical encoding and hashing.
//!
//! Every block splits into three field groups (kind + coordinate, payload
//! fields, link fields). The canonical encoding is the concatenation of the
//! three groups, and the block hash is the Merkle root over them. The stored
//! `self_hash` is never part of the canonical bytes.

mod codec;
mod edit;

use std::collections::BTreeMap;
use std::fmt;

pub use codec::DecodeError;
pub use edit::{BlockError, Edit};

use crate::merkle::{self, Digest};
use codec::{Reader, Writer};

pub const TAG_IDENTITY: u8 = 0x01;
pub const TAG_MEDICAL: u8 = 0x02;
pub const TAG_LOG: u8 = 0x03;
pub const TAG_AUDIT_NOTE: u8 = 0x04;

/// Position of a block in the tree: `patient`, then the medical-record
/// index and the log index for subchain blocks. Indices are 1-based;
/// patient 0 is reserved for system blocks (genesis and catalog updates).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct BlockCoord {
    pub patient: u32,
    pub record: Option<u32>,
    pub log: Option<u32>,
}

impl BlockCoord {
    pub fn main(patient: u32) -> Self {
        BlockCoord { patient, record: None, log: None }
    }

    pub fn medical(patient: u32, record: u32) -> Self {
        BlockCoord { patient, record: Some(record), log: None }
    }

    pub fn log(patient: u32, record: Option<u32>, log: u32) -> Self {
        BlockCoord { patient, record, log: Some(log) }
    }

    fn encode(&self, w: &mut Writer) {
        w.u32(self.patient);
        w.opt(self.record.as_ref(), |w, r| {
            w.u32(*r);
        });
        w.opt(self.log.as_ref(), |w, l| {
            w.u32(*l);
        });
    }

    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(BlockCoord { patient: r.u32()?, record: r.opt(Reader::u32)?, log: r.opt(Reader::u32)? })
    }
}

impl fmt::Display for BlockCoord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.patient)?;
        match (self.record, self.log) {
            (None, None) => Ok(()),
            (Some(r), None) => write!(f, ".{r}"),
            (Some(r), Some(l)) => write!(f, ".{r}.{l}"),
            (None, Some(l)) => write!(f, ".-.{l}"),
        }
    }
}

/// Which kind of main-chain block this is.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum IdentityVariant {
    SystemGenesis,
    Patient,
    FiscalChange,
    Catalog,
}

impl IdentityVariant {
    pub const ALL: [IdentityVariant; 4] =
        [IdentityVariant::SystemGenesis, IdentityVariant::Patient, IdentityVariant::FiscalChange, IdentityVariant::Catalog];

    fn to_byte(self) -> u8 {
        match self {
            IdentityVariant::SystemGenesis => 0,
            IdentityVariant::Patient => 1,
            IdentityVariant::FiscalChange => 2,
            IdentityVariant::Catalog => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            IdentityVariant::SystemGenesis => "system_genesis",
            IdentityVariant::Patient => "patient",
            IdentityVariant::FiscalChange => "fiscal_change",
            IdentityVariant::Catalog => "catalog",
        }
    }

    /// True for blocks that identify a patient.
    pub fn is_identity(self) -> bool {
        matches!(self, IdentityVariant::Patient | IdentityVariant::FiscalChange)
    }

    /// True for blocks carrying a catalog list.
    pub fn is_catalog(self) -> bool {
        matches!(self, IdentityVariant::SystemGenesis | IdentityVariant::Catalog)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct FiscalChange {
    pub new_code: String,
    pub old_code: String,
    pub prev_identity: Digest,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct CatalogEntry {
    pub code: String,
    pub label: String,
}

impl CatalogEntry {
    pub fn new(code: impl Into<String>, label: impl Into<String>) -> Self {
        CatalogEntry { code: code.into(), label: label.into() }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct CatalogPayload {
    pub entries: Vec<CatalogEntry>,
    /// Previous catalog block; absent only on the genesis list.
    pub prev_catalog: Option<Digest>,
}

/// Main-chain block.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct IdentityBlock {
    pub coord: BlockCoord,
    pub fiscal_code: String,
    pub personal_info: BTreeMap<String, String>,
    pub prev_main: Digest,
    pub variant: IdentityVariant,
    pub fiscal_change: Option<FiscalChange>,
    pub catalog: Option<CatalogPayload>,
    pub self_hash: Digest,
}

/// One health-record item inside a medical block.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct RecordEntry {
    pub record_type: String,
    pub payload: Vec<u8>,
    /// Most recent earlier medical block holding an entry of the same type.
    pub prev_same_type: Option<Digest>,
}

/// Subchain-1 (medical record) block.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct MedicalBlock {
    pub coord: BlockCoord,
    pub entries: Vec<RecordEntry>,
    pub prev_yellow: Digest,
    pub is_final: bool,
    pub self_hash: Digest,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LogEvent {
    Write,
    Read,
    FailedAttempt,
}

impl LogEvent {
    pub const ALL: [LogEvent; 3] = [LogEvent::Write, LogEvent::Read, LogEvent::FailedAttempt];

    fn to_byte(self) -> u8 {
        match self {
            LogEvent::Write => 0,
            LogEvent::Read => 1,
            LogEvent::FailedAttempt => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LogEvent::Write => "write",
            LogEvent::Read => "read",
            LogEvent::FailedAttempt => "failed_attempt",
        }
    }
}

/// Subchain-2 (access log) block with its three cross-hashes.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LogBlock {
    pub coord: BlockCoord,
    pub event: LogEvent,
    pub actor: String,
    pub timestamp: u64,
    pub place: String,
    pub viewed: String,
    /// Patient identity block.
    pub h_main: Digest,
    /// Referenced medical block, zero when the patient has none.
    pub h_yellow: Digest,
    /// Previous log block, or the identity block for the first log.
    pub h_prev_red: Digest,
    pub self_hash: Digest,
}

/// Behaviour shared by all three block kinds.
pub trait Block {
    fn kind_tag(&self) -> u8;

    /// The three canonical field groups: kind + coord, payload, links.
    fn field_groups(&self) -> [Vec<u8>; 3];

    fn self_hash(&self) -> Digest;

    fn set_self_hash(&mut self, hash: Digest);

    fn coord(&self) -> BlockCoord;

    /// Human-readable `key=value` rendering, one line.
    fn render_kv(&self) -> String;

    fn field_names(&self) -> Vec<String>;

    fn edit_field(&mut self, field: &str, edit: &Edit) -> Result<(), BlockError>;

    fn canonical_bytes(&self) -> Vec<u8> {
        self.field_groups().concat()
    }

    fn block_hash(&self) -> Digest {
        merkle::merkle_root(&self.field_groups()).expect("three field groups")
    }

    /// Recomputes and stores `self_hash`.
    fn seal(&mut self) {
        let h = self.block_hash();
        self.set_self_hash(h);
    }

    fn self_hash_valid(&self) -> bool {
        self.self_hash() == self.block_hash()
    }

    /// Storage record: canonical bytes followed by the stored self hash.
    fn to_record(&self) -> Vec<u8> {
        let mut out = self.canonical_bytes();
        out.extend_from_slice(self.self_hash().as_bytes());
        out
    }
}

/// Free-function form of [`Block::canonical_bytes`].
pub fn canonical_bytes(block: &dyn Block) -> Vec<u8> {
    block.canonical_bytes()
}

/// Free-function form of [`Block::block_hash`].
pub fn block_hash(block: &dyn Block) -> Digest {
    block.block_hash()
}

/// True iff `child_prev` is the hash of `parent` as it is now.
pub fn verify_link(child_prev: &Digest, parent: &dyn Block) -> bool {
    *child_prev == parent.block_hash()
}

/// Checks the triple cross-hash of a log block.
///
/// `yellow` is the referenced medical block (absent means `h_yellow` must be
/// the zero digest); `prev_red` is the previous log block, or the identity
/// block for the first log of a patient.
pub fn verify_log_cross(log: &LogBlock, identity: &IdentityBlock, yellow: Option<&MedicalBlock>, prev_red: &dyn Block) -> bool {
    let yellow_ok = match yellow {
        Some(y) => log.h_yellow == y.block_hash(),
        None => log.h_yellow.is_zero(),
    };
    log.h_main == identity.block_hash() && yellow_ok && log.h_prev_red == prev_red.block_hash()
}

fn quote(s: &str) -> String {
    format!("{s:?}")
}

fn fmt_opt_digest(d: &Option<Digest>) -> String {
    d.map_or_else(|| "-".to_string(), |d| d.to_hex())
}

impl IdentityBlock {
    /// The system genesis block B0 holding the initial catalog.
    pub fn genesis(catalog: Vec<CatalogEntry>) -> Self {
        let mut b = IdentityBlock {
            coord: BlockCoord::main(0),
            fiscal_code: String::new(),
            personal_info: BTreeMap::new(),
            prev_main: Digest::ZERO,
            variant: IdentityVariant::SystemGenesis,
            fiscal_change: None,
            catalog: Some(CatalogPayload { entries: catalog, prev_catalog: None }),
            self_hash: Digest::ZERO,
        };
        b.seal();
        b
    }

    pub fn decode_record(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(bytes);
        let tag = r.u8()?;
        if tag != TAG_IDENTITY {
            return Err(DecodeError::InvalidTag { what: "block kind", value: tag, offset: 0 });
        }
        let coord = BlockCoord::decode(&mut r)?;
        let variant = match r.tag("identity variant", 3)? {
            0 => IdentityVariant::SystemGenesis,
            1 => IdentityVariant::Patient,
            2 => IdentityVariant::FiscalChange,
            _ => IdentityVariant::Catalog,
        };
        let fiscal_code = r.string()?;
        let n = r.count()?;
        let mut personal_info = BTreeMap::new();
        let mut last: Option<String> = None;
        for _ in 0..n {
            let at = r.offset();
            let k = r.string()?;
            let v = r.string()?;
            if last.as_ref().is_some_and(|l| *l >= k) {
                return Err(DecodeError::NonCanonical(at));
            }
            last = Some(k.clone());
            personal_info.insert(k, v);
        }
        let fiscal_change = r.opt(|r| {
            Ok(FiscalChange { new_code: r.string()?, old_code: r.string()?, prev_identity: r.digest()? })
        })?;
        let catalog = r.opt(|r| {
            let n = r.count()?;
            let entries = (0..n)
                .map(|_| Ok(CatalogEntry { code: r.string()?, label: r.string()? }))
                .collect::<Result<Vec<_>, DecodeError>>()?;
            Ok(CatalogPayload { entries, prev_catalog: r.opt(Reader::digest)? })
        })?;
        let prev_main = r.digest()?;
        let self_hash = r.digest()?;
        r.finish()?;
        Ok(IdentityBlock { coord, fiscal_code, personal_info, prev_main, variant, fiscal_change, catalog, self_hash })
    }
}

impl Block for IdentityBlock {
    fn kind_tag(&self) -> u8 {
        TAG_IDENTITY
    }

    fn field_groups(&self) -> [Vec<u8>; 3] {
        let mut head = Writer::new();
        head.u8(TAG_IDENTITY);
        self.coord.encode(&mut head);

        let mut body = Writer::new();
        body.u8(self.variant.to_byte()).str(&self.fiscal_code).count(self.personal_info.len());
        for (k, v) in &self.personal_info {
            body.str(k).str(v);
        }
        body.opt(self.fiscal_change.as_ref(), |w, fc| {
            w.str(&fc.new_code).str(&fc.old_code).digest(&fc.prev_identity);
        });
        body.opt(self.catalog.as_ref(), |w, cat| {
            w.count(cat.entries.len());
            for e in &cat.entries {
                w.str(&e.code).str(&e.label);
            }
            w.opt(cat.prev_catalog.as_ref(), |w, d| {
                w.digest(d);
            });
        });

        let mut links = Writer::new();
        links.digest(&self.prev_main);
        [head.into_bytes(), body.into_bytes(), links.into_bytes()]
    }

    fn self_hash(&self) -> Digest {
        self.self_hash
    }

    fn set_self_hash(&mut self, hash: Digest) {
        self.self_hash = hash;
    }

    fn coord(&self) -> BlockCoord {
        self.coord
    }

    fn render_kv(&self) -> String {
        let mut s = format!(
            "kind=identity coord={} variant={} fiscal_code={}",
            self.coord,
            self.variant.name(),
            quote(&self.fiscal_code)
        );
        for (k, v) in &self.personal_info {
            s.push_str(&format!(" info.{k}={}", quote(v)));
        }
        if let Some(fc) = &self.fiscal_change {
            s.push_str(&format!(
                " fiscal_change.new_code={} fiscal_change.old_code={} fiscal_change.prev_identity={}",
                quote(&fc.new_code),
                quote(&fc.old_code),
                fc.prev_identity
            ));
        }
        if let Some(cat) = &self.catalog {
            for (i, e) in cat.entries.iter().enumerate() {
                s.push_str(&format!(" catalog.{i}={}:{}", quote(&e.code), quote(&e.label)));
            }
            s.push_str(&format!(" catalog.prev_catalog={}", fmt_opt_digest(&cat.prev_catalog)));
        }
        s.push_str(&format!(" prev_main={} self_hash={}", self.prev_main, self.self_hash));
        s
    }

    fn field_names(&self) -> Vec<String> {
        edit::identity_fields(self)
    }

    fn edit_field(&mut self, field: &str, edit: &Edit) -> Result<(), BlockError> {
        edit::edit_identity(self, field, edit)
    }
}

impl MedicalBlock {
    pub fn decode_record(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(bytes);
        let tag = r.u8()?;
        if tag != TAG_MEDICAL {
            return Err(DecodeError::InvalidTag { what: "block kind", value: tag, offset: 0 });
        }
        let coord = BlockCoord::decode(&mut r)?;
        let is_final = r.bool()?;
        let n = r.count()?;
        let entries = (0..n)
            .map(|_| {
                Ok(RecordEntry { record_type: r.string()?, payload: r.bytes()?, prev_same_type: r.opt(Reader::digest)? })
            })
            .collect::<Result<Vec<_>, DecodeError>>()?;
        let prev_yellow = r.digest()?;
        let self_hash = r.digest()?;
        r.finish()?;
        Ok(MedicalBlock { coord, entries, prev_yellow, is_final, self_hash })
    }
}

impl Block for MedicalBlock {
    fn kind_tag(&self) -> u8 {
        TAG_MEDICAL
    }

    fn field_groups(&self) -> [Vec<u8>; 3] {
        let mut head = Writer::new();
        head.u8(TAG_MEDICAL);
        self.coord.encode(&mut head);

        let mut body = Writer::new();
        body.bool(self.is_final).count(self.entries.len());
        for e in &self.entries {
            body.str(&e.record_type).bytes(&e.payload).opt(e.prev_same_type.as_ref(), |w, d| {
                w.digest(d);
            });
        }

        let mut links = Writer::new();
        links.digest(&self.prev_yellow);
        [head.into_bytes(), body.into_bytes(), links.into_bytes()]
    }

    fn self_hash(&self) -> Digest {
        self.self_hash
    }

    fn set_self_hash(&mut self, hash: Digest) {
        self.self_hash = hash;
    }

    fn coord(&self) -> BlockCoord {
        self.coord
    }

    fn render_kv(&self) -> String {
        let mut s = format!("kind=medical coord={} is_final={}", self.coord, self.is_final);
        for (i, e) in self.entries.iter().enumerate() {
            s.push_str(&format!(
                " entry.{i}.type={} entry.{i}.payload={} entry.{i}.prev_same_type={}",
                quote(&e.record_type),
                hex::encode(&e.payload),
                fmt_opt_digest(&e.prev_same_type)
            ));
        }
        s.push_str(&format!(" prev_yellow={} self_hash={}", self.prev_yellow, self.self_hash));
        s
    }

    fn field_names(&self) -> Vec<String> {
        edit::medical_fields(self)
    }

    fn edit_field(&mut self, field: &str, edit: &Edit) -> Result<(), BlockError> {
        edit::edit_medical(self, field, edit)
    }
}

impl LogBlock {
    pub fn decode_record(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(bytes);
        let tag = r.u8()?;
        if tag != TAG_LOG {
            return Err(DecodeError::InvalidTag { what: "block kind", value: tag, offset: 0 });
        }
        let coord = BlockCoord::decode(&mut r)?;
        let event = LogEvent::ALL[usize::from(r.tag("log event", 2)?)];
        let actor = r.string()?;
        let timestamp = r.u64()?;
        let place = r.string()?;
        let viewed = r.string()?;
        let h_main = r.digest()?;
        let h_yellow = r.digest()?;
        let h_prev_red = r.digest()?;
        let self_hash = r.digest()?;
        r.finish()?;
        Ok(LogBlock { coord, event, actor, timestamp, place, viewed, h_main, h_yellow, h_prev_red, self_hash })
    }
}

impl Block for LogBlock {
    fn kind_tag(&self) -> u8 {
        TAG_LOG
    }

    fn field_groups(&self) -> [Vec<u8>; 3] {
        let mut head = Writer::new();
        head.u8(TAG_LOG);
        self.coord.encode(&mut head);

        let mut body = Writer::new();
        body.u8(self.event.to_byte())
            .str(&self.actor)
            .u64(self.timestamp)
            .str(&self.place)
            .str(&self.viewed);

        let mut links = Writer::new();
        links.digest(&self.h_main).digest(&self.h_yellow).digest(&self.h_prev_red);
        [head.into_bytes(), body.into_bytes(), links.into_bytes()]
    }

    fn self_hash(&self) -> Digest {
        self.self_hash
    }

    fn set_self_hash(&mut self, hash: Digest) {
        self.self_hash = hash;
    }

    fn coord(&self) -> BlockCoord {
        self.coord
    }

    fn render_kv(&self) -> String {
        format!(
            "kind=log coord={} event={} actor={} timestamp={} place={} viewed={} h_main={} h_yellow={} h_prev_red={} self_hash={}",
            self.coord,
            self.event.name(),
            quote(&self.actor),
            self.timestamp,
            quote(&self.place),
            quote(&self.viewed),
            self.h_main,
            self.h_yellow,
            self.h_prev_red,
            self.self_hash
        )
    }

    fn field_names(&self) -> Vec<String> {
        edit::log_fields(self)
    }

    fn edit_field(&mut self, field: &str, edit: &Edit) -> Result<(), BlockError> {
        edit::edit_log(self, field, edit)
    }
}

/// Failed attempt that cannot be anchored to a patient's log chain, such as
/// an access against an unknown patient or a denied onboarding. Notes form
/// their own hash chain outside the tree.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct AuditNote {
    /// `log` carries the 1-based sequence number; `patient` is the target
    /// patient index when one was named, else 0.
    pub coord: BlockCoord,
    pub timestamp: u64,
    pub actor: String,
    pub place: String,
    pub operation: String,
    pub reason: String,
    pub prev: Digest,
    pub self_hash: Digest,
}

impl AuditNote {
    pub fn seq(&self) -> u32 {
        self.coord.log.unwrap_or(0)
    }

    pub fn decode_record(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(bytes);
        let tag = r.u8()?;
        if tag != TAG_AUDIT_NOTE {
            return Err(DecodeError::InvalidTag { what: "block kind", value: tag, offset: 0 });
        }
        let coord = BlockCoord::decode(&mut r)?;
        let timestamp = r.u64()?;
        let actor = r.string()?;
        let place = r.string()?;
        let operation = r.string()?;
        let reason = r.string()?;
        let prev = r.digest()?;
        let self_hash = r.digest()?;
        r.finish()?;
        Ok(AuditNote { coord, timestamp, actor, place, operation, reason, prev, self_hash })
    }
}

impl Block for AuditNote {
    fn kind_tag(&self) -> u8 {
        TAG_AUDIT_NOTE
    }

    fn field_groups(&self) -> [Vec<u8>; 3] {
        let mut head = Writer::new();
        head.u8(TAG_AUDIT_NOTE);
        self.coord.encode(&mut head);
        let mut body = Writer::new();
        body.u64(self.timestamp).str(&self.actor).str(&self.place).str(&self.operation).str(&self.reason);
        let mut links = Writer::new();
        links.digest(&self.prev);
        [head.into_bytes(), body.into_bytes(), links.into_bytes()]
    }

    fn self_hash(&self) -> Digest {
        self.self_hash
    }

    fn set_self_hash(&mut self, hash: Digest) {
        self.self_hash = hash;
    }

    fn coord(&self) -> BlockCoord {
        self.coord
    }

    fn render_kv(&self) -> String {
        format!(
            "kind=audit_note coord={} timestamp={} actor={} place={} operation={} reason={} prev={} self_hash={}",
            self.coord,
            self.timestamp,
            quote(&self.actor),
            quote(&self.place),
            quote(&self.operation),
            quote(&self.reason),
            self.prev,
            self.self_hash
        )
    }

    fn field_names(&self) -> Vec<String> {
        edit::note_fields()
    }

    fn edit_field(&mut self, field: &str, edit: &Edit) -> Result<(), BlockError> {
        edit::edit_note(self, field, edit)
    }
}
