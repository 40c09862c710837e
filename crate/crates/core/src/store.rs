//! Append-only on-disk persistence of a [`LedgerState`].
//!
//! A ledger directory holds one file per chain:
//!
//! ```text
//! main.chain          identity and catalog blocks
//! p<N>.yellow.chain   medical records of patient N
//! p<N>.red.chain      access log of patient N
//! audit.global        failed attempts with no patient anchor
//! ```
//!
//! Every file is a sequence of records, each a 4-byte big-endian length
//! followed by the block's canonical bytes and its stored self hash.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use crate::blocks::{AuditNote, Block, DecodeError, IdentityBlock, IdentityVariant, LogBlock, MedicalBlock};
use crate::ledger::{verify_tree, LedgerState, Violation};
use crate::merkle::{hash_bytes, Digest};

pub const MAIN_FILE: &str = "main.chain";
pub const GLOBAL_FILE: &str = "audit.global";
pub const LOCK_FILE: &str = ".lock";

const LEN_PREFIX: usize = 4;

#[derive(thiserror::Error, Debug)]
pub enum StoreError {
    #[error("StorageError: {path}: {message}")]
    Storage { path: PathBuf, message: String },
    #[error("CorruptChain: {file} at offset {offset}: {reason}")]
    CorruptChain { file: String, offset: usize, reason: String },
    #[error("TamperedStore: {} violation(s)", .0.len())]
    Tampered(Vec<Violation>),
    #[error("Locked: {0} is in use by another process")]
    Locked(PathBuf),
}

impl StoreError {
    pub fn name(&self) -> &'static str {
        match self {
            StoreError::Storage { .. } => "StorageError",
            StoreError::CorruptChain { .. } => "CorruptChain",
            StoreError::Tampered(_) => "TamperedStore",
            StoreError::Locked(_) => "Locked",
        }
    }

    fn io(path: &Path, err: io::Error) -> Self {
        StoreError::Storage { path: path.to_path_buf(), message: err.to_string() }
    }
}

pub fn yellow_file(patient: u32) -> String {
    format!("p{patient}.yellow.chain")
}

pub fn red_file(patient: u32) -> String {
    format!("p{patient}.red.chain")
}

fn encode_chain<'a, B: Block + 'a>(blocks: impl IntoIterator<Item = &'a B>) -> Vec<u8> {
    let mut out = Vec::new();
    for b in blocks {
        let rec = b.to_record();
        out.extend_from_slice(&(rec.len() as u32).to_be_bytes());
        out.extend_from_slice(&rec);
    }
    out
}

/// Encodes every chain file of `state`, keyed by file name.
pub fn encode_files(state: &LedgerState) -> BTreeMap<String, Vec<u8>> {
    let mut files = BTreeMap::new();
    files.insert(MAIN_FILE.to_string(), encode_chain(state.main_chain()));
    files.insert(GLOBAL_FILE.to_string(), encode_chain(state.audit_notes()));
    for p in patients(state) {
        files.insert(yellow_file(p), encode_chain(state.yellow(p)));
        files.insert(red_file(p), encode_chain(state.red(p)));
    }
    files
}

/// Digest over every encoded chain file, file names included.
pub fn state_digest(state: &LedgerState) -> Digest {
    let mut buf = Vec::new();
    for (name, bytes) in encode_files(state) {
        buf.extend_from_slice(&(name.len() as u32).to_be_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(bytes.len() as u64).to_be_bytes());
        buf.extend_from_slice(&bytes);
    }
    hash_bytes(&buf)
}

fn patients(state: &LedgerState) -> Vec<u32> {
    let mut ps: Vec<u32> = (1..=state.patient_count()).collect();
    ps.extend(state.yellow_chains().keys().chain(state.red_chains().keys()).copied());
    ps.sort_unstable();
    ps.dedup();
    ps
}

fn decode_chain<B>(file: &str, bytes: &[u8], decode: impl Fn(&[u8]) -> Result<B, DecodeError>) -> Result<Vec<B>, StoreError>
where
    B: Block,
{
    let corrupt = |offset: usize, reason: String| StoreError::CorruptChain { file: file.to_string(), offset, reason };
    let mut out = Vec::new();
    let mut pos = 0;
    while pos < bytes.len() {
        if bytes.len() - pos < LEN_PREFIX {
            return Err(corrupt(pos, "truncated length prefix".into()));
        }
        let len = u32::from_be_bytes(bytes[pos..pos + LEN_PREFIX].try_into().expect("4 bytes")) as usize;
        let start = pos + LEN_PREFIX;
        if bytes.len() - start < len {
            return Err(corrupt(pos, format!("record of {len} bytes overruns end of file")));
        }
        let rec = &bytes[start..start + len];
        let block = decode(rec).map_err(|e| corrupt(start + e.offset().unwrap_or(len), e.to_string()))?;
        if block.to_record() != rec {
            return Err(corrupt(start, "record does not re-encode identically".into()));
        }
        out.push(block);
        pos = start + len;
    }
    Ok(out)
}

fn parse_patient_file(name: &str) -> Option<(u32, bool)> {
    let rest = name.strip_prefix('p')?;
    let (num, yellow) = if let Some(n) = rest.strip_suffix(".yellow.chain") {
        (n, true)
    } else {
        (rest.strip_suffix(".red.chain")?, false)
    };
    if num.is_empty() || !num.bytes().all(|b| b.is_ascii_digit()) || (num.len() > 1 && num.starts_with('0')) {
        return None;
    }
    Some((num.parse().ok()?, yellow))
}

/// Rebuilds a ledger from encoded files without running `verify_tree`.
pub fn decode_files(files: &BTreeMap<String, Vec<u8>>) -> Result<LedgerState, StoreError> {
    let missing = |name: &str| StoreError::Storage { path: PathBuf::from(name), message: "missing chain file".into() };
    let main_bytes = files.get(MAIN_FILE).ok_or_else(|| missing(MAIN_FILE))?;
    let main = decode_chain(MAIN_FILE, main_bytes, IdentityBlock::decode_record)?;
    let notes = match files.get(GLOBAL_FILE) {
        Some(b) => decode_chain(GLOBAL_FILE, b, AuditNote::decode_record)?,
        None => return Err(missing(GLOBAL_FILE)),
    };
    let mut yellow = BTreeMap::new();
    let mut red = BTreeMap::new();
    for (name, bytes) in files {
        match parse_patient_file(name) {
            Some((p, true)) => {
                yellow.insert(p, decode_chain(name, bytes, MedicalBlock::decode_record)?);
            }
            Some((p, false)) => {
                red.insert(p, decode_chain(name, bytes, LogBlock::decode_record)?);
            }
            None => {}
        }
    }
    let onboarded = main.iter().filter(|b| b.variant == IdentityVariant::Patient).count() as u32;
    for p in 1..=onboarded {
        for name in [yellow_file(p), red_file(p)] {
            if !files.contains_key(&name) {
                return Err(missing(&name));
            }
        }
    }
    Ok(LedgerState::from_chains(main, yellow, red, notes))
}

fn is_chain_file(name: &str) -> bool {
    name == MAIN_FILE || name == GLOBAL_FILE || parse_patient_file(name).is_some()
}

fn read_files(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>, StoreError> {
    let entries = fs::read_dir(dir).map_err(|e| StoreError::io(dir, e))?;
    let mut files = BTreeMap::new();
    for entry in entries {
        let entry = entry.map_err(|e| StoreError::io(dir, e))?;
        let Ok(name) = entry.file_name().into_string() else { continue };
        if !is_chain_file(&name) {
            continue;
        }
        let path = entry.path();
        files.insert(name, fs::read(&path).map_err(|e| StoreError::io(&path, e))?);
    }
    if !files.contains_key(MAIN_FILE) {
        return Err(StoreError::Storage {
            path: dir.join(MAIN_FILE),
            message: "not a ledger directory (run init first)".into(),
        });
    }
    Ok(files)
}

/// Loads a ledger, refusing any state that fails `verify_tree`.
pub fn load(dir: &Path) -> Result<LedgerState, StoreError> {
    verified(load_unverified(dir)?)
}

/// [`decode_files`] followed by `verify_tree`, as [`load`] does.
pub fn load_from_files(files: &BTreeMap<String, Vec<u8>>) -> Result<LedgerState, StoreError> {
    verified(decode_files(files)?)
}

fn verified(state: LedgerState) -> Result<LedgerState, StoreError> {
    let violations = verify_tree(&state);
    if violations.is_empty() {
        Ok(state)
    } else {
        Err(StoreError::Tampered(violations))
    }
}

/// Decodes a ledger directory without running `verify_tree`. Decoding is
/// still strict: malformed files yield [`StoreError::CorruptChain`].
pub fn load_unverified(dir: &Path) -> Result<LedgerState, StoreError> {
    decode_files(&read_files(dir)?)
}

/// Writes `state` to `dir`. Files whose current content is a prefix of the
/// new content are appended to; unchanged files are left untouched; any
/// other file is replaced atomically.
pub fn persist(state: &LedgerState, dir: &Path) -> Result<(), StoreError> {
    fs::create_dir_all(dir).map_err(|e| StoreError::io(dir, e))?;
    let files = encode_files(state);
    for (name, bytes) in &files {
        write_file(&dir.join(name), bytes)?;
    }
    let entries = fs::read_dir(dir).map_err(|e| StoreError::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| StoreError::io(dir, e))?;
        let Ok(name) = entry.file_name().into_string() else { continue };
        if is_chain_file(&name) && !files.contains_key(&name) {
            fs::remove_file(entry.path()).map_err(|e| StoreError::io(&entry.path(), e))?;
        }
    }
    Ok(())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    let existing = match fs::read(path) {
        Ok(b) => Some(b),
        Err(e) if e.kind() == io::ErrorKind::NotFound => None,
        Err(e) => return Err(StoreError::io(path, e)),
    };
    match existing {
        Some(old) if old == bytes => Ok(()),
        Some(old) if bytes.starts_with(&old) => {
            let mut f = fs::OpenOptions::new().append(true).open(path).map_err(|e| StoreError::io(path, e))?;
            f.write_all(&bytes[old.len()..]).and_then(|_| f.sync_data()).map_err(|e| StoreError::io(path, e))
        }
        _ => {
            let tmp = path.with_extension("tmp");
            fs::write(&tmp, bytes).map_err(|e| StoreError::io(&tmp, e))?;
            fs::rename(&tmp, path).map_err(|e| StoreError::io(path, e))
        }
    }
}

/// Human-readable dump, one block per line. Never read back.
pub fn export(state: &LedgerState) -> String {
    let mut out = String::new();
    for r in state.block_refs() {
        let b = state.block(r).expect("listed block exists");
        out.push_str(&format!("{} {} {}\n", r.chain_name(), r.position(), b.render_kv()));
    }
    out
}

/// Exclusive lock on a ledger directory, released on drop.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self, StoreError> {
        fs::create_dir_all(dir).map_err(|e| StoreError::io(dir, e))?;
        let path = dir.join(LOCK_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(DirLock { path })
            }
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => Err(StoreError::Locked(dir.to_path_buf())),
            Err(e) => Err(StoreError::io(&path, e)),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}
