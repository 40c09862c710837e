//! Ledger commands and responses with a stable one-line text form.
//!
//! A request renders as `verb key=value ...`, e.g.
//! `write actor=dr1 role=doctor valid=true patient=2 entry=blood_test:hb=13.1`.
//! Values are percent-escaped for whitespace and `%`, so a rendered request
//! always splits back into the same tokens.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use super::{AccessCtx, Credential, EntryInput, LedgerError, LedgerState, ReadQuery, Role};
use crate::blocks::{BlockCoord, CatalogEntry, RecordEntry};
use crate::merkle::Digest;

#[derive(thiserror::Error, Debug, Clone, PartialEq, Eq)]
pub enum CommandParseError {
    #[error("unknown verb `{0}`")]
    UnknownVerb(String),
    #[error("missing argument `{0}`")]
    Missing(&'static str),
    #[error("invalid argument `{0}`")]
    Invalid(String),
    #[error("unexpected argument `{0}`")]
    Unexpected(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Command {
    Onboard { fiscal_code: String, personal_info: BTreeMap<String, String> },
    Write { patient: u32, entries: Vec<EntryInput> },
    Read { patient: u32, query: ReadQuery },
    Report { patient: u32, record_type: String },
    Close { patient: u32 },
    ChangeCode { patient: u32, new_code: String },
    CatalogAdd { entries: Vec<CatalogEntry> },
}

impl Command {
    pub fn verb(&self) -> &'static str {
        match self {
            Command::Onboard { .. } => "onboard",
            Command::Write { .. } => "write",
            Command::Read { .. } => "read",
            Command::Report { .. } => "report",
            Command::Close { .. } => "close",
            Command::ChangeCode { .. } => "change-code",
            Command::CatalogAdd { .. } => "catalog-add",
        }
    }

    fn render_args(&self, out: &mut String) {
        let mut arg = |k: &str, v: &str| {
            let _ = write!(out, " {k}={}", escape(v));
        };
        match self {
            Command::Onboard { fiscal_code, personal_info } => {
                arg("code", fiscal_code);
                for (k, v) in personal_info {
                    arg(&format!("info.{}", escape(k)), v);
                }
            }
            Command::Write { patient, entries } => {
                arg("patient", &patient.to_string());
                for e in entries {
                    arg("entry", &format!("{}:{}", e.record_type, String::from_utf8_lossy(&e.payload)));
                }
            }
            Command::Read { patient, query } => {
                arg("patient", &patient.to_string());
                if let ReadQuery::Type(t) = query {
                    arg("type", t);
                }
            }
            Command::Report { patient, record_type } => {
                arg("patient", &patient.to_string());
                arg("type", record_type);
            }
            Command::Close { patient } => arg("patient", &patient.to_string()),
            Command::ChangeCode { patient, new_code } => {
                arg("patient", &patient.to_string());
                arg("code", new_code);
            }
            Command::CatalogAdd { entries } => {
                for e in entries {
                    arg("entry", &format!("{}:{}", e.code, e.label));
                }
            }
        }
    }
}

/// A command with the credential and place it is issued under.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Request {
    pub ctx: AccessCtx,
    pub command: Command,
}

impl Request {
    pub fn new(ctx: AccessCtx, command: Command) -> Self {
        Request { ctx, command }
    }

    /// `verb actor=.. role=.. valid=.. args...` (place and tick are carried
    /// separately).
    pub fn render(&self) -> String {
        let mut s = format!(
            "{} actor={} role={} valid={}",
            self.command.verb(),
            escape(&self.ctx.cred.actor_id),
            self.ctx.cred.role,
            self.ctx.cred.valid
        );
        self.command.render_args(&mut s);
        s
    }

    /// Parses `verb key=value ...` tokens. `actor` and `role` are required;
    /// `valid` defaults to true.
    pub fn parse(tokens: &[&str], place: &str) -> Result<Self, CommandParseError> {
        let (verb, rest) = tokens.split_first().ok_or(CommandParseError::Missing("verb"))?;
        let mut args: Vec<(String, String)> = Vec::new();
        for t in rest {
            let (k, v) = t.split_once('=').ok_or_else(|| CommandParseError::Invalid(t.to_string()))?;
            args.push((unescape(k)?, unescape(v)?));
        }
        let mut take = |key: &str| -> Vec<String> {
            let mut found = Vec::new();
            args.retain(|(k, v)| {
                if k == key {
                    found.push(v.clone());
                    false
                } else {
                    true
                }
            });
            found
        };
        let one = |vals: Vec<String>, name: &'static str| -> Result<Option<String>, CommandParseError> {
            match vals.len() {
                0 => Ok(None),
                1 => Ok(vals.into_iter().next()),
                _ => Err(CommandParseError::Invalid(format!("{name} given twice"))),
            }
        };

        let actor = one(take("actor"), "actor")?.ok_or(CommandParseError::Missing("actor"))?;
        let role: Role = one(take("role"), "role")?
            .ok_or(CommandParseError::Missing("role"))?
            .parse()
            .map_err(CommandParseError::Invalid)?;
        let valid = match one(take("valid"), "valid")? {
            None => true,
            Some(v) => v.parse().map_err(|_| CommandParseError::Invalid(format!("valid={v}")))?,
        };
        let patient = |vals: Vec<String>| -> Result<u32, CommandParseError> {
            let v = one(vals, "patient")?.ok_or(CommandParseError::Missing("patient"))?;
            v.parse().map_err(|_| CommandParseError::Invalid(format!("patient={v}")))
        };
        let split_entry = |v: &str| -> Result<(String, String), CommandParseError> {
            let (a, b) = v.split_once(':').ok_or_else(|| CommandParseError::Invalid(format!("entry={v}")))?;
            Ok((a.to_string(), b.to_string()))
        };

        let command = match *verb {
            "onboard" => {
                let fiscal_code = one(take("code"), "code")?.ok_or(CommandParseError::Missing("code"))?;
                let mut personal_info = BTreeMap::new();
                args.retain(|(k, v)| match k.strip_prefix("info.") {
                    Some(key) => {
                        personal_info.insert(key.to_string(), v.clone());
                        false
                    }
                    None => true,
                });
                Command::Onboard { fiscal_code, personal_info }
            }
            "write" => {
                let patient = patient(take("patient"))?;
                let entries = take("entry")
                    .iter()
                    .map(|v| split_entry(v).map(|(t, p)| EntryInput::new(t, p.into_bytes())))
                    .collect::<Result<_, _>>()?;
                Command::Write { patient, entries }
            }
            "read" => {
                let patient = patient(take("patient"))?;
                let query = one(take("type"), "type")?.map_or(ReadQuery::Latest, ReadQuery::Type);
                Command::Read { patient, query }
            }
            "report" => {
                let patient = patient(take("patient"))?;
                let record_type = one(take("type"), "type")?.ok_or(CommandParseError::Missing("type"))?;
                Command::Report { patient, record_type }
            }
            "close" => Command::Close { patient: patient(take("patient"))? },
            "change-code" => {
                let patient = patient(take("patient"))?;
                let new_code = one(take("code"), "code")?.ok_or(CommandParseError::Missing("code"))?;
                Command::ChangeCode { patient, new_code }
            }
            "catalog-add" => {
                let entries = take("entry")
                    .iter()
                    .map(|v| split_entry(v).map(|(c, l)| CatalogEntry::new(c, l)))
                    .collect::<Result<_, _>>()?;
                Command::CatalogAdd { entries }
            }
            other => return Err(CommandParseError::UnknownVerb(other.to_string())),
        };
        if let Some((k, _)) = args.first() {
            return Err(CommandParseError::Unexpected(k.clone()));
        }
        let cred = Credential { actor_id: actor, role, valid };
        Ok(Request { ctx: AccessCtx::new(cred, place), command })
    }
}

/// Successful outcome of a command.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Response {
    Onboarded { patient: u32, block: Digest, log: BlockCoord },
    Written { block: BlockCoord, hash: Digest, log: BlockCoord },
    Read { entries: Vec<(BlockCoord, RecordEntry)>, log: BlockCoord },
    Report { items: Vec<(BlockCoord, Vec<u8>)>, log: BlockCoord },
    Closed { block: BlockCoord, log: BlockCoord },
    CodeChanged { patient: u32, block: Digest, log: BlockCoord },
    CatalogUpdated { block: Digest, codes: usize },
}

impl Response {
    /// One-line summary used in transcripts.
    pub fn summary(&self) -> String {
        match self {
            Response::Onboarded { patient, log, .. } => format!("onboarded patient={patient} log={log}"),
            Response::Written { block, log, .. } => format!("written block={block} log={log}"),
            Response::Read { entries, log } => format!("read entries={} log={log}", entries.len()),
            Response::Report { items, log } => format!("report items={} log={log}", items.len()),
            Response::Closed { block, log } => format!("closed block={block} log={log}"),
            Response::CodeChanged { patient, log, .. } => format!("code-changed patient={patient} log={log}"),
            Response::CatalogUpdated { codes, .. } => format!("catalog-updated codes={codes}"),
        }
    }

    /// Output lines. Porcelain lines are tab-separated with a leading record
    /// type; human lines are `key=value` text.
    pub fn lines(&self, porcelain: bool) -> Vec<String> {
        let row = |fields: &[String]| if porcelain { fields.join("\t") } else { fields.join(" ") };
        let kv = |k: &str, v: &dyn std::fmt::Display| if porcelain { v.to_string() } else { format!("{k}={v}") };
        let text = |p: &[u8]| escape(&String::from_utf8_lossy(p));
        match self {
            Response::Onboarded { patient, block, log } => {
                vec![row(&["onboarded".into(), kv("patient", patient), kv("block", block), kv("log", log)])]
            }
            Response::Written { block, hash, log } => {
                vec![row(&["written".into(), kv("block", block), kv("hash", hash), kv("log", log)])]
            }
            Response::Read { entries, log } => {
                let mut out = vec![row(&["read".into(), kv("entries", &entries.len()), kv("log", log)])];
                for (coord, e) in entries {
                    out.push(row(&["entry".into(), kv("block", coord), kv("type", &e.record_type), kv("payload", &text(&e.payload))]));
                }
                out
            }
            Response::Report { items, log } => {
                let mut out = vec![row(&["report".into(), kv("items", &items.len()), kv("log", log)])];
                for (coord, payload) in items {
                    out.push(row(&["item".into(), kv("block", coord), kv("payload", &text(payload))]));
                }
                out
            }
            Response::Closed { block, log } => vec![row(&["closed".into(), kv("block", block), kv("log", log)])],
            Response::CodeChanged { patient, block, log } => {
                vec![row(&["code-changed".into(), kv("patient", patient), kv("block", block), kv("log", log)])]
            }
            Response::CatalogUpdated { block, codes } => {
                vec![row(&["catalog-updated".into(), kv("codes", codes), kv("block", block)])]
            }
        }
    }
}

impl LedgerState {
    /// Runs one request against the ledger.
    pub fn execute(&mut self, req: &Request) -> Result<Response, LedgerError> {
        let ctx = &req.ctx;
        match &req.command {
            Command::Onboard { fiscal_code, personal_info } => {
                let patient = self.onboard_patient(ctx, fiscal_code, personal_info.clone())?;
                let block = self.current_identity(patient).expect("just onboarded").self_hash;
                let log = self.red(patient).last().expect("onboarding log").coord;
                Ok(Response::Onboarded { patient, block, log })
            }
            Command::Write { patient, entries } => {
                let (m, l) = self.write_record(ctx, *patient, entries.clone())?;
                Ok(Response::Written { block: m.coord, hash: m.self_hash, log: l.coord })
            }
            Command::Read { patient, query } => {
                let (entries, l) = self.read_record(ctx, *patient, query)?;
                Ok(Response::Read { entries, log: l.coord })
            }
            Command::Report { patient, record_type } => {
                let (items, l) = self.assemble_report(ctx, *patient, record_type)?;
                Ok(Response::Report { items, log: l.coord })
            }
            Command::Close { patient } => {
                let (m, l) = self.close_subchain(ctx, *patient)?;
                Ok(Response::Closed { block: m.coord, log: l.coord })
            }
            Command::ChangeCode { patient, new_code } => {
                let (b, l) = self.change_fiscal_code(ctx, *patient, new_code)?;
                Ok(Response::CodeChanged { patient: *patient, block: b.self_hash, log: l.coord })
            }
            Command::CatalogAdd { entries } => {
                let b = self.update_catalog(ctx, entries.clone())?;
                Ok(Response::CatalogUpdated { block: b.self_hash, codes: self.active_catalog().len() })
            }
        }
    }
}

/// Percent-escapes `%`, whitespace and control characters.
pub fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for ch in s.chars() {
        if ch == '%' || ch.is_whitespace() || ch.is_control() {
            let mut buf = [0u8; 4];
            for b in ch.encode_utf8(&mut buf).bytes() {
                let _ = write!(out, "%{b:02X}");
            }
        } else {
            out.push(ch);
        }
    }
    out
}

pub fn unescape(s: &str) -> Result<String, CommandParseError> {
    let bad = || CommandParseError::Invalid(format!("bad escape in `{s}`"));
    let bytes = s.as_bytes();
    let mut out = Vec::with_capacity(bytes.len());
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'%' {
            let hex = s.get(i + 1..i + 3).ok_or_else(bad)?;
            out.push(u8::from_str_radix(hex, 16).map_err(|_| bad())?);
            i += 3;
        } else {
            out.push(bytes[i]);
            i += 1;
        }
    }
    String::from_utf8(out).map_err(|_| bad())
}
