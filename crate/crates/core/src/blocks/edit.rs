//! Raw field edits on blocks, bypassing every ledger check.
//!
//! Only tamper tooling and tests use this. Field paths are dotted names such
//! as `personal_info.name`, `entry.0.payload` or `h_yellow`.

use super::*;

#[derive(thiserror::Error, Debug, Clone, PartialEq, Eq)]
pub enum BlockError {
    #[error("unknown field `{0}`")]
    UnknownField(String),
    #[error("invalid value `{value}` for field `{field}`")]
    InvalidValue { field: String, value: String },
}

/// How to change a field.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Edit {
    /// Replace with a parsed textual value.
    Set(String),
    /// Change to some different value of the same type.
    Perturb,
}

fn invalid(field: &str, value: &str) -> BlockError {
    BlockError::InvalidValue { field: field.to_string(), value: value.to_string() }
}

fn edit_string(target: &mut String, edit: &Edit) {
    match edit {
        Edit::Set(v) => *target = v.clone(),
        Edit::Perturb => target.push('~'),
    }
}

fn edit_digest(target: &mut Digest, field: &str, edit: &Edit) -> Result<(), BlockError> {
    match edit {
        Edit::Set(v) => *target = Digest::from_hex(v).map_err(|_| invalid(field, v))?,
        Edit::Perturb => *target = target.with_bit_flipped(0),
    }
    Ok(())
}

fn edit_opt_digest(target: &mut Option<Digest>, field: &str, edit: &Edit) -> Result<(), BlockError> {
    match (edit, target.as_mut()) {
        (Edit::Set(v), _) if v == "-" => *target = None,
        (Edit::Set(v), _) => *target = Some(Digest::from_hex(v).map_err(|_| invalid(field, v))?),
        (Edit::Perturb, Some(d)) => *d = d.with_bit_flipped(0),
        (Edit::Perturb, None) => *target = Some(Digest::ZERO),
    }
    Ok(())
}

fn edit_u32(target: &mut u32, field: &str, edit: &Edit) -> Result<(), BlockError> {
    match edit {
        Edit::Set(v) => *target = v.parse().map_err(|_| invalid(field, v))?,
        Edit::Perturb => *target = target.wrapping_add(1),
    }
    Ok(())
}

fn edit_opt_u32(target: &mut Option<u32>, field: &str, edit: &Edit) -> Result<(), BlockError> {
    match edit {
        Edit::Set(v) if v == "-" => *target = None,
        Edit::Set(v) => *target = Some(v.parse().map_err(|_| invalid(field, v))?),
        Edit::Perturb => *target = Some(target.map_or(1, |x| x.wrapping_add(1))),
    }
    Ok(())
}

fn edit_coord(coord: &mut BlockCoord, field: &str, edit: &Edit) -> Result<(), BlockError> {
    match field {
        "coord.patient" => edit_u32(&mut coord.patient, field, edit),
        "coord.record" => edit_opt_u32(&mut coord.record, field, edit),
        "coord.log" => edit_opt_u32(&mut coord.log, field, edit),
        _ => Err(BlockError::UnknownField(field.to_string())),
    }
}

const COORD_FIELDS: [&str; 3] = ["coord.patient", "coord.record", "coord.log"];

/// Splits `prefix.<index>.rest` into `(index, rest)`.
fn indexed<'a>(field: &'a str, prefix: &str) -> Option<(usize, &'a str)> {
    let rest = field.strip_prefix(prefix)?.strip_prefix('.')?;
    let (idx, tail) = rest.split_once('.')?;
    Some((idx.parse().ok()?, tail))
}

pub(super) fn identity_fields(b: &IdentityBlock) -> Vec<String> {
    let mut out: Vec<String> = COORD_FIELDS.iter().map(|s| s.to_string()).collect();
    out.extend(["variant", "fiscal_code", "personal_info"].map(String::from));
    out.extend(b.personal_info.keys().map(|k| format!("personal_info.{k}")));
    out.push("fiscal_change".into());
    if b.fiscal_change.is_some() {
        out.extend(["fiscal_change.new_code", "fiscal_change.old_code", "fiscal_change.prev_identity"].map(String::from));
    }
    out.push("catalog".into());
    if let Some(cat) = &b.catalog {
        out.push("catalog.entries".into());
        for i in 0..cat.entries.len() {
            out.push(format!("catalog.{i}.code"));
            out.push(format!("catalog.{i}.label"));
        }
        out.push("catalog.prev_catalog".into());
    }
    out.extend(["prev_main", "self_hash"].map(String::from));
    out
}

pub(super) fn edit_identity(b: &mut IdentityBlock, field: &str, edit: &Edit) -> Result<(), BlockError> {
    let unknown = || BlockError::UnknownField(field.to_string());
    match field {
        f if f.starts_with("coord.") => edit_coord(&mut b.coord, f, edit)?,
        "variant" => {
            b.variant = match edit {
                Edit::Set(v) => *IdentityVariant::ALL.iter().find(|x| x.name() == v).ok_or_else(|| invalid(field, v))?,
                Edit::Perturb => IdentityVariant::ALL[(usize::from(b.variant.to_byte()) + 1) % 4],
            }
        }
        "fiscal_code" => edit_string(&mut b.fiscal_code, edit),
        "personal_info" => {
            // Whole-map edit: add a key, or drop one on a second perturb.
            if b.personal_info.remove("~").is_none() {
                b.personal_info.insert("~".into(), String::new());
            }
        }
        f if f.starts_with("personal_info.") => {
            let key = &f["personal_info.".len()..];
            let slot = b.personal_info.entry(key.to_string()).or_default();
            edit_string(slot, edit);
        }
        "fiscal_change" => {
            b.fiscal_change = match b.fiscal_change {
                Some(_) => None,
                None => Some(FiscalChange { new_code: String::new(), old_code: String::new(), prev_identity: Digest::ZERO }),
            }
        }
        f if f.starts_with("fiscal_change.") => {
            let fc = b.fiscal_change.as_mut().ok_or_else(unknown)?;
            match f {
                "fiscal_change.new_code" => edit_string(&mut fc.new_code, edit),
                "fiscal_change.old_code" => edit_string(&mut fc.old_code, edit),
                "fiscal_change.prev_identity" => edit_digest(&mut fc.prev_identity, f, edit)?,
                _ => return Err(unknown()),
            }
        }
        "catalog" => {
            b.catalog = match b.catalog {
                Some(_) => None,
                None => Some(CatalogPayload { entries: Vec::new(), prev_catalog: None }),
            }
        }
        f if f.starts_with("catalog.") => {
            let cat = b.catalog.as_mut().ok_or_else(unknown)?;
            match f {
                "catalog.entries" => {
                    if cat.entries.pop().is_none() {
                        cat.entries.push(CatalogEntry::new("~", "~"));
                    }
                }
                "catalog.prev_catalog" => edit_opt_digest(&mut cat.prev_catalog, f, edit)?,
                _ => {
                    let (i, sub) = indexed(f, "catalog").ok_or_else(unknown)?;
                    let e = cat.entries.get_mut(i).ok_or_else(unknown)?;
                    match sub {
                        "code" => edit_string(&mut e.code, edit),
                        "label" => edit_string(&mut e.label, edit),
                        _ => return Err(unknown()),
                    }
                }
            }
        }
        "prev_main" => edit_digest(&mut b.prev_main, field, edit)?,
        "self_hash" => edit_digest(&mut b.self_hash, field, edit)?,
        _ => return Err(unknown()),
    }
    Ok(())
}

pub(super) fn medical_fields(b: &MedicalBlock) -> Vec<String> {
    let mut out: Vec<String> = COORD_FIELDS.iter().map(|s| s.to_string()).collect();
    out.extend(["is_final", "entries"].map(String::from));
    for i in 0..b.entries.len() {
        for sub in ["record_type", "payload", "prev_same_type"] {
            out.push(format!("entry.{i}.{sub}"));
        }
    }
    out.extend(["prev_yellow", "self_hash"].map(String::from));
    out
}

pub(super) fn edit_medical(b: &mut MedicalBlock, field: &str, edit: &Edit) -> Result<(), BlockError> {
    let unknown = || BlockError::UnknownField(field.to_string());
    match field {
        f if f.starts_with("coord.") => edit_coord(&mut b.coord, f, edit)?,
        "is_final" => {
            b.is_final = match edit {
                Edit::Set(v) => v.parse().map_err(|_| invalid(field, v))?,
                Edit::Perturb => !b.is_final,
            }
        }
        "entries" => {
            if b.entries.pop().is_none() {
                b.entries.push(RecordEntry { record_type: "~".into(), payload: Vec::new(), prev_same_type: None });
            }
        }
        "prev_yellow" => edit_digest(&mut b.prev_yellow, field, edit)?,
        "self_hash" => edit_digest(&mut b.self_hash, field, edit)?,
        f => {
            let (i, sub) = indexed(f, "entry").ok_or_else(unknown)?;
            let e = b.entries.get_mut(i).ok_or_else(unknown)?;
            match sub {
                "record_type" => edit_string(&mut e.record_type, edit),
                "payload" => match edit {
                    Edit::Set(v) => e.payload = v.as_bytes().to_vec(),
                    Edit::Perturb => match e.payload.first_mut() {
                        Some(b0) => *b0 ^= 1,
                        None => e.payload.push(0),
                    },
                },
                "prev_same_type" => edit_opt_digest(&mut e.prev_same_type, f, edit)?,
                _ => return Err(unknown()),
            }
        }
    }
    Ok(())
}

pub(super) fn log_fields(_b: &LogBlock) -> Vec<String> {
    let mut out: Vec<String> = COORD_FIELDS.iter().map(|s| s.to_string()).collect();
    out.extend(
        ["event", "actor", "timestamp", "place", "viewed", "h_main", "h_yellow", "h_prev_red", "self_hash"].map(String::from),
    );
    out
}

pub(super) fn edit_log(b: &mut LogBlock, field: &str, edit: &Edit) -> Result<(), BlockError> {
    match field {
        f if f.starts_with("coord.") => edit_coord(&mut b.coord, f, edit)?,
        "event" => {
            b.event = match edit {
                Edit::Set(v) => *LogEvent::ALL.iter().find(|x| x.name() == v).ok_or_else(|| invalid(field, v))?,
                Edit::Perturb => LogEvent::ALL[(usize::from(b.event.to_byte()) + 1) % 3],
            }
        }
        "actor" => edit_string(&mut b.actor, edit),
        "timestamp" => match edit {
            Edit::Set(v) => b.timestamp = v.parse().map_err(|_| invalid(field, v))?,
            Edit::Perturb => b.timestamp = b.timestamp.wrapping_add(1),
        },
        "place" => edit_string(&mut b.place, edit),
        "viewed" => edit_string(&mut b.viewed, edit),
        "h_main" => edit_digest(&mut b.h_main, field, edit)?,
        "h_yellow" => edit_digest(&mut b.h_yellow, field, edit)?,
        "h_prev_red" => edit_digest(&mut b.h_prev_red, field, edit)?,
        "self_hash" => edit_digest(&mut b.self_hash, field, edit)?,
        _ => return Err(BlockError::UnknownField(field.to_string())),
    }
    Ok(())
}

pub(super) fn note_fields() -> Vec<String> {
    let mut out: Vec<String> = COORD_FIELDS.iter().map(|s| s.to_string()).collect();
    out.extend(["timestamp", "actor", "place", "operation", "reason", "prev", "self_hash"].map(String::from));
    out
}

pub(super) fn edit_note(b: &mut AuditNote, field: &str, edit: &Edit) -> Result<(), BlockError> {
    match field {
        f if f.starts_with("coord.") => edit_coord(&mut b.coord, f, edit)?,
        "timestamp" => match edit {
            Edit::Set(v) => b.timestamp = v.parse().map_err(|_| invalid(field, v))?,
            Edit::Perturb => b.timestamp = b.timestamp.wrapping_add(1),
        },
        "actor" => edit_string(&mut b.actor, edit),
        "place" => edit_string(&mut b.place, edit),
        "operation" => edit_string(&mut b.operation, edit),
        "reason" => edit_string(&mut b.reason, edit),
        "prev" => edit_digest(&mut b.prev, field, edit)?,
        "self_hash" => edit_digest(&mut b.self_hash, field, edit)?,
        _ => return Err(BlockError::UnknownField(field.to_string())),
    }
    Ok(())
}
