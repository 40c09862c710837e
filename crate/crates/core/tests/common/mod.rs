//! Shared helpers for integration tests: a seeded random workload and a
//! brute-force report oracle.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::PathBuf;

use bctree::blocks::{BlockCoord, CatalogEntry};
use bctree::ledger::{default_catalog, AccessCtx, Credential, EntryInput, LedgerState, ReadQuery, Role};
use rand::seq::SliceRandom;
use rand::Rng;

pub const TYPES: [&str; 4] = ["blood_test", "xray", "diagnosis", "prescription"];

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn authority() -> AccessCtx {
    AccessCtx::new(Credential::new("registry", Role::Authority), "n1")
}

pub fn doctor() -> AccessCtx {
    AccessCtx::new(Credential::new("dr", Role::Doctor), "n2")
}

/// Every entry of `record_type` in the patient's medical chain, newest
/// first, found by scanning every block.
pub fn report_oracle(l: &LedgerState, patient: u32, record_type: &str) -> Vec<(BlockCoord, Vec<u8>)> {
    let mut out = Vec::new();
    for b in l.yellow(patient).iter().rev() {
        for e in b.entries.iter().rev() {
            if e.record_type == record_type {
                out.push((b.coord, e.payload.clone()));
            }
        }
    }
    out
}

/// Applies one random operation. Patients are drawn from `1..=max_patients`
/// plus one index that never exists.
pub fn random_op<R: Rng>(l: &mut LedgerState, rng: &mut R, max_patients: u32, step: usize) {
    let patient = rng.gen_range(1..=max_patients + 1);
    let ty = *TYPES.choose(rng).unwrap();
    match rng.gen_range(0..100) {
        0..=11 if l.patient_count() < max_patients => {
            let info = BTreeMap::from([("name".to_string(), format!("P{step}")), ("dob".to_string(), "1970-01-01".to_string())]);
            let _ = l.onboard_patient(&authority(), &format!("FC{step:04}"), info);
        }
        0..=44 => {
            let n = rng.gen_range(1..=3);
            let entries = (0..n)
                .map(|i| EntryInput::new(*TYPES.choose(rng).unwrap(), format!("v{step}.{i}:{}", rng.gen::<u16>())))
                .collect();
            let _ = l.write_record(&doctor(), patient, entries);
        }
        45..=59 => {
            let q = if rng.gen_bool(0.5) { ReadQuery::Latest } else { ReadQuery::Type(ty.to_string()) };
            let _ = l.read_record(&doctor(), patient, &q);
        }
        60..=71 => {
            let _ = l.assemble_report(&doctor(), patient, ty);
        }
        72..=76 => {
            let _ = l.close_subchain(&authority(), patient);
        }
        77..=83 => {
            let _ = l.change_fiscal_code(&authority(), patient, &format!("NC{step:04}"));
        }
        84..=88 => {
            let _ = l.update_catalog(&authority(), vec![CatalogEntry::new(format!("code{step}"), "added")]);
        }
        89..=95 => {
            let bad = AccessCtx::new(Credential::invalid("eve", Role::Doctor), "n3");
            let _ = l.write_record(&bad, patient, vec![EntryInput::new(ty, "x")]);
        }
        _ => {
            let patient_role = AccessCtx::new(Credential::new("someone", Role::Patient), "home");
            let _ = l.read_record(&patient_role, patient, &ReadQuery::Latest);
        }
    }
}

/// A ledger with `patients` onboarded patients followed by `ops` random
/// operations.
pub fn random_ledger<R: Rng>(rng: &mut R, patients: u32, ops: usize) -> LedgerState {
    let mut l = LedgerState::new(default_catalog()).unwrap();
    for p in 0..patients {
        l.onboard_patient(&authority(), &format!("BASE{p}"), BTreeMap::new()).unwrap();
    }
    for step in 0..ops {
        random_op(&mut l, rng, patients, step);
    }
    l
}
