mod common;

use std::fs;

use bctree::blocks::Block;
use bctree::ledger::{verify_tree, BlockRef, Check, LedgerState};
use bctree::store::{self, DirLock, StoreError};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::random_ledger;

fn sample() -> LedgerState {
    random_ledger(&mut ChaCha8Rng::seed_from_u64(5), 2, 25)
}

#[test]
fn persist_then_load_preserves_hashes() {
    let l = sample();
    let dir = tempfile::tempdir().unwrap();
    store::persist(&l, dir.path()).unwrap();
    let back = store::load(dir.path()).unwrap();
    assert!(verify_tree(&back).is_empty());
    for r in l.block_refs() {
        assert_eq!(l.block(r).unwrap().self_hash(), back.block(r).unwrap().self_hash());
    }
    assert_eq!(back, l);
}

#[test]
fn persist_twice_is_byte_identical() {
    let l = sample();
    let dir = tempfile::tempdir().unwrap();
    store::persist(&l, dir.path()).unwrap();
    let snapshot = |d: &std::path::Path| {
        let mut v: Vec<(String, Vec<u8>)> = fs::read_dir(d)
            .unwrap()
            .map(|e| e.unwrap())
            .map(|e| (e.file_name().into_string().unwrap(), fs::read(e.path()).unwrap()))
            .collect();
        v.sort();
        v
    };
    let first = snapshot(dir.path());
    store::persist(&l, dir.path()).unwrap();
    assert_eq!(snapshot(dir.path()), first);
}

#[test]
fn growth_is_appended() {
    let mut l = sample();
    let dir = tempfile::tempdir().unwrap();
    store::persist(&l, dir.path()).unwrap();
    let red = dir.path().join("p1.red.chain");
    let before = fs::read(&red).unwrap();
    let _ = l.read_record(&common::doctor(), 1, &bctree::ledger::ReadQuery::Latest);
    store::persist(&l, dir.path()).unwrap();
    let after = fs::read(&red).unwrap();
    assert!(after.len() > before.len());
    assert_eq!(&after[..before.len()], before.as_slice());
    assert_eq!(store::load(dir.path()).unwrap(), l);
}

#[test]
fn empty_dir_is_storage_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(store::load(dir.path()), Err(StoreError::Storage { .. })));
    assert!(matches!(store::load(&dir.path().join("absent")), Err(StoreError::Storage { .. })));
}

#[test]
fn edited_payload_byte_is_tampered_store() {
    let mut l = sample();
    let dir = tempfile::tempdir().unwrap();
    if l.yellow(1).is_empty() {
        l.write_record(&common::doctor(), 1, vec![bctree::ledger::EntryInput::new("xray", "payload")]).unwrap();
    }
    store::persist(&l, dir.path()).unwrap();
    let path = dir.path().join("p1.yellow.chain");
    let mut bytes = fs::read(&path).unwrap();
    let payload = &l.yellow(1)[0].entries[0].payload;
    let rec = l.yellow(1)[0].to_record();
    let at = rec.windows(payload.len()).position(|w| w == payload.as_slice()).unwrap();
    bytes[4 + at] ^= 0x20;
    fs::write(&path, bytes).unwrap();
    match store::load(dir.path()) {
        Err(StoreError::Tampered(v)) => {
            assert!(v.iter().any(|x| x.block == BlockRef::Yellow { patient: 1, record: 1 } && x.check == Check::SelfHash))
        }
        other => panic!("expected TamperedStore, got {:?}", other.map(|_| ())),
    }
    assert!(store::load_unverified(dir.path()).is_ok());
}

#[test]
fn truncated_red_file_names_file_and_offset() {
    let l = sample();
    let dir = tempfile::tempdir().unwrap();
    store::persist(&l, dir.path()).unwrap();
    let path = dir.path().join("p2.red.chain");
    let bytes = fs::read(&path).unwrap();
    fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
    match store::load(dir.path()) {
        Err(StoreError::CorruptChain { file, offset, .. }) => {
            assert_eq!(file, "p2.red.chain");
            assert!(offset < bytes.len());
        }
        other => panic!("expected CorruptChain, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn lock_is_exclusive() {
    let dir = tempfile::tempdir().unwrap();
    let lock = DirLock::acquire(dir.path()).unwrap();
    assert!(matches!(DirLock::acquire(dir.path()), Err(StoreError::Locked(_))));
    drop(lock);
    assert!(DirLock::acquire(dir.path()).is_ok());
}
