//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line per
//! criterion and exits non-zero if any fails.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::thread;
use std::time::Instant;

use bctree::blocks::{Edit, IdentityVariant, LogEvent};
use bctree::ledger::{verify_tree, BlockRef, LedgerState};
use bctree::merkle::{self, Digest, MerkleProof, MerkleTree};
use bctree::net::{parse_script, quorum_reached, run_scenario, Network, RepairEntry, SimConfig};
use bctree::store;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest as _, Sha256};

use common::{fixture, random_ledger, report_oracle};

/// Proof-size ceiling for a five-leaf tree.
const MAX_PROOF_BYTES: usize = 140;
const ROUND_TRIP_TREES: usize = 100;
const BIT_MUTATIONS: usize = 100;
const REPORT_SEQUENCES: usize = 200;

fn sha(data: &[u8]) -> [u8; 32] {
    Sha256::digest(data).into()
}

fn criterion_1() -> String {
    let leaves: Vec<Vec<u8>> = (1..=5).map(|i| format!("L{i}").into_bytes()).collect();
    let tree = MerkleTree::build(&leaves).unwrap();
    let mut sizes = BTreeSet::new();
    for i in 0..5 {
        let bytes = tree.prove(i).unwrap().to_bytes();
        assert!(bytes.len() <= MAX_PROOF_BYTES, "leaf {i}: {} bytes", bytes.len());
        // 4-byte index + 3 levels of (32-byte digest + side byte).
        assert_eq!(bytes.len(), 4 + 3 * (32 + 1));
        sizes.insert(bytes.len());
    }
    format!("5-leaf proof = {:?} bytes <= {MAX_PROOF_BYTES}", sizes)
}

fn criterion_2() -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut proofs = 0;
    for _ in 0..ROUND_TRIP_TREES {
        let n = rng.gen_range(1..=64);
        let leaves: Vec<Vec<u8>> = (0..n).map(|_| (0..rng.gen_range(0..48)).map(|_| rng.gen()).collect()).collect();
        let tree = MerkleTree::build(&leaves).unwrap();
        for (i, leaf) in leaves.iter().enumerate() {
            let proof = tree.prove(i).unwrap();
            let decoded = MerkleProof::from_bytes(&proof.to_bytes()).unwrap();
            assert!(merkle::verify(leaf, &decoded, &tree.root()), "tree of {n}, leaf {i}");
            proofs += 1;
        }
    }
    let mut rejected = 0;
    for k in 0..BIT_MUTATIONS {
        let n = rng.gen_range(1..=64);
        let leaves: Vec<Vec<u8>> = (0..n).map(|j| format!("leaf-{k}-{j}").into_bytes()).collect();
        let tree = MerkleTree::build(&leaves).unwrap();
        let i = rng.gen_range(0..n);
        let proof = tree.prove(i).unwrap();
        let mut leaf = leaves[i].clone();
        let mut bytes = proof.to_bytes();
        let mut root = tree.root();
        // Flip one bit in the leaf, the encoded proof, or the root.
        match k % 3 {
            0 => {
                let bit = rng.gen_range(0..leaf.len() * 8);
                leaf[bit / 8] ^= 1 << (bit % 8);
            }
            1 if !proof.path.is_empty() => {
                let bit = rng.gen_range(0..bytes.len() * 8);
                bytes[bit / 8] ^= 1 << (bit % 8);
            }
            _ => root = root.with_bit_flipped(rng.gen_range(0..256)),
        }
        let ok = match MerkleProof::from_bytes(&bytes) {
            Ok(p) => merkle::verify(&leaf, &p, &root),
            Err(_) => false,
        };
        assert!(!ok, "mutation {k} still verified");
        rejected += 1;
    }
    format!("{ROUND_TRIP_TREES} trees, {proofs} proofs verified; {rejected}/{BIT_MUTATIONS} bit flips rejected")
}

fn criterion_3() -> String {
    let leaves: Vec<&[u8]> = vec![b"L1", b"L2", b"L3", b"L4", b"L5"];
    let tree = MerkleTree::build(&leaves).unwrap();
    let h5 = sha(b"L5");
    let mut cat = h5.to_vec();
    cat.extend_from_slice(&h5);
    let expected = Digest::from_bytes(sha(&cat));
    let level1 = &tree.levels()[1];
    assert_eq!(level1.len(), 3);
    assert_eq!(level1[2], expected);
    format!("level-1 tail = H(H(L5)||H(L5)) = {}", &expected.to_hex()[..16])
}

fn criterion_4() -> String {
    let mut checked = 0;
    for n in 2..=9usize {
        for c in 0..=n {
            // c/n > 51/100 in exact integer arithmetic.
            let oracle = 100 * c > 51 * n;
            assert_eq!(quorum_reached(c, n), oracle, "c={c} n={n}");
            if c >= 1 {
                let mut cfg = SimConfig::new(n, 4);
                cfg.byzantine = (c + 1..=n).map(|i| format!("n{i}")).collect();
                let mut net = Network::new(cfg).unwrap();
                let script = parse_script("1 n1 onboard actor=r role=authority code=X").unwrap();
                let bctree::net::ScriptOp::Command(req) = &script[0].op else { unreachable!() };
                let p = net.propose("n1", req).unwrap();
                assert_eq!(p.confirmations.len(), c);
                assert_eq!(p.committed, oracle, "network c={c} n={n}");
            }
            checked += 1;
        }
    }
    format!("{checked} (N, c) pairs match the rational oracle")
}

fn repair_round(tampered: usize) -> (Vec<RepairEntry>, bool, Vec<String>) {
    let text = "1 n1 onboard actor=reg role=authority code=AAA\n\
                2 n2 write actor=dr role=doctor patient=1 entry=blood_test:hb=13\n\
                3 n3 write actor=dr role=doctor patient=1 entry=xray:clear\n\
                4 n4 read actor=dr role=doctor patient=1\n";
    let script = parse_script(text).unwrap();
    let mut sc = run_scenario(SimConfig::new(5, 11), &script).unwrap();
    let net = &mut sc.network;
    let target = BlockRef::Yellow { patient: 1, record: 1 };
    let clean = net.replica("n5").unwrap().clone();
    for i in 1..=tampered {
        net.tamper(&format!("n{i}"), target, "entry.0.payload", &Edit::Set("hb=9".into())).unwrap();
    }
    for n in net.nodes() {
        let dirty = !verify_tree(&n.replica).is_empty();
        let idx: usize = n.id[1..].parse().unwrap();
        assert_eq!(dirty, idx <= tampered, "{}", n.id);
    }
    let report = net.audit_and_repair();
    let states = net.state_lines();
    let converged = net.converged() && net.nodes().iter().all(|n| n.replica == clean);
    (report.entries, converged, states)
}

fn criterion_5() -> String {
    let target = BlockRef::Yellow { patient: 1, record: 1 };
    let mut out = Vec::new();
    for tampered in 1..=3 {
        let (entries, converged, states) = repair_round(tampered);
        let again = repair_round(tampered);
        assert_eq!((&entries, converged, &states), (&again.0, again.1, &again.2), "non-deterministic");
        if tampered < 3 {
            assert!(converged, "{tampered} tampered: not converged");
            assert_eq!(entries.len(), tampered);
            out.push(format!("{tampered}/5 repaired"));
        } else {
            assert!(!converged);
            assert_eq!(entries, vec![RepairEntry::Unrepairable { block: target, best: 2 }]);
            out.push("3/5 Unrepairable".to_string());
        }
    }
    out.join(", ")
}

fn criterion_6() -> String {
    let text = fs::read_to_string(fixture("lifecycle.script")).unwrap();
    let script = parse_script(&text).unwrap();
    let sc = run_scenario(SimConfig::new(5, 7), &script).unwrap();
    assert_eq!(sc.rejects, 0);
    assert_eq!(sc.commits, script.iter().filter(|l| matches!(l.op, bctree::net::ScriptOp::Command(_))).count());
    assert!(sc.network.converged());
    let l = sc.network.replica("n1").unwrap();
    assert!(verify_tree(l).is_empty());
    assert!(l.is_closed(1));
    let refused = sc.transcript.iter().filter(|t| t.ends_with("error=SubchainClosed")).count();
    assert_eq!(refused, 1);
    let red = l.red(1);
    let yellow = l.yellow(1);
    assert!(red.len() > yellow.len());
    let reads = red.iter().filter(|b| b.event == LogEvent::Read).count();
    assert_eq!(reads, 5);
    assert_eq!(red.iter().filter(|b| b.event == LogEvent::FailedAttempt).count(), 2);
    assert!(sc.transcript.iter().filter(|t| t.contains(" VERIFY ")).all(|t| t.ends_with("violations=0")));
    format!("0 violations, closed chain refused write, red={} > yellow={}", red.len(), yellow.len())
}

fn criterion_7() -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let l = random_ledger(&mut rng, 3, 30);
    assert!(verify_tree(&l).is_empty());
    let (mut mutations, mut cross_required) = (0, 0);
    for r in l.block_refs() {
        let block = l.block(r).unwrap();
        let needs_cross = match r {
            BlockRef::Main(h) => {
                let v = l.main_chain()[h as usize].variant;
                matches!(v, IdentityVariant::Patient | IdentityVariant::FiscalChange)
            }
            BlockRef::Yellow { .. } => true,
            _ => false,
        };
        for field in block.field_names() {
            let mut m = l.clone();
            m.tamper(r, &field, &Edit::Perturb).unwrap();
            let v = verify_tree(&m);
            assert!(!v.is_empty(), "{r} {field}: undetected");
            if needs_cross {
                assert!(v.iter().any(|x| x.check.is_cross_hash()), "{r} {field}: no cross-hash violation");
                cross_required += 1;
            }
            mutations += 1;
        }
    }
    format!("{} blocks, {mutations}/{mutations} field mutations detected, {cross_required} broke a log cross-hash", l.block_refs().len())
}

fn criterion_8() -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut reports = 0;
    for seq in 0..REPORT_SEQUENCES {
        let patients = rng.gen_range(1..=4);
        let ops = rng.gen_range(5..=60);
        let mut l = random_ledger(&mut rng, patients, ops);
        for p in 1..=patients {
            for ty in common::TYPES {
                let expected = report_oracle(&l, p, ty);
                let (items, _) = l.assemble_report(&common::doctor(), p, ty).unwrap();
                assert_eq!(items, expected, "sequence {seq}, patient {p}, type {ty}");
                reports += 1;
            }
        }
        assert!(verify_tree(&l).is_empty());
    }
    format!("{REPORT_SEQUENCES} sequences, {reports} reports equal the linear-scan oracle")
}

fn small_fixture() -> LedgerState {
    let text = "1 n1 onboard actor=reg role=authority code=AAA info.name=Ann\n\
                2 n1 write actor=dr role=doctor patient=1 entry=xray:ok\n\
                3 n1 read actor=dr role=doctor patient=1\n\
                4 n1 read actor=dr role=doctor patient=2\n";
    let mut cfg = SimConfig::new(1, 0);
    cfg.catalog = vec![bctree::blocks::CatalogEntry::new("xray", "x")];
    let sc = run_scenario(cfg, &parse_script(text).unwrap()).unwrap();
    sc.network.replica("n1").unwrap().clone()
}

fn criterion_9() -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let l = random_ledger(&mut rng, 3, 40);
    let dir = tempfile::tempdir().unwrap();
    store::persist(&l, dir.path()).unwrap();
    let back = store::load(dir.path()).unwrap();
    for r in l.block_refs() {
        assert_eq!(l.block(r).unwrap().self_hash(), back.block(r).unwrap().self_hash());
        assert_eq!(back.block(r).unwrap().block_hash(), back.block(r).unwrap().self_hash());
    }
    assert_eq!(back, l);

    let small = small_fixture();
    let files = store::encode_files(&small);
    assert!(store::load_from_files(&files).is_ok());
    let jobs: Vec<(String, usize)> =
        files.iter().flat_map(|(name, bytes)| (0..bytes.len()).map(move |o| (name.clone(), o))).collect();
    let boundaries: BTreeMap<String, BTreeSet<usize>> = files
        .iter()
        .map(|(name, bytes)| {
            let mut at = BTreeSet::from([0]);
            let mut pos = 0;
            while pos < bytes.len() {
                pos += 4 + u32::from_be_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
                at.insert(pos);
            }
            (name.clone(), at)
        })
        .collect();
    let workers = thread::available_parallelism().map_or(4, |n| n.get());
    let detected: usize = thread::scope(|s| {
        let handles: Vec<_> = jobs
            .chunks(jobs.len().div_ceil(workers))
            .map(|chunk| {
                let files = &files;
                let boundaries = &boundaries;
                s.spawn(move || {
                    let mut count = 0;
                    for (name, offset) in chunk {
                        let mut mutated = files.clone();
                        let original = files[name][*offset];
                        for delta in 1..=255u8 {
                            mutated.get_mut(name).unwrap()[*offset] = original.wrapping_add(delta);
                            assert!(
                                store::load_from_files(&mutated).is_err(),
                                "{name} offset {offset} value {:#04x} undetected",
                                original.wrapping_add(delta)
                            );
                            count += 1;
                        }
                        mutated.get_mut(name).unwrap()[*offset] = original;
                        // Cutting inside a record must be reported against the file.
                        if !boundaries[name].contains(offset) {
                            let mut cut = files.clone();
                            cut.get_mut(name).unwrap().truncate(*offset);
                            match store::load_from_files(&cut) {
                                Err(store::StoreError::CorruptChain { file, .. }) => assert_eq!(&file, name),
                                other => panic!("{name} truncated at {offset}: {:?}", other.map(|_| ())),
                            }
                        }
                    }
                    count
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap_or_else(|e| panic::resume_unwind(e))).sum()
    });
    let total: usize = files.values().map(|b| b.len()).sum();
    let cuts = total - boundaries.values().map(|b| b.len() - 1).sum::<usize>();
    format!(
        "{} blocks round-trip; {detected}/{} single-byte corruptions and {cuts} mid-record truncations detected",
        l.block_refs().len(),
        total * 255
    )
}

fn criterion_10() -> String {
    let text = fs::read_to_string(fixture("lifecycle.script")).unwrap();
    let script = parse_script(&text).unwrap();
    let mut cfg = SimConfig::new(7, 1234);
    cfg.drop_rate = 0.25;
    cfg.byzantine.insert("n6".into());
    let a = run_scenario(cfg.clone(), &script).unwrap().transcript_text();
    let b = run_scenario(cfg, &script).unwrap().transcript_text();
    assert_eq!(a.as_bytes(), b.as_bytes());
    let c = run_scenario(SimConfig::new(5, 7), &script).unwrap().transcript_text();
    let d = run_scenario(SimConfig::new(5, 7), &script).unwrap().transcript_text();
    assert_eq!(c, d);
    format!("transcripts byte-identical ({} and {} bytes)", a.len(), c.len())
}

fn main() {
    let criteria: [(&str, fn() -> String); 10] = [
        ("merkle proof size", criterion_1),
        ("merkle round trip", criterion_2),
        ("odd-leaf duplication", criterion_3),
        ("quorum law", criterion_4),
        ("tamper and repair", criterion_5),
        ("patient lifecycle", criterion_6),
        ("cross-hash lock", criterion_7),
        ("report oracle", criterion_8),
        ("persistence", criterion_9),
        ("determinism", criterion_10),
    ];
    panic::set_hook(Box::new(|_| {}));
    let start = Instant::now();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let t = Instant::now();
        match panic::catch_unwind(AssertUnwindSafe(f)) {
            Ok(detail) => println!("criterion {:>2} PASS {name}: {detail} ({:.2?})", i + 1, t.elapsed()),
            Err(e) => {
                failed += 1;
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                println!("criterion {:>2} FAIL {name}: {msg}", i + 1);
            }
        }
    }
    println!("acceptance: {}/{} passed in {:.2?}", criteria.len() - failed, criteria.len(), start.elapsed());
    if failed > 0 {
        std::process::exit(1);
    }
}
