use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use bctree::ledger::{AccessCtx, Credential, EntryInput, LedgerState, ReadQuery, Request, Role};
use bctree::net::{parse_script, run_scenario, SimConfig};
use bctree::store;

fn bctree(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bctree")).arg("--ledger").arg(dir).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

const AUTH: [&str; 4] = ["--actor", "auth1", "--role", "authority"];
const DOC: [&str; 4] = ["--actor", "dr1", "--role", "doctor"];

fn run_ok(dir: &Path, verb: &str, cred: &[&str], rest: &[&str]) -> String {
    let mut args = vec![verb];
    args.extend_from_slice(cred);
    args.extend_from_slice(rest);
    let o = bctree(dir, &args);
    assert_eq!(code(&o), 0, "{verb}: {}", String::from_utf8_lossy(&o.stderr));
    stdout(&o)
}

fn onboarded() -> (tempfile::TempDir, PathBuf) {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("ledger");
    assert_eq!(code(&bctree(&dir, &["init"])), 0);
    run_ok(&dir, "onboard", &AUTH, &["--code", "RSSMRA80", "--info", "name=Mario"]);
    (tmp, dir)
}

fn fixture_script() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/lifecycle.script")
}

#[test]
fn fresh_ledger_verifies() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("l");
    assert_eq!(code(&bctree(&dir, &["init"])), 0);
    let o = bctree(&dir, &["verify"]);
    assert_eq!(code(&o), 0);
    assert_eq!(stdout(&o).trim(), "OK 0 violations");
}

#[test]
fn init_twice_and_missing_ledger_are_usage_errors() {
    let (_tmp, dir) = onboarded();
    assert_eq!(code(&bctree(&dir, &["init"])), 2);
    let empty = dir.with_file_name("nothing");
    assert_eq!(code(&bctree(&empty, &["verify"])), 2);
    let o = bctree(&empty, &["read", "--actor", "dr1", "--role", "doctor", "--patient", "1"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn write_after_close_fails_and_is_logged() {
    let (_tmp, dir) = onboarded();
    run_ok(&dir, "write", &DOC, &["--patient", "1", "--entry", "xray:clear"]);
    run_ok(&dir, "close", &AUTH, &["--patient", "1"]);
    let red = dir.join("p1.red.chain");
    let before = fs::read(&red).unwrap();

    let o = bctree(&dir, &["write", "--actor", "dr1", "--role", "doctor", "--patient", "1", "--entry", "xray:late"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("SubchainClosed"));
    let after = fs::read(&red).unwrap();
    assert!(after.len() > before.len());
    assert_eq!(&after[..before.len()], before.as_slice());
    assert_eq!(code(&bctree(&dir, &["verify"])), 0);
}

#[test]
fn porcelain_rows_are_tab_separated() {
    let (_tmp, dir) = onboarded();
    run_ok(&dir, "write", &DOC, &["--patient", "1", "--entry", "xray:first"]);
    run_ok(&dir, "write", &DOC, &["--patient", "1", "--entry", "xray:second"]);
    let out = run_ok(&dir, "report", &DOC, &["--porcelain", "--patient", "1", "--type", "xray"]);
    let rows: Vec<Vec<&str>> = out.lines().map(|l| l.split('\t').collect()).collect();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[0][0], "report");
    assert_eq!(rows[0][1], "2");
    assert_eq!(rows[1], vec!["item", "1.2", "second"]);
    assert_eq!(rows[2], vec!["item", "1.1", "first"]);

    let o = bctree(&dir, &["--porcelain", "read", "--actor", "x", "--role", "doctor", "--valid", "false", "--patient", "1"]);
    assert_eq!(code(&o), 1);
    assert!(stdout(&o).starts_with("error\tAccessDenied\t"));
}

#[test]
fn tamper_is_reported_then_blocks_mutation() {
    let (_tmp, dir) = onboarded();
    run_ok(&dir, "write", &DOC, &["--patient", "1", "--entry", "xray:clear"]);
    let o = bctree(&dir, &["tamper", "--block", "yellow/1.1", "--field", "entries"]);
    assert_eq!(code(&o), 0);
    let o = bctree(&dir, &["verify"]);
    assert_eq!(code(&o), 1);
    let out = stdout(&o);
    assert!(out.contains("YELLOW 1.1 SELF_HASH"), "{out}");
    assert!(out.lines().last().unwrap().starts_with("FAIL "));
    let o = bctree(&dir, &["read", "--actor", "dr1", "--role", "doctor", "--patient", "1"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("TamperedStore"));
}

#[test]
fn truncated_chain_is_reported_by_verify() {
    let (_tmp, dir) = onboarded();
    let red = dir.join("p1.red.chain");
    let bytes = fs::read(&red).unwrap();
    fs::write(&red, &bytes[..bytes.len() - 3]).unwrap();
    let o = bctree(&dir, &["verify"]);
    assert_eq!(code(&o), 1);
    assert!(stdout(&o).contains("CorruptChain: p1.red.chain"));
}

#[test]
fn audit_repair_restores_minority_replica() {
    let (tmp, dir) = onboarded();
    run_ok(&dir, "write", &DOC, &["--patient", "1", "--entry", "xray:clear"]);
    let copies: Vec<PathBuf> = (1..=3).map(|i| tmp.path().join(format!("r{i}"))).collect();
    for c in &copies {
        fs::create_dir(c).unwrap();
        for e in fs::read_dir(&dir).unwrap() {
            let e = e.unwrap();
            fs::copy(e.path(), c.join(e.file_name())).unwrap();
        }
    }
    assert_eq!(code(&bctree(&copies[1], &["tamper", "--block", "yellow/1.1", "--field", "entries"])), 0);
    assert_eq!(code(&bctree(&copies[1], &["verify"])), 1);

    let args: Vec<&str> = ["audit-repair"].into_iter().chain(copies.iter().map(|c| c.to_str().unwrap())).collect();
    let o = Command::new(env!("CARGO_BIN_EXE_bctree")).args(&args).output().unwrap();
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    let out = stdout(&o);
    assert!(out.contains("REPAIR n2 yellow/1.1 replaced"), "{out}");
    assert!(out.contains("AUDIT repaired=1 unrepairable=0 converged=true"), "{out}");
    for c in &copies {
        assert_eq!(code(&bctree(c, &["verify"])), 0);
        assert_eq!(fs::read(c.join("p1.yellow.chain")).unwrap(), fs::read(dir.join("p1.yellow.chain")).unwrap());
    }
}

#[test]
fn sim_matches_library_and_is_deterministic() {
    let script = fixture_script();
    let sim = |seed: &str| {
        let o = Command::new(env!("CARGO_BIN_EXE_bctree"))
            .args(["sim", "--nodes", "5", "--seed", seed, "--drop-rate", "0.2", "--byzantine", "n5", "--script"])
            .arg(&script)
            .output()
            .unwrap();
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        stdout(&o)
    };
    let first = sim("11");
    assert_eq!(first, sim("11"));

    let lines = parse_script(&fs::read_to_string(&script).unwrap()).unwrap();
    let mut config = SimConfig::new(5, 11);
    config.drop_rate = 0.2;
    config.byzantine.insert("n5".into());
    assert_eq!(first, run_scenario(config, &lines).unwrap().transcript_text());
}

#[test]
fn cli_state_matches_library_state() {
    let (_tmp, dir) = onboarded();
    run_ok(&dir, "write", &DOC, &["--patient", "1", "--entry", "xray:clear", "--entry", "blood_test:ok"]);
    run_ok(&dir, "read", &DOC, &["--patient", "1", "--type", "xray"]);
    let o = bctree(&dir, &["write", "--actor", "mallory", "--role", "patient", "--patient", "1", "--entry", "xray:forged"]);
    assert_eq!(code(&o), 1);
    run_ok(&dir, "change-code", &AUTH, &["--patient", "1", "--code", "RSSMRA81"]);

    let cred = |a: &str, r: Role| AccessCtx::new(Credential::new(a, r), "cli");
    let mut lib = LedgerState::new(bctree::ledger::default_catalog()).unwrap();
    let requests = [
        Request::new(
            cred("auth1", Role::Authority),
            bctree::ledger::Command::Onboard {
                fiscal_code: "RSSMRA80".into(),
                personal_info: [("name".to_string(), "Mario".to_string())].into(),
            },
        ),
        Request::new(
            cred("dr1", Role::Doctor),
            bctree::ledger::Command::Write {
                patient: 1,
                entries: vec![EntryInput::new("xray", "clear"), EntryInput::new("blood_test", "ok")],
            },
        ),
        Request::new(
            cred("dr1", Role::Doctor),
            bctree::ledger::Command::Read { patient: 1, query: ReadQuery::Type("xray".into()) },
        ),
        Request::new(
            cred("mallory", Role::Patient),
            bctree::ledger::Command::Write { patient: 1, entries: vec![EntryInput::new("xray", "forged")] },
        ),
        Request::new(
            cred("auth1", Role::Authority),
            bctree::ledger::Command::ChangeCode { patient: 1, new_code: "RSSMRA81".into() },
        ),
    ];
    for r in &requests {
        let _ = lib.execute(r);
    }
    assert_eq!(store::load(&dir).unwrap(), lib);
    for (name, bytes) in store::encode_files(&lib) {
        assert_eq!(fs::read(dir.join(&name)).unwrap(), bytes, "{name}");
    }
}
