mod args;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::Parser;

use bctree::blocks::{CatalogEntry, Edit};
use bctree::ledger::{
    default_catalog, verify_tree, AccessCtx, BlockRef, Command, Credential, EntryInput, LedgerState, ReadQuery, Request,
};
use bctree::net::{parse_script, run_scenario, Network, SimConfig};
use bctree::store::{self, DirLock, StoreError, MAIN_FILE};

use args::{Cli, CredArgs, Verb};

/// Usage, storage and configuration failures.
const EXIT_USAGE: u8 = 2;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_USAGE)
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    let porcelain = cli.porcelain;
    let dir = cli.ledger.as_path();
    match cli.verb {
        Verb::Init { catalog } => init(dir, &catalog),
        Verb::Onboard { cred, code, info } => {
            let personal_info = info
                .iter()
                .map(|kv| split(kv, '=').map(|(k, v)| (k.to_string(), v.to_string())))
                .collect::<anyhow::Result<BTreeMap<_, _>>>()?;
            apply(dir, porcelain, &cred, Command::Onboard { fiscal_code: code, personal_info })
        }
        Verb::Write { cred, patient, entries } => {
            let entries = entries
                .iter()
                .map(|e| split(e, ':').map(|(t, p)| EntryInput::new(t, p.as_bytes())))
                .collect::<anyhow::Result<_>>()?;
            apply(dir, porcelain, &cred, Command::Write { patient, entries })
        }
        Verb::Read { cred, patient, record_type } => {
            let query = record_type.map_or(ReadQuery::Latest, ReadQuery::Type);
            apply(dir, porcelain, &cred, Command::Read { patient, query })
        }
        Verb::Report { cred, patient, record_type } => {
            apply(dir, porcelain, &cred, Command::Report { patient, record_type })
        }
        Verb::Close { cred, patient } => apply(dir, porcelain, &cred, Command::Close { patient }),
        Verb::ChangeCode { cred, patient, code } => {
            apply(dir, porcelain, &cred, Command::ChangeCode { patient, new_code: code })
        }
        Verb::CatalogAdd { cred, entries } => {
            let entries = parse_catalog(&entries)?;
            apply(dir, porcelain, &cred, Command::CatalogAdd { entries })
        }
        Verb::Verify => verify(dir, porcelain),
        Verb::Export => {
            let state = store::load_unverified(dir)?;
            print!("{}", store::export(&state));
            Ok(ExitCode::SUCCESS)
        }
        Verb::Tamper { block, field, value } => tamper(dir, &block, &field, value),
        Verb::Sim { nodes, script, seed, drop_rate, byzantine } => {
            let text = fs::read_to_string(&script).with_context(|| format!("reading {}", script.display()))?;
            let lines = parse_script(&text).with_context(|| script.display().to_string())?;
            let mut config = SimConfig::new(nodes, seed);
            config.drop_rate = drop_rate;
            config.byzantine = byzantine.into_iter().collect();
            let scenario = run_scenario(config, &lines)?;
            print!("{}", scenario.transcript_text());
            Ok(ExitCode::SUCCESS)
        }
        Verb::AuditRepair { replicas } => audit_repair(&replicas, porcelain),
    }
}

fn split(s: &str, sep: char) -> anyhow::Result<(&str, &str)> {
    s.split_once(sep).ok_or_else(|| anyhow!("expected `a{sep}b`, got `{s}`"))
}

fn parse_catalog(entries: &[String]) -> anyhow::Result<Vec<CatalogEntry>> {
    entries.iter().map(|e| split(e, ':').map(|(c, l)| CatalogEntry::new(c, l))).collect()
}

fn init(dir: &Path, catalog: &[String]) -> anyhow::Result<ExitCode> {
    if dir.join(MAIN_FILE).exists() {
        bail!("{} already holds a ledger", dir.display());
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let _lock = DirLock::acquire(dir)?;
    let catalog = if catalog.is_empty() { default_catalog() } else { parse_catalog(catalog)? };
    let state = LedgerState::new(catalog)?;
    store::persist(&state, dir)?;
    println!("initialized {} genesis={}", dir.display(), state.main_chain()[0].self_hash);
    Ok(ExitCode::SUCCESS)
}

/// Runs one ledger command. The state is persisted even when the command
/// fails, since failed attempts are logged too.
fn apply(dir: &Path, porcelain: bool, cred: &CredArgs, command: Command) -> anyhow::Result<ExitCode> {
    let _lock = DirLock::acquire(dir)?;
    let mut state = store::load(dir)?;
    let credential = Credential { actor_id: cred.actor.clone(), role: cred.role, valid: cred.valid };
    let req = Request::new(AccessCtx::new(credential, cred.place.as_str()), command);
    let result = state.execute(&req);
    store::persist(&state, dir)?;
    match result {
        Ok(resp) => {
            for line in resp.lines(porcelain) {
                println!("{line}");
            }
            Ok(ExitCode::SUCCESS)
        }
        Err(e) => {
            if porcelain {
                println!("error\t{}\t{e}", e.name());
            } else {
                eprintln!("error: {e}");
            }
            Ok(ExitCode::FAILURE)
        }
    }
}

fn verify(dir: &Path, porcelain: bool) -> anyhow::Result<ExitCode> {
    let state = match store::load_unverified(dir) {
        Ok(s) => s,
        Err(e @ StoreError::CorruptChain { .. }) => {
            println!("{}", if porcelain { format!("corrupt\t{e}") } else { e.to_string() });
            return Ok(ExitCode::FAILURE);
        }
        Err(e) => return Err(e.into()),
    };
    let violations = verify_tree(&state);
    for v in &violations {
        if porcelain {
            println!("violation\t{}\t{}\t{}\t{}", v.block.chain_name(), v.block.position(), v.check.name(), v.detail);
        } else {
            println!("{v}");
        }
    }
    if violations.is_empty() {
        println!("{}", if porcelain { "ok\t0".to_string() } else { "OK 0 violations".to_string() });
        Ok(ExitCode::SUCCESS)
    } else {
        println!("{}", if porcelain { format!("fail\t{}", violations.len()) } else { format!("FAIL {} violations", violations.len()) });
        Ok(ExitCode::FAILURE)
    }
}

fn tamper(dir: &Path, block: &str, field: &str, value: Option<String>) -> anyhow::Result<ExitCode> {
    let _lock = DirLock::acquire(dir)?;
    let r: BlockRef = block.parse().map_err(|e| anyhow!("{e}"))?;
    let mut state = store::load_unverified(dir)?;
    let edit = value.map_or(Edit::Perturb, Edit::Set);
    state.tamper(r, field, &edit)?;
    store::persist(&state, dir)?;
    println!("tampered {r} field={field}");
    Ok(ExitCode::SUCCESS)
}

fn audit_repair(dirs: &[std::path::PathBuf], porcelain: bool) -> anyhow::Result<ExitCode> {
    let mut locks = Vec::new();
    let mut replicas = Vec::new();
    for d in dirs {
        locks.push(DirLock::acquire(d)?);
        replicas.push(store::load_unverified(d).with_context(|| d.display().to_string())?);
    }
    let config = SimConfig::new(dirs.len(), 0);
    let ids = config.node_ids();
    let mut net = Network::from_replicas(config, replicas)?;
    let report = net.audit_and_repair();
    for (id, d) in ids.iter().zip(dirs) {
        store::persist(net.replica(id).expect("node exists"), d)?;
        println!("{}", if porcelain { format!("node\t{id}\t{}", d.display()) } else { format!("NODE {id} {}", d.display()) });
    }
    for e in &report.entries {
        println!("{}", if porcelain { e.to_string().replace(' ', "\t") } else { e.to_string() });
    }
    let unrepairable = report.unrepairable().len();
    let summary = format!("repaired={} unrepairable={unrepairable} converged={}", report.repaired(), net.converged());
    println!("{}", if porcelain { format!("audit\t{}", summary.replace(' ', "\t")) } else { format!("AUDIT {summary}") });
    Ok(if unrepairable == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}
