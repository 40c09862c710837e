use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use bctree::ledger::Role;

/// Blockchain-tree ledger for patient records and access audit logs.
#[derive(Parser, Debug)]
#[command(name = "bctree", version)]
pub struct Cli {
    /// Ledger directory.
    #[arg(long, global = true, default_value = "ledger")]
    pub ledger: PathBuf,

    /// Tab-separated machine-readable output.
    #[arg(long, global = true)]
    pub porcelain: bool,

    #[command(subcommand)]
    pub verb: Verb,
}

/// Credential stub attached to every ledger operation.
#[derive(Args, Debug, Clone)]
pub struct CredArgs {
    #[arg(long)]
    pub actor: String,
    #[arg(long)]
    pub role: Role,
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    pub valid: bool,
    /// Where the access happens, recorded in log blocks.
    #[arg(long, default_value = "cli")]
    pub place: String,
}

#[derive(Subcommand, Debug)]
pub enum Verb {
    /// Create a new ledger with its genesis block.
    Init {
        /// Catalog entry `code:label`; defaults to a built-in list.
        #[arg(long = "catalog", value_name = "CODE:LABEL")]
        catalog: Vec<String>,
    },
    /// Register a patient on the main chain.
    Onboard {
        #[command(flatten)]
        cred: CredArgs,
        #[arg(long)]
        code: String,
        /// Personal information `key=value`.
        #[arg(long = "info", value_name = "KEY=VALUE")]
        info: Vec<String>,
    },
    /// Append a medical record block.
    Write {
        #[command(flatten)]
        cred: CredArgs,
        #[arg(long)]
        patient: u32,
        #[arg(long = "entry", value_name = "TYPE:PAYLOAD", required = true)]
        entries: Vec<String>,
    },
    /// Read the latest record, or the latest entries of one type.
    Read {
        #[command(flatten)]
        cred: CredArgs,
        #[arg(long)]
        patient: u32,
        #[arg(long = "type")]
        record_type: Option<String>,
    },
    /// Collect every entry of one type, newest first.
    Report {
        #[command(flatten)]
        cred: CredArgs,
        #[arg(long)]
        patient: u32,
        #[arg(long = "type")]
        record_type: String,
    },
    /// Close a patient's medical record chain.
    Close {
        #[command(flatten)]
        cred: CredArgs,
        #[arg(long)]
        patient: u32,
    },
    /// Record a fiscal-code change.
    ChangeCode {
        #[command(flatten)]
        cred: CredArgs,
        #[arg(long)]
        patient: u32,
        #[arg(long)]
        code: String,
    },
    /// Add record types to the catalog.
    CatalogAdd {
        #[command(flatten)]
        cred: CredArgs,
        #[arg(long = "entry", value_name = "CODE:LABEL", required = true)]
        entries: Vec<String>,
    },
    /// Check every block and link; exit 1 on any violation.
    Verify,
    /// Print every block as one `key=value` line.
    Export,
    /// Edit one block field on disk, bypassing all checks.
    Tamper {
        /// Block address such as `main/1`, `yellow/2.3`, `red/2.4`, `global/1`.
        #[arg(long)]
        block: String,
        #[arg(long)]
        field: String,
        /// New value; omitted means a deterministic perturbation.
        #[arg(long)]
        value: Option<String>,
    },
    /// Run a scenario script on a simulated network and print the transcript.
    Sim {
        #[arg(long)]
        nodes: usize,
        #[arg(long)]
        script: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.0)]
        drop_rate: f64,
        /// Node that refuses every confirmation, such as `n4`.
        #[arg(long)]
        byzantine: Vec<String>,
    },
    /// Repair replica directories by majority vote.
    AuditRepair {
        /// One ledger directory per node.
        #[arg(required = true, num_args = 2..)]
        replicas: Vec<PathBuf>,
    },
}
