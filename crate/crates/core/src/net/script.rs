//! Scenario scripts and transcripts.
//!
//! A script line is `tick node verb key=value...`. Ledger verbs take the
//! same arguments as [`Request::parse`]; the simulator adds
//!
//! ```text
//! tick node tamper block=<ref> field=<path> [value=<text>]
//! tick node verify          (node may be `*`)
//! tick * audit-repair
//! ```
//!
//! Blank lines and `#` comments are ignored. Ticks must strictly increase.

use std::fmt::Write as _;

use super::{NetError, Network, SimConfig};
use crate::blocks::Edit;
use crate::ledger::{unescape, verify_tree, BlockRef, Request};

#[derive(thiserror::Error, Debug, Clone, PartialEq, Eq)]
#[error("ScriptError: line {line}: {message}")]
pub struct ScriptError {
    pub line: usize,
    pub message: String,
}

#[derive(Clone, Debug)]
pub enum ScriptOp {
    Command(Request),
    Tamper { block: BlockRef, field: String, edit: Edit },
    Verify,
    AuditRepair,
}

#[derive(Clone, Debug)]
pub struct ScriptLine {
    pub line: usize,
    pub tick: u64,
    pub node: String,
    pub op: ScriptOp,
}

pub fn parse_script(text: &str) -> Result<Vec<ScriptLine>, ScriptError> {
    let mut out: Vec<ScriptLine> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let err = |message: String| ScriptError { line, message };
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let tokens: Vec<&str> = content.split_whitespace().collect();
        if tokens.len() < 3 {
            return Err(err("expected `tick node verb [args...]`".into()));
        }
        let tick: u64 = tokens[0].parse().map_err(|_| err(format!("bad tick {:?}", tokens[0])))?;
        if let Some(prev) = out.last() {
            if tick <= prev.tick {
                return Err(err(format!("tick {tick} does not follow tick {}", prev.tick)));
            }
        }
        let node = tokens[1].to_string();
        let verb = tokens[2];
        let args = &tokens[3..];
        let op = match verb {
            "audit-repair" => {
                if !args.is_empty() {
                    return Err(err("audit-repair takes no arguments".into()));
                }
                ScriptOp::AuditRepair
            }
            "verify" => {
                if !args.is_empty() {
                    return Err(err("verify takes no arguments".into()));
                }
                ScriptOp::Verify
            }
            "tamper" => parse_tamper(args).map_err(err)?,
            _ => {
                if node == "*" {
                    return Err(err(format!("{verb} needs a proposing node")));
                }
                let mut req = Request::parse(&tokens[2..], &node).map_err(|e| err(e.to_string()))?;
                req.ctx.tick = Some(tick);
                ScriptOp::Command(req)
            }
        };
        if node == "*" && !matches!(op, ScriptOp::AuditRepair | ScriptOp::Verify) {
            return Err(err(format!("{verb} needs a single node")));
        }
        out.push(ScriptLine { line, tick, node, op });
    }
    Ok(out)
}

fn parse_tamper(args: &[&str]) -> Result<ScriptOp, String> {
    let (mut block, mut field, mut value) = (None, None, None);
    for a in args {
        let (k, v) = a.split_once('=').ok_or_else(|| format!("expected key=value, got {a:?}"))?;
        let v = unescape(v).map_err(|e| e.to_string())?;
        match k {
            "block" => block = Some(v.parse::<BlockRef>().map_err(|e| e.to_string())?),
            "field" => field = Some(v),
            "value" => value = Some(v),
            _ => return Err(format!("unexpected argument {k}")),
        }
    }
    Ok(ScriptOp::Tamper {
        block: block.ok_or("tamper needs block=")?,
        field: field.ok_or("tamper needs field=")?,
        edit: value.map_or(Edit::Perturb, Edit::Set),
    })
}

/// Result of a scenario run.
pub struct Scenario {
    pub transcript: Vec<String>,
    pub network: Network,
    pub commits: usize,
    pub rejects: usize,
}

impl Scenario {
    pub fn transcript_text(&self) -> String {
        let mut s = String::new();
        for l in &self.transcript {
            s.push_str(l);
            s.push('\n');
        }
        s
    }
}

pub fn run_scenario(config: SimConfig, script: &[ScriptLine]) -> Result<Scenario, NetError> {
    let mut t = Vec::new();
    let byz: Vec<&str> = config.byzantine.iter().map(String::as_str).collect();
    t.push(format!(
        "CONFIG nodes={} seed={} byzantine={} drop_rate={} confirm={} repair={}",
        config.node_count,
        config.seed,
        if byz.is_empty() { "-".to_string() } else { byz.join(",") },
        config.drop_rate,
        config.confirm_threshold,
        config.repair_threshold
    ));
    let mut net = Network::new(config)?;
    let (mut commits, mut rejects) = (0, 0);
    let total = net.nodes().len();

    for step in script {
        let tick = step.tick;
        match &step.op {
            ScriptOp::Command(req) => match net.propose(&step.node, req) {
                Err(e) => {
                    rejects += 1;
                    t.push(format!("t={tick} {} {} {}", e.name(), step.node, req.command.verb()));
                }
                Ok(p) => {
                    let r = p.round;
                    t.push(format!("t={tick} r={r} PROPOSE {} {}", p.proposer, req.render()));
                    let mut votes: Vec<(usize, String)> = Vec::new();
                    for id in &p.confirmations {
                        votes.push((node_pos(&net, id), format!("t={tick} r={r} CONFIRM {id}")));
                    }
                    for (id, why) in &p.refusals {
                        votes.push((node_pos(&net, id), format!("t={tick} r={r} REFUSE {id} {}", why.name())));
                    }
                    votes.sort();
                    t.extend(votes.into_iter().map(|(_, l)| l));
                    let c = p.confirmations.len();
                    if p.committed {
                        commits += 1;
                        let outcome = match &p.outcome {
                            Ok(resp) => resp.summary(),
                            Err(e) => format!("error={}", e.name()),
                        };
                        t.push(format!("t={tick} r={r} COMMIT {c}/{total} {outcome}"));
                    } else {
                        rejects += 1;
                        t.push(format!("t={tick} r={r} REJECT {c}/{total}"));
                    }
                }
            },
            ScriptOp::Tamper { block, field, edit } => match net.tamper(&step.node, *block, field, edit) {
                Ok(()) => t.push(format!("t={tick} TAMPER {} {block} {field}", step.node)),
                Err(e) => t.push(format!("t={tick} TAMPER-FAILED {} {block} {field} {}", step.node, e.name())),
            },
            ScriptOp::Verify => {
                let ids: Vec<String> = net.nodes().iter().map(|n| n.id.clone()).collect();
                let targets: Vec<String> = if step.node == "*" { ids } else { vec![step.node.clone()] };
                for id in targets {
                    match net.replica(&id) {
                        Some(r) => t.push(format!("t={tick} VERIFY {id} violations={}", verify_tree(r).len())),
                        None => t.push(format!("t={tick} NotAuthorized {id} verify")),
                    }
                }
            }
            ScriptOp::AuditRepair => {
                let report = net.audit_and_repair();
                for e in &report.entries {
                    t.push(format!("t={tick} {e}"));
                }
                let mut line = String::new();
                let _ = write!(
                    line,
                    "t={tick} AUDIT repaired={} unrepairable={} converged={}",
                    report.repaired(),
                    report.unrepairable().len(),
                    net.converged()
                );
                t.push(line);
            }
        }
    }
    t.push(format!("END commits={commits} rejects={rejects}"));
    t.extend(net.state_lines());
    Ok(Scenario { transcript: t, network: net, commits, rejects })
}

fn node_pos(net: &Network, id: &str) -> usize {
    net.nodes().iter().position(|n| n.id == id).unwrap_or(usize::MAX)
}
