//! The bundled math pool and LLM-driven group discovery.

use serde::Deserialize;
use thiserror::Error;

use crate::graph::{CandidateGroup, GroupPool, IntraTopology, PoolError};
use crate::harness::{AgentBackend, BackendError};

pub const MATH_SOLVER: &str = "Math Solver";
pub const MATH_ANALYST: &str = "Mathematical Analyst";
pub const PROGRAMMER: &str = "Programming Expert";
pub const INSPECTOR: &str = "Inspector";

fn role_duty(role: &str) -> &'static str {
    match role {
        MATH_SOLVER => "works the problem step by step and states a numeric result",
        MATH_ANALYST => "restates the problem, identifies the quantities and plans the solution",
        PROGRAMMER => "writes and mentally executes a short program that computes the result",
        INSPECTOR => "checks the reasoning of the others, fixes mistakes and confirms the answer",
        _ => "contributes according to its expertise",
    }
}

/// Composite prompt asking one call to play every role in order.
pub fn composite_prompt(name: &str, roles: &[String], topo: IntraTopology) -> String {
    let mut s = format!("You are the {name}. ");
    if roles.len() == 1 {
        s.push_str(&format!("Act as the {}, who {}.", roles[0], role_duty(&roles[0])));
        return s;
    }
    s.push_str("In a single response, simulate the following roles:\n");
    for r in roles {
        s.push_str(&format!("- {r}: {}\n", role_duty(r)));
    }
    let flow = match topo {
        IntraTopology::Chain => format!("Work in sequence: {}.", roles.join(" -> ")),
        IntraTopology::Star => {
            let (last, rest) = roles.split_last().expect("non-empty roles");
            format!("({}) each report to the {last}, who decides.", rest.join(", "))
        }
        IntraTopology::FullConnected => {
            "Every role reads every earlier role, forming a complete validation triangle.".to_string()
        }
        IntraTopology::Single => String::new(),
    };
    s.push_str(&flow);
    s.push_str(" End with the line `Answer: <final answer>`.");
    s
}

fn make(id: usize, name: &str, expertise: &str, roles: &[&str], topo: IntraTopology) -> CandidateGroup {
    let roles: Vec<String> = roles.iter().map(|r| r.to_string()).collect();
    CandidateGroup {
        id,
        name: name.to_string(),
        expertise: expertise.to_string(),
        role_prompt: composite_prompt(name, &roles, topo),
        roles,
        intra_topology: topo,
    }
}

/// Sixteen groups over four base roles: 4 single-role, 4 two-stage chains,
/// 3 three-stage chains, 3 stars and 2 fully connected triads.
pub fn bundled_math_pool() -> GroupPool {
    use IntraTopology::*;
    let specs: [(&str, &str, &[&str], IntraTopology); 16] = [
        ("Solver Group", "direct arithmetic and algebra", &[MATH_SOLVER], Single),
        ("Analyst Group", "problem decomposition", &[MATH_ANALYST], Single),
        ("Programming Group", "computation by code", &[PROGRAMMER], Single),
        ("Inspection Group", "answer verification", &[INSPECTOR], Single),
        ("Plan-Solve Chain", "planned solving", &[MATH_ANALYST, MATH_SOLVER], Chain),
        ("Solve-Check Chain", "solving with review", &[MATH_SOLVER, INSPECTOR], Chain),
        ("Code-Check Chain", "verified computation", &[PROGRAMMER, INSPECTOR], Chain),
        ("Plan-Code Chain", "planned computation", &[MATH_ANALYST, PROGRAMMER], Chain),
        (
            "Analytic Pipeline",
            "plan, solve and verify",
            &[MATH_ANALYST, MATH_SOLVER, INSPECTOR],
            Chain,
        ),
        (
            "Computational Pipeline",
            "plan, program and verify",
            &[MATH_ANALYST, PROGRAMMER, INSPECTOR],
            Chain,
        ),
        (
            "Hybrid Pipeline",
            "program then solve then verify",
            &[PROGRAMMER, MATH_SOLVER, INSPECTOR],
            Chain,
        ),
        (
            "Dual-Solver Review",
            "independent solutions reconciled by review",
            &[PROGRAMMER, MATH_SOLVER, INSPECTOR],
            Star,
        ),
        (
            "Analyst-Solver Review",
            "analysis and solution reconciled by review",
            &[MATH_ANALYST, MATH_SOLVER, INSPECTOR],
            Star,
        ),
        (
            "Analyst-Coder Review",
            "analysis and code reconciled by review",
            &[MATH_ANALYST, PROGRAMMER, INSPECTOR],
            Star,
        ),
        (
            "Solver Council",
            "mutual cross-checking of a solution",
            &[MATH_ANALYST, MATH_SOLVER, INSPECTOR],
            FullConnected,
        ),
        (
            "Coder Council",
            "mutual cross-checking of a program",
            &[MATH_ANALYST, PROGRAMMER, INSPECTOR],
            FullConnected,
        ),
    ];
    let groups = specs
        .iter()
        .enumerate()
        .map(|(i, (n, e, r, t))| make(i, n, e, r, *t))
        .collect();
    GroupPool::new(groups).expect("bundled pool is valid")
}

#[derive(Debug, Error)]
pub enum DiscoveryError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("no valid group in the response ({} rejected)", .0.len())]
    NoValidGroups(Vec<Rejection>),
    #[error(transparent)]
    Pool(#[from] PoolError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rejection {
    /// 1-based record number in the response.
    pub record: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Discovery {
    pub pool: GroupPool,
    pub rejected: Vec<Rejection>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ProposedGroup {
    name: String,
    expertise: String,
    roles: Vec<String>,
    intra_topology: String,
}

fn parse_topology(s: &str) -> Option<IntraTopology> {
    match s.trim().to_ascii_lowercase().replace(['-', '_', ' '], "").as_str() {
        "single" => Some(IntraTopology::Single),
        "chain" => Some(IntraTopology::Chain),
        "star" => Some(IntraTopology::Star),
        "fullconnected" | "fullyconnected" => Some(IntraTopology::FullConnected),
        _ => None,
    }
}

pub fn discovery_prompt(instruction: &str, k: usize) -> String {
    format!(
        "{instruction}\n\nPropose {k} expert collaboration groups for this domain. \
         Reply with one JSON object per line and nothing else. Each object has exactly the keys \
         \"name\" (string), \"expertise\" (string), \"roles\" (list of role names, at least one) and \
         \"intra_topology\" (one of Single, Chain, Star, FullConnected). Single groups have exactly one role."
    )
}

/// Splits an LLM reply into records: one JSON object per line, or a single
/// JSON array of objects.
fn records(text: &str) -> Vec<String> {
    let trimmed = text.trim();
    if trimmed.starts_with('[') {
        if let Ok(serde_json::Value::Array(items)) = serde_json::from_str::<serde_json::Value>(trimmed) {
            return items.iter().map(|v| v.to_string()).collect();
        }
    }
    trimmed
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with("```"))
        .map(str::to_string)
        .collect()
}

/// Validates every proposed record; valid ones get consecutive ids.
pub fn parse_discovery(text: &str) -> (Vec<CandidateGroup>, Vec<Rejection>) {
    let mut groups: Vec<CandidateGroup> = Vec::new();
    let mut rejected = Vec::new();
    for (i, rec) in records(text).iter().enumerate() {
        let record = i + 1;
        let reject = |reason: String| Rejection { record, reason };
        let p: ProposedGroup = match serde_json::from_str(rec) {
            Ok(p) => p,
            Err(e) => {
                rejected.push(reject(format!("not a group record: {e}")));
                continue;
            }
        };
        let Some(topo) = parse_topology(&p.intra_topology) else {
            rejected.push(reject(format!("unknown intra_topology {:?}", p.intra_topology)));
            continue;
        };
        let roles: Vec<String> = p.roles.iter().map(|r| r.trim().to_string()).collect();
        if roles.iter().any(|r| r.is_empty()) {
            rejected.push(reject("empty role name".into()));
            continue;
        }
        if groups.iter().any(|g| g.name == p.name.trim()) {
            rejected.push(reject(format!("duplicate group name {:?}", p.name)));
            continue;
        }
        let g = CandidateGroup {
            id: groups.len(),
            name: p.name.trim().to_string(),
            expertise: p.expertise.trim().to_string(),
            role_prompt: if roles.is_empty() {
                String::new()
            } else {
                composite_prompt(p.name.trim(), &roles, topo)
            },
            roles,
            intra_topology: topo,
        };
        match g.check() {
            Ok(()) => groups.push(g),
            Err(e) => rejected.push(reject(e.to_string())),
        }
    }
    (groups, rejected)
}

/// Asks the backend for `k` groups and keeps the schema-valid subset.
pub fn discover_pool(backend: &AgentBackend, instruction: &str, k: usize) -> Result<Discovery, DiscoveryError> {
    let reply = backend.call("Group Designer", &discovery_prompt(instruction, k))?;
    let (groups, rejected) = parse_discovery(&reply.text);
    if groups.is_empty() {
        return Err(DiscoveryError::NoValidGroups(rejected));
    }
    Ok(Discovery {
        pool: GroupPool::new(groups)?,
        rejected,
    })
}
