//! Groups, group-level graphs and agent-level graphs.
//!
//! A [`GroupGraph`] is an ordered sequence of group selections (repeats
//! allowed) plus directed edges between *step indices*. Edges always point
//! forward in generation order, so every well-formed graph is a DAG.

mod codec;
mod materialize;

pub use codec::{
    decode_graph, decode_pool, decode_trajectory, encode_graph, encode_pool, encode_trajectory,
    read_trajectories, write_trajectories, CodecError, SCHEMA_VERSION,
};
pub use materialize::{materialize_agent_graph, Agent, AgentGraph, MaterializeMode, SUMMARIZER_ROLE};

use std::collections::{BTreeSet, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum IntraTopology {
    Single,
    Chain,
    Star,
    FullConnected,
}

impl IntraTopology {
    pub fn as_str(self) -> &'static str {
        match self {
            IntraTopology::Single => "Single",
            IntraTopology::Chain => "Chain",
            IntraTopology::Star => "Star",
            IntraTopology::FullConnected => "FullConnected",
        }
    }

    /// Internal role edges `(from, to)` for a group of `n` roles.
    pub fn intra_edges(self, n: usize) -> Vec<(usize, usize)> {
        match self {
            IntraTopology::Single => Vec::new(),
            IntraTopology::Chain => (1..n).map(|k| (k - 1, k)).collect(),
            // many-to-one into the last listed role
            IntraTopology::Star => (0..n.saturating_sub(1)).map(|k| (k, n - 1)).collect(),
            IntraTopology::FullConnected => (0..n)
                .flat_map(|j| (j + 1..n).map(move |k| (j, k)))
                .collect(),
        }
    }
}

impl fmt::Display for IntraTopology {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A reusable collaboration unit: a fixed set of roles with a fixed
/// internal wiring template.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateGroup {
    pub id: usize,
    pub name: String,
    pub expertise: String,
    pub roles: Vec<String>,
    pub intra_topology: IntraTopology,
    /// Composite system prompt describing every internal role.
    pub role_prompt: String,
}

impl CandidateGroup {
    /// Text used to embed this group: `name | expertise | r1,r2,… | topology`.
    pub fn description(&self) -> String {
        format!(
            "{} | {} | {} | {}",
            self.name,
            self.expertise,
            self.roles.join(","),
            self.intra_topology
        )
    }

    pub fn check(&self) -> Result<(), PoolError> {
        if self.roles.is_empty() {
            return Err(PoolError::NoRoles(self.id));
        }
        if self.intra_topology == IntraTopology::Single && self.roles.len() != 1 {
            return Err(PoolError::SingleWithManyRoles {
                id: self.id,
                roles: self.roles.len(),
            });
        }
        if self.name.trim().is_empty() {
            return Err(PoolError::EmptyName(self.id));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PoolError {
    #[error("pool must contain at least one group")]
    Empty,
    #[error("group {0} has no roles")]
    NoRoles(usize),
    #[error("group {id} is Single but lists {roles} roles")]
    SingleWithManyRoles { id: usize, roles: usize },
    #[error("group {0} has an empty name")]
    EmptyName(usize),
    #[error("duplicate group id {0}")]
    DuplicateId(usize),
    #[error("group at position {position} has id {id}; ids must be 0..K-1 in order")]
    IdOutOfOrder { position: usize, id: usize },
    #[error("end_index {found} must equal the group count {expected}")]
    EndIndex { expected: usize, found: usize },
}

/// The fixed candidate pool. The END token occupies index `K`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupPool {
    groups: Vec<CandidateGroup>,
}

impl GroupPool {
    pub fn new(groups: Vec<CandidateGroup>) -> Result<Self, PoolError> {
        if groups.is_empty() {
            return Err(PoolError::Empty);
        }
        let mut seen = HashSet::new();
        for (pos, g) in groups.iter().enumerate() {
            if !seen.insert(g.id) {
                return Err(PoolError::DuplicateId(g.id));
            }
            if g.id != pos {
                return Err(PoolError::IdOutOfOrder {
                    position: pos,
                    id: g.id,
                });
            }
            g.check()?;
        }
        Ok(Self { groups })
    }

    pub fn groups(&self) -> &[CandidateGroup] {
        &self.groups
    }

    pub fn get(&self, id: usize) -> Option<&CandidateGroup> {
        self.groups.get(id)
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    /// Reserved END slot, equal to K.
    pub fn end_index(&self) -> usize {
        self.groups.len()
    }

    pub fn find_by_name(&self, name: &str) -> Option<&CandidateGroup> {
        self.groups.iter().find(|g| g.name == name)
    }
}

/// Ordered group selections plus forward edges between step indices.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GroupGraph {
    pub selected: Vec<usize>,
    pub edges: BTreeSet<(usize, usize)>,
}

impl GroupGraph {
    pub fn new(selected: Vec<usize>, edges: impl IntoIterator<Item = (usize, usize)>) -> Self {
        Self {
            selected,
            edges: edges.into_iter().collect(),
        }
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.selected.len()
    }

    pub fn is_empty(&self) -> bool {
        self.selected.is_empty()
    }

    pub fn has_edge(&self, from: usize, to: usize) -> bool {
        self.edges.contains(&(from, to))
    }

    pub fn incoming(&self, step: usize) -> impl Iterator<Item = usize> + '_ {
        self.edges
            .iter()
            .filter(move |(_, t)| *t == step)
            .map(|(i, _)| *i)
    }

    /// Total order used for canonical tie-breaking: group count, edge
    /// count, selections, then sorted edges.
    pub fn canonical_key(&self) -> (usize, usize, Vec<usize>, Vec<(usize, usize)>) {
        (
            self.selected.len(),
            self.edges.len(),
            self.selected.clone(),
            self.edges.iter().copied().collect(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    EdgeNotForward { from: usize, to: usize },
    EdgeOutOfRange { from: usize, to: usize, steps: usize },
    MissingIncoming { step: usize },
    UnknownGroup { step: usize, id: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::EdgeNotForward { from, to } => {
                write!(f, "edge ({from},{to}) must satisfy i < t")
            }
            Violation::EdgeOutOfRange { from, to, steps } => {
                write!(f, "edge ({from},{to}) references a step beyond {steps} selected groups")
            }
            Violation::MissingIncoming { step } => write!(f, "step {step} has no incoming edge"),
            Violation::UnknownGroup { step, id } => {
                write!(f, "step {step} selects unknown group id {id}")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    /// True when the only problems (if any) are steps lacking an incoming
    /// edge. Such graphs are outside the generator's support but still
    /// well-defined under the raw factorization.
    pub fn is_well_formed(&self) -> bool {
        self.violations
            .iter()
            .all(|v| matches!(v, Violation::MissingIncoming { .. }))
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return f.write_str("ok");
        }
        let parts: Vec<String> = self.violations.iter().map(|v| v.to_string()).collect();
        f.write_str(&parts.join("; "))
    }
}

fn structural_violations(graph: &GroupGraph) -> Vec<Violation> {
    let n = graph.selected.len();
    let mut out = Vec::new();
    for &(from, to) in &graph.edges {
        if from >= to {
            out.push(Violation::EdgeNotForward { from, to });
        } else if to >= n {
            out.push(Violation::EdgeOutOfRange { from, to, steps: n });
        }
    }
    for step in 1..n {
        if !graph.edges.iter().any(|&(i, t)| t == step && i < t) {
            out.push(Violation::MissingIncoming { step });
        }
    }
    out
}

/// Checks every GroupGraph invariant against `pool`.
pub fn validate_group_graph(graph: &GroupGraph, pool: &GroupPool) -> ValidationReport {
    let mut violations = structural_violations(graph);
    for (step, &id) in graph.selected.iter().enumerate() {
        if id >= pool.len() {
            violations.push(Violation::UnknownGroup { step, id });
        }
    }
    ValidationReport { violations }
}

/// Pool-independent structural check (edge direction, range, connectivity).
pub fn validate_structure(graph: &GroupGraph) -> ValidationReport {
    ValidationReport {
        violations: structural_violations(graph),
    }
}

/// A curated ground-truth example.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub query: String,
    pub gold: Option<String>,
    pub graph: GroupGraph,
    pub success: bool,
    pub token_cost: u64,
}
