use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{validate_group_graph, GroupGraph, GroupPool, ValidationReport};

pub const SUMMARIZER_ROLE: &str = "Summarizer";

const SUMMARIZER_PROMPT: &str = "You are the Summarizer. Read the contributions of the \
upstream agents and state the single final answer to the task.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaterializeMode {
    /// One agent per selected group, prompted with the composite role prompt.
    Composite,
    /// One agent per role, wired by the group's intra-topology template.
    Expanded,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Agent {
    pub role: String,
    pub system_prompt: String,
    /// Step of the group graph this agent came from; `None` for the summarizer.
    pub source_step: Option<usize>,
}

/// Executable agent-level topology. Edges point from producer to consumer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AgentGraph {
    pub agents: Vec<Agent>,
    pub edges: BTreeSet<(usize, usize)>,
    pub summarizer: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("cannot materialize invalid graph: {0}")]
pub struct MaterializeError(pub ValidationReport);

impl AgentGraph {
    pub fn len(&self) -> usize {
        self.agents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.agents.is_empty()
    }

    /// Direct predecessors of `agent`, ascending.
    pub fn predecessors(&self, agent: usize) -> Vec<usize> {
        self.edges
            .iter()
            .filter(|(_, t)| *t == agent)
            .map(|(s, _)| *s)
            .collect()
    }

    pub fn successors(&self, agent: usize) -> Vec<usize> {
        self.edges
            .iter()
            .filter(|(s, _)| *s == agent)
            .map(|(_, t)| *t)
            .collect()
    }

    /// True when the graph has no directed cycle.
    pub fn is_acyclic(&self) -> bool {
        crate::harness::topological_schedule(self).is_ok()
    }

    /// True when every agent other than the summarizer can reach it.
    pub fn all_reach_summarizer(&self) -> bool {
        let n = self.agents.len();
        let mut reach = vec![false; n];
        reach[self.summarizer] = true;
        let mut changed = true;
        while changed {
            changed = false;
            for &(s, t) in &self.edges {
                if reach[t] && !reach[s] {
                    reach[s] = true;
                    changed = true;
                }
            }
        }
        reach.into_iter().all(|r| r)
    }

    /// Static diagram in Graphviz DOT syntax.
    pub fn to_dot(&self) -> String {
        let mut out = String::from("digraph agents {\n  rankdir=LR;\n");
        for (i, a) in self.agents.iter().enumerate() {
            let shape = if i == self.summarizer { "doublecircle" } else { "box" };
            out.push_str(&format!(
                "  a{i} [label=\"{}\", shape={shape}];\n",
                a.role.replace('"', "'")
            ));
        }
        for (s, t) in &self.edges {
            out.push_str(&format!("  a{s} -> a{t};\n"));
        }
        out.push_str("}\n");
        out
    }
}

/// Expands a group-level graph into an executable agent graph.
///
/// Both modes append a summarizer fed by every sink agent (agents without
/// outgoing edges). In expanded mode an inter-group edge `(i, t)` connects
/// every sink role of step `i` to every source role of step `t`.
pub fn materialize_agent_graph(
    graph: &GroupGraph,
    pool: &GroupPool,
    mode: MaterializeMode,
) -> Result<AgentGraph, MaterializeError> {
    let report = validate_group_graph(graph, pool);
    if !report.is_ok() {
        return Err(MaterializeError(report));
    }

    let mut agents = Vec::new();
    let mut edges = BTreeSet::new();
    match mode {
        MaterializeMode::Composite => {
            for (step, &gid) in graph.selected.iter().enumerate() {
                let g = &pool.groups()[gid];
                agents.push(Agent {
                    role: g.name.clone(),
                    system_prompt: g.role_prompt.clone(),
                    source_step: Some(step),
                });
            }
            edges.extend(graph.edges.iter().copied());
        }
        MaterializeMode::Expanded => {
            // per step: (sink agent ids, source agent ids)
            let mut ports: Vec<(Vec<usize>, Vec<usize>)> = Vec::with_capacity(graph.len());
            for (step, &gid) in graph.selected.iter().enumerate() {
                let g = &pool.groups()[gid];
                let base = agents.len();
                for role in &g.roles {
                    agents.push(Agent {
                        role: role.clone(),
                        system_prompt: format!(
                            "You are the {role} of the {}. Group expertise: {}",
                            g.name, g.expertise
                        ),
                        source_step: Some(step),
                    });
                }
                let intra = g.intra_topology.intra_edges(g.roles.len());
                let n = g.roles.len();
                let sinks = (0..n)
                    .filter(|k| !intra.iter().any(|(s, _)| s == k))
                    .map(|k| base + k)
                    .collect();
                let sources = (0..n)
                    .filter(|k| !intra.iter().any(|(_, t)| t == k))
                    .map(|k| base + k)
                    .collect();
                edges.extend(intra.into_iter().map(|(s, t)| (base + s, base + t)));
                ports.push((sinks, sources));
            }
            for &(i, t) in &graph.edges {
                for &s in &ports[i].0 {
                    for &d in &ports[t].1 {
                        edges.insert((s, d));
                    }
                }
            }
        }
    }

    let summarizer = agents.len();
    let sinks: Vec<usize> = (0..agents.len())
        .filter(|a| !edges.iter().any(|(s, _)| s == a))
        .collect();
    agents.push(Agent {
        role: SUMMARIZER_ROLE.to_string(),
        system_prompt: SUMMARIZER_PROMPT.to_string(),
        source_step: None,
    });
    edges.extend(sinks.into_iter().map(|s| (s, summarizer)));

    Ok(AgentGraph {
        agents,
        edges,
        summarizer,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::test_support::*;
    use crate::graph::{GroupPool, IntraTopology};
    use proptest::prelude::*;

    fn mixed_pool() -> GroupPool {
        GroupPool::new(vec![
            group(0, "solo", &["Solver"], IntraTopology::Single),
            group(1, "chain", &["A", "B", "C"], IntraTopology::Chain),
            group(2, "star", &["P", "S", "I"], IntraTopology::Star),
            group(3, "full", &["An", "So", "In"], IntraTopology::FullConnected),
        ])
        .unwrap()
    }

    #[test]
    fn composite_maps_steps_to_agents() {
        let pool = mixed_pool();
        let g = GroupGraph::new(vec![0, 1], [(0, 1)]);
        let ag = materialize_agent_graph(&g, &pool, MaterializeMode::Composite).unwrap();
        assert_eq!(ag.agents.len(), 3);
        assert_eq!(ag.summarizer, 2);
        assert_eq!(ag.edges, BTreeSet::from([(0, 1), (1, 2)]));
        assert_eq!(ag.agents[1].system_prompt, pool.groups()[1].role_prompt);
    }

    #[test]
    fn expanded_chain_template() {
        let pool = mixed_pool();
        let g = GroupGraph::new(vec![1], []);
        let ag = materialize_agent_graph(&g, &pool, MaterializeMode::Expanded).unwrap();
        let roles: Vec<&str> = ag.agents.iter().map(|a| a.role.as_str()).collect();
        assert_eq!(roles, vec!["A", "B", "C", SUMMARIZER_ROLE]);
        // A→B, B→C, then the sink C feeds the summarizer
        assert_eq!(ag.edges, BTreeSet::from([(0, 1), (1, 2), (2, 3)]));
    }

    #[test]
    fn expanded_full_connected_forms_triangle() {
        let pool = mixed_pool();
        let g = GroupGraph::new(vec![3], []);
        let ag = materialize_agent_graph(&g, &pool, MaterializeMode::Expanded).unwrap();
        let intra: Vec<_> = ag.edges.iter().filter(|(_, t)| *t != ag.summarizer).collect();
        assert_eq!(intra, vec![&(0, 1), &(0, 2), &(1, 2)]);
    }

    #[test]
    fn expanded_cross_group_wiring_uses_sinks_and_sources() {
        let pool = mixed_pool();
        // chain [A,B,C] then star [P,S,I]: sink C feeds sources P and S
        let g = GroupGraph::new(vec![1, 2], [(0, 1)]);
        let ag = materialize_agent_graph(&g, &pool, MaterializeMode::Expanded).unwrap();
        assert!(ag.edges.contains(&(2, 3)));
        assert!(ag.edges.contains(&(2, 4)));
        assert!(!ag.edges.contains(&(2, 5)));
        assert_eq!(ag.predecessors(ag.summarizer), vec![5]);
    }

    #[test]
    fn empty_graph_yields_lone_summarizer() {
        let ag = materialize_agent_graph(&GroupGraph::empty(), &mixed_pool(), MaterializeMode::Composite)
            .unwrap();
        assert_eq!(ag.agents.len(), 1);
        assert!(ag.edges.is_empty());
    }

    #[test]
    fn invalid_graph_is_rejected() {
        let g = GroupGraph::new(vec![0, 1], []);
        assert!(materialize_agent_graph(&g, &mixed_pool(), MaterializeMode::Composite).is_err());
    }

    fn valid_graph() -> impl Strategy<Value = GroupGraph> {
        (1usize..6)
            .prop_flat_map(|n| {
                (
                    proptest::collection::vec(0usize..4, n),
                    proptest::collection::vec(any::<u32>(), n),
                )
            })
            .prop_map(|(selected, masks)| {
                let mut edges = BTreeSet::new();
                for t in 1..selected.len() {
                    let mut any_edge = false;
                    for i in 0..t {
                        if masks[t] >> i & 1 == 1 {
                            edges.insert((i, t));
                            any_edge = true;
                        }
                    }
                    if !any_edge {
                        edges.insert((masks[t] as usize % t, t));
                    }
                }
                GroupGraph { selected, edges }
            })
    }

    proptest! {
        #[test]
        fn materialized_graphs_are_acyclic_and_reach_summarizer(g in valid_graph(), expanded in any::<bool>()) {
            let mode = if expanded { MaterializeMode::Expanded } else { MaterializeMode::Composite };
            let ag = materialize_agent_graph(&g, &mixed_pool(), mode).unwrap();
            prop_assert!(ag.is_acyclic());
            prop_assert!(ag.all_reach_summarizer());
            prop_assert!(ag.successors(ag.summarizer).is_empty());
        }
    }
}
