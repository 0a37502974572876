//! Line-delimited JSON records for pools, graphs and trajectories.
//!
//! Every record carries `"v": "v1"`. Step edges are written as `"i->t"`.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{validate_structure, CandidateGroup, GroupGraph, GroupPool, Trajectory};

pub const SCHEMA_VERSION: &str = "v1";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub struct CodecError {
    /// 1-based line within a multi-record file.
    pub line: Option<usize>,
    /// Column or field path where the problem was found.
    pub position: String,
    pub message: String,
}

impl fmt::Display for CodecError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "line {l}, {}: {}", self.position, self.message),
            None => write!(f, "{}: {}", self.position, self.message),
        }
    }
}

impl CodecError {
    fn at(position: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            line: None,
            position: position.into(),
            message: message.into(),
        }
    }

    fn from_json(err: serde_json::Error) -> Self {
        Self::at(format!("column {}", err.column()), err.to_string())
    }

    fn on_line(mut self, line: usize) -> Self {
        self.line = Some(line);
        self
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphBody {
    selected: Vec<usize>,
    edges: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphRecord {
    v: String,
    selected: Vec<usize>,
    edges: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PoolRecord {
    v: String,
    groups: Vec<CandidateGroup>,
    end_index: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrajectoryRecord {
    v: String,
    query: String,
    #[serde(default)]
    gold: Option<String>,
    graph: GraphBody,
    success: bool,
    token_cost: u64,
}

fn check_version(v: &str) -> Result<(), CodecError> {
    if v != SCHEMA_VERSION {
        return Err(CodecError::at(
            "v",
            format!("unsupported schema version {v:?}, expected {SCHEMA_VERSION:?}"),
        ));
    }
    Ok(())
}

fn edge_strings(graph: &GroupGraph) -> Vec<String> {
    graph.edges.iter().map(|(i, t)| format!("{i}->{t}")).collect()
}

fn parse_edge(s: &str, idx: usize) -> Result<(usize, usize), CodecError> {
    let pos = || format!("edges[{idx}]");
    let (a, b) = s
        .split_once("->")
        .ok_or_else(|| CodecError::at(pos(), format!("expected \"i->t\", got {s:?}")))?;
    let parse = |x: &str| {
        x.trim()
            .parse::<usize>()
            .map_err(|_| CodecError::at(pos(), format!("bad step index {x:?}")))
    };
    Ok((parse(a)?, parse(b)?))
}

fn graph_from_parts(selected: Vec<usize>, edges: &[String]) -> Result<GroupGraph, CodecError> {
    let mut graph = GroupGraph::new(selected, []);
    for (idx, s) in edges.iter().enumerate() {
        let e = parse_edge(s, idx)?;
        if !graph.edges.insert(e) {
            return Err(CodecError::at(format!("edges[{idx}]"), format!("duplicate edge {s:?}")));
        }
    }
    let report = validate_structure(&graph);
    if !report.is_well_formed() {
        return Err(CodecError::at("edges", report.to_string()));
    }
    Ok(graph)
}

pub fn encode_graph(graph: &GroupGraph) -> String {
    serde_json::to_string(&GraphRecord {
        v: SCHEMA_VERSION.to_string(),
        selected: graph.selected.clone(),
        edges: edge_strings(graph),
    })
    .expect("graph record serializes")
}

/// Parses one graph record. Edges must point forward and stay in range.
pub fn decode_graph(text: &str) -> Result<GroupGraph, CodecError> {
    let rec: GraphRecord = serde_json::from_str(text.trim()).map_err(CodecError::from_json)?;
    check_version(&rec.v)?;
    graph_from_parts(rec.selected, &rec.edges)
}

pub fn encode_pool(pool: &GroupPool) -> String {
    serde_json::to_string(&PoolRecord {
        v: SCHEMA_VERSION.to_string(),
        groups: pool.groups().to_vec(),
        end_index: pool.end_index(),
    })
    .expect("pool record serializes")
}

pub fn decode_pool(text: &str) -> Result<GroupPool, CodecError> {
    let rec: PoolRecord = serde_json::from_str(text.trim()).map_err(CodecError::from_json)?;
    check_version(&rec.v)?;
    let k = rec.groups.len();
    let pool = GroupPool::new(rec.groups).map_err(|e| CodecError::at("groups", e.to_string()))?;
    if rec.end_index != k {
        return Err(CodecError::at(
            "end_index",
            super::PoolError::EndIndex {
                expected: k,
                found: rec.end_index,
            }
            .to_string(),
        ));
    }
    Ok(pool)
}

pub fn encode_trajectory(t: &Trajectory) -> String {
    serde_json::to_string(&TrajectoryRecord {
        v: SCHEMA_VERSION.to_string(),
        query: t.query.clone(),
        gold: t.gold.clone(),
        graph: GraphBody {
            selected: t.graph.selected.clone(),
            edges: edge_strings(&t.graph),
        },
        success: t.success,
        token_cost: t.token_cost,
    })
    .expect("trajectory record serializes")
}

pub fn decode_trajectory(text: &str) -> Result<Trajectory, CodecError> {
    let rec: TrajectoryRecord = serde_json::from_str(text.trim()).map_err(CodecError::from_json)?;
    check_version(&rec.v)?;
    let graph = graph_from_parts(rec.graph.selected, &rec.graph.edges).map_err(|mut e| {
        e.position = format!("graph.{}", e.position);
        e
    })?;
    Ok(Trajectory {
        query: rec.query,
        gold: rec.gold,
        graph,
        success: rec.success,
        token_cost: rec.token_cost,
    })
}

pub fn write_trajectories(items: &[Trajectory]) -> String {
    let mut out = String::new();
    for t in items {
        out.push_str(&encode_trajectory(t));
        out.push('\n');
    }
    out
}

/// Reads one trajectory per non-blank line; errors carry the line number.
pub fn read_trajectories(text: &str) -> Result<Vec<Trajectory>, CodecError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| decode_trajectory(l).map_err(|e| e.on_line(i + 1)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::test_support::*;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    #[test]
    fn empty_graph_round_trips() {
        let text = encode_graph(&GroupGraph::empty());
        assert_eq!(text, r#"{"v":"v1","selected":[],"edges":[]}"#);
        assert_eq!(decode_graph(&text).unwrap(), GroupGraph::empty());
    }

    #[test]
    fn repeated_selections_round_trip() {
        let g = GroupGraph::new(vec![3, 1, 1], [(0, 1), (0, 2)]);
        let text = encode_graph(&g);
        assert!(text.contains(r#""edges":["0->1","0->2"]"#));
        assert_eq!(decode_graph(&text).unwrap(), g);
    }

    #[test]
    fn backward_edge_is_rejected() {
        let err = decode_graph(r#"{"v":"v1","selected":[0,1,2],"edges":["2->1"]}"#).unwrap_err();
        assert!(err.to_string().contains("must satisfy i < t"), "{err}");
    }

    #[test]
    fn malformed_records_report_positions() {
        let err = decode_graph(r#"{"v":"v1","selected":[0,1],"edges":["0=>1"]}"#).unwrap_err();
        assert_eq!(err.position, "edges[0]");
        let err = decode_graph(r#"{"v":"v1","selected":[0,1],"edges":[}"#).unwrap_err();
        assert!(err.position.starts_with("column"), "{err}");
        let err = decode_graph(r#"{"v":"v2","selected":[],"edges":[]}"#).unwrap_err();
        assert_eq!(err.position, "v");
        let err = decode_graph(r#"{"selected":[],"edges":[]}"#).unwrap_err();
        assert!(err.message.contains("missing field `v`"), "{err}");
    }

    #[test]
    fn pool_round_trip_and_validation() {
        let pool = simple_pool(3);
        assert_eq!(decode_pool(&encode_pool(&pool)).unwrap(), pool);
        let bad = encode_pool(&pool).replace(r#""end_index":3"#, r#""end_index":2"#);
        assert_eq!(decode_pool(&bad).unwrap_err().position, "end_index");
    }

    #[test]
    fn trajectory_file_errors_carry_line_numbers() {
        let t = Trajectory {
            query: "q".into(),
            gold: Some("42".into()),
            graph: GroupGraph::new(vec![0, 1], [(0, 1)]),
            success: true,
            token_cost: 17,
        };
        let mut text = write_trajectories(&[t.clone(), t.clone()]);
        assert_eq!(read_trajectories(&text).unwrap(), vec![t.clone(), t]);
        text.push_str("{not json}\n");
        assert_eq!(read_trajectories(&text).unwrap_err().line, Some(3));
    }

    fn arb_graph() -> impl Strategy<Value = GroupGraph> {
        (0usize..7)
            .prop_flat_map(|n| {
                (
                    proptest::collection::vec(0usize..16, n),
                    proptest::collection::vec(any::<u64>(), n),
                )
            })
            .prop_map(|(selected, masks)| {
                let mut edges = BTreeSet::new();
                for t in 1..selected.len() {
                    for i in 0..t {
                        if masks[t] >> i & 1 == 1 {
                            edges.insert((i, t));
                        }
                    }
                    if !edges.iter().any(|&(_, tt)| tt == t) {
                        edges.insert((0, t));
                    }
                }
                GroupGraph { selected, edges }
            })
    }

    proptest! {
        #[test]
        fn encode_decode_identity(g in arb_graph()) {
            prop_assert_eq!(decode_graph(&encode_graph(&g)).unwrap(), g);
        }
    }
}
