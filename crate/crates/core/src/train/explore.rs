//! Heuristic exploration of candidate topologies and minimal curation.

use std::collections::BTreeMap;

use rand::seq::IndexedRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::graph::{materialize_agent_graph, GroupGraph, GroupPool, MaterializeMode, Trajectory};
use crate::harness::{run_graph, AgentBackend, AnswerRule, RunOptions};
use crate::rng::{stream, stream_id, SeededRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Family {
    Chain,
    Star,
    FullConnected,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::Chain, Family::Star, Family::FullConnected];
}

/// Draws `n_groups` ids uniformly with replacement and wires them by the
/// family template. Star uses step 0 as the hub.
pub fn sample_candidate_topology(
    pool: &GroupPool,
    family: Family,
    n_groups: usize,
    t_max: usize,
    rng: &mut SeededRng,
) -> Result<GroupGraph, TrainError> {
    if n_groups == 0 || n_groups > t_max {
        return Err(TrainError::GroupCount { n: n_groups, t_max });
    }
    let selected: Vec<usize> = (0..n_groups).map(|_| rng.random_range(0..pool.len())).collect();
    let edges: Vec<(usize, usize)> = match family {
        Family::Chain => (1..n_groups).map(|t| (t - 1, t)).collect(),
        Family::Star => (1..n_groups).map(|t| (0, t)).collect(),
        Family::FullConnected => (1..n_groups).flat_map(|t| (0..t).map(move |i| (i, t))).collect(),
    };
    Ok(GroupGraph::new(selected, edges))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplorationConfig {
    pub families: Vec<Family>,
    pub min_groups: usize,
    pub max_groups: usize,
    pub samples_per_query: usize,
    pub t_max: usize,
    pub seed: u64,
}

impl Default for ExplorationConfig {
    fn default() -> Self {
        Self {
            families: Family::ALL.to_vec(),
            min_groups: 1,
            max_groups: 3,
            samples_per_query: 8,
            t_max: 8,
            seed: 0,
        }
    }
}

impl ExplorationConfig {
    pub fn check(&self) -> Result<(), TrainError> {
        if self.families.is_empty() {
            return Err(TrainError::Config("at least one family is required".into()));
        }
        if self.min_groups == 0 || self.min_groups > self.max_groups || self.max_groups > self.t_max {
            return Err(TrainError::Config(format!(
                "group-count range {}..={} must lie within 1..={}",
                self.min_groups, self.max_groups, self.t_max
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledQuery {
    pub query: String,
    pub gold: String,
    pub rule: AnswerRule,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExecOutcome {
    pub answer: String,
    pub tokens: u64,
}

/// Runs a group graph on a query.
pub trait TopologyExecutor: Sync {
    fn execute(&self, query: &str, graph: &GroupGraph) -> Result<ExecOutcome, String>;
}

impl<F> TopologyExecutor for F
where
    F: Fn(&str, &GroupGraph) -> Result<ExecOutcome, String> + Sync,
{
    fn execute(&self, query: &str, graph: &GroupGraph) -> Result<ExecOutcome, String> {
        self(query, graph)
    }
}

/// Materializes the graph and runs it through the harness.
pub struct HarnessExecutor<'a> {
    pub pool: &'a GroupPool,
    pub backend: &'a AgentBackend,
    pub rounds: usize,
    pub mode: MaterializeMode,
}

impl TopologyExecutor for HarnessExecutor<'_> {
    fn execute(&self, query: &str, graph: &GroupGraph) -> Result<ExecOutcome, String> {
        let ag = materialize_agent_graph(graph, self.pool, self.mode).map_err(|e| e.to_string())?;
        let out = run_graph(&ag, self.backend, query, self.rounds, None, RunOptions::default())
            .map_err(|e| e.to_string())?;
        Ok(ExecOutcome {
            answer: out.transcript.final_answer.unwrap_or_default(),
            tokens: out.stats.total(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExploreRecord {
    pub query_index: usize,
    pub sample: usize,
    pub query: String,
    pub gold: Option<String>,
    pub family: Family,
    pub graph: GroupGraph,
    pub success: bool,
    pub token_cost: u64,
    pub error: Option<String>,
}

impl ExploreRecord {
    pub fn trajectory(&self) -> Trajectory {
        Trajectory {
            query: self.query.clone(),
            gold: self.gold.clone(),
            graph: self.graph.clone(),
            success: self.success,
            token_cost: self.token_cost,
        }
    }
}

/// Samples and executes candidate topologies for every query. Samples run
/// concurrently; records come back in `(query, sample)` order.
pub fn explore_and_label(
    queries: &[LabeledQuery],
    pool: &GroupPool,
    executor: &dyn TopologyExecutor,
    cfg: &ExplorationConfig,
) -> Result<Vec<ExploreRecord>, TrainError> {
    cfg.check()?;
    let jobs: Vec<(usize, usize)> = (0..queries.len())
        .flat_map(|q| (0..cfg.samples_per_query).map(move |s| (q, s)))
        .collect();
    jobs.par_iter()
        .map(|&(qi, si)| {
            let q = &queries[qi];
            let mut rng = stream(cfg.seed, stream_id(qi as u64, si as u64));
            let family = *cfg.families.choose(&mut rng).expect("families checked non-empty");
            let n = rng.random_range(cfg.min_groups..=cfg.max_groups);
            let graph = sample_candidate_topology(pool, family, n, cfg.t_max, &mut rng)?;
            let mut rec = ExploreRecord {
                query_index: qi,
                sample: si,
                query: q.query.clone(),
                gold: Some(q.gold.clone()),
                family,
                graph,
                success: false,
                token_cost: 0,
                error: None,
            };
            match executor.execute(&q.query, &rec.graph) {
                Ok(out) => {
                    rec.token_cost = out.tokens;
                    match q.rule.matches(&out.answer, &q.gold, None) {
                        Ok(ok) => rec.success = ok,
                        Err(e) => rec.error = Some(e),
                    }
                }
                Err(e) => rec.error = Some(e),
            }
            Ok(rec)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Curation {
    pub dataset: Vec<Trajectory>,
    /// Queries without any successful sample.
    pub excluded: Vec<String>,
}

/// Keeps, per query, the successful graph with the fewest groups, then the
/// fewest edges, then the lexicographically smallest `(selected, edges)`,
/// then the lowest token cost. Queries appear in order of first occurrence.
pub fn curate_minimal(results: &[Trajectory]) -> Curation {
    let mut order: Vec<&str> = Vec::new();
    let mut best: BTreeMap<&str, Option<&Trajectory>> = BTreeMap::new();
    for r in results {
        let slot = best.entry(r.query.as_str()).or_insert_with(|| {
            order.push(r.query.as_str());
            None
        });
        if !r.success {
            continue;
        }
        let better = match slot {
            None => true,
            Some(cur) => {
                (r.graph.canonical_key(), r.token_cost) < (cur.graph.canonical_key(), cur.token_cost)
            }
        };
        if better {
            *slot = Some(r);
        }
    }
    let mut dataset = Vec::new();
    let mut excluded = Vec::new();
    for q in order {
        match best[q] {
            Some(t) => dataset.push(t.clone()),
            None => excluded.push(q.to_string()),
        }
    }
    Curation { dataset, excluded }
}
