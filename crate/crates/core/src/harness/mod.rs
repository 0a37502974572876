//! Executes agent graphs against a backend.
//!
//! Prompt layout, one block per section separated by a blank line:
//!
//! ```text
//! [System]
//! <system prompt, with any injected attack text first>
//!
//! [Task]
//! <query>
//!
//! [From <role>]            (one block per upstream agent, index order)
//! <response>
//!
//! [Your previous response] (rounds after the first)
//! <response>
//! ```

mod backend;
mod eval;
mod scripted;

pub use backend::{parse_completion, AgentBackend, BackendError, BackendReply, HttpConfig, ScriptedFn, Usage};
pub use scripted::{arithmetic_backend, prompt_sections, solve_arithmetic};
pub use eval::{evaluate, last_number, AnswerRule, CodeRunner, EvalItem, EvalOptions, EvalReport, ItemRecord, MeanTokens};

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{Agent, AgentGraph};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("agent graph has a cycle through agent {0}")]
pub struct CycleError(pub usize);

/// Kahn level decomposition; each level ascending by index.
pub fn topological_schedule(g: &AgentGraph) -> Result<Vec<Vec<usize>>, CycleError> {
    let n = g.agents.len();
    let mut indeg = vec![0usize; n];
    let mut succ: Vec<Vec<usize>> = vec![Vec::new(); n];
    for &(s, t) in &g.edges {
        indeg[t] += 1;
        succ[s].push(t);
    }
    let mut levels = Vec::new();
    let mut current: Vec<usize> = (0..n).filter(|&a| indeg[a] == 0).collect();
    let mut placed = 0;
    while !current.is_empty() {
        placed += current.len();
        let mut next = Vec::new();
        for &a in &current {
            for &t in &succ[a] {
                indeg[t] -= 1;
                if indeg[t] == 0 {
                    next.push(t);
                }
            }
        }
        next.sort_unstable();
        levels.push(std::mem::replace(&mut current, next));
    }
    if placed < n {
        let member = (0..n).find(|&a| indeg[a] > 0).expect("unplaced agent");
        return Err(CycleError(member));
    }
    Ok(levels)
}

/// Builds the prompt for one call. See the module docs for the layout.
pub fn compose_prompt(
    system_prompt: &str,
    query: &str,
    upstream: &[(String, String)],
    round: usize,
    prior_own_response: Option<&str>,
) -> String {
    let mut out = format!("[System]\n{system_prompt}\n\n[Task]\n{query}");
    for (role, response) in upstream {
        out.push_str(&format!("\n\n[From {role}]\n{response}"));
    }
    if round > 1 {
        if let Some(prev) = prior_own_response {
            out.push_str(&format!("\n\n[Your previous response]\n{prev}"));
        }
    }
    out
}

/// Offline token estimate: the mean of the whitespace word count and a
/// four-characters-per-token count, rounded up.
pub fn count_tokens(text: &str) -> u64 {
    let words = text.split_whitespace().count() as u64;
    let chars = text.chars().filter(|c| !c.is_whitespace()).count() as u64;
    (words + chars.div_ceil(4)).div_ceil(2)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub target: usize,
    pub text: String,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Summarizer reads every agent instead of only the sinks.
    pub summarizer_sees_all: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallRecord {
    pub round: usize,
    pub agent: usize,
    pub role: String,
    pub prompt: String,
    pub response: String,
    pub prompt_tokens: u64,
    pub response_tokens: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunTranscript {
    pub records: Vec<CallRecord>,
    pub final_answer: Option<String>,
    pub success: Option<bool>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenStats {
    pub prompt_tokens: u64,
    pub response_tokens: u64,
    /// `(prompt, response)` per agent index.
    pub per_agent: BTreeMap<usize, (u64, u64)>,
    /// Prompt plus response tokens per round, round 1 first.
    pub per_round: Vec<u64>,
}

impl TokenStats {
    pub fn total(&self) -> u64 {
        self.prompt_tokens + self.response_tokens
    }

    pub fn from_records(records: &[CallRecord], rounds: usize) -> Self {
        let mut s = TokenStats {
            per_round: vec![0; rounds],
            ..Default::default()
        };
        for r in records {
            s.prompt_tokens += r.prompt_tokens;
            s.response_tokens += r.response_tokens;
            let e = s.per_agent.entry(r.agent).or_default();
            e.0 += r.prompt_tokens;
            e.1 += r.response_tokens;
            s.per_round[r.round - 1] += r.prompt_tokens + r.response_tokens;
        }
        s
    }
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error("rounds must be at least 1")]
    NoRounds,
    #[error("attack target {target} is outside a graph of {agents} agents")]
    BadTarget { target: usize, agents: usize },
    #[error(transparent)]
    Cycle(#[from] CycleError),
    #[error("backend failed in round {round} at agent {agent} ({role}): {source}")]
    Backend {
        round: usize,
        agent: usize,
        role: String,
        source: BackendError,
        partial: Box<RunTranscript>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunOutput {
    pub transcript: RunTranscript,
    pub stats: TokenStats,
}

fn system_prompt_for(agent: &Agent, idx: usize, attack: Option<&AttackSpec>) -> String {
    match attack {
        Some(a) if a.target == idx => format!("{}\n{}", a.text, agent.system_prompt),
        _ => agent.system_prompt.clone(),
    }
}

/// Runs `rounds` passes over the non-summarizer schedule, then the
/// summarizer once. Calls within a level run concurrently and are recorded
/// in agent-index order.
pub fn run_graph(
    g: &AgentGraph,
    backend: &AgentBackend,
    query: &str,
    rounds: usize,
    attack: Option<&AttackSpec>,
    opts: RunOptions,
) -> Result<RunOutput, RunError> {
    if rounds == 0 {
        return Err(RunError::NoRounds);
    }
    if let Some(a) = attack {
        if a.target >= g.agents.len() {
            return Err(RunError::BadTarget {
                target: a.target,
                agents: g.agents.len(),
            });
        }
    }
    let levels = topological_schedule(g)?;
    let preds: Vec<Vec<usize>> = (0..g.agents.len()).map(|a| g.predecessors(a)).collect();
    let mut transcript = RunTranscript::default();
    let mut previous: Vec<Option<String>> = vec![None; g.agents.len()];

    for round in 1..=rounds {
        let mut current: Vec<Option<String>> = vec![None; g.agents.len()];
        for level in &levels {
            let members: Vec<usize> = level
                .iter()
                .copied()
                .filter(|&a| a != g.summarizer || round == rounds)
                .collect();
            let prompts: Vec<String> = members
                .iter()
                .map(|&a| {
                    let sources: Vec<usize> = if a == g.summarizer && opts.summarizer_sees_all {
                        (0..g.agents.len()).filter(|&x| x != a).collect()
                    } else {
                        preds[a].clone()
                    };
                    let upstream: Vec<(String, String)> = sources
                        .iter()
                        .filter_map(|&s| current[s].clone().map(|r| (g.agents[s].role.clone(), r)))
                        .collect();
                    compose_prompt(
                        &system_prompt_for(&g.agents[a], a, attack),
                        query,
                        &upstream,
                        round,
                        previous[a].as_deref(),
                    )
                })
                .collect();
            let replies: Vec<Result<BackendReply, BackendError>> = members
                .par_iter()
                .zip(prompts.par_iter())
                .map(|(&a, prompt)| backend.call(&g.agents[a].role, prompt))
                .collect();
            for ((&a, prompt), reply) in members.iter().zip(prompts).zip(replies) {
                let role = g.agents[a].role.clone();
                let reply = match reply {
                    Ok(r) => r,
                    Err(source) => {
                        return Err(RunError::Backend {
                            round,
                            agent: a,
                            role,
                            source,
                            partial: Box::new(transcript),
                        })
                    }
                };
                let (pt, rt) = match reply.usage {
                    Some(u) => (u.prompt, u.completion),
                    None => (count_tokens(&prompt), count_tokens(&reply.text)),
                };
                current[a] = Some(reply.text.clone());
                transcript.records.push(CallRecord {
                    round,
                    agent: a,
                    role,
                    prompt,
                    response: reply.text,
                    prompt_tokens: pt,
                    response_tokens: rt,
                });
            }
        }
        if round == rounds {
            transcript.final_answer = current[g.summarizer].clone();
        }
        previous = current;
    }
    let stats = TokenStats::from_records(&transcript.records, rounds);
    Ok(RunOutput { transcript, stats })
}
