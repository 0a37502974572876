use std::io::Write;
use std::path::PathBuf;
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{run_graph, AgentBackend, AttackSpec, RunOptions};
use crate::graph::AgentGraph;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AnswerRule {
    /// Trimmed, case-insensitive equality.
    Exact,
    /// Last number in the answer within `tol` of the gold number.
    Numeric { tol: f64 },
    /// Gold text appears in the answer, case-insensitive.
    Contains,
    /// Answer is code; gold is a test script appended to it. Needs a
    /// [`CodeRunner`] in the options.
    CodePass,
}

/// Runs candidate code through a Python interpreter. Only used when set
/// explicitly in [`EvalOptions`].
#[derive(Debug, Clone, PartialEq)]
pub struct CodeRunner {
    pub python: PathBuf,
    pub timeout: Duration,
}

impl Default for CodeRunner {
    fn default() -> Self {
        Self {
            python: PathBuf::from("python3"),
            timeout: Duration::from_secs(10),
        }
    }
}

static SCRIPT_COUNTER: AtomicU64 = AtomicU64::new(0);

impl CodeRunner {
    pub fn passes(&self, code: &str, test: &str) -> Result<bool, String> {
        let n = SCRIPT_COUNTER.fetch_add(1, Ordering::Relaxed);
        let path = std::env::temp_dir().join(format!("grouptopo-{}-{n}.py", std::process::id()));
        {
            let mut f = std::fs::File::create(&path).map_err(|e| e.to_string())?;
            writeln!(f, "{code}\n\n{test}").map_err(|e| e.to_string())?;
        }
        let mut child = Command::new(&self.python)
            .arg(&path)
            .stdout(Stdio::null())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|e| e.to_string())?;
        let start = Instant::now();
        let status = loop {
            if let Some(s) = child.try_wait().map_err(|e| e.to_string())? {
                break Some(s);
            }
            if start.elapsed() > self.timeout {
                let _ = child.kill();
                let _ = child.wait();
                break None;
            }
            std::thread::sleep(Duration::from_millis(10));
        };
        let _ = std::fs::remove_file(&path);
        Ok(status.map(|s| s.success()).unwrap_or(false))
    }
}

/// Last signed decimal number appearing in `text`.
pub fn last_number(text: &str) -> Option<f64> {
    let bytes = text.as_bytes();
    let mut found = None;
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i].is_ascii_digit() {
            let mut start = i;
            if start > 0 && bytes[start - 1] == b'-' {
                start -= 1;
            }
            let mut j = i;
            while j < bytes.len() && (bytes[j].is_ascii_digit() || bytes[j] == b',') {
                j += 1;
            }
            if j + 1 < bytes.len() && bytes[j] == b'.' && bytes[j + 1].is_ascii_digit() {
                j += 1;
                while j < bytes.len() && bytes[j].is_ascii_digit() {
                    j += 1;
                }
            }
            let s: String = text[start..j].chars().filter(|&c| c != ',').collect();
            if let Ok(v) = s.parse() {
                found = Some(v);
            }
            i = j;
        } else {
            i += 1;
        }
    }
    found
}

impl AnswerRule {
    pub fn matches(&self, answer: &str, gold: &str, runner: Option<&CodeRunner>) -> Result<bool, String> {
        match self {
            AnswerRule::Exact => Ok(answer.trim().eq_ignore_ascii_case(gold.trim())),
            AnswerRule::Numeric { tol } => {
                let g: f64 = gold
                    .trim()
                    .parse()
                    .map_err(|_| format!("gold {gold:?} is not a number"))?;
                Ok(last_number(answer).is_some_and(|a| (a - g).abs() <= *tol))
            }
            AnswerRule::Contains => Ok(answer.to_lowercase().contains(&gold.trim().to_lowercase())),
            AnswerRule::CodePass => match runner {
                Some(r) => r.passes(answer, gold),
                None => Err("code execution is disabled".into()),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalItem {
    pub query: String,
    pub gold: String,
    pub rule: AnswerRule,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalOptions {
    pub run: RunOptions,
    pub code_runner: Option<CodeRunner>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemRecord {
    pub query: String,
    pub answer: Option<String>,
    pub success: bool,
    pub prompt_tokens: u64,
    pub response_tokens: u64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanTokens {
    pub prompt: f64,
    pub response: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub mean_tokens: MeanTokens,
    pub items: Vec<ItemRecord>,
}

/// Generates, runs and scores every item. Failed items count as incorrect
/// and carry their error; token means are over items that produced a run.
pub fn evaluate(
    items: &[EvalItem],
    generator: &(dyn Fn(&str) -> Result<AgentGraph, String> + Sync),
    backend: &AgentBackend,
    rounds: usize,
    attack: Option<&AttackSpec>,
    opts: &EvalOptions,
) -> EvalReport {
    let records: Vec<ItemRecord> = items
        .par_iter()
        .map(|item| {
            let mut rec = ItemRecord {
                query: item.query.clone(),
                answer: None,
                success: false,
                prompt_tokens: 0,
                response_tokens: 0,
                error: None,
            };
            let graph = match generator(&item.query) {
                Ok(g) => g,
                Err(e) => {
                    rec.error = Some(format!("generation: {e}"));
                    return rec;
                }
            };
            match run_graph(&graph, backend, &item.query, rounds, attack, opts.run) {
                Ok(out) => {
                    rec.prompt_tokens = out.stats.prompt_tokens;
                    rec.response_tokens = out.stats.response_tokens;
                    let answer = out.transcript.final_answer.unwrap_or_default();
                    match item.rule.matches(&answer, &item.gold, opts.code_runner.as_ref()) {
                        Ok(ok) => rec.success = ok,
                        Err(e) => rec.error = Some(format!("scoring: {e}")),
                    }
                    rec.answer = Some(answer);
                }
                Err(e) => rec.error = Some(e.to_string()),
            }
            rec
        })
        .collect();

    let n = records.len().max(1) as f64;
    let correct = records.iter().filter(|r| r.success).count() as f64;
    let ran: Vec<&ItemRecord> = records.iter().filter(|r| r.answer.is_some()).collect();
    let m = ran.len().max(1) as f64;
    let prompt: u64 = ran.iter().map(|r| r.prompt_tokens).sum();
    let response: u64 = ran.iter().map(|r| r.response_tokens).sum();
    EvalReport {
        accuracy: if records.is_empty() { 0.0 } else { correct / n },
        mean_tokens: MeanTokens {
            prompt: prompt as f64 / m,
            response: response as f64 / m,
            total: (prompt + response) as f64 / m,
        },
        items: records,
    }
}
