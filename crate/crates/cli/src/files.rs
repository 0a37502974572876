use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use grouptopo::graph::{decode_graph, decode_pool, read_trajectories};
use grouptopo::harness::AnswerRule;
use grouptopo::pool::bundled_math_pool;
use grouptopo::{GroupGraph, GroupPool, Trajectory};
use serde::{Deserialize, Serialize};

use crate::CliError;

pub fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::Validation(format!("cannot read {}: {e}", path.display())))
}

/// Writes through a temporary file in the target directory, then renames.
pub fn write_atomic(path: &Path, contents: &str) -> Result<(), CliError> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let io = |e: std::io::Error| CliError::Validation(format!("cannot write {}: {e}", path.display()));
    let mut tmp = tempfile::NamedTempFile::new_in(&dir).map_err(io)?;
    tmp.write_all(contents.as_bytes()).map_err(io)?;
    tmp.persist(path).map_err(|e| io(e.error))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("report serializes");
    text.push('\n');
    write_atomic(path, &text)
}

/// `base` with `suffix` appended to its file name.
pub fn sibling(base: &Path, suffix: &str) -> PathBuf {
    let mut s = base.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn load_pool(path: Option<&Path>) -> Result<GroupPool, CliError> {
    match path {
        None => Ok(bundled_math_pool()),
        Some(p) => decode_pool(&read_text(p)?).map_err(|e| CliError::Validation(format!("{}: {e}", p.display()))),
    }
}

pub fn load_graph(path: &Path) -> Result<GroupGraph, CliError> {
    decode_graph(&read_text(path)?).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

pub fn load_trajectories(path: &Path) -> Result<Vec<Trajectory>, CliError> {
    read_trajectories(&read_text(path)?).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

/// One line of a labeled query file.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct QueryLine {
    query: String,
    gold: String,
    #[serde(default)]
    rule: Option<AnswerRule>,
}

#[derive(Debug, Clone)]
pub struct LabeledLine {
    pub query: String,
    pub gold: String,
    pub rule: AnswerRule,
}

/// Reads `{"query", "gold", "rule"?}` records; the rule defaults to numeric.
pub fn load_queries(path: &Path) -> Result<Vec<LabeledLine>, CliError> {
    let text = read_text(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let q: QueryLine = serde_json::from_str(line)
            .map_err(|e| CliError::Validation(format!("{} line {}: {e}", path.display(), i + 1)))?;
        out.push(LabeledLine {
            query: q.query,
            gold: q.gold,
            rule: q.rule.unwrap_or(AnswerRule::Numeric { tol: 1e-6 }),
        });
    }
    if out.is_empty() {
        return Err(CliError::Validation(format!("{} holds no queries", path.display())));
    }
    Ok(out)
}
