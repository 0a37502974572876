//! Offline arithmetic backend used by the CLI and the robustness checks.

use std::collections::BTreeMap;

use super::eval::last_number;
use super::AgentBackend;
use crate::graph::SUMMARIZER_ROLE;

/// Splits a composed prompt into `(header, body)` pairs.
pub fn prompt_sections(prompt: &str) -> Vec<(String, String)> {
    let mut out: Vec<(String, String)> = Vec::new();
    for block in prompt.split("\n\n[") {
        let block = block.strip_prefix('[').unwrap_or(block);
        match block.split_once("]\n") {
            Some((head, body)) if !head.contains('\n') => out.push((head.to_string(), body.to_string())),
            _ => {
                // a blank line inside a body
                if let Some(last) = out.last_mut() {
                    last.1.push_str("\n\n[");
                    last.1.push_str(block);
                }
            }
        }
    }
    out
}

/// Evaluates the first `a op b` found in `text` (integers, `+ - * x`).
pub fn solve_arithmetic(text: &str) -> Option<i64> {
    let toks: Vec<&str> = text
        .split_whitespace()
        .map(|t| t.trim_end_matches(['?', '.', ',']))
        .collect();
    toks.windows(3).find_map(|w| {
        let a: i64 = w[0].parse().ok()?;
        let b: i64 = w[2].parse().ok()?;
        match w[1] {
            "+" => a.checked_add(b),
            "-" => a.checked_sub(b),
            "*" | "x" => a.checked_mul(b),
            _ => None,
        }
    })
}

fn upstream_answers(sections: &[(String, String)]) -> Vec<i64> {
    sections
        .iter()
        .filter(|(h, _)| h.starts_with("From "))
        .filter_map(|(_, b)| last_number(b))
        .map(|v| v as i64)
        .collect()
}

/// Deterministic backend for arithmetic tasks.
///
/// Ordinary agents repeat the latest upstream answer or solve the task
/// themselves; agents whose system prompt mentions an Inspector re-solve;
/// the summarizer reports the most common upstream answer. When the
/// system section contains `attack_text`, the agent answers wrongly.
pub fn arithmetic_backend(attack_text: Option<String>) -> AgentBackend {
    AgentBackend::scripted(move |role, prompt| {
        let sections = prompt_sections(prompt);
        let get = |name: &str| {
            sections
                .iter()
                .find(|(h, _)| h == name)
                .map(|(_, b)| b.as_str())
                .unwrap_or("")
        };
        let system = get("System");
        let truth = solve_arithmetic(get("Task"));
        let upstream = upstream_answers(&sections);
        let attacked = attack_text.as_deref().is_some_and(|a| !a.is_empty() && system.contains(a));
        let answer = if attacked {
            Some(truth.unwrap_or(0) + 7)
        } else if role == SUMMARIZER_ROLE {
            let mut counts: BTreeMap<i64, (usize, usize)> = BTreeMap::new();
            for (pos, v) in upstream.iter().enumerate() {
                let e = counts.entry(*v).or_default();
                e.0 += 1;
                e.1 = pos;
            }
            counts.into_iter().max_by_key(|(_, c)| *c).map(|(v, _)| v).or(truth)
        } else if system.to_lowercase().contains("inspector") {
            truth.or(upstream.last().copied())
        } else {
            upstream.last().copied().or(truth)
        };
        match answer {
            Some(v) => format!("{role} reports. Answer: {v}"),
            None => format!("{role} cannot tell."),
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::compose_prompt;

    #[test]
    fn sections_round_trip_composed_prompts() {
        let up = vec![("A".to_string(), "x\n\nstill x".to_string())];
        let p = compose_prompt("sys", "What is 2 + 3?", &up, 2, Some("prev"));
        let s = prompt_sections(&p);
        let heads: Vec<&str> = s.iter().map(|(h, _)| h.as_str()).collect();
        assert_eq!(heads, ["System", "Task", "From A", "Your previous response"]);
        assert_eq!(s[2].1, "x\n\nstill x");
    }

    #[test]
    fn arithmetic_parsing() {
        assert_eq!(solve_arithmetic("What is 12 + 30?"), Some(42));
        assert_eq!(solve_arithmetic("Compute 6 x 7."), Some(42));
        assert_eq!(solve_arithmetic("-5 - 4"), Some(-9));
        assert_eq!(solve_arithmetic("no math here"), None);
    }

    #[test]
    fn roles_follow_their_rules() {
        let b = arithmetic_backend(Some("EVIL".into()));
        let call = |role: &str, sys: &str, up: &[(&str, &str)]| {
            let up: Vec<(String, String)> = up.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect();
            let text = b.call(role, &compose_prompt(sys, "What is 2 + 3?", &up, 1, None)).unwrap().text;
            last_number(&text).map(|v| v as i64)
        };
        assert_eq!(call("Solver", "solve", &[]), Some(5));
        assert_eq!(call("Solver", "EVIL\nsolve", &[]), Some(12));
        assert_eq!(call("Follower", "follow", &[("S", "Answer: 12")]), Some(12));
        assert_eq!(call("Checker", "You are the Inspector", &[("S", "Answer: 12")]), Some(5));
        assert_eq!(
            call(SUMMARIZER_ROLE, "sum", &[("A", "Answer: 5"), ("B", "Answer: 12"), ("C", "Answer: 5")]),
            Some(5)
        );
    }
}
