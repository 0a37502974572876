//! Autoregressive inference loop and likelihood evaluation.

use std::collections::BTreeSet;

use super::{
    aggregate_history, edge_site, fuse_task, group_site, predict_edge, predict_group, Mode, ModelConfig,
    ModelError, ModelParams,
};
use crate::embedding::CandidateMatrix;
use crate::graph::{validate_structure, GroupGraph, Violation};
use crate::rng::UniformSource;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Selection {
    /// Pick the most probable candidate, ties to the lowest index.
    Argmax,
    /// Sample from `p^(1/τ)`, renormalized.
    Temperature(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenerateOptions {
    pub selection: Selection,
    /// Never pick END; generation then always runs to `T_max`.
    pub suppress_end: bool,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        Self {
            selection: Selection::Argmax,
            suppress_end: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Generated {
    pub graph: GroupGraph,
    /// True when `T_max` was reached without selecting END.
    pub truncated: bool,
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn sample_tempered(probs: &[f64], tau: f64, u: f64) -> usize {
    let w: Vec<f64> = probs.iter().map(|p| p.powf(1.0 / tau.max(1e-6))).collect();
    let total: f64 = w.iter().sum();
    if total <= 0.0 || !total.is_finite() {
        return argmax(probs);
    }
    let mut acc = 0.0;
    for (i, wi) in w.iter().enumerate() {
        acc += wi / total;
        if u < acc {
            return i;
        }
    }
    w.len() - 1
}

fn check_candidates(config: &ModelConfig, cm: &CandidateMatrix) -> Result<(), ModelError> {
    if cm.num_groups() == 0 {
        return Err(ModelError::EmptyCandidates);
    }
    if cm.num_groups() != config.k {
        return Err(ModelError::CandidateCount {
            expected: config.k,
            found: cm.num_groups(),
        });
    }
    Ok(())
}

/// Argmax generation with the default options.
pub fn generate_graph(
    p: &ModelParams,
    config: &ModelConfig,
    z_q: &[f64],
    cm: &CandidateMatrix,
    rng: &mut impl UniformSource,
) -> Result<Generated, ModelError> {
    generate_graph_with(p, config, z_q, cm, rng, GenerateOptions::default())
}

/// Draws one uniform per candidate edge, sources ascending. An edge is kept
/// iff the draw is strictly below its probability; a step left without
/// edges gets its most probable one.
pub fn generate_graph_with(
    p: &ModelParams,
    config: &ModelConfig,
    z_q: &[f64],
    cm: &CandidateMatrix,
    rng: &mut impl UniformSource,
    opts: GenerateOptions,
) -> Result<Generated, ModelError> {
    check_candidates(config, cm)?;
    let end = cm.end_index();
    let mut h_his = vec![0.0; p.history_gru.hidden_dim()];
    let mut selected = Vec::new();
    let mut edges = BTreeSet::new();
    let mut combs: Vec<Vec<f64>> = Vec::new();

    for t in 0..config.t_max {
        let state = fuse_task(p, &h_his, z_q, t)?;
        let site = group_site(p, &state.h_comb, cm, Mode::Infer)?;
        let probs = if opts.suppress_end {
            &site.probs[..end]
        } else {
            &site.probs[..]
        };
        let choice = match opts.selection {
            Selection::Argmax => argmax(probs),
            Selection::Temperature(tau) => sample_tempered(probs, tau, rng.next_uniform()),
        };
        if choice == end {
            return Ok(Generated {
                graph: GroupGraph { selected, edges },
                truncated: false,
            });
        }
        selected.push(choice);
        let x_new = cm.row(choice);
        if t > 0 {
            let mut ps = Vec::with_capacity(t);
            let mut added = false;
            for (i, comb) in combs.iter().enumerate() {
                let prob = edge_site(p, comb, x_new, z_q, Mode::Infer)?.prob;
                if rng.next_uniform() < prob {
                    edges.insert((i, t));
                    added = true;
                }
                ps.push(prob);
            }
            if !added {
                edges.insert((argmax(&ps), t));
            }
        }
        combs.push(state.h_comb);
        h_his = p.history_gru.forward(x_new, &h_his)?.h_next;
    }
    Ok(Generated {
        graph: GroupGraph { selected, edges },
        truncated: true,
    })
}

fn check_likelihood_input(
    config: &ModelConfig,
    cm: &CandidateMatrix,
    graph: &GroupGraph,
    full: bool,
) -> Result<(), ModelError> {
    check_candidates(config, cm)?;
    if graph.len() > config.t_max {
        return Err(ModelError::TooLong {
            len: graph.len(),
            t_max: config.t_max,
        });
    }
    let mut report = validate_structure(graph);
    for (step, &gid) in graph.selected.iter().enumerate() {
        if gid >= cm.num_groups() {
            report.violations.push(Violation::UnknownGroup { step, id: gid });
        }
    }
    let ok = if full { report.is_ok() } else { report.is_well_formed() };
    if !ok {
        return Err(ModelError::InvalidGraph(report));
    }
    Ok(())
}

fn log_likelihood(
    p: &ModelParams,
    config: &ModelConfig,
    z_q: &[f64],
    cm: &CandidateMatrix,
    graph: &GroupGraph,
    fallback: bool,
) -> Result<f64, ModelError> {
    check_likelihood_input(config, cm, graph, fallback)?;
    let rows: Vec<Vec<f64>> = graph.selected.iter().map(|&k| cm.row(k).to_vec()).collect();
    let n = graph.len();
    let steps = if n < config.t_max { n + 1 } else { n };
    let mut combs: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut ll = 0.0;
    for t in 0..steps {
        let h_his = aggregate_history(p, &rows[..t])?;
        let state = fuse_task(p, &h_his, z_q, t)?;
        let (probs, _) = predict_group(p, &state.h_comb, z_q, cm, Mode::Infer)?;
        let target = if t < n { graph.selected[t] } else { cm.end_index() };
        ll += probs[target].ln();
        if t == n {
            break;
        }
        if t > 0 {
            let mut ps = Vec::with_capacity(t);
            for comb in &combs {
                ps.push(predict_edge(p, comb, &rows[t], z_q, Mode::Infer)?.0);
            }
            let mut raw = 0.0;
            for (i, &pi) in ps.iter().enumerate() {
                raw += if graph.has_edge(i, t) { pi.ln() } else { (1.0 - pi).ln() };
            }
            if fallback {
                let incoming: Vec<usize> = graph.incoming(t).collect();
                if incoming == [argmax(&ps)] {
                    let none: f64 = ps.iter().map(|pi| (1.0 - pi).ln()).sum();
                    raw = (raw.exp() + none.exp()).ln();
                }
            }
            ll += raw;
        }
        combs.push(state.h_comb);
    }
    Ok(ll)
}

/// Log-probability of `graph` under the raw factorization: group choices
/// (plus END unless the graph fills `T_max`) and an independent Bernoulli
/// term for every ordered step pair. Uses the posterior mean throughout.
///
/// Graphs only need to be well formed; steps without incoming edges are
/// part of this measure even though generation never emits them.
pub fn graph_log_likelihood(
    p: &ModelParams,
    config: &ModelConfig,
    z_q: &[f64],
    cm: &CandidateMatrix,
    graph: &GroupGraph,
) -> Result<f64, ModelError> {
    log_likelihood(p, config, z_q, cm, graph, false)
}

/// Log-probability that argmax generation emits `graph`, including the
/// connectivity fallback. Graphs with an unconnected step are rejected.
pub fn generation_log_likelihood(
    p: &ModelParams,
    config: &ModelConfig,
    z_q: &[f64],
    cm: &CandidateMatrix,
    graph: &GroupGraph,
) -> Result<f64, ModelError> {
    log_likelihood(p, config, z_q, cm, graph, true)
}
