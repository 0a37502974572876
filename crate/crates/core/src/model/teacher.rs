//! Teacher-forced loss over a ground-truth graph, with its exact gradient.
//!
//! Noise is drawn from the epsilon stream in a fixed order: steps ascending,
//! the group site of a step before its edge sites, edge sites by source
//! ascending.

use serde::{Deserialize, Serialize};

use super::{
    cib_encode_full, edge_site, fuse_task, kl_diag, kl_diag_grad, prior_full, reparameterize, EdgeSite,
    EpsilonStream, GaussOut, Mode, ModelConfig, ModelError, ModelParams, Path,
};
use crate::embedding::CandidateMatrix;
use crate::graph::{validate_structure, GroupGraph, Violation};
use crate::nn::kernels::{softmax, GruCache};
use crate::nn::tensor::{add_assign, axpy, dot};
use crate::nn::ParamSet;

const LOG_FLOOR: f64 = 1e-12;

/// One training example: the sentence embedding of the query and its
/// ground-truth graph.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub query: String,
    pub sentence: Vec<f64>,
    pub graph: GroupGraph,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_group: f64,
    pub l_edge: f64,
    pub kl_group: f64,
    pub kl_edge: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn combine(l_group: f64, l_edge: f64, kl_group: f64, kl_edge: f64, beta_g: f64, beta_e: f64) -> Self {
        Self {
            l_group,
            l_edge,
            kl_group,
            kl_edge,
            total: l_group + l_edge + beta_g * kl_group + beta_e * kl_edge,
        }
    }

    pub fn add(&mut self, o: &LossBreakdown) {
        self.l_group += o.l_group;
        self.l_edge += o.l_edge;
        self.kl_group += o.kl_group;
        self.kl_edge += o.kl_edge;
        self.total += o.total;
    }

    pub fn scale(&mut self, s: f64) {
        self.l_group *= s;
        self.l_edge *= s;
        self.kl_group *= s;
        self.kl_edge *= s;
        self.total *= s;
    }

    pub fn is_finite(&self) -> bool {
        [self.l_group, self.l_edge, self.kl_group, self.kl_edge, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

struct GroupRec {
    t: usize,
    target: usize,
    gru: GruCache,
    q: GaussOut,
    eps: Vec<f64>,
    c: Vec<f64>,
    probs: Vec<f64>,
}

struct EdgeRec {
    source: usize,
    present: bool,
    eps: Vec<f64>,
    site: EdgeSite,
}

fn check_sample(config: &ModelConfig, cm: &CandidateMatrix, graph: &GroupGraph) -> Result<(), ModelError> {
    if cm.num_groups() != config.k {
        return Err(ModelError::CandidateCount {
            expected: config.k,
            found: cm.num_groups(),
        });
    }
    if graph.len() > config.t_max {
        return Err(ModelError::TooLong {
            len: graph.len(),
            t_max: config.t_max,
        });
    }
    let mut report = validate_structure(graph);
    for (step, &id) in graph.selected.iter().enumerate() {
        if id >= cm.num_groups() {
            report.violations.push(Violation::UnknownGroup { step, id });
        }
    }
    if !report.is_ok() {
        return Err(ModelError::InvalidGraph(report));
    }
    Ok(())
}

/// NaN passes through so a broken forward pass is not hidden by the floor.
fn neg_log(p: f64) -> f64 {
    if p.is_nan() {
        return f64::NAN;
    }
    -p.max(LOG_FLOOR).ln()
}

/// Forward pass only.
pub fn teacher_forced_loss(
    p: &ModelParams,
    config: &ModelConfig,
    sample: &Sample,
    cm: &CandidateMatrix,
    beta_g: f64,
    beta_e: f64,
    eps: &mut EpsilonStream,
) -> Result<LossBreakdown, ModelError> {
    Ok(run(p, config, sample, cm, beta_g, beta_e, eps, false)?.0)
}

/// Loss and gradient with respect to every parameter. Group rows of the
/// candidate matrix are frozen; the END row gradient lands in `end_row`.
pub fn teacher_forced_grad(
    p: &ModelParams,
    config: &ModelConfig,
    sample: &Sample,
    cm: &CandidateMatrix,
    beta_g: f64,
    beta_e: f64,
    eps: &mut EpsilonStream,
) -> Result<(LossBreakdown, ModelParams), ModelError> {
    let (loss, grads) = run(p, config, sample, cm, beta_g, beta_e, eps, true)?;
    Ok((loss, grads.expect("gradient requested")))
}

#[allow(clippy::too_many_arguments)]
fn run(
    p: &ModelParams,
    config: &ModelConfig,
    sample: &Sample,
    cm: &CandidateMatrix,
    beta_g: f64,
    beta_e: f64,
    eps: &mut EpsilonStream,
    want_grad: bool,
) -> Result<(LossBreakdown, Option<ModelParams>), ModelError> {
    let graph = &sample.graph;
    check_sample(config, cm, graph)?;
    let d = p.d();
    let k = cm.num_groups();
    let n = graph.len();
    let steps = if n < config.t_max { n + 1 } else { n };

    let ffn = p.task_ffn.forward(&sample.sentence)?;
    let z = ffn.y.clone();
    let prior_g = prior_full(p, Path::Group, &z)?;
    let prior_e = prior_full(p, Path::Edge, &z)?;

    let mut h_his = vec![vec![0.0; d]];
    let mut his_caches = Vec::with_capacity(steps);
    for t in 1..steps {
        let c = p.history_gru.forward(cm.row(graph.selected[t - 1]), &h_his[t - 1])?;
        h_his.push(c.h_next.clone());
        his_caches.push(c);
    }
    let mut states = Vec::with_capacity(steps);
    for (t, h) in h_his.iter().enumerate() {
        states.push(fuse_task(p, h, &z, t)?);
    }

    let zero = vec![0.0; d];
    let (mut l_group, mut l_edge, mut kl_group, mut kl_edge) = (0.0, 0.0, 0.0, 0.0);
    let mut groups = Vec::with_capacity(steps);
    let mut edges = Vec::new();
    for t in 0..steps {
        let e = eps.next(d)?;
        let gru = p.group_gru.forward(&states[t].h_comb, &zero)?;
        let q = cib_encode_full(p, Path::Group, &gru.h_next)?;
        let c = reparameterize(&q.gauss, &e);
        let mut logits: Vec<f64> = (0..k).map(|j| dot(&c, cm.row(j))).collect();
        logits.push(dot(&c, &p.end_row));
        let probs = softmax(&logits);
        let target = if t < n { graph.selected[t] } else { k };
        l_group += neg_log(probs[target]);
        kl_group += kl_diag(&q.gauss, &prior_g.gauss);
        groups.push(GroupRec {
            t,
            target,
            gru,
            q,
            eps: e,
            c,
            probs,
        });

        if t == 0 || t >= n {
            continue;
        }
        let x_new = cm.row(graph.selected[t]);
        for i in 0..t {
            let e = eps.next(d)?;
            let site = edge_site(p, &states[i].h_comb, x_new, &z, Mode::Train(&e))?;
            let present = graph.has_edge(i, t);
            l_edge += if present { neg_log(site.prob) } else { neg_log(1.0 - site.prob) };
            kl_edge += kl_diag(&site.q.gauss, &prior_e.gauss);
            edges.push((
                t,
                EdgeRec {
                    source: i,
                    present,
                    eps: e,
                    site,
                },
            ));
        }
    }
    let loss = LossBreakdown::combine(l_group, l_edge, kl_group, kl_edge, beta_g, beta_e);
    if !want_grad {
        return Ok((loss, None));
    }

    let mut g = p.zeros_like();
    let mut dh_comb = vec![vec![0.0; d]; steps];
    let mut dz = vec![0.0; d];
    let mut dprior_g = (vec![0.0; d], vec![0.0; d]);
    let mut dprior_e = (vec![0.0; d], vec![0.0; d]);

    for rec in &groups {
        let mut dlogits = rec.probs.clone();
        if rec.probs[rec.target] < LOG_FLOOR {
            dlogits.fill(0.0);
        } else {
            dlogits[rec.target] -= 1.0;
        }
        let mut dc = vec![0.0; d];
        for (j, &dl) in dlogits[..k].iter().enumerate() {
            axpy(&mut dc, dl, cm.row(j));
        }
        axpy(&mut dc, dlogits[k], &p.end_row);
        axpy(&mut g.end_row, dlogits[k], &rec.c);
        let dx = cib_backward(
            p,
            Path::Group,
            &rec.gru.h_next,
            &rec.q,
            &rec.eps,
            &dc,
            &prior_g,
            beta_g,
            &mut dprior_g,
            &mut g,
        );
        let (dhc, _) = p.group_gru.backward(&rec.gru, &dx, &mut g.group_gru);
        add_assign(&mut dh_comb[rec.t], &dhc);
    }

    for (_, rec) in &edges {
        let prob = rec.site.prob;
        let dlogit = match rec.present {
            true if prob >= LOG_FLOOR => prob - 1.0,
            false if 1.0 - prob >= LOG_FLOOR => prob,
            _ => 0.0,
        };
        let dc = p.edge_head.backward(&rec.site.head, &[dlogit], &mut g.edge_head);
        let dx = cib_backward(
            p,
            Path::Edge,
            &rec.site.gru.h_next,
            &rec.site.q,
            &rec.eps,
            &dc,
            &prior_e,
            beta_e,
            &mut dprior_e,
            &mut g,
        );
        let (dproj, _) = p.edge_gru.backward(&rec.site.gru, &dx, &mut g.edge_gru);
        let dfeat = p.edge_proj.backward(&rec.site.proj, &dproj, &mut g.edge_proj);
        add_assign(&mut dh_comb[rec.source], &dfeat[..d]);
        add_assign(&mut dz, &dfeat[2 * d..]);
    }

    let sqrt_d = (d as f64).sqrt();
    let mut dh_his = vec![vec![0.0; d]; steps];
    for t in 0..steps {
        let dhc = &dh_comb[t];
        add_assign(g.e_pos.row_mut(t), dhc);
        let gate = states[t].g;
        let h = &h_his[t];
        let dgate: f64 = (0..d).map(|i| dhc[i] * (z[i] - h[i])).sum();
        let ds = dgate * gate * (1.0 - gate) / sqrt_d;
        for i in 0..d {
            dh_his[t][i] += (1.0 - gate) * dhc[i] + ds * z[i];
            dz[i] += gate * dhc[i] + ds * h[i];
        }
    }
    for t in (1..steps).rev() {
        let (_, dprev) = p
            .history_gru
            .backward(&his_caches[t - 1], &dh_his[t], &mut g.history_gru);
        add_assign(&mut dh_his[t - 1], &dprev);
    }

    for (path, prior, (dmu, mut dls)) in [(Path::Group, &prior_g, dprior_g), (Path::Edge, &prior_e, dprior_e)] {
        mask(&mut dls, &prior.pass);
        let (mu_aff, ls_aff) = p.prior(path);
        let (gmu, gls) = g.prior_mut(path);
        add_assign(&mut dz, &mu_aff.backward(&z, &dmu, gmu));
        add_assign(&mut dz, &ls_aff.backward(&z, &dls, gls));
    }
    p.task_ffn.backward(&ffn, &dz, &mut g.task_ffn);
    Ok((loss, Some(g)))
}

fn mask(v: &mut [f64], pass: &[bool]) {
    for (x, &ok) in v.iter_mut().zip(pass) {
        if !ok {
            *x = 0.0;
        }
    }
}

/// Backprop through `c = μ(x) + σ(x) ε` plus `β · KL(q ‖ prior)`. Prior
/// gradients are accumulated into `dprior` for a single pass at the end.
#[allow(clippy::too_many_arguments)]
fn cib_backward(
    p: &ModelParams,
    path: Path,
    x: &[f64],
    q: &GaussOut,
    eps: &[f64],
    dc: &[f64],
    prior: &GaussOut,
    beta: f64,
    dprior: &mut (Vec<f64>, Vec<f64>),
    g: &mut ModelParams,
) -> Vec<f64> {
    let sigma = q.gauss.sigma();
    let mut dmu = dc.to_vec();
    let mut dls: Vec<f64> = (0..dc.len()).map(|i| dc[i] * sigma[i] * eps[i]).collect();
    let [dmq, dlq, dmp, dlp] = kl_diag_grad(&q.gauss, &prior.gauss);
    axpy(&mut dmu, beta, &dmq);
    axpy(&mut dls, beta, &dlq);
    axpy(&mut dprior.0, beta, &dmp);
    axpy(&mut dprior.1, beta, &dlp);
    mask(&mut dls, &q.pass);
    let (mu_aff, ls_aff) = p.encoder(path);
    let (gmu, gls) = g.encoder_mut(path);
    let mut dx = mu_aff.backward(x, &dmu, gmu);
    add_assign(&mut dx, &ls_aff.backward(x, &dls, gls));
    dx
}
