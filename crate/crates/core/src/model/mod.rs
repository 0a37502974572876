//! The topology generator: history aggregation, gated task fusion, the
//! conditional information bottleneck and the group / edge predictors.

mod generate;
mod teacher;

pub use generate::{
    generate_graph, generate_graph_with, generation_log_likelihood, graph_log_likelihood,
    GenerateOptions, Generated, Selection,
};
pub use teacher::{teacher_forced_grad, teacher_forced_loss, LossBreakdown, Sample};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::CandidateMatrix;
use crate::graph::ValidationReport;
use crate::nn::kernels::{sigmoid, softmax, GruCache};
use crate::nn::tensor::dot;
use crate::nn::{Affine, GruCell, Matrix, Mlp2, ParamSet, ShapeError};
use crate::rng::SeededRng;

pub const LOG_SIGMA_MIN: f64 = -6.0;
pub const LOG_SIGMA_MAX: f64 = 2.0;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("step {t} exceeds the step budget T_max = {t_max}")]
    StepOverflow { t: usize, t_max: usize },
    #[error("graph has {len} steps but T_max = {t_max}")]
    TooLong { len: usize, t_max: usize },
    #[error("invalid graph: {0}")]
    InvalidGraph(ValidationReport),
    #[error("candidate matrix has no group rows")]
    EmptyCandidates,
    #[error("candidate matrix has {found} groups, model expects {expected}")]
    CandidateCount { expected: usize, found: usize },
    #[error("epsilon stream exhausted after {0} draws")]
    EpsilonExhausted(usize),
    #[error(transparent)]
    Shape(#[from] ShapeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d: usize,
    pub h: usize,
    pub k: usize,
    pub t_max: usize,
    pub beta_g: f64,
    pub beta_e: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 384,
            h: 256,
            k: 16,
            t_max: 8,
            beta_g: 0.0,
            beta_e: 0.3,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn new(d: usize, h: usize, k: usize) -> Self {
        Self {
            d,
            h,
            k,
            ..Self::default()
        }
    }

    pub fn with_t_max(mut self, t_max: usize) -> Self {
        self.t_max = t_max;
        self
    }

    pub fn check(&self) -> Result<(), String> {
        if self.d == 0 || self.h == 0 || self.k == 0 || self.t_max == 0 {
            return Err("d, h, K and T_max must be positive".into());
        }
        if !(self.beta_g >= 0.0 && self.beta_e >= 0.0) {
            return Err("bottleneck weights must be non-negative".into());
        }
        Ok(())
    }
}

/// All learnable tensors of the generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub task_ffn: Mlp2,
    pub history_gru: GruCell,
    pub group_gru: GruCell,
    pub edge_proj: Mlp2,
    pub edge_gru: GruCell,
    /// `T_max × d` step embeddings.
    pub e_pos: Matrix,
    pub group_enc_mu: Affine,
    pub group_enc_logsig: Affine,
    pub edge_enc_mu: Affine,
    pub edge_enc_logsig: Affine,
    pub group_prior_mu: Affine,
    pub group_prior_logsig: Affine,
    pub edge_prior_mu: Affine,
    pub edge_prior_logsig: Affine,
    pub edge_head: Mlp2,
    pub end_row: Vec<f64>,
}

impl ParamSet for ModelParams {
    fn collect<'a>(&'a self, p: &str, out: &mut Vec<(String, &'a [f64])>) {
        self.task_ffn.collect(&format!("{p}.task_ffn"), out);
        self.history_gru.collect(&format!("{p}.history_gru"), out);
        self.group_gru.collect(&format!("{p}.group_gru"), out);
        self.edge_proj.collect(&format!("{p}.edge_proj"), out);
        self.edge_gru.collect(&format!("{p}.edge_gru"), out);
        out.push((format!("{p}.e_pos"), self.e_pos.as_slice()));
        self.group_enc_mu.collect(&format!("{p}.group_enc_mu"), out);
        self.group_enc_logsig.collect(&format!("{p}.group_enc_logsig"), out);
        self.edge_enc_mu.collect(&format!("{p}.edge_enc_mu"), out);
        self.edge_enc_logsig.collect(&format!("{p}.edge_enc_logsig"), out);
        self.group_prior_mu.collect(&format!("{p}.group_prior_mu"), out);
        self.group_prior_logsig.collect(&format!("{p}.group_prior_logsig"), out);
        self.edge_prior_mu.collect(&format!("{p}.edge_prior_mu"), out);
        self.edge_prior_logsig.collect(&format!("{p}.edge_prior_logsig"), out);
        self.edge_head.collect(&format!("{p}.edge_head"), out);
        out.push((format!("{p}.end_row"), &self.end_row));
    }

    fn collect_mut<'a>(&'a mut self, p: &str, out: &mut Vec<(String, &'a mut [f64])>) {
        self.task_ffn.collect_mut(&format!("{p}.task_ffn"), out);
        self.history_gru.collect_mut(&format!("{p}.history_gru"), out);
        self.group_gru.collect_mut(&format!("{p}.group_gru"), out);
        self.edge_proj.collect_mut(&format!("{p}.edge_proj"), out);
        self.edge_gru.collect_mut(&format!("{p}.edge_gru"), out);
        out.push((format!("{p}.e_pos"), self.e_pos.as_mut_slice()));
        self.group_enc_mu.collect_mut(&format!("{p}.group_enc_mu"), out);
        self.group_enc_logsig.collect_mut(&format!("{p}.group_enc_logsig"), out);
        self.edge_enc_mu.collect_mut(&format!("{p}.edge_enc_mu"), out);
        self.edge_enc_logsig.collect_mut(&format!("{p}.edge_enc_logsig"), out);
        self.group_prior_mu.collect_mut(&format!("{p}.group_prior_mu"), out);
        self.group_prior_logsig.collect_mut(&format!("{p}.group_prior_logsig"), out);
        self.edge_prior_mu.collect_mut(&format!("{p}.edge_prior_mu"), out);
        self.edge_prior_logsig.collect_mut(&format!("{p}.edge_prior_logsig"), out);
        self.edge_head.collect_mut(&format!("{p}.edge_head"), out);
        out.push((format!("{p}.end_row"), &mut self.end_row));
    }
}

fn uniform_fill(m: &mut [f64], scale: f64, rng: &mut SeededRng) {
    m.iter_mut().for_each(|v| *v = rng.random_range(-scale..scale));
}

fn init_affine(a: &mut Affine, rng: &mut SeededRng) {
    let scale = 1.0 / (a.input_dim() as f64).sqrt();
    uniform_fill(a.w.as_mut_slice(), scale, rng);
}

fn init_mlp(m: &mut Mlp2, rng: &mut SeededRng) {
    init_affine(&mut m.l1, rng);
    init_affine(&mut m.l2, rng);
}

fn init_gru(g: &mut GruCell, rng: &mut SeededRng) {
    let scale = 1.0 / (g.hidden_dim() as f64).sqrt();
    for m in [&mut g.w_z, &mut g.w_r, &mut g.w_n, &mut g.u_z, &mut g.u_r, &mut g.u_n] {
        uniform_fill(m.as_mut_slice(), scale, rng);
    }
}

impl ModelParams {
    pub fn zeros(c: &ModelConfig) -> Self {
        let (d, h) = (c.d, c.h);
        Self {
            task_ffn: Mlp2::zeros(d, h, d),
            history_gru: GruCell::zeros(d, d),
            group_gru: GruCell::zeros(d, d),
            edge_proj: Mlp2::zeros(3 * d, h, d),
            edge_gru: GruCell::zeros(d, d),
            e_pos: Matrix::zeros(c.t_max, d),
            group_enc_mu: Affine::zeros(d, d),
            group_enc_logsig: Affine::zeros(d, d),
            edge_enc_mu: Affine::zeros(d, d),
            edge_enc_logsig: Affine::zeros(d, d),
            group_prior_mu: Affine::zeros(d, d),
            group_prior_logsig: Affine::zeros(d, d),
            edge_prior_mu: Affine::zeros(d, d),
            edge_prior_logsig: Affine::zeros(d, d),
            edge_head: Mlp2::zeros(d, h, 1),
            end_row: vec![0.0; d],
        }
    }

    /// Fan-in scaled uniform weights, zero biases. Encoder and prior
    /// log-sigma biases start at `INIT_LOG_SIGMA`.
    pub fn init(c: &ModelConfig, rng: &mut SeededRng) -> Self {
        let mut p = Self::zeros(c);
        init_mlp(&mut p.task_ffn, rng);
        init_gru(&mut p.history_gru, rng);
        init_gru(&mut p.group_gru, rng);
        init_mlp(&mut p.edge_proj, rng);
        init_gru(&mut p.edge_gru, rng);
        uniform_fill(p.e_pos.as_mut_slice(), 0.1, rng);
        for a in [
            &mut p.group_enc_mu,
            &mut p.edge_enc_mu,
            &mut p.group_prior_mu,
            &mut p.edge_prior_mu,
        ] {
            init_affine(a, rng);
        }
        for a in [
            &mut p.group_enc_logsig,
            &mut p.edge_enc_logsig,
            &mut p.group_prior_logsig,
            &mut p.edge_prior_logsig,
        ] {
            init_affine(a, rng);
            a.w.as_mut_slice().iter_mut().for_each(|v| *v *= 0.1);
            a.b.fill(Self::INIT_LOG_SIGMA);
        }
        init_mlp(&mut p.edge_head, rng);
        let end: Vec<f64> = (0..c.d).map(|_| rng.sample(StandardNormal)).collect();
        let norm = crate::nn::tensor::l2_norm(&end).max(1e-12);
        p.end_row = end.into_iter().map(|v| v / norm).collect();
        p
    }

    pub const INIT_LOG_SIGMA: f64 = -2.0;

    pub fn d(&self) -> usize {
        self.end_row.len()
    }

    pub fn t_max(&self) -> usize {
        self.e_pos.rows()
    }

    fn encoder(&self, path: Path) -> (&Affine, &Affine) {
        match path {
            Path::Group => (&self.group_enc_mu, &self.group_enc_logsig),
            Path::Edge => (&self.edge_enc_mu, &self.edge_enc_logsig),
        }
    }

    fn prior(&self, path: Path) -> (&Affine, &Affine) {
        match path {
            Path::Group => (&self.group_prior_mu, &self.group_prior_logsig),
            Path::Edge => (&self.edge_prior_mu, &self.edge_prior_logsig),
        }
    }

    fn encoder_mut(&mut self, path: Path) -> (&mut Affine, &mut Affine) {
        match path {
            Path::Group => (&mut self.group_enc_mu, &mut self.group_enc_logsig),
            Path::Edge => (&mut self.edge_enc_mu, &mut self.edge_enc_logsig),
        }
    }

    fn prior_mut(&mut self, path: Path) -> (&mut Affine, &mut Affine) {
        match path {
            Path::Group => (&mut self.group_prior_mu, &mut self.group_prior_logsig),
            Path::Edge => (&mut self.edge_prior_mu, &mut self.edge_prior_logsig),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Path {
    Group,
    Edge,
}

/// Diagonal Gaussian with clamped log standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianDiag {
    pub mu: Vec<f64>,
    pub log_sigma: Vec<f64>,
}

impl GaussianDiag {
    /// Clamps `raw_log_sigma` into `[LOG_SIGMA_MIN, LOG_SIGMA_MAX]`.
    pub fn new(mu: Vec<f64>, raw_log_sigma: Vec<f64>) -> Self {
        let log_sigma = raw_log_sigma
            .into_iter()
            .map(|v| v.clamp(LOG_SIGMA_MIN, LOG_SIGMA_MAX))
            .collect();
        Self { mu, log_sigma }
    }

    pub fn standard(d: usize) -> Self {
        Self {
            mu: vec![0.0; d],
            log_sigma: vec![0.0; d],
        }
    }

    pub fn sigma(&self) -> Vec<f64> {
        self.log_sigma.iter().map(|v| v.exp()).collect()
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

/// Gaussian head output together with the clamp mask (true = inside the
/// clamp range, gradient passes).
#[derive(Debug, Clone)]
pub(crate) struct GaussOut {
    pub gauss: GaussianDiag,
    pub pass: Vec<bool>,
}

fn gaussian_head(mu: &Affine, logsig: &Affine, x: &[f64]) -> Result<GaussOut, ShapeError> {
    let m = mu.forward(x)?;
    let raw = logsig.forward(x)?;
    let pass = raw
        .iter()
        .map(|v| (LOG_SIGMA_MIN..=LOG_SIGMA_MAX).contains(v))
        .collect();
    Ok(GaussOut {
        gauss: GaussianDiag::new(m, raw),
        pass,
    })
}

pub(crate) fn cib_encode_full(p: &ModelParams, path: Path, x: &[f64]) -> Result<GaussOut, ShapeError> {
    let (mu, ls) = p.encoder(path);
    gaussian_head(mu, ls, x)
}

pub(crate) fn prior_full(p: &ModelParams, path: Path, z_q: &[f64]) -> Result<GaussOut, ShapeError> {
    let (mu, ls) = p.prior(path);
    gaussian_head(mu, ls, z_q)
}

/// Path-specific posterior `q(c | x)`.
pub fn cib_encode(p: &ModelParams, path: Path, x: &[f64]) -> Result<GaussianDiag, ShapeError> {
    Ok(cib_encode_full(p, path, x)?.gauss)
}

/// Task-conditioned prior `p(c | z_q)`.
pub fn conditional_prior(p: &ModelParams, path: Path, z_q: &[f64]) -> Result<GaussianDiag, ShapeError> {
    Ok(prior_full(p, path, z_q)?.gauss)
}

/// `c = μ + σ ⊙ ε`
pub fn reparameterize(g: &GaussianDiag, eps: &[f64]) -> Vec<f64> {
    g.mu.iter()
        .zip(&g.log_sigma)
        .zip(eps)
        .map(|((m, ls), e)| m + ls.exp() * e)
        .collect()
}

/// Closed-form KL divergence between diagonal Gaussians.
pub fn kl_diag(q: &GaussianDiag, p: &GaussianDiag) -> f64 {
    let mut kl = 0.0;
    for i in 0..q.dim() {
        let var_q = (2.0 * q.log_sigma[i]).exp();
        let var_p = (2.0 * p.log_sigma[i]).exp();
        let diff = q.mu[i] - p.mu[i];
        kl += (p.log_sigma[i] - q.log_sigma[i]) + (var_q + diff * diff) / (2.0 * var_p) - 0.5;
    }
    kl
}

/// Gradients of `kl_diag` with respect to `(μ_q, logσ_q, μ_p, logσ_p)`.
pub(crate) fn kl_diag_grad(q: &GaussianDiag, p: &GaussianDiag) -> [Vec<f64>; 4] {
    let n = q.dim();
    let (mut dmq, mut dlq, mut dmp, mut dlp) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for i in 0..n {
        let var_q = (2.0 * q.log_sigma[i]).exp();
        let var_p = (2.0 * p.log_sigma[i]).exp();
        let diff = q.mu[i] - p.mu[i];
        dmq[i] = diff / var_p;
        dmp[i] = -dmq[i];
        dlq[i] = -1.0 + var_q / var_p;
        dlp[i] = 1.0 - (var_q + diff * diff) / var_p;
    }
    [dmq, dlq, dmp, dlp]
}

/// Folds the history GRU over the embeddings from a zero state.
pub fn aggregate_history(p: &ModelParams, selected_embeddings: &[Vec<f64>]) -> Result<Vec<f64>, ShapeError> {
    let mut h = vec![0.0; p.history_gru.hidden_dim()];
    for x in selected_embeddings {
        h = p.history_gru.forward(x, &h)?.h_next;
    }
    Ok(h)
}

/// Gate and fused state for one step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepState {
    pub h_his: Vec<f64>,
    pub g: f64,
    pub h_comb: Vec<f64>,
}

/// `g = σ(h·z/√d)`, `h_comb = (1−g)h + g z + e_pos[t]`
pub fn fuse_task(p: &ModelParams, h_his: &[f64], z_q: &[f64], t: usize) -> Result<StepState, ModelError> {
    if t >= p.t_max() {
        return Err(ModelError::StepOverflow { t, t_max: p.t_max() });
    }
    let d = p.d();
    if h_his.len() != d || z_q.len() != d {
        return Err(ShapeError::new("fuse_task", format!("[{d}]"), format!("[{}], [{}]", h_his.len(), z_q.len())).into());
    }
    let g = sigmoid(dot(h_his, z_q) / (d as f64).sqrt());
    let pos = p.e_pos.row(t);
    let h_comb = (0..d)
        .map(|i| (1.0 - g) * h_his[i] + g * z_q[i] + pos[i])
        .collect();
    Ok(StepState {
        h_his: h_his.to_vec(),
        g,
        h_comb,
    })
}

#[derive(Debug, Clone, Copy)]
pub enum Mode<'a> {
    /// Sample `c = μ + σ ε` with the supplied noise.
    Train(&'a [f64]),
    /// Use the posterior mean.
    Infer,
}

fn latent(q: &GaussianDiag, mode: Mode<'_>) -> Vec<f64> {
    match mode {
        Mode::Train(eps) => reparameterize(q, eps),
        Mode::Infer => q.mu.clone(),
    }
}

pub(crate) fn group_logits(c: &[f64], cm: &CandidateMatrix) -> Vec<f64> {
    (0..cm.matrix().rows()).map(|k| dot(c, cm.row(k))).collect()
}

pub(crate) struct GroupSite {
    pub q: GaussOut,
    pub probs: Vec<f64>,
}

pub(crate) fn group_site(
    p: &ModelParams,
    h_comb: &[f64],
    cm: &CandidateMatrix,
    mode: Mode<'_>,
) -> Result<GroupSite, ShapeError> {
    let zero = vec![0.0; p.group_gru.hidden_dim()];
    let gru = p.group_gru.forward(h_comb, &zero)?;
    let q = cib_encode_full(p, Path::Group, &gru.h_next)?;
    let c = latent(&q.gauss, mode);
    let probs = softmax(&group_logits(&c, cm));
    Ok(GroupSite { q, probs })
}

/// Distribution over the `K + 1` candidates and the group-path KL term.
pub fn predict_group(
    p: &ModelParams,
    h_comb: &[f64],
    z_q: &[f64],
    cm: &CandidateMatrix,
    mode: Mode<'_>,
) -> Result<(Vec<f64>, f64), ShapeError> {
    let site = group_site(p, h_comb, cm, mode)?;
    let prior = conditional_prior(p, Path::Group, z_q)?;
    Ok((site.probs, kl_diag(&site.q.gauss, &prior)))
}

pub(crate) struct EdgeSite {
    pub proj: crate::nn::kernels::Mlp2Cache,
    pub gru: GruCache,
    pub q: GaussOut,
    pub head: crate::nn::kernels::Mlp2Cache,
    pub prob: f64,
}

pub(crate) fn edge_site(
    p: &ModelParams,
    h_comb_source: &[f64],
    x_new: &[f64],
    z_q: &[f64],
    mode: Mode<'_>,
) -> Result<EdgeSite, ShapeError> {
    let mut feature = Vec::with_capacity(3 * p.d());
    feature.extend_from_slice(h_comb_source);
    feature.extend_from_slice(x_new);
    feature.extend_from_slice(z_q);
    let proj = p.edge_proj.forward(&feature)?;
    let zero = vec![0.0; p.edge_gru.hidden_dim()];
    let gru = p.edge_gru.forward(&proj.y, &zero)?;
    let q = cib_encode_full(p, Path::Edge, &gru.h_next)?;
    let c = latent(&q.gauss, mode);
    let head = p.edge_head.forward(&c)?;
    let prob = sigmoid(head.y[0]);
    Ok(EdgeSite {
        proj,
        gru,
        q,
        head,
        prob,
    })
}

/// Probability of an edge from a source step into the new group, and the
/// edge-path KL term.
pub fn predict_edge(
    p: &ModelParams,
    h_comb_source: &[f64],
    x_new_group: &[f64],
    z_q: &[f64],
    mode: Mode<'_>,
) -> Result<(f64, f64), ShapeError> {
    let site = edge_site(p, h_comb_source, x_new_group, z_q, mode)?;
    let prior = conditional_prior(p, Path::Edge, z_q)?;
    Ok((site.prob, kl_diag(&site.q.gauss, &prior)))
}

/// Source of Gaussian noise vectors for the reparameterized sites.
#[derive(Debug, Clone)]
pub enum EpsilonStream {
    Zero,
    Gaussian(SeededRng),
    /// Replays the given vectors in order.
    Fixed(Vec<Vec<f64>>, usize),
}

impl EpsilonStream {
    pub fn gaussian(seed: u64, stream: u64) -> Self {
        EpsilonStream::Gaussian(crate::rng::stream(seed, stream))
    }

    pub fn fixed(vectors: Vec<Vec<f64>>) -> Self {
        EpsilonStream::Fixed(vectors, 0)
    }

    pub fn next(&mut self, d: usize) -> Result<Vec<f64>, ModelError> {
        match self {
            EpsilonStream::Zero => Ok(vec![0.0; d]),
            EpsilonStream::Gaussian(rng) => Ok((0..d).map(|_| rng.sample(StandardNormal)).collect()),
            EpsilonStream::Fixed(v, pos) => {
                let out = v.get(*pos).cloned().ok_or(ModelError::EpsilonExhausted(*pos))?;
                if out.len() != d {
                    return Err(ShapeError::new("epsilon", format!("[{d}]"), format!("[{}]", out.len())).into());
                }
                *pos += 1;
                Ok(out)
            }
        }
    }
}
