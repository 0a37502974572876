//! Dataset construction and the teacher-forced training loop.

mod explore;

pub use crate::model::{teacher_forced_grad, teacher_forced_loss, LossBreakdown, Sample};
pub use explore::{
    curate_minimal, explore_and_label, sample_candidate_topology, Curation, ExecOutcome, ExplorationConfig,
    ExploreRecord, Family, HarnessExecutor, LabeledQuery, TopologyExecutor,
};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{encode_embedded, CandidateMatrix, EmbeddingError, EmbeddingProvider};
use crate::graph::Trajectory;
use crate::model::{generate_graph, EpsilonStream, ModelConfig, ModelError, ModelParams};
use crate::nn::optim::{AdamW, AdamWConfig, OptimError};
use crate::nn::ParamSet;
use crate::rng::{stream, stream_id};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("group count {n} outside 1..={t_max}")]
    GroupCount { n: usize, t_max: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("epoch {epoch}, batch {batch}: {source}")]
    Optim {
        epoch: usize,
        batch: usize,
        source: OptimError,
    },
    #[error("sample {index}: {source}")]
    Model { index: usize, source: ModelError },
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub warmup: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub clip: Option<f64>,
    pub beta_g: f64,
    pub beta_e: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            warmup: 10,
            batch: 40,
            lr: 1e-4,
            weight_decay: 1e-3,
            clip: Some(1.0),
            beta_g: 0.0,
            beta_e: 0.3,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn check(&self) -> Result<(), TrainError> {
        if self.warmup > self.epochs {
            return Err(TrainError::Config("warm-up longer than training".into()));
        }
        if self.batch == 0 {
            return Err(TrainError::Config("batch size must be at least 1".into()));
        }
        if self.beta_g < 0.0 || self.beta_e < 0.0 {
            return Err(TrainError::Config("bottleneck weights must be non-negative".into()));
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            clip_norm: self.clip,
            ..AdamWConfig::default()
        }
    }
}

/// Linear ramp from 0 to `target` over `warmup` epochs.
pub fn kl_warmup(epoch: usize, warmup: usize, target: f64) -> f64 {
    if warmup == 0 || epoch >= warmup {
        return target;
    }
    target * (epoch as f64 / warmup as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub beta_g: f64,
    pub beta_e: f64,
    pub l_group: f64,
    pub l_edge: f64,
    pub kl_group: f64,
    pub kl_edge: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub log: Vec<EpochLog>,
    pub optimizer: AdamW<ModelParams>,
}

/// Embeds each trajectory's query once.
pub fn build_samples(provider: &EmbeddingProvider, data: &[Trajectory]) -> Result<Vec<Sample>, TrainError> {
    data.iter()
        .map(|t| {
            Ok(Sample {
                query: t.query.clone(),
                sentence: provider.embed_text(&t.query)?,
                graph: t.graph.clone(),
            })
        })
        .collect()
}

const EPS_DOMAIN: u64 = 0x6570_7369_6c6f_6e00;

/// Noise stream for one sample visit.
pub fn sample_noise(seed: u64, epoch: usize, index: usize) -> EpsilonStream {
    EpsilonStream::gaussian(seed ^ EPS_DOMAIN, stream_id(epoch as u64, index as u64))
}

/// Runs the epoch loop. The candidate matrix END row is refreshed from the
/// parameters after every optimizer step.
pub fn train(
    params: &mut ModelParams,
    model: &ModelConfig,
    samples: &[Sample],
    cm: &mut CandidateMatrix,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    cfg.check()?;
    if samples.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut opt = AdamW::new(cfg.optimizer(), params);
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    cm.set_end_row(&params.end_row);

    for epoch in 0..cfg.epochs {
        let beta_g = kl_warmup(epoch, cfg.warmup, cfg.beta_g);
        let beta_e = kl_warmup(epoch, cfg.warmup, cfg.beta_e);
        order.shuffle(&mut stream(cfg.seed, epoch as u64));
        let mut epoch_sum = LossBreakdown::default();

        for (batch, chunk) in order.chunks(cfg.batch).enumerate() {
            let results: Vec<Result<(LossBreakdown, ModelParams), TrainError>> = chunk
                .par_iter()
                .map(|&idx| {
                    let mut eps = sample_noise(cfg.seed, epoch, idx);
                    teacher_forced_grad(params, model, &samples[idx], cm, beta_g, beta_e, &mut eps)
                        .map_err(|source| TrainError::Model { index: idx, source })
                })
                .collect();
            let mut grads = params.zeros_like();
            let mut batch_sum = LossBreakdown::default();
            for r in results {
                let (loss, g) = r?;
                batch_sum.add(&loss);
                grads.add_scaled(&g, 1.0);
            }
            if !batch_sum.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, batch });
            }
            let inv = 1.0 / chunk.len() as f64;
            grads.scale(inv);
            epoch_sum.add(&batch_sum);
            opt.step(params, &grads)
                .map_err(|source| TrainError::Optim { epoch, batch, source })?;
            cm.set_end_row(&params.end_row);
        }
        epoch_sum.scale(1.0 / samples.len() as f64);
        log.push(EpochLog {
            epoch,
            beta_g,
            beta_e,
            l_group: epoch_sum.l_group,
            l_edge: epoch_sum.l_edge,
            kl_group: epoch_sum.kl_group,
            kl_edge: epoch_sum.kl_edge,
            total: epoch_sum.total,
        });
    }
    Ok(TrainOutcome { log, optimizer: opt })
}

/// Seed for the edge draws when generating for sample `index`.
pub fn generation_rng(seed: u64, index: usize) -> crate::rng::SeededRng {
    stream(seed, stream_id(u32::MAX as u64, index as u64))
}

/// Number of samples whose argmax generation reproduces the ground truth.
pub fn reconstruction_count(
    params: &ModelParams,
    model: &ModelConfig,
    samples: &[Sample],
    cm: &CandidateMatrix,
    seed: u64,
) -> Result<usize, TrainError> {
    let mut hits = 0;
    for (i, s) in samples.iter().enumerate() {
        let z = encode_embedded(&params.task_ffn, &s.sentence)?.embedding.z_q;
        let out = generate_graph(params, model, &z, cm, &mut generation_rng(seed, i))
            .map_err(|source| TrainError::Model { index: i, source })?;
        if out.graph == s.graph {
            hits += 1;
        }
    }
    Ok(hits)
}
