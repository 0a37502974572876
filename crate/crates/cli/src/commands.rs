use std::path::Path;

use grouptopo::embedding::{
    build_candidate_matrix, encode_embedded, fnv1a64, EmbeddingError, ExternalEncoder, ProviderKind,
};
use grouptopo::graph::{
    encode_graph, encode_pool, materialize_agent_graph, validate_group_graph, write_trajectories, AgentGraph,
    MaterializeMode,
};
use grouptopo::harness::{
    arithmetic_backend, evaluate, run_graph, AgentBackend, AttackSpec, EvalItem, EvalOptions,
    HttpConfig, RunError, RunOptions,
};
use grouptopo::model::{generate_graph_with, GenerateOptions, Generated, Selection};
use grouptopo::nn::checkpoint::Checkpoint;
use grouptopo::pool::{discover_pool, DiscoveryError};
use grouptopo::rng::{seeded, stream};
use grouptopo::train::{
    build_samples, curate_minimal, explore_and_label, reconstruction_count, train, ExplorationConfig,
    HarnessExecutor, LabeledQuery, TrainConfig, TrainError,
};
use grouptopo::{
    CandidateGroup, CandidateMatrix, EmbeddingProvider, GroupGraph, GroupPool, ModelConfig, ModelParams, Trajectory,
};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::files::{
    load_graph, load_pool, load_queries, load_trajectories, read_text, sibling, write_atomic, write_json,
};
use crate::{
    AttackArgs, BackendArgs, BackendKind, CliError, Command, CurateArgs, DiscoverArgs, EncoderArg, GenerateArgs,
    ModeArg, ModelArgs, OptimArgs, RunArgs, SweepArgs, TrainArgs,
};

pub fn dispatch(cmd: Command) -> Result<Value, CliError> {
    match cmd {
        Command::Discover(a) => discover(a),
        Command::Curate(a) => curate(a),
        Command::Train(a) => train_cmd(a),
        Command::Generate(a) => generate(a),
        Command::Run(a) => run(a),
        Command::Attack(a) => attack(a),
        Command::Sweep(a) => sweep(a),
    }
}

fn validation(e: impl std::fmt::Display) -> CliError {
    CliError::Validation(e.to_string())
}

fn embedding_err(e: EmbeddingError) -> CliError {
    match e {
        EmbeddingError::Transport(_) | EmbeddingError::NotConfigured => CliError::Backend(e.to_string()),
        other => validation(other),
    }
}

fn train_err(e: TrainError) -> CliError {
    match e {
        TrainError::Embedding(inner) => embedding_err(inner),
        other => validation(other),
    }
}

fn mode(m: ModeArg) -> MaterializeMode {
    match m {
        ModeArg::Composite => MaterializeMode::Composite,
        ModeArg::Expanded => MaterializeMode::Expanded,
    }
}

fn backend(args: &BackendArgs, attack_text: Option<String>) -> Result<AgentBackend, CliError> {
    match args.backend {
        BackendKind::Scripted => Ok(arithmetic_backend(attack_text)),
        BackendKind::Http => HttpConfig::from_env(args.model.clone())
            .map(AgentBackend::Http)
            .map_err(|e| CliError::Backend(e.to_string())),
    }
}

fn run_err(e: RunError) -> CliError {
    match e {
        RunError::Backend { .. } => CliError::Backend(e.to_string()),
        other => validation(other),
    }
}

fn provider(kind: ProviderKind, d: usize) -> Result<EmbeddingProvider, CliError> {
    match kind {
        ProviderKind::HashFeature => Ok(EmbeddingProvider::hash(d)),
        ProviderKind::ExternalEncoder => ExternalEncoder::from_env(d)
            .map(EmbeddingProvider::External)
            .map_err(embedding_err),
    }
}

fn model_config(m: &ModelArgs, k: usize, beta_g: f64, beta_e: f64, seed: u64) -> Result<ModelConfig, CliError> {
    let cfg = ModelConfig {
        beta_g,
        beta_e,
        seed,
        ..ModelConfig::new(m.d, m.h, k).with_t_max(m.t_max)
    };
    cfg.check().map_err(CliError::Usage)?;
    Ok(cfg)
}

fn encoder_kind(e: EncoderArg) -> ProviderKind {
    match e {
        EncoderArg::Hash => ProviderKind::HashFeature,
        EncoderArg::External => ProviderKind::ExternalEncoder,
    }
}

fn train_config(o: &OptimArgs, beta_g: f64, beta_e: f64, seed: u64) -> Result<TrainConfig, CliError> {
    let cfg = TrainConfig {
        epochs: o.epochs,
        warmup: o.warmup,
        batch: o.batch,
        lr: o.lr,
        weight_decay: o.weight_decay,
        clip: (o.clip > 0.0).then_some(o.clip),
        beta_g,
        beta_e,
        seed,
    };
    cfg.check().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(cfg)
}

fn check_dataset(data: &[Trajectory], pool: &GroupPool, t_max: usize) -> Result<(), CliError> {
    if data.is_empty() {
        return Err(validation("dataset holds no trajectories"));
    }
    for (i, t) in data.iter().enumerate() {
        let report = validate_group_graph(&t.graph, pool);
        if !report.is_ok() {
            return Err(validation(format!("trajectory {}: {report}", i + 1)));
        }
        if t.graph.len() > t_max {
            return Err(validation(format!("trajectory {} has {} groups, above T_max {t_max}", i + 1, t.graph.len())));
        }
    }
    Ok(())
}

/// Everything stored next to the parameters in a checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct Meta {
    model: ModelConfig,
    train: TrainConfig,
    encoder: ProviderKind,
    groups: Vec<CandidateGroup>,
}

type ModelCheckpoint = Checkpoint<ModelParams, Meta>;

struct Loaded {
    model: ModelConfig,
    params: ModelParams,
    pool: GroupPool,
    provider: EmbeddingProvider,
    cm: CandidateMatrix,
}

impl Loaded {
    fn open(path: &Path) -> Result<Self, CliError> {
        let ck = ModelCheckpoint::from_text(&read_text(path)?)
            .map_err(|e| validation(format!("{}: {e}", path.display())))?;
        let pool = GroupPool::new(ck.config.groups).map_err(validation)?;
        let provider = provider(ck.config.encoder, ck.config.model.d)?;
        let cm = build_candidate_matrix(&ck.params, &provider, &pool).map_err(embedding_err)?;
        Ok(Self {
            model: ck.config.model,
            params: ck.params,
            pool,
            provider,
            cm,
        })
    }

    fn generate(&self, query: &str, seed: u64, selection: Selection) -> Result<Generated, CliError> {
        let sentence = self.provider.embed_text(query).map_err(embedding_err)?;
        let z = encode_embedded(&self.params.task_ffn, &sentence).map_err(embedding_err)?.embedding.z_q;
        let opts = GenerateOptions {
            selection,
            ..GenerateOptions::default()
        };
        generate_graph_with(&self.params, &self.model, &z, &self.cm, &mut stream(seed, fnv1a64(query.as_bytes())), opts)
            .map_err(validation)
    }
}

fn discover(a: DiscoverArgs) -> Result<Value, CliError> {
    let (pool, rejected, source) = if let Some(path) = &a.pool {
        (load_pool(Some(path))?, Vec::new(), format!("template {}", path.display()))
    } else if a.response.is_some() || a.backend == BackendKind::Http {
        let backend = match &a.response {
            Some(path) => {
                let text = read_text(path)?;
                AgentBackend::scripted(move |_, _| text.clone())
            }
            None => HttpConfig::from_env(a.model.clone())
                .map(AgentBackend::Http)
                .map_err(|e| CliError::Backend(e.to_string()))?,
        };
        let found = discover_pool(&backend, &a.instruction, a.k).map_err(|e| match e {
            DiscoveryError::Backend(b) => CliError::Backend(b.to_string()),
            DiscoveryError::NoValidGroups(rej) => {
                let reasons: Vec<String> = rej.iter().map(|r| format!("record {}: {}", r.record, r.reason)).collect();
                validation(format!("no valid group proposed; {}", reasons.join("; ")))
            }
            other => validation(other),
        })?;
        (found.pool, found.rejected, "llm".to_string())
    } else {
        (load_pool(None)?, Vec::new(), "bundled".to_string())
    };
    write_atomic(&a.out, &(encode_pool(&pool) + "\n"))?;
    Ok(json!({
        "command": "discover",
        "seed": a.seed,
        "source": source,
        "out": a.out,
        "groups": pool.len(),
        "rejected": rejected.iter().map(|r| json!({"record": r.record, "reason": r.reason})).collect::<Vec<_>>(),
    }))
}

fn curate(a: CurateArgs) -> Result<Value, CliError> {
    let pool = load_pool(a.pool.as_deref())?;
    let lines = load_queries(&a.dataset)?;
    let be = backend(&a.backend, None)?;
    let queries: Vec<LabeledQuery> = lines
        .iter()
        .map(|l| LabeledQuery {
            query: l.query.clone(),
            gold: l.gold.clone(),
            rule: l.rule.clone(),
        })
        .collect();
    let exec = HarnessExecutor {
        pool: &pool,
        backend: &be,
        rounds: a.backend.rounds,
        mode: mode(a.backend.mode),
    };
    let mut results: Vec<Trajectory> = Vec::new();
    let mut errors = Vec::new();
    let mut pending = queries.clone();
    for pass in 0..=a.resample {
        let cfg = ExplorationConfig {
            min_groups: a.min_groups,
            max_groups: a.max_groups,
            samples_per_query: a.samples,
            t_max: a.t_max,
            seed: grouptopo::rng::stream_id(a.seed, pass as u64),
            ..ExplorationConfig::default()
        };
        cfg.check().map_err(|e| CliError::Usage(e.to_string()))?;
        let records = explore_and_label(&pending, &pool, &exec, &cfg).map_err(train_err)?;
        for r in &records {
            if let Some(e) = &r.error {
                errors.push(json!({"pass": pass, "query": r.query, "sample": r.sample, "error": e}));
            }
        }
        results.extend(records.iter().map(|r| r.trajectory()));
        let excluded = curate_minimal(&results).excluded;
        pending.retain(|q| excluded.contains(&q.query));
        if pending.is_empty() {
            break;
        }
    }
    if !errors.is_empty() && results.iter().all(|r| !r.success) && a.backend.backend == BackendKind::Http {
        return Err(CliError::Backend(format!("every exploration run failed: {}", errors[0]["error"])));
    }
    let cur = curate_minimal(&results);
    write_atomic(&a.out, &write_trajectories(&cur.dataset))?;
    let report_path = a.report.unwrap_or_else(|| sibling(&a.out, ".report.json"));
    let report = json!({
        "seed": a.seed,
        "explored": results.len(),
        "kept": cur.dataset.len(),
        "excluded": cur.excluded,
        "errors": errors,
    });
    write_json(&report_path, &report)?;
    Ok(json!({
        "command": "curate",
        "seed": a.seed,
        "out": a.out,
        "report": report_path,
        "kept": cur.dataset.len(),
        "excluded": cur.excluded.len(),
    }))
}

struct Trained {
    params: ModelParams,
    cm: CandidateMatrix,
    outcome: grouptopo::train::TrainOutcome,
}

fn fit(
    model: &ModelConfig,
    cfg: &TrainConfig,
    provider: &EmbeddingProvider,
    pool: &GroupPool,
    samples: &[grouptopo::train::Sample],
) -> Result<Trained, CliError> {
    let mut params = ModelParams::init(model, &mut seeded(cfg.seed));
    let mut cm = build_candidate_matrix(&params, provider, pool).map_err(embedding_err)?;
    let outcome = train(&mut params, model, samples, &mut cm, cfg).map_err(train_err)?;
    Ok(Trained { params, cm, outcome })
}

fn train_cmd(a: TrainArgs) -> Result<Value, CliError> {
    let pool = load_pool(a.pool.as_deref())?;
    let data = load_trajectories(&a.dataset)?;
    let model = model_config(&a.model, pool.len(), a.beta_g, a.beta_e, a.seed)?;
    let cfg = train_config(&a.optim, a.beta_g, a.beta_e, a.seed)?;
    check_dataset(&data, &pool, model.t_max)?;
    let kind = encoder_kind(a.model.encoder);
    let provider = provider(kind, model.d)?;
    let samples = build_samples(&provider, &data).map_err(train_err)?;
    let t = fit(&model, &cfg, &provider, &pool, &samples)?;
    let hits = reconstruction_count(&t.params, &model, &samples, &t.cm, a.seed).map_err(train_err)?;

    let meta = Meta {
        model,
        train: cfg,
        encoder: kind,
        groups: pool.groups().to_vec(),
    };
    let ck = ModelCheckpoint::new(meta, t.params, Some(t.outcome.optimizer));
    let text = ck.to_text().map_err(validation)?;
    write_atomic(&a.checkpoint, &text)?;
    let log_path = a.log.unwrap_or_else(|| sibling(&a.checkpoint, ".log.jsonl"));
    let mut log = String::new();
    for e in &t.outcome.log {
        log.push_str(&serde_json::to_string(e).expect("log serializes"));
        log.push('\n');
    }
    write_atomic(&log_path, &log)?;
    let last = t.outcome.log.last().map(|e| e.total);
    Ok(json!({
        "command": "train",
        "seed": a.seed,
        "checkpoint": a.checkpoint,
        "log": log_path,
        "epochs": t.outcome.log.len(),
        "final_loss": last,
        "reconstructed": hits,
        "samples": samples.len(),
    }))
}

fn generate(a: GenerateArgs) -> Result<Value, CliError> {
    let loaded = Loaded::open(&a.checkpoint)?;
    let selection = match a.temperature {
        None => Selection::Argmax,
        Some(t) if t > 0.0 && t.is_finite() => Selection::Temperature(t),
        Some(t) => return Err(CliError::Usage(format!("temperature must be positive, got {t}"))),
    };
    let out = loaded.generate(&a.query, a.seed, selection)?;
    let record = encode_graph(&out.graph);
    if let Some(path) = &a.out {
        write_atomic(path, &(record.clone() + "\n"))?;
    }
    if let Some(path) = &a.dot {
        let ag = materialize_agent_graph(&out.graph, &loaded.pool, mode(a.mode)).map_err(validation)?;
        write_atomic(path, &ag.to_dot())?;
    }
    let names: Vec<&str> = out
        .graph
        .selected
        .iter()
        .filter_map(|&g| loaded.pool.get(g).map(|c| c.name.as_str()))
        .collect();
    Ok(json!({
        "command": "generate",
        "seed": a.seed,
        "query": a.query,
        "graph": serde_json::from_str::<Value>(&record).expect("record is json"),
        "groups": names,
        "truncated": out.truncated,
    }))
}

/// Graph and pool for `run`/`attack`: either a fixed record or a generator.
enum Source {
    Fixed(GroupGraph, GroupPool),
    Model(Box<Loaded>),
}

impl Source {
    fn open(graph: Option<&Path>, checkpoint: Option<&Path>, pool: Option<&Path>) -> Result<Self, CliError> {
        match (graph, checkpoint) {
            (Some(g), _) => {
                let pool = load_pool(pool)?;
                let graph = load_graph(g)?;
                let report = validate_group_graph(&graph, &pool);
                if !report.is_ok() {
                    return Err(validation(format!("{}: {report}", g.display())));
                }
                Ok(Source::Fixed(graph, pool))
            }
            (None, Some(c)) => Ok(Source::Model(Box::new(Loaded::open(c)?))),
            (None, None) => Err(CliError::Usage("either --graph or --checkpoint is required".into())),
        }
    }

    fn agent_graph(&self, query: &str, seed: u64, m: MaterializeMode) -> Result<(GroupGraph, AgentGraph), CliError> {
        let (graph, pool) = match self {
            Source::Fixed(g, p) => (g.clone(), p),
            Source::Model(l) => (l.generate(query, seed, Selection::Argmax)?.graph, &l.pool),
        };
        let ag = materialize_agent_graph(&graph, pool, m).map_err(validation)?;
        Ok((graph, ag))
    }
}

fn run(a: RunArgs) -> Result<Value, CliError> {
    let src = Source::open(a.graph.as_deref(), a.checkpoint.as_deref(), a.pool.as_deref())?;
    let be = backend(&a.backend, None)?;
    let (graph, ag) = src.agent_graph(&a.query, a.seed, mode(a.backend.mode))?;
    let opts = RunOptions {
        summarizer_sees_all: a.summarizer_sees_all,
    };
    let out = run_graph(&ag, &be, &a.query, a.backend.rounds, None, opts).map_err(run_err)?;
    let record = json!({
        "seed": a.seed,
        "query": a.query,
        "rounds": a.backend.rounds,
        "graph": serde_json::from_str::<Value>(&encode_graph(&graph)).expect("record is json"),
        "transcript": out.transcript,
        "stats": out.stats,
    });
    write_json(&a.out, &record)?;
    Ok(json!({
        "command": "run",
        "seed": a.seed,
        "out": a.out,
        "calls": out.transcript.records.len(),
        "final_answer": out.transcript.final_answer,
        "total_tokens": out.stats.total(),
    }))
}

fn attack(a: AttackArgs) -> Result<Value, CliError> {
    let src = Source::open(a.graph.as_deref(), a.checkpoint.as_deref(), a.pool.as_deref())?;
    let items: Vec<EvalItem> = load_queries(&a.dataset)?
        .into_iter()
        .map(|l| EvalItem {
            query: l.query,
            gold: l.gold,
            rule: l.rule,
        })
        .collect();
    let be = backend(&a.backend, Some(a.attack_text.clone()))?;
    let m = mode(a.backend.mode);
    let generator = |q: &str| src.agent_graph(q, a.seed, m).map(|(_, ag)| ag).map_err(|e| e.to_string());
    let spec = AttackSpec {
        target: a.target,
        text: a.attack_text.clone(),
    };
    let opts = EvalOptions::default();
    let clean = evaluate(&items, &generator, &be, a.backend.rounds, None, &opts);
    let attacked = evaluate(&items, &generator, &be, a.backend.rounds, Some(&spec), &opts);
    let backend_failures = clean
        .items
        .iter()
        .chain(&attacked.items)
        .filter(|r| r.error.as_deref().is_some_and(|e| e.contains("backend failed")))
        .count();
    if backend_failures == 2 * items.len() {
        return Err(CliError::Backend(format!(
            "backend failed on every item: {}",
            clean.items[0].error.clone().unwrap_or_default()
        )));
    }
    let report = json!({
        "seed": a.seed,
        "rounds": a.backend.rounds,
        "target": a.target,
        "attack_text": a.attack_text,
        "clean": clean,
        "attacked": attacked,
    });
    write_json(&a.out, &report)?;
    Ok(json!({
        "command": "attack",
        "seed": a.seed,
        "out": a.out,
        "clean_accuracy": clean.accuracy,
        "attacked_accuracy": attacked.accuracy,
    }))
}

fn sweep(a: SweepArgs) -> Result<Value, CliError> {
    if a.beta_g.is_empty() || a.beta_e.is_empty() {
        return Err(CliError::Usage("--beta-g and --beta-e need at least one value".into()));
    }
    let pool = load_pool(a.pool.as_deref())?;
    let data = load_trajectories(&a.dataset)?;
    let kind = encoder_kind(a.model.encoder);
    let probe = model_config(&a.model, pool.len(), 0.0, 0.0, a.seed)?;
    check_dataset(&data, &pool, probe.t_max)?;
    let provider = provider(kind, probe.d)?;
    let samples = build_samples(&provider, &data).map_err(train_err)?;
    let be = arithmetic_backend(None);
    let mut cells = Vec::new();
    for &bg in &a.beta_g {
        for &bet in &a.beta_e {
            let model = model_config(&a.model, pool.len(), bg, bet, a.seed)?;
            let cfg = train_config(&a.optim, bg, bet, a.seed)?;
            let t = fit(&model, &cfg, &provider, &pool, &samples)?;
            let hits = reconstruction_count(&t.params, &model, &samples, &t.cm, a.seed).map_err(train_err)?;
            let mut tokens = 0u64;
            let mut runs = 0usize;
            for s in &samples {
                let z = encode_embedded(&t.params.task_ffn, &s.sentence).map_err(embedding_err)?.embedding.z_q;
                let g = generate_graph_with(
                    &t.params,
                    &model,
                    &z,
                    &t.cm,
                    &mut stream(a.seed, fnv1a64(s.query.as_bytes())),
                    GenerateOptions::default(),
                )
                .map_err(validation)?
                .graph;
                if let Ok(ag) = materialize_agent_graph(&g, &pool, mode(a.mode)) {
                    let out = run_graph(&ag, &be, &s.query, a.rounds, None, RunOptions::default()).map_err(run_err)?;
                    tokens += out.stats.total();
                    runs += 1;
                }
            }
            cells.push(json!({
                "beta_g": bg,
                "beta_e": bet,
                "reconstruction_rate": hits as f64 / samples.len() as f64,
                "mean_tokens": if runs == 0 { Value::Null } else { json!(tokens as f64 / runs as f64) },
                "final_loss": t.outcome.log.last().map(|e| e.total),
            }));
        }
    }
    let report = json!({ "seed": a.seed, "samples": samples.len(), "cells": cells });
    write_json(&a.out, &report)?;
    Ok(json!({
        "command": "sweep",
        "seed": a.seed,
        "out": a.out,
        "cells": cells.len(),
    }))
}
