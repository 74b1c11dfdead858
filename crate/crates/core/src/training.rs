//! Pre-training and fine-tuning loops: Adam with linear warmup and linear
//! decay, seeded data order, checkpoint cadence and model selection.

use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{AspectSchema, Label, Qrels, Record};
use crate::error::{Error, Result};
use crate::eval::{self, GainMap, MetricSpec, Side};
use crate::neural::checkpoint::OptimizerState;
use crate::neural::{Checkpoint, Float, Graph, Model, ModelConfig, ParamGrads, ParamStore, Tensor};
use crate::objectives::{self, contrastive_loss_node, LossBreakdown, LossContext, PretrainScheme};
use crate::textproc::{build_input, EncoderInput, Role, TemplateMode, Vocabulary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_fraction: f64,
    pub seed: u64,
    pub checkpoint_every_n_epochs: usize,
    /// Template length; defaults to the model's `max_len`.
    pub max_len: Option<usize>,
    /// Global gradient-norm clip.
    pub max_grad_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            epochs: 5,
            batch_size: 32,
            warmup_fraction: 0.1,
            seed: 0,
            checkpoint_every_n_epochs: 2,
            max_len: None,
            max_grad_norm: Some(1.0),
        }
    }
}

impl TrainConfig {
    /// Fine-tuning defaults (smaller step size).
    pub fn finetune_default() -> Self {
        Self {
            learning_rate: 1e-4,
            ..Self::default()
        }
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning rate {} must be finite and >= 0", self.learning_rate)));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.checkpoint_every_n_epochs == 0 {
            return Err(Error::Config("epochs, batch_size and checkpoint cadence must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config(format!("warmup fraction {} outside [0, 1)", self.warmup_fraction)));
        }
        if self.template_len(model) > model.max_len {
            return Err(Error::Config(format!(
                "template length {} exceeds model max_len {}",
                self.template_len(model),
                model.max_len
            )));
        }
        Ok(())
    }

    pub fn template_len(&self, model: &ModelConfig) -> usize {
        self.max_len.unwrap_or(model.max_len)
    }
}

/// Linear warmup from 0 to `base` over `warmup_steps`, then linear decay
/// reaching 0 at the last step (`total_steps - 1`).
pub fn learning_rate_at(step: usize, total_steps: usize, warmup_steps: usize, base: f64) -> f64 {
    if step < warmup_steps {
        return base * step as f64 / warmup_steps as f64;
    }
    let span = total_steps.saturating_sub(1).saturating_sub(warmup_steps);
    if span == 0 {
        return base;
    }
    base * total_steps.saturating_sub(1).saturating_sub(step) as f64 / span as f64
}

pub fn warmup_steps(total_steps: usize, warmup_fraction: f64) -> usize {
    (warmup_fraction * total_steps as f64).floor() as usize
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    state: OptimizerState,
}

impl Adam {
    pub fn new(params: &ParamStore<f32>) -> Self {
        let zeros = |p: &ParamStore<f32>| {
            p.iter()
                .map(|(_, t)| Tensor::zeros(t.rows(), t.cols()))
                .collect::<Vec<_>>()
        };
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            state: OptimizerState {
                step: 0,
                first_moment: zeros(params),
                second_moment: zeros(params),
            },
        }
    }

    pub fn state(&self) -> &OptimizerState {
        &self.state
    }

    pub fn step(&mut self, params: &mut ParamStore<f32>, grads: &ParamGrads<f32>, lr: f64) {
        self.state.step += 1;
        let t = self.state.step as i32;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let step_size = (lr * c2.sqrt() / c1) as f32;
        let eps = (self.eps * c2.sqrt()) as f32;
        for i in 0..params.len() {
            let m = self.state.first_moment[i].data_mut();
            let v = self.state.second_moment[i].data_mut();
            let p = params.tensor_mut(i).data_mut();
            match grads.get(i) {
                Some(g) => {
                    for (((p, m), v), &g) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
                        *m = b1 * *m + (1.0 - b1) * g;
                        *v = b2 * *v + (1.0 - b2) * g * g;
                        *p -= step_size * *m / (v.sqrt() + eps);
                    }
                }
                None => {
                    for ((p, m), v) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()) {
                        *m *= b1;
                        *v *= b2;
                        *p -= step_size * *m / (v.sqrt() + eps);
                    }
                }
            }
        }
    }
}

fn clip_grad_norm(grads: &mut ParamGrads<f32>, max_norm: f64) -> f64 {
    let mut sq = 0.0f64;
    for i in 0..grads.len() {
        if let Some(g) = grads.get(i) {
            sq += g.data().iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>();
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        grads.scale((max_norm / norm) as f32);
    }
    norm
}

/// One optimizer step.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_mlm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_a2c: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_c2a: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_joint: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_cls: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_contrastive: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub seed: u64,
    pub config_hash: String,
    pub entries: Vec<LogEntry>,
    pub wall_clock_secs: f64,
    /// Fine-tuning queries dropped for lack of an Exact item.
    pub skipped_queries: usize,
}

impl TrainingLog {
    /// Mean total loss per epoch (1-based epochs, in order).
    pub fn epoch_means(&self) -> Vec<f64> {
        let mut sums: Vec<(f64, usize)> = Vec::new();
        for e in &self.entries {
            if sums.len() < e.epoch {
                sums.resize(e.epoch, (0.0, 0));
            }
            let slot = &mut sums[e.epoch - 1];
            slot.0 += e.loss;
            slot.1 += 1;
        }
        sums.into_iter()
            .map(|(s, n)| if n == 0 { f64::NAN } else { s / n as f64 })
            .collect()
    }

    pub fn lr_trace(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.lr).collect()
    }

    /// One JSON object per step; run metadata goes to `<path>.meta.json`.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for e in &self.entries {
            let line = serde_json::to_string(e).expect("log entry serializes");
            writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        let meta_path = path.with_extension("meta.json");
        let meta = serde_json::json!({
            "seed": self.seed,
            "config_hash": self.config_hash,
            "wall_clock_secs": self.wall_clock_secs,
            "skipped_queries": self.skipped_queries,
            "steps": self.entries.len(),
        });
        std::fs::write(&meta_path, serde_json::to_string_pretty(&meta).expect("meta serializes") + "\n")
            .map_err(|e| Error::io(&meta_path, e))
    }
}

/// Short SHA-256 of a value's JSON form.
pub fn config_hash<T: Serialize + ?Sized>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("config serializes");
    Sha256::digest(&json)
        .iter()
        .take(6)
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Deterministic 64-bit mix of a few integers.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x243f_6a88_85a3_08d3;
    for &p in parts {
        h ^= p.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(h << 6).wrapping_add(h >> 2);
        h = (h ^ (h >> 31)).wrapping_mul(0x7fb5_d329_728e_a185);
        h = (h ^ (h >> 27)).wrapping_mul(0x81da_def4_bc2d_d44d);
        h ^= h >> 33;
    }
    h
}

const SHUFFLE_STREAM: u64 = 1;
const RECORD_STREAM: u64 = 2;
const PAIR_STREAM: u64 = 3;
const SEQUENCE_STREAM: u64 = 4;

/// A checkpoint emitted at the end of `epoch` (1-based).
#[derive(Debug, Clone)]
pub struct EpochCheckpoint {
    pub epoch: usize,
    pub checkpoint: Checkpoint,
}

#[derive(Debug, Clone)]
pub struct PretrainOutput {
    pub checkpoints: Vec<EpochCheckpoint>,
    pub log: TrainingLog,
}

fn is_checkpoint_epoch(epoch: usize, cfg: &TrainConfig) -> bool {
    epoch % cfg.checkpoint_every_n_epochs == 0 || epoch == cfg.epochs
}

/// Model config with classification heads sized from `schema` when the
/// scheme needs them.
pub fn model_config_for(base: &ModelConfig, scheme: &PretrainScheme, schema: &AspectSchema) -> ModelConfig {
    let mut cfg = base.clone();
    cfg.aspect_classes = if scheme.mode.uses_classification() {
        schema.class_counts().into_iter().map(|c| c.max(1)).collect()
    } else {
        Vec::new()
    };
    cfg
}

/// Pre-trains a freshly initialized model on `records`.
pub fn pretrain(
    records: &[Record],
    vocab: &Vocabulary,
    schema: &AspectSchema,
    model_config: &ModelConfig,
    scheme: &PretrainScheme,
    cfg: &TrainConfig,
) -> Result<PretrainOutput> {
    let mut schema = schema.clone();
    if scheme.mode.uses_classification() && schema.class_counts().iter().all(|&c| c == 0) {
        schema = schema.with_values_from(records);
    }
    let mut mc = model_config_for(model_config, scheme, &schema);
    mc.vocab_size = vocab.len();
    let model = Model::init(mc)?;
    pretrain_model(model, records, vocab, &schema, scheme, cfg)
}

/// Pre-trains an existing model.
pub fn pretrain_model(
    mut model: Model<f32>,
    records: &[Record],
    vocab: &Vocabulary,
    schema: &AspectSchema,
    scheme: &PretrainScheme,
    cfg: &TrainConfig,
) -> Result<PretrainOutput> {
    if records.is_empty() {
        return Err(Error::Config("pre-training corpus is empty".into()));
    }
    scheme.validate()?;
    cfg.validate(model.config())?;
    if model.config().vocab_size != vocab.len() {
        return Err(Error::Config(format!(
            "model vocab_size {} differs from vocabulary size {}",
            model.config().vocab_size,
            vocab.len()
        )));
    }
    let start = Instant::now();
    let ctx = LossContext {
        schema,
        vocab,
        max_len: cfg.template_len(model.config()),
    };
    let steps_per_epoch = records.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let warmup = warmup_steps(total_steps, cfg.warmup_fraction);
    let mut adam = Adam::new(model.params());
    let mut log = TrainingLog {
        seed: cfg.seed,
        config_hash: config_hash(&(scheme, cfg, model.config())),
        ..TrainingLog::default()
    };
    let mut checkpoints = Vec::new();
    let mut step = 0usize;

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..records.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, SHUFFLE_STREAM, epoch as u64])));
        for batch in order.chunks(cfg.batch_size) {
            let results: Vec<(LossBreakdown, ParamGrads<f32>)> = batch
                .par_iter()
                .map(|&ri| {
                    let base = mix_seed(&[cfg.seed, RECORD_STREAM, epoch as u64, ri as u64]);
                    objectives::objective_grads(&model, &records[ri], &ctx, scheme, base, true)
                })
                .collect::<Result<_>>()
                .map_err(|e| match e {
                    Error::NonFinite(op) => Error::Diverged {
                        step,
                        components: format!("non-finite value in {op}"),
                    },
                    other => other,
                })?;

            let mut grads = ParamGrads::for_store(model.params());
            for (_, g) in &results {
                grads.merge(g);
            }
            grads.scale(1.0 / batch.len() as f32);
            let entry = summarize_pretrain_step(step, epoch, &results);
            if !entry.loss.is_finite() || !grads.all_finite() {
                return Err(Error::Diverged {
                    step,
                    components: format!(
                        "mlm={:?} a2c={:?} c2a={:?} joint={:?} cls={:?}",
                        entry.loss_mlm, entry.loss_a2c, entry.loss_c2a, entry.loss_joint, entry.loss_cls
                    ),
                });
            }
            if let Some(max) = cfg.max_grad_norm {
                clip_grad_norm(&mut grads, max);
            }
            let lr = learning_rate_at(step, total_steps, warmup, cfg.learning_rate);
            adam.step(model.params_mut(), &grads, lr);
            log.entries.push(LogEntry { lr, ..entry });
            step += 1;
        }
        if is_checkpoint_epoch(epoch, cfg) {
            checkpoints.push(EpochCheckpoint {
                epoch,
                checkpoint: Checkpoint {
                    model: model.clone(),
                    vocab_fingerprint: vocab.fingerprint().to_string(),
                    optimizer: Some(adam.state().clone()),
                    step: step as u64,
                },
            });
        }
    }
    log.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok(PretrainOutput { checkpoints, log })
}

fn summarize_pretrain_step(step: usize, epoch: usize, results: &[(LossBreakdown, ParamGrads<f32>)]) -> LogEntry {
    let n = results.len() as f64;
    let mean_of = |f: &dyn Fn(&LossBreakdown) -> Option<f64>| {
        let vals: Vec<f64> = results.iter().filter_map(|(b, _)| f(b)).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    };
    LogEntry {
        step,
        epoch,
        lr: 0.0,
        loss: results.iter().map(|(b, _)| b.total).sum::<f64>() / n,
        loss_mlm: mean_of(&|b| b.mlm),
        loss_a2c: mean_of(&|b| b.a2c),
        loss_c2a: mean_of(&|b| b.c2a),
        loss_joint: mean_of(&|b| b.joint),
        loss_cls: mean_of(&|b| b.cls),
        loss_contrastive: None,
    }
}

/// How the one hard negative per training pair is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativePolicy {
    /// A judged non-Exact item for the query, else a random non-Exact item.
    #[default]
    JudgedNonExact,
    /// A random corpus item that is not judged Exact.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneOptions {
    pub negatives: NegativePolicy,
    /// Training pairs drawn per query per epoch.
    pub pairs_per_query: usize,
}

impl Default for FinetuneOptions {
    fn default() -> Self {
        Self {
            negatives: NegativePolicy::JudgedNonExact,
            pairs_per_query: 1,
        }
    }
}

/// Training queries, the item corpus and their judgments.
#[derive(Debug, Clone, Copy)]
pub struct FinetuneData<'a> {
    pub queries: &'a [Record],
    pub items: &'a [Record],
    pub qrels: &'a Qrels,
}

/// `(query, positive item, hard negative item)` as indices into
/// [`FinetuneData`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainingTriple {
    pub query: usize,
    pub positive: usize,
    pub negative: usize,
}

/// Samples one epoch of training triples. Returns the triples and the number
/// of queries skipped for lacking an Exact item.
pub fn sample_triples(
    data: &FinetuneData<'_>,
    opts: &FinetuneOptions,
    rng: &mut impl Rng,
) -> Result<(Vec<TrainingTriple>, usize)> {
    let item_index: HashMap<&str, usize> = data.items.iter().enumerate().map(|(i, r)| (r.id.as_str(), i)).collect();
    let mut triples = Vec::new();
    let mut skipped = 0;
    for (qi, q) in data.queries.iter().enumerate() {
        let judged = data.qrels.judged(&q.id);
        let exact: Vec<usize> = judged
            .into_iter()
            .flatten()
            .filter(|(_, l)| **l == Label::E)
            .filter_map(|(id, _)| item_index.get(id.as_str()).copied())
            .collect();
        if exact.is_empty() {
            skipped += 1;
            continue;
        }
        let exact_set: BTreeSet<usize> = exact.iter().copied().collect();
        let judged_negatives: Vec<usize> = match opts.negatives {
            NegativePolicy::JudgedNonExact => judged
                .into_iter()
                .flatten()
                .filter(|(_, l)| **l != Label::E)
                .filter_map(|(id, _)| item_index.get(id.as_str()).copied())
                .collect(),
            NegativePolicy::Random => Vec::new(),
        };
        if judged_negatives.is_empty() && exact_set.len() >= data.items.len() {
            skipped += 1;
            continue;
        }
        for _ in 0..opts.pairs_per_query.max(1) {
            let positive = *exact.choose(rng).expect("non-empty");
            let negative = match judged_negatives.choose(rng) {
                Some(&n) => n,
                None => loop {
                    let n = rng.random_range(0..data.items.len());
                    if !exact_set.contains(&n) {
                        break n;
                    }
                },
            };
            triples.push(TrainingTriple {
                query: qi,
                positive,
                negative,
            });
        }
    }
    Ok((triples, skipped))
}

/// Contrastive loss and gradients for one batch of triples.
///
/// Every sequence is encoded on its own tape; the loss over the stacked CLS
/// vectors is differentiated on a small head tape and the resulting row
/// gradients are pushed back through each sequence tape.
pub fn contrastive_batch_grads<T: Float>(
    model: &Model<T>,
    query_inputs: &[EncoderInput],
    positive_inputs: &[EncoderInput],
    negative_inputs: &[EncoderInput],
    seed: u64,
    train: bool,
) -> Result<(f64, ParamGrads<T>)> {
    let b = query_inputs.len();
    if b == 0 || positive_inputs.len() != b || negative_inputs.len() != b {
        return Err(Error::Invalid("contrastive batch needs matching non-empty query/positive/negative lists".into()));
    }
    if let Some(bad) = query_inputs.iter().position(|i| i.roles.iter().any(|r| matches!(r, Role::Aspect(_)))) {
        return Err(Error::Invalid(format!("query input {bad} carries aspect tokens")));
    }
    let inputs: Vec<&EncoderInput> = query_inputs.iter().chain(positive_inputs).chain(negative_inputs).collect();
    let params = model.params();
    let tapes: Vec<(Graph<'_, T>, crate::neural::Encoded)> = inputs
        .par_iter()
        .enumerate()
        .map(|(i, input)| {
            let mut g = Graph::new(params);
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, SEQUENCE_STREAM, i as u64]));
            let enc = model.encode(&mut g, input, if train { Some(&mut rng) } else { None })?;
            Ok((g, enc))
        })
        .collect::<Result<_>>()?;
    let dim = model.config().hidden_dim;
    let stack = |range: std::ops::Range<usize>| -> Result<Tensor<T>> {
        let rows: Vec<T> = tapes[range.clone()]
            .iter()
            .flat_map(|(g, enc)| g.value(enc.cls).data().to_vec())
            .collect();
        Tensor::new(range.len(), dim, rows)
    };
    let empty = ParamStore::new();
    let mut head = Graph::new(&empty);
    let q = head.leaf(stack(0..b)?)?;
    let c = head.leaf(stack(b..3 * b)?)?;
    let targets: Vec<usize> = (0..b).collect();
    let loss = contrastive_loss_node(&mut head, q, c, &targets)?;
    let loss_value = head.value(loss).item().to_f64().unwrap_or(f64::NAN);
    let node_grads = head.backward(loss, None, &mut ParamGrads::for_store(&empty))?;
    let dq = node_grads.get(q).cloned().unwrap_or_else(|| Tensor::zeros(b, dim));
    let dc = node_grads.get(c).cloned().unwrap_or_else(|| Tensor::zeros(2 * b, dim));

    let per_seq: Vec<ParamGrads<T>> = tapes
        .par_iter()
        .enumerate()
        .map(|(i, (g, enc))| {
            let row = if i < b { dq.row(i) } else { dc.row(i - b) };
            let mut grads = ParamGrads::for_store(params);
            g.backward(enc.cls, Some(Tensor::row_vector(row.to_vec())), &mut grads)?;
            Ok(grads)
        })
        .collect::<Result<_>>()?;
    let mut grads = ParamGrads::for_store(params);
    for g in &per_seq {
        grads.merge(g);
    }
    Ok((loss_value, grads))
}

/// Fine-tunes `init` as a shared dual encoder with in-batch negatives plus
/// one hard negative per query. Queries always use the blank-aspect
/// template; items use `item_template`.
pub fn finetune(
    data: &FinetuneData<'_>,
    vocab: &Vocabulary,
    schema: &AspectSchema,
    init: &Checkpoint,
    item_template: TemplateMode,
    cfg: &TrainConfig,
    opts: &FinetuneOptions,
) -> Result<(Checkpoint, TrainingLog)> {
    if init.vocab_fingerprint != vocab.fingerprint() {
        return Err(Error::FingerprintMismatch {
            expected: init.vocab_fingerprint.clone(),
            found: vocab.fingerprint().to_string(),
        });
    }
    if data.items.is_empty() {
        return Err(Error::Config("fine-tuning corpus is empty".into()));
    }
    let mut model = init.model.clone();
    cfg.validate(model.config())?;
    let start = Instant::now();
    let max_len = cfg.template_len(model.config());
    let query_inputs: Vec<EncoderInput> = data
        .queries
        .iter()
        .map(|q| build_input(q, schema, vocab, TemplateMode::AspectsEmpty, max_len))
        .collect::<Result<_>>()?;
    let item_inputs: Vec<EncoderInput> = data
        .items
        .iter()
        .map(|r| build_input(r, schema, vocab, item_template, max_len))
        .collect::<Result<_>>()?;

    // The number of triples per epoch is fixed, so the schedule is known up front.
    let (probe, skipped) = sample_triples(data, opts, &mut ChaCha8Rng::seed_from_u64(0))?;
    if probe.is_empty() {
        return Err(Error::Config("no fine-tuning query has an Exact item".into()));
    }
    if skipped > 0 {
        log::warn!("{skipped} fine-tuning queries without an Exact item were skipped");
    }
    let steps_per_epoch = probe.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let warmup = warmup_steps(total_steps, cfg.warmup_fraction);
    let mut adam = Adam::new(model.params());
    let mut log = TrainingLog {
        seed: cfg.seed,
        config_hash: config_hash(&(cfg, opts, item_template, model.config())),
        skipped_queries: skipped,
        ..TrainingLog::default()
    };
    let mut step = 0usize;
    for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, PAIR_STREAM, epoch as u64]));
        let (mut triples, _) = sample_triples(data, opts, &mut rng)?;
        triples.shuffle(&mut rng);
        for batch in triples.chunks(cfg.batch_size) {
            let qs: Vec<EncoderInput> = batch.iter().map(|t| query_inputs[t.query].clone()).collect();
            let ps: Vec<EncoderInput> = batch.iter().map(|t| item_inputs[t.positive].clone()).collect();
            let ns: Vec<EncoderInput> = batch.iter().map(|t| item_inputs[t.negative].clone()).collect();
            let seed = mix_seed(&[cfg.seed, SEQUENCE_STREAM, step as u64]);
            let (loss, mut grads) = contrastive_batch_grads(&model, &qs, &ps, &ns, seed, true).map_err(|e| match e {
                Error::NonFinite(op) => Error::Diverged {
                    step,
                    components: format!("non-finite value in {op}"),
                },
                other => other,
            })?;
            if !loss.is_finite() || !grads.all_finite() {
                return Err(Error::Diverged {
                    step,
                    components: format!("contrastive={loss}"),
                });
            }
            if let Some(max) = cfg.max_grad_norm {
                clip_grad_norm(&mut grads, max);
            }
            let lr = learning_rate_at(step, total_steps, warmup, cfg.learning_rate);
            adam.step(model.params_mut(), &grads, lr);
            log.entries.push(LogEntry {
                step,
                epoch,
                lr,
                loss,
                loss_contrastive: Some(loss),
                ..LogEntry::default()
            });
            step += 1;
        }
    }
    log.wall_clock_secs = start.elapsed().as_secs_f64();
    let ckpt = Checkpoint {
        model,
        vocab_fingerprint: vocab.fingerprint().to_string(),
        optimizer: Some(adam.state().clone()),
        step: step as u64,
    };
    Ok((ckpt, log))
}

/// Index of the highest score; ties go to the earliest entry.
pub fn argmax_first(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        if best.is_none_or(|b| s > scores[b]) {
            best = Some(i);
        }
    }
    best
}

/// Validation data for [`select_best`].
#[derive(Debug, Clone, Copy)]
pub struct Validation<'a> {
    pub queries: &'a [Record],
    pub items: &'a [Record],
    pub qrels: &'a Qrels,
    pub metric: MetricSpec,
    pub gains: GainMap,
}

/// Scores each candidate on the validation queries and returns the index of
/// the best (earliest on ties) together with all scores.
pub fn select_best(
    candidates: &[Checkpoint],
    val: &Validation<'_>,
    vocab: &Vocabulary,
    schema: &AspectSchema,
    item_template: TemplateMode,
) -> Result<(usize, Vec<f64>)> {
    if candidates.is_empty() {
        return Err(Error::Invalid("no checkpoints to select from".into()));
    }
    let scores = candidates
        .iter()
        .map(|ckpt| {
            let q = eval::encode_corpus(ckpt, vocab, schema, val.queries, Side::Query)?;
            let items = eval::encode_corpus(ckpt, vocab, schema, val.items, Side::Item(item_template))?;
            let run = eval::search(&q, &items, val.metric.depth(), "val")?;
            Ok(val.metric.evaluate(&run, val.qrels, &val.gains)?.mean)
        })
        .collect::<Result<Vec<f64>>>()?;
    let best = argmax_first(&scores).expect("non-empty");
    Ok((best, scores))
}
