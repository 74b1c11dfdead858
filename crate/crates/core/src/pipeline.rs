//! Experiment orchestration: data preparation, per-method pre-training,
//! fine-tuning with checkpoint selection, test evaluation and comparison
//! tables, with a resumable on-disk layout.
//!
//! Working-directory layout:
//!
//! ```text
//! <workdir>/
//!   data/       items.jsonl queries.jsonl qrels.tsv splits.json
//!   vocab/      vocab.json
//!   runs/<method>/seed<s>/
//!               pretrain/ckpt-epoch<e>/   pretrain_log.jsonl
//!               finetune/                 (selected checkpoint)
//!               test.trec metrics.json result.json
//!   reports/    comparison.txt comparison.csv results.json
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{self, AspectSchema, GenConfig, Qrels, Record, RecordKind, SplitSpec};
use crate::error::{Error, Result};
use crate::eval::{self, GainMap, MetricSpec, MetricsReport, RunFile, Side, TTest};
use crate::neural::checkpoint::MANIFEST_FILE;
use crate::neural::{load_checkpoint, save_checkpoint, Checkpoint, Model, ModelConfig};
use crate::objectives::{Component, PretrainMode, PretrainScheme};
use crate::textproc::{build_vocab, Vocabulary};
use crate::training::{
    self, config_hash, FinetuneData, FinetuneOptions, TrainConfig, TrainingLog, Validation,
};

/// Where records and judgments come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataConfig {
    Synthetic {
        #[serde(default)]
        generator: GenConfig,
        #[serde(default)]
        seed: u64,
    },
    Files {
        items: PathBuf,
        queries: PathBuf,
        qrels: PathBuf,
        aspects: Vec<String>,
        /// Existing split; generated from `split_fractions` when absent.
        #[serde(default)]
        splits: Option<PathBuf>,
        #[serde(default = "default_fractions")]
        split_fractions: [f64; 3],
        #[serde(default)]
        split_seed: u64,
    },
}

fn default_fractions() -> [f64; 3] {
    [0.8, 0.1, 0.1]
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::Synthetic {
            generator: GenConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VocabConfig {
    pub min_freq: usize,
    pub max_size: usize,
}

impl Default for VocabConfig {
    fn default() -> Self {
        Self {
            min_freq: 1,
            max_size: 30_000,
        }
    }
}

/// A named pre-training scheme. `pretrain = false` fine-tunes from random
/// initialization instead.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodConfig {
    pub name: String,
    #[serde(default = "yes")]
    pub pretrain: bool,
    #[serde(flatten)]
    pub scheme: PretrainScheme,
}

fn yes() -> bool {
    true
}

impl MethodConfig {
    pub fn new(name: impl Into<String>, scheme: PretrainScheme) -> Self {
        Self {
            name: name.into(),
            pretrain: true,
            scheme,
        }
    }

    pub fn for_mode(mode: PretrainMode) -> Self {
        Self::new(mode.as_str(), PretrainScheme::for_mode(mode))
    }

    /// The full mutual-prediction objective without `component`.
    pub fn ablation(component: Component) -> Self {
        let mut scheme = PretrainScheme::for_mode(PretrainMode::Attempt);
        scheme.disabled.push(component);
        let tag = match component {
            Component::Mlm => "mlm",
            Component::A2c => "a2c",
            Component::C2a => "c2a",
            Component::Joint => "joint",
            Component::AspectClassification => "cls",
        };
        Self::new(format!("ATTEMPT-{tag}"), scheme)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub metrics: Vec<MetricSpec>,
    /// Validation metric used to pick among fine-tuned checkpoints.
    pub selection_metric: MetricSpec,
    /// Ranking depth written to run files.
    pub depth: usize,
    pub gains: GainMap,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            metrics: vec![MetricSpec::Recall(10), MetricSpec::Recall(100), MetricSpec::Ndcg(10)],
            selection_metric: MetricSpec::Recall(10),
            depth: 100,
            gains: GainMap::esci(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub name: String,
    /// Default working directory (the CLI's `--workdir` and `AMR_WORKDIR`
    /// take precedence).
    pub workdir: Option<PathBuf>,
    pub seeds: Vec<u64>,
    pub data: DataConfig,
    pub vocab: VocabConfig,
    pub model: ModelConfig,
    /// Also pre-train on the training queries (with the query mask ratio).
    pub pretrain_on_queries: bool,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub finetune_options: FinetuneOptions,
    pub eval: EvalConfig,
    pub methods: Vec<MethodConfig>,
    /// Method the comparison table tests against; the first method when unset.
    pub baseline: Option<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            workdir: None,
            seeds: vec![0],
            data: DataConfig::default(),
            vocab: VocabConfig::default(),
            model: ModelConfig::default(),
            pretrain_on_queries: true,
            pretrain: TrainConfig::default(),
            finetune: TrainConfig::finetune_default(),
            finetune_options: FinetuneOptions::default(),
            eval: EvalConfig::default(),
            methods: vec![
                MethodConfig::for_mode(PretrainMode::Attempt),
                MethodConfig::for_mode(PretrainMode::Bibert),
            ],
            baseline: None,
        }
    }
}

impl ExperimentConfig {
    /// Reads a TOML (or, by extension, JSON) config. Relative data paths are
    /// resolved against the config file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: Self = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        } else {
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        };
        if let Some(base) = path.parent() {
            cfg.resolve_paths(base);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        if let Some(w) = &mut self.workdir {
            if w.is_relative() {
                *w = base.join(&*w);
            }
        }
        if let DataConfig::Files {
            items,
            queries,
            qrels,
            splits,
            ..
        } = &mut self.data
        {
            for p in [items, queries, qrels].into_iter().chain(splits.as_mut()) {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("at least one method is required".into()));
        }
        let mut names = std::collections::BTreeSet::new();
        for m in &self.methods {
            if m.name.is_empty() || m.name.contains(['/', '\\', ' ']) {
                return Err(Error::Config(format!("method name `{}` must be a non-empty path-safe word", m.name)));
            }
            if !names.insert(m.name.as_str()) {
                return Err(Error::Config(format!("duplicate method name `{}`", m.name)));
            }
            m.scheme.validate()?;
        }
        if let Some(b) = &self.baseline {
            if !names.contains(b.as_str()) {
                return Err(Error::Config(format!("baseline `{b}` is not one of the methods")));
            }
        }
        if self.eval.metrics.is_empty() {
            return Err(Error::Config("at least one metric is required".into()));
        }
        let deepest = self
            .eval
            .metrics
            .iter()
            .chain([&self.eval.selection_metric])
            .map(MetricSpec::depth)
            .max()
            .unwrap_or(0);
        if self.eval.depth < deepest {
            return Err(Error::Config(format!(
                "run depth {} is shallower than metric depth {deepest}",
                self.eval.depth
            )));
        }
        self.eval.gains.validate()?;
        self.pretrain.validate(&self.model)?;
        self.finetune.validate(&self.model)?;
        Ok(())
    }

    /// Hash of everything that affects results (the working directory does
    /// not).
    pub fn hash(&self) -> String {
        config_hash(&Self {
            workdir: None,
            ..self.clone()
        })
    }

    /// As [`hash`](Self::hash) but also ignoring the seed list, which only
    /// selects which runs to produce. A working directory is bound to one
    /// identity.
    pub fn identity_hash(&self) -> String {
        config_hash(&Self {
            workdir: None,
            seeds: Vec::new(),
            ..self.clone()
        })
    }

    pub fn baseline_name(&self) -> &str {
        self.baseline.as_deref().unwrap_or(&self.methods[0].name)
    }

    pub fn method(&self, name: &str) -> Option<&MethodConfig> {
        self.methods.iter().find(|m| m.name == name)
    }
}

/// Loaded records split by query.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub schema: AspectSchema,
    pub items: Vec<Record>,
    pub queries: Vec<Record>,
    pub qrels: Qrels,
    pub split: SplitSpec,
}

impl PreparedData {
    fn queries_in(&self, ids: &std::collections::BTreeSet<String>) -> Vec<Record> {
        self.queries.iter().filter(|q| ids.contains(&q.id)).cloned().collect()
    }

    pub fn train_queries(&self) -> Vec<Record> {
        self.queries_in(&self.split.train_set())
    }

    pub fn val_queries(&self) -> Vec<Record> {
        self.queries_in(&self.split.val_set())
    }

    pub fn test_queries(&self) -> Vec<Record> {
        self.queries_in(&self.split.test_set())
    }

    /// Items plus (optionally) training queries.
    pub fn pretrain_corpus(&self, with_queries: bool) -> Vec<Record> {
        let mut corpus = self.items.clone();
        if with_queries {
            corpus.extend(self.train_queries());
        }
        corpus
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        corpus::write_records(&dir.join("items.jsonl"), &self.items)?;
        corpus::write_records(&dir.join("queries.jsonl"), &self.queries)?;
        corpus::write_qrels(&dir.join("qrels.tsv"), &self.qrels)?;
        self.split.save(&dir.join("splits.json"))
    }
}

pub fn prepare_data(cfg: &DataConfig) -> Result<PreparedData> {
    match cfg {
        DataConfig::Synthetic { generator, seed } => {
            let d = corpus::generate_synthetic(generator, *seed)?;
            Ok(PreparedData {
                schema: d.schema,
                items: d.items,
                queries: d.queries,
                qrels: d.qrels,
                split: d.split,
            })
        }
        DataConfig::Files {
            items,
            queries,
            qrels,
            aspects,
            splits,
            split_fractions,
            split_seed,
        } => {
            let schema = AspectSchema::new(aspects.iter().cloned())?;
            let items = corpus::load_records(items, RecordKind::Item, &schema)?;
            let queries = corpus::load_records(queries, RecordKind::Query, &schema)?;
            let qrels = corpus::load_qrels(qrels)?;
            let ids: Vec<String> = queries.iter().map(|q| q.id.clone()).collect();
            let split = match splits {
                Some(p) => SplitSpec::load(p)?,
                None => corpus::split_by_query(&ids, *split_fractions, *split_seed)?,
            };
            Ok(PreparedData {
                schema,
                items,
                queries,
                qrels,
                split,
            })
        }
    }
}

/// Vocabulary over items and training queries.
pub fn prepare_vocab(data: &PreparedData, cfg: &VocabConfig) -> Result<Vocabulary> {
    build_vocab(&data.pretrain_corpus(true), data.schema.k(), cfg.min_freq, cfg.max_size)
}

/// Outcome of one method under one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub method: String,
    pub seed: u64,
    pub config_hash: String,
    /// Pre-training epoch of the selected checkpoint (0 without pre-training).
    pub selected_epoch: usize,
    /// `(pre-training epoch, validation score)` for every candidate.
    pub validation: Vec<(usize, f64)>,
    pub test: MetricsReport,
}

/// Per-run artifacts kept in memory.
#[derive(Debug, Clone)]
pub struct MethodRun {
    pub result: MethodResult,
    pub run: RunFile,
    /// `None` when pre-training was skipped or reused from disk.
    pub pretrain_log: Option<TrainingLog>,
    pub finetune_logs: Vec<TrainingLog>,
    pub model: Checkpoint,
}

/// Shared inputs for the per-method runs of one experiment.
#[derive(Debug, Clone, Copy)]
pub struct RunContext<'a> {
    pub cfg: &'a ExperimentConfig,
    pub data: &'a PreparedData,
    pub vocab: &'a Vocabulary,
}

/// Configuration hashes of the three stages of one `(method, seed)` run.
/// Each covers everything its stage's outputs depend on.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageHashes {
    pub pretrain: String,
    pub finetune: String,
    pub run: String,
}

impl StageHashes {
    pub fn new(cfg: &ExperimentConfig, method: &MethodConfig, seed: u64) -> Self {
        let pretrain = config_hash(&(
            &cfg.data,
            &cfg.vocab,
            &cfg.model,
            cfg.pretrain_on_queries,
            &cfg.pretrain,
            method,
            seed,
        ));
        let finetune = config_hash(&(&pretrain, &cfg.finetune, &cfg.finetune_options));
        let run = config_hash(&(&finetune, &cfg.eval));
        Self { pretrain, finetune, run }
    }
}

/// Working directory for experiments. Artifact names embed the method, the
/// stage's configuration hash and the seed, so runs of different
/// configurations never overwrite or mix with each other.
#[derive(Debug, Clone)]
pub struct Workdir {
    root: PathBuf,
}

impl Workdir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn vocab_path(&self) -> PathBuf {
        self.root.join("vocab").join("vocab.json")
    }

    pub fn config_path(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn pretrain_dir(&self, method: &str, hash: &str, seed: u64) -> PathBuf {
        self.root.join("pretrain").join(format!("{method}-{hash}-seed{seed}"))
    }

    pub fn finetune_dir(&self, method: &str, hash: &str, seed: u64) -> PathBuf {
        self.root.join("finetune").join(format!("{method}-{hash}-seed{seed}"))
    }

    /// Stem of the run file, metrics and result for one run.
    pub fn run_stem(&self, method: &str, hash: &str, seed: u64) -> PathBuf {
        self.root.join("runs").join(format!("{method}-{hash}-seed{seed}"))
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.root.join("reports")
    }

    /// Takes the working-directory lock; fails if another run holds it.
    pub fn lock(&self) -> Result<WorkdirLock> {
        fs::create_dir_all(&self.root).map_err(|e| Error::io(&self.root, e))?;
        let path = self.root.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                use std::io::Write;
                let _ = writeln!(f, "{}", std::process::id());
                Ok(WorkdirLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Invalid(format!(
                "working directory {} is locked by another run (remove {} if stale)",
                self.root.display(),
                path.display()
            ))),
            Err(e) => Err(Error::io(&path, e)),
        }
    }

    /// Records `hash` as the directory's experiment config, refusing to
    /// resume a directory created under a different one.
    pub fn claim(&self, hash: &str) -> Result<()> {
        let path = self.root.join("config_hash");
        match fs::read_to_string(&path) {
            Ok(prev) if prev.trim() == hash => Ok(()),
            Ok(prev) => Err(Error::Config(format!(
                "working directory {} belongs to config {}, not {hash}; use a fresh directory",
                self.root.display(),
                prev.trim()
            ))),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                fs::create_dir_all(&self.root).map_err(|e| Error::io(&self.root, e))?;
                fs::write(&path, format!("{hash}\n")).map_err(|e| Error::io(&path, e))
            }
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

/// Removes the lock file when dropped.
#[derive(Debug)]
pub struct WorkdirLock {
    path: PathBuf,
}

impl Drop for WorkdirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn method_model_config(ctx: &RunContext<'_>, seed: u64) -> ModelConfig {
    let mut mc = ctx.cfg.model.clone();
    mc.vocab_size = ctx.vocab.len();
    mc.seed = training::mix_seed(&[ctx.cfg.model.seed, seed]);
    mc
}

fn checkpoint_epochs(cfg: &TrainConfig) -> Vec<usize> {
    (1..=cfg.epochs)
        .filter(|e| e % cfg.checkpoint_every_n_epochs == 0 || *e == cfg.epochs)
        .collect()
}

/// Loads the full set of pre-training checkpoints from `dir`, or `None` if
/// any is missing.
pub fn load_pretrained(cfg: &ExperimentConfig, vocab: &Vocabulary, dir: &Path) -> Result<Option<Vec<(usize, Checkpoint)>>> {
    let epochs = checkpoint_epochs(&cfg.pretrain);
    let paths: Vec<PathBuf> = epochs.iter().map(|e| dir.join(format!("ckpt-epoch{e}"))).collect();
    if !paths.iter().all(|p| p.join(MANIFEST_FILE).exists()) {
        return Ok(None);
    }
    epochs
        .iter()
        .zip(&paths)
        .map(|(e, p)| Ok((*e, load_checkpoint(p, vocab)?)))
        .collect::<Result<_>>()
        .map(Some)
}

/// Pre-training stage: the checkpoints fine-tuning starts from, as
/// `(epoch, checkpoint)`. Reuses checkpoints already on disk.
pub fn pretrain_stage(
    ctx: &RunContext<'_>,
    method: &MethodConfig,
    seed: u64,
    dir: Option<&Path>,
) -> Result<(Vec<(usize, Checkpoint)>, Option<TrainingLog>)> {
    let RunContext { cfg, data, vocab } = *ctx;
    let model_cfg = method_model_config(ctx, seed);
    if !method.pretrain {
        let mut mc = model_cfg;
        mc.aspect_classes.clear();
        let ckpt = Checkpoint {
            model: Model::init(mc)?,
            vocab_fingerprint: vocab.fingerprint().to_string(),
            optimizer: None,
            step: 0,
        };
        return Ok((vec![(0, ckpt)], None));
    }
    let mut pretrain_cfg = cfg.pretrain.clone();
    pretrain_cfg.seed = seed;
    if let Some(dir) = dir {
        if let Some(ckpts) = load_pretrained(cfg, vocab, dir)? {
            log::info!("{} seed {seed}: reusing pre-training checkpoints in {}", method.name, dir.display());
            return Ok((ckpts, None));
        }
    }
    log::info!("{} seed {seed}: pre-training", method.name);
    let corpus = data.pretrain_corpus(cfg.pretrain_on_queries);
    let out = training::pretrain(&corpus, vocab, &data.schema, &model_cfg, &method.scheme, &pretrain_cfg)?;
    if let Some(dir) = dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        out.log.write_jsonl(&dir.join("pretrain_log.jsonl"))?;
        for c in &out.checkpoints {
            save_checkpoint(&c.checkpoint, &dir.join(format!("ckpt-epoch{}", c.epoch)))?;
        }
    }
    let ckpts = out.checkpoints.into_iter().map(|c| (c.epoch, c.checkpoint)).collect();
    Ok((ckpts, Some(out.log)))
}

/// Fine-tunes one pre-training checkpoint, reusing a stored result.
pub fn finetune_stage(
    ctx: &RunContext<'_>,
    method: &MethodConfig,
    seed: u64,
    init: &Checkpoint,
    dir: Option<&Path>,
) -> Result<(Checkpoint, Option<TrainingLog>)> {
    let RunContext { cfg, data, vocab } = *ctx;
    if let Some(dir) = dir {
        if dir.join(MANIFEST_FILE).exists() {
            return Ok((load_checkpoint(dir, vocab)?, None));
        }
    }
    let train_q = data.train_queries();
    let ft_data = FinetuneData {
        queries: &train_q,
        items: &data.items,
        qrels: &data.qrels,
    };
    let mut ft_cfg = cfg.finetune.clone();
    ft_cfg.seed = seed;
    let (tuned, log) = training::finetune(
        &ft_data,
        vocab,
        &data.schema,
        init,
        method.scheme.item_template(),
        &ft_cfg,
        &cfg.finetune_options,
    )?;
    if let Some(dir) = dir {
        // The log goes first: a directory with a manifest is complete.
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        log.write_jsonl(&dir.join("finetune_log.jsonl"))?;
        save_checkpoint(&tuned, dir)?;
    }
    Ok((tuned, Some(log)))
}

/// Encodes the test queries and all items, searches and evaluates.
pub fn test_stage(
    ctx: &RunContext<'_>,
    model: &Checkpoint,
    item_template: crate::textproc::TemplateMode,
    tag: &str,
) -> Result<(RunFile, MetricsReport)> {
    let RunContext { cfg, data, vocab } = *ctx;
    let q = eval::encode_corpus(model, vocab, &data.schema, &data.test_queries(), Side::Query)?;
    let items = eval::encode_corpus(model, vocab, &data.schema, &data.items, Side::Item(item_template))?;
    let run = eval::search(&q, &items, cfg.eval.depth, tag)?;
    let report = eval::evaluate_run(&run, &data.qrels, &cfg.eval.metrics, &cfg.eval.gains)?;
    Ok((run, report))
}

/// Fine-tuned model picked on the validation split.
#[derive(Debug, Clone)]
pub struct Selection {
    pub selected_epoch: usize,
    /// `(pre-training epoch, validation score)` per candidate.
    pub validation: Vec<(usize, f64)>,
    pub model: Checkpoint,
    pub finetune_logs: Vec<TrainingLog>,
}

/// Fine-tunes every pre-training checkpoint and keeps the one with the best
/// validation score (earliest on ties).
pub fn finetune_and_select(
    ctx: &RunContext<'_>,
    method: &MethodConfig,
    seed: u64,
    candidates: &[(usize, Checkpoint)],
    finetune_dir: Option<&Path>,
) -> Result<Selection> {
    let RunContext { cfg, data, vocab } = *ctx;
    let val_q = data.val_queries();
    if val_q.is_empty() {
        return Err(Error::Config("validation split is empty".into()));
    }
    let item_template = method.scheme.item_template();
    let val = Validation {
        queries: &val_q,
        items: &data.items,
        qrels: &data.qrels,
        metric: cfg.eval.selection_metric,
        gains: cfg.eval.gains,
    };
    let mut best: Option<(usize, f64, Checkpoint)> = None;
    let mut validation = Vec::new();
    let mut finetune_logs = Vec::new();
    for (epoch, init) in candidates {
        log::info!("{} seed {seed}: fine-tuning from pre-training epoch {epoch}", method.name);
        let dir = finetune_dir.map(|d| d.join(format!("from-epoch{epoch}")));
        let (tuned, ft_log) = finetune_stage(ctx, method, seed, init, dir.as_deref())?;
        finetune_logs.extend(ft_log);
        let (_, scores) = training::select_best(std::slice::from_ref(&tuned), &val, vocab, &data.schema, item_template)?;
        validation.push((*epoch, scores[0]));
        if best.as_ref().is_none_or(|(_, s, _)| scores[0] > *s) {
            best = Some((*epoch, scores[0], tuned));
        }
    }
    let (selected_epoch, _, model) = best.ok_or_else(|| Error::Invalid("no checkpoints to select from".into()))?;
    if let Some(dir) = finetune_dir {
        write_json(
            &dir.join("selected.json"),
            &serde_json::json!({
                "selected_epoch": selected_epoch,
                "validation": validation,
                "metric": cfg.eval.selection_metric,
            }),
        )?;
    }
    Ok(Selection {
        selected_epoch,
        validation,
        model,
        finetune_logs,
    })
}

/// Pre-trains `method` with `seed`, fine-tunes every emitted checkpoint,
/// keeps the one with the best validation score and evaluates it on the
/// test queries. With a working directory every stage is persisted and
/// stages whose outputs already exist are loaded instead of recomputed.
pub fn run_method(ctx: &RunContext<'_>, method: &MethodConfig, seed: u64, workdir: Option<&Workdir>) -> Result<MethodRun> {
    let cfg = ctx.cfg;
    if ctx.data.test_queries().is_empty() {
        return Err(Error::Config("test split is empty".into()));
    }
    let hashes = StageHashes::new(cfg, method, seed);
    let pretrain_dir = workdir.map(|w| w.pretrain_dir(&method.name, &hashes.pretrain, seed));
    let finetune_dir = workdir.map(|w| w.finetune_dir(&method.name, &hashes.finetune, seed));
    let (candidates, pretrain_log) = pretrain_stage(ctx, method, seed, pretrain_dir.as_deref())?;
    let selection = finetune_and_select(ctx, method, seed, &candidates, finetune_dir.as_deref())?;

    let tag = format!("{}-{}-seed{seed}", method.name, hashes.run);
    let (run, test) = test_stage(ctx, &selection.model, method.scheme.item_template(), &tag)?;
    let result = MethodResult {
        method: method.name.clone(),
        seed,
        config_hash: hashes.run.clone(),
        selected_epoch: selection.selected_epoch,
        validation: selection.validation,
        test,
    };
    if let Some(w) = workdir {
        let stem = w.run_stem(&method.name, &hashes.run, seed);
        let rdir = stem.parent().expect("runs dir");
        fs::create_dir_all(rdir).map_err(|e| Error::io(rdir, e))?;
        run.write_trec(&stem.with_extension("trec"))?;
        write_json(&stem.with_extension("metrics.json"), &result.test)?;
        write_json(&stem.with_extension("result.json"), &result)?;
    }
    Ok(MethodRun {
        result,
        run,
        pretrain_log,
        finetune_logs: selection.finetune_logs,
        model: selection.model,
    })
}

pub(crate) fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}

/// Results of every `(method, seed)` pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub name: String,
    pub config_hash: String,
    pub baseline: String,
    pub metrics: Vec<MetricSpec>,
    pub results: Vec<MethodResult>,
}

impl ExperimentReport {
    pub fn methods(&self) -> Vec<String> {
        let mut names: Vec<String> = Vec::new();
        for r in &self.results {
            if !names.contains(&r.method) {
                names.push(r.method.clone());
            }
        }
        names
    }

    pub fn runs_of(&self, method: &str) -> Vec<&MethodResult> {
        self.results.iter().filter(|r| r.method == method).collect()
    }

    /// Mean of `metric` across seeds.
    pub fn mean(&self, method: &str, metric: MetricSpec) -> Option<f64> {
        mean_over_runs(&self.runs_of(method), metric)
    }

    /// Results grouped by method, in first-appearance order.
    pub fn groups(&self) -> Vec<RunGroup> {
        self.methods()
            .into_iter()
            .map(|m| RunGroup {
                runs: self.runs_of(&m).into_iter().cloned().collect(),
                label: m,
            })
            .collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }
}

fn mean_over_runs(runs: &[&MethodResult], metric: MetricSpec) -> Option<f64> {
    let vals: Vec<f64> = runs
        .iter()
        .filter_map(|r| r.test.get(&metric.name()).map(|m| m.mean))
        .collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Per-query metric averaged over runs.
fn per_query_over_runs(runs: &[MethodResult], metric: MetricSpec) -> BTreeMap<String, f64> {
    let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for r in runs {
        if let Some(m) = r.test.get(&metric.name()) {
            for (q, v) in &m.per_query {
                let e = acc.entry(q.clone()).or_insert((0.0, 0));
                e.0 += v;
                e.1 += 1;
            }
        }
    }
    acc.into_iter().map(|(q, (s, n))| (q, s / n as f64)).collect()
}

/// Writes the data files and vocabulary into the working directory and
/// returns them.
pub fn prepare_workdir(cfg: &ExperimentConfig, workdir: &Workdir) -> Result<(PreparedData, Vocabulary)> {
    workdir.claim(&cfg.identity_hash())?;
    let data = prepare_data(&cfg.data)?;
    data.write(&workdir.data_dir())?;
    let vocab = prepare_vocab(&data, &cfg.vocab)?;
    let vocab_path = workdir.vocab_path();
    fs::create_dir_all(vocab_path.parent().expect("has parent")).map_err(|e| Error::io(&vocab_path, e))?;
    vocab.save(&vocab_path)?;
    write_json(&workdir.config_path(), cfg)?;
    Ok((data, vocab))
}

/// Runs every method under every seed and writes the comparison reports.
/// Stages whose artifacts already exist in the working directory are
/// reused, so deleting downstream artifacts recomputes only those.
pub fn run_experiment(cfg: &ExperimentConfig, workdir: &Workdir) -> Result<(ExperimentReport, Comparison)> {
    cfg.validate()?;
    let _lock = workdir.lock()?;
    let (data, vocab) = prepare_workdir(cfg, workdir)?;
    let ctx = RunContext {
        cfg,
        data: &data,
        vocab: &vocab,
    };
    let mut results = Vec::new();
    for method in &cfg.methods {
        for &seed in &cfg.seeds {
            let hashes = StageHashes::new(cfg, method, seed);
            let stored = workdir
                .run_stem(&method.name, &hashes.run, seed)
                .with_extension("result.json");
            if let Ok(prev) = read_json::<MethodResult>(&stored) {
                if prev.config_hash == hashes.run {
                    log::info!("{} seed {seed}: reusing finished run", method.name);
                    results.push(prev);
                    continue;
                }
            }
            results.push(run_method(&ctx, method, seed, Some(workdir))?.result);
        }
    }
    let report = ExperimentReport {
        name: cfg.name.clone(),
        config_hash: cfg.hash(),
        baseline: cfg.baseline_name().to_string(),
        metrics: cfg.eval.metrics.clone(),
        results,
    };
    let comparison = report_comparison(&report)?;
    let rdir = workdir.reports_dir();
    fs::create_dir_all(&rdir).map_err(|e| Error::io(&rdir, e))?;
    write_json(&rdir.join("results.json"), &report)?;
    fs::write(rdir.join("comparison.txt"), comparison.to_text()).map_err(|e| Error::io(&rdir, e))?;
    fs::write(rdir.join("comparison.csv"), comparison.to_csv()).map_err(|e| Error::io(&rdir, e))?;
    Ok((report, comparison))
}

/// Reads `reports/results.json` from a finished working directory.
pub fn load_report(workdir: &Workdir) -> Result<ExperimentReport> {
    ExperimentReport::load(&workdir.reports_dir().join("results.json"))
}

/// Runs of one table row.
#[derive(Debug, Clone, PartialEq)]
pub struct RunGroup {
    pub label: String,
    pub runs: Vec<MethodResult>,
}

/// One cell of the comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonCell {
    pub method: String,
    pub metric: String,
    pub mean: f64,
    pub delta: f64,
    /// Paired test on run-averaged per-query values; `None` for the
    /// baseline row.
    pub test: Option<TTest>,
}

impl ComparisonCell {
    pub fn significant(&self, alpha: f64) -> bool {
        self.test.is_some_and(|t| t.p_two_tailed <= alpha)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub baseline: String,
    pub methods: Vec<String>,
    pub metrics: Vec<String>,
    pub cells: Vec<ComparisonCell>,
}

pub const SIGNIFICANCE: f64 = 0.05;

/// The experiment's own comparison against its baseline method.
pub fn report_comparison(report: &ExperimentReport) -> Result<Comparison> {
    let groups = report.groups();
    let baseline = groups
        .iter()
        .position(|g| g.label == report.baseline)
        .ok_or_else(|| Error::Invalid(format!("baseline `{}` has no results", report.baseline)))?;
    compare(&groups, baseline, &report.metrics)
}

/// Methods × metrics table of run-averaged means, each row tested against
/// `groups[baseline]` with a paired t-test over the queries both share.
pub fn compare(groups: &[RunGroup], baseline: usize, metrics: &[MetricSpec]) -> Result<Comparison> {
    let base = groups
        .get(baseline)
        .ok_or_else(|| Error::Invalid(format!("baseline index {baseline} out of range")))?;
    let mut cells = Vec::new();
    for metric in metrics {
        let base_refs: Vec<&MethodResult> = base.runs.iter().collect();
        let base_mean = mean_over_runs(&base_refs, *metric).unwrap_or(f64::NAN);
        let base_pq = per_query_over_runs(&base.runs, *metric);
        for (i, g) in groups.iter().enumerate() {
            let refs: Vec<&MethodResult> = g.runs.iter().collect();
            let mean = mean_over_runs(&refs, *metric).unwrap_or(f64::NAN);
            let test = if i == baseline {
                None
            } else {
                let pq = per_query_over_runs(&g.runs, *metric);
                let shared: Vec<&String> = pq.keys().filter(|q| base_pq.contains_key(*q)).collect();
                let a: Vec<f64> = shared.iter().map(|q| pq[*q]).collect();
                let b: Vec<f64> = shared.iter().map(|q| base_pq[*q]).collect();
                Some(eval::paired_t_test(&a, &b)?)
            };
            cells.push(ComparisonCell {
                method: g.label.clone(),
                metric: metric.name(),
                mean,
                delta: mean - base_mean,
                test,
            });
        }
    }
    Ok(Comparison {
        baseline: base.label.clone(),
        methods: groups.iter().map(|g| g.label.clone()).collect(),
        metrics: metrics.iter().map(MetricSpec::name).collect(),
        cells,
    })
}

impl Comparison {
    pub fn cell(&self, method: &str, metric: &str) -> Option<&ComparisonCell> {
        self.cells.iter().find(|c| c.method == method && c.metric == metric)
    }

    /// Fixed-width table; `*` marks p <= 0.05 against the baseline.
    pub fn to_text(&self) -> String {
        let width = self.methods.iter().map(String::len).max().unwrap_or(6).max(6);
        let mut s = String::new();
        let _ = write!(s, "{:<width$}", "method");
        for m in &self.metrics {
            let _ = write!(s, "  {m:<15}");
        }
        s.push('\n');
        for (row, method) in self.methods.iter().enumerate() {
            let _ = write!(s, "{method:<width$}");
            for (col, _) in self.metrics.iter().enumerate() {
                let cell = &self.cells[col * self.methods.len() + row];
                let text = match &cell.test {
                    None => format!("{:.4}", cell.mean),
                    Some(t) => format!(
                        "{:.4} {:+.4}{}",
                        cell.mean,
                        cell.delta,
                        if t.p_two_tailed <= SIGNIFICANCE { "*" } else { " " }
                    ),
                };
                let _ = write!(s, "  {text:<15}");
            }
            s.push('\n');
        }
        let _ = writeln!(s, "deltas vs {}; * paired t-test p <= {SIGNIFICANCE}", self.baseline);
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("method,metric,mean,delta,t,p\n");
        for c in &self.cells {
            let (t, p) = c
                .test
                .map(|t| (t.t.to_string(), t.p_two_tailed.to_string()))
                .unwrap_or_default();
            let _ = writeln!(s, "{},{},{},{},{t},{p}", c.method, c.metric, c.mean, c.delta);
        }
        s
    }
}
