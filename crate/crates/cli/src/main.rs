//! `amr`: synthetic data, vocabulary, pre-training, fine-tuning, retrieval,
//! evaluation and experiment sweeps from the command line.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use amr_core::corpus::{self, GenConfig, RecordKind};
use amr_core::eval::{self, EmbeddingMatrix, GainMap, MetricSpec, RunFile, Side};
use amr_core::neural::load_checkpoint;
use amr_core::pipeline::{
    self, compare, ExperimentConfig, ExperimentReport, MethodResult, RunContext, RunGroup, StageHashes, Workdir,
};
use amr_core::textproc::TemplateMode;
use amr_core::training::config_hash;
use amr_core::{AspectSchema, Error, Vocabulary};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "amr", version, about = "Multi-aspect dense retrieval experiments")]
struct Cli {
    /// Print reports as JSON.
    #[arg(long, global = true)]
    json: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// Experiment config (TOML, or JSON by extension).
    #[arg(long)]
    config: PathBuf,

    /// Working directory; overrides the config's.
    #[arg(long, env = "AMR_WORKDIR")]
    workdir: Option<PathBuf>,

    /// Run with this single seed instead of the config's list.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic multi-aspect dataset.
    Synth {
        /// Generator settings (the `[data]` table of an experiment config).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Prepare data and build the vocabulary in the working directory.
    Vocab(ConfigArgs),
    /// Pre-train one method.
    Pretrain {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        method: String,
    },
    /// Fine-tune a method's pre-training checkpoints and select the best.
    Finetune {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        method: String,
    },
    /// Embed records with a checkpoint.
    Encode {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        records: PathBuf,
        /// Comma-separated aspect names of the records.
        #[arg(long, value_delimiter = ',', required = true)]
        aspects: Vec<String>,
        #[arg(long, value_enum)]
        side: SideArg,
        /// Item template (queries always drop their aspects).
        #[arg(long, value_enum, default_value_t = ItemTemplate::WithAspects)]
        template: ItemTemplate,
        #[arg(long)]
        out: PathBuf,
    },
    /// Exact top-k inner-product search.
    Search {
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        items: PathBuf,
        #[arg(long, default_value_t = 100)]
        k: usize,
        #[arg(long, default_value = "amr")]
        tag: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Recall@k and nDCG@k of a run file.
    Eval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        qrels: PathBuf,
        /// Cutoffs (repeatable or comma-separated).
        #[arg(long, value_delimiter = ',', default_values_t = [10, 100])]
        k: Vec<usize>,
        /// `esci`, `binary` or four gains `e,s,c,i`.
        #[arg(long, default_value = "esci")]
        gains: String,
    },
    /// Run every method under every seed and write the comparison.
    Experiment {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Comma-separated seeds; overrides the config's list.
        #[arg(long, value_delimiter = ',', conflicts_with = "seed")]
        seeds: Option<Vec<u64>>,
    },
    /// Compare experiment working directories or result files.
    Compare {
        /// Working directories, `results.json` reports or single-run
        /// `.result.json` files; the first is the baseline.
        #[arg(required = true, num_args = 1..)]
        runs: Vec<PathBuf>,
        /// Metrics to compare; defaults to those of the first input.
        #[arg(long, value_delimiter = ',')]
        metrics: Option<Vec<MetricSpec>>,
        /// Also write the table as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SideArg {
    Query,
    Item,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ItemTemplate {
    WithAspects,
    ContentOnly,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp_secs()
        .init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let message = serde_json::to_string(&e.to_string()).expect("string serializes");
            eprintln!("error kind={} message={message}", e.kind());
            ExitCode::FAILURE
        }
    }
}

fn require_file(path: &Path) -> Result<(), Error> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Invalid(format!("input {} does not exist", path.display())))
    }
}

fn announce_hash(hash: &str) {
    eprintln!("config_hash={hash}");
}

fn emit<T: Serialize>(json: bool, value: &T, text: impl FnOnce() -> String) {
    if json {
        println!("{}", serde_json::to_string_pretty(value).expect("report serializes"));
    } else {
        print!("{}", text());
    }
}

/// Loads the config, applies overrides and checks referenced inputs exist.
fn load_config(args: &ConfigArgs, seeds: Option<&[u64]>) -> Result<(ExperimentConfig, Workdir), Error> {
    require_file(&args.config)?;
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(seeds) = seeds {
        cfg.seeds = seeds.to_vec();
    }
    cfg.validate()?;
    if let pipeline::DataConfig::Files {
        items,
        queries,
        qrels,
        splits,
        ..
    } = &cfg.data
    {
        for p in [items, queries, qrels].into_iter().chain(splits.as_ref()) {
            require_file(p)?;
        }
    }
    let root = args
        .workdir
        .clone()
        .or_else(|| cfg.workdir.clone())
        .ok_or_else(|| Error::Config("no working directory: pass --workdir, set AMR_WORKDIR or `workdir` in the config".into()))?;
    announce_hash(&cfg.hash());
    Ok((cfg, Workdir::new(root)))
}

fn run(cli: &Cli) -> Result<(), Error> {
    match &cli.command {
        Command::Synth { config, seed, out } => {
            let generator = match config {
                Some(path) => {
                    require_file(path)?;
                    match ExperimentConfig::load(path)?.data {
                        pipeline::DataConfig::Synthetic { generator, .. } => generator,
                        pipeline::DataConfig::Files { .. } => {
                            return Err(Error::Config("config data source is files, not synthetic".into()))
                        }
                    }
                }
                None => GenConfig::default(),
            };
            announce_hash(&config_hash(&(&generator, seed)));
            let data = pipeline::prepare_data(&pipeline::DataConfig::Synthetic {
                generator,
                seed: *seed,
            })?;
            data.write(out)?;
            let summary = serde_json::json!({
                "items": data.items.len(),
                "queries": data.queries.len(),
                "qrels": data.qrels.len(),
                "out": out,
            });
            emit(cli.json, &summary, || {
                format!(
                    "wrote {} items, {} queries, {} judgments to {}\n",
                    data.items.len(),
                    data.queries.len(),
                    data.qrels.len(),
                    out.display()
                )
            });
        }
        Command::Vocab(args) => {
            let (cfg, wd) = load_config(args, None)?;
            let _lock = wd.lock()?;
            let (_, vocab) = pipeline::prepare_workdir(&cfg, &wd)?;
            let summary = serde_json::json!({
                "size": vocab.len(),
                "fingerprint": vocab.fingerprint(),
                "path": wd.vocab_path(),
            });
            emit(cli.json, &summary, || {
                format!("vocabulary of {} tokens ({}) at {}\n", vocab.len(), vocab.fingerprint(), wd.vocab_path().display())
            });
        }
        Command::Pretrain { cfg: args, method } => {
            let (cfg, wd) = load_config(args, None)?;
            let m = cfg
                .method(method)
                .ok_or_else(|| Error::Config(format!("no method named `{method}` in the config")))?
                .clone();
            let _lock = wd.lock()?;
            let (data, vocab) = pipeline::prepare_workdir(&cfg, &wd)?;
            let ctx = RunContext {
                cfg: &cfg,
                data: &data,
                vocab: &vocab,
            };
            let mut done = Vec::new();
            for &seed in &cfg.seeds {
                let hashes = StageHashes::new(&cfg, &m, seed);
                let dir = wd.pretrain_dir(&m.name, &hashes.pretrain, seed);
                let (ckpts, _) = pipeline::pretrain_stage(&ctx, &m, seed, Some(&dir))?;
                done.push(serde_json::json!({
                    "seed": seed,
                    "dir": dir,
                    "epochs": ckpts.iter().map(|c| c.0).collect::<Vec<_>>(),
                }));
            }
            emit(cli.json, &done, || {
                done.iter()
                    .map(|d| format!("seed {} -> {} (epochs {})\n", d["seed"], d["dir"].as_str().unwrap_or(""), d["epochs"]))
                    .collect()
            });
        }
        Command::Finetune { cfg: args, method } => {
            let (cfg, wd) = load_config(args, None)?;
            let m = cfg
                .method(method)
                .ok_or_else(|| Error::Config(format!("no method named `{method}` in the config")))?
                .clone();
            let _lock = wd.lock()?;
            let (data, vocab) = pipeline::prepare_workdir(&cfg, &wd)?;
            let ctx = RunContext {
                cfg: &cfg,
                data: &data,
                vocab: &vocab,
            };
            let mut done = Vec::new();
            for &seed in &cfg.seeds {
                let hashes = StageHashes::new(&cfg, &m, seed);
                let candidates = if m.pretrain {
                    let pdir = wd.pretrain_dir(&m.name, &hashes.pretrain, seed);
                    pipeline::load_pretrained(&cfg, &vocab, &pdir)?.ok_or_else(|| {
                        Error::Invalid(format!(
                            "missing pre-training checkpoints in {}; run `amr pretrain --method {}` first",
                            pdir.display(),
                            m.name
                        ))
                    })?
                } else {
                    pipeline::pretrain_stage(&ctx, &m, seed, None)?.0
                };
                let fdir = wd.finetune_dir(&m.name, &hashes.finetune, seed);
                let sel = pipeline::finetune_and_select(&ctx, &m, seed, &candidates, Some(&fdir))?;
                amr_core::neural::save_checkpoint(&sel.model, &fdir.join("selected"))?;
                done.push(serde_json::json!({
                    "seed": seed,
                    "dir": fdir,
                    "selected_epoch": sel.selected_epoch,
                    "validation": sel.validation,
                }));
            }
            emit(cli.json, &done, || {
                done.iter()
                    .map(|d| {
                        format!(
                            "seed {} -> {} (selected pre-training epoch {}, validation {})\n",
                            d["seed"],
                            d["dir"].as_str().unwrap_or(""),
                            d["selected_epoch"],
                            d["validation"]
                        )
                    })
                    .collect()
            });
        }
        Command::Encode {
            checkpoint,
            vocab,
            records,
            aspects,
            side,
            template,
            out,
        } => {
            for p in [checkpoint, vocab, records] {
                require_file(p)?;
            }
            announce_hash(&config_hash(&(checkpoint, vocab, records, aspects, format!("{side:?}/{template:?}"))));
            let vocab = Vocabulary::load(vocab)?;
            let ckpt = load_checkpoint(checkpoint, &vocab)?;
            let schema = AspectSchema::new(aspects.iter().cloned())?;
            let (kind, side) = match side {
                SideArg::Query => (RecordKind::Query, Side::Query),
                SideArg::Item => (
                    RecordKind::Item,
                    Side::Item(match template {
                        ItemTemplate::WithAspects => TemplateMode::WithAspects,
                        ItemTemplate::ContentOnly => TemplateMode::ContentOnly,
                    }),
                ),
            };
            let recs = corpus::load_records(records, kind, &schema)?;
            let emb = eval::encode_corpus(&ckpt, &vocab, &schema, &recs, side)?;
            emb.save(out)?;
            let summary = serde_json::json!({"rows": emb.len(), "dim": emb.dim, "out": out});
            emit(cli.json, &summary, || format!("encoded {} records (dim {}) to {}\n", emb.len(), emb.dim, out.display()));
        }
        Command::Search {
            queries,
            items,
            k,
            tag,
            out,
        } => {
            require_file(queries)?;
            require_file(items)?;
            announce_hash(&config_hash(&(queries, items, k, tag)));
            let q = EmbeddingMatrix::load(queries)?;
            let i = EmbeddingMatrix::load(items)?;
            let run = eval::search(&q, &i, *k, tag)?;
            run.write_trec(out)?;
            let summary = serde_json::json!({"queries": run.rankings.len(), "k": k, "out": out});
            emit(cli.json, &summary, || format!("ranked {} queries to depth {k} into {}\n", run.rankings.len(), out.display()));
        }
        Command::Eval { run, qrels, k, gains } => {
            require_file(run)?;
            require_file(qrels)?;
            announce_hash(&config_hash(&(run, qrels, k, gains)));
            let gains: GainMap = gains.parse()?;
            let run = RunFile::read_trec(run)?;
            let qrels = corpus::load_qrels(qrels)?;
            let specs: Vec<MetricSpec> = k
                .iter()
                .flat_map(|&k| [MetricSpec::Recall(k), MetricSpec::Ndcg(k)])
                .collect();
            let report = eval::evaluate_run(&run, &qrels, &specs, &gains)?;
            let means: std::collections::BTreeMap<&String, f64> = report.iter().map(|(k, v)| (k, v.mean)).collect();
            emit(cli.json, &report, || {
                means.iter().map(|(k, v)| format!("{k}\t{v:.6}\n")).collect()
            });
        }
        Command::Experiment { cfg: args, seeds } => {
            let (cfg, wd) = load_config(args, seeds.as_deref())?;
            let (report, comparison) = pipeline::run_experiment(&cfg, &wd)?;
            emit(cli.json, &report, || comparison.to_text());
        }
        Command::Compare { runs, metrics, csv } => {
            for p in runs {
                require_file(p)?;
            }
            announce_hash(&config_hash(&(runs, metrics)));
            let mut groups = Vec::new();
            let mut default_metrics = None;
            for path in runs {
                let (report_metrics, mut found) = load_groups(path)?;
                default_metrics.get_or_insert(report_metrics);
                let single = found.len() == 1;
                for g in &mut found {
                    g.label = if single {
                        path.display().to_string()
                    } else {
                        format!("{}:{}", path.display(), g.label)
                    };
                }
                groups.extend(found);
            }
            let metrics = metrics.clone().or(default_metrics).unwrap_or_default();
            let table = compare(&groups, 0, &metrics)?;
            if let Some(csv) = csv {
                std::fs::write(csv, table.to_csv()).map_err(|e| Error::Invalid(format!("{}: {e}", csv.display())))?;
            }
            emit(cli.json, &table, || table.to_text());
        }
    }
    Ok(())
}

/// Reads runs from a working directory, a report file or a single result.
fn load_groups(path: &Path) -> Result<(Vec<MetricSpec>, Vec<RunGroup>), Error> {
    let file = if path.is_dir() {
        path.join("reports").join("results.json")
    } else {
        path.to_path_buf()
    };
    require_file(&file)?;
    let text = std::fs::read_to_string(&file).map_err(|e| Error::Invalid(format!("{}: {e}", file.display())))?;
    if let Ok(report) = serde_json::from_str::<ExperimentReport>(&text) {
        return Ok((report.metrics.clone(), report.groups()));
    }
    let single: MethodResult = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: file.clone(),
        line: e.line(),
        message: e.to_string(),
    })?;
    let metrics = single.test.keys().filter_map(|k| k.parse().ok()).collect();
    Ok((
        metrics,
        vec![RunGroup {
            label: single.method.clone(),
            runs: vec![single],
        }],
    ))
}
