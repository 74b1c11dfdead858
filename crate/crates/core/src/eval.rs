//! Corpus encoding, exhaustive dot-product retrieval, recall/nDCG and paired
//! significance tests.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::corpus::{AspectSchema, BinaryQrels, Label, Qrels, Record};
use crate::error::{Error, Result};
use crate::neural::{Checkpoint, Model};
use crate::textproc::{build_input, TemplateMode, Vocabulary};

/// Row-aligned embeddings with their record ids.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub ids: Vec<String>,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl EmbeddingMatrix {
    pub fn new(ids: Vec<String>, dim: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != ids.len() * dim {
            return Err(Error::shape(
                "embedding_matrix",
                format!("{} ids x {dim} dims vs {} values", ids.len(), data.len()),
            ));
        }
        Ok(Self { ids, dim, data })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Writes ids and `f32` rows as JSONL (`{"id": .., "embedding": [..]}`).
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for (i, id) in self.ids.iter().enumerate() {
            let line = serde_json::json!({ "id": id, "embedding": self.row(i) });
            writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            id: String,
            embedding: Vec<f32>,
        }
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut ids = Vec::new();
        let mut data = Vec::new();
        let mut dim = None;
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let row: Row = serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?;
            if *dim.get_or_insert(row.embedding.len()) != row.embedding.len() {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: "embedding dimension differs from earlier rows".into(),
                });
            }
            ids.push(row.id);
            data.extend(row.embedding);
        }
        Self::new(ids, dim.unwrap_or(0), data)
    }
}

/// Which side of the dual encoder a record is encoded for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    /// Aspect text always blanked.
    Query,
    /// Items use the scheme's item template.
    Item(TemplateMode),
}

impl Side {
    pub fn template(self) -> TemplateMode {
        match self {
            Side::Query => TemplateMode::AspectsEmpty,
            Side::Item(t) => t,
        }
    }
}

/// Dropout-free CLS embeddings for `records`, one row per record.
pub fn encode_with_model(
    model: &Model<f32>,
    vocab: &Vocabulary,
    schema: &AspectSchema,
    records: &[Record],
    side: Side,
) -> Result<EmbeddingMatrix> {
    let max_len = model.config().max_len;
    let rows: Vec<Vec<f32>> = records
        .par_iter()
        .map(|r| {
            let input = build_input(r, schema, vocab, side.template(), max_len)?;
            model.embed(&input)
        })
        .collect::<Result<_>>()?;
    let dim = model.config().hidden_dim;
    EmbeddingMatrix::new(
        records.iter().map(|r| r.id.clone()).collect(),
        dim,
        rows.concat(),
    )
}

/// As [`encode_with_model`], after checking the checkpoint's vocabulary.
pub fn encode_corpus(
    ckpt: &Checkpoint,
    vocab: &Vocabulary,
    schema: &AspectSchema,
    records: &[Record],
    side: Side,
) -> Result<EmbeddingMatrix> {
    if ckpt.vocab_fingerprint != vocab.fingerprint() {
        return Err(Error::FingerprintMismatch {
            expected: ckpt.vocab_fingerprint.clone(),
            found: vocab.fingerprint().to_string(),
        });
    }
    encode_with_model(&ckpt.model, vocab, schema, records, side)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredItem {
    pub item_id: String,
    pub score: f32,
}

/// Ranked lists per query, in query order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunFile {
    pub tag: String,
    pub rankings: Vec<(String, Vec<ScoredItem>)>,
}

impl RunFile {
    pub fn ranking(&self, query: &str) -> Option<&[ScoredItem]> {
        self.rankings
            .iter()
            .find(|(q, _)| q == query)
            .map(|(_, r)| r.as_slice())
    }

    /// TREC format: `query_id Q0 item_id rank score tag`, rank from 1.
    pub fn write_trec(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for (q, ranking) in &self.rankings {
            for (rank, s) in ranking.iter().enumerate() {
                writeln!(w, "{q} Q0 {} {} {} {}", s.item_id, rank + 1, s.score, self.tag)
                    .map_err(|e| Error::io(path, e))?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_trec(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut run = RunFile::default();
        let mut index: BTreeMap<String, usize> = BTreeMap::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |message: String| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message,
            };
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 6 {
                return Err(parse_err(format!("expected 6 fields, found {}", f.len())));
            }
            let rank: usize = f[3].parse().map_err(|_| parse_err(format!("bad rank `{}`", f[3])))?;
            let score: f32 = f[4].parse().map_err(|_| parse_err(format!("bad score `{}`", f[4])))?;
            run.tag = f[5].to_string();
            let slot = *index.entry(f[0].to_string()).or_insert_with(|| {
                run.rankings.push((f[0].to_string(), Vec::new()));
                run.rankings.len() - 1
            });
            let ranking = &mut run.rankings[slot].1;
            if rank != ranking.len() + 1 {
                return Err(parse_err(format!("rank {rank} out of order for query {}", f[0])));
            }
            ranking.push(ScoredItem {
                item_id: f[2].to_string(),
                score,
            });
        }
        Ok(run)
    }
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Exhaustive dot-product top-`k`; equal scores are ordered by item id.
pub fn search(queries: &EmbeddingMatrix, items: &EmbeddingMatrix, k: usize, tag: &str) -> Result<RunFile> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    if !queries.is_empty() && !items.is_empty() && queries.dim != items.dim {
        return Err(Error::shape(
            "search",
            format!("query dim {} vs item dim {}", queries.dim, items.dim),
        ));
    }
    let rankings = (0..queries.len())
        .into_par_iter()
        .map(|qi| {
            let q = queries.row(qi);
            let mut scored: Vec<(f32, usize)> = (0..items.len()).map(|ii| (dot(q, items.row(ii)), ii)).collect();
            let by_rank = |a: &(f32, usize), b: &(f32, usize)| {
                b.0.total_cmp(&a.0).then_with(|| items.ids[a.1].cmp(&items.ids[b.1]))
            };
            if scored.len() > k {
                scored.select_nth_unstable_by(k - 1, by_rank);
                scored.truncate(k);
            }
            scored.sort_by(by_rank);
            let ranking = scored
                .into_iter()
                .map(|(score, ii)| ScoredItem {
                    item_id: items.ids[ii].clone(),
                    score,
                })
                .collect();
            (queries.ids[qi].clone(), ranking)
        })
        .collect();
    Ok(RunFile {
        tag: tag.to_string(),
        rankings,
    })
}

/// Per-query metric values and their mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricResult {
    pub mean: f64,
    pub per_query: BTreeMap<String, f64>,
    /// Queries skipped because they have no relevant (or no positive-gain)
    /// judgments.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub excluded: Vec<String>,
}

impl MetricResult {
    fn from_values(per_query: BTreeMap<String, f64>, excluded: Vec<String>) -> Self {
        let mean = if per_query.is_empty() {
            0.0
        } else {
            per_query.values().sum::<f64>() / per_query.len() as f64
        };
        Self {
            mean,
            per_query,
            excluded,
        }
    }
}

/// `|relevant ∩ top-k| / |relevant|` per run query.
pub fn recall_at_k(run: &RunFile, qrels: &BinaryQrels, k: usize) -> Result<MetricResult> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let mut per_query = BTreeMap::new();
    let mut excluded = Vec::new();
    for (q, ranking) in &run.rankings {
        let Some(relevant) = qrels.relevant(q).filter(|r| !r.is_empty()) else {
            excluded.push(q.clone());
            continue;
        };
        let hits = ranking
            .iter()
            .take(k)
            .filter(|s| relevant.contains(&s.item_id))
            .count();
        per_query.insert(q.clone(), hits as f64 / relevant.len() as f64);
    }
    if !excluded.is_empty() {
        log::warn!("recall@{k}: {} queries without relevant items excluded", excluded.len());
    }
    Ok(MetricResult::from_values(per_query, excluded))
}

/// Gain per relevance grade.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GainMap {
    pub e: f64,
    pub s: f64,
    pub c: f64,
    pub i: f64,
}

impl Default for GainMap {
    fn default() -> Self {
        Self::esci()
    }
}

impl GainMap {
    /// E/S/C/I → 1.0/0.1/0.01/0.0.
    pub fn esci() -> Self {
        Self {
            e: 1.0,
            s: 0.1,
            c: 0.01,
            i: 0.0,
        }
    }

    pub fn binary() -> Self {
        Self {
            e: 1.0,
            s: 0.0,
            c: 0.0,
            i: 0.0,
        }
    }

    pub fn gain(&self, label: Label) -> f64 {
        match label {
            Label::E => self.e,
            Label::S => self.s,
            Label::C => self.c,
            Label::I => self.i,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if [self.e, self.s, self.c, self.i].iter().all(|g| g.is_finite() && *g >= 0.0) {
            Ok(())
        } else {
            Err(Error::Config("gains must be finite and non-negative".into()))
        }
    }
}

impl std::str::FromStr for GainMap {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "esci" => Ok(Self::esci()),
            "binary" => Ok(Self::binary()),
            other => {
                let bad = || Error::Config(format!("gain map `{other}` is not esci, binary or four numbers e,s,c,i"));
                let v: Vec<f64> = other
                    .split(',')
                    .map(|x| x.trim().parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| bad())?;
                let [e, s, c, i] = v[..] else { return Err(bad()) };
                let g = Self { e, s, c, i };
                g.validate()?;
                Ok(g)
            }
        }
    }
}

/// `DCG = Σ gain(rank i) / log2(i + 1)` over the top `k`, normalized by the
/// DCG of the judged items sorted by gain. Unjudged items have gain 0.
pub fn ndcg_at_k(run: &RunFile, qrels: &Qrels, k: usize, gains: &GainMap) -> Result<MetricResult> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    gains.validate()?;
    let discount = |rank0: usize| 1.0 / ((rank0 + 2) as f64).log2();
    let mut per_query = BTreeMap::new();
    let mut excluded = Vec::new();
    for (q, ranking) in &run.rankings {
        let judged = qrels.judged(q);
        let mut ideal: Vec<f64> = judged
            .map(|j| j.values().map(|&l| gains.gain(l)).collect())
            .unwrap_or_default();
        ideal.sort_by(|a, b| b.total_cmp(a));
        let idcg: f64 = ideal.iter().take(k).enumerate().map(|(i, g)| g * discount(i)).sum();
        if idcg <= 0.0 {
            excluded.push(q.clone());
            continue;
        }
        let dcg: f64 = ranking
            .iter()
            .take(k)
            .enumerate()
            .map(|(i, s)| {
                let g = judged
                    .and_then(|j| j.get(&s.item_id))
                    .map_or(0.0, |&l| gains.gain(l));
                g * discount(i)
            })
            .sum();
        per_query.insert(q.clone(), dcg / idcg);
    }
    if !excluded.is_empty() {
        log::warn!("ndcg@{k}: {} queries with zero ideal DCG excluded", excluded.len());
    }
    Ok(MetricResult::from_values(per_query, excluded))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub df: usize,
    pub p_two_tailed: f64,
}

/// Paired two-tailed Student t-test on `a[i] - b[i]`.
///
/// All-zero differences give `p = 1`; zero variance with a non-zero mean
/// gives `p = 0`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() {
        return Err(Error::Invalid(format!(
            "paired t-test needs equal lengths, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::Invalid("paired t-test needs at least 2 pairs".into()));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let df = n - 1;
    // Differences this small relative to the values are rounding noise.
    let scale = a.iter().chain(b).fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    let tiny = 1e-12 * scale;
    if var.sqrt() <= tiny {
        return Ok(if mean.abs() <= tiny {
            TTest {
                t: 0.0,
                df,
                p_two_tailed: 1.0,
            }
        } else {
            TTest {
                t: mean.signum() * f64::INFINITY,
                df,
                p_two_tailed: 0.0,
            }
        });
    }
    let t = mean / (var / n as f64).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df as f64).expect("df >= 1");
    let p = (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0);
    Ok(TTest {
        t,
        df,
        p_two_tailed: p,
    })
}

/// Paired test over the queries two metric results share.
pub fn compare_metric(a: &MetricResult, b: &MetricResult) -> Result<TTest> {
    let shared: Vec<&String> = a.per_query.keys().filter(|q| b.per_query.contains_key(*q)).collect();
    let xs: Vec<f64> = shared.iter().map(|q| a.per_query[*q]).collect();
    let ys: Vec<f64> = shared.iter().map(|q| b.per_query[*q]).collect();
    paired_t_test(&xs, &ys)
}

/// Metric name → result, serialized as
/// `{"metric": {"mean": .., "per_query": {..}}}`.
pub type MetricsReport = BTreeMap<String, MetricResult>;

/// Metric specification like `recall@100` or `ndcg@50`; (de)serializes as
/// that string.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum MetricSpec {
    Recall(usize),
    Ndcg(usize),
}

impl MetricSpec {
    pub fn name(&self) -> String {
        match self {
            MetricSpec::Recall(k) => format!("recall@{k}"),
            MetricSpec::Ndcg(k) => format!("ndcg@{k}"),
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            MetricSpec::Recall(k) | MetricSpec::Ndcg(k) => *k,
        }
    }

    pub fn evaluate(&self, run: &RunFile, qrels: &Qrels, gains: &GainMap) -> Result<MetricResult> {
        match *self {
            MetricSpec::Recall(k) => recall_at_k(run, &qrels.binarize(), k),
            MetricSpec::Ndcg(k) => ndcg_at_k(run, qrels, k, gains),
        }
    }
}

impl std::str::FromStr for MetricSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("metric `{s}` is not recall@k or ndcg@k"));
        let (name, k) = s.split_once('@').ok_or_else(bad)?;
        let k: usize = k.parse().map_err(|_| bad())?;
        if k == 0 {
            return Err(bad());
        }
        match name {
            "recall" | "r" => Ok(MetricSpec::Recall(k)),
            "ndcg" => Ok(MetricSpec::Ndcg(k)),
            _ => Err(bad()),
        }
    }
}

impl TryFrom<String> for MetricSpec {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<MetricSpec> for String {
    fn from(m: MetricSpec) -> String {
        m.name()
    }
}

impl fmt::Display for MetricSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

/// Evaluates every metric in `specs` on `run`.
pub fn evaluate_run(run: &RunFile, qrels: &Qrels, specs: &[MetricSpec], gains: &GainMap) -> Result<MetricsReport> {
    let mut seen = HashSet::new();
    let mut report = MetricsReport::new();
    for spec in specs {
        if seen.insert(*spec) {
            report.insert(spec.name(), spec.evaluate(run, qrels, gains)?);
        }
    }
    Ok(report)
}
