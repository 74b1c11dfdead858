//! Records, relevance judgments, query-wise splits and the synthetic
//! multi-aspect dataset generator.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ordered aspect names plus, optionally, the value vocabulary of each
/// aspect (needed only by the aspect-classification baselines).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AspectSchema {
    names: Vec<String>,
    #[serde(default)]
    values: Vec<Vec<String>>,
}

impl AspectSchema {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.is_empty() {
            return Err(Error::Schema("at least one aspect is required".into()));
        }
        let mut seen = HashSet::new();
        for n in &names {
            if n.is_empty() {
                return Err(Error::Schema("aspect names must be non-empty".into()));
            }
            if !seen.insert(n.as_str()) {
                return Err(Error::Schema(format!("aspect `{n}` listed twice")));
            }
        }
        let values = vec![Vec::new(); names.len()];
        Ok(Self { names, values })
    }

    /// Number of aspects `k`.
    pub fn k(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Collects each aspect's value vocabulary (sorted, non-empty values only)
    /// from `records`.
    pub fn with_values_from(mut self, records: &[Record]) -> Self {
        let mut sets: Vec<BTreeSet<String>> = vec![BTreeSet::new(); self.k()];
        for r in records {
            for (j, name) in self.names.iter().enumerate() {
                let v = r.aspect(name);
                if !v.is_empty() {
                    sets[j].insert(v.to_string());
                }
            }
        }
        self.values = sets.into_iter().map(|s| s.into_iter().collect()).collect();
        self
    }

    /// Value vocabulary of aspect `j`; empty until [`Self::with_values_from`].
    pub fn values(&self, j: usize) -> &[String] {
        self.values.get(j).map_or(&[], Vec::as_slice)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        (0..self.k()).map(|j| self.values(j).len()).collect()
    }

    pub fn class_id(&self, j: usize, value: &str) -> Option<usize> {
        self.values(j).binary_search_by(|v| v.as_str().cmp(value)).ok()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecordKind {
    Item,
    Query,
}

/// An item or a query: content text plus one text per aspect (empty when
/// absent).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub id: String,
    #[serde(skip, default = "default_kind")]
    pub kind: RecordKind,
    pub content: String,
    #[serde(default)]
    pub aspects: BTreeMap<String, String>,
}

fn default_kind() -> RecordKind {
    RecordKind::Item
}

impl Record {
    pub fn new(id: impl Into<String>, kind: RecordKind, content: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            kind,
            content: content.into(),
            aspects: BTreeMap::new(),
        }
    }

    pub fn with_aspect(mut self, name: impl Into<String>, value: impl Into<String>) -> Self {
        self.aspects.insert(name.into(), value.into());
        self
    }

    /// Aspect text, or `""` when absent.
    pub fn aspect(&self, name: &str) -> &str {
        self.aspects.get(name).map_or("", String::as_str)
    }

    /// Copy with every aspect blanked.
    pub fn without_aspects(&self) -> Self {
        let mut r = self.clone();
        for v in r.aspects.values_mut() {
            v.clear();
        }
        r
    }

    /// Checks keys against the schema and fills in missing ones with `""`.
    pub fn normalize(&mut self, schema: &AspectSchema) -> Result<()> {
        if let Some(bad) = self.aspects.keys().find(|k| schema.position(k).is_none()) {
            return Err(Error::UnknownAspect(bad.clone()));
        }
        for name in schema.names() {
            self.aspects.entry(name.clone()).or_default();
        }
        Ok(())
    }
}

/// Reads a JSONL record file. Line numbers in errors are 1-based.
pub fn load_records(path: &Path, kind: RecordKind, schema: &AspectSchema) -> Result<Vec<Record>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut record: Record = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        if record.id.is_empty() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: "empty id".into(),
            });
        }
        record.kind = kind;
        record.normalize(schema)?;
        if !seen.insert(record.id.clone()) {
            return Err(Error::DuplicateId(record.id));
        }
        out.push(record);
    }
    Ok(out)
}

pub fn write_records(path: &Path, records: &[Record]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).expect("records serialize");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// ESCI relevance grade.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    E,
    S,
    C,
    I,
}

impl Label {
    pub const ALL: [Label; 4] = [Label::E, Label::S, Label::C, Label::I];

    /// Only Exact counts as relevant for training and recall.
    pub fn is_relevant(self) -> bool {
        self == Label::E
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "E" => Ok(Label::E),
            "S" => Ok(Label::S),
            "C" => Ok(Label::C),
            "I" => Ok(Label::I),
            other => Err(Error::UnknownLabel(other.to_string())),
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Label::E => "E",
            Label::S => "S",
            Label::C => "C",
            Label::I => "I",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Qrel {
    pub query_id: String,
    pub item_id: String,
    pub label: Label,
}

/// Graded judgments indexed by query, in file order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Qrels {
    by_query: BTreeMap<String, BTreeMap<String, Label>>,
}

impl Qrels {
    pub fn from_judgments(judgments: impl IntoIterator<Item = Qrel>) -> Result<Self> {
        let mut by_query: BTreeMap<String, BTreeMap<String, Label>> = BTreeMap::new();
        for q in judgments {
            let entry = by_query.entry(q.query_id.clone()).or_default();
            if entry.insert(q.item_id.clone(), q.label).is_some() {
                return Err(Error::DuplicateQrel {
                    query: q.query_id,
                    item: q.item_id,
                });
            }
        }
        Ok(Self { by_query })
    }

    pub fn label(&self, query: &str, item: &str) -> Option<Label> {
        self.by_query.get(query)?.get(item).copied()
    }

    pub fn judged(&self, query: &str) -> Option<&BTreeMap<String, Label>> {
        self.by_query.get(query)
    }

    pub fn query_ids(&self) -> impl Iterator<Item = &str> {
        self.by_query.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.by_query.values().map(BTreeMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.by_query.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = Qrel> + '_ {
        self.by_query.iter().flat_map(|(q, items)| {
            items.iter().map(move |(i, &label)| Qrel {
                query_id: q.clone(),
                item_id: i.clone(),
                label,
            })
        })
    }

    /// Relevant (Exact) items per query. Other labels are dropped.
    pub fn binarize(&self) -> BinaryQrels {
        let relevant = self
            .by_query
            .iter()
            .map(|(q, items)| {
                let rel = items
                    .iter()
                    .filter(|(_, l)| l.is_relevant())
                    .map(|(i, _)| i.clone())
                    .collect::<BTreeSet<_>>();
                (q.clone(), rel)
            })
            .collect();
        BinaryQrels { relevant }
    }

    /// Judgments restricted to the given queries.
    pub fn restrict(&self, queries: &BTreeSet<String>) -> Self {
        Self {
            by_query: self
                .by_query
                .iter()
                .filter(|(q, _)| queries.contains(*q))
                .map(|(q, v)| (q.clone(), v.clone()))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BinaryQrels {
    relevant: BTreeMap<String, BTreeSet<String>>,
}

impl BinaryQrels {
    pub fn is_relevant(&self, query: &str, item: &str) -> bool {
        self.relevant.get(query).is_some_and(|s| s.contains(item))
    }

    pub fn relevant(&self, query: &str) -> Option<&BTreeSet<String>> {
        self.relevant.get(query)
    }
}

/// Reads `query_id<TAB>item_id<TAB>label` lines.
pub fn load_qrels(path: &Path) -> Result<Qrels> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut judgments = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: format!("expected 3 tab-separated fields, found {}", fields.len()),
            });
        }
        judgments.push(Qrel {
            query_id: fields[0].to_string(),
            item_id: fields[1].to_string(),
            label: fields[2].trim().parse()?,
        });
    }
    Qrels::from_judgments(judgments)
}

pub fn write_qrels(path: &Path, qrels: &Qrels) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for q in qrels.iter() {
        writeln!(w, "{}\t{}\t{}", q.query_id, q.item_id, q.label).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Disjoint train/validation/test query sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    pub seed: u64,
}

impl SplitSpec {
    pub fn train_set(&self) -> BTreeSet<String> {
        self.train.iter().cloned().collect()
    }

    pub fn val_set(&self) -> BTreeSet<String> {
        self.val.iter().cloned().collect()
    }

    pub fn test_set(&self) -> BTreeSet<String> {
        self.test.iter().cloned().collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("split serializes");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })
    }
}

/// Partitions query ids into train/val/test.
///
/// Ids are sorted before shuffling so the result depends only on the id set,
/// the fractions and the seed. Sizes come from largest-remainder rounding with
/// every split getting at least one query.
pub fn split_by_query(query_ids: &[String], fractions: [f64; 3], seed: u64) -> Result<SplitSpec> {
    if fractions.iter().any(|&f| !(f > 0.0) || !f.is_finite()) {
        return Err(Error::Config("split fractions must be positive".into()));
    }
    let sum: f64 = fractions.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions sum to {sum}, expected 1")));
    }
    let mut ids: Vec<String> = query_ids.to_vec();
    ids.sort();
    ids.dedup();
    let n = ids.len();
    if n < 3 {
        return Err(Error::Config(format!("{n} queries cannot fill 3 splits")));
    }

    let exact: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut sizes: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    let mut remaining = n - sizes.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if remaining == 0 {
            break;
        }
        sizes[i] += 1;
        remaining -= 1;
    }
    for i in 0..3 {
        while sizes[i] == 0 {
            let donor = (0..3).max_by_key(|&j| sizes[j]).unwrap();
            sizes[donor] -= 1;
            sizes[i] += 1;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let mut it = ids.into_iter();
    let mut take = |m: usize| {
        let mut part: Vec<String> = it.by_ref().take(m).collect();
        part.sort();
        part
    };
    let train = take(sizes[0]);
    let val = take(sizes[1]);
    let test = take(sizes[2]);
    Ok(SplitSpec {
        train,
        val,
        test,
        seed,
    })
}

/// Parameters of the synthetic multi-aspect generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub n_categories: usize,
    pub n_brands: usize,
    pub words_per_category: usize,
    pub n_noise_words: usize,
    pub n_items: usize,
    pub n_queries: usize,
    pub content_len_min: usize,
    pub content_len_max: usize,
    pub aspect_dropout: f64,
    /// Randomly chosen Irrelevant judgments per query.
    pub irrelevant_per_query: usize,
    pub split_fractions: [f64; 3],
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            n_categories: 8,
            n_brands: 16,
            words_per_category: 100,
            n_noise_words: 200,
            n_items: 2000,
            n_queries: 600,
            content_len_min: 4,
            content_len_max: 8,
            aspect_dropout: 0.1,
            irrelevant_per_query: 5,
            split_fractions: [0.8, 0.1, 0.1],
        }
    }
}

/// Aspect names the generator writes.
pub const SYNTHETIC_ASPECTS: [&str; 2] = ["category", "brand"];

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub schema: AspectSchema,
    pub items: Vec<Record>,
    pub queries: Vec<Record>,
    pub qrels: Qrels,
    pub split: SplitSpec,
}

const P_OWN_POOL: f64 = 0.5;
const P_ADJACENT_POOL: f64 = 0.2;
const MAX_ANCHOR_ATTEMPTS: usize = 64;

/// Builds a seeded multi-aspect dataset whose category aspect carries
/// relevance signal.
///
/// Item content mixes words from the item's category pool (p = 0.5), the next
/// category's pool (p = 0.2) and a shared noise pool (p = 0.3). A query copies
/// 2–5 non-noise words from an anchor item. Same-category items sharing a
/// non-noise word with the query are Exact, next-category items sharing one are
/// Substitute, and a random sample of the rest are Irrelevant.
pub fn generate_synthetic(cfg: &GenConfig, seed: u64) -> Result<SyntheticDataset> {
    if cfg.n_categories < 2 || cfg.n_brands == 0 {
        return Err(Error::Config("need at least 2 categories and 1 brand".into()));
    }
    if cfg.words_per_category < 5 || cfg.n_noise_words == 0 {
        return Err(Error::Config(
            "category pools need at least 5 words and the noise pool at least 1".into(),
        ));
    }
    if cfg.content_len_min < 2 || cfg.content_len_max < cfg.content_len_min {
        return Err(Error::Config("content length range must satisfy 2 <= min <= max".into()));
    }
    if cfg.n_items < cfg.n_categories || cfg.n_queries < 3 {
        return Err(Error::Config(format!(
            "{} items / {} queries is too small for {} categories",
            cfg.n_items, cfg.n_queries, cfg.n_categories
        )));
    }
    if !(0.0..=1.0).contains(&cfg.aspect_dropout) {
        return Err(Error::Config("aspect dropout must lie in [0, 1]".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pools: Vec<Vec<String>> = (0..cfg.n_categories)
        .map(|c| (0..cfg.words_per_category).map(|w| format!("w{c}x{w}")).collect())
        .collect();
    let noise: Vec<String> = (0..cfg.n_noise_words).map(|w| format!("n{w}")).collect();
    let word_category: HashMap<&str, usize> = pools
        .iter()
        .enumerate()
        .flat_map(|(c, p)| p.iter().map(move |w| (w.as_str(), c)))
        .collect();
    let adjacent = |c: usize| (c + 1) % cfg.n_categories;

    struct Item {
        category: usize,
        words: Vec<String>,
    }
    let mut items = Vec::with_capacity(cfg.n_items);
    let mut records = Vec::with_capacity(cfg.n_items);
    for i in 0..cfg.n_items {
        let category = rng.random_range(0..cfg.n_categories);
        let brand = rng.random_range(0..cfg.n_brands);
        let len = rng.random_range(cfg.content_len_min..=cfg.content_len_max);
        let words: Vec<String> = (0..len)
            .map(|_| {
                let u: f64 = rng.random();
                let pool = if u < P_OWN_POOL {
                    &pools[category]
                } else if u < P_OWN_POOL + P_ADJACENT_POOL {
                    &pools[adjacent(category)]
                } else {
                    &noise
                };
                pool.choose(&mut rng).expect("non-empty pool").clone()
            })
            .collect();
        let cat_text = if rng.random::<f64>() < cfg.aspect_dropout {
            String::new()
        } else {
            format!("cat{category}")
        };
        let brand_text = if rng.random::<f64>() < cfg.aspect_dropout {
            String::new()
        } else {
            format!("brand{brand}")
        };
        records.push(
            Record::new(format!("i{i}"), RecordKind::Item, words.join(" "))
                .with_aspect(SYNTHETIC_ASPECTS[0], cat_text)
                .with_aspect(SYNTHETIC_ASPECTS[1], brand_text),
        );
        items.push(Item { category, words });
    }

    // Inverted index over non-noise words.
    let mut postings: HashMap<&str, BTreeSet<usize>> = HashMap::new();
    for (i, item) in items.iter().enumerate() {
        for w in &item.words {
            if word_category.contains_key(w.as_str()) {
                postings.entry(w.as_str()).or_default().insert(i);
            }
        }
    }

    let mut queries = Vec::with_capacity(cfg.n_queries);
    let mut judgments = Vec::new();
    for q in 0..cfg.n_queries {
        let qid = format!("q{q}");
        let mut built = None;
        for _ in 0..MAX_ANCHOR_ATTEMPTS {
            let anchor = rng.random_range(0..items.len());
            let mut candidates: Vec<&str> = items[anchor]
                .words
                .iter()
                .map(String::as_str)
                .filter(|w| word_category.contains_key(w))
                .collect();
            candidates.sort_unstable();
            candidates.dedup();
            if candidates.len() < 2 {
                continue;
            }
            let n_words = rng.random_range(2..=5).min(candidates.len());
            let words: Vec<&str> = candidates.choose_multiple(&mut rng, n_words).copied().collect();
            let category = items[anchor].category;

            let mut exact = BTreeSet::new();
            let mut substitute = BTreeSet::new();
            for w in &words {
                for &i in &postings[w] {
                    if items[i].category == category {
                        exact.insert(i);
                    } else if items[i].category == adjacent(category) {
                        substitute.insert(i);
                    }
                }
            }
            // The anchor always shares every query word, so `exact` is non-empty.
            debug_assert!(exact.contains(&anchor));
            built = Some((anchor, category, words, exact, substitute));
            break;
        }
        let Some((_anchor, category, words, exact, substitute)) = built else {
            return Err(Error::Config(
                "content pools too small: could not find an anchor item with 2 topical words".into(),
            ));
        };

        let mut others: Vec<usize> = Vec::new();
        let mut guard = 0;
        while others.len() < cfg.irrelevant_per_query.max(1) && guard < 50 * cfg.n_items {
            guard += 1;
            let i = rng.random_range(0..items.len());
            if !exact.contains(&i) && !substitute.contains(&i) && !others.contains(&i) {
                others.push(i);
            }
        }
        if substitute.is_empty() && others.is_empty() {
            return Err(Error::Config(format!(
                "could not find a non-relevant judged item for query {qid}"
            )));
        }

        for &i in &exact {
            judgments.push(Qrel {
                query_id: qid.clone(),
                item_id: format!("i{i}"),
                label: Label::E,
            });
        }
        for &i in &substitute {
            judgments.push(Qrel {
                query_id: qid.clone(),
                item_id: format!("i{i}"),
                label: Label::S,
            });
        }
        for &i in &others {
            judgments.push(Qrel {
                query_id: qid.clone(),
                item_id: format!("i{i}"),
                label: Label::I,
            });
        }
        queries.push(
            Record::new(qid, RecordKind::Query, words.join(" "))
                .with_aspect(SYNTHETIC_ASPECTS[0], format!("cat{category}"))
                .with_aspect(SYNTHETIC_ASPECTS[1], ""),
        );
    }

    let qrels = Qrels::from_judgments(judgments)?;
    let query_ids: Vec<String> = queries.iter().map(|q| q.id.clone()).collect();
    let split = split_by_query(&query_ids, cfg.split_fractions, seed)?;
    let schema = AspectSchema::new(SYNTHETIC_ASPECTS)?;
    Ok(SyntheticDataset {
        schema,
        items: records,
        queries,
        qrels,
        split,
    })
}
