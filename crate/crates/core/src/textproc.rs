//! Tokenization, vocabulary, encoder-input templating and masking.
//!
//! Every encoder input follows the same skeleton:
//!
//! ```text
//! [CLS] [A_1] aspect_1 ... [A_k] aspect_k [SEP] [C] content [SEP] [PAD]...
//! ```
//!
//! Indicator tokens are always present, even when their segment is empty.

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{AspectSchema, Record};
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
pub const MASK: usize = 4;
pub const CONTENT_INDICATOR: usize = 5;
const FIRST_ASPECT_INDICATOR: usize = 6;

const BASE_SPECIALS: [&str; 6] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]", "[C]"];

/// Id of the indicator token `[A_{j+1}]` for zero-based aspect `j`.
pub fn aspect_indicator(j: usize) -> usize {
    FIRST_ASPECT_INDICATOR + j
}

/// Lowercases and splits on anything that is not alphanumeric.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
    k: usize,
    fingerprint: String,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    tokens: Vec<String>,
    k: usize,
    fingerprint: String,
}

impl Vocabulary {
    /// Builds a vocabulary from an ordered token list whose first `6 + k`
    /// entries must be the special tokens.
    pub fn from_tokens(tokens: Vec<String>, k: usize) -> Result<Self> {
        let specials = special_tokens(k);
        if tokens.len() < specials.len() || tokens[..specials.len()] != specials[..] {
            return Err(Error::Invalid(
                "vocabulary must start with the special tokens".into(),
            ));
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i).is_some() {
                return Err(Error::Invalid(format!("token `{t}` appears twice")));
            }
        }
        let fingerprint = fingerprint(&tokens, k);
        Ok(Self {
            tokens,
            ids,
            k,
            fingerprint,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Number of aspects the indicator tokens were allocated for.
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn num_specials(&self) -> usize {
        FIRST_ASPECT_INDICATOR + self.k
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    /// Id of `token`, [`UNK`] when unknown.
    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.ids.contains_key(token)
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = VocabFile {
            tokens: self.tokens.clone(),
            k: self.k,
            fingerprint: self.fingerprint.clone(),
        };
        let text = serde_json::to_string_pretty(&file).expect("vocab serializes");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: VocabFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })?;
        let vocab = Self::from_tokens(file.tokens, file.k)?;
        if vocab.fingerprint != file.fingerprint {
            return Err(Error::FingerprintMismatch {
                expected: file.fingerprint,
                found: vocab.fingerprint,
            });
        }
        Ok(vocab)
    }
}

fn special_tokens(k: usize) -> Vec<String> {
    BASE_SPECIALS
        .iter()
        .map(|s| s.to_string())
        .chain((1..=k).map(|j| format!("[A_{j}]")))
        .collect()
}

fn fingerprint(tokens: &[String], k: usize) -> String {
    let mut h = Sha256::new();
    h.update(k.to_le_bytes());
    for t in tokens {
        h.update((t.len() as u64).to_le_bytes());
        h.update(t.as_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Specials first, then tokens by descending frequency with ties broken
/// lexicographically, cut off at `max_size` total entries.
pub fn build_vocab(records: &[Record], k: usize, min_freq: usize, max_size: usize) -> Result<Vocabulary> {
    let specials = special_tokens(k);
    if max_size < specials.len() {
        return Err(Error::Config(format!(
            "max_size {max_size} is smaller than the {} special tokens",
            specials.len()
        )));
    }
    if min_freq == 0 {
        return Err(Error::Config("min_freq must be at least 1".into()));
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    for r in records {
        let texts = std::iter::once(r.content.as_str()).chain(r.aspects.values().map(String::as_str));
        for text in texts {
            for t in tokenize(text) {
                *counts.entry(t).or_default() += 1;
            }
        }
    }
    let mut ranked: Vec<(String, usize)> = counts.into_iter().filter(|(_, c)| *c >= min_freq).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let mut tokens = specials;
    tokens.extend(ranked.into_iter().map(|(t, _)| t).take(max_size - tokens.len()));
    Vocabulary::from_tokens(tokens, k)
}

/// Segment a token belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Role {
    Special,
    Indicator,
    /// Zero-based aspect index.
    Aspect(usize),
    Content,
    Pad,
}

impl Role {
    pub fn is_maskable(self) -> bool {
        matches!(self, Role::Aspect(_) | Role::Content)
    }
}

/// How a record is laid out in the template.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateMode {
    /// Aspect texts filled in.
    WithAspects,
    /// Aspect texts blanked, indicators kept. Used for every query at
    /// matching time.
    AspectsEmpty,
    /// Same layout as `AspectsEmpty`; used by content-only objectives and
    /// models that never see aspect text.
    ContentOnly,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderInput {
    pub token_ids: Vec<usize>,
    pub roles: Vec<Role>,
    pub attention_mask: Vec<u8>,
}

impl EncoderInput {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// Number of leading non-pad positions.
    pub fn active_len(&self) -> usize {
        self.attention_mask
            .iter()
            .rposition(|&m| m == 1)
            .map_or(0, |p| p + 1)
    }

    pub fn positions_with(&self, pred: impl Fn(Role) -> bool) -> Vec<usize> {
        self.roles
            .iter()
            .enumerate()
            .filter(|(_, r)| pred(**r))
            .map(|(i, _)| i)
            .collect()
    }

    /// Token ids whose role satisfies `pred`, in order.
    pub fn ids_with(&self, pred: impl Fn(Role) -> bool) -> Vec<usize> {
        self.token_ids
            .iter()
            .zip(&self.roles)
            .filter(|(_, r)| pred(**r))
            .map(|(&t, _)| t)
            .collect()
    }
}

/// Lays `record` out in the encoder template and pads to `max_len`.
///
/// When the budget is too small, content tokens are dropped from the tail
/// first, then aspect tokens from the tail; `[CLS]`, the indicators and both
/// `[SEP]`s always survive.
pub fn build_input(
    record: &Record,
    schema: &AspectSchema,
    vocab: &Vocabulary,
    mode: TemplateMode,
    max_len: usize,
) -> Result<EncoderInput> {
    let k = schema.k();
    if vocab.k() != k {
        return Err(Error::Config(format!(
            "vocabulary has {} aspect indicators, schema has {k} aspects",
            vocab.k()
        )));
    }
    if max_len < k + 4 {
        return Err(Error::Config(format!("max_len {max_len} is below the {} template tokens", k + 4)));
    }
    if let Some(bad) = record.aspects.keys().find(|n| schema.position(n).is_none()) {
        return Err(Error::UnknownAspect(bad.clone()));
    }

    let mut aspect_ids: Vec<Vec<usize>> = schema
        .names()
        .iter()
        .map(|name| match mode {
            TemplateMode::WithAspects => vocab.encode(record.aspect(name)),
            TemplateMode::AspectsEmpty | TemplateMode::ContentOnly => Vec::new(),
        })
        .collect();
    let mut content_ids = vocab.encode(&record.content);

    let budget = max_len - (k + 4);
    let mut excess = (content_ids.len() + aspect_ids.iter().map(Vec::len).sum::<usize>()).saturating_sub(budget);
    let cut = excess.min(content_ids.len());
    content_ids.truncate(content_ids.len() - cut);
    excess -= cut;
    for ids in aspect_ids.iter_mut().rev() {
        if excess == 0 {
            break;
        }
        let cut = excess.min(ids.len());
        ids.truncate(ids.len() - cut);
        excess -= cut;
    }

    let mut token_ids = Vec::with_capacity(max_len);
    let mut roles = Vec::with_capacity(max_len);
    token_ids.push(CLS);
    roles.push(Role::Special);
    for (j, ids) in aspect_ids.iter().enumerate() {
        token_ids.push(aspect_indicator(j));
        roles.push(Role::Indicator);
        token_ids.extend_from_slice(ids);
        roles.extend(std::iter::repeat_n(Role::Aspect(j), ids.len()));
    }
    token_ids.push(SEP);
    roles.push(Role::Special);
    token_ids.push(CONTENT_INDICATOR);
    roles.push(Role::Indicator);
    token_ids.extend_from_slice(&content_ids);
    roles.extend(std::iter::repeat_n(Role::Content, content_ids.len()));
    token_ids.push(SEP);
    roles.push(Role::Special);

    let active = token_ids.len();
    let mut attention_mask = vec![1u8; active];
    token_ids.resize(max_len, PAD);
    roles.resize(max_len, Role::Pad);
    attention_mask.resize(max_len, 0);
    Ok(EncoderInput {
        token_ids,
        roles,
        attention_mask,
    })
}

/// What replaces a selected token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskAction {
    Mask,
    Random,
    Keep,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplacementPolicy {
    /// 80% `[MASK]`, 10% random token, 10% unchanged.
    #[default]
    Bert,
    /// Always `[MASK]`.
    MaskOnly,
}

/// Per-role selection probabilities for one corrupted view.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskingScheme {
    pub content_ratio: f64,
    pub aspect_ratio: f64,
    #[serde(default)]
    pub policy: ReplacementPolicy,
}

impl MaskingScheme {
    pub fn new(content_ratio: f64, aspect_ratio: f64) -> Self {
        Self {
            content_ratio,
            aspect_ratio,
            policy: ReplacementPolicy::Bert,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, r) in [("content", self.content_ratio), ("aspect", self.aspect_ratio)] {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::Config(format!("{name} mask ratio {r} outside [0, 1]")));
            }
        }
        Ok(())
    }

    fn ratio(&self, role: Role) -> f64 {
        match role {
            Role::Content => self.content_ratio,
            Role::Aspect(_) => self.aspect_ratio,
            _ => 0.0,
        }
    }
}

/// Positions selected for prediction and their original ids.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MaskingPlan {
    pub positions: Vec<usize>,
    pub labels: Vec<usize>,
    pub actions: Vec<MaskAction>,
}

impl MaskingPlan {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Writes the original ids back into `corrupted`.
    pub fn restore(&self, corrupted: &EncoderInput) -> EncoderInput {
        let mut out = corrupted.clone();
        for (&p, &l) in self.positions.iter().zip(&self.labels) {
            out.token_ids[p] = l;
        }
        out
    }
}

/// Selects each content/aspect token independently with its role's ratio and
/// corrupts the selected ones.
pub fn sample_masking<R: Rng + ?Sized>(
    input: &EncoderInput,
    scheme: &MaskingScheme,
    vocab: &Vocabulary,
    rng: &mut R,
) -> Result<(EncoderInput, MaskingPlan)> {
    scheme.validate()?;
    let mut corrupted = input.clone();
    let mut plan = MaskingPlan::default();
    let first_regular = vocab.num_specials();
    for (pos, &role) in input.roles.iter().enumerate() {
        if !role.is_maskable() {
            continue;
        }
        let ratio = scheme.ratio(role);
        if ratio <= 0.0 || rng.random::<f64>() >= ratio {
            continue;
        }
        let action = match scheme.policy {
            ReplacementPolicy::MaskOnly => MaskAction::Mask,
            ReplacementPolicy::Bert => {
                let u: f64 = rng.random();
                if u < 0.8 {
                    MaskAction::Mask
                } else if u < 0.9 {
                    MaskAction::Random
                } else {
                    MaskAction::Keep
                }
            }
        };
        corrupted.token_ids[pos] = match action {
            MaskAction::Mask => MASK,
            MaskAction::Random if vocab.len() > first_regular => rng.random_range(first_regular..vocab.len()),
            MaskAction::Random => MASK,
            MaskAction::Keep => input.token_ids[pos],
        };
        plan.positions.push(pos);
        plan.labels.push(input.token_ids[pos]);
        plan.actions.push(action);
    }
    Ok((corrupted, plan))
}
