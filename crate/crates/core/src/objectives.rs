//! Pre-training and fine-tuning losses.
//!
//! Pre-training works on *views*: a record laid out with some template and
//! corrupted with some masking ratios. The mutual-prediction objective uses
//! three views per record:
//!
//! * content MLM: blank-aspect template, content masked;
//! * aspect-to-content: aspects visible, content masked;
//! * content-to-aspect: content visible, aspects masked;
//!
//! combined as `L_mlm + λ (L_a2c + L_c2a)`. Baselines are other view sets.
//! Each masked-prediction loss is the mean negative log-likelihood over the
//! view's masked positions (0 when nothing was masked).

use std::fmt;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{AspectSchema, Record, RecordKind};
use crate::error::{Error, Result};
use crate::neural::{Encoded, Float, Graph, Model, NodeId, ParamGrads, Tensor};
use crate::textproc::{build_input, sample_masking, MaskingPlan, MaskingScheme, ReplacementPolicy, TemplateMode, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PretrainMode {
    /// Content-only MLM.
    #[serde(rename = "BIBERT")]
    Bibert,
    /// MLM over the concatenated aspect + content template, one shared ratio.
    #[serde(rename = "BIBERT_C")]
    BibertC,
    /// As `BibertC` with a separate (higher) aspect ratio.
    #[serde(rename = "BIBERT_C_A")]
    BibertCA,
    /// Content-only MLM plus aspect-value classification on CLS.
    #[serde(rename = "MTBERT")]
    Mtbert,
    /// Concatenated MLM plus aspect-value classification on CLS.
    #[serde(rename = "MTBERT_C")]
    MtbertC,
    /// Aspect-content mutual prediction.
    #[serde(rename = "ATTEMPT")]
    Attempt,
}

impl PretrainMode {
    pub const ALL: [PretrainMode; 6] = [
        PretrainMode::Bibert,
        PretrainMode::BibertC,
        PretrainMode::BibertCA,
        PretrainMode::Mtbert,
        PretrainMode::MtbertC,
        PretrainMode::Attempt,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PretrainMode::Bibert => "BIBERT",
            PretrainMode::BibertC => "BIBERT_C",
            PretrainMode::BibertCA => "BIBERT_C_A",
            PretrainMode::Mtbert => "MTBERT",
            PretrainMode::MtbertC => "MTBERT_C",
            PretrainMode::Attempt => "ATTEMPT",
        }
    }

    /// Whether item aspect text is part of the encoder input.
    pub fn uses_aspect_text(self) -> bool {
        !matches!(self, PretrainMode::Bibert | PretrainMode::Mtbert)
    }

    pub fn uses_classification(self) -> bool {
        matches!(self, PretrainMode::Mtbert | PretrainMode::MtbertC)
    }
}

impl fmt::Display for PretrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for PretrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PretrainMode::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown pre-training mode `{s}`")))
    }
}

/// Loss terms a scheme can combine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Mlm,
    A2c,
    C2a,
    Joint,
    AspectClassification,
}

impl Component {
    pub fn as_str(self) -> &'static str {
        match self {
            Component::Mlm => "mlm",
            Component::A2c => "a2c",
            Component::C2a => "c2a",
            Component::Joint => "joint",
            Component::AspectClassification => "cls",
        }
    }

    fn stream_tag(self) -> u64 {
        match self {
            Component::Mlm => 0x6d6c6d,
            Component::A2c => 0x613263,
            Component::C2a => 0x633261,
            Component::Joint => 0x6a6f696e74,
            Component::AspectClassification => 0x636c73,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainScheme {
    pub mode: PretrainMode,
    pub content_mask_ratio_item: f64,
    pub content_mask_ratio_query: f64,
    pub aspect_mask_ratio: f64,
    pub lambda_weight: f64,
    pub replacement: ReplacementPolicy,
    /// Components removed from the objective (loss ablations).
    pub disabled: Vec<Component>,
}

impl Default for PretrainScheme {
    fn default() -> Self {
        Self::for_mode(PretrainMode::Attempt)
    }
}

/// One corrupted input and the loss computed on it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct View {
    pub component: Component,
    pub template: TemplateMode,
    pub masking: MaskingScheme,
    pub weight: f64,
}

impl PretrainScheme {
    pub fn for_mode(mode: PretrainMode) -> Self {
        Self {
            mode,
            content_mask_ratio_item: 0.15,
            content_mask_ratio_query: 0.3,
            aspect_mask_ratio: 0.6,
            lambda_weight: 1.0,
            replacement: ReplacementPolicy::Bert,
            disabled: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for r in [
            self.content_mask_ratio_item,
            self.content_mask_ratio_query,
            self.aspect_mask_ratio,
        ] {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::Config(format!("mask ratio {r} outside [0, 1]")));
            }
        }
        if !(self.lambda_weight >= 0.0) || !self.lambda_weight.is_finite() {
            return Err(Error::Config(format!("lambda {} must be a finite non-negative number", self.lambda_weight)));
        }
        Ok(())
    }

    pub fn content_ratio(&self, kind: RecordKind) -> f64 {
        match kind {
            RecordKind::Item => self.content_mask_ratio_item,
            RecordKind::Query => self.content_mask_ratio_query,
        }
    }

    /// Template for item-side encoding at fine-tuning and retrieval time.
    pub fn item_template(&self) -> TemplateMode {
        if self.mode.uses_aspect_text() {
            TemplateMode::WithAspects
        } else {
            TemplateMode::ContentOnly
        }
    }

    pub fn is_enabled(&self, c: Component) -> bool {
        !self.disabled.contains(&c)
    }

    /// Views the mode trains on for a record of `kind`, with their weights.
    pub fn views(&self, kind: RecordKind) -> Vec<View> {
        let rc = self.content_ratio(kind);
        let ra = self.aspect_mask_ratio;
        let policy = self.replacement;
        let view = |component, template, content_ratio, aspect_ratio, weight| View {
            component,
            template,
            masking: MaskingScheme {
                content_ratio,
                aspect_ratio,
                policy,
            },
            weight,
        };
        let all = match self.mode {
            PretrainMode::Bibert | PretrainMode::Mtbert => {
                vec![view(Component::Mlm, TemplateMode::ContentOnly, rc, 0.0, 1.0)]
            }
            PretrainMode::BibertC | PretrainMode::MtbertC => {
                vec![view(Component::Joint, TemplateMode::WithAspects, rc, rc, 1.0)]
            }
            PretrainMode::BibertCA => vec![view(Component::Joint, TemplateMode::WithAspects, rc, ra, 1.0)],
            PretrainMode::Attempt => {
                let lambda = self.lambda_weight;
                vec![
                    view(Component::Mlm, TemplateMode::ContentOnly, rc, 0.0, 1.0),
                    view(Component::A2c, TemplateMode::WithAspects, rc, 0.0, lambda),
                    view(Component::C2a, TemplateMode::WithAspects, 0.0, ra, lambda),
                ]
            }
        };
        all.into_iter().filter(|v| self.is_enabled(v.component)).collect()
    }
}

/// Everything needed to turn a record into encoder inputs.
#[derive(Debug, Clone, Copy)]
pub struct LossContext<'a> {
    pub schema: &'a AspectSchema,
    pub vocab: &'a Vocabulary,
    pub max_len: usize,
}

/// Deterministic random stream for one view of one record. Streams for
/// different components are independent, so adding or removing a view never
/// shifts the draws of another.
pub fn view_rng(base_seed: u64, component: Component) -> ChaCha8Rng {
    let mut s = base_seed ^ component.stream_tag().wrapping_mul(0x9e37_79b9_7f4a_7c15);
    // splitmix64 finalizer
    s = (s ^ (s >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    s = (s ^ (s >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    ChaCha8Rng::seed_from_u64(s ^ (s >> 31))
}

/// Encoder pass plus masked-token loss for one view.
pub struct ViewOutput {
    pub encoded: Encoded,
    pub plan: MaskingPlan,
    /// `None` when the plan selected nothing.
    pub loss: Option<NodeId>,
}

/// Mean NLL of `plan.labels` at `plan.positions` given the corrupted input.
pub fn masked_token_loss<T: Float>(
    g: &mut Graph<T>,
    model: &Model<T>,
    encoded: &Encoded,
    plan: &MaskingPlan,
) -> Result<Option<NodeId>> {
    if plan.is_empty() {
        return Ok(None);
    }
    let logits = model.mlm_logits(g, encoded.states, &plan.positions)?;
    g.cross_entropy(logits, &plan.labels).map(Some)
}

/// Templates, corrupts and encodes `record` for `view`. Masking draws come
/// first from `rng`; dropout (when `train`) continues on the same stream.
pub fn run_view<T: Float>(
    g: &mut Graph<T>,
    model: &Model<T>,
    record: &Record,
    ctx: &LossContext<'_>,
    view: &View,
    rng: &mut dyn RngCore,
    train: bool,
) -> Result<ViewOutput> {
    let input = build_input(record, ctx.schema, ctx.vocab, view.template, ctx.max_len)?;
    let (corrupted, plan) = sample_masking(&input, &view.masking, ctx.vocab, rng)?;
    let encoded = model.encode(g, &corrupted, if train { Some(rng) } else { None })?;
    let loss = masked_token_loss(g, model, &encoded, &plan)?;
    Ok(ViewOutput { encoded, plan, loss })
}

/// Sum over aspects with a value of the cross-entropy between head `j`'s
/// logits on `cls` and the value's class id.
pub fn aspect_classification_loss<T: Float>(
    g: &mut Graph<T>,
    model: &Model<T>,
    cls: NodeId,
    record: &Record,
    schema: &AspectSchema,
) -> Result<Option<NodeId>> {
    let mut terms = Vec::new();
    for (j, name) in schema.names().iter().enumerate() {
        let value = record.aspect(name);
        if value.is_empty() {
            continue;
        }
        let class = schema.class_id(j, value).ok_or_else(|| Error::UnknownAspectValue {
            aspect: name.clone(),
            value: value.to_string(),
        })?;
        let logits = model.head_logits(g, cls, j)?;
        terms.push((g.cross_entropy(logits, &[class])?, T::one()));
    }
    if terms.is_empty() {
        return Ok(None);
    }
    g.weighted_sum(&terms).map(Some)
}

/// Per-component values of one record's objective.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossBreakdown {
    pub mlm: Option<f64>,
    pub a2c: Option<f64>,
    pub c2a: Option<f64>,
    pub joint: Option<f64>,
    pub cls: Option<f64>,
    pub total: f64,
}

impl LossBreakdown {
    fn set(&mut self, c: Component, v: f64) {
        let slot = match c {
            Component::Mlm => &mut self.mlm,
            Component::A2c => &mut self.a2c,
            Component::C2a => &mut self.c2a,
            Component::Joint => &mut self.joint,
            Component::AspectClassification => &mut self.cls,
        };
        *slot = Some(v);
    }

    pub fn get(&self, c: Component) -> Option<f64> {
        match c {
            Component::Mlm => self.mlm,
            Component::A2c => self.a2c,
            Component::C2a => self.c2a,
            Component::Joint => self.joint,
            Component::AspectClassification => self.cls,
        }
    }
}

/// Builds the scheme's full objective for one record on `g`.
///
/// Each view draws from [`view_rng`]`(base_seed, component)`. Returns the
/// total-loss node (`None` if no term was active) and the component values.
pub fn build_objective<T: Float>(
    g: &mut Graph<T>,
    model: &Model<T>,
    record: &Record,
    ctx: &LossContext<'_>,
    scheme: &PretrainScheme,
    base_seed: u64,
    train: bool,
) -> Result<(Option<NodeId>, LossBreakdown)> {
    let mut terms: Vec<(NodeId, T)> = Vec::new();
    let mut breakdown = LossBreakdown::default();
    let mut first_cls = None;
    for view in scheme.views(record.kind) {
        let mut rng = view_rng(base_seed, view.component);
        let out = run_view(g, model, record, ctx, &view, &mut rng, train)?;
        first_cls.get_or_insert(out.encoded.cls);
        let value = out.loss.map_or(0.0, |l| g.value(l).item().to_f64().unwrap_or(f64::NAN));
        breakdown.set(view.component, value);
        if let Some(l) = out.loss {
            terms.push((l, T::of(view.weight)));
        }
    }
    if scheme.mode.uses_classification() && scheme.is_enabled(Component::AspectClassification) {
        if let Some(cls) = first_cls {
            let loss = aspect_classification_loss(g, model, cls, record, ctx.schema)?;
            let value = loss.map_or(0.0, |l| g.value(l).item().to_f64().unwrap_or(f64::NAN));
            breakdown.set(Component::AspectClassification, value);
            if let Some(l) = loss {
                terms.push((l, T::one()));
            }
        }
    }
    if terms.is_empty() {
        return Ok((None, breakdown));
    }
    let total = g.weighted_sum(&terms)?;
    breakdown.total = g.value(total).item().to_f64().unwrap_or(f64::NAN);
    Ok((Some(total), breakdown))
}

/// Objective value and parameter gradients for one record.
pub fn objective_grads<T: Float>(
    model: &Model<T>,
    record: &Record,
    ctx: &LossContext<'_>,
    scheme: &PretrainScheme,
    base_seed: u64,
    train: bool,
) -> Result<(LossBreakdown, ParamGrads<T>)> {
    let mut g = Graph::new(model.params());
    let (total, breakdown) = build_objective(&mut g, model, record, ctx, scheme, base_seed, train)?;
    let mut grads = ParamGrads::for_store(model.params());
    if let Some(total) = total {
        g.backward(total, None, &mut grads)?;
    }
    Ok((breakdown, grads))
}

fn single_view_loss<T: Float>(
    model: &Model<T>,
    record: &Record,
    ctx: &LossContext<'_>,
    view: View,
    rng: &mut dyn RngCore,
) -> Result<T> {
    let mut g = Graph::new(model.params());
    let out = run_view(&mut g, model, record, ctx, &view, rng, false)?;
    Ok(out.loss.map_or(T::zero(), |l| g.value(l).item()))
}

fn make_view(component: Component, template: TemplateMode, content: f64, aspect: f64, policy: ReplacementPolicy) -> View {
    View {
        component,
        template,
        masking: MaskingScheme {
            content_ratio: content,
            aspect_ratio: aspect,
            policy,
        },
        weight: 1.0,
    }
}

/// Content MLM on the blank-aspect template (dropout off).
pub fn content_mlm_loss<T: Float>(
    model: &Model<T>,
    record: &Record,
    ctx: &LossContext<'_>,
    scheme: &PretrainScheme,
    rng: &mut dyn RngCore,
) -> Result<T> {
    let view = make_view(Component::Mlm, TemplateMode::ContentOnly, scheme.content_ratio(record.kind), 0.0, scheme.replacement);
    single_view_loss(model, record, ctx, view, rng)
}

/// Content tokens masked, aspect text fully visible.
pub fn a2c_loss<T: Float>(
    model: &Model<T>,
    record: &Record,
    ctx: &LossContext<'_>,
    scheme: &PretrainScheme,
    rng: &mut dyn RngCore,
) -> Result<T> {
    let view = make_view(Component::A2c, TemplateMode::WithAspects, scheme.content_ratio(record.kind), 0.0, scheme.replacement);
    single_view_loss(model, record, ctx, view, rng)
}

/// Aspect tokens masked, content fully visible.
pub fn c2a_loss<T: Float>(
    model: &Model<T>,
    record: &Record,
    ctx: &LossContext<'_>,
    scheme: &PretrainScheme,
    rng: &mut dyn RngCore,
) -> Result<T> {
    let view = make_view(Component::C2a, TemplateMode::WithAspects, 0.0, scheme.aspect_mask_ratio, scheme.replacement);
    single_view_loss(model, record, ctx, view, rng)
}

/// One corrupted view masking content and aspects together.
pub fn joint_mlm_loss<T: Float>(
    model: &Model<T>,
    record: &Record,
    ctx: &LossContext<'_>,
    content_ratio: f64,
    aspect_ratio: f64,
    policy: ReplacementPolicy,
    rng: &mut dyn RngCore,
) -> Result<T> {
    let view = make_view(Component::Joint, TemplateMode::WithAspects, content_ratio, aspect_ratio, policy);
    single_view_loss(model, record, ctx, view, rng)
}

/// `mlm + λ (a2c + c2a)`.
pub fn combine_overall(mlm: f64, a2c: f64, c2a: f64, lambda: f64) -> f64 {
    mlm + lambda * (a2c + c2a)
}

/// `L_mlm + λ (L_a2c + L_c2a)` from three views drawn in that order from
/// `rng` (dropout off).
pub fn overall_loss<T: Float>(
    model: &Model<T>,
    record: &Record,
    ctx: &LossContext<'_>,
    scheme: &PretrainScheme,
    rng: &mut dyn RngCore,
) -> Result<T> {
    let mlm = content_mlm_loss(model, record, ctx, scheme, rng)?;
    let a2c = a2c_loss(model, record, ctx, scheme, rng)?;
    let c2a = c2a_loss(model, record, ctx, scheme, rng)?;
    Ok(mlm + T::of(scheme.lambda_weight) * (a2c + c2a))
}

/// Aspect classification on the dropout-free CLS of `template`'s input.
pub fn aspect_classification_value<T: Float>(
    model: &Model<T>,
    record: &Record,
    ctx: &LossContext<'_>,
    template: TemplateMode,
) -> Result<T> {
    let mut g = Graph::new(model.params());
    let input = build_input(record, ctx.schema, ctx.vocab, template, ctx.max_len)?;
    let enc = model.encode(&mut g, &input, None)?;
    let loss = aspect_classification_loss(&mut g, model, enc.cls, record, ctx.schema)?;
    Ok(loss.map_or(T::zero(), |l| g.value(l).item()))
}

/// In-batch contrastive loss: `scores = Q · Cᵀ`, cross-entropy of row `i`
/// against candidate `targets[i]`, averaged over queries.
pub fn contrastive_loss_node<T: Float>(
    g: &mut Graph<T>,
    queries: NodeId,
    candidates: NodeId,
    targets: &[usize],
) -> Result<NodeId> {
    if g.value(candidates).rows() == 0 {
        return Err(Error::Invalid("contrastive loss needs at least one candidate".into()));
    }
    let scores = g.matmul_t(queries, false, candidates, true)?;
    g.cross_entropy(scores, targets)
}

/// Softmax cross-entropy of the positive against the positive plus all
/// negatives, scored by dot product.
pub fn contrastive_loss<T: Float>(query: &[T], positive: &[T], negatives: &[&[T]]) -> Result<T> {
    let d = query.len();
    if positive.len() != d || negatives.iter().any(|n| n.len() != d) {
        return Err(Error::shape("contrastive_loss", "embedding dimensions differ"));
    }
    let params = crate::neural::ParamStore::new();
    let mut g = Graph::new(&params);
    let q = g.leaf(Tensor::row_vector(query.to_vec()))?;
    let mut rows = positive.to_vec();
    for n in negatives {
        rows.extend_from_slice(n);
    }
    let c = g.leaf(Tensor::new(1 + negatives.len(), d, rows)?)?;
    let loss = contrastive_loss_node(&mut g, q, c, &[0])?;
    Ok(g.value(loss).item())
}
