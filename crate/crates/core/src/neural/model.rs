//! Pre-norm transformer encoder with learned positions, tied MLM output and
//! optional per-aspect classification heads.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::graph::{Graph, NodeId};
use super::params::ParamStore;
use super::tensor::{Float, Tensor};
use crate::error::{Error, Result};
use crate::textproc::EncoderInput;

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub max_len: usize,
    pub dropout_prob: f64,
    pub seed: u64,
    /// Class count per aspect for the classification heads; empty when the
    /// model has no heads.
    pub aspect_classes: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 0,
            hidden_dim: 64,
            n_layers: 2,
            n_heads: 4,
            ffn_dim: 256,
            max_len: 32,
            dropout_prob: 0.1,
            seed: 0,
            aspect_classes: Vec::new(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.hidden_dim == 0 || self.n_layers == 0 || self.ffn_dim == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.n_heads == 0 || self.hidden_dim % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "hidden_dim {} is not divisible by n_heads {}",
                self.hidden_dim, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_prob) {
            return Err(Error::Config(format!("dropout_prob {} outside [0, 1)", self.dropout_prob)));
        }
        if self.max_len < 5 {
            return Err(Error::Config("max_len must leave room for the template".into()));
        }
        if self.aspect_classes.contains(&0) {
            return Err(Error::Config("classification heads need at least one class".into()));
        }
        Ok(())
    }
}

/// Parameter indices of one transformer block.
#[derive(Debug, Clone)]
struct LayerIds {
    ln1: (usize, usize),
    wq: (usize, usize),
    wk: (usize, usize),
    wv: (usize, usize),
    wo: (usize, usize),
    ln2: (usize, usize),
    ffn_in: (usize, usize),
    ffn_out: (usize, usize),
}

#[derive(Debug, Clone)]
struct ParamIds {
    token_emb: usize,
    pos_emb: usize,
    layers: Vec<LayerIds>,
    final_ln: (usize, usize),
    mlm_bias: usize,
    heads: Vec<usize>,
}

/// Nodes produced by one encoder pass.
#[derive(Debug, Clone)]
pub struct Encoded {
    /// `1×d` final state at position 0.
    pub cls: NodeId,
    /// `L×d` final states over the non-pad prefix.
    pub states: NodeId,
    /// Attention nodes, one per layer.
    pub attention: Vec<NodeId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    config: ModelConfig,
    params: ParamStore<T>,
}

impl<T: Float> Model<T> {
    /// Random initialization from `config.seed`: weights ~ N(0, 0.02²),
    /// biases 0, layer-norm gains 1.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut gauss = |rows: usize, cols: usize| {
            Tensor::from_fn(rows, cols, |_, _| T::of(normal.sample(&mut rng)))
        };
        let d = config.hidden_dim;
        let mut p = ParamStore::new();
        p.insert("embeddings.token", gauss(config.vocab_size, d))?;
        p.insert("embeddings.position", gauss(config.max_len, d))?;
        for l in 0..config.n_layers {
            p.insert(format!("layer{l}.ln1.gamma"), Tensor::full(1, d, T::one()))?;
            p.insert(format!("layer{l}.ln1.beta"), Tensor::zeros(1, d))?;
            for w in ["q", "k", "v", "o"] {
                p.insert(format!("layer{l}.attn.w{w}"), gauss(d, d))?;
                p.insert(format!("layer{l}.attn.b{w}"), Tensor::zeros(1, d))?;
            }
            p.insert(format!("layer{l}.ln2.gamma"), Tensor::full(1, d, T::one()))?;
            p.insert(format!("layer{l}.ln2.beta"), Tensor::zeros(1, d))?;
            p.insert(format!("layer{l}.ffn.w1"), gauss(d, config.ffn_dim))?;
            p.insert(format!("layer{l}.ffn.b1"), Tensor::zeros(1, config.ffn_dim))?;
            p.insert(format!("layer{l}.ffn.w2"), gauss(config.ffn_dim, d))?;
            p.insert(format!("layer{l}.ffn.b2"), Tensor::zeros(1, d))?;
        }
        p.insert("final_ln.gamma", Tensor::full(1, d, T::one()))?;
        p.insert("final_ln.beta", Tensor::zeros(1, d))?;
        p.insert("mlm.bias", Tensor::zeros(1, config.vocab_size))?;
        for (j, &classes) in config.aspect_classes.iter().enumerate() {
            p.insert(format!("cls_head.{j}"), gauss(d, classes))?;
        }
        Ok(Self { config, params: p })
    }

    /// Wraps existing parameters after checking names and shapes against a
    /// freshly initialized layout.
    pub fn from_parts(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        let reference = Model::<T>::init(config.clone())?;
        if reference.params.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                reference.params.len(),
                params.len()
            )));
        }
        for ((name, t), (rname, rt)) in params.iter().zip(reference.params.iter()) {
            if name != rname || t.shape() != rt.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` {:?} does not match expected `{rname}` {:?}",
                    t.shape(),
                    rt.shape()
                )));
            }
            if !t.is_finite() {
                return Err(Error::Checkpoint(format!("parameter `{name}` is not finite")));
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore<T> {
        self.params
    }

    pub fn cast<U: Float>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    pub fn has_heads(&self) -> bool {
        !self.config.aspect_classes.is_empty()
    }

    fn ids(&self) -> ParamIds {
        let p = &self.params;
        let idx = |n: &str| p.index_of(n).expect("layout is fixed at init");
        let pair = |a: String, b: String| (idx(&a), idx(&b));
        let layers = (0..self.config.n_layers)
            .map(|l| LayerIds {
                ln1: pair(format!("layer{l}.ln1.gamma"), format!("layer{l}.ln1.beta")),
                wq: pair(format!("layer{l}.attn.wq"), format!("layer{l}.attn.bq")),
                wk: pair(format!("layer{l}.attn.wk"), format!("layer{l}.attn.bk")),
                wv: pair(format!("layer{l}.attn.wv"), format!("layer{l}.attn.bv")),
                wo: pair(format!("layer{l}.attn.wo"), format!("layer{l}.attn.bo")),
                ln2: pair(format!("layer{l}.ln2.gamma"), format!("layer{l}.ln2.beta")),
                ffn_in: pair(format!("layer{l}.ffn.w1"), format!("layer{l}.ffn.b1")),
                ffn_out: pair(format!("layer{l}.ffn.w2"), format!("layer{l}.ffn.b2")),
            })
            .collect();
        ParamIds {
            token_emb: idx("embeddings.token"),
            pos_emb: idx("embeddings.position"),
            layers,
            final_ln: pair("final_ln.gamma".into(), "final_ln.beta".into()),
            mlm_bias: idx("mlm.bias"),
            heads: (0..self.config.aspect_classes.len())
                .map(|j| idx(&format!("cls_head.{j}")))
                .collect(),
        }
    }

    fn linear(g: &mut Graph<T>, x: NodeId, (w, b): (usize, usize)) -> Result<NodeId> {
        let (w, b) = (g.param(w), g.param(b));
        let h = g.matmul(x, w)?;
        g.add_bias(h, b)
    }

    /// Runs the encoder over the non-pad prefix of `input`. Dropout is applied
    /// only when `dropout_rng` is given.
    pub fn encode(
        &self,
        g: &mut Graph<T>,
        input: &EncoderInput,
        mut dropout_rng: Option<&mut dyn RngCore>,
    ) -> Result<Encoded> {
        if input.len() > self.config.max_len {
            return Err(Error::SequenceTooLong {
                len: input.len(),
                max_len: self.config.max_len,
            });
        }
        let len = input.active_len();
        if len == 0 {
            return Err(Error::Invalid("encoder input has no active tokens".into()));
        }
        let ids = self.ids();
        let p_drop = self.config.dropout_prob;
        let key_mask: Vec<bool> = input.attention_mask[..len].iter().map(|&m| m == 1).collect();
        let positions: Vec<usize> = (0..len).collect();

        let tok_table = g.param(ids.token_emb);
        let pos_table = g.param(ids.pos_emb);
        let tok = g.embedding(tok_table, &input.token_ids[..len])?;
        let pos = g.embedding(pos_table, &positions)?;
        let mut x = g.add(tok, pos)?;
        if let Some(rng) = dropout_rng.as_deref_mut() {
            x = g.dropout(x, p_drop, rng)?;
        }

        let heads = self.config.n_heads;
        let mut attention = Vec::with_capacity(ids.layers.len());
        for layer in &ids.layers {
            let (g1, b1) = (g.param(layer.ln1.0), g.param(layer.ln1.1));
            let h = g.layer_norm(x, g1, b1)?;
            let q = Self::linear(g, h, layer.wq)?;
            let k = Self::linear(g, h, layer.wk)?;
            let v = Self::linear(g, h, layer.wv)?;
            let att = g.attention(q, k, v, heads, &key_mask)?;
            attention.push(att);
            let mut o = Self::linear(g, att, layer.wo)?;
            if let Some(rng) = dropout_rng.as_deref_mut() {
                o = g.dropout(o, p_drop, rng)?;
            }
            x = g.add(x, o)?;

            let (g2, b2) = (g.param(layer.ln2.0), g.param(layer.ln2.1));
            let h = g.layer_norm(x, g2, b2)?;
            let f = Self::linear(g, h, layer.ffn_in)?;
            let f = g.gelu(f)?;
            let mut f = Self::linear(g, f, layer.ffn_out)?;
            if let Some(rng) = dropout_rng.as_deref_mut() {
                f = g.dropout(f, p_drop, rng)?;
            }
            x = g.add(x, f)?;
        }
        let (gf, bf) = (g.param(ids.final_ln.0), g.param(ids.final_ln.1));
        let states = g.layer_norm(x, gf, bf)?;
        let cls = g.select_rows(states, &[0])?;
        Ok(Encoded {
            cls,
            states,
            attention,
        })
    }

    /// `states[positions] · Eᵀ + b`, with `E` the token embedding table.
    pub fn mlm_logits(&self, g: &mut Graph<T>, states: NodeId, positions: &[usize]) -> Result<NodeId> {
        let ids = self.ids();
        let picked = g.select_rows(states, positions)?;
        let table = g.param(ids.token_emb);
        let bias = g.param(ids.mlm_bias);
        let logits = g.matmul_t(picked, false, table, true)?;
        g.add_bias(logits, bias)
    }

    /// Logits of classification head `j` applied to a `1×d` CLS node.
    pub fn head_logits(&self, g: &mut Graph<T>, cls: NodeId, j: usize) -> Result<NodeId> {
        let ids = self.ids();
        let head = *ids.heads.get(j).ok_or_else(|| {
            Error::Invalid(format!("model has no classification head for aspect {j}"))
        })?;
        let w = g.param(head);
        g.matmul(cls, w)
    }

    /// Dropout-free CLS embedding.
    pub fn embed(&self, input: &EncoderInput) -> Result<Vec<T>> {
        let mut g = Graph::new(&self.params);
        let enc = self.encode(&mut g, input, None)?;
        Ok(g.value(enc.cls).data().to_vec())
    }

    /// Dropout-free CLS embedding and final token states.
    pub fn forward(&self, input: &EncoderInput) -> Result<(Vec<T>, Tensor<T>)> {
        let mut g = Graph::new(&self.params);
        let enc = self.encode(&mut g, input, None)?;
        Ok((g.value(enc.cls).data().to_vec(), g.value(enc.states).clone()))
    }

    /// Per-layer, per-head attention probabilities (dropout-free).
    pub fn attention_maps(&self, input: &EncoderInput) -> Result<Vec<Vec<Tensor<T>>>> {
        let mut g = Graph::new(&self.params);
        let enc = self.encode(&mut g, input, None)?;
        Ok(enc
            .attention
            .iter()
            .map(|&a| g.attention_probs(a).expect("attention node").to_vec())
            .collect())
    }
}
