#![allow(dead_code)]

use amr_core::corpus::{AspectSchema, Record, RecordKind};
use amr_core::neural::{Model, ModelConfig, ParamGrads};
use amr_core::pipeline::{DataConfig, ExperimentConfig};
use amr_core::corpus::GenConfig;
use amr_core::textproc::{build_vocab, Vocabulary};
use amr_core::training::TrainConfig;

pub fn schema() -> AspectSchema {
    AspectSchema::new(["brand", "category"]).unwrap()
}

/// Six items and three queries over 36 content words plus 6 aspect words,
/// so the vocabulary is exactly 50 entries (8 specials + 42 words).
pub fn tiny_records() -> Vec<Record> {
    let word = |i: usize| format!("w{}", i % 36);
    let mut out = Vec::new();
    for i in 0..6 {
        let content: Vec<String> = (0..9).map(|j| word(6 * i + j)).collect();
        out.push(
            Record::new(format!("i{i}"), RecordKind::Item, content.join(" "))
                .with_aspect("brand", format!("b{} c{}", i % 3, (i + 1) % 3))
                .with_aspect("category", format!("c{} b{}", i % 3, (i + 2) % 3)),
        );
    }
    for i in 0..3 {
        let content: Vec<String> = (0..4).map(|j| word(11 * i + 3 * j)).collect();
        out.push(
            Record::new(format!("q{i}"), RecordKind::Query, content.join(" "))
                .with_aspect("category", format!("c{i}")),
        );
    }
    out
}

pub fn tiny_vocab(records: &[Record]) -> Vocabulary {
    let v = build_vocab(records, 2, 1, 50).unwrap();
    assert_eq!(v.len(), 50);
    v
}

pub fn tiny_config(vocab: &Vocabulary, aspect_classes: Vec<usize>) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab.len(),
        hidden_dim: 8,
        n_layers: 2,
        n_heads: 2,
        ffn_dim: 16,
        max_len: 16,
        dropout_prob: 0.1,
        seed: 11,
        aspect_classes,
    }
}

/// Init weights are tiny; a larger spread keeps every path of the network
/// numerically active for finite differences.
pub fn spread_params(model: &mut Model<f64>, factor: f64) {
    let params = model.params_mut();
    for idx in 0..params.len() {
        let name = params.name(idx).to_string();
        if name.ends_with("gamma") || name.ends_with("beta") {
            continue;
        }
        for v in params.tensor_mut(idx).data_mut() {
            *v *= factor;
        }
    }
}

pub const FD_STEP: f64 = 1e-5;

/// Central differences of an O(1) loss carry about 1e-10 of rounding noise
/// at this step, so a tensor whose true gradient is zero (the attention key
/// bias) would otherwise show noise divided by noise.
pub const GRAD_SCALE_FLOOR: f64 = 1e-4;

/// Per-tensor relative error of analytic gradients against central
/// differences: `‖a − n‖∞ / max(‖a‖∞, ‖n‖∞, GRAD_SCALE_FLOOR)`.
pub struct GradReport {
    pub per_tensor: Vec<(String, f64)>,
}

impl GradReport {
    pub fn worst(&self) -> (String, f64) {
        self.per_tensor
            .iter()
            .cloned()
            .fold((String::new(), 0.0), |acc, x| if x.1 > acc.1 { x } else { acc })
    }
}

pub fn finite_difference_check(
    model: &Model<f64>,
    analytic: &ParamGrads<f64>,
    loss: impl Fn(&Model<f64>) -> f64,
) -> GradReport {
    let mut probe = model.clone();
    let mut per_tensor = Vec::new();
    for idx in 0..model.params().len() {
        let n = model.params().tensor(idx).data().len();
        let (mut diff, mut a_max, mut n_max) = (0.0f64, 0.0f64, 0.0f64);
        for e in 0..n {
            let orig = probe.params().tensor(idx).data()[e];
            probe.params_mut().tensor_mut(idx).data_mut()[e] = orig + FD_STEP;
            let up = loss(&probe);
            probe.params_mut().tensor_mut(idx).data_mut()[e] = orig - FD_STEP;
            let down = loss(&probe);
            probe.params_mut().tensor_mut(idx).data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = analytic.get(idx).map_or(0.0, |g| g.data()[e]);
            diff = diff.max((a - numeric).abs());
            a_max = a_max.max(a.abs());
            n_max = n_max.max(numeric.abs());
        }
        let scale = a_max.max(n_max);
        let rel = diff / scale.max(GRAD_SCALE_FLOOR);
        per_tensor.push((model.params().name(idx).to_string(), rel));
    }
    GradReport { per_tensor }
}

pub fn verdict(pass: bool) -> &'static str {
    if pass {
        "PASS"
    } else {
        "FAIL"
    }
}

/// A small synthetic experiment that runs end to end in seconds.
pub fn small_experiment() -> ExperimentConfig {
    let generator = GenConfig {
        n_categories: 4,
        n_brands: 6,
        words_per_category: 30,
        n_noise_words: 40,
        n_items: 150,
        n_queries: 60,
        content_len_min: 3,
        content_len_max: 6,
        ..GenConfig::default()
    };
    ExperimentConfig {
        name: "small".into(),
        data: DataConfig::Synthetic { generator, seed: 3 },
        model: ModelConfig {
            hidden_dim: 16,
            n_layers: 1,
            n_heads: 2,
            ffn_dim: 32,
            max_len: 20,
            ..ModelConfig::default()
        },
        pretrain: TrainConfig {
            epochs: 2,
            batch_size: 16,
            checkpoint_every_n_epochs: 1,
            ..TrainConfig::default()
        },
        finetune: TrainConfig {
            epochs: 2,
            batch_size: 16,
            learning_rate: 1e-3,
            ..TrainConfig::finetune_default()
        },
        ..ExperimentConfig::default()
    }
}
