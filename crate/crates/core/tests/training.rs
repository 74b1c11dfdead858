mod common;

use amr_core::corpus::{generate_synthetic, GenConfig, Label};
use amr_core::objectives::{PretrainMode, PretrainScheme};
use amr_core::textproc::{build_input, build_vocab, Role, TemplateMode};
use amr_core::training::{
    contrastive_batch_grads, finetune, learning_rate_at, pretrain, sample_triples, warmup_steps, FinetuneData, FinetuneOptions, NegativePolicy,
    TrainConfig,
};
use amr_core::{Checkpoint, ModelConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_data() -> amr_core::corpus::SyntheticDataset {
    let cfg = GenConfig {
        n_categories: 4,
        n_brands: 5,
        words_per_category: 20,
        n_noise_words: 30,
        n_items: 80,
        n_queries: 30,
        content_len_min: 3,
        content_len_max: 6,
        ..GenConfig::default()
    };
    generate_synthetic(&cfg, 9).unwrap()
}

fn model_cfg(vocab_size: usize) -> ModelConfig {
    ModelConfig {
        vocab_size,
        hidden_dim: 16,
        n_layers: 1,
        n_heads: 2,
        ffn_dim: 32,
        max_len: 20,
        ..ModelConfig::default()
    }
}

fn train_cfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 8,
        checkpoint_every_n_epochs: 1,
        ..TrainConfig::default()
    }
}

#[test]
fn pretraining_is_deterministic() {
    let data = small_data();
    let vocab = build_vocab(&data.items, 2, 1, 10_000).unwrap();
    let scheme = PretrainScheme::for_mode(PretrainMode::Attempt);
    let a = pretrain(&data.items, &vocab, &data.schema, &model_cfg(vocab.len()), &scheme, &train_cfg(2)).unwrap();
    let b = pretrain(&data.items, &vocab, &data.schema, &model_cfg(vocab.len()), &scheme, &train_cfg(2)).unwrap();
    assert_eq!(a.checkpoints.len(), 2);
    assert_eq!(a.checkpoints.last().unwrap().checkpoint, b.checkpoints.last().unwrap().checkpoint);
    assert_eq!(a.log.lr_trace(), b.log.lr_trace());
}

#[test]
fn zero_lambda_attempt_trains_exactly_like_bibert() {
    let data = small_data();
    let vocab = build_vocab(&data.items, 2, 1, 10_000).unwrap();
    let mut attempt = PretrainScheme::for_mode(PretrainMode::Attempt);
    attempt.lambda_weight = 0.0;
    let bibert = PretrainScheme::for_mode(PretrainMode::Bibert);
    let mc = model_cfg(vocab.len());
    let a = pretrain(&data.items, &vocab, &data.schema, &mc, &attempt, &train_cfg(1)).unwrap();
    let b = pretrain(&data.items, &vocab, &data.schema, &mc, &bibert, &train_cfg(1)).unwrap();
    let (a, b) = (&a.checkpoints[0].checkpoint, &b.checkpoints[0].checkpoint);
    assert_eq!(a.model.params(), b.model.params());
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let data = small_data();
    let vocab = build_vocab(&data.items, 2, 1, 10_000).unwrap();
    let mc = model_cfg(vocab.len());
    let scheme = PretrainScheme::for_mode(PretrainMode::BibertC);
    let cfg = TrainConfig {
        learning_rate: 0.0,
        ..train_cfg(1)
    };
    let out = pretrain(&data.items, &vocab, &data.schema, &mc, &scheme, &cfg).unwrap();
    let fresh = amr_core::Model::<f32>::init(mc).unwrap();
    assert_eq!(out.checkpoints[0].checkpoint.model.params(), fresh.params());
    assert!(out.log.entries.iter().all(|e| e.lr == 0.0));
}

#[test]
fn logged_learning_rates_follow_warmup_then_linear_decay() {
    let data = small_data();
    let vocab = build_vocab(&data.items, 2, 1, 10_000).unwrap();
    let cfg = TrainConfig {
        warmup_fraction: 0.2,
        ..train_cfg(3)
    };
    let scheme = PretrainScheme::for_mode(PretrainMode::Bibert);
    let out = pretrain(&data.items, &vocab, &data.schema, &model_cfg(vocab.len()), &scheme, &cfg).unwrap();
    let trace = out.log.lr_trace();
    let total = 3 * data.items.len().div_ceil(8);
    assert_eq!(trace.len(), total);
    let warm = warmup_steps(total, 0.2);
    for (t, lr) in trace.iter().enumerate() {
        let expected = if t < warm {
            1e-3 * t as f64 / warm as f64
        } else {
            1e-3 * (total - 1 - t) as f64 / (total - 1 - warm) as f64
        };
        assert!((lr - expected).abs() < 1e-15, "step {t}: {lr} vs {expected}");
        assert_eq!(*lr, learning_rate_at(t, total, warm, 1e-3));
    }
    assert_eq!(trace[0], 0.0);
    assert_eq!(*trace.last().unwrap(), 0.0);
    assert!((trace[warm] - 1e-3).abs() < 1e-15);
}

#[test]
fn attempt_loss_falls_over_five_epochs_on_the_default_corpus() {
    for seed in 0..3 {
        let data = generate_synthetic(&GenConfig::default(), seed).unwrap();
        let vocab = build_vocab(&data.items, 2, 1, 30_000).unwrap();
        let scheme = PretrainScheme::for_mode(PretrainMode::Attempt);
        let mc = ModelConfig {
            seed,
            ..model_cfg(vocab.len())
        };
        let cfg = TrainConfig {
            batch_size: 32,
            seed,
            ..train_cfg(5)
        };
        let out = pretrain(&data.items, &vocab, &data.schema, &mc, &scheme, &cfg).unwrap();
        let means = out.log.epoch_means();
        assert_eq!(means.len(), 5);
        assert!(means[4] < means[0], "seed {seed}: {means:?}");
    }
}

#[test]
fn one_pair_batch_is_a_two_way_softmax() {
    let data = small_data();
    let vocab = build_vocab(&data.items, 2, 1, 10_000).unwrap();
    let mut model = amr_core::Model::<f64>::init(model_cfg(vocab.len())).unwrap();
    for idx in 0..model.params().len() {
        model.params_mut().tensor_mut(idx).fill(0.0);
    }
    let build = |r, t| build_input(r, &data.schema, &vocab, t, 20).unwrap();
    let q = [build(&data.queries[0], TemplateMode::AspectsEmpty)];
    let p = [build(&data.items[0], TemplateMode::WithAspects)];
    let n = [build(&data.items[1], TemplateMode::WithAspects)];
    let (loss, _) = contrastive_batch_grads(&model, &q, &p, &n, 0, false).unwrap();
    assert!((loss - 2f64.ln()).abs() < 1e-12);
    let with_aspects = [build(&data.queries[0], TemplateMode::WithAspects)];
    if with_aspects[0].roles.iter().any(|r| matches!(r, Role::Aspect(_))) {
        assert!(contrastive_batch_grads(&model, &with_aspects, &p, &n, 0, false).is_err());
    }
}

#[test]
fn hard_negatives_are_never_exact_matches() {
    let data = small_data();
    let fd = FinetuneData {
        queries: &data.queries,
        items: &data.items,
        qrels: &data.qrels,
    };
    for negatives in [NegativePolicy::JudgedNonExact, NegativePolicy::Random] {
        let opts = FinetuneOptions {
            negatives,
            pairs_per_query: 3,
        };
        let (triples, skipped) = sample_triples(&fd, &opts, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(triples.len() + 3 * skipped, 3 * data.queries.len());
        for t in &triples {
            let q = &data.queries[t.query].id;
            assert_eq!(data.qrels.label(q, &data.items[t.positive].id), Some(Label::E));
            assert_ne!(data.qrels.label(q, &data.items[t.negative].id), Some(Label::E));
        }
    }
}

#[test]
fn finetuning_is_deterministic_and_changes_the_model() {
    let data = small_data();
    let vocab = build_vocab(&data.items, 2, 1, 10_000).unwrap();
    let scheme = PretrainScheme::for_mode(PretrainMode::Attempt);
    let init = pretrain(&data.items, &vocab, &data.schema, &model_cfg(vocab.len()), &scheme, &train_cfg(1))
        .unwrap()
        .checkpoints
        .remove(0)
        .checkpoint;
    let fd = FinetuneData {
        queries: &data.queries,
        items: &data.items,
        qrels: &data.qrels,
    };
    let cfg = train_cfg(2);
    let run = |init: &Checkpoint| {
        finetune(&fd, &vocab, &data.schema, init, scheme.item_template(), &cfg, &FinetuneOptions::default()).unwrap()
    };
    let (a, log) = run(&init);
    let (b, _) = run(&init);
    assert_eq!(a, b);
    assert_ne!(a.model.params(), init.model.params());
    assert!(log.entries.iter().all(|e| e.loss_contrastive.is_some_and(f64::is_finite)));
}
