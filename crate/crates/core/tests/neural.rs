mod common;

use amr_core::eval::{encode_corpus, Side};
use amr_core::neural::{load_checkpoint, save_checkpoint, Checkpoint, Model};
use amr_core::textproc::{build_input, build_vocab, TemplateMode};
use amr_core::Error;

use common::*;

#[test]
fn padding_does_not_change_the_embedding() {
    let records = tiny_records();
    let vocab = tiny_vocab(&records);
    let schema = schema();
    let model = Model::<f64>::init(tiny_config(&vocab, vec![])).unwrap();
    for r in &records {
        let short = build_input(r, &schema, &vocab, TemplateMode::WithAspects, 16).unwrap();
        let mut long = short.clone();
        long.token_ids.truncate(short.active_len());
        long.roles.truncate(short.active_len());
        long.attention_mask.truncate(short.active_len());
        assert_eq!(model.embed(&short).unwrap(), model.embed(&long).unwrap());
    }
}

#[test]
fn attention_rows_are_distributions_over_real_tokens() {
    let records = tiny_records();
    let vocab = tiny_vocab(&records);
    let model = Model::<f64>::init(tiny_config(&vocab, vec![])).unwrap();
    let input = build_input(&records[7], &schema(), &vocab, TemplateMode::AspectsEmpty, 16).unwrap();
    let maps = model.attention_maps(&input).unwrap();
    assert_eq!(maps.len(), 2);
    for layer in &maps {
        assert_eq!(layer.len(), 2);
        for head in layer {
            assert_eq!(head.cols(), input.active_len());
            for r in 0..head.rows() {
                let sum: f64 = head.row(r).iter().sum();
                assert!((sum - 1.0).abs() < 1e-12);
                assert!(head.row(r).iter().all(|p| *p >= 0.0));
            }
        }
    }
}

#[test]
fn checkpoint_rejects_a_different_vocabulary() {
    let records = tiny_records();
    let vocab = tiny_vocab(&records);
    let other = build_vocab(&records[..3], 2, 1, 50).unwrap();
    let ckpt = Checkpoint {
        model: Model::init(tiny_config(&vocab, vec![3, 3])).unwrap(),
        vocab_fingerprint: vocab.fingerprint().to_string(),
        optimizer: None,
        step: 17,
    };
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&ckpt, dir.path()).unwrap();
    assert_eq!(load_checkpoint(dir.path(), &vocab).unwrap(), ckpt);
    assert!(matches!(load_checkpoint(dir.path(), &other), Err(Error::FingerprintMismatch { .. })));
    assert!(matches!(
        encode_corpus(&ckpt, &other, &schema(), &records, Side::Query),
        Err(Error::FingerprintMismatch { .. })
    ));
}

#[test]
fn f32_and_f64_encoders_agree() {
    let records = tiny_records();
    let vocab = tiny_vocab(&records);
    let wide = Model::<f64>::init(tiny_config(&vocab, vec![])).unwrap();
    let narrow: Model<f32> = wide.cast();
    let input = build_input(&records[0], &schema(), &vocab, TemplateMode::WithAspects, 16).unwrap();
    let a = wide.embed(&input).unwrap();
    let b = narrow.embed(&input).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert!((x - f64::from(*y)).abs() < 1e-4);
    }
}

#[test]
fn changing_one_token_changes_the_states() {
    use rand::{Rng, SeedableRng};
    let records = tiny_records();
    let vocab = tiny_vocab(&records);
    let model = Model::<f64>::init(tiny_config(&vocab, vec![])).unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
    for _ in 0..100 {
        let r = &records[rng.random_range(0..records.len())];
        let input = build_input(r, &schema(), &vocab, TemplateMode::WithAspects, 16).unwrap();
        let pos = rng.random_range(0..input.active_len());
        let mut changed = input.clone();
        let old = changed.token_ids[pos];
        changed.token_ids[pos] = (old + rng.random_range(1..vocab.len())) % vocab.len();
        assert_ne!(model.forward(&input).unwrap().1, model.forward(&changed).unwrap().1);
    }
}

#[test]
fn mlm_logits_of_zero_states_are_the_bias() {
    use amr_core::neural::{Graph, Tensor};
    let records = tiny_records();
    let vocab = tiny_vocab(&records);
    let mut model = Model::<f64>::init(tiny_config(&vocab, vec![])).unwrap();
    let bias = model.params().index_of("mlm.bias").unwrap();
    for (i, v) in model.params_mut().tensor_mut(bias).data_mut().iter_mut().enumerate() {
        *v = i as f64 * 0.01;
    }
    let mut g = Graph::new(model.params());
    let states = g.leaf(Tensor::zeros(4, 8)).unwrap();
    let logits = model.mlm_logits(&mut g, states, &[1, 3]).unwrap();
    for r in 0..2 {
        assert_eq!(g.value(logits).row(r), model.params().tensor(bias).data());
    }
    let none = model.mlm_logits(&mut g, states, &[]).unwrap();
    assert_eq!(g.value(none).shape(), (0, vocab.len()));
    assert!(matches!(model.mlm_logits(&mut g, states, &[4]), Err(Error::PositionOutOfRange { .. })));
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let records = tiny_records();
    let vocab = tiny_vocab(&records);
    let ckpt = Checkpoint {
        model: Model::init(tiny_config(&vocab, vec![])).unwrap(),
        vocab_fingerprint: vocab.fingerprint().to_string(),
        optimizer: None,
        step: 0,
    };
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&ckpt, dir.path()).unwrap();
    let payload = dir.path().join("params.bin");
    let bytes = std::fs::read(&payload).unwrap();

    std::fs::write(&payload, &bytes[..bytes.len() - 4]).unwrap();
    assert!(matches!(load_checkpoint(dir.path(), &vocab), Err(Error::Checkpoint(_))));

    std::fs::write(&payload, &bytes).unwrap();
    let manifest = dir.path().join("manifest.json");
    let text = std::fs::read_to_string(&manifest).unwrap();
    let shrunk = text.replacen("\"shape\": [\n        50,", "\"shape\": [\n        49,", 1);
    assert_ne!(shrunk, text);
    std::fs::write(&manifest, shrunk).unwrap();
    assert!(matches!(load_checkpoint(dir.path(), &vocab), Err(Error::Checkpoint(_))));
}
