use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn tiny_vocab(n_words: usize) -> Vocab {
    let words: Vec<String> = (0..n_words).map(|i| format!("w{i}")).collect();
    Vocab::build([words.join(" ").as_str()])
}

pub(crate) fn tiny_model(n_words: usize, d_model: usize, n_layers: usize, seed: u64) -> MicroLm {
    let vocab = tiny_vocab(n_words);
    let cfg = LmConfig {
        vocab_size: vocab.len(),
        d_model,
        n_layers,
        n_heads: 2,
        max_seq_len: 16,
        seed,
    };
    let mut m = MicroLm::new(cfg, vocab).unwrap();
    // widen the init so gradients are not vanishingly small
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for p in &mut m.params {
        *p += rng.gen_range(-0.3f32..0.3);
    }
    m
}

/// Scalar test loss: cross-entropy plus a fixed random functional of the
/// hidden states, so both gradient inputs are exercised.
fn probe_loss(model: &MicroLm, tokens: &[usize], weights: &Array2<f64>) -> f64 {
    let trace = model.forward(tokens).unwrap();
    let (ce, _, _) = cross_entropy_grad(&trace.logits, tokens);
    ce + (&trace.hidden * weights).sum()
}

#[test]
fn gradient_matches_central_differences_for_every_parameter() {
    let model = tiny_model(6, 8, 1, 3);
    let tokens = vec![BOS, 5, 7, 6, 9, 8, 5, EOS];
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let hw = Array2::from_shape_fn((tokens.len(), 8), |_| rng.gen_range(-1.0..1.0));

    let trace = model.forward(&tokens).unwrap();
    let (_, dlogits, _) = cross_entropy_grad(&trace.logits, &tokens);
    let grad = model
        .backward(
            &trace,
            &LossGrad {
                logits: Some(dlogits),
                hidden: Some(hw.clone()),
            },
        )
        .unwrap();

    let eps = 1e-4f64;
    let mut worst: (f64, String) = (0.0, String::new());
    for slice in &model.layout().slices {
        for i in slice.range() {
            let mut plus = model.clone();
            let mut minus = model.clone();
            plus.params[i] = (model.params[i] as f64 + eps) as f32;
            minus.params[i] = (model.params[i] as f64 - eps) as f32;
            let step = plus.params[i] as f64 - minus.params[i] as f64;
            let fd = (probe_loss(&plus, &tokens, &hw) - probe_loss(&minus, &tokens, &hw)) / step;
            let a = grad[i];
            let scale = a.abs().max(fd.abs());
            let rel = if scale < 1e-7 { 0.0 } else { (a - fd).abs() / scale };
            if rel > worst.0 {
                worst = (rel, format!("{}[{}] analytic {a:e} numeric {fd:e}", slice.name, i - slice.offset));
            }
        }
    }
    assert!(worst.0 <= 1e-3, "worst relative error {} at {}", worst.0, worst.1);
}

#[test]
fn constant_loss_has_zero_gradient_and_gradient_is_linear() {
    let model = tiny_model(6, 8, 1, 5);
    let tokens = vec![BOS, 5, 6, 7];
    let trace = model.forward(&tokens).unwrap();
    let zero = model.backward(&trace, &LossGrad::zeros(&trace)).unwrap();
    assert!(zero.iter().all(|&g| g == 0.0));

    let (_, dlogits, _) = cross_entropy_grad(&trace.logits, &tokens);
    let lg = LossGrad {
        logits: Some(dlogits),
        hidden: None,
    };
    let g1 = model.backward(&trace, &lg).unwrap();
    let g2 = model.backward(&trace, &lg.clone().scaled(2.0)).unwrap();
    for (a, b) in g1.iter().zip(&g2) {
        assert!((2.0 * a - b).abs() <= 1e-12 * (1.0 + b.abs()));
    }
}

#[test]
fn stale_trace_is_rejected() {
    let mut model = tiny_model(6, 8, 1, 5);
    let trace = model.forward(&[BOS, 5, 6]).unwrap();
    model.params[0] += 0.5;
    assert!(matches!(
        model.backward(&trace, &LossGrad::zeros(&trace)),
        Err(Error::TraceMismatch(_))
    ));
}

#[test]
fn logits_are_causal() {
    let model = tiny_model(8, 8, 2, 1);
    let a = model.forward(&[BOS, 5, 6, 7, 8, 9]).unwrap();
    let b = model.forward(&[BOS, 5, 6, 12, 11, 10]).unwrap();
    for t in 0..3 {
        assert_eq!(a.logits.row(t), b.logits.row(t));
        assert_eq!(a.hidden.row(t), b.hidden.row(t));
    }
    assert_ne!(a.logits.row(3), b.logits.row(3));
}

#[test]
fn distributions_are_normalized_and_deterministic() {
    let model = tiny_model(8, 8, 2, 2);
    let tokens = [BOS, 5, 9, 6, 12];
    let a = model.forward(&tokens).unwrap();
    let b = model.forward(&tokens).unwrap();
    for t in 0..tokens.len() {
        let p = a.probs(t);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!(p.iter().all(|&x| x >= 0.0));
    }
    assert_eq!(a.logits, b.logits);
    assert_eq!(a.hidden.nrows(), tokens.len());
}

#[test]
fn forward_rejects_bad_input() {
    let model = tiny_model(4, 8, 1, 0);
    assert!(matches!(model.forward(&[BOS, 99]), Err(Error::TokenOutOfRange { id: 99, .. })));
    let long = vec![BOS; 17];
    assert!(matches!(model.forward(&long), Err(Error::SequenceTooLong { .. })));
}

#[test]
fn log_prob_single_token_and_chain_rule() {
    let model = tiny_model(6, 8, 1, 4);
    let prefix = [BOS, 5];
    let lp = model.log_prob(&prefix, &[7]).unwrap();
    let trace = model.forward(&prefix).unwrap();
    assert!((lp - trace.probs(1)[7].ln()).abs() < 1e-12);

    let ab = model.log_prob(&prefix, &[7, 8, 6]).unwrap();
    let a = model.log_prob(&prefix, &[7]).unwrap();
    let b = model.log_prob(&[BOS, 5, 7], &[8, 6]).unwrap();
    assert!((ab - (a + b)).abs() < 1e-10);
    assert!(ab <= 0.0);
    assert!(model.log_prob(&prefix, &[]).is_err());
}

#[test]
fn enumerated_continuations_sum_to_one() {
    // vocabulary of exactly five ids: the reserved block with no words
    let vocab = Vocab::build(std::iter::empty::<&str>());
    let cfg = LmConfig {
        vocab_size: vocab.len(),
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        max_seq_len: 8,
        seed: 9,
    };
    assert_eq!(cfg.vocab_size, 5);
    let model = MicroLm::new(cfg, vocab).unwrap();
    let mut total = 0.0;
    for a in 0..5 {
        for b in 0..5 {
            total += model.log_prob(&[BOS], &[a, b]).unwrap().exp();
        }
    }
    assert!((total - 1.0).abs() < 1e-9, "{total}");
}

#[test]
fn greedy_decode_basics() {
    let model = tiny_model(8, 8, 2, 6);
    assert!(model.greedy_decode(&[BOS, 5], 0).unwrap().is_empty());
    let a = model.greedy_decode(&[BOS, 5], 6).unwrap();
    assert_eq!(a, model.greedy_decode(&[BOS, 5], 6).unwrap());
    assert!(a.len() <= 6 && !a.contains(&EOS));
    assert!(model.greedy_decode(&[], 3).is_err());
}

#[test]
fn near_zero_temperature_sampling_equals_greedy() {
    let model = tiny_model(8, 8, 2, 7);
    for seed in 0..10u64 {
        let prompt = [BOS, 5 + (seed as usize % 8)];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sampled = model.sample_decode(&prompt, 6, 1e-6, &mut rng).unwrap();
        assert_eq!(sampled, model.greedy_decode(&prompt, 6).unwrap());
    }
}

#[test]
fn argmax_prefers_lowest_index_on_ties() {
    assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    assert_eq!(argmax(&[0.5]), 0);
}

#[test]
fn embeddings_are_pure_and_pooling_variants_differ() {
    let model = tiny_model(6, 8, 1, 8);
    let a = model.embed("w0 w1 w2").unwrap();
    assert_eq!(a, model.embed("w0 w1 w2").unwrap());
    assert_eq!(a.len(), 8);
    assert!((cosine(&a, &a) - 1.0).abs() < 1e-12);
    let mean = model.embed_with("w0 w1 w2", Pooling::Mean).unwrap();
    assert_ne!(a, mean);
    let one = model.embed_with("w3", Pooling::FinalToken).unwrap();
    assert_eq!(one, model.embed_with("w3", Pooling::Mean).unwrap());
    assert!(model.embed("").is_err());
    assert!(model.embed("?!").is_err());
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let model = tiny_model(6, 8, 2, 10);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    model.save(&path).unwrap();
    let loaded = MicroLm::load(&path).unwrap();
    assert_eq!(loaded, model);
    let tokens = [BOS, 5, 6, 7];
    assert_eq!(model.forward(&tokens).unwrap().logits, loaded.forward(&tokens).unwrap().logits);
    assert_eq!(loaded.vocab.id("w1"), model.vocab.id("w1"));
}

#[test]
fn parameter_count_is_a_function_of_config() {
    let a = tiny_model(6, 8, 2, 1);
    let b = tiny_model(6, 8, 2, 99);
    assert_eq!(a.n_params(), b.n_params());
    let d = 8;
    let v = a.config.vocab_size;
    let per_layer = 4 * d * d + 4 * d + 2 * d * 4 * d + 4 * d + d;
    assert_eq!(a.n_params(), v * d + 16 * d + 2 * per_layer + 2 * d);
    let bad = LmConfig {
        d_model: 10,
        n_heads: 4,
        ..a.config.clone()
    };
    assert!(bad.validate().is_err());
}

fn synthetic_sentences() -> (Vocab, Vec<Vec<usize>>) {
    let subjects = ["cats", "dogs", "birds", "fish", "cows"];
    let verbs = ["eat", "see", "like", "chase", "find"];
    let objects = ["food", "water", "toys", "grass", "light"];
    let mut texts = Vec::new();
    for i in 0..50 {
        texts.push(format!(
            "{} {} {}",
            subjects[i % 5],
            verbs[(i / 5) % 5],
            objects[(i * 3 + i / 5) % 5]
        ));
    }
    let vocab = Vocab::build(texts.iter().map(String::as_str));
    let seqs = texts
        .iter()
        .map(|t| {
            let mut ids = vec![BOS];
            ids.extend(vocab.encode(t));
            ids.push(EOS);
            ids
        })
        .collect();
    (vocab, seqs)
}

fn small_lm(vocab: Vocab, seed: u64) -> MicroLm {
    let cfg = LmConfig {
        vocab_size: vocab.len(),
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        max_seq_len: 16,
        seed,
    };
    MicroLm::new(cfg, vocab).unwrap()
}

#[test]
fn training_reduces_loss_and_is_reproducible() {
    let (vocab, seqs) = synthetic_sentences();
    let cfg = TrainConfig {
        steps: 200,
        lr: 1e-2,
        batch_size: 4,
        seed: 1,
        heldout_fraction: 0.1,
        eval_every: 1,
        ..TrainConfig::default()
    };
    let (m1, log1) = train_lm(small_lm(vocab.clone(), 2), &seqs, &cfg).unwrap();
    let first = log1[0].heldout_loss.unwrap();
    let last = log1.last().unwrap().heldout_loss.unwrap();
    assert!(last < first, "held-out loss {first} -> {last}");
    assert_eq!(log1.len(), 200);
    let (m2, _) = train_lm(small_lm(vocab, 2), &seqs, &cfg).unwrap();
    assert_eq!(m1.params, m2.params);
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let (vocab, seqs) = synthetic_sentences();
    let model = small_lm(vocab, 3);
    let cfg = TrainConfig {
        steps: 5,
        lr: 0.0,
        ..TrainConfig::default()
    };
    let (trained, _) = train_lm(model.clone(), &seqs, &cfg).unwrap();
    assert_eq!(trained.params, model.params);
    let zero_steps = TrainConfig {
        steps: 0,
        ..cfg
    };
    assert!(train_lm(model, &seqs, &zero_steps).is_err());
}
