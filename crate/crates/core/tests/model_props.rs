mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use slidewin::model::{
    backward, context_vector, forward, init_params, next_item_logits, nll_loss, rank_items, softmax, Gradients,
    ModelConfig, ModelParams,
};
use slidewin::training::batch_gradient;

fn params_and_window(seed: u64, m: usize, d: usize, n: usize, scale: f64) -> (ModelParams, Vec<u32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = common::random_params(&mut rng, m, d, scale);
    let window = (0..n).map(|_| rand::Rng::random_range(&mut rng, 0..m as u32)).collect();
    (params, window)
}

#[test]
fn uniform_embeddings_give_unit_context_for_any_decay() {
    for logit in [-6.0, -1.0, 0.0, 2.0, 8.0] {
        let mut p = ModelParams::zeros(5, 3);
        p.embeddings.iter_mut().for_each(|v| *v = 1.0);
        p.decay_logit = logit;
        let c = context_vector(&p, &[0, 4, 2, 2, 1, 3]).unwrap();
        assert!(c.iter().all(|v| (v - 1.0).abs() < 1e-12), "{c:?}");
    }
}

#[test]
fn empty_or_out_of_range_inputs_are_rejected() {
    let p = ModelParams::zeros(4, 2);
    assert!(context_vector(&p, &[]).is_err());
    assert!(forward(&p, &[1]).is_err());
    assert!(forward(&p, &[1, 4]).is_err());
    assert!(backward(&p, &[0]).is_err());
    let logits = forward(&p, &[0, 1, 2]).unwrap();
    assert!(nll_loss(&logits, &[1]).is_err());
    assert!(nll_loss(&logits, &[1, 9]).is_err());
}

#[test]
fn init_is_seeded_and_scaled() {
    let cfg = ModelConfig { num_items: 30, dim: 4, decay_init: 1.5, init_scale: 0.2 };
    let a = init_params(&cfg, 3).unwrap();
    assert!(common::same_bits(&a, &init_params(&cfg, 3).unwrap()));
    assert_ne!(a, init_params(&cfg, 4).unwrap());
    assert_eq!(a.decay_logit, 1.5);
    assert!(a.bias.iter().all(|&b| b == 0.0));
    assert!(a.embeddings.iter().all(|v| v.abs() <= 0.2));
    let zero = init_params(&ModelConfig { init_scale: 0.0, ..cfg }, 3).unwrap();
    assert!(zero.embeddings.iter().all(|&v| v == 0.0));
    assert!(init_params(&ModelConfig { num_items: 1, ..cfg }, 3).is_err());
    assert!(init_params(&ModelConfig { dim: 0, ..cfg }, 3).is_err());
}

#[test]
fn model_file_round_trips_bitwise() {
    let (p, _) = params_and_window(5, 17, 6, 2, 0.7);
    let back = ModelParams::from_bytes(&p.to_bytes()).unwrap();
    assert!(common::same_bits(&p, &back));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.bin");
    p.save(&path).unwrap();
    assert!(common::same_bits(&p, &ModelParams::load(&path).unwrap()));
    let bytes = p.to_bytes();
    assert!(ModelParams::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    assert!(ModelParams::from_bytes(b"not a model").is_err());
}

#[test]
fn batch_gradient_is_the_position_weighted_mean() {
    let (p, _) = params_and_window(8, 9, 3, 2, 0.5);
    let windows: Vec<Vec<u32>> = (0..21)
        .map(|i| params_and_window(100 + i, 9, 3, 2 + (i as usize % 7), 0.5).1)
        .collect();
    let slices: Vec<&[u32]> = windows.iter().map(Vec::as_slice).collect();
    let mut out = Gradients::zeros_like(&p);
    let (loss, positions) = batch_gradient(&p, &slices, &mut out);
    let mut expected = Gradients::zeros_like(&p);
    let mut expected_loss = 0.0;
    for w in &windows {
        let (mut g, l) = backward(&p, w).unwrap();
        let n = (w.len() - 1) as f64;
        g.scale(n);
        expected.add_assign(&g);
        expected_loss += l * n;
    }
    assert_eq!(positions, windows.iter().map(|w| w.len() - 1).sum::<usize>());
    expected.scale(1.0 / positions as f64);
    assert!((loss - expected_loss).abs() < 1e-9 * expected_loss);
    let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12);
    assert!(close(&out.embeddings, &expected.embeddings));
    assert!(close(&out.bias, &expected.bias));
    assert!((out.decay_logit - expected.decay_logit).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_is_a_distribution(logits in prop::collection::vec(-700.0f64..700.0, 1..300)) {
        let p = softmax(&logits);
        prop_assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn logits_and_loss_match_the_direct_definition(
        seed in any::<u64>(), m in 2usize..25, d in 1usize..9, n in 2usize..30,
    ) {
        let (p, w) = params_and_window(seed, m, d, n, 1.0);
        let logits = forward(&p, &w).unwrap();
        let mut oracle_nll = 0.0;
        for t in 0..n - 1 {
            let direct = common::logits(&p, &common::context(&p, &w[..=t]));
            for (a, b) in logits.row(t).iter().zip(&direct) {
                prop_assert!((a - b).abs() < 1e-10);
            }
            let single = next_item_logits(&p, &w[..=t]).unwrap();
            prop_assert!(single.iter().zip(&direct).all(|(a, b)| (a - b).abs() < 1e-10));
            oracle_nll -= common::log_prob(&direct, w[t + 1]);
        }
        oracle_nll /= (n - 1) as f64;
        let nll = nll_loss(&logits, &w[1..]).unwrap();
        prop_assert!((nll - oracle_nll).abs() < 1e-10, "{} vs {}", nll, oracle_nll);
        let (_, loss) = backward(&p, &w).unwrap();
        prop_assert!((loss - nll).abs() < 1e-10);
    }

    #[test]
    fn gradients_match_finite_differences(seed in any::<u64>(), m in 2usize..8, d in 1usize..4, n in 2usize..7) {
        let (p, w) = params_and_window(seed, m, d, n, 0.8);
        // Windows of one repeated item make the decay gradient exactly zero while the
        // central difference returns roundoff near 1e-11, so the floor sits above that.
        let err = common::worst_fd_error(&p, &w, 1e-5, 1e-6);
        prop_assert!(err < 1e-4, "relative error {}", err);
    }

    #[test]
    fn ranking_matches_a_full_sort(seed in any::<u64>(), n in 1usize..10, ties in any::<bool>()) {
        let (mut p, w) = params_and_window(seed, 12, 3, n, 1.0);
        if ties {
            p.embeddings.iter_mut().for_each(|v| *v = 0.0);
            p.bias.iter_mut().enumerate().for_each(|(i, b)| *b = (i % 3) as f64);
        }
        let ranked = rank_items(&p, &w).unwrap();
        let scores = common::logits(&p, &common::context(&p, &w));
        for (pos, &item) in ranked.iter().enumerate() {
            prop_assert_eq!(common::rank(&scores, item), pos + 1);
        }
    }
}

