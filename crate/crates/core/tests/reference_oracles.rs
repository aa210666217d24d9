//! Cross-implementation oracles: the tape-based cached forward pass against
//! an independent straight-line masked reimplementation, vocabulary
//! permutation symmetry, and Monte-Carlo prediction against quadrature.

mod common;

use std::collections::BTreeMap;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use varlm::bayes::PredictiveMode;
use varlm::eval::sentence_logprob;
use varlm::model::{Model, ModelConfig, Param};
use varlm::tensor::Tensor;

use common::{materialized_weights, quadrature_sentence_logprob, reference_forward};

fn cfg(n_blocks: usize, d_model: usize, d_ff: usize, n_heads: usize, vocab: usize) -> ModelConfig {
    ModelConfig {
        n_blocks,
        d_model,
        d_ff,
        n_heads,
        vocab_size: vocab,
        max_len: 16,
        dropout_rate: 0.0,
        tie_embeddings: false,
    }
}

#[test]
fn cached_forward_matches_straight_line_reimplementation() {
    // the spec'd tiny case: 1 block, d_model 4, 2 heads, plus a deeper one
    let cases = vec![(cfg(1, 4, 8, 2, 7), 41u64), (cfg(3, 8, 12, 4, 11), 42u64)];
    for (cfg, seed) in cases {
        let model = Model::init(cfg.clone(), seed).unwrap();
        let weights = materialized_weights(&model);
        for tokens in [vec![0u32, 1, 2], vec![3, 3, 1, 0, 2, 1]] {
            let tokens: Vec<u32> =
                tokens.iter().map(|&t| t % cfg.vocab_size as u32).collect();
            let got = model.logits_mean(&tokens).unwrap();
            let want = reference_forward(&cfg, &weights, model.positional_table(), &tokens);
            for (t, row) in want.iter().enumerate() {
                for (j, &w) in row.iter().enumerate() {
                    let g = got.at(t, j);
                    assert!(
                        (g - w).abs() < 1e-10,
                        "blocks={} t={t} j={j}: {g} vs {w}",
                        cfg.n_blocks
                    );
                }
            }
        }
    }
}

#[test]
fn tied_embedding_forward_matches_reference() {
    let mut c = cfg(1, 4, 6, 2, 9);
    c.tie_embeddings = true;
    let model = Model::init(c.clone(), 77).unwrap();
    let weights = materialized_weights(&model);
    let tokens = [1u32, 4, 8, 0];
    let got = model.logits_mean(&tokens).unwrap();
    let want = reference_forward(&c, &weights, model.positional_table(), &tokens);
    for (t, row) in want.iter().enumerate() {
        for (j, &w) in row.iter().enumerate() {
            assert!((got.at(t, j) - w).abs() < 1e-10);
        }
    }
}

#[test]
fn vocabulary_permutation_permutes_logits() {
    let c = cfg(1, 4, 6, 2, 6);
    let model = Model::init(c.clone(), 13).unwrap();
    // permutation of vocabulary ids
    let perm: Vec<usize> = vec![2, 0, 4, 5, 1, 3];
    let mut params = model.params.clone();
    let emb = match &model.params["emb"] {
        Param::Det(t) => t.clone(),
        _ => unreachable!(),
    };
    let out = match &model.params["out"] {
        Param::Det(t) => t.clone(),
        _ => unreachable!(),
    };
    let d = c.d_model;
    let v = c.vocab_size;
    // permuted embedding rows: new_emb[perm[i]] = emb[i]
    let mut new_emb = vec![0.0; v * d];
    let mut new_out = vec![0.0; d * v];
    for i in 0..v {
        for j in 0..d {
            new_emb[perm[i] * d + j] = emb.data()[i * d + j];
            new_out[j * v + perm[i]] = out.data()[j * v + i];
        }
    }
    params.insert("emb".into(), Param::Det(Tensor::new(vec![v, d], new_emb).unwrap()));
    params.insert("out".into(), Param::Det(Tensor::new(vec![d, v], new_out).unwrap()));
    let permuted = Model::from_parts(c.clone(), params).unwrap();

    let tokens = [0u32, 3, 1, 5];
    let mapped: Vec<u32> = tokens.iter().map(|&t| perm[t as usize] as u32).collect();
    let base = model.logits_mean(&tokens).unwrap();
    let twisted = permuted.logits_mean(&mapped).unwrap();
    for t in 0..tokens.len() {
        for j in 0..v {
            let a = base.at(t, j);
            let b = twisted.at(t, perm[j]);
            assert!((a - b).abs() < 1e-12, "t={t} j={j}: {a} vs {b}");
        }
    }
}

use common::toy_bayes_model;

#[test]
fn gauss_hermite_rule_reproduces_gaussian_moments() {
    for n in [5usize, 11, 16] {
        let (nodes, weights) = common::gauss_hermite(n);
        let sqrt_pi = std::f64::consts::PI.sqrt();
        let m0: f64 = weights.iter().sum();
        let m2: f64 = nodes.iter().zip(&weights).map(|(&x, &w)| w * x * x).sum();
        let m4: f64 = nodes.iter().zip(&weights).map(|(&x, &w)| w * x.powi(4)).sum();
        assert!((m0 - sqrt_pi).abs() < 1e-12, "n={n} m0={m0}");
        assert!((m2 - sqrt_pi / 2.0).abs() < 1e-12, "n={n} m2={m2}");
        assert!((m4 - 3.0 * sqrt_pi / 4.0).abs() < 1e-11, "n={n} m4={m4}");
    }
}

#[test]
fn mc_prediction_converges_to_quadrature() {
    let model = toy_bayes_model();
    let ids = [0u32, 2, 1, 3];
    let quad = quadrature_sentence_logprob(&model, &ids, 11);

    // absolute deviation from the oracle, averaged over independent repeats,
    // is nonincreasing in K
    let mean_abs_dev = |k: usize, reps: usize, seed0: u64| -> f64 {
        let mut acc = 0.0;
        for r in 0..reps {
            let mut rng = ChaCha8Rng::seed_from_u64(seed0 + r as u64);
            let lp =
                sentence_logprob(&model, &ids, PredictiveMode::Mc { k }, None, &mut rng).unwrap();
            acc += (lp - quad).abs();
        }
        acc / reps as f64
    };
    let devs: Vec<f64> =
        [1usize, 10, 100].iter().map(|&k| mean_abs_dev(k, 12, 500)).collect();
    assert!(
        devs[0] >= devs[1] && devs[1] >= devs[2],
        "mean deviations not nonincreasing: {devs:?}"
    );

    // mean mode differs from the integrated predictive on this wide posterior
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mean_lp =
        sentence_logprob(&model, &ids, PredictiveMode::Mean, None, &mut rng).unwrap();
    assert!((mean_lp - quad).abs() > 1e-3, "posterior too narrow to exercise mc");
}

#[test]
fn quadrature_oracle_self_check_on_narrow_posterior() {
    // with sigma -> 0 the integrated predictive collapses to the mean
    let mut model = toy_bayes_model();
    for p in model.params.values_mut() {
        if let Param::Site(s) = p {
            for v in s.log_sigma.data_mut() {
                *v = -8.0;
            }
        }
    }
    let ids = [1u32, 0, 3, 2];
    let quad = quadrature_sentence_logprob(&model, &ids, 11);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mean_lp =
        sentence_logprob(&model, &ids, PredictiveMode::Mean, None, &mut rng).unwrap();
    assert!(
        (quad - mean_lp).abs() < 1e-6,
        "quadrature {quad} vs mean {mean_lp}"
    );
}

#[test]
fn reference_weights_view_matches_mean_materialization() {
    let model = toy_bayes_model();
    let weights = materialized_weights(&model);
    let mats = varlm::bayes::materialize_mean(&model);
    let mut expect = BTreeMap::new();
    for (name, p) in &mats.params {
        if let Param::Det(t) = p {
            expect.insert(name.clone(), t.clone());
        }
    }
    assert_eq!(weights, expect);
}
