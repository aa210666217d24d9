//! Test-support oracles, independent of the library's tape machinery.
//!
//! `reference_forward` is a straight-line reimplementation of the decoder
//! stack (full-sequence masked attention, plain loops, no tape) used as the
//! duplicate-implementation oracle. The quadrature helpers integrate a toy
//! Bayesian model's predictive probabilities over its posterior by composite
//! Simpson rule, one axis per site dimension.

use std::collections::BTreeMap;

use varlm::bayes::{promote, BayesConfig, SiteSpec};
use varlm::model::{Model, ModelConfig, Param, LN_EPS};
use varlm::tensor::{Real, Tensor};

/// Toy Bayesian model with exactly two sites of three coordinates each
/// (d_model 3, d_ff 1), small enough for tensor-product quadrature over all
/// six site coordinates. Width 2 would be degenerate: a two-element layer
/// norm collapses the feed-forward path to a sign, which makes the
/// predictive integrand bimodal.
pub fn toy_bayes_model() -> Model {
    let c = ModelConfig {
        n_blocks: 1,
        d_model: 3,
        d_ff: 1,
        n_heads: 1,
        vocab_size: 4,
        max_len: 8,
        dropout_rate: 0.0,
        tie_embeddings: false,
    };
    let det = Model::init(c, 99).unwrap();
    let mut bayes = promote(&det, &BayesConfig::with_sites(vec![SiteSpec::ff(1)]), &det).unwrap();
    // widen the posterior so sampling genuinely matters
    for p in bayes.params.values_mut() {
        if let Param::Site(s) = p {
            for v in s.log_sigma.data_mut() {
                *v = 0.0;
            }
        }
    }
    bayes
}

pub fn phi(x: Real) -> Real {
    0.5 * (1.0 + libm::erf(x as f64 / std::f64::consts::SQRT_2) as Real)
}

fn matvec(x: &[Real], w: &Tensor) -> Vec<Real> {
    let (rows, cols) = (w.rows(), w.cols());
    assert_eq!(x.len(), rows);
    let mut out = vec![0.0; cols];
    for (i, &xi) in x.iter().enumerate() {
        for j in 0..cols {
            out[j] += xi * w.data()[i * cols + j];
        }
    }
    out
}

fn layer_norm_row(x: &[Real], gain: &Tensor, bias: &Tensor) -> Vec<Real> {
    let n = x.len() as Real;
    let mean = x.iter().sum::<Real>() / n;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<Real>() / n;
    let inv = 1.0 / (var + LN_EPS).sqrt();
    x.iter()
        .enumerate()
        .map(|(j, &v)| gain.data()[j] * (v - mean) * inv + bias.data()[j])
        .collect()
}

/// Full-sequence masked forward pass over plain weight tensors; returns one
/// logits row per input position.
pub fn reference_forward(
    cfg: &ModelConfig,
    weights: &BTreeMap<String, Tensor>,
    pe: &Tensor,
    tokens: &[u32],
) -> Vec<Vec<Real>> {
    let d = cfg.d_model;
    let dh = cfg.head_dim();
    let emb = &weights["emb"];
    let mut x: Vec<Vec<Real>> = tokens
        .iter()
        .enumerate()
        .map(|(t, &tok)| {
            (0..d)
                .map(|j| emb.data()[tok as usize * d + j] + pe.data()[t * d + j])
                .collect()
        })
        .collect();

    for b in 0..cfg.n_blocks {
        let wq = &weights[&format!("blocks.{b}.attn.wq")];
        let wk = &weights[&format!("blocks.{b}.attn.wk")];
        let wv = &weights[&format!("blocks.{b}.attn.wv")];
        let wh = &weights[&format!("blocks.{b}.attn.wh")];
        let g1 = &weights[&format!("blocks.{b}.attn.ln_g")];
        let b1 = &weights[&format!("blocks.{b}.attn.ln_b")];
        let w1 = &weights[&format!("blocks.{b}.ff.w1")];
        let w2 = &weights[&format!("blocks.{b}.ff.w2")];
        let g2 = &weights[&format!("blocks.{b}.ff.ln_g")];
        let b2 = &weights[&format!("blocks.{b}.ff.ln_b")];

        let q: Vec<Vec<Real>> = x.iter().map(|r| matvec(r, wq)).collect();
        let k: Vec<Vec<Real>> = x.iter().map(|r| matvec(r, wk)).collect();
        let v: Vec<Vec<Real>> = x.iter().map(|r| matvec(r, wv)).collect();

        let mut next_x = Vec::with_capacity(x.len());
        for t in 0..x.len() {
            let mut merged = vec![0.0; d];
            for h in 0..cfg.n_heads {
                let base = h * dh;
                // masked scores over positions <= t only
                let mut scores: Vec<Real> = (0..=t)
                    .map(|s| {
                        (0..dh)
                            .map(|i| q[t][base + i] * k[s][base + i])
                            .sum::<Real>()
                            / (dh as Real).sqrt()
                    })
                    .collect();
                let max = scores.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
                let mut z = 0.0;
                for s in scores.iter_mut() {
                    *s = (*s - max).exp();
                    z += *s;
                }
                for (s, att) in scores.iter().enumerate() {
                    let w = att / z;
                    for i in 0..dh {
                        merged[base + i] += w * v[s][base + i];
                    }
                }
            }
            let mut y = matvec(&merged, wh);
            for (yi, &xi) in y.iter_mut().zip(&x[t]) {
                *yi += xi;
            }
            let z_row = layer_norm_row(&y, g1, b1);

            let hidden: Vec<Real> =
                matvec(&z_row, w1).into_iter().map(|h| h * phi(h)).collect();
            let mut s_row = matvec(&hidden, w2);
            for (si, &zi) in s_row.iter_mut().zip(&z_row) {
                *si += zi;
            }
            next_x.push(layer_norm_row(&s_row, g2, b2));
        }
        x = next_x;
    }

    let out: Tensor;
    let out_proj = if cfg.tie_embeddings {
        let (v_rows, d_cols) = (emb.rows(), emb.cols());
        let mut t = vec![0.0; v_rows * d_cols];
        for i in 0..v_rows {
            for j in 0..d_cols {
                t[j * v_rows + i] = emb.data()[i * d_cols + j];
            }
        }
        out = Tensor::new(vec![d_cols, v_rows], t).unwrap();
        &out
    } else {
        &weights["out"]
    };
    x.iter().map(|r| matvec(r, out_proj)).collect()
}

/// Materialized plain-weight view of a model (sites replaced by their mean).
pub fn materialized_weights(model: &Model) -> BTreeMap<String, Tensor> {
    model
        .params
        .iter()
        .map(|(name, p)| {
            let t = match p {
                varlm::model::Param::Det(t) => t.clone(),
                varlm::model::Param::Site(s) => s.mu.clone(),
            };
            (name.clone(), t)
        })
        .collect()
}

/// Gauss-Hermite nodes and weights for `int f(x) exp(-x^2) dx` (physicists'
/// convention), by Newton iteration on the Hermite recurrence.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 2);
    let mut nodes = vec![0.0f64; n];
    let mut weights = vec![0.0f64; n];
    // pi^(-1/4), normalization of the orthonormal Hermite recurrence
    let pim4 = 0.751_125_544_464_942_6_f64;
    let m = n.div_ceil(2);
    let mut z = 0.0f64;
    for i in 0..m {
        // standard initial guesses for the largest roots downwards
        z = match i {
            0 => (2.0 * n as f64 + 1.0).sqrt() - 1.85575 * (2.0 * n as f64 + 1.0).powf(-1.0 / 6.0),
            1 => z - 1.14 * (n as f64).powf(0.426) / z,
            2 => 1.86 * z - 0.86 * nodes[0],
            3 => 1.91 * z - 0.91 * nodes[1],
            _ => 2.0 * z - nodes[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..200 {
            // evaluate orthonormal Hermite polynomial of degree n at z
            let mut p1 = pim4;
            let mut p2 = 0.0;
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                p1 = z * (2.0 / (j as f64 + 1.0)).sqrt() * p2
                    - (j as f64 / (j as f64 + 1.0)).sqrt() * p3;
            }
            pp = (2.0 * n as f64).sqrt() * p2;
            let dz = p1 / pp;
            z -= dz;
            if dz.abs() < 1e-15 {
                break;
            }
        }
        nodes[i] = z;
        nodes[n - 1 - i] = -z;
        weights[i] = 2.0 / (pp * pp);
        weights[n - 1 - i] = weights[i];
    }
    (nodes, weights)
}

/// Sentence log probability under the posterior-integrated predictive
/// distribution: per-word probabilities are integrated over every site
/// coordinate by a tensor product of 1-D Gauss-Hermite rules (exact for the
/// diagonal Gaussian posterior), then logged and summed. Uses the
/// straight-line reference forward, never the library's forward path.
pub fn quadrature_sentence_logprob(model: &Model, ids: &[u32], nodes_per_dim: usize) -> f64 {
    let inputs = &ids[..ids.len() - 1];
    let targets = &ids[1..];
    let v = model.config.vocab_size;

    // flatten site coordinates; for each, theta = mu + sqrt(2) sigma x and
    // the density is absorbed into w / sqrt(pi)
    struct Coord {
        name: String,
        index: usize,
        nodes: Vec<f64>,
        weights: Vec<f64>,
    }
    let (gh_nodes, gh_weights) = gauss_hermite(nodes_per_dim);
    let inv_sqrt_pi = 1.0 / std::f64::consts::PI.sqrt();
    let mut coords: Vec<Coord> = Vec::new();
    for (name, p) in &model.params {
        if let varlm::model::Param::Site(s) = p {
            for i in 0..s.mu.len() {
                let mu = s.mu.data()[i] as f64;
                let sigma = (s.log_sigma.data()[i] as f64).exp();
                coords.push(Coord {
                    name: name.clone(),
                    index: i,
                    nodes: gh_nodes
                        .iter()
                        .map(|&x| mu + std::f64::consts::SQRT_2 * sigma * x)
                        .collect(),
                    weights: gh_weights.iter().map(|&w| w * inv_sqrt_pi).collect(),
                });
            }
        }
    }
    assert!(!coords.is_empty(), "toy model must have sites");

    let mut weights_map = materialized_weights(model);
    let mut idx = vec![0usize; coords.len()];
    let mut acc = vec![0.0f64; targets.len()];
    let mut total_weight = 0.0f64;
    loop {
        let mut point_weight = 1.0f64;
        for (c, &i) in coords.iter().zip(&idx) {
            point_weight *= c.weights[i];
            weights_map.get_mut(&c.name).unwrap().data_mut()[c.index] = c.nodes[i] as Real;
        }
        let logits =
            reference_forward(&model.config, &weights_map, model.positional_table(), inputs);
        for (t, &target) in targets.iter().enumerate() {
            let row = &logits[t];
            let max = row.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
            let z: Real = row.iter().map(|&l| (l - max).exp()).sum();
            let p = ((row[target as usize] - max).exp() / z) as f64;
            acc[t] += point_weight * p;
        }
        total_weight += point_weight;
        let _ = v;

        // mixed-radix increment
        let mut dim = 0;
        loop {
            if dim == coords.len() {
                return acc.iter().map(|&a| (a / total_weight).ln()).sum();
            }
            idx[dim] += 1;
            if idx[dim] < coords[dim].nodes.len() {
                break;
            }
            idx[dim] = 0;
            dim += 1;
        }
    }
}
