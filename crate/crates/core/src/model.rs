//! Decoder-only Transformer language model.
//!
//! The forward pass is incremental: each position computes query/key/value
//! projections, appends the new key-value pair to a per-block cache, and
//! attends over the cache only. Future positions are therefore structurally
//! invisible; no additive mask exists anywhere.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::bayes::VariationalSite;
use crate::error::{Error, Result};
use crate::tape::{Tape, TensorId};
use crate::tensor::{Real, Tensor};

/// Epsilon used by every layer-norm in the model.
pub const LN_EPS: Real = 1e-5;

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    #[serde(default = "default_n_blocks")]
    pub n_blocks: usize,
    #[serde(default = "default_d_model")]
    pub d_model: usize,
    #[serde(default = "default_d_ff")]
    pub d_ff: usize,
    #[serde(default = "default_n_heads")]
    pub n_heads: usize,
    pub vocab_size: usize,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
    #[serde(default)]
    pub dropout_rate: f64,
    /// Reuse the input embedding table, transposed, as the output projection.
    #[serde(default)]
    pub tie_embeddings: bool,
}

fn default_n_blocks() -> usize {
    6
}
fn default_d_model() -> usize {
    512
}
fn default_d_ff() -> usize {
    4096
}
fn default_n_heads() -> usize {
    8
}
fn default_max_len() -> usize {
    512
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_blocks < 1 || self.d_model < 1 || self.d_ff < 1 || self.n_heads < 1 {
            return Err(Error::Config("all architecture counts must be >= 1".into()));
        }
        if self.vocab_size < 1 || self.max_len < 1 {
            return Err(Error::Config("vocab_size and max_len must be >= 1".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout_rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// One named weight: either a point estimate or a variational site.
#[derive(Debug, Clone, PartialEq)]
pub enum Param {
    Det(Tensor),
    Site(VariationalSite),
}

impl Param {
    pub fn shape(&self) -> &[usize] {
        match self {
            Param::Det(t) => t.shape(),
            Param::Site(s) => s.mu.shape(),
        }
    }

    pub fn is_site(&self) -> bool {
        matches!(self, Param::Site(_))
    }
}

/// Transformer LM: configuration plus named parameters. Parameter names are
/// `emb`, `out`, and `blocks.<i>.{attn.{wq,wk,wv,wh,ln_g,ln_b}, ff.{w1,w2,ln_g,ln_b}}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: BTreeMap<String, Param>,
    pe: Tensor,
}

/// Sinusoidal absolute positional encoding table, [max_len, d_model].
pub fn positional_encoding(max_len: usize, d_model: usize) -> Tensor {
    let mut data = vec![0.0; max_len * d_model];
    for pos in 0..max_len {
        for i in 0..d_model / 2 {
            let rate = (10000.0 as Real).powf(2.0 * i as Real / d_model as Real);
            let angle = pos as Real / rate;
            data[pos * d_model + 2 * i] = angle.sin();
            if 2 * i + 1 < d_model {
                data[pos * d_model + 2 * i + 1] = angle.cos();
            }
        }
        if d_model % 2 == 1 {
            // odd trailing dimension gets the sine of the last rate
            let i = d_model / 2;
            let rate = (10000.0 as Real).powf(2.0 * i as Real / d_model as Real);
            data[pos * d_model + d_model - 1] = (pos as Real / rate).sin();
        }
    }
    Tensor::new(vec![max_len, d_model], data).unwrap()
}

fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let a = (6.0 / (rows + cols) as Real).sqrt();
    let data: Vec<Real> = (0..rows * cols).map(|_| rng.gen_range(-a..a)).collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

impl Model {
    /// Fresh deterministic model with Xavier-uniform weights.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rand_chacha::rand_core::SeedableRng::seed_from_u64(seed);
        let mut params = BTreeMap::new();
        let d = config.d_model;
        params.insert("emb".to_string(), Param::Det(xavier(&mut rng, config.vocab_size, d)));
        for b in 0..config.n_blocks {
            for w in ["wq", "wk", "wv", "wh"] {
                params.insert(
                    format!("blocks.{b}.attn.{w}"),
                    Param::Det(xavier(&mut rng, d, d)),
                );
            }
            params.insert(
                format!("blocks.{b}.attn.ln_g"),
                Param::Det(Tensor::full(vec![d], 1.0)),
            );
            params.insert(format!("blocks.{b}.attn.ln_b"), Param::Det(Tensor::zeros(vec![d])));
            params.insert(
                format!("blocks.{b}.ff.w1"),
                Param::Det(xavier(&mut rng, d, config.d_ff)),
            );
            params.insert(
                format!("blocks.{b}.ff.w2"),
                Param::Det(xavier(&mut rng, config.d_ff, d)),
            );
            params.insert(format!("blocks.{b}.ff.ln_g"), Param::Det(Tensor::full(vec![d], 1.0)));
            params.insert(format!("blocks.{b}.ff.ln_b"), Param::Det(Tensor::zeros(vec![d])));
        }
        if !config.tie_embeddings {
            params.insert("out".to_string(), Param::Det(xavier(&mut rng, d, config.vocab_size)));
        }
        let pe = positional_encoding(config.max_len, d);
        Ok(Model { config, params, pe })
    }

    /// Rebuild from config + params (checkpoint load path).
    pub fn from_parts(config: ModelConfig, params: BTreeMap<String, Param>) -> Result<Self> {
        config.validate()?;
        let pe = positional_encoding(config.max_len, config.d_model);
        Ok(Model { config, params, pe })
    }

    pub fn positional_table(&self) -> &Tensor {
        &self.pe
    }

    pub fn site_names(&self) -> Vec<String> {
        self.params
            .iter()
            .filter(|(_, p)| p.is_site())
            .map(|(n, _)| n.clone())
            .collect()
    }

    pub fn has_sites(&self) -> bool {
        self.params.values().any(Param::is_site)
    }

    /// Register every parameter on a tape. Deterministic weights become
    /// leaves directly; sites contribute mu and log-sigma leaves.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Binding {
        let mut det = BTreeMap::new();
        let mut sites = BTreeMap::new();
        for (name, p) in &self.params {
            match p {
                Param::Det(t) => {
                    det.insert(name.clone(), tape.leaf(t.clone(), trainable));
                }
                Param::Site(s) => {
                    sites.insert(
                        name.clone(),
                        SiteBinding {
                            mu: tape.leaf(s.mu.clone(), trainable),
                            log_sigma: tape.leaf(s.log_sigma.clone(), trainable),
                            prior_mu: s.prior_mu.clone(),
                            prior_sigma: s.prior_sigma.clone(),
                        },
                    );
                }
            }
        }
        Binding { det, sites }
    }

    /// Draw one reparameterization noise vector per site.
    pub fn draw_eps(&self, rng: &mut ChaCha8Rng) -> BTreeMap<String, Vec<Real>> {
        let mut eps = BTreeMap::new();
        for (name, p) in &self.params {
            if let Param::Site(s) = p {
                let v: Vec<Real> = (0..s.mu.len()).map(|_| rng.sample(StandardNormal)).collect();
                eps.insert(name.clone(), v);
            }
        }
        eps
    }

    /// Posterior-mean logits for an input token sequence, no gradients.
    pub fn logits_mean(&self, tokens: &[u32]) -> Result<Tensor> {
        let (tape, id) = self.forward_with_tape(tokens)?;
        Ok(tape.value(id).clone())
    }

    /// Forward under the posterior mean, returning the tape for inspection.
    pub fn forward_with_tape(&self, tokens: &[u32]) -> Result<(Tape, TensorId)> {
        let mut tape = Tape::new();
        let binding = self.bind(&mut tape, false);
        let weights = realize_weights(&mut tape, &binding, WeightSample::Mean)?;
        let id = forward_graph(&self.config, &mut tape, &weights, &self.pe, tokens, None)?;
        Ok((tape, id))
    }

    /// Logits under one sampled weight realization, no gradients.
    pub fn logits_sampled(&self, tokens: &[u32], eps: &BTreeMap<String, Vec<Real>>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let binding = self.bind(&mut tape, false);
        let weights = realize_weights(&mut tape, &binding, WeightSample::Eps(eps))?;
        let id = forward_graph(&self.config, &mut tape, &weights, &self.pe, tokens, None)?;
        Ok(tape.value(id).clone())
    }
}

/// Tape handles for one model's parameters.
pub struct Binding {
    pub det: BTreeMap<String, TensorId>,
    pub sites: BTreeMap<String, SiteBinding>,
}

pub struct SiteBinding {
    pub mu: TensorId,
    pub log_sigma: TensorId,
    pub prior_mu: Tensor,
    pub prior_sigma: Tensor,
}

/// How site weights are turned into concrete tensors for a forward pass.
pub enum WeightSample<'a> {
    /// Use the posterior mean everywhere.
    Mean,
    /// mu + exp(log_sigma) * eps with the given per-site noise.
    Eps(&'a BTreeMap<String, Vec<Real>>),
}

/// Materialize one weight tensor id per parameter name.
pub fn realize_weights(
    tape: &mut Tape,
    binding: &Binding,
    sample: WeightSample,
) -> Result<BTreeMap<String, TensorId>> {
    let mut out = BTreeMap::new();
    for (name, &id) in &binding.det {
        out.insert(name.clone(), id);
    }
    for (name, site) in &binding.sites {
        let id = match &sample {
            WeightSample::Mean => site.mu,
            WeightSample::Eps(eps) => {
                let e = eps.get(name).ok_or_else(|| {
                    Error::Contract(format!("no noise draw supplied for site {name}"))
                })?;
                let shape = tape.value(site.mu).shape().to_vec();
                let eps_t = tape.constant(Tensor::new(shape, e.clone())?);
                let sigma = tape.exp(site.log_sigma);
                let noise = tape.mul(sigma, eps_t)?;
                tape.add(site.mu, noise)?
            }
        };
        out.insert(name.clone(), id);
    }
    Ok(out)
}

/// Per-block cache of key/value rows for positions consumed so far.
#[derive(Default)]
pub struct BlockState {
    k_rows: Vec<TensorId>,
    v_rows: Vec<TensorId>,
}

impl BlockState {
    pub fn len(&self) -> usize {
        self.k_rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.k_rows.is_empty()
    }
}

/// Weight ids for one decoder block.
pub struct BlockWeights {
    pub wq: TensorId,
    pub wk: TensorId,
    pub wv: TensorId,
    pub wh: TensorId,
    pub attn_ln_g: TensorId,
    pub attn_ln_b: TensorId,
    pub w1: TensorId,
    pub w2: TensorId,
    pub ff_ln_g: TensorId,
    pub ff_ln_b: TensorId,
}

impl BlockWeights {
    fn from_map(weights: &BTreeMap<String, TensorId>, block: usize) -> Result<Self> {
        let get = |suffix: &str| -> Result<TensorId> {
            weights
                .get(&format!("blocks.{block}.{suffix}"))
                .copied()
                .ok_or_else(|| Error::Contract(format!("missing weight blocks.{block}.{suffix}")))
        };
        Ok(BlockWeights {
            wq: get("attn.wq")?,
            wk: get("attn.wk")?,
            wv: get("attn.wv")?,
            wh: get("attn.wh")?,
            attn_ln_g: get("attn.ln_g")?,
            attn_ln_b: get("attn.ln_b")?,
            w1: get("ff.w1")?,
            w2: get("ff.w2")?,
            ff_ln_g: get("ff.ln_g")?,
            ff_ln_b: get("ff.ln_b")?,
        })
    }
}

/// Training-mode dropout source.
pub struct Dropout<'a> {
    pub rng: &'a mut ChaCha8Rng,
    pub rate: f64,
}

fn maybe_drop(tape: &mut Tape, x: TensorId, dropout: &mut Option<&mut Dropout>) -> Result<TensorId> {
    match dropout {
        Some(d) => apply_dropout(tape, x, d.rate, d.rng, true),
        None => Ok(x),
    }
}

/// One cached self-attention step at position `t`: project q/k/v, append the
/// new key-value pair, attend per head over the cache, project, add the
/// residual, normalize. Dropout, when active, sits on the projection output.
pub fn self_attention_step(
    cfg: &ModelConfig,
    tape: &mut Tape,
    block: &BlockWeights,
    x: TensorId,
    state: &mut BlockState,
    t: usize,
    mut dropout: Option<&mut Dropout>,
) -> Result<TensorId> {
    if state.k_rows.len() != state.v_rows.len() || state.k_rows.len() != t {
        return Err(Error::Contract(format!(
            "cache holds {} keys / {} values but position is {t}",
            state.k_rows.len(),
            state.v_rows.len()
        )));
    }
    let dh = cfg.head_dim();
    let q = tape.matmul(x, block.wq)?;
    let k = tape.matmul(x, block.wk)?;
    let v = tape.matmul(x, block.wv)?;
    state.k_rows.push(k);
    state.v_rows.push(v);
    let keys = tape.concat_rows(&state.k_rows)?;
    let vals = tape.concat_rows(&state.v_rows)?;

    let inv_sqrt_dh = 1.0 / (dh as Real).sqrt();
    let mut head_outs = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(keys, h * dh, dh)?;
        let vh = tape.slice_cols(vals, h * dh, dh)?;
        let kht = tape.transpose(kh);
        let scores = tape.matmul(qh, kht)?;
        let scaled = tape.scale(scores, inv_sqrt_dh);
        let att = tape.softmax_rows(scaled);
        head_outs.push(tape.matmul(att, vh)?);
    }
    let merged = tape.concat_cols(&head_outs)?;
    let proj = tape.matmul(merged, block.wh)?;
    let proj = maybe_drop(tape, proj, &mut dropout)?;
    let y = tape.add(proj, x)?;
    tape.layer_norm(y, block.attn_ln_g, block.attn_ln_b, LN_EPS)
}

/// Position-wise feed-forward with residual and layer norm. Dropout, when
/// active, sits on the inner activation.
pub fn feed_forward_step(
    tape: &mut Tape,
    block: &BlockWeights,
    z: TensorId,
    mut dropout: Option<&mut Dropout>,
) -> Result<TensorId> {
    let h_pre = tape.matmul(z, block.w1)?;
    let h = tape.gelu(h_pre);
    let h = maybe_drop(tape, h, &mut dropout)?;
    let proj = tape.matmul(h, block.w2)?;
    let s = tape.add(proj, z)?;
    tape.layer_norm(s, block.ff_ln_g, block.ff_ln_b, LN_EPS)
}

/// Inverted dropout. Identity when `training` is false or the rate is zero.
pub fn apply_dropout(
    tape: &mut Tape,
    x: TensorId,
    rate: f64,
    rng: &mut ChaCha8Rng,
    training: bool,
) -> Result<TensorId> {
    if !training || rate == 0.0 {
        return Ok(x);
    }
    let keep_scale = (1.0 / (1.0 - rate)) as Real;
    let n = tape.value(x).len();
    let mask: Vec<Real> =
        (0..n).map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep_scale }).collect();
    tape.dropout_mask(x, mask)
}

/// Full forward pass: token ids in, `[T, vocab]` logits out. Row `t` scores
/// the prediction of token `t+1`.
pub fn forward_graph(
    cfg: &ModelConfig,
    tape: &mut Tape,
    weights: &BTreeMap<String, TensorId>,
    pe: &Tensor,
    tokens: &[u32],
    mut dropout: Option<&mut Dropout>,
) -> Result<TensorId> {
    if tokens.is_empty() {
        return Err(Error::Input("empty token sequence".into()));
    }
    if tokens.len() > cfg.max_len {
        return Err(Error::Input(format!(
            "sequence length {} exceeds max_len {}",
            tokens.len(),
            cfg.max_len
        )));
    }
    let emb = *weights
        .get("emb")
        .ok_or_else(|| Error::Contract("missing weight emb".into()))?;
    let out_proj = if cfg.tie_embeddings {
        tape.transpose(emb)
    } else {
        *weights
            .get("out")
            .ok_or_else(|| Error::Contract("missing weight out".into()))?
    };
    let blocks: Vec<BlockWeights> = (0..cfg.n_blocks)
        .map(|b| BlockWeights::from_map(weights, b))
        .collect::<Result<_>>()?;
    let mut states: Vec<BlockState> = (0..cfg.n_blocks).map(|_| BlockState::default()).collect();

    let d = cfg.d_model;
    let mut logit_rows = Vec::with_capacity(tokens.len());
    for (t, &tok) in tokens.iter().enumerate() {
        let e = tape.embed_lookup(emb, &[tok])?;
        let pe_row = tape.constant(Tensor::new(
            vec![1, d],
            pe.data()[t * d..(t + 1) * d].to_vec(),
        )?);
        let mut x = tape.add(e, pe_row)?;
        for (b, block) in blocks.iter().enumerate() {
            let z = self_attention_step(
                cfg,
                tape,
                block,
                x,
                &mut states[b],
                t,
                dropout.as_deref_mut(),
            )?;
            x = feed_forward_step(tape, block, z, dropout.as_deref_mut())?;
        }
        logit_rows.push(tape.matmul(x, out_proj)?);
    }
    tape.concat_rows(&logit_rows)
}
