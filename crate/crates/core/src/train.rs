//! Training: the variational-bound objective with reparameterized sampling,
//! plain SGD with global-norm clipping, dev-perplexity-driven learning-rate
//! decay, and the two domain-adaptation protocols (fine-tuning and Bayesian
//! adaptation with a fine-tuned prior).

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bayes::{collect_grads, kl_graph, promote, BayesConfig, PredictiveMode};
use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::eval::corpus_perplexity;
use crate::model::{forward_graph, realize_weights, Dropout, Model, Param, WeightSample};
use crate::tape::Tape;
use crate::tensor::{Real, Tensor};

/// How the dataset-level KL term is spread over mini-batches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum KlScale {
    /// Weight each batch by `batch_sentences / train_sentences` so one epoch
    /// contributes the KL term exactly once.
    #[default]
    BatchFraction,
    /// Drop the KL term (point-estimate training of mu and log_sigma).
    Off,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "d_lr")]
    pub learning_rate: f64,
    /// Multiplied into the rate whenever dev perplexity fails to improve.
    #[serde(default = "d_decay")]
    pub lr_decay: f64,
    #[serde(default = "d_floor")]
    pub lr_floor: f64,
    /// Batch size in sentences.
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    /// Parameter samples per batch during training.
    #[serde(default = "d_k")]
    pub k_train: usize,
    #[serde(default)]
    pub kl_scale: KlScale,
    /// Global gradient norm clip; 0 disables clipping.
    #[serde(default = "d_clip")]
    pub clip_norm: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_shuffle")]
    pub shuffle: bool,
}

fn d_lr() -> f64 {
    0.1
}
fn d_decay() -> f64 {
    0.5
}
fn d_floor() -> f64 {
    1e-4
}
fn d_batch() -> usize {
    32
}
fn d_epochs() -> usize {
    10
}
fn d_k() -> usize {
    1
}
fn d_clip() -> f64 {
    5.0
}
fn d_shuffle() -> bool {
    true
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: d_lr(),
            lr_decay: d_decay(),
            lr_floor: d_floor(),
            batch_size: d_batch(),
            epochs: d_epochs(),
            k_train: d_k(),
            kl_scale: KlScale::default(),
            clip_norm: d_clip(),
            seed: 0,
            shuffle: d_shuffle(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        // rate 0 is allowed as the degenerate "no update" case
        if self.learning_rate < 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::Config("learning_rate must be finite and >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.lr_decay) {
            return Err(Error::Config("lr_decay must lie in (0, 1)".into()));
        }
        if self.k_train < 1 {
            return Err(Error::Config("k_train must be >= 1".into()));
        }
        if self.batch_size < 1 || self.epochs < 1 {
            return Err(Error::Config("batch_size and epochs must be >= 1".into()));
        }
        Ok(())
    }
}

/// Objective value split into its parts. `loss = nll + kl_weight * kl`.
#[derive(Debug, Clone)]
pub struct ElboParts {
    pub loss: Real,
    /// `-(1/K) sum_k sum_sentences log p(W | theta_k)`.
    pub nll: Real,
    /// Unweighted KL(q || prior) over all sites.
    pub kl: Real,
    /// Noise draws actually used, one map per sample. Empty without sites.
    pub eps: Vec<BTreeMap<String, Vec<Real>>>,
}

enum Noise<'a> {
    Draw { rng: &'a mut ChaCha8Rng, k: usize, dropout_rate: f64 },
    Replay { eps: &'a [BTreeMap<String, Vec<Real>>] },
}

fn build_elbo(
    model: &Model,
    tape: &mut Tape,
    batch: &[Vec<u32>],
    kl_weight: Real,
    noise: Noise,
    trainable: bool,
) -> Result<(crate::tape::TensorId, crate::model::Binding, ElboParts)> {
    if batch.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let binding = model.bind(tape, trainable);
    let has_sites = !binding.sites.is_empty();

    type DrawCtx<'r> = Option<(&'r mut ChaCha8Rng, f64)>;
    let (k, mut draw_ctx, replay): (usize, DrawCtx, Option<&[BTreeMap<String, Vec<Real>>]>) =
        match noise {
            Noise::Draw { rng, k, dropout_rate } => {
                (if has_sites { k } else { 1 }, Some((rng, dropout_rate)), None)
            }
            Noise::Replay { eps } => (if has_sites { eps.len().max(1) } else { 1 }, None, Some(eps)),
        };

    let mut eps_used = Vec::new();
    let mut nll_acc = None;
    for ki in 0..k {
        let eps_k: BTreeMap<String, Vec<Real>> = if !has_sites {
            BTreeMap::new()
        } else if let Some(eps) = replay {
            eps.get(ki)
                .cloned()
                .ok_or_else(|| Error::Contract(format!("no replay noise for sample {ki}")))?
        } else {
            let (rng, _) = draw_ctx.as_mut().expect("draw mode");
            model.draw_eps(rng)
        };
        let sample = if has_sites {
            WeightSample::Eps(&eps_k)
        } else {
            WeightSample::Mean
        };
        let weights = realize_weights(tape, &binding, sample)?;
        for ids in batch {
            if ids.len() < 2 {
                return Err(Error::Input("sentence too short to score".into()));
            }
            let inputs = &ids[..ids.len() - 1];
            let targets = &ids[1..];
            let logits = match &mut draw_ctx {
                Some((rng, rate)) if *rate > 0.0 => {
                    let mut dropout = Dropout { rng, rate: *rate };
                    forward_graph(
                        &model.config,
                        tape,
                        &weights,
                        model.positional_table(),
                        inputs,
                        Some(&mut dropout),
                    )?
                }
                _ => forward_graph(
                    &model.config,
                    tape,
                    &weights,
                    model.positional_table(),
                    inputs,
                    None,
                )?,
            };
            let ce = tape.cross_entropy_sum(logits, targets)?;
            nll_acc = Some(match nll_acc {
                Some(acc) => tape.add(acc, ce)?,
                None => ce,
            });
        }
        if has_sites {
            eps_used.push(eps_k);
        }
    }
    let nll_id = tape.scale(nll_acc.expect("non-empty batch"), 1.0 / k as Real);

    let kl_id = kl_graph(tape, &binding)?;
    let (loss_id, kl_value) = match kl_id {
        Some(kl) if kl_weight != 0.0 => {
            let weighted = tape.scale(kl, kl_weight);
            (tape.add(nll_id, weighted)?, tape.value(kl).item())
        }
        Some(kl) => (nll_id, tape.value(kl).item()),
        None => (nll_id, 0.0),
    };
    let parts = ElboParts {
        loss: tape.value(loss_id).item(),
        nll: tape.value(nll_id).item(),
        kl: kl_value,
        eps: eps_used,
    };
    Ok((loss_id, binding, parts))
}

/// Objective value and gradients for one batch. Noise is drawn from `rng`
/// (returned in the parts for replay); dropout masks also come from `rng`
/// when the model's dropout rate is positive and `training_dropout` is set.
pub fn elbo_with_grads(
    model: &Model,
    batch: &[Vec<u32>],
    k: usize,
    kl_weight: Real,
    rng: &mut ChaCha8Rng,
    training_dropout: bool,
) -> Result<(ElboParts, BTreeMap<String, Tensor>)> {
    let rate = if training_dropout { model.config.dropout_rate } else { 0.0 };
    let mut tape = Tape::new();
    let (loss_id, binding, parts) = build_elbo(
        model,
        &mut tape,
        batch,
        kl_weight,
        Noise::Draw { rng, k, dropout_rate: rate },
        true,
    )?;
    tape.backward(loss_id)?;
    let grads = collect_grads(&tape, &binding);
    Ok((parts, grads))
}

/// Objective value under fixed noise draws (common random numbers), used by
/// the finite-difference oracle and the sample-replay checks. `K` is the
/// number of supplied draws; dropout is off.
pub fn elbo_value_replay(
    model: &Model,
    batch: &[Vec<u32>],
    kl_weight: Real,
    eps: &[BTreeMap<String, Vec<Real>>],
) -> Result<ElboParts> {
    let mut tape = Tape::new();
    let (_, _, parts) =
        build_elbo(model, &mut tape, batch, kl_weight, Noise::Replay { eps }, false)?;
    Ok(parts)
}

/// What one optimizer step did.
#[derive(Debug, Clone, Copy)]
pub struct StepOutcome {
    pub applied: bool,
    pub grad_norm: f64,
    pub clip_scale: f64,
}

/// `theta <- theta - lr * g` over every trainable tensor, with global-norm
/// clipping. A non-finite gradient skips the update and reports it.
pub fn sgd_step(
    model: &mut Model,
    grads: &BTreeMap<String, Tensor>,
    lr: f64,
    clip_norm: f64,
) -> Result<StepOutcome> {
    let mut sq = 0.0f64;
    for g in grads.values() {
        for &v in g.data() {
            if !v.is_finite() {
                return Ok(StepOutcome { applied: false, grad_norm: f64::NAN, clip_scale: 1.0 });
            }
            sq += (v as f64) * (v as f64);
        }
    }
    let norm = sq.sqrt();
    let scale = if clip_norm > 0.0 && norm > clip_norm { clip_norm / norm } else { 1.0 };
    let step = (lr * scale) as Real;

    for (key, g) in grads {
        let (name, field) = match key.strip_suffix(".mu") {
            Some(n) => (n, Some(true)),
            None => match key.strip_suffix(".log_sigma") {
                Some(n) => (n, Some(false)),
                None => (key.as_str(), None),
            },
        };
        let param = model
            .params
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("gradient for unknown parameter {key}")))?;
        let target = match (param, field) {
            (Param::Det(t), None) => t,
            (Param::Site(s), Some(true)) => &mut s.mu,
            (Param::Site(s), Some(false)) => &mut s.log_sigma,
            _ => {
                return Err(Error::Contract(format!(
                    "gradient key {key} does not match the parameter kind"
                )))
            }
        };
        for (t, &gv) in target.data_mut().iter_mut().zip(g.data()) {
            *t -= step * gv;
        }
    }
    Ok(StepOutcome { applied: true, grad_norm: norm, clip_scale: scale })
}

/// One line of the training metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub step: u64,
    /// Mean per-token training NLL over the epoch (absent at epoch 0).
    pub nll: Option<f64>,
    /// KL(q || prior) at the end of the epoch (absent at epoch 0 and for
    /// deterministic models... present but zero for the latter).
    pub kl: Option<f64>,
    pub dev_ppl: f64,
    pub lr: f64,
    pub seed: u64,
}

#[derive(Debug)]
pub struct TrainResult {
    pub best_model: Model,
    pub best_dev_ppl: f64,
    pub best_epoch: usize,
    pub metrics: Vec<MetricsRecord>,
    pub events: Vec<String>,
    pub diverged: bool,
}

/// Run the training loop: shuffled sentence batches, the variational
/// objective, SGD, dev perplexity each epoch (posterior mean), halve the
/// rate on non-improvement, keep the best model. Non-finite training loss
/// aborts with the last good model retained.
pub fn train(
    model: &mut Model,
    train_lines: &[String],
    dev_lines: &[String],
    vocab: &Vocabulary,
    cfg: &TrainConfig,
) -> Result<TrainResult> {
    cfg.validate()?;
    if train_lines.is_empty() || dev_lines.is_empty() {
        return Err(Error::Input("train and dev sets must be non-empty".into()));
    }
    if model.config.vocab_size != vocab.size() {
        return Err(Error::Config(format!(
            "model vocabulary size {} does not match the corpus vocabulary ({}); \
             rebuild the model or retokenize",
            model.config.vocab_size,
            vocab.size()
        )));
    }
    let sentences: Vec<Vec<u32>> = train_lines.iter().map(|l| vocab.tokenize(l)).collect();
    let n = sentences.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let dev_eval = |m: &Model| -> Result<f64> {
        Ok(corpus_perplexity(m, dev_lines, vocab, PredictiveMode::Mean, None, "dev", 0)?
            .perplexity)
    };

    let mut metrics = Vec::new();
    let mut events = Vec::new();
    let initial_ppl = dev_eval(model)?;
    metrics.push(MetricsRecord {
        epoch: 0,
        step: 0,
        nll: None,
        kl: None,
        dev_ppl: initial_ppl,
        lr: cfg.learning_rate,
        seed: cfg.seed,
    });
    let mut best_model = model.clone();
    let mut best_ppl = initial_ppl;
    let mut best_epoch = 0usize;
    let mut lr = cfg.learning_rate;
    let mut step = 0u64;
    let mut diverged = false;

    let mut order: Vec<usize> = (0..n).collect();
    'epochs: for epoch in 1..=cfg.epochs {
        if cfg.shuffle {
            order.shuffle(&mut rng);
        }
        let mut nll_sum = 0.0f64;
        let mut token_sum = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Vec<u32>> = chunk.iter().map(|&i| sentences[i].clone()).collect();
            let kl_weight = match cfg.kl_scale {
                KlScale::BatchFraction => batch.len() as Real / n as Real,
                KlScale::Off => 0.0,
            };
            let (parts, grads) =
                elbo_with_grads(model, &batch, cfg.k_train, kl_weight, &mut rng, true)?;
            if !parts.loss.is_finite() {
                events.push(format!("epoch {epoch} step {step}: non-finite loss, aborting"));
                diverged = true;
                metrics.push(MetricsRecord {
                    epoch,
                    step,
                    nll: Some(f64::INFINITY),
                    kl: None,
                    dev_ppl: f64::INFINITY,
                    lr,
                    seed: cfg.seed,
                });
                break 'epochs;
            }
            let outcome = sgd_step(model, &grads, lr, cfg.clip_norm)?;
            if !outcome.applied {
                events.push(format!("epoch {epoch} step {step}: non-finite gradient, step skipped"));
            }
            nll_sum += parts.nll as f64;
            token_sum += batch.iter().map(|s| s.len() - 1).sum::<usize>();
            step += 1;
        }
        let dev_ppl = dev_eval(model)?;
        metrics.push(MetricsRecord {
            epoch,
            step,
            nll: Some(nll_sum / token_sum as f64),
            kl: Some(crate::bayes::kl_total(model) as f64),
            dev_ppl,
            lr,
            seed: cfg.seed,
        });
        if !dev_ppl.is_finite() {
            events.push(format!("epoch {epoch}: non-finite dev perplexity, aborting"));
            diverged = true;
            break;
        }
        if dev_ppl < best_ppl {
            best_ppl = dev_ppl;
            best_model = model.clone();
            best_epoch = epoch;
        } else {
            // the floor never raises a rate that started below it
            lr = (lr * cfg.lr_decay).max(cfg.lr_floor.min(lr));
        }
    }

    Ok(TrainResult { best_model, best_dev_ppl: best_ppl, best_epoch, metrics, events, diverged })
}

/// Continue point-estimate (or variational) training on a target corpus.
pub fn fine_tune(
    model: &Model,
    target_train: &[String],
    target_dev: &[String],
    vocab: &Vocabulary,
    cfg: &TrainConfig,
) -> Result<TrainResult> {
    let mut m = model.clone();
    train(&mut m, target_train, target_dev, vocab, cfg)
}

/// Bayesian adaptation: the reference (fine-tuned) checkpoint becomes the
/// prior mean with unit prior variance, then the variational objective is
/// optimized on the target corpus.
pub fn bayes_adapt(
    reference: &Model,
    bayes: &BayesConfig,
    target_train: &[String],
    target_dev: &[String],
    vocab: &Vocabulary,
    cfg: &TrainConfig,
) -> Result<TrainResult> {
    let mut m = promote(reference, bayes, reference)?;
    train(&mut m, target_train, target_dev, vocab, cfg)
}
