//! Perplexity computation, posterior-mean vs. Monte-Carlo prediction,
//! interpolated scoring, N-best rescoring and the feed-forward width sweep.

use std::collections::BTreeMap;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bayes::{promote, BayesConfig, PredictiveMode, SiteSpec};
use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::ngram::{interpolate, NGramModel};
use crate::tape::softmax_into;
use crate::tensor::Real;
use crate::train::{train, TrainConfig};

/// Evaluation result for one corpus.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub corpus_id: String,
    pub token_count: usize,
    /// Total log-likelihood in nats over all predicted tokens.
    pub total_loglik: f64,
    pub perplexity: f64,
    pub mode: PredictiveMode,
    pub interpolation: Option<InterpolationInfo>,
    pub oov_count: usize,
    pub oov_rate: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InterpolationInfo {
    pub lambda: f64,
    pub partner: String,
}

/// `exp(-total_loglik / token_count)`.
pub fn perplexity(total_loglik: f64, token_count: usize) -> f64 {
    if token_count == 0 {
        return f64::NAN;
    }
    (-total_loglik / token_count as f64).exp()
}

/// Per-position probabilities the neural model assigns to the realized next
/// token, for a tokenized sentence `[<s>, w.., </s>]`. Positions 1..len are
/// predicted. In `Mc` mode probabilities are averaged over `k` parameter
/// samples drawn from `rng` before any logarithm is taken.
pub fn sentence_word_probs(
    model: &Model,
    ids: &[u32],
    mode: PredictiveMode,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    if ids.len() < 2 {
        return Err(Error::Input("a sentence needs at least two tokens to score".into()));
    }
    let inputs = &ids[..ids.len() - 1];
    let targets = &ids[1..];
    let v = model.config.vocab_size;
    let collect = |logits: &crate::tensor::Tensor| -> Vec<f64> {
        let mut out = Vec::with_capacity(targets.len());
        let mut probs = vec![0.0 as Real; v];
        for (r, &t) in targets.iter().enumerate() {
            softmax_into(&logits.data()[r * v..(r + 1) * v], &mut probs);
            out.push(probs[t as usize] as f64);
        }
        out
    };
    match mode {
        PredictiveMode::Mean => {
            let logits = model.logits_mean(inputs)?;
            Ok(collect(&logits))
        }
        PredictiveMode::Mc { k } => {
            if k < 1 {
                return Err(Error::Config("mc mode requires k >= 1".into()));
            }
            let mut acc = vec![0.0f64; targets.len()];
            for _ in 0..k {
                let eps = model.draw_eps(rng);
                let logits = model.logits_sampled(inputs, &eps)?;
                for (a, p) in acc.iter_mut().zip(collect(&logits)) {
                    *a += p;
                }
            }
            for a in &mut acc {
                *a /= k as f64;
            }
            Ok(acc)
        }
    }
}

/// Log probability (nats) of one tokenized sentence, optionally mixing each
/// word probability with an n-gram partner before the log.
pub fn sentence_logprob(
    model: &Model,
    ids: &[u32],
    mode: PredictiveMode,
    interp: Option<(&NGramModel, f64)>,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let neural = sentence_word_probs(model, ids, mode, rng)?;
    let mut total = 0.0;
    for (i, &p_neural) in neural.iter().enumerate() {
        let pos = i + 1;
        let p = match interp {
            Some((ngram, lambda)) => {
                let p_ng = ngram.prob(&ids[..pos], ids[pos]);
                interpolate(p_neural.min(1.0), p_ng.min(1.0), lambda)?
            }
            None => p_neural,
        };
        total += p.ln();
    }
    Ok(total)
}

/// Aggregate sentence log probabilities over a text corpus.
pub fn corpus_perplexity(
    model: &Model,
    lines: &[String],
    vocab: &Vocabulary,
    mode: PredictiveMode,
    interp: Option<(&NGramModel, f64)>,
    corpus_id: &str,
    mc_seed: u64,
) -> Result<EvalReport> {
    if lines.is_empty() {
        return Err(Error::Input("cannot evaluate an empty corpus".into()));
    }
    if model.config.vocab_size != vocab.size() {
        return Err(Error::Config(format!(
            "model vocabulary size {} does not match the supplied vocabulary ({})",
            model.config.vocab_size,
            vocab.size()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mc_seed);
    let mut total = 0.0;
    let mut tokens = 0usize;
    let mut words = 0usize;
    let mut oov = 0usize;
    for line in lines {
        let (ids, line_oov) = vocab.tokenize_counting(line);
        oov += line_oov;
        words += ids.len() - 2;
        total += sentence_logprob(model, &ids, mode, interp, &mut rng)?;
        tokens += ids.len() - 1; // predicted tokens: words plus end marker
    }
    Ok(EvalReport {
        corpus_id: corpus_id.to_string(),
        token_count: tokens,
        total_loglik: total,
        perplexity: perplexity(total, tokens),
        mode,
        interpolation: interp.map(|(_, lambda)| InterpolationInfo {
            lambda,
            partner: "4gram".to_string(),
        }),
        oov_count: oov,
        oov_rate: if words == 0 { 0.0 } else { oov as f64 / words as f64 },
    })
}

/// Pick the interpolation weight minimizing dev-set perplexity. Word-level
/// component probabilities are computed once; the one-dimensional convex
/// objective is then minimized by golden-section search, cross-checked
/// against the endpoints and the coarse grid 0.1..0.9.
pub fn tune_lambda(
    model: &Model,
    ngram: &NGramModel,
    dev_lines: &[String],
    vocab: &Vocabulary,
    mode: PredictiveMode,
    mc_seed: u64,
) -> Result<(f64, f64)> {
    if dev_lines.is_empty() {
        return Err(Error::Input("cannot tune the interpolation weight on an empty set".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mc_seed);
    let mut pairs: Vec<(f64, f64)> = Vec::new();
    let mut tokens = 0usize;
    for line in dev_lines {
        let ids = vocab.tokenize(line);
        let neural = sentence_word_probs(model, &ids, mode, &mut rng)?;
        for (i, &pn) in neural.iter().enumerate() {
            let pos = i + 1;
            pairs.push((pn, ngram.prob(&ids[..pos], ids[pos])));
        }
        tokens += ids.len() - 1;
    }
    let nll = |lambda: f64| -> f64 {
        -pairs.iter().map(|&(pn, pg)| (lambda * pn + (1.0 - lambda) * pg).ln()).sum::<f64>()
    };

    let golden = |mut a: f64, mut b: f64| -> f64 {
        let phi = (5f64.sqrt() - 1.0) / 2.0;
        let mut c = b - phi * (b - a);
        let mut d = a + phi * (b - a);
        let (mut fc, mut fd) = (nll(c), nll(d));
        for _ in 0..60 {
            if fc < fd {
                b = d;
                d = c;
                fd = fc;
                c = b - phi * (b - a);
                fc = nll(c);
            } else {
                a = c;
                c = d;
                fc = fd;
                d = a + phi * (b - a);
                fd = nll(d);
            }
        }
        0.5 * (a + b)
    };

    let mut candidates = vec![0.0, 1.0, golden(0.0, 1.0)];
    candidates.extend((1..10).map(|i| i as f64 / 10.0));
    let best = candidates
        .into_iter()
        .map(|l| (l, nll(l)))
        .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
        .unwrap();
    Ok((best.0, (best.1 / tokens as f64).exp()))
}

/// One recognizer hypothesis.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub words: String,
    pub acoustic: f64,
    pub old_lm: Option<f64>,
}

/// All hypotheses for one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct NBestList {
    pub utterance: String,
    pub hyps: Vec<Hypothesis>,
}

/// Parse line-oriented N-best text: `utterance_id acoustic_score words...`.
/// Malformed lines are skipped with a warning; an utterance is never dropped
/// as long as it has one well-formed hypothesis.
pub fn parse_nbest(text: &str) -> (Vec<NBestList>, Vec<String>) {
    let mut order: Vec<String> = Vec::new();
    let mut by_utt: BTreeMap<String, Vec<Hypothesis>> = BTreeMap::new();
    let mut warnings = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split_whitespace();
        let utt = match fields.next() {
            Some(u) => u.to_string(),
            None => continue,
        };
        let acoustic: f64 = match fields.next().map(str::parse::<f64>) {
            Some(Ok(a)) if a.is_finite() => a,
            _ => {
                warnings.push(format!("line {}: bad acoustic score, entry skipped", lineno + 1));
                continue;
            }
        };
        let words = fields.collect::<Vec<_>>().join(" ");
        if !by_utt.contains_key(&utt) {
            order.push(utt.clone());
        }
        by_utt.entry(utt).or_default().push(Hypothesis { words, acoustic, old_lm: None });
    }
    let lists = order
        .into_iter()
        .map(|utt| {
            let hyps = by_utt.remove(&utt).unwrap_or_default();
            NBestList { utterance: utt, hyps }
        })
        .collect();
    (lists, warnings)
}

/// One rescored hypothesis with its score breakdown.
#[derive(Debug, Clone, Serialize)]
pub struct RescoredHyp {
    pub original_rank: usize,
    pub total: f64,
    pub acoustic: f64,
    pub lm_logprob: f64,
    pub n_words: usize,
    pub words: String,
}

/// Re-rank each utterance's hypotheses by
/// `acoustic + lm_scale * lm_logprob + wip * n_words`, descending, breaking
/// ties by the original order.
pub fn rescore_nbest(
    lists: &[NBestList],
    model: &Model,
    vocab: &Vocabulary,
    lm_scale: f64,
    wip: f64,
    interp: Option<(&NGramModel, f64)>,
    mode: PredictiveMode,
    mc_seed: u64,
) -> Result<Vec<(String, Vec<RescoredHyp>)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(mc_seed);
    let mut out = Vec::with_capacity(lists.len());
    for list in lists {
        let mut scored = Vec::with_capacity(list.hyps.len());
        for (rank, hyp) in list.hyps.iter().enumerate() {
            let ids = vocab.tokenize(&hyp.words);
            let lm = sentence_logprob(model, &ids, mode, interp, &mut rng)?;
            let n_words = ids.len() - 2;
            scored.push(RescoredHyp {
                original_rank: rank,
                total: hyp.acoustic + lm_scale * lm + wip * n_words as f64,
                acoustic: hyp.acoustic,
                lm_logprob: lm,
                n_words,
                words: hyp.words.clone(),
            });
        }
        scored.sort_by(|a, b| {
            b.total
                .partial_cmp(&a.total)
                .unwrap()
                .then_with(|| a.original_rank.cmp(&b.original_rank))
        });
        out.push((list.utterance.clone(), scored));
    }
    Ok(out)
}

/// Model variants compared in the width sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Deterministic,
    Dropout,
    BayesFf1,
}

impl Variant {
    pub fn name(&self) -> &'static str {
        match self {
            Variant::Deterministic => "deterministic",
            Variant::Dropout => "dropout",
            Variant::BayesFf1 => "bayes-ff-1",
        }
    }
}

/// One (width, variant, seed) outcome.
#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub d_ff: usize,
    pub variant: String,
    pub seed: u64,
    pub dev_ppl: Option<f64>,
    pub status: String,
}

/// Sweep configuration: the base architecture is re-instantiated at each
/// width; every variant shares the same corpus, seeds and schedule.
#[derive(Debug, Clone)]
pub struct SweepConfig {
    pub base: ModelConfig,
    pub widths: Vec<usize>,
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
    pub train: TrainConfig,
    pub dropout_rate: f64,
}

/// Train/evaluate the grid. Failures are recorded per row; the sweep never
/// aborts early.
pub fn width_sweep(
    cfg: &SweepConfig,
    train_lines: &[String],
    dev_lines: &[String],
    vocab: &Vocabulary,
) -> Vec<SweepRow> {
    let mut rows = Vec::new();
    for &width in &cfg.widths {
        for &seed in &cfg.seeds {
            let mut model_cfg = cfg.base.clone();
            model_cfg.d_ff = width;
            model_cfg.dropout_rate = 0.0;
            let mut tc = cfg.train.clone();
            tc.seed = seed;

            // deterministic baseline; it also serves as the Bayesian prior
            let baseline = run_variant(&model_cfg, &tc, train_lines, dev_lines, vocab, None);
            let mut baseline_model = None;
            if cfg.variants.contains(&Variant::Deterministic) {
                rows.push(row_of(width, Variant::Deterministic, seed, &baseline));
            }
            if let Ok((m, _)) = &baseline {
                baseline_model = Some(m.clone());
            }

            if cfg.variants.contains(&Variant::Dropout) {
                let mut drop_cfg = model_cfg.clone();
                drop_cfg.dropout_rate = cfg.dropout_rate;
                let res = run_variant(&drop_cfg, &tc, train_lines, dev_lines, vocab, None);
                rows.push(row_of(width, Variant::Dropout, seed, &res));
            }

            if cfg.variants.contains(&Variant::BayesFf1) {
                let res = match &baseline_model {
                    Some(prior) => run_variant(
                        &model_cfg,
                        &tc,
                        train_lines,
                        dev_lines,
                        vocab,
                        Some(prior),
                    ),
                    None => Err(Error::Contract("baseline training failed; no prior".into())),
                };
                rows.push(row_of(width, Variant::BayesFf1, seed, &res));
            }
        }
    }
    rows
}

fn run_variant(
    model_cfg: &ModelConfig,
    tc: &TrainConfig,
    train_lines: &[String],
    dev_lines: &[String],
    vocab: &Vocabulary,
    bayes_prior: Option<&Model>,
) -> Result<(Model, f64)> {
    let mut model = match bayes_prior {
        Some(prior) => {
            let bc = BayesConfig::with_sites(vec![SiteSpec::ff(1)]);
            promote(prior, &bc, prior)?
        }
        None => Model::init(model_cfg.clone(), tc.seed)?,
    };
    let result = train(&mut model, train_lines, dev_lines, vocab, tc)?;
    Ok((result.best_model, result.best_dev_ppl))
}

fn row_of(width: usize, variant: Variant, seed: u64, res: &Result<(Model, f64)>) -> SweepRow {
    match res {
        Ok((_, ppl)) => SweepRow {
            d_ff: width,
            variant: variant.name().to_string(),
            seed,
            dev_ppl: Some(*ppl),
            status: "ok".to_string(),
        },
        Err(e) => SweepRow {
            d_ff: width,
            variant: variant.name().to_string(),
            seed,
            dev_ppl: None,
            status: format!("failed: {e}"),
        },
    }
}

/// Tab-separated table with a header row, one line per sweep row.
pub fn sweep_tsv(rows: &[SweepRow]) -> String {
    let mut out = String::from("d_ff\tvariant\tseed\tdev_ppl\tstatus\n");
    for r in rows {
        let ppl = r.dev_ppl.map_or("-".to_string(), |p| format!("{p:.6}"));
        out.push_str(&format!("{}\t{}\t{}\t{}\t{}\n", r.d_ff, r.variant, r.seed, ppl, r.status));
    }
    out
}
