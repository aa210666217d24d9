//! Backoff 4-gram language model.
//!
//! Training uses interpolated Kneser-Ney smoothing with one absolute
//! discount per order estimated from count-of-counts. Corpora under 10k
//! tokens (or with degenerate count-of-counts) fall back to add-0.1
//! smoothing in the same backoff representation. Either way the stored
//! tables satisfy, for every seen context, `sum_w p(w|context) = 1` exactly
//! up to rounding: stored probabilities carry the interpolated mass and the
//! backoff weight carries the remainder.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::corpus::{Vocabulary, UNK};
use crate::error::{Error, Result};

const FALLBACK_TOKEN_THRESHOLD: usize = 10_000;
const ADDITIVE_ALPHA: f64 = 0.1;

/// How the model was estimated.
#[derive(Debug, Clone, PartialEq)]
pub enum Smoothing {
    KneserNey { discounts: Vec<f64> },
    Additive { alpha: f64 },
}

/// Backoff n-gram tables over token ids. Probabilities and backoff weights
/// are stored as log10 values, matching the ARPA convention.
#[derive(Debug, Clone, PartialEq)]
pub struct NGramModel {
    pub order: usize,
    pub vocab_size: usize,
    /// probs[o-1]: o-gram (context + word) -> log10 p(word | context)
    probs: Vec<HashMap<Vec<u32>, f64>>,
    /// bows[o-1]: o-gram context -> log10 backoff weight
    bows: Vec<HashMap<Vec<u32>, f64>>,
    pub smoothing: Smoothing,
}

impl NGramModel {
    /// Backoff-resolved probability of `w` after `context` (most recent word
    /// last). Uses at most `order - 1` trailing context words; ids outside
    /// the vocabulary map to `<unk>`.
    pub fn prob(&self, context: &[u32], w: u32) -> f64 {
        let w = if (w as usize) < self.vocab_size { w } else { UNK };
        let ctx_len = context.len().min(self.order - 1);
        let mut gram: Vec<u32> = context[context.len() - ctx_len..]
            .iter()
            .map(|&c| if (c as usize) < self.vocab_size { c } else { UNK })
            .collect();
        gram.push(w);
        self.prob_from(&gram)
    }

    fn prob_from(&self, gram: &[u32]) -> f64 {
        if let Some(&lp) = self.probs[gram.len() - 1].get(gram) {
            return 10f64.powf(lp);
        }
        if gram.len() == 1 {
            // every in-vocabulary unigram is stored at training time; this
            // only triggers for models imported with gaps
            return 0.0;
        }
        let ctx = &gram[..gram.len() - 1];
        let bow = self.bows[ctx.len() - 1].get(ctx).map_or(1.0, |&b| 10f64.powf(b));
        bow * self.prob_from(&gram[1..])
    }

    /// Log probability (nats) of a tokenized sentence `[<s>, w.., </s>]`:
    /// sum over predicted positions 1..len.
    pub fn sentence_logprob(&self, ids: &[u32]) -> f64 {
        let mut total = 0.0;
        for i in 1..ids.len() {
            let start = i.saturating_sub(self.order - 1);
            total += self.prob(&ids[start..i], ids[i]).ln();
        }
        total
    }

    pub fn ngram_counts(&self) -> Vec<usize> {
        self.probs.iter().map(HashMap::len).collect()
    }

    /// Export in the standard ARPA text format (log10 probabilities and
    /// backoff weights), words rendered through `vocab`.
    pub fn to_arpa(&self, vocab: &Vocabulary) -> Result<String> {
        let mut out = String::from("\\data\\\n");
        for (o, table) in self.probs.iter().enumerate() {
            out.push_str(&format!("ngram {}={}\n", o + 1, table.len()));
        }
        for (o, table) in self.probs.iter().enumerate() {
            out.push_str(&format!("\n\\{}-grams:\n", o + 1));
            let mut grams: Vec<&Vec<u32>> = table.keys().collect();
            grams.sort();
            for gram in grams {
                let lp = table[gram];
                let words: Vec<&str> = gram
                    .iter()
                    .map(|&id| {
                        vocab.token(id).ok_or_else(|| {
                            Error::Format(format!("id {id} outside the vocabulary"))
                        })
                    })
                    .collect::<Result<_>>()?;
                out.push_str(&format!("{lp:.7}\t{}", words.join(" ")));
                if gram.len() < self.order {
                    if let Some(&bow) = self.bows[gram.len() - 1].get(gram) {
                        out.push_str(&format!("\t{bow:.7}"));
                    }
                }
                out.push('\n');
            }
        }
        out.push_str("\n\\end\\\n");
        Ok(out)
    }

    /// Parse an ARPA file produced by this or another toolkit. All words
    /// must exist in `vocab`.
    pub fn from_arpa(text: &str, vocab: &Vocabulary) -> Result<Self> {
        let mut lines = text.lines().peekable();
        // skip to \data\
        for line in lines.by_ref() {
            if line.trim() == "\\data\\" {
                break;
            }
        }
        let mut counts = Vec::new();
        for line in lines.by_ref() {
            let line = line.trim();
            if line.is_empty() {
                break;
            }
            let rest = line
                .strip_prefix("ngram ")
                .ok_or_else(|| Error::Format(format!("expected 'ngram N=M', got '{line}'")))?;
            let (_, m) = rest
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("expected 'ngram N=M', got '{line}'")))?;
            counts.push(m.trim().parse::<usize>().map_err(|_| {
                Error::Format(format!("bad ngram count in '{line}'"))
            })?);
        }
        if counts.is_empty() {
            return Err(Error::Format("ARPA header lists no orders".into()));
        }
        let order = counts.len();
        let mut probs: Vec<HashMap<Vec<u32>, f64>> = vec![HashMap::new(); order];
        let mut bows: Vec<HashMap<Vec<u32>, f64>> = vec![HashMap::new(); order];
        let mut current: Option<usize> = None;
        for line in lines {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if line == "\\end\\" {
                break;
            }
            if let Some(rest) = line.strip_prefix('\\') {
                let o = rest
                    .strip_suffix("-grams:")
                    .and_then(|d| d.parse::<usize>().ok())
                    .ok_or_else(|| Error::Format(format!("unexpected section '{line}'")))?;
                if o < 1 || o > order {
                    return Err(Error::Format(format!("section order {o} outside header")));
                }
                current = Some(o);
                continue;
            }
            let o = current.ok_or_else(|| Error::Format("ngram entry before any section".into()))?;
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() < 1 + o {
                return Err(Error::Format(format!("short ngram line '{line}'")));
            }
            let lp: f64 = fields[0]
                .parse()
                .map_err(|_| Error::Format(format!("bad log10 prob in '{line}'")))?;
            let ids: Vec<u32> = fields[1..1 + o]
                .iter()
                .map(|w| {
                    vocab
                        .id(w)
                        .ok_or_else(|| Error::Format(format!("word '{w}' not in vocabulary")))
                })
                .collect::<Result<_>>()?;
            if fields.len() > 1 + o {
                let bow: f64 = fields[1 + o]
                    .parse()
                    .map_err(|_| Error::Format(format!("bad backoff weight in '{line}'")))?;
                bows[o - 1].insert(ids.clone(), bow);
            }
            probs[o - 1].insert(ids, lp);
        }
        for (o, want) in counts.iter().enumerate() {
            if probs[o].len() != *want {
                return Err(Error::Format(format!(
                    "order {} lists {} entries, header said {want}",
                    o + 1,
                    probs[o].len()
                )));
            }
        }
        Ok(NGramModel {
            order,
            vocab_size: vocab.size(),
            probs,
            bows,
            smoothing: Smoothing::Additive { alpha: f64::NAN }, // unknown provenance
        })
    }

    pub fn save_arpa(&self, path: &Path, vocab: &Vocabulary) -> Result<()> {
        fs::write(path, self.to_arpa(vocab)?)?;
        Ok(())
    }

    pub fn load_arpa(path: &Path, vocab: &Vocabulary) -> Result<Self> {
        Self::from_arpa(&fs::read_to_string(path)?, vocab)
    }
}

/// Per-word convex combination of a neural and an n-gram probability.
pub fn interpolate(p_neural: f64, p_ngram: f64, lambda: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("interpolation weight {lambda} outside [0, 1]")));
    }
    if !(0.0..=1.0).contains(&p_neural) || !(0.0..=1.0).contains(&p_ngram) {
        return Err(Error::Contract(format!(
            "probabilities outside [0, 1]: neural {p_neural}, ngram {p_ngram}"
        )));
    }
    Ok(lambda * p_neural + (1.0 - lambda) * p_ngram)
}

/// Train a backoff model of the given order. `discount` overrides the
/// count-of-counts estimate (applied to every order) when set.
pub fn train_ngram(
    lines: &[String],
    vocab: &Vocabulary,
    order: usize,
    discount: Option<f64>,
) -> Result<NGramModel> {
    if lines.is_empty() {
        return Err(Error::Input("cannot train an n-gram model on an empty corpus".into()));
    }
    if order < 1 {
        return Err(Error::Config("n-gram order must be >= 1".into()));
    }
    if let Some(d) = discount {
        if !(0.0..1.0).contains(&d) {
            return Err(Error::Config(format!("discount {d} outside [0, 1)")));
        }
    }
    let sentences: Vec<Vec<u32>> = lines.iter().map(|l| vocab.tokenize(l)).collect();
    let n_tokens: usize = sentences.iter().map(Vec::len).sum();

    // raw counts per order
    let mut raw: Vec<HashMap<Vec<u32>, u64>> = vec![HashMap::new(); order];
    for sent in &sentences {
        for o in 1..=order {
            if sent.len() < o {
                continue;
            }
            for window in sent.windows(o) {
                *raw[o - 1].entry(window.to_vec()).or_insert(0) += 1;
            }
        }
    }

    if n_tokens < FALLBACK_TOKEN_THRESHOLD {
        return additive_model(&raw, order, vocab);
    }
    let adjusted = adjusted_counts(&raw, order);
    let discounts = match discount {
        Some(d) => vec![d; order],
        None => estimate_discounts(&adjusted),
    };
    kneser_ney_model(&adjusted, order, vocab, discounts)
}

/// Continuation counts for orders below the highest; n-grams beginning with
/// the sentence-start marker keep raw counts since they cannot be extended
/// to the left.
fn adjusted_counts(raw: &[HashMap<Vec<u32>, u64>], order: usize) -> Vec<HashMap<Vec<u32>, u64>> {
    let bos = crate::corpus::BOS;
    let mut adjusted: Vec<HashMap<Vec<u32>, u64>> = vec![HashMap::new(); order];
    adjusted[order - 1] = raw[order - 1].clone();
    for o in (1..order).rev() {
        let mut cont: HashMap<Vec<u32>, u64> = HashMap::new();
        for gram in raw[o].keys() {
            // gram has length o+1; its suffix of length o gains one left type
            *cont.entry(gram[1..].to_vec()).or_insert(0) += 1;
        }
        for (gram, &c) in &raw[o - 1] {
            if gram[0] == bos {
                cont.insert(gram.clone(), c);
            }
        }
        adjusted[o - 1] = cont;
    }
    adjusted
}

/// One absolute discount per order: `n1 / (n1 + 2 n2)` over the counts used
/// at that order. Saturated orders (no singletons or no doubletons, typical
/// for unigrams over a small dense vocabulary) get a fixed 0.5.
fn estimate_discounts(adjusted: &[HashMap<Vec<u32>, u64>]) -> Vec<f64> {
    adjusted
        .iter()
        .map(|table| {
            let n1 = table.values().filter(|&&c| c == 1).count() as f64;
            let n2 = table.values().filter(|&&c| c == 2).count() as f64;
            if n1 == 0.0 || n2 == 0.0 {
                0.5
            } else {
                n1 / (n1 + 2.0 * n2)
            }
        })
        .collect()
}

/// Group an order's counts by context, with word lists sorted for
/// deterministic float accumulation.
fn by_context(table: &HashMap<Vec<u32>, u64>) -> HashMap<Vec<u32>, Vec<(u32, u64)>> {
    let mut ctxs: HashMap<Vec<u32>, Vec<(u32, u64)>> = HashMap::new();
    for (gram, &c) in table {
        let (ctx, w) = gram.split_at(gram.len() - 1);
        ctxs.entry(ctx.to_vec()).or_default().push((w[0], c));
    }
    for words in ctxs.values_mut() {
        words.sort();
    }
    ctxs
}

fn kneser_ney_model(
    adjusted: &[HashMap<Vec<u32>, u64>],
    order: usize,
    vocab: &Vocabulary,
    discounts: Vec<f64>,
) -> Result<NGramModel> {
    let v = vocab.size() as f64;
    let mut model = NGramModel {
        order,
        vocab_size: vocab.size(),
        probs: vec![HashMap::new(); order],
        bows: vec![HashMap::new(); order],
        smoothing: Smoothing::KneserNey { discounts: discounts.clone() },
    };

    // unigrams: discounted continuation counts interpolated with 1/V
    {
        let d = discounts[0];
        let total: u64 = adjusted[0].values().sum();
        let distinct = adjusted[0].len() as f64;
        let total = total as f64;
        if total == 0.0 {
            return Err(Error::Input("no unigrams observed".into()));
        }
        let unseen = d * distinct / total / v;
        for id in 0..vocab.size() as u32 {
            let c = adjusted[0].get(&vec![id]).copied().unwrap_or(0) as f64;
            let p = (c - d).max(0.0) / total + unseen;
            model.probs[0].insert(vec![id], p.log10());
        }
    }

    for o in 2..=order {
        let d = discounts[o - 1];
        let ctxs = by_context(&adjusted[o - 1]);
        let mut ctx_keys: Vec<&Vec<u32>> = ctxs.keys().collect();
        ctx_keys.sort();
        for ctx in ctx_keys {
            let words = &ctxs[ctx];
            let total: u64 = words.iter().map(|&(_, c)| c).sum();
            let total = total as f64;
            let distinct = words.len() as f64;
            let gamma = d * distinct / total;
            for &(w, c) in words {
                let lower = model.prob(&ctx[1..], w);
                let p = ((c as f64) - d).max(0.0) / total + gamma * lower;
                let mut gram = ctx.clone();
                gram.push(w);
                model.probs[o - 1].insert(gram, p.log10());
            }
            model.bows[ctx.len() - 1].insert(ctx.clone(), gamma.log10());
        }
    }
    Ok(model)
}

fn additive_model(
    raw: &[HashMap<Vec<u32>, u64>],
    order: usize,
    vocab: &Vocabulary,
) -> Result<NGramModel> {
    let alpha = ADDITIVE_ALPHA;
    let v = vocab.size() as f64;
    let mut model = NGramModel {
        order,
        vocab_size: vocab.size(),
        probs: vec![HashMap::new(); order],
        bows: vec![HashMap::new(); order],
        smoothing: Smoothing::Additive { alpha },
    };

    {
        let total: u64 = raw[0].values().sum();
        let total = total as f64;
        if total == 0.0 {
            return Err(Error::Input("no unigrams observed".into()));
        }
        for id in 0..vocab.size() as u32 {
            let c = raw[0].get(&vec![id]).copied().unwrap_or(0) as f64;
            model.probs[0].insert(vec![id], ((c + alpha) / (total + alpha * v)).log10());
        }
    }

    for o in 2..=order {
        let ctxs = by_context(&raw[o - 1]);
        let mut ctx_keys: Vec<&Vec<u32>> = ctxs.keys().collect();
        ctx_keys.sort();
        for ctx in ctx_keys {
            let words = &ctxs[ctx];
            let ext: u64 = words.iter().map(|&(_, c)| c).sum();
            let denom = ext as f64 + alpha * v;
            let mut seen_mass = 0.0;
            let mut lower_seen_mass = 0.0;
            for &(w, c) in words {
                let p = (c as f64 + alpha) / denom;
                seen_mass += p;
                lower_seen_mass += model.prob(&ctx[1..], w);
                let mut gram = ctx.clone();
                gram.push(w);
                model.probs[o - 1].insert(gram, p.log10());
            }
            // route the remaining mass through the lower order (Katz-style)
            let bow = if lower_seen_mass < 1.0 - 1e-12 {
                (1.0 - seen_mass) / (1.0 - lower_seen_mass)
            } else {
                1.0
            };
            model.bows[ctx.len() - 1].insert(ctx.clone(), bow.max(1e-99).log10());
        }
    }
    Ok(model)
}
