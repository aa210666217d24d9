//! Vocabularies, word-level tokenization, dataset splits and synthetic
//! corpora drawn from seeded order-2 Markov chains.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const BOS: u32 = 0;
pub const EOS: u32 = 1;
pub const UNK: u32 = 2;
pub const PAD: u32 = 3;

pub const RESERVED: [&str; 4] = ["<s>", "</s>", "<unk>", "<pad>"];

/// Token <-> id bijection with fixed reserved ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().cloned().zip(0u32..).collect();
        Vocabulary { tokens, index }
    }

    /// Frequency-ranked vocabulary over whitespace tokens. Ties break
    /// lexicographically; reserved tokens are always present and `max_size`
    /// caps the total size including them.
    pub fn build(lines: &[String], max_size: usize, min_count: usize) -> Result<Self> {
        if lines.is_empty() {
            return Err(Error::Input("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for line in lines {
            for w in line.split_whitespace() {
                *counts.entry(w).or_insert(0) += 1;
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|(w, c)| *c >= min_count && !RESERVED.contains(w))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));

        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        for (w, _) in ranked {
            if tokens.len() >= max_size.max(RESERVED.len()) {
                break;
            }
            tokens.push(w.to_string());
        }
        Ok(Vocabulary::from_tokens(tokens))
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Whitespace tokenization with start/end markers; unknown words map to
    /// `<unk>`. Also reports how many words were out of vocabulary.
    pub fn tokenize_counting(&self, line: &str) -> (Vec<u32>, usize) {
        let mut ids = vec![BOS];
        let mut oov = 0;
        for w in line.split_whitespace() {
            match self.id(w) {
                Some(id) => ids.push(id),
                None => {
                    ids.push(UNK);
                    oov += 1;
                }
            }
        }
        ids.push(EOS);
        (ids, oov)
    }

    pub fn tokenize(&self, line: &str) -> Vec<u32> {
        self.tokenize_counting(line).0
    }

    /// Inverse of `tokenize` for in-vocabulary text: drops markers, joins
    /// words with single spaces.
    pub fn detokenize(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&id| id != BOS && id != EOS && id != PAD)
            .filter_map(|&id| self.token(id))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// `token<TAB>id` lines, one per token, id order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for (i, t) in self.tokens.iter().enumerate() {
            out.push_str(t);
            out.push('\t');
            out.push_str(&i.to_string());
            out.push('\n');
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut tokens = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let (token, id) = line.split_once('\t').ok_or_else(|| {
                Error::Format(format!("vocabulary line {} has no tab separator", lineno + 1))
            })?;
            let id: usize = id
                .trim()
                .parse()
                .map_err(|_| Error::Format(format!("bad id on vocabulary line {}", lineno + 1)))?;
            if id != tokens.len() {
                return Err(Error::Format(format!(
                    "vocabulary ids must be dense and ordered; expected {} got {}",
                    tokens.len(),
                    id
                )));
            }
            tokens.push(token.to_string());
        }
        for (i, r) in RESERVED.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*r) {
                return Err(Error::Format(format!("reserved token {r} missing at id {i}")));
            }
        }
        Ok(Vocabulary::from_tokens(tokens))
    }

    /// Stable content fingerprint used for cross-artifact compatibility checks.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update([0u8]);
        }
        hex(&h.finalize())
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Order-2 Markov chain generator spec. The chain structure and transition
/// probabilities are fully determined by the spec (including `chain_seed`);
/// sentence sampling is driven by a separate generation seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub vocab_size: usize,
    /// Distinct successors drawn per context.
    pub branching: usize,
    pub chain_seed: u64,
    /// Successor weight skew; 0 gives a uniform distribution over successors.
    #[serde(default = "default_skew")]
    pub skew: f64,
    #[serde(default = "default_len_min")]
    pub len_min: usize,
    #[serde(default = "default_len_max")]
    pub len_max: usize,
    /// Per-step stop probability once a sentence reaches `len_min`.
    #[serde(default = "default_stop_prob")]
    pub stop_prob: f64,
}

fn default_skew() -> f64 {
    1.0
}
fn default_len_min() -> usize {
    4
}
fn default_len_max() -> usize {
    18
}
fn default_stop_prob() -> f64 {
    0.1
}

/// Context symbol used before any real token.
const START: usize = usize::MAX;

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 1 {
            return Err(Error::Config("synthetic vocab_size must be >= 1".into()));
        }
        if self.branching < 1 || self.branching > self.vocab_size {
            return Err(Error::Config(format!(
                "branching {} outside 1..={}",
                self.branching, self.vocab_size
            )));
        }
        if self.len_min < 1 || self.len_max < self.len_min {
            return Err(Error::Config("need 1 <= len_min <= len_max".into()));
        }
        if !(0.0..=1.0).contains(&self.stop_prob) {
            return Err(Error::Config("stop_prob outside [0, 1]".into()));
        }
        Ok(())
    }

    pub fn word(&self, i: usize) -> String {
        format!("w{i:04}")
    }

    pub fn parse_word(&self, w: &str) -> Result<usize> {
        w.strip_prefix('w')
            .and_then(|d| d.parse::<usize>().ok())
            .filter(|&i| i < self.vocab_size)
            .ok_or_else(|| Error::Input(format!("'{w}' is not a word of this synthetic source")))
    }

    /// Successor ids and probabilities for a context (deterministic in the
    /// spec). Context symbols are word indices or `START`.
    fn successors(&self, a: usize, b: usize) -> (Vec<usize>, Vec<f64>) {
        let v = self.vocab_size as u64;
        let ak = if a == START { v } else { a as u64 };
        let bk = if b == START { v } else { b as u64 };
        let key = ak * (v + 1) + bk;
        let mut rng =
            ChaCha8Rng::seed_from_u64(self.chain_seed ^ key.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        // partial Fisher-Yates for `branching` distinct successors
        let mut pool: Vec<usize> = (0..self.vocab_size).collect();
        let mut ids = Vec::with_capacity(self.branching);
        for i in 0..self.branching {
            let j = rng.gen_range(i..pool.len());
            pool.swap(i, j);
            ids.push(pool[i]);
        }
        let mut weights: Vec<f64> =
            (0..self.branching).map(|_| (rng.gen::<f64>() + 0.1).powf(self.skew)).collect();
        let total: f64 = weights.iter().sum();
        for w in &mut weights {
            *w /= total;
        }
        (ids, weights)
    }

    fn stop_prob_after(&self, emitted: usize) -> f64 {
        if emitted >= self.len_max {
            1.0
        } else if emitted >= self.len_min {
            self.stop_prob
        } else {
            0.0
        }
    }

    fn sample_sentence(&self, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let (mut a, mut b) = (START, START);
        let mut out = Vec::new();
        loop {
            let (ids, probs) = self.successors(a, b);
            let mut u = rng.gen::<f64>();
            let mut chosen = ids[ids.len() - 1];
            for (&id, &p) in ids.iter().zip(&probs) {
                if u < p {
                    chosen = id;
                    break;
                }
                u -= p;
            }
            out.push(chosen);
            a = b;
            b = chosen;
            let stop = self.stop_prob_after(out.len());
            if stop >= 1.0 || (stop > 0.0 && rng.gen::<f64>() < stop) {
                break;
            }
        }
        out
    }

    /// Exact negative log-likelihood (nats) the source assigns to one of its
    /// own sentences, counting content tokens and the final stop decision
    /// (the analogue of the end marker). Start transitions are conditioning
    /// context, not predicted events.
    pub fn sentence_nll(&self, words: &[usize]) -> Result<f64> {
        let (mut a, mut b) = (START, START);
        let mut nll = 0.0;
        for (i, &w) in words.iter().enumerate() {
            let (ids, probs) = self.successors(a, b);
            let p = ids
                .iter()
                .position(|&id| id == w)
                .map(|pos| probs[pos])
                .ok_or_else(|| {
                    Error::Input(format!("word {w} impossible after context at position {i}"))
                })?;
            nll -= p.ln();
            a = b;
            b = w;
        }
        // continuation decisions after tokens 1..L-1, stop decision after L
        for emitted in 1..words.len() {
            nll -= (1.0 - self.stop_prob_after(emitted)).ln();
        }
        let stop = self.stop_prob_after(words.len());
        if stop <= 0.0 {
            return Err(Error::Input(format!(
                "sentence of {} tokens cannot terminate under this spec",
                words.len()
            )));
        }
        nll -= stop.ln();
        Ok(nll)
    }

    /// Entropy rate of the symbol process in nats/symbol, from a long-run
    /// average of the state distribution (Cesaro-averaged power iteration).
    pub fn entropy_rate(&self) -> f64 {
        let v = self.vocab_size;
        let n_states = v * v;
        let mut pi = vec![1.0 / n_states as f64; n_states];
        let mut avg = vec![0.0; n_states];
        let iters = 400;
        let mut table = Vec::with_capacity(n_states);
        for a in 0..v {
            for b in 0..v {
                table.push(self.successors(a, b));
            }
        }
        for _ in 0..iters {
            let mut next = vec![0.0; n_states];
            for (s, mass) in pi.iter().enumerate() {
                if *mass == 0.0 {
                    continue;
                }
                let b = s % v;
                let (ids, probs) = &table[s];
                for (&c, &p) in ids.iter().zip(probs) {
                    next[b * v + c] += mass * p;
                }
            }
            for (a, n) in avg.iter_mut().zip(&next) {
                *a += n / iters as f64;
            }
            pi = next;
        }
        let total: f64 = avg.iter().sum();
        let mut h = 0.0;
        for (s, mass) in avg.iter().enumerate() {
            if *mass == 0.0 {
                continue;
            }
            let (_, probs) = &table[s];
            let hs: f64 = probs.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum();
            h += mass / total * hs;
        }
        h
    }
}

/// A generated corpus split into disjoint line ranges.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub train: Vec<String>,
    pub dev: Vec<String>,
    pub test: Vec<String>,
}

/// Generate `n_train + n_dev + n_test` sentences with one sequential RNG so
/// the full corpus is reproducible from `(spec, seed)`.
pub fn generate_synthetic(
    spec: &SyntheticSpec,
    seed: u64,
    n_train: usize,
    n_dev: usize,
    n_test: usize,
) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sentence = || -> String {
        let ids = spec.sample_sentence(&mut rng);
        ids.iter().map(|&i| spec.word(i)).collect::<Vec<_>>().join(" ")
    };
    Ok(SyntheticCorpus {
        train: (0..n_train).map(|_| sentence()).collect(),
        dev: (0..n_dev).map(|_| sentence()).collect(),
        test: (0..n_test).map(|_| sentence()).collect(),
    })
}

/// Split manifest: half-open line ranges into a single corpus file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub train: (usize, usize),
    pub dev: (usize, usize),
    pub test: (usize, usize),
}

/// Write `corpus.txt` (one sentence per line) plus `splits.json` into `dir`.
pub fn write_corpus(dir: &Path, corpus: &SyntheticCorpus) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut all = String::new();
    for line in corpus.train.iter().chain(&corpus.dev).chain(&corpus.test) {
        all.push_str(line);
        all.push('\n');
    }
    fs::write(dir.join("corpus.txt"), all)?;
    let n_tr = corpus.train.len();
    let n_dev = corpus.dev.len();
    let n_te = corpus.test.len();
    let manifest = SplitManifest {
        train: (0, n_tr),
        dev: (n_tr, n_tr + n_dev),
        test: (n_tr + n_dev, n_tr + n_dev + n_te),
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Format(format!("manifest serialization: {e}")))?;
    fs::write(dir.join("splits.json"), json)?;
    Ok(())
}

/// Load a corpus directory written by [`write_corpus`].
pub fn load_corpus(dir: &Path) -> Result<SyntheticCorpus> {
    let lines = load_lines(&dir.join("corpus.txt"))?;
    let manifest: SplitManifest =
        serde_json::from_str(&fs::read_to_string(dir.join("splits.json"))?)
            .map_err(|e| Error::Format(format!("splits.json: {e}")))?;
    let slice = |range: (usize, usize)| -> Result<Vec<String>> {
        if range.1 < range.0 || range.1 > lines.len() {
            return Err(Error::Format(format!("split range {range:?} outside corpus")));
        }
        Ok(lines[range.0..range.1].to_vec())
    };
    Ok(SyntheticCorpus {
        train: slice(manifest.train)?,
        dev: slice(manifest.dev)?,
        test: slice(manifest.test)?,
    })
}

pub fn load_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Input(format!("cannot read corpus {}: {e}", path.display())))?;
    Ok(text.lines().map(str::to_string).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lines(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn build_vocab_frequency_then_lexicographic() {
        let vocab = Vocabulary::build(&lines(&["a b a"]), 10, 1).unwrap();
        assert_eq!(vocab.size(), 6);
        assert_eq!(vocab.id("a"), Some(4));
        assert_eq!(vocab.id("b"), Some(5));
    }

    #[test]
    fn build_vocab_min_count_maps_to_unk() {
        let vocab = Vocabulary::build(&lines(&["a b a"]), 10, 2).unwrap();
        assert_eq!(vocab.id("b"), None);
        let (ids, oov) = vocab.tokenize_counting("a b");
        assert_eq!(ids, vec![BOS, 4, UNK, EOS]);
        assert_eq!(oov, 1);
    }

    #[test]
    fn build_vocab_is_deterministic() {
        let c = lines(&["c a b", "b c", "c"]);
        let v1 = Vocabulary::build(&c, 10, 1).unwrap();
        let v2 = Vocabulary::build(&c, 10, 1).unwrap();
        assert_eq!(v1, v2);
        // c (3) before b (2) before a (1)
        assert_eq!(v1.id("c"), Some(4));
        assert_eq!(v1.id("b"), Some(5));
        assert_eq!(v1.id("a"), Some(6));
    }

    #[test]
    fn build_vocab_rejects_empty_corpus() {
        assert!(Vocabulary::build(&[], 10, 1).is_err());
    }

    #[test]
    fn tokenize_empty_line_is_markers_only() {
        let vocab = Vocabulary::build(&lines(&["a"]), 10, 1).unwrap();
        assert_eq!(vocab.tokenize(""), vec![BOS, EOS]);
        assert_eq!(vocab.tokenize("a"), vec![BOS, 4, EOS]);
    }

    #[test]
    fn vocab_save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let vocab = Vocabulary::build(&lines(&["x y z y"]), 10, 1).unwrap();
        let path = dir.path().join("vocab.tsv");
        vocab.save(&path).unwrap();
        let loaded = Vocabulary::load(&path).unwrap();
        assert_eq!(vocab, loaded);
        assert_eq!(vocab.fingerprint(), loaded.fingerprint());
    }

    #[test]
    fn synthetic_generation_is_reproducible() {
        let spec = SyntheticSpec {
            vocab_size: 20,
            branching: 3,
            chain_seed: 5,
            skew: 1.0,
            len_min: 3,
            len_max: 9,
            stop_prob: 0.2,
        };
        let a = generate_synthetic(&spec, 77, 50, 10, 10).unwrap();
        let b = generate_synthetic(&spec, 77, 50, 10, 10).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(&spec, 78, 50, 10, 10).unwrap();
        assert_ne!(a, c);
        for line in &a.train {
            let n = line.split_whitespace().count();
            assert!((3..=9).contains(&n));
        }
    }

    #[test]
    fn deterministic_chain_scores_its_output_at_ppl_one() {
        let spec = SyntheticSpec {
            vocab_size: 6,
            branching: 1,
            chain_seed: 9,
            skew: 1.0,
            len_min: 5,
            len_max: 5,
            stop_prob: 0.0,
        };
        let corpus = generate_synthetic(&spec, 1, 3, 0, 0).unwrap();
        assert_eq!(corpus.train[0], corpus.train[1]);
        let words: Vec<usize> =
            corpus.train[0].split_whitespace().map(|w| spec.parse_word(w).unwrap()).collect();
        let nll = spec.sentence_nll(&words).unwrap();
        assert_eq!(nll, 0.0); // perplexity exactly 1
        assert!(spec.entropy_rate().abs() < 1e-12);
    }

    #[test]
    fn uniform_chain_entropy_is_log_vocab() {
        let spec = SyntheticSpec {
            vocab_size: 8,
            branching: 8,
            chain_seed: 3,
            skew: 0.0,
            len_min: 4,
            len_max: 12,
            stop_prob: 0.1,
        };
        assert!((spec.entropy_rate() - (8.0f64).ln()).abs() < 1e-9);
    }

    #[test]
    fn corpus_write_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec {
            vocab_size: 12,
            branching: 2,
            chain_seed: 11,
            skew: 1.0,
            len_min: 2,
            len_max: 6,
            stop_prob: 0.3,
        };
        let corpus = generate_synthetic(&spec, 4, 20, 5, 5).unwrap();
        write_corpus(dir.path(), &corpus).unwrap();
        let loaded = load_corpus(dir.path()).unwrap();
        assert_eq!(corpus, loaded);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn tokenize_detokenize_round_trips_in_vocab_text(
            words in proptest::collection::vec(
                proptest::sample::select(vec!["alpha", "beta", "gamma", "delta"]),
                0..12,
            )
        ) {
            let corpus = lines(&["alpha beta gamma delta"]);
            let vocab = Vocabulary::build(&corpus, 10, 1).unwrap();
            let line = words.join(" ");
            let ids = vocab.tokenize(&line);
            prop_assert_eq!(vocab.detokenize(&ids), line);
        }
    }
}
