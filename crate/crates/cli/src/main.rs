//! Command-line driver: corpus generation, vocabulary construction, n-gram
//! and Transformer training, Bayesian promotion, adaptation, evaluation,
//! N-best rescoring, width sweeps and the numeric verification commands.
//!
//! Exit codes: 0 success, 2 usage/config errors, 3 numerical failures,
//! 4 I/O and file-format errors.

mod manifest;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use manifest::RunContext;
use varlm::bayes::{materialize_mean, parse_sites, promote, BayesConfig, PredictiveMode};
use varlm::checkpoint;
use varlm::corpus::{generate_synthetic, load_corpus, load_lines, SyntheticSpec, Vocabulary};
use varlm::error::{Error, Result};
use varlm::eval::{
    corpus_perplexity, parse_nbest, rescore_nbest, sweep_tsv, tune_lambda, width_sweep,
    SweepConfig, Variant,
};
use varlm::model::{Model, ModelConfig};
use varlm::ngram::{train_ngram, NGramModel};
use varlm::train::{train, KlScale, TrainConfig, TrainResult};

#[derive(Parser)]
#[command(name = "varlm", version, about = "Transformer language modeling with variational Bayesian weight estimation")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args, Debug, Clone)]
struct ArchArgs {
    /// Number of decoder blocks.
    #[arg(long)]
    n_blocks: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    /// Feed-forward width.
    #[arg(long)]
    d_ff: Option<usize>,
    #[arg(long)]
    n_heads: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    /// Dropout rate used in training mode (0 disables).
    #[arg(long)]
    dropout: Option<f64>,
    /// Reuse the embedding table as the output projection.
    #[arg(long)]
    tie_embeddings: bool,
}

impl ArchArgs {
    fn any_set(&self) -> bool {
        self.n_blocks.is_some()
            || self.d_model.is_some()
            || self.d_ff.is_some()
            || self.n_heads.is_some()
            || self.max_len.is_some()
            || self.dropout.is_some()
            || self.tie_embeddings
    }

    fn build(&self, vocab_size: usize) -> Result<ModelConfig> {
        let cfg = ModelConfig {
            n_blocks: self.n_blocks.unwrap_or(6),
            d_model: self.d_model.unwrap_or(512),
            d_ff: self.d_ff.unwrap_or(4096),
            n_heads: self.n_heads.unwrap_or(8),
            vocab_size,
            max_len: self.max_len.unwrap_or(512),
            dropout_rate: self.dropout.unwrap_or(0.0),
            tie_embeddings: self.tie_embeddings,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug, Clone)]
struct TrainArgs {
    /// TOML file with training settings; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    lr_decay: Option<f64>,
    #[arg(long)]
    lr_floor: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Parameter samples per batch.
    #[arg(long)]
    k_train: Option<usize>,
    /// KL mini-batch scaling: batch_fraction or off.
    #[arg(long)]
    kl_scale: Option<String>,
    #[arg(long)]
    clip_norm: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    no_shuffle: bool,
}

impl TrainArgs {
    fn build(&self) -> Result<TrainConfig> {
        let mut cfg: TrainConfig = match &self.config {
            Some(p) => toml::from_str(&fs::read_to_string(p)?)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
            None => TrainConfig::default(),
        };
        if let Some(v) = self.learning_rate {
            cfg.learning_rate = v;
        }
        if let Some(v) = self.lr_decay {
            cfg.lr_decay = v;
        }
        if let Some(v) = self.lr_floor {
            cfg.lr_floor = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.k_train {
            cfg.k_train = v;
        }
        if let Some(v) = &self.kl_scale {
            cfg.kl_scale = match v.as_str() {
                "batch_fraction" | "batch-fraction" => KlScale::BatchFraction,
                "off" => KlScale::Off,
                other => {
                    return Err(Error::Config(format!(
                        "unknown kl_scale '{other}' (batch_fraction or off)"
                    )))
                }
            };
        }
        if let Some(v) = self.clip_norm {
            cfg.clip_norm = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if self.no_shuffle {
            cfg.shuffle = false;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug, Clone)]
struct CorpusArgs {
    /// Corpus directory holding corpus.txt and splits.json.
    #[arg(long, conflicts_with_all = ["train", "dev"])]
    corpus_dir: Option<PathBuf>,
    /// Training text, one sentence per line.
    #[arg(long, requires = "dev")]
    train: Option<PathBuf>,
    /// Dev text, one sentence per line.
    #[arg(long, requires = "train")]
    dev: Option<PathBuf>,
}

impl CorpusArgs {
    fn load(&self, ctx: &mut RunContext) -> Result<(Vec<String>, Vec<String>)> {
        match (&self.corpus_dir, &self.train, &self.dev) {
            (Some(dir), _, _) => {
                ctx.record_input(&dir.join("corpus.txt"))?;
                ctx.record_input(&dir.join("splits.json"))?;
                let c = load_corpus(dir)?;
                Ok((c.train, c.dev))
            }
            (None, Some(tr), Some(dv)) => {
                ctx.record_input(tr)?;
                ctx.record_input(dv)?;
                Ok((load_lines(tr)?, load_lines(dv)?))
            }
            _ => Err(Error::Config(
                "supply either --corpus-dir or both --train and --dev".into(),
            )),
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic Markov-chain corpus with train/dev/test splits.
    GenSynthetic {
        /// TOML spec of the chain (vocab_size, branching, chain_seed, ...).
        #[arg(long)]
        spec: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 2000)]
        train_sentences: usize,
        #[arg(long, default_value_t = 500)]
        dev_sentences: usize,
        #[arg(long, default_value_t = 0)]
        test_sentences: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build a frequency-ranked vocabulary from corpus text.
    BuildVocab {
        #[arg(long, required = true)]
        corpus: Vec<PathBuf>,
        #[arg(long, default_value_t = 30_000)]
        max_size: usize,
        #[arg(long, default_value_t = 1)]
        min_count: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the backoff 4-gram model; exports ARPA.
    TrainNgram {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long, default_value_t = 4)]
        order: usize,
        /// Override the count-of-counts discount estimate.
        #[arg(long)]
        discount: Option<f64>,
        /// Optional dev set; its perplexity goes into the manifest.
        #[arg(long)]
        dev: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a Transformer LM (deterministic or variational).
    Train {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long)]
        vocab: PathBuf,
        /// Continue from an existing checkpoint instead of a fresh model.
        #[arg(long)]
        init_from: Option<PathBuf>,
        #[command(flatten)]
        arch: ArchArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Replace selected weights with variational sites.
    Promote {
        /// Model to promote.
        #[arg(long)]
        model: PathBuf,
        /// Prior checkpoint (defaults to the model itself).
        #[arg(long)]
        prior: Option<PathBuf>,
        /// Site list, e.g. "1:FF", "EMB,1-3:FF", "2:MHA".
        #[arg(long)]
        sites: String,
        #[arg(long, default_value_t = -3.0)]
        log_sigma_init: f64,
        #[arg(long, default_value_t = 1)]
        k_train: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Adapt a trained model to a target corpus.
    Adapt {
        /// fine-tune or bayes-adapt.
        #[arg(long)]
        mode: String,
        /// Source checkpoint (fine-tune) or fine-tuned reference (bayes-adapt).
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long)]
        vocab: PathBuf,
        /// Sites for bayes-adapt (default "1:FF").
        #[arg(long, default_value = "1:FF")]
        sites: String,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Perplexity of a corpus under a checkpoint.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        /// mean or mc:K.
        #[arg(long, default_value = "mean")]
        mode: String,
        /// ARPA n-gram model for interpolation.
        #[arg(long)]
        ngram: Option<PathBuf>,
        /// Interpolation weight on the neural model.
        #[arg(long)]
        lambda: Option<f64>,
        /// Tune the interpolation weight on this corpus instead.
        #[arg(long)]
        tune_lambda: bool,
        #[arg(long, default_value_t = 0)]
        mc_seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-rank an N-best list with the LM.
    Rescore {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        /// Line format: utterance_id acoustic_score words...
        #[arg(long)]
        nbest: PathBuf,
        #[arg(long, default_value_t = 10.0)]
        lm_scale: f64,
        /// Word insertion penalty per hypothesis word.
        #[arg(long, default_value_t = 0.0)]
        wip: f64,
        #[arg(long)]
        ngram: Option<PathBuf>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long, default_value = "mean")]
        mode: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train/evaluate a grid over feed-forward widths and model variants.
    Sweep {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long)]
        vocab: PathBuf,
        /// Comma-separated feed-forward widths.
        #[arg(long, default_value = "512,1024,2048,4096,8192,16384")]
        widths: String,
        /// Comma-separated: deterministic, dropout, bayes-ff-1.
        #[arg(long, default_value = "deterministic,dropout,bayes-ff-1")]
        variants: String,
        #[arg(long, default_value = "1,2,3,4,5")]
        seeds: String,
        #[arg(long, default_value_t = 0.1)]
        dropout_rate: f64,
        #[command(flatten)]
        arch: ArchArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference gradient verification; exits 3 on violation.
    GradCheck {
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Monte-Carlo vs. closed-form KL verification; exits 3 on violation.
    KlCheck {
        #[arg(long, default_value_t = 20)]
        sites: usize,
        #[arg(long, default_value_t = 4)]
        dims: usize,
        #[arg(long, default_value_t = 10_000_000)]
        samples: usize,
        #[arg(long, default_value_t = 0.01)]
        tol: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Input(_) | Error::Shape(_) | Error::Contract(_) => 2,
        Error::Numerics(_) => 3,
        Error::Io(_) | Error::Format(_) => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn load_vocab(path: &Path) -> Result<Vocabulary> {
    Vocabulary::load(path)
}

fn load_model_for(vocab: &Vocabulary, path: &Path) -> Result<(Model, Option<BayesConfig>)> {
    let ckpt = checkpoint::load(path)?;
    if let Some(fp) = &ckpt.vocab_fingerprint {
        if fp != &vocab.fingerprint() {
            return Err(Error::Config(format!(
                "checkpoint {} was trained with a different vocabulary",
                path.display()
            )));
        }
    }
    Ok((ckpt.model, ckpt.bayes))
}

fn parse_mode(s: &str) -> Result<PredictiveMode> {
    if s == "mean" {
        return Ok(PredictiveMode::Mean);
    }
    if let Some(k) = s.strip_prefix("mc:") {
        let k: usize = k
            .parse()
            .map_err(|_| Error::Config(format!("bad sample count in mode '{s}'")))?;
        if k < 1 {
            return Err(Error::Config("mc mode needs k >= 1".into()));
        }
        return Ok(PredictiveMode::Mc { k });
    }
    Err(Error::Config(format!("unknown mode '{s}' (mean or mc:K)")))
}

fn save_train_outputs(
    ctx: &mut RunContext,
    result: &TrainResult,
    bayes: Option<&BayesConfig>,
    vocab_fp: &str,
) -> Result<()> {
    let ckpt_path = ctx.path("checkpoint.vlmc");
    checkpoint::save(&ckpt_path, &result.best_model, bayes, Some(vocab_fp))?;
    ctx.record_output(&ckpt_path)?;

    let metrics_path = ctx.path("metrics.jsonl");
    let mut lines = String::new();
    for m in &result.metrics {
        lines.push_str(&serde_json::to_string(m).map_err(|e| Error::Format(e.to_string()))?);
        lines.push('\n');
    }
    fs::write(&metrics_path, lines)?;
    ctx.record_output(&metrics_path)?;

    if !result.events.is_empty() {
        let events_path = ctx.path("events.log");
        fs::write(&events_path, result.events.join("\n") + "\n")?;
        ctx.record_output(&events_path)?;
    }
    println!(
        "best dev ppl {:.4} at epoch {} ({} epochs run{})",
        result.best_dev_ppl,
        result.best_epoch,
        result.metrics.len() - 1,
        if result.diverged { ", diverged" } else { "" }
    );
    Ok(())
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::GenSynthetic { spec, seed, train_sentences, dev_sentences, test_sentences, out } => {
            let spec_text = fs::read_to_string(&spec)?;
            let parsed: SyntheticSpec = toml::from_str(&spec_text)
                .map_err(|e| Error::Config(format!("{}: {e}", spec.display())))?;
            let mut ctx = RunContext::create(
                "gen-synthetic",
                out,
                Some(seed),
                json!({
                    "spec": parsed,
                    "train_sentences": train_sentences,
                    "dev_sentences": dev_sentences,
                    "test_sentences": test_sentences,
                }),
            )?;
            ctx.record_input(&spec)?;
            let corpus =
                generate_synthetic(&parsed, seed, train_sentences, dev_sentences, test_sentences)?;
            varlm::corpus::write_corpus(&ctx.dir, &corpus)?;
            ctx.record_output(&ctx.path("corpus.txt"))?;
            ctx.record_output(&ctx.path("splits.json"))?;
            println!(
                "wrote {} train / {} dev / {} test sentences (chain entropy {:.3} nats)",
                corpus.train.len(),
                corpus.dev.len(),
                corpus.test.len(),
                parsed.entropy_rate()
            );
            ctx.finish()?;
            Ok(())
        }

        Cmd::BuildVocab { corpus, max_size, min_count, out } => {
            let mut ctx = RunContext::create(
                "build-vocab",
                out,
                None,
                json!({ "max_size": max_size, "min_count": min_count }),
            )?;
            let mut lines = Vec::new();
            for path in &corpus {
                ctx.record_input(path)?;
                lines.extend(load_lines(path)?);
            }
            let vocab = Vocabulary::build(&lines, max_size, min_count)?;
            let path = ctx.path("vocab.tsv");
            vocab.save(&path)?;
            ctx.record_output(&path)?;
            println!("vocabulary of {} tokens ({})", vocab.size(), vocab.fingerprint());
            ctx.finish()?;
            Ok(())
        }

        Cmd::TrainNgram { corpus, vocab, order, discount, dev, out } => {
            let mut ctx = RunContext::create(
                "train-ngram",
                out,
                None,
                json!({ "order": order, "discount": discount }),
            )?;
            ctx.record_input(&corpus)?;
            ctx.record_input(&vocab)?;
            let v = load_vocab(&vocab)?;
            let lines = load_lines(&corpus)?;
            let model = train_ngram(&lines, &v, order, discount)?;
            let path = ctx.path("model.arpa");
            model.save_arpa(&path, &v)?;
            ctx.record_output(&path)?;
            println!("n-gram counts per order: {:?} ({:?})", model.ngram_counts(), model.smoothing);
            if let Some(dev) = dev {
                ctx.record_input(&dev)?;
                let dev_lines = load_lines(&dev)?;
                let mut total = 0.0;
                let mut tokens = 0usize;
                for line in &dev_lines {
                    let ids = v.tokenize(line);
                    total += model.sentence_logprob(&ids);
                    tokens += ids.len() - 1;
                }
                println!("dev ppl {:.4}", varlm::eval::perplexity(total, tokens));
            }
            ctx.finish()?;
            Ok(())
        }

        Cmd::Train { corpus, vocab, init_from, arch, train: targs, out } => {
            let tc = targs.build()?;
            let mut ctx = RunContext::create(
                "train",
                out,
                Some(tc.seed),
                json!({ "train": tc, "arch": format!("{arch:?}"), "init_from": init_from }),
            )?;
            ctx.record_input(&vocab)?;
            let v = load_vocab(&vocab)?;
            let (train_lines, dev_lines) = corpus.load(&mut ctx)?;

            let (mut model, bayes) = match &init_from {
                Some(p) => {
                    if arch.any_set() {
                        return Err(Error::Config(
                            "--init-from carries the architecture; drop the arch flags".into(),
                        ));
                    }
                    ctx.record_input(p)?;
                    load_model_for(&v, p)?
                }
                None => (Model::init(arch.build(v.size())?, tc.seed)?, None),
            };
            let result = train(&mut model, &train_lines, &dev_lines, &v, &tc)?;
            save_train_outputs(&mut ctx, &result, bayes.as_ref(), &v.fingerprint())?;
            ctx.finish()?;
            if result.diverged {
                return Err(Error::Numerics("training diverged; best checkpoint retained".into()));
            }
            Ok(())
        }

        Cmd::Promote { model, prior, sites, log_sigma_init, k_train, out } => {
            let sites_parsed = parse_sites(&sites)?;
            let bc = BayesConfig {
                sites: sites_parsed,
                k_train,
                eval_mode: PredictiveMode::Mean,
                log_sigma_init,
            };
            let mut ctx = RunContext::create("promote", out, None, json!({ "bayes": bc }))?;
            ctx.record_input(&model)?;
            let base = checkpoint::load(&model)?;
            let prior_ckpt = match &prior {
                Some(p) => {
                    ctx.record_input(p)?;
                    checkpoint::load(p)?
                }
                None => checkpoint::load(&model)?,
            };
            let base_model = if base.model.has_sites() {
                materialize_mean(&base.model)
            } else {
                base.model
            };
            let promoted = promote(&base_model, &bc, &prior_ckpt.model)?;
            let path = ctx.path("checkpoint.vlmc");
            checkpoint::save(&path, &promoted, Some(&bc), base.vocab_fingerprint.as_deref())?;
            ctx.record_output(&path)?;
            println!("promoted sites: {}", promoted.site_names().join(", "));
            ctx.finish()?;
            Ok(())
        }

        Cmd::Adapt { mode, model, corpus, vocab, sites, train: targs, out } => {
            let mut tc = targs.build()?;
            if targs.learning_rate.is_none() && targs.config.is_none() {
                tc.learning_rate = 0.01; // adaptation default, one decade down
            }
            let mut ctx = RunContext::create(
                "adapt",
                out,
                Some(tc.seed),
                json!({ "mode": mode, "sites": sites, "train": tc }),
            )?;
            ctx.record_input(&model)?;
            ctx.record_input(&vocab)?;
            let v = load_vocab(&vocab)?;
            let (train_lines, dev_lines) = corpus.load(&mut ctx)?;
            let (source, source_bayes) = load_model_for(&v, &model)?;

            let (result, bayes) = match mode.as_str() {
                "fine-tune" | "fine_tune" => (
                    varlm::train::fine_tune(&source, &train_lines, &dev_lines, &v, &tc)?,
                    source_bayes,
                ),
                "bayes-adapt" | "bayes_adapt" => {
                    let bc = BayesConfig::with_sites(parse_sites(&sites)?);
                    let reference = if source.has_sites() {
                        return Err(Error::Config(
                            "bayes-adapt needs a deterministic (fine-tuned) reference checkpoint"
                                .into(),
                        ));
                    } else {
                        source
                    };
                    (
                        varlm::train::bayes_adapt(
                            &reference,
                            &bc,
                            &train_lines,
                            &dev_lines,
                            &v,
                            &tc,
                        )?,
                        Some(bc),
                    )
                }
                other => {
                    return Err(Error::Config(format!(
                        "unknown adaptation mode '{other}' (fine-tune or bayes-adapt)"
                    )))
                }
            };
            save_train_outputs(&mut ctx, &result, bayes.as_ref(), &v.fingerprint())?;
            ctx.finish()?;
            if result.diverged {
                return Err(Error::Numerics("training diverged; best checkpoint retained".into()));
            }
            Ok(())
        }

        Cmd::Eval { model, corpus, vocab, mode, ngram, lambda, tune_lambda: tune, mc_seed, out } => {
            let mode = parse_mode(&mode)?;
            let mut ctx = RunContext::create(
                "eval",
                out,
                Some(mc_seed),
                json!({ "mode": format!("{mode:?}"), "lambda": lambda, "tune_lambda": tune }),
            )?;
            ctx.record_input(&model)?;
            ctx.record_input(&corpus)?;
            ctx.record_input(&vocab)?;
            let v = load_vocab(&vocab)?;
            let (m, _) = load_model_for(&v, &model)?;
            let lines = load_lines(&corpus)?;

            let ngram_model: Option<NGramModel> = match &ngram {
                Some(p) => {
                    ctx.record_input(p)?;
                    Some(NGramModel::load_arpa(p, &v)?)
                }
                None => None,
            };
            let interp: Option<(f64, &NGramModel)> = match (&ngram_model, lambda, tune) {
                (Some(ng), _, true) => {
                    let (l, _) = tune_lambda(&m, ng, &lines, &v, mode, mc_seed)?;
                    println!("tuned lambda {l:.4}");
                    Some((l, ng))
                }
                (Some(ng), Some(l), false) => Some((l, ng)),
                (Some(_), None, false) => {
                    return Err(Error::Config(
                        "--ngram needs --lambda or --tune-lambda".into(),
                    ))
                }
                (None, Some(_), _) | (None, _, true) => {
                    return Err(Error::Config("interpolation flags need --ngram".into()))
                }
                (None, None, false) => None,
            };
            let report = corpus_perplexity(
                &m,
                &lines,
                &v,
                mode,
                interp.map(|(l, ng)| (ng, l)),
                corpus.display().to_string().as_str(),
                mc_seed,
            )?;
            let path = ctx.path("report.json");
            fs::write(
                &path,
                serde_json::to_string_pretty(&report).map_err(|e| Error::Format(e.to_string()))?,
            )?;
            ctx.record_output(&path)?;
            println!(
                "ppl {:.6} over {} tokens ({} OOV, rate {:.4})",
                report.perplexity, report.token_count, report.oov_count, report.oov_rate
            );
            ctx.finish()?;
            Ok(())
        }

        Cmd::Rescore { model, vocab, nbest, lm_scale, wip, ngram, lambda, mode, out } => {
            let mode = parse_mode(&mode)?;
            let mut ctx = RunContext::create(
                "rescore",
                out,
                None,
                json!({ "lm_scale": lm_scale, "wip": wip, "lambda": lambda }),
            )?;
            ctx.record_input(&model)?;
            ctx.record_input(&vocab)?;
            ctx.record_input(&nbest)?;
            let v = load_vocab(&vocab)?;
            let (m, _) = load_model_for(&v, &model)?;
            let text = fs::read_to_string(&nbest)?;
            let (lists, warnings) = parse_nbest(&text);
            for w in &warnings {
                eprintln!("warning: {w}");
            }
            let ngram_model = match &ngram {
                Some(p) => {
                    ctx.record_input(p)?;
                    Some(NGramModel::load_arpa(p, &v)?)
                }
                None => None,
            };
            let interp = match (&ngram_model, lambda) {
                (Some(ng), Some(l)) => Some((ng, l)),
                (None, None) => None,
                _ => return Err(Error::Config("interpolation needs both --ngram and --lambda".into())),
            };
            let ranked = rescore_nbest(&lists, &m, &v, lm_scale, wip, interp, mode, 0)?;
            let mut out_text = String::new();
            for (utt, hyps) in &ranked {
                for h in hyps {
                    out_text.push_str(&format!(
                        "{utt} {:.6} {:.6} {:.6} {} {}\n",
                        h.total, h.acoustic, h.lm_logprob, h.n_words, h.words
                    ));
                }
            }
            let path = ctx.path("rescored.txt");
            fs::write(&path, out_text)?;
            ctx.record_output(&path)?;
            println!("rescored {} utterances", ranked.len());
            ctx.finish()?;
            Ok(())
        }

        Cmd::Sweep {
            corpus,
            vocab,
            widths,
            variants,
            seeds,
            dropout_rate,
            arch,
            train: targs,
            out,
        } => {
            let widths: Vec<usize> = widths
                .split(',')
                .map(|w| w.trim().parse().map_err(|_| Error::Config(format!("bad width '{w}'"))))
                .collect::<Result<_>>()?;
            let variants: Vec<Variant> = variants
                .split(',')
                .map(|s| match s.trim() {
                    "deterministic" => Ok(Variant::Deterministic),
                    "dropout" => Ok(Variant::Dropout),
                    "bayes-ff-1" | "bayes" => Ok(Variant::BayesFf1),
                    other => Err(Error::Config(format!("unknown variant '{other}'"))),
                })
                .collect::<Result<_>>()?;
            let seeds: Vec<u64> = seeds
                .split(',')
                .map(|s| s.trim().parse().map_err(|_| Error::Config(format!("bad seed '{s}'"))))
                .collect::<Result<_>>()?;
            let tc = targs.build()?;
            let mut ctx = RunContext::create(
                "sweep",
                out,
                Some(tc.seed),
                json!({ "widths": widths, "seeds": seeds, "dropout_rate": dropout_rate, "train": tc }),
            )?;
            ctx.record_input(&vocab)?;
            let v = load_vocab(&vocab)?;
            let (train_lines, dev_lines) = corpus.load(&mut ctx)?;
            let base = arch.build(v.size())?;
            let cfg = SweepConfig { base, widths, variants, seeds, train: tc, dropout_rate };
            let rows = width_sweep(&cfg, &train_lines, &dev_lines, &v);
            let tsv = sweep_tsv(&rows);
            let path = ctx.path("sweep.tsv");
            fs::write(&path, &tsv)?;
            ctx.record_output(&path)?;
            print!("{tsv}");
            ctx.finish()?;
            if rows.iter().any(|r| r.status != "ok") {
                eprintln!("note: some sweep cells failed; see sweep.tsv");
            }
            Ok(())
        }

        Cmd::GradCheck { tol, seed, out } => {
            let mut ctx =
                RunContext::create("grad-check", out, Some(seed), json!({ "tol": tol }))?;
            let ops = varlm::check::fd_check_ops(seed)?;
            println!(
                "per-op check: {} elements, max rel err {:.3e} (worst {})",
                ops.checked, ops.max_rel_err, ops.worst
            );

            // one-block variational model, every mu / log_sigma element
            let cfg = ModelConfig {
                n_blocks: 1,
                d_model: 8,
                d_ff: 16,
                n_heads: 2,
                vocab_size: 20,
                max_len: 16,
                dropout_rate: 0.0,
                tie_embeddings: false,
            };
            let det = Model::init(cfg, seed ^ 0x5eed)?;
            let bayes = promote(
                &det,
                &BayesConfig::with_sites(parse_sites("1:FF")?),
                &det,
            )?;
            let mut rng = <rand_chacha::ChaCha8Rng as rand_chacha::rand_core::SeedableRng>::seed_from_u64(seed);
            let batch: Vec<Vec<u32>> = (0..4)
                .map(|_| {
                    (0..6)
                        .map(|_| rand_chacha::rand_core::RngCore::next_u32(&mut rng) % 20)
                        .collect()
                })
                .collect();
            let obj = varlm::check::fd_check_objective(&bayes, &batch, 1.0, 1e-5, seed)?;
            println!(
                "objective check: {} elements, max rel err {:.3e} (worst {})",
                obj.checked, obj.max_rel_err, obj.worst
            );

            let report = json!({
                "per_op": { "checked": ops.checked, "max_rel_err": ops.max_rel_err },
                "objective": { "checked": obj.checked, "max_rel_err": obj.max_rel_err },
                "tol": tol,
            });
            let path = ctx.path("report.json");
            fs::write(&path, serde_json::to_string_pretty(&report).unwrap())?;
            ctx.record_output(&path)?;
            ctx.finish()?;
            if !(ops.ok(tol) && obj.ok(tol)) {
                return Err(Error::Numerics(format!(
                    "gradient check failed at tolerance {tol}"
                )));
            }
            println!("gradient checks passed at tolerance {tol}");
            Ok(())
        }

        Cmd::KlCheck { sites, dims, samples, tol, seed, out } => {
            let mut ctx = RunContext::create(
                "kl-check",
                out,
                Some(seed),
                json!({ "sites": sites, "dims": dims, "samples": samples, "tol": tol }),
            )?;
            let rep = varlm::check::mc_kl_check(sites, dims, samples, seed);
            println!(
                "kl check: {} sites x {} samples, max rel dev {:.4}%, exact zero at prior: {}",
                rep.sites,
                samples,
                rep.max_rel_dev * 100.0,
                rep.prior_exact_zero
            );
            let report = json!({
                "sites": rep.sites,
                "max_rel_dev": rep.max_rel_dev,
                "prior_exact_zero": rep.prior_exact_zero,
                "tol": tol,
            });
            let path = ctx.path("report.json");
            fs::write(&path, serde_json::to_string_pretty(&report).unwrap())?;
            ctx.record_output(&path)?;
            ctx.finish()?;
            if !rep.ok(tol) {
                return Err(Error::Numerics(format!("KL check failed at tolerance {tol}")));
            }
            println!("KL check passed at tolerance {tol}");
            Ok(())
        }
    }
}
