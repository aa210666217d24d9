//! Variational posterior machinery.
//!
//! A *site* is one weight matrix under Bayesian estimation: a diagonal
//! Gaussian posterior (mu, exp(log_sigma)) paired with a diagonal Gaussian
//! prior (prior_mu, prior_sigma). Promotion replaces selected weights of a
//! deterministic model with sites whose prior mean comes from a pretrained
//! checkpoint and whose prior standard deviation is 1.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Binding, Model, ModelConfig, Param};
use crate::tape::{Tape, TensorId};
use crate::tensor::{Real, Tensor};

/// Diagonal Gaussian posterior and prior over one weight matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalSite {
    pub mu: Tensor,
    pub log_sigma: Tensor,
    pub prior_mu: Tensor,
    pub prior_sigma: Tensor,
}

impl VariationalSite {
    pub fn new(mu: Tensor, log_sigma: Tensor, prior_mu: Tensor, prior_sigma: Tensor) -> Result<Self> {
        let shape = mu.shape();
        if log_sigma.shape() != shape || prior_mu.shape() != shape || prior_sigma.shape() != shape {
            return Err(Error::Shape(format!(
                "site arrays disagree: mu {:?}, log_sigma {:?}, prior_mu {:?}, prior_sigma {:?}",
                shape,
                log_sigma.shape(),
                prior_mu.shape(),
                prior_sigma.shape()
            )));
        }
        if prior_sigma.data().iter().any(|&s| s <= 0.0) {
            return Err(Error::Config("prior_sigma must be elementwise positive".into()));
        }
        Ok(VariationalSite { mu, log_sigma, prior_mu, prior_sigma })
    }

    /// Prior mean as posterior init, prior sigma 1, constant log_sigma.
    pub fn from_prior(prior_weights: &Tensor, log_sigma_init: Real) -> Self {
        let shape = prior_weights.shape().to_vec();
        VariationalSite {
            mu: prior_weights.clone(),
            log_sigma: Tensor::full(shape.clone(), log_sigma_init),
            prior_mu: prior_weights.clone(),
            prior_sigma: Tensor::full(shape, 1.0),
        }
    }

    /// Reparameterized draw `mu + exp(log_sigma) * eps`, `eps ~ N(0, I)`.
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Tensor {
        let eps: Vec<Real> = (0..self.mu.len()).map(|_| rng.sample(StandardNormal)).collect();
        self.sample_with_eps(&eps)
    }

    pub fn sample_with_eps(&self, eps: &[Real]) -> Tensor {
        let data: Vec<Real> = self
            .mu
            .data()
            .iter()
            .zip(self.log_sigma.data())
            .zip(eps)
            .map(|((&m, &ls), &e)| m + ls.exp() * e)
            .collect();
        Tensor::new(self.mu.shape().to_vec(), data).unwrap()
    }

    /// Closed-form KL(q || prior) for diagonal Gaussians:
    /// `sum_i log(sr_i/s_i) + (s_i^2 + (m_i - mr_i)^2) / (2 sr_i^2) - 1/2`.
    ///
    /// Computed through the ratio `s_i/sr_i` so a posterior that equals the
    /// prior bitwise yields exactly zero.
    pub fn kl(&self) -> Real {
        let mut total = 0.0;
        for i in 0..self.mu.len() {
            let sigma = self.log_sigma.data()[i].exp();
            let sr = self.prior_sigma.data()[i];
            let t = sigma / sr;
            let dm = (self.mu.data()[i] - self.prior_mu.data()[i]) / sr;
            total += -t.ln() + 0.5 * (t * t + dm * dm) - 0.5;
        }
        total
    }
}

/// Which kind of weight group a site selection names.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum SiteKind {
    Ff,
    Mha,
    Emb,
}

/// One (block, kind) selection. `Emb` carries no block index; `Ff`/`Mha`
/// carry a 1-based block index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SiteSpec {
    pub kind: SiteKind,
    pub block: Option<usize>,
}

impl SiteSpec {
    pub fn emb() -> Self {
        SiteSpec { kind: SiteKind::Emb, block: None }
    }

    pub fn ff(block: usize) -> Self {
        SiteSpec { kind: SiteKind::Ff, block: Some(block) }
    }

    pub fn mha(block: usize) -> Self {
        SiteSpec { kind: SiteKind::Mha, block: Some(block) }
    }

    /// Parameter names this selection promotes.
    pub fn param_names(&self) -> Vec<String> {
        match (self.kind, self.block) {
            (SiteKind::Emb, _) => vec!["emb".to_string()],
            (SiteKind::Ff, Some(b)) => {
                let i = b - 1;
                vec![format!("blocks.{i}.ff.w1"), format!("blocks.{i}.ff.w2")]
            }
            (SiteKind::Mha, Some(b)) => {
                let i = b - 1;
                ["wq", "wk", "wv", "wh"]
                    .iter()
                    .map(|w| format!("blocks.{i}.attn.{w}"))
                    .collect()
            }
            _ => vec![],
        }
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        match (self.kind, self.block) {
            (SiteKind::Emb, None) => Ok(()),
            (SiteKind::Emb, Some(_)) => {
                Err(Error::Config("EMB site does not take a block index".into()))
            }
            (_, None) => Err(Error::Config(format!(
                "{self} requires a block index between 1 and {}",
                config.n_blocks
            ))),
            (_, Some(b)) if b >= 1 && b <= config.n_blocks => Ok(()),
            (_, Some(b)) => Err(Error::Config(format!(
                "block index {b} outside 1..={}",
                config.n_blocks
            ))),
        }
    }
}

impl fmt::Display for SiteSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.kind, self.block) {
            (SiteKind::Emb, _) => write!(f, "EMB"),
            (SiteKind::Ff, Some(b)) => write!(f, "{b}:FF"),
            (SiteKind::Mha, Some(b)) => write!(f, "{b}:MHA"),
            (k, None) => write!(f, "?:{k:?}"),
        }
    }
}

/// Parse a comma-separated site list: `EMB`, `1:FF`, `1-3:FF`, `2:MHA`.
pub fn parse_sites(s: &str) -> Result<Vec<SiteSpec>> {
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let upper = part.to_ascii_uppercase();
        if upper == "EMB" {
            out.push(SiteSpec::emb());
            continue;
        }
        let (range, kind_str) = upper
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("bad site spec '{part}', expected BLOCK:KIND or EMB")))?;
        let kind = match kind_str {
            "FF" => SiteKind::Ff,
            "MHA" => SiteKind::Mha,
            "EMB" => {
                return Err(Error::Config(format!(
                    "bad site spec '{part}': EMB does not take a block index"
                )))
            }
            other => return Err(Error::Config(format!("unknown site kind '{other}'"))),
        };
        let (lo, hi) = match range.split_once('-') {
            Some((a, b)) => {
                let lo: usize = a.trim().parse().map_err(|_| {
                    Error::Config(format!("bad block index '{a}' in site spec '{part}'"))
                })?;
                let hi: usize = b.trim().parse().map_err(|_| {
                    Error::Config(format!("bad block index '{b}' in site spec '{part}'"))
                })?;
                (lo, hi)
            }
            None => {
                let b: usize = range.trim().parse().map_err(|_| {
                    Error::Config(format!("bad block index '{range}' in site spec '{part}'"))
                })?;
                (b, b)
            }
        };
        if lo == 0 || hi < lo {
            return Err(Error::Config(format!("bad block range '{range}' in site spec '{part}'")));
        }
        for b in lo..=hi {
            out.push(SiteSpec { kind, block: Some(b) });
        }
    }
    out.sort();
    out.dedup();
    Ok(out)
}

fn default_k_train() -> usize {
    1
}

fn default_log_sigma_init() -> f64 {
    -3.0
}

/// Predictive mode at evaluation time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PredictiveMode {
    /// Replace every site by its posterior mean.
    #[default]
    Mean,
    /// Average word probabilities over `k` sampled parameter sets.
    Mc { k: usize },
}

/// The set of weight groups under Bayesian estimation plus sampling policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BayesConfig {
    pub sites: Vec<SiteSpec>,
    #[serde(default = "default_k_train")]
    pub k_train: usize,
    #[serde(default)]
    pub eval_mode: PredictiveMode,
    /// Constant initial value for log_sigma at promotion.
    #[serde(default = "default_log_sigma_init")]
    pub log_sigma_init: f64,
}

impl Default for BayesConfig {
    fn default() -> Self {
        BayesConfig {
            sites: Vec::new(),
            k_train: 1,
            eval_mode: PredictiveMode::Mean,
            log_sigma_init: -3.0,
        }
    }
}

impl BayesConfig {
    pub fn with_sites(sites: Vec<SiteSpec>) -> Self {
        BayesConfig { sites, ..Default::default() }
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if self.k_train < 1 {
            return Err(Error::Config("k_train must be >= 1".into()));
        }
        if let PredictiveMode::Mc { k } = self.eval_mode {
            if k < 1 {
                return Err(Error::Config("mc eval mode requires k >= 1".into()));
            }
        }
        for site in &self.sites {
            site.validate(config)?;
        }
        Ok(())
    }

    /// Sorted, deduplicated parameter names covered by the site set.
    pub fn param_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.sites.iter().flat_map(|s| s.param_names()).collect();
        names.sort();
        names.dedup();
        names
    }
}

fn configs_compatible(a: &ModelConfig, b: &ModelConfig) -> bool {
    a.n_blocks == b.n_blocks
        && a.d_model == b.d_model
        && a.d_ff == b.d_ff
        && a.n_heads == b.n_heads
        && a.vocab_size == b.vocab_size
        && a.tie_embeddings == b.tie_embeddings
}

/// Replace the selected weight matrices with variational sites whose prior
/// mean comes from `prior`. Q, K, V and the output projection of a promoted
/// attention block become four independent sites. Everything else keeps the
/// model's own point estimates.
pub fn promote(model: &Model, config: &BayesConfig, prior: &Model) -> Result<Model> {
    config.validate(&model.config)?;
    if !configs_compatible(&model.config, &prior.config) {
        return Err(Error::Config(format!(
            "prior checkpoint architecture {:?} does not match model {:?}",
            prior.config, model.config
        )));
    }
    let mut params = model.params.clone();
    for name in config.param_names() {
        let prior_weights = match prior.params.get(&name) {
            Some(Param::Det(t)) => t,
            Some(Param::Site(_)) => {
                return Err(Error::Config(format!(
                    "prior checkpoint parameter {name} is itself Bayesian; materialize it first"
                )))
            }
            None => {
                return Err(Error::Config(format!("prior checkpoint is missing parameter {name}")))
            }
        };
        let current_shape = params
            .get(&name)
            .ok_or_else(|| Error::Config(format!("model has no parameter {name}")))?
            .shape()
            .to_vec();
        if prior_weights.shape() != current_shape.as_slice() {
            return Err(Error::Config(format!(
                "shape mismatch for {name}: model {:?} vs prior {:?}",
                current_shape,
                prior_weights.shape()
            )));
        }
        params.insert(
            name,
            Param::Site(VariationalSite::from_prior(prior_weights, config.log_sigma_init as Real)),
        );
    }
    Model::from_parts(model.config.clone(), params)
}

/// Replace every site by its posterior mean, yielding a deterministic model.
pub fn materialize_mean(model: &Model) -> Model {
    let params = model
        .params
        .iter()
        .map(|(name, p)| {
            let det = match p {
                Param::Det(t) => Param::Det(t.clone()),
                Param::Site(s) => Param::Det(s.mu.clone()),
            };
            (name.clone(), det)
        })
        .collect();
    Model::from_parts(model.config.clone(), params).expect("same config")
}

/// Sum of closed-form site KLs; zero when the model has no sites.
pub fn kl_total(model: &Model) -> Real {
    model
        .params
        .values()
        .map(|p| match p {
            Param::Det(_) => 0.0,
            Param::Site(s) => s.kl(),
        })
        .sum()
}

/// Build the KL term on a tape from bound mu / log_sigma leaves so gradients
/// flow through the exact expression. Returns `None` when there are no sites.
pub fn kl_graph(tape: &mut Tape, binding: &Binding) -> Result<Option<TensorId>> {
    let mut total: Option<TensorId> = None;
    for site in binding.sites.values() {
        let shape = site.prior_mu.shape().to_vec();
        let prior_mu = tape.constant(site.prior_mu.clone());
        let ln_sr = tape.constant(Tensor::new(
            shape.clone(),
            site.prior_sigma.data().iter().map(|&s| s.ln()).collect(),
        )?);
        let inv_2sr2 = tape.constant(Tensor::new(
            shape,
            site.prior_sigma.data().iter().map(|&s| 1.0 / (2.0 * s * s)).collect(),
        )?);

        let delta = tape.sub(site.mu, prior_mu)?;
        let delta2 = tape.mul(delta, delta)?;
        let two_ls = tape.scale(site.log_sigma, 2.0);
        let sigma2 = tape.exp(two_ls);
        let inner = tape.add(sigma2, delta2)?;
        let quad = tape.mul(inner, inv_2sr2)?;
        let logs = tape.sub(ln_sr, site.log_sigma)?;
        let sum_terms = tape.add(logs, quad)?;
        let shifted = tape.add_scalar(sum_terms, -0.5);
        let site_kl = tape.sum_all(shifted);
        total = Some(match total {
            Some(acc) => tape.add(acc, site_kl)?,
            None => site_kl,
        });
    }
    Ok(total)
}

/// Map from gradient key to flat gradient for trainable leaves. Sites use
/// `<name>.mu` and `<name>.log_sigma`; deterministic weights use `<name>`.
pub fn collect_grads(tape: &Tape, binding: &Binding) -> BTreeMap<String, Tensor> {
    let mut grads = BTreeMap::new();
    for (name, &id) in &binding.det {
        grads.insert(name.clone(), tape.grad(id));
    }
    for (name, site) in &binding.sites {
        grads.insert(format!("{name}.mu"), tape.grad(site.mu));
        grads.insert(format!("{name}.log_sigma"), tape.grad(site.log_sigma));
    }
    grads
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::WeightSample;
    use rand_chacha::rand_core::SeedableRng;

    fn site_1d(mu: Real, sigma: Real, prior_mu: Real, prior_sigma: Real) -> VariationalSite {
        VariationalSite::new(
            Tensor::scalar(mu),
            Tensor::scalar(sigma.ln()),
            Tensor::scalar(prior_mu),
            Tensor::scalar(prior_sigma),
        )
        .unwrap()
    }

    fn test_config() -> ModelConfig {
        ModelConfig {
            n_blocks: 2,
            d_model: 4,
            d_ff: 6,
            n_heads: 2,
            vocab_size: 9,
            max_len: 12,
            dropout_rate: 0.0,
            tie_embeddings: false,
        }
    }

    #[test]
    fn sample_with_zero_eps_returns_mu() {
        let site = VariationalSite::from_prior(
            &Tensor::new(vec![2], vec![1.5, -0.25]).unwrap(),
            -3.0,
        );
        let s = site.sample_with_eps(&[0.0, 0.0]);
        assert_eq!(s.data(), site.mu.data());
    }

    #[test]
    fn sample_direct_reparameterization() {
        let site = VariationalSite::new(
            Tensor::new(vec![2], vec![1.0, 2.0]).unwrap(),
            Tensor::new(vec![2], vec![(0.1 as Real).ln(), (0.2 as Real).ln()]).unwrap(),
            Tensor::zeros(vec![2]),
            Tensor::full(vec![2], 1.0),
        )
        .unwrap();
        let s = site.sample_with_eps(&[1.0, -1.0]);
        assert!((s.data()[0] - 1.1).abs() < 1e-12);
        assert!((s.data()[1] - 1.8).abs() < 1e-12);
    }

    #[test]
    fn sample_moments_match_posterior() {
        let site = site_1d(0.7, 0.3, 0.0, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(100);
        let n = 100_000;
        let draws: Vec<Real> = (0..n).map(|_| site.sample(&mut rng).item()).collect();
        let mean: Real = draws.iter().sum::<Real>() / n as Real;
        let var: Real = draws.iter().map(|&d| (d - mean) * (d - mean)).sum::<Real>() / n as Real;
        let se = 0.3 / (n as Real).sqrt();
        assert!((mean - 0.7).abs() < 3.0 * se, "mean {mean}");
        assert!((var.sqrt() - 0.3).abs() / 0.3 < 0.02, "std {}", var.sqrt());
    }

    #[test]
    fn kl_zero_exactly_at_prior() {
        let prior = Tensor::new(vec![3], vec![0.4, -1.2, 2.0]).unwrap();
        let mut site = VariationalSite::from_prior(&prior, 0.0);
        // posterior std exp(0)=1 equals the prior sigma bitwise
        assert_eq!(site.kl(), 0.0);
        // also exact when prior sigma != 1 but log_sigma reproduces it bitwise
        site.prior_sigma = Tensor::new(vec![3], vec![0.5, 2.0, 4.0]).unwrap();
        site.log_sigma =
            Tensor::new(vec![3], site.prior_sigma.data().iter().map(|&s| s.ln()).collect())
                .unwrap();
        // exp(ln(s)) must reproduce s bitwise for powers of two
        assert_eq!(site.kl(), 0.0);
    }

    #[test]
    fn kl_hand_values() {
        // q=N(1,1), prior N(0,1): (1)/2 = 0.5
        assert!((site_1d(1.0, 1.0, 0.0, 1.0).kl() - 0.5).abs() < 1e-12);
        // q=N(0,0.5^2), prior N(0,1): ln 2 + 0.125 - 0.5 = 0.318147...
        let got = site_1d(0.0, 0.5, 0.0, 1.0).kl();
        assert!((got - 0.318_147_180_559_945_3).abs() < 1e-12, "{got}");
    }

    #[test]
    fn kl_nonnegative_on_random_sites() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let s = site_1d(
                rng.gen_range(-2.0..2.0),
                rng.gen_range(0.05..3.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(0.05..3.0),
            );
            assert!(s.kl() >= 0.0);
        }
    }

    #[test]
    fn kl_total_sums_sites() {
        let cfg = test_config();
        let base = Model::init(cfg, 1).unwrap();
        let promoted = promote(
            &base,
            &BayesConfig::with_sites(vec![SiteSpec::ff(1), SiteSpec::ff(2)]),
            &base,
        )
        .unwrap();
        // at promotion q has mu=prior_mu but sigma=e^-3 vs prior 1: per-element
        // kl = 3 + e^-6/2 - 1/2
        let per = 3.0 + (-6.0 as Real).exp() / 2.0 - 0.5;
        let n_els = (2 * (4 * 6 + 6 * 4)) as Real;
        assert!((kl_total(&promoted) - per * n_els).abs() < 1e-9);

        assert_eq!(kl_total(&base), 0.0);
    }

    #[test]
    fn kl_graph_matches_closed_form_and_mu_gradient() {
        let cfg = test_config();
        let base = Model::init(cfg, 2).unwrap();
        let mut promoted = promote(
            &base,
            &BayesConfig::with_sites(vec![SiteSpec::ff(1)]),
            &base,
        )
        .unwrap();
        // shift one site's mu away from the prior so the gradient is nonzero
        if let Some(Param::Site(s)) = promoted.params.get_mut("blocks.0.ff.w1") {
            for v in s.mu.data_mut() {
                *v += 0.37;
            }
            s.prior_sigma = Tensor::full(s.prior_sigma.shape().to_vec(), 1.3);
        }

        let mut tape = Tape::new();
        let binding = promoted.bind(&mut tape, true);
        let kl_id = kl_graph(&mut tape, &binding).unwrap().unwrap();
        assert!((tape.value(kl_id).item() - kl_total(&promoted)).abs() < 1e-9);
        tape.backward(kl_id).unwrap();

        let site = match &promoted.params["blocks.0.ff.w1"] {
            Param::Site(s) => s,
            _ => unreachable!(),
        };
        let grad_mu = tape.grad(binding.sites["blocks.0.ff.w1"].mu);
        for i in 0..site.mu.len() {
            let analytic = (site.mu.data()[i] - site.prior_mu.data()[i])
                / (site.prior_sigma.data()[i] * site.prior_sigma.data()[i]);
            let rel = (grad_mu.data()[i] - analytic).abs() / analytic.abs().max(1e-12);
            assert!(rel < 1e-6, "mu grad {} vs analytic {}", grad_mu.data()[i], analytic);
        }
    }

    #[test]
    fn parse_site_lists() {
        assert_eq!(parse_sites("EMB").unwrap(), vec![SiteSpec::emb()]);
        assert_eq!(parse_sites("1:FF").unwrap(), vec![SiteSpec::ff(1)]);
        assert_eq!(
            parse_sites("1-3:ff").unwrap(),
            vec![SiteSpec::ff(1), SiteSpec::ff(2), SiteSpec::ff(3)]
        );
        assert_eq!(
            parse_sites("emb, 2:mha").unwrap(),
            vec![SiteSpec::mha(2), SiteSpec::emb()]
        );
        assert!(parse_sites("0:FF").is_err());
        assert!(parse_sites("2:XX").is_err());
        assert!(parse_sites("3:EMB").is_err());
        assert!(parse_sites("junk").is_err());
    }

    #[test]
    fn promote_empty_config_changes_nothing() {
        let base = Model::init(test_config(), 3).unwrap();
        let promoted = promote(&base, &BayesConfig::default(), &base).unwrap();
        assert_eq!(promoted.params, base.params);
        assert!(!promoted.has_sites());
    }

    #[test]
    fn promote_ff_selects_exactly_the_two_ff_matrices() {
        let base = Model::init(test_config(), 4).unwrap();
        let promoted =
            promote(&base, &BayesConfig::with_sites(vec![SiteSpec::ff(1)]), &base).unwrap();
        let sites = promoted.site_names();
        assert_eq!(sites, vec!["blocks.0.ff.w1", "blocks.0.ff.w2"]);
        // prior mean equals checkpoint weights, prior sigma 1 elementwise
        for name in &sites {
            let s = match &promoted.params[name.as_str()] {
                Param::Site(s) => s,
                _ => unreachable!(),
            };
            let orig = match &base.params[name.as_str()] {
                Param::Det(t) => t,
                _ => unreachable!(),
            };
            assert_eq!(&s.prior_mu, orig);
            assert_eq!(&s.mu, orig);
            assert!(s.prior_sigma.data().iter().all(|&v| v == 1.0));
            assert!(s.log_sigma.data().iter().all(|&v| v == -3.0));
        }
    }

    #[test]
    fn promote_mha_yields_four_independent_sites() {
        let base = Model::init(test_config(), 5).unwrap();
        let promoted =
            promote(&base, &BayesConfig::with_sites(vec![SiteSpec::mha(1)]), &base).unwrap();
        assert_eq!(
            promoted.site_names(),
            vec![
                "blocks.0.attn.wh",
                "blocks.0.attn.wk",
                "blocks.0.attn.wq",
                "blocks.0.attn.wv"
            ]
        );
    }

    #[test]
    fn promote_emb_covers_input_table_only() {
        let base = Model::init(test_config(), 6).unwrap();
        let promoted =
            promote(&base, &BayesConfig::with_sites(vec![SiteSpec::emb()]), &base).unwrap();
        assert_eq!(promoted.site_names(), vec!["emb"]);
        assert!(matches!(promoted.params["out"], Param::Det(_)));
    }

    #[test]
    fn promote_rejects_bad_block_and_mismatched_prior() {
        let base = Model::init(test_config(), 7).unwrap();
        assert!(promote(&base, &BayesConfig::with_sites(vec![SiteSpec::ff(9)]), &base).is_err());

        let mut other_cfg = test_config();
        other_cfg.d_ff = 5;
        let other = Model::init(other_cfg, 7).unwrap();
        assert!(promote(&base, &BayesConfig::with_sites(vec![SiteSpec::ff(1)]), &other).is_err());
    }

    #[test]
    fn materialize_round_trip_is_bit_exact() {
        let base = Model::init(test_config(), 8).unwrap();
        let promoted =
            promote(&base, &BayesConfig::with_sites(vec![SiteSpec::ff(1), SiteSpec::emb()]), &base)
                .unwrap();
        let materialized = materialize_mean(&promoted);
        assert_eq!(materialized.params, base.params);

        let tokens = [0u32, 3, 5, 1];
        let a = base.logits_mean(&tokens).unwrap();
        let b = materialized.logits_mean(&tokens).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn materialized_output_ignores_sigma() {
        let base = Model::init(test_config(), 9).unwrap();
        let mut promoted =
            promote(&base, &BayesConfig::with_sites(vec![SiteSpec::ff(1)]), &base).unwrap();
        if let Some(Param::Site(s)) = promoted.params.get_mut("blocks.0.ff.w1") {
            s.log_sigma = Tensor::full(s.log_sigma.shape().to_vec(), 4.0); // huge sigma
        }
        let a = materialize_mean(&promoted).logits_mean(&[1, 2, 3]).unwrap();
        let b = base.logits_mean(&[1, 2, 3]).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn mean_realization_on_tape_uses_mu() {
        let base = Model::init(test_config(), 10).unwrap();
        let promoted =
            promote(&base, &BayesConfig::with_sites(vec![SiteSpec::ff(2)]), &base).unwrap();
        let mut tape = Tape::new();
        let binding = promoted.bind(&mut tape, false);
        let weights =
            crate::model::realize_weights(&mut tape, &binding, WeightSample::Mean).unwrap();
        let w1 = tape.value(weights["blocks.1.ff.w1"]);
        let orig = match &base.params["blocks.1.ff.w1"] {
            Param::Det(t) => t,
            _ => unreachable!(),
        };
        assert_eq!(w1.data(), orig.data());
    }
}
