//! Verification harnesses: central finite differences against backward
//! gradients (per-op and full-objective), a Monte-Carlo estimate against the
//! closed-form KL, causality trials, and softmax normalization scans.
//!
//! These power the `grad-check` and `kl-check` commands as well as the
//! acceptance suite. The finite-difference side never calls backward; it
//! re-evaluates the objective at shifted parameters only.


use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::bayes::VariationalSite;
use crate::error::{Error, Result};
use crate::model::{Model, Param};
use crate::tape::Tape;
use crate::tensor::{Real, Tensor};
use crate::train::{elbo_value_replay, elbo_with_grads};

/// Default finite-difference step.
pub const FD_STEP: Real = 1e-5;
/// Default relative tolerance for gradient agreement.
pub const FD_REL_TOL: f64 = 1e-4;

/// Worst-case outcome of a gradient comparison run.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: String,
}

impl GradCheckReport {
    pub fn ok(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// Relative disagreement between a finite difference and an analytic value.
/// Near-zero pairs are compared absolutely (1e-8) instead, since the
/// difference quotient itself carries ~1e-9 roundoff noise.
pub fn grad_rel_err(fd: f64, analytic: f64) -> f64 {
    let scale = fd.abs().max(analytic.abs());
    if scale < 1e-6 {
        if (fd - analytic).abs() < 1e-8 {
            0.0
        } else {
            (fd - analytic).abs() / scale.max(1e-12)
        }
    } else {
        (fd - analytic).abs() / scale
    }
}

fn update_worst(report: &mut GradCheckReport, err: f64, what: impl FnOnce() -> String) {
    report.checked += 1;
    if err > report.max_rel_err {
        report.max_rel_err = err;
        report.worst = what();
    }
}

/// Compare backward gradients of the training objective against central
/// finite differences for every trainable element (deterministic weights,
/// posterior means, log standard deviations), holding the reparameterization
/// noise fixed (common random numbers).
pub fn fd_check_objective(
    model: &Model,
    batch: &[Vec<u32>],
    kl_weight: Real,
    step: Real,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (parts, grads) = elbo_with_grads(model, batch, 1, kl_weight, &mut rng, false)?;
    if !parts.loss.is_finite() {
        return Err(Error::Numerics("objective is non-finite at the reference point".into()));
    }
    let eps = parts.eps;
    let mut report = GradCheckReport { checked: 0, max_rel_err: 0.0, worst: String::new() };

    let names: Vec<String> = model.params.keys().cloned().collect();
    for name in names {
        let fields: Vec<(&str, String)> = match &model.params[&name] {
            Param::Det(_) => vec![("det", name.clone())],
            Param::Site(_) => {
                vec![("mu", format!("{name}.mu")), ("log_sigma", format!("{name}.log_sigma"))]
            }
        };
        for (field, grad_key) in fields {
            let analytic = grads
                .get(&grad_key)
                .ok_or_else(|| Error::Contract(format!("missing gradient {grad_key}")))?
                .clone();
            let n = analytic.len();
            for i in 0..n {
                let eval = |delta: Real| -> Result<Real> {
                    let mut m = model.clone();
                    perturb(&mut m, &name, field, i, delta)?;
                    Ok(elbo_value_replay(&m, batch, kl_weight, &eps)?.loss)
                };
                let fd = ((eval(step)? - eval(-step)?) / (2.0 * step)) as f64;
                let an = analytic.data()[i] as f64;
                let err = grad_rel_err(fd, an);
                update_worst(&mut report, err, || {
                    format!("{grad_key}[{i}]: fd {fd:.9e} vs backward {an:.9e}")
                });
            }
        }
    }
    Ok(report)
}

fn perturb(model: &mut Model, name: &str, field: &str, i: usize, delta: Real) -> Result<()> {
    let p = model
        .params
        .get_mut(name)
        .ok_or_else(|| Error::Contract(format!("no parameter {name}")))?;
    let t = match (p, field) {
        (Param::Det(t), "det") => t,
        (Param::Site(s), "mu") => &mut s.mu,
        (Param::Site(s), "log_sigma") => &mut s.log_sigma,
        _ => return Err(Error::Contract(format!("bad field {field} for {name}"))),
    };
    t.data_mut()[i] += delta;
    Ok(())
}

/// Finite-difference validation of every differentiable tape operation on
/// random inputs in [-2, 2]: the scalar probe `sum(op(x) * c)` is compared
/// against backward for every input element.
pub fn fd_check_ops(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport { checked: 0, max_rel_err: 0.0, worst: String::new() };

    let mut rand_t = |shape: Vec<usize>| -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
    };

    // each case: name, input tensors, graph builder over leaf ids
    type Builder = Box<dyn Fn(&mut Tape, &[crate::tape::TensorId]) -> crate::tape::TensorId>;
    let cases: Vec<(&str, Vec<Tensor>, Builder)> = vec![
        (
            "matmul",
            vec![rand_t(vec![3, 4]), rand_t(vec![4, 2])],
            Box::new(|t, ids| t.matmul(ids[0], ids[1]).unwrap()),
        ),
        (
            "transpose",
            vec![rand_t(vec![2, 5])],
            Box::new(|t, ids| t.transpose(ids[0])),
        ),
        (
            "add",
            vec![rand_t(vec![2, 3]), rand_t(vec![2, 3])],
            Box::new(|t, ids| t.add(ids[0], ids[1]).unwrap()),
        ),
        (
            "sub",
            vec![rand_t(vec![2, 3]), rand_t(vec![2, 3])],
            Box::new(|t, ids| t.sub(ids[0], ids[1]).unwrap()),
        ),
        (
            "mul",
            vec![rand_t(vec![2, 3]), rand_t(vec![2, 3])],
            Box::new(|t, ids| t.mul(ids[0], ids[1]).unwrap()),
        ),
        (
            "scale",
            vec![rand_t(vec![2, 3])],
            Box::new(|t, ids| t.scale(ids[0], -1.37)),
        ),
        (
            "add_scalar",
            vec![rand_t(vec![2, 3])],
            Box::new(|t, ids| t.add_scalar(ids[0], 0.61)),
        ),
        ("exp", vec![rand_t(vec![2, 3])], Box::new(|t, ids| t.exp(ids[0]))),
        ("gelu", vec![rand_t(vec![2, 4])], Box::new(|t, ids| t.gelu(ids[0]))),
        (
            "softmax_rows",
            vec![rand_t(vec![3, 5])],
            Box::new(|t, ids| t.softmax_rows(ids[0])),
        ),
        (
            "layer_norm",
            vec![rand_t(vec![3, 4]), rand_t(vec![4]), rand_t(vec![4])],
            Box::new(|t, ids| t.layer_norm(ids[0], ids[1], ids[2], 1e-5).unwrap()),
        ),
        (
            "embed_lookup",
            vec![rand_t(vec![5, 3])],
            Box::new(|t, ids| t.embed_lookup(ids[0], &[1, 4, 1, 0]).unwrap()),
        ),
        (
            "concat_rows",
            vec![rand_t(vec![2, 3]), rand_t(vec![1, 3])],
            Box::new(|t, ids| t.concat_rows(ids).unwrap()),
        ),
        (
            "concat_cols",
            vec![rand_t(vec![2, 2]), rand_t(vec![2, 3])],
            Box::new(|t, ids| t.concat_cols(ids).unwrap()),
        ),
        (
            "slice_cols",
            vec![rand_t(vec![3, 5])],
            Box::new(|t, ids| t.slice_cols(ids[0], 1, 3).unwrap()),
        ),
        (
            "cross_entropy_sum",
            vec![rand_t(vec![3, 4])],
            Box::new(|t, ids| t.cross_entropy_sum(ids[0], &[2, 0, 3]).unwrap()),
        ),
        (
            "dropout_mask",
            vec![rand_t(vec![2, 3])],
            Box::new(|t, ids| {
                t.dropout_mask(ids[0], vec![2.0, 0.0, 2.0, 0.0, 2.0, 2.0]).unwrap()
            }),
        ),
    ];

    for (name, inputs, build) in &cases {
        // fixed probe weights decouple the scalarization from the op
        let probe_seed: Vec<Real> = {
            let out_len = {
                let mut tape = Tape::new();
                let ids: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
                let out = build(&mut tape, &ids);
                tape.value(out).len()
            };
            let mut prng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
            (0..out_len).map(|_| prng.gen_range(-1.0..1.0)).collect()
        };

        let value_at = |shifted: &[Tensor]| -> Real {
            let mut tape = Tape::new();
            let ids: Vec<_> = shifted.iter().map(|t| tape.leaf(t.clone(), false)).collect();
            let out = build(&mut tape, &ids);
            let shape = tape.value(out).shape().to_vec();
            let probe = tape.constant(Tensor::new(shape, probe_seed.clone()).unwrap());
            let prod = tape.mul(out, probe).unwrap();
            let loss = tape.sum_all(prod);
            tape.value(loss).item()
        };

        // backward gradients
        let mut tape = Tape::new();
        let ids: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let out = build(&mut tape, &ids);
        let shape = tape.value(out).shape().to_vec();
        let probe = tape.constant(Tensor::new(shape, probe_seed.clone()).unwrap());
        let prod = tape.mul(out, probe).unwrap();
        let loss = tape.sum_all(prod);
        tape.backward(loss)?;

        for (arg, input) in inputs.iter().enumerate() {
            let analytic = tape.grad(ids[arg]);
            for i in 0..input.len() {
                let mut plus = inputs.clone();
                plus[arg].data_mut()[i] += FD_STEP;
                let mut minus = inputs.clone();
                minus[arg].data_mut()[i] -= FD_STEP;
                let fd = ((value_at(&plus) - value_at(&minus)) / (2.0 * FD_STEP)) as f64;
                let an = analytic.data()[i] as f64;
                let err = grad_rel_err(fd, an);
                update_worst(&mut report, err, || {
                    format!("{name} arg{arg}[{i}]: fd {fd:.9e} vs backward {an:.9e}")
                });
            }
        }
    }
    Ok(report)
}

/// Result of the Monte-Carlo KL comparison.
#[derive(Debug, Clone)]
pub struct KlCheckReport {
    pub sites: usize,
    pub max_rel_dev: f64,
    pub prior_exact_zero: bool,
}

impl KlCheckReport {
    pub fn ok(&self, tol: f64) -> bool {
        self.prior_exact_zero && self.max_rel_dev <= tol
    }
}

/// Compare the closed-form site KL against `E_q[log q - log p_r]` estimated
/// with `samples` draws, on `n_sites` random sites of `dims` dimensions.
/// Random sites are redrawn until their KL is at least 0.1 so the relative
/// tolerance has a scale to bite on. Also verifies q = prior gives exactly 0.
pub fn mc_kl_check(n_sites: usize, dims: usize, samples: usize, seed: u64) -> KlCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_rel_dev = 0.0f64;
    for _ in 0..n_sites {
        let site = loop {
            let mu: Vec<Real> = (0..dims).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let log_sigma: Vec<Real> = (0..dims).map(|_| rng.gen_range(-1.0..0.5)).collect();
            let prior_mu: Vec<Real> = (0..dims).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let prior_sigma: Vec<Real> = (0..dims).map(|_| rng.gen_range(0.5..2.0)).collect();
            let site = VariationalSite::new(
                Tensor::new(vec![dims], mu).unwrap(),
                Tensor::new(vec![dims], log_sigma).unwrap(),
                Tensor::new(vec![dims], prior_mu).unwrap(),
                Tensor::new(vec![dims], prior_sigma).unwrap(),
            )
            .unwrap();
            if site.kl() >= 0.1 {
                break site;
            }
        };
        let closed = site.kl() as f64;

        // E_q[log q - log p_r] with theta = mu + sigma * eps:
        // sum_i log(sr/s) - eps^2/2 + (s*eps + mu - mr)^2 / (2 sr^2)
        let mut acc = 0.0f64;
        for _ in 0..samples {
            let mut term = 0.0f64;
            for i in 0..dims {
                let s = site.log_sigma.data()[i].exp() as f64;
                let sr = site.prior_sigma.data()[i] as f64;
                let dm = (site.mu.data()[i] - site.prior_mu.data()[i]) as f64;
                let e: f64 = rng.sample(StandardNormal);
                let shifted = s * e + dm;
                term += (sr / s).ln() - e * e / 2.0 + shifted * shifted / (2.0 * sr * sr);
            }
            acc += term;
        }
        let mc = acc / samples as f64;
        let rel = (mc - closed).abs() / closed;
        if rel > max_rel_dev {
            max_rel_dev = rel;
        }
    }

    // exactness at the prior
    let prior = Tensor::new(vec![3], vec![0.25, -1.5, 0.75]).unwrap();
    let site_at_prior = VariationalSite::new(
        prior.clone(),
        Tensor::zeros(vec![3]),
        prior,
        Tensor::full(vec![3], 1.0),
    )
    .unwrap();
    KlCheckReport { sites: n_sites, max_rel_dev, prior_exact_zero: site_at_prior.kl() == 0.0 }
}

/// Run `trials` random prefix-perturbation experiments; returns the number
/// of trials where any logits row before the perturbed position changed,
/// plus the largest softmax row-sum deviation seen anywhere in the forward
/// graphs.
pub fn causality_scan(model: &Model, trials: usize, seed: u64) -> Result<(usize, f64)> {
    let v = model.config.vocab_size as u32;
    let max_len = model.config.max_len.min(12);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut violations = 0usize;
    let mut worst_sum = 0.0f64;
    for _ in 0..trials {
        let len = rng.gen_range(2..=max_len);
        let tokens: Vec<u32> = (0..len).map(|_| rng.gen_range(0..v)).collect();
        let pos = rng.gen_range(1..len);
        let mut perturbed = tokens.clone();
        perturbed[pos] = (perturbed[pos] + 1 + rng.gen_range(0..v - 1)) % v;

        let (mut tape_a, id_a) = model.forward_with_tape(&tokens)?;
        let (mut tape_b, id_b) = model.forward_with_tape(&perturbed)?;
        // include the output distribution alongside the attention softmaxes
        tape_a.softmax_rows(id_a);
        tape_b.softmax_rows(id_b);
        worst_sum = worst_sum
            .max(tape_a.max_softmax_row_sum_error() as f64)
            .max(tape_b.max_softmax_row_sum_error() as f64);
        let a = tape_a.value(id_a);
        let b = tape_b.value(id_b);
        let cols = a.cols();
        if a.data()[..pos * cols] != b.data()[..pos * cols] {
            violations += 1;
        }
    }
    Ok((violations, worst_sum))
}
