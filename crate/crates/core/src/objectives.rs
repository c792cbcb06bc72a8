//! Inner classification loss, adversarial KL consistency, their weighted
//! sum, and the outer loss over surrogate domains.
//!
//! Prompts are computed from stop-gradient backbone features. Every loss
//! also accepts those features precomputed (`context`): a forward-identical
//! constant copy, which is what finite-difference oracles and the
//! hypergradient need when they move Θ but must leave the stop-gradient
//! copy where it was.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{images_on, DomainPrompt, ModelSpec};
use crate::rng;
use crate::tensor::{ParamSet, ParamVars, Scalar, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// `KL(p_clean ‖ p_perturbed)`.
    #[default]
    CleanPerturbed,
    PerturbedClean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InnerLossConfig {
    pub lambda: f64,
    pub rho: f64,
    #[serde(default = "one")]
    pub adv_steps: usize,
    /// Probe scale; `None` means `1e-6 * sqrt(input dim)`.
    #[serde(default)]
    pub xi: Option<f64>,
    #[serde(default)]
    pub kl_direction: KlDirection,
}

fn one() -> usize {
    1
}

impl Default for InnerLossConfig {
    fn default() -> Self {
        InnerLossConfig {
            lambda: 0.5,
            rho: 1.0,
            adv_steps: 1,
            xi: None,
            kl_direction: KlDirection::CleanPerturbed,
        }
    }
}

impl InnerLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(Error::config(format!("rho must be finite and > 0, got {}", self.rho)));
        }
        if self.adv_steps == 0 {
            return Err(Error::config("adv_steps must be at least 1"));
        }
        if let Some(xi) = self.xi {
            if !(xi > 0.0 && xi.is_finite()) {
                return Err(Error::config(format!("xi must be finite and > 0, got {xi}")));
            }
        }
        Ok(())
    }

    pub fn xi_for(&self, input_dim: usize) -> f64 {
        self.xi.unwrap_or(1e-6 * (input_dim as f64).sqrt())
    }
}

/// Mean cross-entropy of `logits: [N, K]` against integer labels.
pub fn cross_entropy<'t, T: Scalar>(logits: &Var<'t, T>, labels: &[usize]) -> Result<Var<'t, T>> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != labels.len() || s[0] == 0 {
        return Err(Error::contract(format!("cross_entropy: logits {s:?} for {} labels", labels.len())));
    }
    let (n, k) = (s[0], s[1]);
    let mut onehot = vec![0.0; n * k];
    for (i, &l) in labels.iter().enumerate() {
        if l >= k {
            return Err(Error::contract(format!("label {l} out of range for {k} classes")));
        }
        onehot[i * k + l] = 1.0;
    }
    let onehot = logits.tape().constant(Tensor::from_f64(vec![n, k], &onehot)?);
    Ok(logits.log_softmax()?.mul(&onehot)?.sum().scale(-1.0 / n as f64))
}

/// Batch mean of `KL(softmax(a) ‖ softmax(b))` over rows.
pub fn kl_mean<'t, T: Scalar>(a: &Var<'t, T>, b: &Var<'t, T>) -> Result<Var<'t, T>> {
    let n = a.shape()[0];
    let la = a.log_softmax()?;
    let lb = b.log_softmax()?;
    Ok(la.exp().mul(&la.sub(&lb)?)?.sum().scale(1.0 / n as f64))
}

/// Prompt from `features` through a stop-gradient barrier, or from the
/// precomputed `context` when given.
pub fn prompt_for<'t, T: Scalar>(
    spec: &ModelSpec,
    v: &ParamVars<'t, T>,
    features: &Var<'t, T>,
    context: Option<&Tensor<f64>>,
) -> Result<DomainPrompt<'t, T>> {
    match context {
        Some(c) => spec.encode_prompt(v, &features.tape().constant(c.cast())),
        None => spec.encode_prompt(v, &features.stop_gradient()),
    }
}

/// Inner classification loss: mean CE with one prompt shared by the batch.
pub fn inner_cl<'t, T: Scalar>(
    spec: &ModelSpec,
    v: &ParamVars<'t, T>,
    x: &Var<'t, T>,
    labels: &[usize],
    context: Option<&Tensor<f64>>,
) -> Result<Var<'t, T>> {
    let z = spec.extract_features(v, x)?;
    let prompt = prompt_for(spec, v, &z, context)?;
    cross_entropy(&spec.predict(v, &z, &prompt)?, labels)
}

fn adv_term<'t, T: Scalar>(
    spec: &ModelSpec,
    v: &ParamVars<'t, T>,
    x: &Var<'t, T>,
    clean_logits: &Var<'t, T>,
    prompt: &DomainPrompt<'t, T>,
    eps: &Tensor<f64>,
    direction: KlDirection,
) -> Result<Var<'t, T>> {
    if eps.shape() != x.shape().as_slice() {
        return Err(Error::contract(format!(
            "perturbation {:?} does not match inputs {:?}",
            eps.shape(),
            x.shape()
        )));
    }
    let xp = x.add(&x.tape().constant(eps.cast()))?;
    let zp = spec.extract_features(v, &xp)?;
    let pert_logits = spec.predict(v, &zp, prompt)?;
    match direction {
        KlDirection::CleanPerturbed => kl_mean(clean_logits, &pert_logits),
        KlDirection::PerturbedClean => kl_mean(&pert_logits, clean_logits),
    }
}

/// Adversarial consistency at a fixed perturbation `eps`; both branches use
/// the prompt of the clean batch.
pub fn inner_adv<'t, T: Scalar>(
    spec: &ModelSpec,
    v: &ParamVars<'t, T>,
    x: &Var<'t, T>,
    eps: &Tensor<f64>,
    cfg: &InnerLossConfig,
    context: Option<&Tensor<f64>>,
) -> Result<Var<'t, T>> {
    let z = spec.extract_features(v, x)?;
    let prompt = prompt_for(spec, v, &z, context)?;
    let logits = spec.predict(v, &z, &prompt)?;
    adv_term(spec, v, x, &logits, &prompt, eps, cfg.kl_direction)
}

/// The parts of the inner objective recorded on one tape.
pub struct InnerTerms<'t, T: Scalar> {
    pub cl: Var<'t, T>,
    /// `None` when λ = 0 (the term is not evaluated).
    pub adv: Option<Var<'t, T>>,
    pub total: Var<'t, T>,
}

/// `inner_cl + λ · inner_adv`, sharing the clean forward pass. With λ = 0
/// the adversarial branch is skipped and `eps` may be `None`.
pub fn inner_total<'t, T: Scalar>(
    spec: &ModelSpec,
    v: &ParamVars<'t, T>,
    x: &Var<'t, T>,
    labels: &[usize],
    eps: Option<&Tensor<f64>>,
    cfg: &InnerLossConfig,
    context: Option<&Tensor<f64>>,
) -> Result<InnerTerms<'t, T>> {
    let z = spec.extract_features(v, x)?;
    let prompt = prompt_for(spec, v, &z, context)?;
    let logits = spec.predict(v, &z, &prompt)?;
    let cl = cross_entropy(&logits, labels)?;
    if cfg.lambda == 0.0 {
        return Ok(InnerTerms { cl, adv: None, total: cl });
    }
    let eps = eps.ok_or_else(|| Error::contract("inner_total with lambda > 0 needs a perturbation"))?;
    let adv = adv_term(spec, v, x, &logits, &prompt, eps, cfg.kl_direction)?;
    let total = cl.add(&adv.scale(cfg.lambda))?;
    Ok(InnerTerms {
        cl,
        adv: Some(adv),
        total,
    })
}

/// Mean CE over surrogate batches sharing `labels`, each with its own
/// prompt. `contexts[k]`, when given, replaces the stop-gradient features of
/// batch `k`.
pub fn outer_loss<'t, T: Scalar>(
    spec: &ModelSpec,
    v: &ParamVars<'t, T>,
    xs: &[Var<'t, T>],
    labels: &[usize],
    contexts: Option<&[Tensor<f64>]>,
) -> Result<Var<'t, T>> {
    if xs.is_empty() {
        return Err(Error::contract("outer_loss needs at least one surrogate batch"));
    }
    if let Some(c) = contexts {
        if c.len() != xs.len() {
            return Err(Error::contract("one context per surrogate batch"));
        }
    }
    let mut acc: Option<Var<'t, T>> = None;
    for (k, x) in xs.iter().enumerate() {
        let ce = inner_cl(spec, v, x, labels, contexts.map(|c| &c[k]))?;
        acc = Some(match acc {
            None => ce,
            Some(a) => a.add(&ce)?,
        });
    }
    Ok(acc.unwrap().scale(1.0 / xs.len() as f64))
}

/// Backbone features of `images` at `params`, as a constant `f64` tensor.
pub fn features_of<T: Scalar>(spec: &ModelSpec, params: &ParamSet<T>, images: &Tensor<f32>) -> Result<Tensor<f64>> {
    let tape = Tape::new();
    let v = params.register(&tape);
    let z = spec.extract_features(&v, &images_on(&tape, images))?;
    let out = z.value().cast();
    Ok(out)
}

/// Scales every sample (leading-axis row) of `t` to L2 norm `radius`.
/// Rows with zero or non-finite norm are taken from `fallback` instead.
/// Returns the number of rows that fell back.
fn normalize_rows(t: &mut [f64], fallback: &[f64], row: usize, radius: f64) -> usize {
    let mut fell_back = 0;
    for (r, fb) in t.chunks_mut(row).zip(fallback.chunks(row)) {
        let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 && norm.is_finite() {
            r.iter_mut().for_each(|v| *v *= radius / norm);
        } else {
            let fnorm = fb.iter().map(|v| v * v).sum::<f64>().sqrt();
            for (v, f) in r.iter_mut().zip(fb) {
                *v = f * radius / fnorm;
            }
            fell_back += 1;
        }
    }
    fell_back
}

/// Unit-norm random directions, one per sample.
pub fn random_directions(shape: &[usize], seed: u64) -> Vec<f64> {
    let n = shape[0];
    let row: usize = shape[1..].iter().product();
    let mut r = rng::stream(seed);
    let mut d: Vec<f64> = (0..n * row).map(|_| r.sample(StandardNormal)).collect();
    let copy = d.clone();
    normalize_rows(&mut d, &copy, row, 1.0);
    d
}

/// Worst-case perturbation `ε*` with per-sample L2 norm exactly `ρ`.
#[derive(Debug, Clone)]
pub struct Perturbation {
    pub eps: Tensor<f64>,
    /// Samples whose ascent direction vanished and kept the random direction.
    pub fallbacks: usize,
}

/// Approximates the inner max of the adversarial loss by power iteration on
/// the KL consistency (one step by default), with the clean-batch prompt held
/// fixed. Always evaluated in `f64`, whatever `T` the model trains in, since
/// the probe scale is far below `f32` resolution.
pub fn adversarial_direction<T: Scalar>(
    spec: &ModelSpec,
    params: &ParamSet<T>,
    images: &Tensor<f32>,
    cfg: &InnerLossConfig,
    seed: u64,
) -> Result<Perturbation> {
    cfg.validate()?;
    let params: ParamSet<f64> = params.cast();
    let shape = images.shape().to_vec();
    let row: usize = shape[1..].iter().product();
    let random = random_directions(&shape, seed);
    let xi = cfg.xi_for(row);

    let tape = Tape::<f64>::new();
    let v = params.register(&tape);
    let x = images_on(&tape, images);
    let z = spec.extract_features(&v, &x)?;
    let prompt = spec.encode_prompt(&v, &z.stop_gradient())?;
    let clean = spec.predict(&v, &z, &prompt)?.stop_gradient();

    let mut dir = random.clone();
    let mut fallbacks = 0;
    let mut eps: Option<Vec<f64>> = None;
    for step in 0..cfg.adv_steps {
        // first step: probe at ξ·d around x; later steps: ascend from x + ε
        let (offset, scale) = match &eps {
            None => (vec![0.0; dir.len()], xi),
            Some(e) => (e.clone(), cfg.rho),
        };
        let start: Vec<f64> = offset.iter().zip(&dir).map(|(o, d)| o + scale * d).collect();
        let probe = tape.input(Tensor::new(shape.clone(), start)?);
        let zp = spec.extract_features(&v, &x.add(&probe)?)?;
        let pert = spec.predict(&v, &zp, &prompt)?;
        let kl = match cfg.kl_direction {
            KlDirection::CleanPerturbed => kl_mean(&clean, &pert)?,
            KlDirection::PerturbedClean => kl_mean(&pert, &clean)?,
        };
        let mut g = tape.grad_inputs(kl, &[probe])?.remove(0).into_data();
        let fb = match &eps {
            None => random.clone(),
            Some(e) => e.clone(),
        };
        let n_fb = normalize_rows(&mut g, &fb, row, 1.0);
        if step == 0 {
            fallbacks = n_fb;
        }
        let next: Vec<f64> = match &eps {
            None => g.iter().map(|d| cfg.rho * d).collect(),
            Some(e) => {
                let mut s: Vec<f64> = e.iter().zip(&g).map(|(e, d)| e + cfg.rho * d).collect();
                normalize_rows(&mut s, e, row, cfg.rho);
                s
            }
        };
        dir = g;
        eps = Some(next);
    }
    let mut eps = eps.expect("at least one step");
    let copy = eps.clone();
    normalize_rows(&mut eps, &copy, row, cfg.rho);
    Ok(Perturbation {
        eps: Tensor::new(shape, eps)?,
        fallbacks,
    })
}
