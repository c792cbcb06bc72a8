//! Single-step bi-level optimization: inner step on Θ = (θ, φ), outer
//! gradients at the candidate Θ, and the ω hypergradient chain term by
//! symmetric finite differences (training) or forward-over-reverse dual
//! numbers (audit oracle).

use serde::{Deserialize, Serialize};

use crate::datasets::{batches, Batch, LabeledDataset};
use crate::error::{Error, Result};
use crate::model::{images_on, ModelSpec};
use crate::objectives::{self, features_of, InnerLossConfig};
use crate::rng;
use crate::surrogate::{surrogate_batches, TransformPipeline};
use crate::tensor::gradcheck::Objective;
use crate::tensor::{tape_stats, Dual, Gradients, ParamSet, ParamVars, Partition, Scalar, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HypergradMode {
    #[default]
    Fd,
    ExactAudit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HypergradConfig {
    pub epsilon_theta: f64,
    #[serde(default)]
    pub mode: HypergradMode,
    #[serde(default)]
    pub recompute_committed_grad: bool,
    /// Perturb by `ε_Θ · δ / ‖δ‖` instead of `ε_Θ · δ`.
    #[serde(default)]
    pub normalize_delta: bool,
    #[serde(default = "default_audit_limit")]
    pub audit_param_limit: usize,
}

fn default_audit_limit() -> usize {
    10_000
}

impl Default for HypergradConfig {
    fn default() -> Self {
        HypergradConfig {
            epsilon_theta: 0.01,
            mode: HypergradMode::Fd,
            recompute_committed_grad: false,
            normalize_delta: false,
            audit_param_limit: default_audit_limit(),
        }
    }
}

impl HypergradConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon_theta > 0.0 && self.epsilon_theta.is_finite()) {
            return Err(Error::config(format!(
                "epsilon_theta must be finite and > 0, got {}",
                self.epsilon_theta
            )));
        }
        Ok(())
    }
}

/// Multiplies both learning rates by `factor` once `epoch >= at_epoch`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepDecay {
    /// `None` means half of the total epochs.
    #[serde(default)]
    pub at_epoch: Option<usize>,
    #[serde(default = "tenth")]
    pub factor: f64,
}

fn tenth() -> f64 {
    0.1
}

impl Default for StepDecay {
    fn default() -> Self {
        StepDecay {
            at_epoch: None,
            factor: 0.1,
        }
    }
}

impl StepDecay {
    pub fn multiplier(&self, epoch: usize, total_epochs: usize) -> f64 {
        let at = self.at_epoch.unwrap_or(total_epochs / 2);
        if total_epochs > 1 && epoch >= at {
            self.factor
        } else {
            1.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub alpha_theta: f64,
    pub alpha_omega: f64,
    #[serde(default)]
    pub schedule: StepDecay,
    #[serde(default)]
    pub inner: InnerLossConfig,
    #[serde(default)]
    pub hypergrad: HypergradConfig,
    #[serde(default = "yes")]
    pub shuffle: bool,
    /// Rescale the Θ and ω gradients to at most this L2 norm before updating.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_clip: Option<f64>,
}

fn yes() -> bool {
    true
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !(self.alpha_theta > 0.0 && self.alpha_theta.is_finite()) {
            return Err(Error::config(format!("alpha_theta must be > 0, got {}", self.alpha_theta)));
        }
        // α_ω = 0 is the frozen-prompt baseline
        if !(self.alpha_omega >= 0.0 && self.alpha_omega.is_finite()) {
            return Err(Error::config(format!("alpha_omega must be >= 0, got {}", self.alpha_omega)));
        }
        if !(self.schedule.factor > 0.0 && self.schedule.factor.is_finite()) {
            return Err(Error::config("schedule factor must be > 0"));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::config(format!("grad_clip must be > 0, got {c}")));
            }
        }
        self.inner.validate()?;
        self.hypergrad.validate()
    }
}

fn clipped<T: Scalar>(g: Gradients<T>, max_norm: Option<f64>) -> Gradients<T> {
    match max_norm {
        Some(c) if g.norm_l2() > c => g.scaled(c / g.norm_l2()),
        _ => g,
    }
}

/// Parameters and counters carried across steps. `params` holds all three
/// partitions; Θ is `theta ∪ phi`, ω is `omega`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainerState<T: Scalar> {
    pub t: u64,
    pub params: ParamSet<T>,
    pub alpha_theta: f64,
    pub alpha_omega: f64,
    pub seed: u64,
}

impl<T: Scalar> TrainerState<T> {
    pub fn new(spec: &ModelSpec, seed: u64, alpha_theta: f64, alpha_omega: f64) -> Result<Self> {
        Ok(TrainerState {
            t: 0,
            params: spec.init_params(seed)?,
            alpha_theta,
            alpha_omega,
            seed,
        })
    }
}

fn finite<T: Scalar>(g: &Gradients<T>, step: u64, what: &str) -> Result<()> {
    if g.all_finite() {
        Ok(())
    } else {
        Err(Error::Training {
            step,
            msg: format!("non-finite {what}"),
        })
    }
}

/// `L_in` on one source batch, as an [`Objective`] over the full parameter
/// set. `context` is the stop-gradient prompt input (backbone features at
/// Θ_t); `eps` the fixed adversarial perturbation.
pub struct InnerObjective<'a> {
    pub spec: &'a ModelSpec,
    pub images: &'a Tensor<f32>,
    pub labels: &'a [usize],
    pub eps: Option<&'a Tensor<f64>>,
    pub context: Option<&'a Tensor<f64>>,
    pub cfg: &'a InnerLossConfig,
}

impl Objective for InnerObjective<'_> {
    fn eval<'t, T: Scalar>(&self, tape: &'t Tape<T>, vars: &ParamVars<'t, T>) -> Result<Var<'t, T>> {
        let x = images_on(tape, self.images);
        let terms = objectives::inner_total(self.spec, vars, &x, self.labels, self.eps, self.cfg, self.context)?;
        Ok(terms.total)
    }
}

/// `L_out` over surrogate batches sharing one label vector.
pub struct OuterObjective<'a> {
    pub spec: &'a ModelSpec,
    pub surrogates: &'a [Tensor<f32>],
    pub labels: &'a [usize],
    pub contexts: Option<&'a [Tensor<f64>]>,
}

impl Objective for OuterObjective<'_> {
    fn eval<'t, T: Scalar>(&self, tape: &'t Tape<T>, vars: &ParamVars<'t, T>) -> Result<Var<'t, T>> {
        let xs: Vec<_> = self.surrogates.iter().map(|s| images_on(tape, s)).collect();
        objectives::outer_loss(self.spec, vars, &xs, self.labels, self.contexts)
    }
}

/// Value and gradient of `f` w.r.t. `wrt`.
pub fn value_and_grad<O: Objective + ?Sized, T: Scalar>(
    f: &O,
    params: &ParamSet<T>,
    wrt: &[Partition],
) -> Result<(f64, Gradients<T>)> {
    let tape = Tape::new();
    let v = params.register(&tape);
    let loss = f.eval(&tape, &v)?;
    let value = loss.value().item()?.primal();
    Ok((value, tape.backward(loss, wrt)?))
}

pub struct InnerStep<T: Scalar> {
    /// Candidate Θ_{t+1}; ω entries are copied unchanged.
    pub next: ParamSet<T>,
    pub g_in: Gradients<T>,
    pub loss: f64,
}

/// `Θ_{t+1} = Θ_t − α_Θ ∇_Θ L_in(Θ_t, ω)`; `params` is not mutated.
pub fn inner_step<O: Objective + ?Sized, T: Scalar>(inner: &O, params: &ParamSet<T>, alpha_theta: f64) -> Result<InnerStep<T>> {
    let (loss, g_in) = value_and_grad(inner, params, &Partition::MODEL)?;
    finite(&g_in, 0, "inner gradient")?;
    Ok(InnerStep {
        next: params.offset(&g_in, -alpha_theta)?,
        g_in,
        loss,
    })
}

pub struct OuterGrads<T: Scalar> {
    /// `∇_Θ L_out` at Θ_{t+1}.
    pub delta: Gradients<T>,
    /// `∇_ω L_out` with Θ_{t+1} held constant.
    pub direct: Gradients<T>,
    pub loss: f64,
}

/// One backward pass of `L_out` at `next`, split into δ and the direct ω term.
pub fn outer_grads<O: Objective + ?Sized, T: Scalar>(outer: &O, next: &ParamSet<T>) -> Result<OuterGrads<T>> {
    let (loss, g) = value_and_grad(outer, next, &Partition::ALL)?;
    finite(&g, 0, "outer gradient")?;
    Ok(OuterGrads {
        delta: g.select(&Partition::MODEL),
        direct: g.select(&[Partition::Omega]),
        loss,
    })
}

/// `−(α_Θ / 2ε)(∇_ω L_in(Θ_t + εδ) − ∇_ω L_in(Θ_t − εδ))`: two ω-only
/// backward passes, no second-order terms. With `normalize_delta` the step
/// is `ε δ / ‖δ‖`.
pub fn hypergrad_fd<O: Objective + ?Sized, T: Scalar>(
    inner: &O,
    params: &ParamSet<T>,
    delta: &Gradients<T>,
    alpha_theta: f64,
    epsilon_theta: f64,
    normalize_delta: bool,
) -> Result<Gradients<T>> {
    let scale = if normalize_delta {
        let n = delta.norm_l2();
        if n == 0.0 {
            // δ = 0: the chain term vanishes; keep the pass count fixed anyway
            epsilon_theta
        } else {
            epsilon_theta / n
        }
    } else {
        epsilon_theta
    };
    let plus = params.offset(delta, scale)?;
    let minus = params.offset(delta, -scale)?;
    let (_, gp) = value_and_grad(inner, &plus, &[Partition::Omega])?;
    let (_, gm) = value_and_grad(inner, &minus, &[Partition::Omega])?;
    let chain = gp.add_scaled(&gm, -1.0)?.scaled(-alpha_theta / (2.0 * scale));
    finite(&chain, 0, "finite-difference hypergradient")?;
    Ok(chain)
}

/// Dual-number copy of `params` with Θ tangents `delta` (missing names get 0).
fn with_tangents(params: &ParamSet<f64>, tangent: &Gradients<f64>) -> Result<ParamSet<Dual>> {
    let mut out = ParamSet::new();
    for (name, part, t) in params.iter() {
        let tan = tangent.get(name);
        if let Some(d) = tan {
            if d.shape() != t.shape() {
                return Err(Error::contract(format!("tangent for {name} has shape {:?}", d.shape())));
            }
        }
        let data = t
            .data()
            .iter()
            .enumerate()
            .map(|(i, &re)| Dual {
                re,
                tan: tan.map_or(0.0, |d| d.data()[i]),
            })
            .collect();
        out.insert(name, part, Tensor::new(t.shape().to_vec(), data)?)?;
    }
    Ok(out)
}

fn audit_guard(params: &ParamSet<f64>, limit: usize) -> Result<()> {
    let n = params.numel(&Partition::ALL);
    if n > limit {
        return Err(Error::Audit(format!(
            "exact audit refused: {n} parameters exceed the limit of {limit}"
        )));
    }
    Ok(())
}

/// Exact chain term `−α_Θ ∇_ω(δᵀ ∇_Θ L_in(Θ_t, ω))`. The ω-gradient is taken
/// on a tape of dual numbers whose Θ tangent is δ; its tangent is the mixed
/// second derivative applied to δ. Test oracle only.
pub fn hypergrad_exact<O: Objective + ?Sized>(
    inner: &O,
    params: &ParamSet<f64>,
    delta: &Gradients<f64>,
    alpha_theta: f64,
    param_limit: usize,
) -> Result<Gradients<f64>> {
    audit_guard(params, param_limit)?;
    let dual = with_tangents(params, delta)?;
    let (_, g) = value_and_grad(inner, &dual, &[Partition::Omega])?;
    let chain = Gradients::from_fn(g.iter().map(|(name, part, t)| {
        let tan: Vec<f64> = t.tangents().iter().map(|v| -alpha_theta * v).collect();
        (
            name.to_string(),
            part,
            Tensor::new(t.shape().to_vec(), tan).expect("shape preserved"),
        )
    }));
    Ok(chain)
}

/// `d/dω L_out(ω, Θ_t − α_Θ ∇_Θ L_in(Θ_t, ω))` by forward mode through the
/// whole single-step map, one dual pass per ω coordinate. Test oracle only.
pub fn total_omega_grad_end_to_end<I: Objective + ?Sized, O: Objective + ?Sized>(
    inner: &I,
    outer: &O,
    params: &ParamSet<f64>,
    alpha_theta: f64,
    param_limit: usize,
) -> Result<Gradients<f64>> {
    audit_guard(params, param_limit)?;
    let omega = params.select(&[Partition::Omega]);
    let mut out = Vec::new();
    for (name, part, t) in omega.iter() {
        let mut col = vec![0.0; t.numel()];
        for (i, slot) in col.iter_mut().enumerate() {
            let mut e = vec![0.0; t.numel()];
            e[i] = 1.0;
            let seed = Gradients::from_fn([(name.to_string(), part, Tensor::new(t.shape().to_vec(), e)?)]);
            let dual = with_tangents(params, &seed)?;
            let (_, g_in) = value_and_grad(inner, &dual, &Partition::MODEL)?;
            let next = dual.offset(&g_in, -alpha_theta)?;
            let tape = Tape::new();
            let v = next.register(&tape);
            let loss = outer.eval(&tape, &v)?;
            *slot = loss.value().item()?.tangent();
        }
        out.push((name.to_string(), part, Tensor::new(t.shape().to_vec(), col)?));
    }
    Ok(Gradients::from_fn(out))
}

/// Per-step diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub inner_cl: f64,
    /// 0 when λ = 0 (not evaluated).
    pub inner_adv: f64,
    pub outer_loss: f64,
    pub grad_norm_theta: f64,
    pub grad_norm_omega: f64,
    pub chain_norm: f64,
    /// Reverse passes over parameters during this step.
    pub backward_passes: u64,
    /// Reverse passes on dual numbers (second-order work) during this step.
    pub second_order_passes: u64,
    pub adversarial_fallbacks: usize,
}

/// One outer iteration on a source batch; mutates `state` only on success.
pub fn train_step<T: Scalar>(
    state: &mut TrainerState<T>,
    spec: &ModelSpec,
    batch: &Batch,
    pipelines: &[TransformPipeline],
    cfg: &TrainConfig,
) -> Result<StepReport> {
    let step = state.t;
    let at_step = |e: Error| match e {
        Error::Training { msg, .. } => Error::Training { step, msg },
        other => other,
    };
    let before = tape_stats();
    let stream = |label: u64| rng::derive_path(state.seed, &[label, step]);

    // (1) surrogate domains
    let surrogates: Vec<Tensor<f32>> = surrogate_batches(&batch.images, &batch.labels, pipelines, stream(rng::labels::SURROGATE))?
        .into_iter()
        .map(|s| s.images)
        .collect();

    // (2) inner objective at Θ_t with a fixed ε* and prompt context
    let (eps, fallbacks) = if cfg.inner.lambda > 0.0 {
        let p = objectives::adversarial_direction(spec, &state.params, &batch.images, &cfg.inner, stream(rng::labels::ADVERSARIAL))?;
        (Some(p.eps), p.fallbacks)
    } else {
        (None, 0)
    };
    let context = features_of(spec, &state.params, &batch.images)?;
    let inner = InnerObjective {
        spec,
        images: &batch.images,
        labels: &batch.labels,
        eps: eps.as_ref(),
        context: Some(&context),
        cfg: &cfg.inner,
    };
    let (inner_cl, inner_adv, g_in) = {
        let tape = Tape::new();
        let v = state.params.register(&tape);
        let x = images_on(&tape, &batch.images);
        let terms = objectives::inner_total(spec, &v, &x, &batch.labels, eps.as_ref(), &cfg.inner, Some(&context))?;
        let cl = terms.cl.value().item()?.primal();
        let adv = match terms.adv {
            Some(a) => a.value().item()?.primal(),
            None => 0.0,
        };
        let g = tape.backward(terms.total, &Partition::MODEL)?;
        finite(&g, step, "inner gradient")?;
        (cl, adv, g)
    };
    let raw_theta_norm = g_in.norm_l2();
    let g_in = clipped(g_in, cfg.grad_clip);
    let next = state.params.offset(&g_in, -state.alpha_theta)?;

    // (3) outer gradients at Θ_{t+1}
    let outer = OuterObjective {
        spec,
        surrogates: &surrogates,
        labels: &batch.labels,
        contexts: None,
    };
    let og = outer_grads(&outer, &next).map_err(at_step)?;

    // (4) chain term
    let chain = match cfg.hypergrad.mode {
        HypergradMode::Fd => hypergrad_fd(
            &inner,
            &state.params,
            &og.delta,
            state.alpha_theta,
            cfg.hypergrad.epsilon_theta,
            cfg.hypergrad.normalize_delta,
        )
        .map_err(at_step)?,
        HypergradMode::ExactAudit => hypergrad_exact(
            &inner,
            &state.params.cast(),
            &og.delta.cast(),
            state.alpha_theta,
            cfg.hypergrad.audit_param_limit,
        )?
        .cast(),
    };

    // (5) total ω gradient, (6) ω update
    let total = og.direct.add_scaled(&chain, 1.0)?;
    finite(&total, step, "omega hypergradient")?;
    let raw_omega_norm = total.norm_l2();
    let total = clipped(total, cfg.grad_clip);
    let mut params = state.params.clone();
    params.add_scaled(&total, -state.alpha_omega)?;

    // (7) commit Θ
    let (g_commit, commit_norm) = if cfg.hypergrad.recompute_committed_grad {
        let (_, g) = value_and_grad(&inner, &params, &Partition::MODEL)?;
        finite(&g, step, "committed inner gradient")?;
        let n = g.norm_l2();
        (clipped(g, cfg.grad_clip), n)
    } else {
        (g_in, raw_theta_norm)
    };
    params.add_scaled(&g_commit, -state.alpha_theta)?;
    if !params.all_finite() {
        return Err(Error::Training {
            step,
            msg: "parameters became non-finite".into(),
        });
    }

    // (8)
    state.params = params;
    state.t += 1;
    let after = tape_stats();
    Ok(StepReport {
        step,
        inner_cl,
        inner_adv,
        outer_loss: og.loss,
        grad_norm_theta: commit_norm,
        grad_norm_omega: raw_omega_norm,
        chain_norm: chain.norm_l2(),
        backward_passes: after.param_backwards - before.param_backwards,
        second_order_passes: after.tangent_backwards - before.tangent_backwards,
        adversarial_fallbacks: fallbacks,
    })
}

/// Observer for [`train`]; errors abort training.
pub trait TrainHooks<T: Scalar> {
    fn on_step(&mut self, _state: &TrainerState<T>, _epoch: usize, _report: &StepReport) -> Result<()> {
        Ok(())
    }
    fn on_epoch_end(&mut self, _state: &TrainerState<T>, _epoch: usize) -> Result<()> {
        Ok(())
    }
}

/// Hooks that do nothing.
pub struct NoHooks;

impl<T: Scalar> TrainHooks<T> for NoHooks {}

/// Epochs of shuffled batches with step-decayed learning rates.
pub fn train<T: Scalar>(
    state: &mut TrainerState<T>,
    spec: &ModelSpec,
    data: &LabeledDataset,
    pipelines: &[TransformPipeline],
    cfg: &TrainConfig,
    hooks: &mut dyn TrainHooks<T>,
) -> Result<Vec<StepReport>> {
    cfg.validate()?;
    spec.validate()?;
    let mut reports = Vec::new();
    for epoch in 0..cfg.epochs {
        let m = cfg.schedule.multiplier(epoch, cfg.epochs);
        state.alpha_theta = cfg.alpha_theta * m;
        state.alpha_omega = cfg.alpha_omega * m;
        for batch in batches(data, cfg.batch_size, state.seed, epoch as u64, cfg.shuffle)? {
            let r = train_step(state, spec, &batch, pipelines, cfg)?;
            hooks.on_step(state, epoch, &r)?;
            reports.push(r);
        }
        hooks.on_epoch_end(state, epoch)?;
    }
    Ok(reports)
}

/// One random tiny model for hypergradient audits: parameters, a source
/// batch with its ε* and context, and surrogate batches.
pub struct AuditProblem {
    pub spec: ModelSpec,
    pub params: ParamSet<f64>,
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub eps: Tensor<f64>,
    pub context: Tensor<f64>,
    pub surrogates: Vec<Tensor<f32>>,
    pub inner_cfg: InnerLossConfig,
}

impl AuditProblem {
    /// Tanh MLP on 3x3 inputs, 4 features, 3 classes (127 parameters), all
    /// weights drawn from N(0, 0.5²) so every path is active.
    pub fn random(seed: u64) -> Result<AuditProblem> {
        use rand::Rng;
        use rand_distr::StandardNormal;
        let spec = crate::model::presets::tiny([1, 3, 3], 4, 3);
        let mut params: ParamSet<f64> = spec.init_params(seed)?;
        let mut r = rng::stream(rng::derive(seed, rng::labels::INIT));
        let names: Vec<String> = params.iter().map(|(n, _, _)| n.to_string()).collect();
        for name in names {
            let t = params.get_mut(&name).expect("listed above");
            for v in t.data_mut() {
                *v = 0.5 * r.sample::<f64, _>(StandardNormal);
            }
        }
        let n = 6;
        let mut r = rng::stream(rng::derive(seed, rng::labels::DATA));
        let images = Tensor::new(vec![n, 1, 3, 3], (0..n * 9).map(|_| r.gen::<f32>()).collect())?;
        let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
        let inner_cfg = InnerLossConfig::default();
        let eps = objectives::adversarial_direction(&spec, &params, &images, &inner_cfg, rng::derive(seed, rng::labels::ADVERSARIAL))?.eps;
        let context = features_of(&spec, &params, &images)?;
        let pipelines = crate::surrogate::default_pipelines();
        let surrogates = surrogate_batches(&images, &labels, &pipelines[..2], rng::derive(seed, rng::labels::SURROGATE))?
            .into_iter()
            .map(|s| s.images)
            .collect();
        Ok(AuditProblem {
            spec,
            params,
            images,
            labels,
            eps,
            context,
            surrogates,
            inner_cfg,
        })
    }

    pub fn inner(&self) -> InnerObjective<'_> {
        InnerObjective {
            spec: &self.spec,
            images: &self.images,
            labels: &self.labels,
            eps: Some(&self.eps),
            context: Some(&self.context),
            cfg: &self.inner_cfg,
        }
    }

    pub fn outer(&self) -> OuterObjective<'_> {
        OuterObjective {
            spec: &self.spec,
            surrogates: &self.surrogates,
            labels: &self.labels,
            contexts: None,
        }
    }
}

/// Relative error of the finite-difference chain term against the exact one
/// for each `ε_Θ`, per model.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditTable {
    pub epsilons: Vec<f64>,
    /// `rel_errors[model][k]` for `epsilons[k]`.
    pub rel_errors: Vec<Vec<f64>>,
}

impl AuditTable {
    pub fn median(&self, k: usize) -> f64 {
        let mut col: Vec<f64> = self.rel_errors.iter().map(|r| r[k]).collect();
        col.sort_by(f64::total_cmp);
        let n = col.len();
        if n % 2 == 1 {
            col[n / 2]
        } else {
            0.5 * (col[n / 2 - 1] + col[n / 2])
        }
    }
}

/// `‖fd − exact‖ / (‖exact‖ + 1e-12)` on `models` random tiny problems.
pub fn hypergrad_audit(models: usize, epsilons: &[f64], alpha_theta: f64, seed: u64) -> Result<AuditTable> {
    let mut rel_errors = Vec::with_capacity(models);
    for m in 0..models {
        let p = AuditProblem::random(rng::derive(seed, m as u64))?;
        let inner = p.inner();
        let step = inner_step(&inner, &p.params, alpha_theta)?;
        let og = outer_grads(&p.outer(), &step.next)?;
        let exact = hypergrad_exact(&inner, &p.params, &og.delta, alpha_theta, default_audit_limit())?;
        let en = exact.norm_l2();
        let mut row = Vec::with_capacity(epsilons.len());
        for &e in epsilons {
            let fd = hypergrad_fd(&inner, &p.params, &og.delta, alpha_theta, e, false)?;
            row.push(fd.add_scaled(&exact, -1.0)?.norm_l2() / (en + 1e-12));
        }
        rel_errors.push(row);
    }
    Ok(AuditTable {
        epsilons: epsilons.to_vec(),
        rel_errors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::presets;
    use crate::surrogate::default_pipelines;

    /// `½(Θ − ω)²` on scalars.
    struct Quadratic;

    impl Objective for Quadratic {
        fn eval<'t, T: Scalar>(&self, _tape: &'t Tape<T>, v: &ParamVars<'t, T>) -> Result<Var<'t, T>> {
            let d = v.get("theta")?.sub(&v.get("omega")?)?;
            Ok(d.mul(&d)?.sum().scale(0.5))
        }
    }

    fn scalars(theta: f64, omega: f64) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.insert("theta", Partition::Theta, Tensor::from_f64(vec![1], &[theta]).unwrap()).unwrap();
        p.insert("omega", Partition::Omega, Tensor::from_f64(vec![1], &[omega]).unwrap()).unwrap();
        p
    }

    fn scalar_grad(v: f64) -> Gradients<f64> {
        Gradients::from_fn([("theta".to_string(), Partition::Theta, Tensor::from_f64(vec![1], &[v]).unwrap())])
    }

    #[test]
    fn inner_step_on_quadratic() {
        let p = scalars(1.0, -1.0);
        let s = inner_step(&Quadratic, &p, 0.1).unwrap();
        assert_eq!(s.g_in.get("theta").unwrap().data(), &[2.0]);
        assert!((s.next.get("theta").unwrap().data()[0] - 0.8).abs() < 1e-15);
        assert_eq!(p.get("theta").unwrap().data(), &[1.0]);
        let same = inner_step(&Quadratic, &p, 0.0).unwrap();
        assert_eq!(same.next, p);
    }

    #[test]
    fn quadratic_chain_term_is_exact() {
        let p = scalars(2.0, 1.0);
        let delta = scalar_grad(3.0);
        let exact = hypergrad_exact(&Quadratic, &p, &delta, 0.1, 100).unwrap();
        assert!((exact.get("omega").unwrap().data()[0] - 0.3).abs() < 1e-15);
        for eps in [1e-1, 1e-2, 1e-3] {
            let fd = hypergrad_fd(&Quadratic, &p, &delta, 0.1, eps, false).unwrap();
            assert!((fd.get("omega").unwrap().data()[0] - 0.3).abs() <= 1e-10);
        }
        let zero = hypergrad_fd(&Quadratic, &p, &scalar_grad(0.0), 0.1, 1e-2, false).unwrap();
        assert_eq!(zero.get("omega").unwrap().data(), &[0.0]);
    }

    #[test]
    fn audit_refuses_large_models() {
        let p = scalars(2.0, 1.0);
        assert!(matches!(
            hypergrad_exact(&Quadratic, &p, &scalar_grad(1.0), 0.1, 1),
            Err(Error::Audit(_))
        ));
    }

    #[test]
    fn decay_multiplier() {
        let s = StepDecay::default();
        assert_eq!(s.multiplier(4, 10), 1.0);
        assert_eq!(s.multiplier(5, 10), 0.1);
        assert_eq!(s.multiplier(0, 1), 1.0);
    }

    fn toy_data() -> LabeledDataset {
        crate::datasets::generate_glyphs(4, 4, 16, 3).unwrap()
    }

    fn toy_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 8,
            alpha_theta: 0.05,
            alpha_omega: 0.01,
            schedule: StepDecay::default(),
            inner: InnerLossConfig::default(),
            hypergrad: HypergradConfig::default(),
            shuffle: true,
            grad_clip: None,
        }
    }

    #[test]
    fn four_backward_passes_and_determinism() {
        let spec = presets::tiny([1, 16, 16], 4, 4);
        let data = toy_data();
        let cfg = toy_cfg();
        let run = |cfg: &TrainConfig| {
            let mut st = TrainerState::<f32>::new(&spec, 11, cfg.alpha_theta, cfg.alpha_omega).unwrap();
            let r = train(&mut st, &spec, &data, &default_pipelines(), cfg, &mut NoHooks).unwrap();
            (st, r)
        };
        let (a, ra) = run(&cfg);
        let (b, rb) = run(&cfg);
        assert_eq!(a, b);
        assert_eq!(ra, rb);
        assert_eq!(a.t, 4);
        assert!(ra.iter().all(|r| r.backward_passes == 4 && r.second_order_passes == 0));
        let mut rc = cfg.clone();
        rc.hypergrad.recompute_committed_grad = true;
        assert!(run(&rc).1.iter().all(|r| r.backward_passes == 5));
    }

    #[test]
    fn clipping_bounds_both_updates() {
        let spec = presets::tiny([1, 16, 16], 4, 4);
        let data = toy_data();
        let mut cfg = toy_cfg();
        cfg.grad_clip = Some(1e-3);
        let mut st = TrainerState::<f64>::new(&spec, 5, cfg.alpha_theta, cfg.alpha_omega).unwrap();
        let init = st.params.clone();
        let batch = batches(&data, 8, 5, 0, true).unwrap().next().unwrap();
        let r = train_step(&mut st, &spec, &batch, &default_pipelines(), &cfg).unwrap();
        assert!(r.grad_norm_theta > 1e-3 && r.grad_norm_omega > 1e-3);
        let moved = |parts: &[Partition]| {
            let a = init.flatten(parts);
            let b = st.params.flatten(parts);
            a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
        };
        assert!((moved(&Partition::MODEL) - cfg.alpha_theta * 1e-3).abs() < 1e-12);
        assert!((moved(&[Partition::Omega]) - cfg.alpha_omega * 1e-3).abs() < 1e-12);
        cfg.grad_clip = Some(0.0);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn frozen_omega_is_plain_sgd() {
        let spec = presets::tiny([1, 16, 16], 4, 4);
        let data = toy_data();
        let mut cfg = toy_cfg();
        cfg.alpha_omega = 0.0;
        cfg.inner.lambda = 0.0;
        let mut st = TrainerState::<f64>::new(&spec, 2, cfg.alpha_theta, 0.0).unwrap();
        let init = st.params.clone();
        let batch = batches(&data, 8, 2, 0, true).unwrap().next().unwrap();
        train_step(&mut st, &spec, &batch, &default_pipelines(), &cfg).unwrap();
        assert_eq!(st.params.select(&[Partition::Omega]), init.select(&[Partition::Omega]));
        let inner = InnerObjective {
            spec: &spec,
            images: &batch.images,
            labels: &batch.labels,
            eps: None,
            context: None,
            cfg: &cfg.inner,
        };
        let sgd = inner_step(&inner, &init, cfg.alpha_theta).unwrap();
        assert_eq!(st.params, sgd.next);
    }

    #[test]
    fn zero_epochs_keeps_initial_params() {
        let spec = presets::tiny([1, 16, 16], 4, 4);
        let mut cfg = toy_cfg();
        cfg.epochs = 0;
        let mut st = TrainerState::<f32>::new(&spec, 2, 0.1, 0.1).unwrap();
        let init = st.clone();
        let r = train(&mut st, &spec, &toy_data(), &default_pipelines(), &cfg, &mut NoHooks).unwrap();
        assert!(r.is_empty());
        assert_eq!(st, init);
    }
}
