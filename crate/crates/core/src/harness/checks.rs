//! Central-difference checks of the composed training losses on random tiny
//! models. Prompt inputs are held at their base-point values, the
//! constant-copy meaning of the stop-gradient.

use serde::Serialize;

use crate::bilevel::AuditProblem;
use crate::error::Result;
use crate::model::images_on;
use crate::objectives::{self, features_of};
use crate::rng;
use crate::tensor::gradcheck::{finite_diff_check_with, FdArithmetic, Objective};
use crate::tensor::{ParamVars, Partition, Scalar, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Loss {
    InnerCl,
    InnerAdv,
    InnerTotal,
    Outer,
}

const LOSSES: [(Loss, &str); 4] = [
    (Loss::InnerCl, "inner_cl"),
    (Loss::InnerAdv, "inner_adv"),
    (Loss::InnerTotal, "inner_total"),
    (Loss::Outer, "outer_loss"),
];

struct Composed<'a> {
    loss: Loss,
    p: &'a AuditProblem,
    outer_contexts: &'a [Tensor<f64>],
}

impl Objective for Composed<'_> {
    fn eval<'t, T: Scalar>(&self, tape: &'t Tape<T>, v: &ParamVars<'t, T>) -> Result<Var<'t, T>> {
        let p = self.p;
        let x = images_on(tape, &p.images);
        let ctx = Some(&p.context);
        match self.loss {
            Loss::InnerCl => objectives::inner_cl(&p.spec, v, &x, &p.labels, ctx),
            Loss::InnerAdv => objectives::inner_adv(&p.spec, v, &x, &p.eps, &p.inner_cfg, ctx),
            Loss::InnerTotal => Ok(objectives::inner_total(&p.spec, v, &x, &p.labels, Some(&p.eps), &p.inner_cfg, ctx)?.total),
            Loss::Outer => {
                let xs: Vec<_> = p.surrogates.iter().map(|s| images_on(tape, s)).collect();
                objectives::outer_loss(&p.spec, v, &xs, &p.labels, Some(self.outer_contexts))
            }
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LossCheck {
    pub name: &'static str,
    pub instances: usize,
    pub max_rel_error: f64,
}

/// Worst relative error per loss over `instances` random problems, all
/// parameters (θ, φ, ω) perturbed.
pub fn composed_suite(seed: u64, instances: usize, h: f64, arithmetic: FdArithmetic) -> Result<Vec<LossCheck>> {
    let mut worst = [0.0f64; LOSSES.len()];
    for i in 0..instances {
        let p = AuditProblem::random(rng::derive(seed, i as u64))?;
        let contexts = p
            .surrogates
            .iter()
            .map(|s| features_of(&p.spec, &p.params, s))
            .collect::<Result<Vec<_>>>()?;
        for (k, &(loss, _)) in LOSSES.iter().enumerate() {
            let obj = Composed {
                loss,
                p: &p,
                outer_contexts: &contexts,
            };
            let r = finite_diff_check_with(&p.params, &Partition::ALL, h, &obj, arithmetic)?;
            worst[k] = worst[k].max(r.max_rel_error);
        }
    }
    Ok(LOSSES
        .iter()
        .zip(worst)
        .map(|(&(_, name), max_rel_error)| LossCheck {
            name,
            instances,
            max_rel_error,
        })
        .collect())
}
