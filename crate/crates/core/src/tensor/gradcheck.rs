//! Central-difference oracle for the reverse-mode engine.
//!
//! Objectives implement [`Objective`] so the same code can be evaluated in
//! `f64` (the analytic gradient under test) and in [`DoubleDouble`] (the
//! difference quotient). Evaluating `f(x + h) - f(x - h)` in `f64` leaves
//! roughly `1e-16 * |f| / h` of rounding noise in the quotient, which swamps
//! a relative tolerance on coordinates whose true derivative is small.

use rand::Rng;
use rand_distr::StandardNormal;

use super::{DoubleDouble, Gradients, ParamSet, ParamVars, Partition, Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Floor added to the denominator of the relative error.
pub const REL_FLOOR: f64 = 1e-12;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (numeric.abs() + REL_FLOOR)
}

/// Scalar-valued function of a parameter set, evaluable at any precision.
pub trait Objective {
    fn eval<'t, T: Scalar>(&self, tape: &'t Tape<T>, vars: &ParamVars<'t, T>) -> Result<Var<'t, T>>;
}

/// Arithmetic used for the perturbed evaluations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FdArithmetic {
    /// Plain `f64`, as a conventional gradient check would do.
    F64,
    #[default]
    DoubleDouble,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Max over coordinates of `|analytic - numeric| / (|numeric| + 1e-12)`.
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coords: usize,
    pub analytic: Gradients<f64>,
    pub numeric: Gradients<f64>,
}

fn evaluate<T: Scalar, O: Objective + ?Sized>(params: &ParamSet<T>, f: &O) -> Result<T> {
    let tape = Tape::new();
    let vars = params.register(&tape);
    let out = f.eval(&tape, &vars)?;
    let v = out.value().item()?;
    if !v.is_finite() {
        return Err(Error::Domain(format!("objective is not finite ({})", v.primal())));
    }
    Ok(v)
}

fn numeric_partial<T: Scalar, O: Objective + ?Sized>(
    probe: &mut ParamSet<T>,
    name: &str,
    i: usize,
    h: f64,
    f: &O,
) -> Result<f64> {
    let base = probe.get(name).expect("known parameter").data()[i];
    probe.get_mut(name).unwrap().data_mut()[i] = base + T::from_f64(h);
    let up = evaluate(probe, f)?;
    probe.get_mut(name).unwrap().data_mut()[i] = base - T::from_f64(h);
    let down = evaluate(probe, f)?;
    probe.get_mut(name).unwrap().data_mut()[i] = base;
    Ok((up - down).primal() / (2.0 * h))
}

/// Compares the tape gradient of `f` against symmetric differences with step `h`
/// over every coordinate of the parameters in `wrt`. Differences use
/// [`FdArithmetic::DoubleDouble`].
pub fn finite_diff_check<O: Objective + ?Sized>(
    params: &ParamSet<f64>,
    wrt: &[Partition],
    h: f64,
    f: &O,
) -> Result<GradCheckReport> {
    finite_diff_check_with(params, wrt, h, f, FdArithmetic::DoubleDouble)
}

pub fn finite_diff_check_with<O: Objective + ?Sized>(
    params: &ParamSet<f64>,
    wrt: &[Partition],
    h: f64,
    f: &O,
    arithmetic: FdArithmetic,
) -> Result<GradCheckReport> {
    if !(h > 0.0) {
        return Err(Error::contract(format!("finite-difference step must be positive, got {h}")));
    }
    let analytic = {
        let tape = Tape::new();
        let vars = params.register(&tape);
        let out = f.eval(&tape, &vars)?;
        if !out.value().item()?.is_finite() {
            return Err(Error::Domain("objective is not finite".into()));
        }
        tape.backward(out, wrt)?
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coords: 0,
        analytic: analytic.clone(),
        numeric: Gradients::default(),
    };
    let mut probe64 = params.clone();
    let mut probe_dd: ParamSet<DoubleDouble> = params.cast();
    for (name, partition, g) in analytic.iter() {
        let mut numeric = Vec::with_capacity(g.numel());
        for i in 0..g.numel() {
            let n = match arithmetic {
                FdArithmetic::F64 => numeric_partial(&mut probe64, name, i, h, f)?,
                FdArithmetic::DoubleDouble => numeric_partial(&mut probe_dd, name, i, h, f)?,
            };
            let err = relative_error(g.data()[i], n);
            report.coords += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((name.to_string(), i));
            }
            numeric.push(n);
        }
        report
            .numeric
            .insert(name, partition, Tensor::new(g.shape().to_vec(), numeric)?);
    }
    Ok(report)
}

/// Result of checking one primitive over many random instances.
#[derive(Debug, Clone)]
pub struct PrimitiveCheck {
    pub name: &'static str,
    pub instances: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, Copy)]
enum Prim {
    MatMul,
    Add,
    AddBroadcast,
    SubBroadcast,
    MulBroadcast,
    DivBroadcast,
    ScaleAddScalar,
    Exp,
    Log,
    Relu,
    Tanh,
    Sqrt,
    Conv2d,
    MaxPool2d,
    Dense,
    Concat,
    MeanAxis0,
    VarAxis0,
    MaxAxis0,
    Norm,
    Softmax,
    LogSoftmax,
    ReshapeFlatten,
    SumMean,
}

const PRIMS: [(Prim, &str); 24] = [
    (Prim::MatMul, "matmul"),
    (Prim::Add, "add"),
    (Prim::AddBroadcast, "add_broadcast"),
    (Prim::SubBroadcast, "sub_broadcast"),
    (Prim::MulBroadcast, "mul_broadcast"),
    (Prim::DivBroadcast, "div_broadcast"),
    (Prim::ScaleAddScalar, "scale_add_scalar"),
    (Prim::Exp, "exp"),
    (Prim::Log, "log"),
    (Prim::Relu, "relu"),
    (Prim::Tanh, "tanh"),
    (Prim::Sqrt, "sqrt"),
    (Prim::Conv2d, "conv2d"),
    (Prim::MaxPool2d, "maxpool2d"),
    (Prim::Dense, "dense"),
    (Prim::Concat, "concat"),
    (Prim::MeanAxis0, "mean_axis0"),
    (Prim::VarAxis0, "var_axis0"),
    (Prim::MaxAxis0, "max_axis0"),
    (Prim::Norm, "norm"),
    (Prim::Softmax, "softmax"),
    (Prim::LogSoftmax, "log_softmax"),
    (Prim::ReshapeFlatten, "reshape_flatten"),
    (Prim::SumMean, "sum_mean"),
];

impl Prim {
    /// Parameter shapes from four random dims in `1..=4`.
    fn shapes(self, d: &[usize]) -> Vec<Vec<usize>> {
        use Prim::*;
        match self {
            MatMul => vec![vec![d[0], d[1]], vec![d[1], d[2]]],
            Add => vec![vec![d[0], d[1]], vec![d[0], d[1]]],
            AddBroadcast | SubBroadcast | MulBroadcast | DivBroadcast => {
                vec![vec![d[0], d[1]], vec![d[1]]]
            }
            Conv2d => {
                let cin = d[1].min(2);
                let cout = d[1] % 2 + 1;
                vec![vec![d[0].min(2), cin, d[2] + 1, d[3] + 1], vec![cout, cin, 3, 3], vec![cout]]
            }
            MaxPool2d => vec![vec![d[0].min(2), d[1].min(2), 2 * d[2], 2 * d[3]]],
            Dense => vec![vec![d[0], d[1]], vec![d[1], d[2]], vec![d[2]]],
            Concat => vec![vec![d[0], d[1]], vec![d[0], d[2]]],
            VarAxis0 => vec![vec![d[0] + 1, d[1]]],
            Softmax | LogSoftmax => vec![vec![d[0], d[1] + 1]],
            ReshapeFlatten => vec![vec![d[0], d[1], d[2]]],
            _ => vec![vec![d[0], d[1]]],
        }
    }

    /// Maps a raw N(0,1) draw into the primitive's domain.
    fn domain(self, x: f64) -> f64 {
        match self {
            Prim::Log | Prim::Sqrt => x.abs() + 0.5,
            Prim::DivBroadcast | Prim::Relu => x.signum() * (x.abs() + 0.1),
            _ => x,
        }
    }

    fn build<'t, T: Scalar>(self, v: &ParamVars<'t, T>) -> Result<Var<'t, T>> {
        use Prim::*;
        let p = |i: usize| v.get(&format!("p{i}"));
        match self {
            MatMul => p(0)?.matmul(&p(1)?),
            Add | AddBroadcast => p(0)?.add(&p(1)?),
            SubBroadcast => p(0)?.sub(&p(1)?),
            MulBroadcast => p(0)?.mul(&p(1)?),
            DivBroadcast => p(0)?.div(&p(1)?),
            ScaleAddScalar => Ok(p(0)?.scale(-1.7).add_scalar(0.3)),
            Exp => Ok(p(0)?.exp()),
            Log => p(0)?.log(),
            Relu => Ok(p(0)?.relu()),
            Tanh => Ok(p(0)?.tanh()),
            Sqrt => p(0)?.sqrt(),
            Conv2d => p(0)?.conv2d(&p(1)?, &p(2)?),
            MaxPool2d => p(0)?.maxpool2d(),
            Dense => p(0)?.dense(&p(1)?, &p(2)?),
            Concat => Var::concat(&[p(0)?, p(1)?]),
            MeanAxis0 => p(0)?.mean_axis0(),
            VarAxis0 => p(0)?.var_axis0(),
            MaxAxis0 => p(0)?.max_axis0(),
            Norm => Ok(p(0)?.norm()),
            Softmax => p(0)?.softmax(),
            LogSoftmax => p(0)?.log_softmax(),
            ReshapeFlatten => p(0)?.flatten(),
            SumMean => {
                let x = p(0)?;
                x.sum().add(&x.mean().scale(3.0))
            }
        }
    }
}

/// `sum(r * op(params))` with fixed random weights `r`, so every output
/// coordinate contributes.
struct Probe {
    prim: Prim,
    weights_seed: u64,
}

impl Objective for Probe {
    fn eval<'t, T: Scalar>(&self, tape: &'t Tape<T>, vars: &ParamVars<'t, T>) -> Result<Var<'t, T>> {
        let y = self.prim.build(vars)?;
        let shape = y.shape();
        let n: usize = shape.iter().product();
        let mut wr = crate::rng::stream(self.weights_seed);
        let r: Vec<f64> = (0..n).map(|_| wr.sample::<f64, _>(StandardNormal)).collect();
        let r = tape.constant(Tensor::from_f64(shape, &r)?);
        Ok(y.mul(&r)?.sum())
    }
}

/// Checks every primitive on `instances` random shapes/values.
pub fn primitive_suite(
    seed: u64,
    instances: usize,
    h: f64,
    arithmetic: FdArithmetic,
) -> Result<Vec<PrimitiveCheck>> {
    let mut out = Vec::new();
    for (ci, &(prim, name)) in PRIMS.iter().enumerate() {
        let mut worst = 0.0f64;
        for inst in 0..instances {
            let mut rng = crate::rng::stream(crate::rng::derive_path(seed, &[ci as u64, inst as u64]));
            let dims: Vec<usize> = (0..4).map(|_| rng.gen_range(1..=4)).collect();
            let mut params = ParamSet::new();
            for (k, shape) in prim.shapes(&dims).into_iter().enumerate() {
                let n: usize = shape.iter().product();
                let data: Vec<f64> = (0..n)
                    .map(|_| prim.domain(rng.sample::<f64, _>(StandardNormal)))
                    .collect();
                params.insert(format!("p{k}"), Partition::Theta, Tensor::new(shape, data)?)?;
            }
            let probe = Probe {
                prim,
                weights_seed: rng.gen(),
            };
            let report = finite_diff_check_with(&params, &[Partition::Theta], h, &probe, arithmetic)?;
            worst = worst.max(report.max_rel_error);
        }
        out.push(PrimitiveCheck {
            name,
            instances,
            max_rel_error: worst,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(v: f64) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.insert("w", Partition::Theta, Tensor::from_f64(vec![1], &[v]).unwrap())
            .unwrap();
        p
    }

    struct Square;
    impl Objective for Square {
        fn eval<'t, T: Scalar>(&self, _: &'t Tape<T>, v: &ParamVars<'t, T>) -> Result<Var<'t, T>> {
            let w = v.get("w")?;
            Ok(w.mul(&w)?.sum())
        }
    }

    struct Constant;
    impl Objective for Constant {
        fn eval<'t, T: Scalar>(&self, t: &'t Tape<T>, _: &ParamVars<'t, T>) -> Result<Var<'t, T>> {
            Ok(t.constant(Tensor::scalar(T::from_f64(4.0))).sum())
        }
    }

    struct SelfRatio;
    impl Objective for SelfRatio {
        fn eval<'t, T: Scalar>(&self, _: &'t Tape<T>, v: &ParamVars<'t, T>) -> Result<Var<'t, T>> {
            let w = v.get("w")?;
            Ok(w.div(&w)?.sum())
        }
    }

    #[test]
    fn quadratic_is_exact_up_to_roundoff() {
        for arith in [FdArithmetic::F64, FdArithmetic::DoubleDouble] {
            let r = finite_diff_check_with(&single(3.0), &[Partition::Theta], 1e-6, &Square, arith).unwrap();
            assert!(r.max_rel_error <= 1e-9, "{arith:?}: {}", r.max_rel_error);
        }
    }

    #[test]
    fn constant_objective_has_zero_error() {
        let r = finite_diff_check(&single(3.0), &[Partition::Theta], 1e-6, &Constant).unwrap();
        assert_eq!(r.max_rel_error, 0.0);
        assert_eq!(r.analytic.get("w").unwrap().data(), &[0.0]);
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        assert!(finite_diff_check(&single(0.0), &[Partition::Theta], 1e-6, &SelfRatio).is_err());
    }

    #[test]
    fn non_positive_step_is_rejected() {
        assert!(finite_diff_check(&single(1.0), &[Partition::Theta], 0.0, &Square).is_err());
    }

    #[test]
    fn primitive_suite_smoke() {
        let checks = primitive_suite(1, 5, 1e-6, FdArithmetic::DoubleDouble).unwrap();
        assert_eq!(checks.len(), PRIMS.len());
        for c in &checks {
            assert!(c.max_rel_error <= 1e-5, "{}: {}", c.name, c.max_rel_error);
        }
    }
}
