//! Acceptance suite: one pass/fail line per criterion.
//!
//! Run all with `cargo test --release --test acceptance`, or a subset by
//! number: `cargo test --release --test acceptance -- 2 3 5`.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use sdg_core::bilevel::{self, hypergrad_audit, AuditProblem, NoHooks, TrainConfig, TrainerState};
use sdg_core::datasets::{batches, glyph_split};
use sdg_core::harness::checks::composed_suite;
use sdg_core::harness::plot::check_well_formed;
use sdg_core::harness::{run_variants, sweep, ExperimentConfig, SweepParam, Variant, VariantResult};
use sdg_core::model::{images_on, presets, Pooling};
use sdg_core::objectives::{self, random_directions, InnerLossConfig};
use sdg_core::rng;
use sdg_core::surrogate::default_pipelines;
use sdg_core::tensor::gradcheck::{primitive_suite, FdArithmetic, Objective};
use sdg_core::tensor::{ParamSet, ParamVars, Partition, Scalar, Tape, Tensor, Var};

/// Minimum lead of the full method's median shifted accuracy over ERM's. Fixed from
/// the baseline runs recorded in the decisions notes.
const MIN_MARGIN_OVER_ERM: f64 = 0.02;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn randomize(params: &mut ParamSet<f64>, partitions: &[Partition], scale: f64, seed: u64) {
    let mut r = rng::stream(seed);
    let names: Vec<String> = params
        .iter()
        .filter(|(_, p, _)| partitions.contains(p))
        .map(|(n, _, _)| n.to_string())
        .collect();
    for n in names {
        for v in params.get_mut(&n).unwrap().data_mut() {
            *v = scale * (2.0 * r.gen::<f64>() - 1.0);
        }
    }
}

fn criterion_1() -> Outcome {
    let (h, rtol) = (1e-6, 1e-5);
    let mut worst = (String::new(), 0.0f64);
    let mut checked = 0;
    let prims = primitive_suite(1, 100, h, FdArithmetic::DoubleDouble).unwrap();
    let losses = composed_suite(1, 100, h, FdArithmetic::DoubleDouble).unwrap();
    for (name, n, e) in prims
        .iter()
        .map(|c| (c.name, c.instances, c.max_rel_error))
        .chain(losses.iter().map(|c| (c.name, c.instances, c.max_rel_error)))
    {
        checked += 1;
        assert!(n >= 100);
        if e > worst.1 {
            worst = (name.to_string(), e);
        }
    }
    outcome(
        worst.1 <= rtol,
        format!("{checked} functions x 100 instances, worst {} rel err {:.2e}", worst.0, worst.1),
    )
}

struct Quadratic;

impl Objective for Quadratic {
    fn eval<'t, T: Scalar>(&self, _tape: &'t Tape<T>, v: &ParamVars<'t, T>) -> sdg_core::Result<Var<'t, T>> {
        let d = v.get("theta")?.sub(&v.get("omega")?)?;
        Ok(d.mul(&d)?.sum().scale(0.5))
    }
}

fn criterion_2() -> Outcome {
    let mut p = ParamSet::new();
    p.insert("theta", Partition::Theta, Tensor::from_f64(vec![1], &[2.0]).unwrap()).unwrap();
    p.insert("omega", Partition::Omega, Tensor::from_f64(vec![1], &[1.0]).unwrap()).unwrap();
    let delta = sdg_core::tensor::Gradients::from_fn([(
        "theta".to_string(),
        Partition::Theta,
        Tensor::from_f64(vec![1], &[3.0]).unwrap(),
    )]);
    let exact = bilevel::hypergrad_exact(&Quadratic, &p, &delta, 0.1, 100).unwrap().get("omega").unwrap().data()[0];
    let mut worst = (exact - 0.3).abs();
    for eps in [1e-1, 1e-2, 1e-3] {
        let fd = bilevel::hypergrad_fd(&Quadratic, &p, &delta, 0.1, eps, false).unwrap().get("omega").unwrap().data()[0];
        worst = worst.max((fd - 0.3).abs()).max((fd - exact).abs());
    }
    outcome(worst <= 1e-10, format!("exact {exact}, worst deviation from +0.3 {worst:.1e}"))
}

fn criterion_3() -> Outcome {
    let n_params = AuditProblem::random(0).unwrap().params.numel(&Partition::ALL);
    let t = hypergrad_audit(20, &[1e-1, 1e-2, 1e-3], 0.1, 7).unwrap();
    let med: Vec<f64> = (0..3).map(|k| t.median(k)).collect();
    let pass = n_params <= 200 && med[2] <= 1e-2 && med[0] >= med[1] && med[1] >= med[2];
    outcome(
        pass,
        format!(
            "20 models x {n_params} params, median rel err {:.2e} / {:.2e} / {:.2e} at eps 1e-1 / 1e-2 / 1e-3",
            med[0], med[1], med[2]
        ),
    )
}

fn criterion_4() -> Outcome {
    let alpha = 0.1;
    let mut worst_exact = 0.0f64;
    let mut worst_fd = 0.0f64;
    for seed in 0..5 {
        let p = AuditProblem::random(100 + seed).unwrap();
        let inner = p.inner();
        let step = bilevel::inner_step(&inner, &p.params, alpha).unwrap();
        let og = bilevel::outer_grads(&p.outer(), &step.next).unwrap();
        let e2e = bilevel::total_omega_grad_end_to_end(&inner, &p.outer(), &p.params, alpha, 10_000).unwrap();
        let rel = |chain: &sdg_core::tensor::Gradients<f64>| {
            og.direct.add_scaled(chain, 1.0).unwrap().add_scaled(&e2e, -1.0).unwrap().norm_l2() / e2e.norm_l2()
        };
        let exact = bilevel::hypergrad_exact(&inner, &p.params, &og.delta, alpha, 10_000).unwrap();
        let fd = bilevel::hypergrad_fd(&inner, &p.params, &og.delta, alpha, 1e-3, false).unwrap();
        worst_exact = worst_exact.max(rel(&exact));
        worst_fd = worst_fd.max(rel(&fd));
    }
    outcome(
        worst_exact <= 1e-3,
        format!("5 tiny models, worst rel err {worst_exact:.1e} (exact chain), {worst_fd:.1e} (fd chain, eps 1e-3)"),
    )
}

fn criterion_5() -> Outcome {
    let mut worst = 0.0f64;
    let mut r = rng::stream(55);
    for pooling in [Pooling::Mean, Pooling::MeanMax, Pooling::Attention] {
        let mut spec = presets::glyph_mlp([1, 16, 16], 10);
        spec.encoder.pooling = pooling;
        let mut params: ParamSet<f64> = spec.init_params(5).unwrap();
        randomize(&mut params, &[Partition::Omega], 0.3, 6);
        let n = 32;
        let d = spec.feature_dim();
        let z: Vec<f64> = (0..n * d).map(|_| r.gen::<f64>() * 3.0 - 1.0).collect();
        let prompt_of = |rows: &[usize]| {
            let tape = Tape::<f64>::new();
            let v = params.register(&tape);
            let data: Vec<f64> = rows.iter().flat_map(|&i| z[i * d..(i + 1) * d].iter().copied()).collect();
            let p = spec.encode_prompt(&v, &tape.constant(Tensor::new(vec![n, d], data).unwrap())).unwrap();
            let (g, b) = p.values();
            g.into_iter().chain(b).collect::<Vec<f64>>()
        };
        let mut order: Vec<usize> = (0..n).collect();
        let base = prompt_of(&order);
        for _ in 0..1000 {
            order.shuffle(&mut r);
            let p = prompt_of(&order);
            for (a, b) in base.iter().zip(&p) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    outcome(worst <= 1e-12, format!("3 poolings x 1000 permutations, max |diff| {worst:.1e}"))
}

fn criterion_6() -> Outcome {
    let mut notes = Vec::new();
    let mut pass = true;
    let mut r = rng::stream(66);
    let n = 64;

    let mut plain = presets::glyph_mlp([1, 16, 16], 10);
    plain.head.standardize = false;
    let params: ParamSet<f64> = plain.init_params(1).unwrap();
    let d = plain.feature_dim();
    let z: Vec<f64> = (0..n * d)
        .map(|i| {
            let j = (i % d) as f64;
            0.3 * j - 2.0 + (1.0 + 0.2 * j) * (r.gen::<f64>() - 0.5)
        })
        .collect();
    {
        let tape = Tape::<f64>::new();
        let v = params.register(&tape);
        let zv = tape.constant(Tensor::new(vec![n, d], z.clone()).unwrap());
        let p = plain.encode_prompt(&v, &zv).unwrap();
        let out = plain.modulate(&zv, &p).unwrap().value().to_f64_vec();
        let dev = out.iter().zip(&z).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        pass &= dev == 0.0;
        notes.push(format!("identity dev {dev:.1e}"));
    }

    let spec = presets::glyph_mlp([1, 16, 16], 10);
    let eps = spec.head.eps_std;
    let params: ParamSet<f64> = spec.init_params(1).unwrap();
    {
        let tape = Tape::<f64>::new();
        let v = params.register(&tape);
        let zv = tape.constant(Tensor::new(vec![n, d], z.clone()).unwrap());
        let p = spec.encode_prompt(&v, &zv).unwrap();
        let out = spec.modulate(&zv, &p).unwrap().value().to_f64_vec();
        let (mut worst_mean, mut worst_std) = (0.0f64, 0.0f64);
        for j in 0..d {
            let col = |src: &[f64]| (0..n).map(|i| src[i * d + j]).collect::<Vec<f64>>();
            let moments = |c: &[f64]| {
                let m = c.iter().sum::<f64>() / n as f64;
                (m, (c.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n as f64).sqrt())
            };
            let (_, sigma) = moments(&col(&z));
            let (m, s) = moments(&col(&out));
            worst_mean = worst_mean.max(m.abs());
            worst_std = worst_std.max((s - sigma / (sigma + eps)).abs());
        }
        pass &= worst_mean <= 1e-6 && worst_std <= 1e-6;
        notes.push(format!("|mean| {worst_mean:.1e}, std dev {worst_std:.1e}"));
    }
    {
        let mut params = params.clone();
        randomize(&mut params, &[Partition::Omega], 0.3, 7);
        let tape = Tape::<f64>::new();
        let v = params.register(&tape);
        let zv = tape.constant(Tensor::new(vec![1, d], z[..d].to_vec()).unwrap());
        let p = spec.encode_prompt(&v, &zv).unwrap();
        let out = spec.modulate(&zv, &p).unwrap().value().to_f64_vec();
        let (_, beta) = p.values();
        let dev = out.iter().zip(&beta).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        pass &= dev <= 1e-12;
        notes.push(format!("N=1 vs beta {dev:.1e}"));
    }
    outcome(pass, notes.join(", "))
}

fn criterion_7() -> Outcome {
    let (train_ds, test) = glyph_split(50, 64, 10, 16, 77).unwrap();
    let spec = presets::glyph_mlp([1, 16, 16], 10);
    let mut cfg = ExperimentConfig::glyph_default("unused").train;
    cfg.epochs = 3;
    let mut st = TrainerState::<f32>::new(&spec, 7, cfg.alpha_theta, cfg.alpha_omega).unwrap();
    bilevel::train(&mut st, &spec, &train_ds, &default_pipelines(), &cfg, &mut NoHooks).unwrap();
    let params: ParamSet<f64> = st.params.cast();
    let inner = InnerLossConfig::default();
    let rho = inner.rho;

    let kl_at = |x: &Tensor<f32>, eps: &Tensor<f64>| {
        let tape = Tape::<f64>::new();
        let v = params.register(&tape);
        let kl = objectives::inner_adv(&spec, &v, &images_on(&tape, x), eps, &inner, None).unwrap();
        let out = kl.value().item().unwrap();
        out
    };
    let (mut worst_norm, mut min_kl, mut wins, mut total) = (0.0f64, f64::INFINITY, 0, 0);
    for (bi, b) in batches(&test, 32, 0, 0, false).unwrap().enumerate() {
        let p = objectives::adversarial_direction(&spec, &params, &b.images, &inner, rng::derive(70, bi as u64)).unwrap();
        let row = b.images.numel() / b.labels.len();
        let as_f32: Vec<f64> = p.eps.data().iter().map(|&v| v as f32 as f64).collect();
        for src in [p.eps.data(), as_f32.as_slice()] {
            for r in src.chunks(row) {
                let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
                worst_norm = worst_norm.max((n - rho).abs());
            }
        }
        let best = kl_at(&b.images, &p.eps);
        min_kl = min_kl.min(best);
        let mut beaten = true;
        for k in 0..50 {
            let d: Vec<f64> = random_directions(b.images.shape(), rng::derive_path(71, &[bi as u64, k]))
                .into_iter()
                .map(|v| v * rho)
                .collect();
            let kl = kl_at(&b.images, &Tensor::new(b.images.shape().to_vec(), d).unwrap());
            min_kl = min_kl.min(kl);
            beaten &= best > kl;
        }
        wins += beaten as usize;
        total += 1;
    }
    let frac = wins as f64 / total as f64;
    outcome(
        worst_norm <= 1e-6 && min_kl >= 0.0 && frac >= 0.9,
        format!(
            "max | ||eps|| - rho | {worst_norm:.1e}, min inner_adv {min_kl:.2e}, eps* beats all 50 random on {wins}/{total} batches"
        ),
    )
}

fn small_config(out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::glyph_default(out);
    cfg.data = sdg_core::harness::DataConfig::Glyphs {
        train_per_class: 20,
        test_per_class: 10,
        num_classes: 10,
        resolution: 16,
        seed: 3,
    };
    cfg.train.epochs = 2;
    cfg.seeds = vec![7];
    cfg
}

fn criterion_8() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("c.json");
    std::fs::write(&cfg_path, small_config(&dir.path().join("unused")).to_json().unwrap()).unwrap();
    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let status = Command::new(env!("CARGO_BIN_EXE_sdg"))
            .args(["train", "--config", cfg_path.to_str().unwrap(), "--seed", "7", "--output"])
            .arg(&out)
            .output()
            .unwrap();
        if !status.status.success() {
            return outcome(false, format!("sdg train failed: {}", String::from_utf8_lossy(&status.stderr)));
        }
        let read = |f: &str| std::fs::read(out.join("seed_7").join(f)).unwrap();
        outputs.push((read("metrics.csv"), read("final.ckpt")));
    }
    let identical = outputs[0] == outputs[1];

    let (train_ds, _) = glyph_split(20, 10, 10, 16, 3).unwrap();
    let spec = presets::glyph_mlp([1, 16, 16], 10);
    let cfg: TrainConfig = small_config(Path::new("unused")).train;
    let mut st = TrainerState::<f32>::new(&spec, 7, cfg.alpha_theta, cfg.alpha_omega).unwrap();
    let reports = bilevel::train(&mut st, &spec, &train_ds, &default_pipelines(), &cfg, &mut NoHooks).unwrap();
    let counts: Vec<u64> = reports.iter().map(|r| r.backward_passes).collect();
    let second: u64 = reports.iter().map(|r| r.second_order_passes).sum();
    let four = counts.iter().all(|&c| c == 4);
    outcome(
        identical && four && second == 0,
        format!(
            "CSV+checkpoint identical: {identical}; {} steps all with 4 backward passes: {four}; second-order passes: {second}",
            counts.len()
        ),
    )
}

fn variant_median(res: &[VariantResult], v: Variant) -> f64 {
    res.iter().find(|r| r.variant == v).unwrap().aggregate.median_shifted
}

fn run_benchmark() -> Vec<VariantResult> {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::glyph_default(dir.path());
    let t0 = Instant::now();
    let res = run_variants(
        &cfg,
        &[Variant::Full, Variant::Erm, Variant::NoAdv, Variant::NoStd],
        dir.path(),
    )
    .unwrap();
    for r in &res {
        let per_seed: Vec<String> = r.runs.iter().map(|s| format!("{:.4}", s.mean_shifted)).collect();
        println!("  {:<7} per-seed mean shifted accuracy [{}]", r.variant.tag(), per_seed.join(", "));
    }
    println!("  benchmark: 4 variants x 5 seeds in {:.0} s", t0.elapsed().as_secs_f64());
    res
}

fn criterion_9(res: &[VariantResult]) -> Outcome {
    let full = variant_median(res, Variant::Full);
    let erm = variant_median(res, Variant::Erm);
    outcome(
        full - erm > MIN_MARGIN_OVER_ERM,
        format!("median shifted accuracy full {full:.4} vs ERM {erm:.4} (required margin {MIN_MARGIN_OVER_ERM})"),
    )
}

fn criterion_10(res: &[VariantResult]) -> Outcome {
    let full = variant_median(res, Variant::Full);
    let no_adv = variant_median(res, Variant::NoAdv);
    let no_std = variant_median(res, Variant::NoStd);
    outcome(
        full >= no_adv && full >= no_std,
        format!("median shifted accuracy full {full:.4}, no_adv {no_adv:.4}, no_std {no_std:.4}"),
    )
}

fn criterion_11() -> Outcome {
    let axes: [(SweepParam, &[f64]); 4] = [
        (SweepParam::K, &[1.0, 3.0, 5.0, 7.0, 9.0]),
        (SweepParam::Lambda, &[0.0, 0.25, 0.5, 1.0, 2.0]),
        (SweepParam::EpsilonTheta, &[1e-3, 1e-2, 1e-1]),
        (SweepParam::M, &[1.0, 2.0, 3.0, 4.0, 5.0]),
    ];
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path());
    cfg.train.epochs = 1;
    let mut notes = Vec::new();
    let mut pass = true;
    for (param, values) in axes {
        let mut svgs = Vec::new();
        for run in ["a", "b"] {
            let root = dir.path().join(run);
            let rows = sweep(&cfg, param, values, &root).unwrap();
            pass &= rows.len() == values.len();
            let svg = std::fs::read_to_string(root.join(format!("sweep_{}.svg", param.name()))).unwrap();
            let csv = std::fs::read(root.join(format!("sweep_{}.csv", param.name()))).unwrap();
            pass &= check_well_formed(&svg).is_ok();
            svgs.push((svg, csv));
        }
        let same = svgs[0] == svgs[1];
        pass &= same;
        notes.push(format!("{}: {} runs, deterministic {same}", param.name(), values.len()));
    }
    outcome(pass, notes.join("; "))
}

fn main() {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let want = |n: usize| wanted.is_empty() || wanted.contains(&n);
    let mut failed = Vec::new();
    let mut report = |n: usize, name: &str, o: Outcome, t: Instant| {
        println!(
            "criterion {n:>2} {name:<34} {} ({:.1} s) {}",
            if o.pass { "PASS" } else { "FAIL" },
            t.elapsed().as_secs_f64(),
            o.detail
        );
        if !o.pass {
            failed.push(n);
        }
    };
    let simple: [(usize, &str, fn() -> Outcome); 8] = [
        (1, "autodiff oracle", criterion_1),
        (2, "quadratic bi-level exactness", criterion_2),
        (3, "fd vs exact convergence", criterion_3),
        (4, "total-gradient identity", criterion_4),
        (5, "prompt permutation invariance", criterion_5),
        (6, "FiLM / standardization", criterion_6),
        (7, "adversarial perturbation", criterion_7),
        (8, "determinism and backward count", criterion_8),
    ];
    for (n, name, f) in simple {
        if want(n) {
            let t = Instant::now();
            report(n, name, f(), t);
        }
    }
    if want(9) || want(10) {
        let t = Instant::now();
        let res = run_benchmark();
        if want(9) {
            report(9, "full method beats ERM on shifted domains", criterion_9(&res), t);
        }
        if want(10) {
            report(10, "ablation trend", criterion_10(&res), t);
        }
    }
    if want(11) {
        let t = Instant::now();
        report(11, "sensitivity sweeps", criterion_11(), t);
    }
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
