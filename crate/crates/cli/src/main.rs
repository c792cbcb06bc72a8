use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sdg_core::bilevel::hypergrad_audit;
use sdg_core::datasets::{glyph_split, materialize, save_dataset};
use sdg_core::harness::checks::composed_suite;
use sdg_core::harness::{
    emit_plot, evaluate_checkpoint, run_experiment, run_variants, sweep, DomainAccuracy, ExperimentConfig,
    PromptMode, SweepParam, Variant,
};
use sdg_core::surrogate::default_pipelines;
use sdg_core::tensor::gradcheck::{primitive_suite, FdArithmetic};
use sdg_core::{Error, Result};

#[derive(Parser)]
#[command(name = "sdg", version, about = "Bi-level single-source domain generalization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a glyph train/test split (and optionally its surrogate domains).
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        train_per_class: usize,
        #[arg(long, default_value_t = 100)]
        test_per_class: usize,
        #[arg(long, default_value_t = 10)]
        classes: usize,
        #[arg(long, default_value_t = 16)]
        resolution: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also materialize the default surrogate domains of the train split.
        #[arg(long)]
        surrogates: bool,
    },
    /// Print the default glyph experiment config.
    DefaultConfig {
        #[arg(long, default_value = "runs/glyphs")]
        output_dir: PathBuf,
    },
    /// Train every configured seed (or just --seed).
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Per-domain accuracy of a checkpoint.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_parser = parse_prompt_mode)]
        prompt_mode: Option<PromptMode>,
        #[arg(long)]
        batch_size: Option<usize>,
    },
    /// Autodiff oracle: primitives and composed losses against central differences.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-6)]
        h: f64,
        #[arg(long, default_value_t = 1e-5)]
        rtol: f64,
        /// Evaluate the difference quotient in plain f64 instead of double-double.
        #[arg(long)]
        plain_f64: bool,
    },
    /// Finite-difference vs exact hypergradient on random tiny models.
    HypergradAudit {
        #[arg(long, default_value_t = 20)]
        models: usize,
        #[arg(long, value_delimiter = ',', default_value = "0.1,0.01,0.001")]
        eps: Vec<f64>,
        #[arg(long, default_value_t = 0.1)]
        alpha: f64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Full method against its ablations on every seed.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "full,no_adv,no_std")]
        variants: Vec<String>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Vary one setting (K, lambda, epsilon_theta, m, eval_batch).
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        param: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Metrics CSV to an SVG line chart.
    Plot {
        #[arg(long)]
        csv: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "inner_cl,inner_adv,outer_loss")]
        columns: Vec<String>,
    },
}

fn parse_prompt_mode(s: &str) -> std::result::Result<PromptMode, String> {
    match s {
        "test-batch" => Ok(PromptMode::TestBatch),
        "source-calibrated" => Ok(PromptMode::SourceCalibrated),
        _ => Err(format!("expected test-batch or source-calibrated, got {s}")),
    }
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn print_accuracy(acc: &[DomainAccuracy]) {
    for a in acc {
        println!("{:<28} {:.4}", a.domain, a.accuracy);
    }
}

fn output_root(cfg: &ExperimentConfig, output: Option<PathBuf>) -> PathBuf {
    output.unwrap_or_else(|| cfg.output_dir.clone())
}

fn gen_data(out: &Path, per_train: usize, per_test: usize, classes: usize, res: usize, seed: u64, surrogates: bool) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    let (train, test) = glyph_split(per_train, per_test, classes, res, seed)?;
    save_dataset(&train, &out.join("train.bsdg"))?;
    save_dataset(&test, &out.join("test.bsdg"))?;
    println!("wrote {} train and {} test samples to {}", train.len(), test.len(), out.display());
    if surrogates {
        let files = materialize(&train, &default_pipelines(), seed, &out.join("surrogates"))?;
        println!("wrote {} surrogate domains", files.len());
    }
    Ok(())
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData {
            out,
            train_per_class,
            test_per_class,
            classes,
            resolution,
            seed,
            surrogates,
        } => gen_data(&out, train_per_class, test_per_class, classes, resolution, seed, surrogates),
        Command::DefaultConfig { output_dir } => {
            println!("{}", ExperimentConfig::glyph_default(output_dir).to_json()?);
            Ok(())
        }
        Command::Train { config, seed, output } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seeds = vec![s];
            }
            let root = output_root(&cfg, output);
            let (runs, agg) = run_experiment(&cfg, &root)?;
            for r in &runs {
                println!("seed {}: mean shifted accuracy {:.4} ({} steps)", r.seed, r.mean_shifted, r.steps);
            }
            print_json(&agg)
        }
        Command::Eval {
            config,
            checkpoint,
            prompt_mode,
            batch_size,
        } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(m) = prompt_mode {
                cfg.eval.prompt_mode = m;
            }
            if let Some(b) = batch_size {
                cfg.eval.batch_size = b;
            }
            let acc = evaluate_checkpoint(&cfg, &checkpoint)?;
            print_accuracy(&acc);
            Ok(())
        }
        Command::Gradcheck {
            instances,
            seed,
            h,
            rtol,
            plain_f64,
        } => {
            let arithmetic = if plain_f64 {
                FdArithmetic::F64
            } else {
                FdArithmetic::DoubleDouble
            };
            let mut failed = Vec::new();
            let mut line = |name: &str, n: usize, err: f64| {
                let ok = err <= rtol;
                println!("{name:<22} {n:>5} {err:>12.3e} {}", if ok { "ok" } else { "FAIL" });
                if !ok {
                    failed.push(name.to_string());
                }
            };
            for c in primitive_suite(seed, instances, h, arithmetic)? {
                line(c.name, c.instances, c.max_rel_error);
            }
            for c in composed_suite(seed, instances, h, arithmetic)? {
                line(c.name, c.instances, c.max_rel_error);
            }
            if failed.is_empty() {
                Ok(())
            } else {
                Err(Error::Audit(format!("gradient check failed for {}", failed.join(", "))))
            }
        }
        Command::HypergradAudit { models, eps, alpha, seed } => {
            let t = hypergrad_audit(models, &eps, alpha, seed)?;
            println!("{:>10} {:>14}", "eps_theta", "median_rel_err");
            for (k, e) in t.epsilons.iter().enumerate() {
                println!("{e:>10.0e} {:>14.3e}", t.median(k));
            }
            Ok(())
        }
        Command::Ablate {
            config,
            variants,
            output,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let variants = variants.iter().map(|v| Variant::parse(v)).collect::<Result<Vec<_>>>()?;
            let root = output_root(&cfg, output).join("ablate");
            let res = run_variants(&cfg, &variants, &root)?;
            println!("{:<8} {:>8} {:>8} {:>8}", "variant", "median", "mean", "std");
            for r in &res {
                println!(
                    "{:<8} {:>8.4} {:>8.4} {:>8.4}",
                    r.variant.tag(),
                    r.aggregate.median_shifted,
                    r.aggregate.mean["mean_shifted"],
                    r.aggregate.std["mean_shifted"]
                );
            }
            Ok(())
        }
        Command::Sweep {
            config,
            param,
            values,
            output,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let param = SweepParam::parse(&param)?;
            let root = output_root(&cfg, output).join("sweep");
            let rows = sweep(&cfg, param, &values, &root)?;
            println!("{:>10} {:>8} {:>8}", param.name(), "mean", "std");
            for r in &rows {
                println!(
                    "{:>10} {:>8.4} {:>8.4}",
                    r.value, r.aggregate.mean["mean_shifted"], r.aggregate.std["mean_shifted"]
                );
            }
            println!("wrote {}", root.join(format!("sweep_{}.svg", param.name())).display());
            Ok(())
        }
        Command::Plot { csv, out, columns } => emit_plot(&csv, &out, &columns),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
