//! Training runs, multi-seed aggregation, ablation variants and sweeps.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::eval::{evaluate, mean_shifted, DomainAccuracy, SOURCE_DOMAIN};
use super::metrics::{mean_std, median, MetricsRecord, MetricsWriter};
use super::plot::{emit_plot, line_chart, write_svg, Series};
use crate::bilevel::{train, StepReport, TrainHooks, TrainerState};
use crate::datasets::{make_eval_domains, EvalDomainSuite, LabeledDataset};
use crate::error::{Error, Result};
use crate::model::checkpoint::Checkpoint;
use crate::model::ModelSpec;
use crate::surrogate::TransformPipeline;
use crate::tensor::Tensor;

/// Everything a run needs besides its seed.
pub struct Prepared {
    pub spec: ModelSpec,
    pub train: LabeledDataset,
    /// Clean source test split first, then the held-out shifts.
    pub suite: EvalDomainSuite,
    pub pipelines: Vec<TransformPipeline>,
    pub calibration: Tensor<f32>,
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    cfg.validate()?;
    let (train, test) = cfg.data.load()?;
    let spec = cfg.model_for(&train)?;
    let pipelines = cfg.surrogates.resolve()?;
    let heldout = cfg.eval.resolve_heldout()?;
    let mut suite = make_eval_domains(&test, &heldout, &pipelines, cfg.data.seed())?;
    let calibration = test.images.slice_rows(0, cfg.eval.calibration_size.min(test.len()))?;
    suite.domains.insert(0, (SOURCE_DOMAIN.to_string(), test));
    Ok(Prepared {
        spec,
        train,
        suite,
        pipelines,
        calibration,
    })
}

pub fn evaluate_params(cfg: &ExperimentConfig, prep: &Prepared, params: &crate::tensor::ParamSet<f32>) -> Result<Vec<DomainAccuracy>> {
    evaluate(
        &prep.spec,
        params,
        &prep.suite,
        cfg.eval.prompt_mode,
        cfg.eval.batch_size,
        Some(&prep.calibration),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub steps: u64,
    pub accuracy: Vec<DomainAccuracy>,
    pub mean_shifted: f64,
    pub dir: PathBuf,
}

struct Logger<'a> {
    cfg: &'a ExperimentConfig,
    prep: &'a Prepared,
    writer: MetricsWriter,
    dir: &'a Path,
    seed: u64,
    start: Instant,
    current: Option<MetricsRecord>,
    pending: Option<MetricsRecord>,
}

impl Logger<'_> {
    fn flush(&mut self) -> Result<()> {
        if let Some(p) = self.pending.take() {
            self.writer.append(&p)?;
        }
        Ok(())
    }
}

impl TrainHooks<f32> for Logger<'_> {
    fn on_step(&mut self, state: &TrainerState<f32>, epoch: usize, r: &StepReport) -> Result<()> {
        self.flush()?;
        let rec = MetricsRecord {
            step: r.step,
            epoch: epoch as u64,
            seed: self.seed,
            inner_cl: r.inner_cl,
            inner_adv: r.inner_adv,
            outer_loss: r.outer_loss,
            grad_norm_theta: r.grad_norm_theta,
            grad_norm_omega: r.grad_norm_omega,
            lr_theta: state.alpha_theta,
            lr_omega: state.alpha_omega,
            accuracy: BTreeMap::new(),
            wall_clock_ms: if self.cfg.logging.wall_clock {
                self.start.elapsed().as_millis() as u64
            } else {
                0
            },
        };
        if r.step.is_multiple_of(self.cfg.logging.every_steps as u64) {
            self.pending = Some(rec.clone());
        }
        self.current = Some(rec);
        Ok(())
    }

    fn on_epoch_end(&mut self, state: &TrainerState<f32>, epoch: usize) -> Result<()> {
        if self.pending.is_none() {
            self.pending = self.current.take();
        }
        let last = epoch + 1 == self.cfg.train.epochs;
        if (epoch + 1).is_multiple_of(self.cfg.eval.every_epochs) || last {
            let acc = evaluate_params(self.cfg, self.prep, &state.params)?;
            if let Some(p) = self.pending.as_mut() {
                p.accuracy = acc.into_iter().map(|a| (a.domain, a.accuracy)).collect();
            }
        }
        self.flush()?;
        let every = self.cfg.logging.checkpoint_every_epochs;
        if every > 0 && (epoch + 1).is_multiple_of(every) {
            checkpoint(&self.prep.spec, state).save(&self.dir.join(format!("epoch_{:03}.ckpt", epoch + 1)))?;
        }
        Ok(())
    }
}

fn checkpoint(spec: &ModelSpec, state: &TrainerState<f32>) -> Checkpoint {
    Checkpoint {
        spec: spec.clone(),
        seed: state.seed,
        step: state.t,
        params: state.params.clone(),
    }
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n").map_err(|e| Error::io(path, e))
}

/// One seed: `config.json`, `metrics.csv`/`.jsonl`, `loss.svg`,
/// `final.ckpt` and `summary.json` under `dir`. Metrics written before a
/// failure stay on disk.
pub fn run_seed(cfg: &ExperimentConfig, prep: &Prepared, seed: u64, dir: &Path) -> Result<RunSummary> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut run_cfg = cfg.clone();
    run_cfg.seeds = vec![seed];
    write_json(&run_cfg, &dir.join("config.json"))?;
    let csv = dir.join("metrics.csv");
    let mut logger = Logger {
        cfg,
        prep,
        writer: MetricsWriter::create(&csv, &prep.suite.names())?,
        dir,
        seed,
        start: Instant::now(),
        current: None,
        pending: None,
    };
    let mut state = TrainerState::<f32>::new(&prep.spec, seed, cfg.train.alpha_theta, cfg.train.alpha_omega)?;
    let trained = train(&mut state, &prep.spec, &prep.train, &prep.pipelines, &cfg.train, &mut logger);
    if let Err(e) = trained {
        logger.flush()?;
        return Err(e);
    }
    checkpoint(&prep.spec, &state).save(&dir.join("final.ckpt"))?;
    let accuracy = evaluate_params(cfg, prep, &state.params)?;
    emit_plot(
        &csv,
        &dir.join("loss.svg"),
        &["inner_cl".into(), "inner_adv".into(), "outer_loss".into()],
    )?;
    let summary = RunSummary {
        seed,
        steps: state.t,
        mean_shifted: mean_shifted(&accuracy),
        accuracy,
        dir: dir.to_path_buf(),
    };
    write_json(&summary, &dir.join("summary.json"))?;
    Ok(summary)
}

/// Mean and sample standard deviation per domain and of the shifted mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub seeds: Vec<u64>,
    pub mean: BTreeMap<String, f64>,
    pub std: BTreeMap<String, f64>,
    pub median_shifted: f64,
}

pub const MEAN_SHIFTED: &str = "mean_shifted";

pub fn aggregate(runs: &[RunSummary]) -> Aggregate {
    let mut cols: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in runs {
        for a in &r.accuracy {
            cols.entry(a.domain.clone()).or_default().push(a.accuracy);
        }
        cols.entry(MEAN_SHIFTED.into()).or_default().push(r.mean_shifted);
    }
    let mut mean = BTreeMap::new();
    let mut std = BTreeMap::new();
    for (k, v) in &cols {
        let (m, s) = mean_std(v);
        mean.insert(k.clone(), m);
        std.insert(k.clone(), s);
    }
    Aggregate {
        seeds: runs.iter().map(|r| r.seed).collect(),
        mean,
        std,
        median_shifted: median(&runs.iter().map(|r| r.mean_shifted).collect::<Vec<_>>()),
    }
}

/// Runs every configured seed under `root/seed_<s>` and writes
/// `root/aggregate.json`.
pub fn run_experiment(cfg: &ExperimentConfig, root: &Path) -> Result<(Vec<RunSummary>, Aggregate)> {
    let prep = prepare(cfg)?;
    run_seeds(cfg, &prep, root)
}

fn run_seeds(cfg: &ExperimentConfig, prep: &Prepared, root: &Path) -> Result<(Vec<RunSummary>, Aggregate)> {
    let runs = cfg
        .seeds
        .iter()
        .map(|&s| run_seed(cfg, prep, s, &root.join(format!("seed_{s}"))))
        .collect::<Result<Vec<_>>>()?;
    let agg = aggregate(&runs);
    write_json(&agg, &root.join("aggregate.json"))?;
    Ok((runs, agg))
}

/// Method variants compared by `ablate`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    /// λ = 0.
    NoAdv,
    /// Head without feature standardization.
    NoStd,
    /// λ = 0 and α_ω = 0: prompts stay at γ = 1, β = 0.
    Erm,
}

impl Variant {
    pub const ABLATION: [Variant; 3] = [Variant::Full, Variant::NoAdv, Variant::NoStd];

    pub fn tag(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoAdv => "no_adv",
            Variant::NoStd => "no_std",
            Variant::Erm => "erm",
        }
    }

    pub fn parse(s: &str) -> Result<Variant> {
        [Variant::Full, Variant::NoAdv, Variant::NoStd, Variant::Erm]
            .into_iter()
            .find(|v| v.tag() == s)
            .ok_or_else(|| Error::config(format!("unknown variant {s:?} (full, no_adv, no_std, erm)")))
    }

    fn apply(self, cfg: &mut ExperimentConfig, spec: &mut ModelSpec) {
        match self {
            Variant::Full => {}
            Variant::NoAdv => cfg.train.inner.lambda = 0.0,
            Variant::NoStd => spec.head.standardize = false,
            Variant::Erm => {
                cfg.train.inner.lambda = 0.0;
                cfg.train.alpha_omega = 0.0;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub variant: Variant,
    pub runs: Vec<RunSummary>,
    pub aggregate: Aggregate,
}

/// Every variant on every seed under `root/<tag>/seed_<s>`; writes
/// `root/ablation.json`.
pub fn run_variants(cfg: &ExperimentConfig, variants: &[Variant], root: &Path) -> Result<Vec<VariantResult>> {
    let base = prepare(cfg)?;
    let mut out = Vec::new();
    for &v in variants {
        let mut vcfg = cfg.clone();
        let mut spec = base.spec.clone();
        v.apply(&mut vcfg, &mut spec);
        vcfg.model = Some(spec.clone());
        vcfg.validate()?;
        let prep = Prepared {
            spec,
            train: base.train.clone(),
            suite: base.suite.clone(),
            pipelines: base.pipelines.clone(),
            calibration: base.calibration.clone(),
        };
        let (runs, aggregate) = run_seeds(&vcfg, &prep, &root.join(v.tag()))?;
        out.push(VariantResult {
            variant: v,
            runs,
            aggregate,
        });
    }
    write_json(&out, &root.join("ablation.json"))?;
    Ok(out)
}

/// Axis varied by `sweep`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    K,
    Lambda,
    EpsilonTheta,
    M,
    /// Evaluation batch size (prompt batch at test time).
    EvalBatch,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::K => "K",
            SweepParam::Lambda => "lambda",
            SweepParam::EpsilonTheta => "epsilon_theta",
            SweepParam::M => "m",
            SweepParam::EvalBatch => "eval_batch",
        }
    }

    pub fn parse(s: &str) -> Result<SweepParam> {
        [
            SweepParam::K,
            SweepParam::Lambda,
            SweepParam::EpsilonTheta,
            SweepParam::M,
            SweepParam::EvalBatch,
        ]
        .into_iter()
        .find(|p| p.name() == s)
        .ok_or_else(|| Error::config(format!("unknown sweep parameter {s:?} (K, lambda, epsilon_theta, m, eval_batch)")))
    }

    pub fn apply(self, cfg: &mut ExperimentConfig, value: f64) -> Result<()> {
        let count = || -> Result<usize> {
            if value >= 1.0 && value.fract() == 0.0 {
                Ok(value as usize)
            } else {
                Err(Error::config(format!("{} needs a positive integer, got {value}", self.name())))
            }
        };
        match self {
            SweepParam::K | SweepParam::M => {
                if cfg.surrogates.pipelines.is_some() {
                    return Err(Error::config("K and m sweeps use the built-in pipeline bank"));
                }
                if self == SweepParam::K {
                    cfg.surrogates.k = count()?;
                } else {
                    cfg.surrogates.m = count()?;
                }
            }
            SweepParam::Lambda => cfg.train.inner.lambda = value,
            SweepParam::EpsilonTheta => cfg.train.hypergrad.epsilon_theta = value,
            SweepParam::EvalBatch => cfg.eval.batch_size = count()?,
        }
        cfg.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub aggregate: Aggregate,
}

fn value_tag(v: f64) -> String {
    format!("{v}").replace('.', "p").replace('-', "m")
}

/// One multi-seed run per value under `root/<param>_<value>`, plus
/// `sweep_<param>.{json,csv,svg}` in `root`.
pub fn sweep(cfg: &ExperimentConfig, param: SweepParam, values: &[f64], root: &Path) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::config("sweep needs at least one value"));
    }
    let mut rows = Vec::new();
    for &v in values {
        let mut c = cfg.clone();
        param.apply(&mut c, v)?;
        let (_, aggregate) = run_experiment(&c, &root.join(format!("{}_{}", param.name(), value_tag(v))))?;
        rows.push(SweepRow { value: v, aggregate });
    }
    let name = param.name();
    write_json(&rows, &root.join(format!("sweep_{name}.json")))?;
    let csv_path = root.join(format!("sweep_{name}.csv"));
    let mut w = csv::Writer::from_path(&csv_path)?;
    w.write_record([name, "mean_shifted", "std_shifted", "median_shifted"])?;
    for r in &rows {
        w.write_record([
            r.value.to_string(),
            r.aggregate.mean[MEAN_SHIFTED].to_string(),
            r.aggregate.std[MEAN_SHIFTED].to_string(),
            r.aggregate.median_shifted.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))?;
    let mut series = vec![Series {
        name: "mean shifted".into(),
        points: rows.iter().map(|r| (r.value, r.aggregate.mean[MEAN_SHIFTED])).collect(),
    }];
    if let Some(first) = rows.first() {
        for d in first.aggregate.mean.keys().filter(|k| *k != MEAN_SHIFTED) {
            series.push(Series {
                name: d.clone(),
                points: rows.iter().map(|r| (r.value, r.aggregate.mean[d])).collect(),
            });
        }
    }
    let svg = line_chart(&format!("accuracy vs {name}"), name, "accuracy", &series);
    write_svg(&svg, &root.join(format!("sweep_{name}.svg")))?;
    Ok(rows)
}

/// Accuracy of a saved checkpoint on the suite of `cfg`.
pub fn evaluate_checkpoint(cfg: &ExperimentConfig, ckpt: &Path) -> Result<Vec<DomainAccuracy>> {
    let ck = Checkpoint::load(ckpt)?;
    let mut prep = prepare(cfg)?;
    if ck.spec.input != prep.spec.input || ck.spec.num_classes() != prep.spec.num_classes() {
        return Err(Error::config("checkpoint model does not match the configured data"));
    }
    prep.spec = ck.spec.clone();
    evaluate_params(cfg, &prep, &ck.params)
}
