//! Per-domain accuracy under either prompt protocol.

use serde::{Deserialize, Serialize};

use crate::datasets::{EvalDomainSuite, LabeledDataset};
use crate::error::{Error, Result};
use crate::model::{images_on, ModelSpec};
use crate::tensor::{ParamSet, Scalar, Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PromptMode {
    /// Each evaluation batch prompts itself from its own features.
    #[default]
    TestBatch,
    /// One prompt from a source calibration batch serves every batch.
    SourceCalibrated,
}

/// Name of the clean source domain in evaluation reports.
pub const SOURCE_DOMAIN: &str = "source";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainAccuracy {
    pub domain: String,
    pub accuracy: f64,
}

fn argmax_row(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Fraction of argmax-correct predictions on `ds`, batched in order.
pub fn accuracy<T: Scalar>(
    spec: &ModelSpec,
    params: &ParamSet<T>,
    ds: &LabeledDataset,
    mode: PromptMode,
    batch_size: usize,
    calibration: Option<&Tensor<f32>>,
) -> Result<f64> {
    if batch_size == 0 {
        return Err(Error::config("evaluation batch size must be at least 1"));
    }
    let n = ds.len();
    let mut correct = 0usize;
    let mut start = 0;
    while start < n {
        let end = (start + batch_size).min(n);
        let rows: Vec<usize> = (start..end).collect();
        let x = ds.images.select_rows(&rows)?;
        let tape = Tape::<T>::new();
        let v = params.register(&tape);
        let xv = images_on(&tape, &x);
        let logits = match mode {
            PromptMode::TestBatch => spec.forward(&v, &xv)?.logits,
            PromptMode::SourceCalibrated => {
                let cal = calibration.ok_or_else(|| Error::config("source-calibrated evaluation needs a calibration batch"))?;
                spec.forward_with_context(&v, &xv, &images_on(&tape, cal))?
            }
        };
        let vals = logits.value().to_f64_vec();
        let k = spec.num_classes();
        for (i, row) in vals.chunks(k).enumerate() {
            if argmax_row(row) == ds.labels[start + i] {
                correct += 1;
            }
        }
        start = end;
    }
    Ok(correct as f64 / n as f64)
}

/// Accuracy on every domain of `suite`, in suite order.
pub fn evaluate<T: Scalar>(
    spec: &ModelSpec,
    params: &ParamSet<T>,
    suite: &EvalDomainSuite,
    mode: PromptMode,
    batch_size: usize,
    calibration: Option<&Tensor<f32>>,
) -> Result<Vec<DomainAccuracy>> {
    if suite.is_empty() {
        return Err(Error::config("evaluation suite is empty"));
    }
    suite
        .domains
        .iter()
        .map(|(name, ds)| {
            Ok(DomainAccuracy {
                domain: name.clone(),
                accuracy: accuracy(spec, params, ds, mode, batch_size, calibration)?,
            })
        })
        .collect()
}

/// Mean accuracy over every domain except the clean source.
pub fn mean_shifted(acc: &[DomainAccuracy]) -> f64 {
    let shifted: Vec<f64> = acc.iter().filter(|a| a.domain != SOURCE_DOMAIN).map(|a| a.accuracy).collect();
    if shifted.is_empty() {
        f64::NAN
    } else {
        shifted.iter().sum::<f64>() / shifted.len() as f64
    }
}
