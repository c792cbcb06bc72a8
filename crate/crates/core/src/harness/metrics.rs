//! Append-only metrics log: CSV with a fixed column order plus a JSONL
//! mirror.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Columns before the per-domain accuracies.
pub const LEADING_COLUMNS: [&str; 10] = [
    "step",
    "epoch",
    "seed",
    "inner_cl",
    "inner_adv",
    "outer_loss",
    "grad_norm_theta",
    "grad_norm_omega",
    "lr_theta",
    "lr_omega",
];
pub const WALL_CLOCK_COLUMN: &str = "wall_clock_ms";
const ACC_PREFIX: &str = "acc_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub epoch: u64,
    pub seed: u64,
    pub inner_cl: f64,
    pub inner_adv: f64,
    pub outer_loss: f64,
    pub grad_norm_theta: f64,
    pub grad_norm_omega: f64,
    pub lr_theta: f64,
    pub lr_omega: f64,
    /// Per-domain accuracy; empty on rows without an evaluation.
    pub accuracy: BTreeMap<String, f64>,
    pub wall_clock_ms: u64,
}

/// CSV header for the given domains, in order.
pub fn header(domains: &[String]) -> Vec<String> {
    let mut h: Vec<String> = LEADING_COLUMNS.iter().map(|s| s.to_string()).collect();
    h.extend(domains.iter().map(|d| format!("{ACC_PREFIX}{d}")));
    h.push(WALL_CLOCK_COLUMN.into());
    h
}

fn row(r: &MetricsRecord, domains: &[String]) -> Vec<String> {
    let mut out = vec![r.step.to_string(), r.epoch.to_string(), r.seed.to_string()];
    for v in [
        r.inner_cl,
        r.inner_adv,
        r.outer_loss,
        r.grad_norm_theta,
        r.grad_norm_omega,
        r.lr_theta,
        r.lr_omega,
    ] {
        out.push(v.to_string());
    }
    for d in domains {
        out.push(r.accuracy.get(d).map(|v| v.to_string()).unwrap_or_default());
    }
    out.push(r.wall_clock_ms.to_string());
    out
}

/// Streams records to `<stem>.csv` and `<stem>.jsonl`, flushing per record.
pub struct MetricsWriter {
    domains: Vec<String>,
    csv: csv::Writer<File>,
    jsonl: BufWriter<File>,
    csv_path: PathBuf,
    last_step: Option<u64>,
}

impl MetricsWriter {
    pub fn create(csv_path: &Path, domains: &[String]) -> Result<MetricsWriter> {
        let jsonl_path = csv_path.with_extension("jsonl");
        let file = File::create(csv_path).map_err(|e| Error::io(csv_path, e))?;
        let mut csv = csv::Writer::from_writer(file);
        csv.write_record(header(domains))?;
        csv.flush().map_err(|e| Error::io(csv_path, e))?;
        let jsonl = BufWriter::new(File::create(&jsonl_path).map_err(|e| Error::io(&jsonl_path, e))?);
        Ok(MetricsWriter {
            domains: domains.to_vec(),
            csv,
            jsonl,
            csv_path: csv_path.to_path_buf(),
            last_step: None,
        })
    }

    pub fn append(&mut self, r: &MetricsRecord) -> Result<()> {
        if let Some(last) = self.last_step {
            if r.step <= last {
                return Err(Error::contract(format!("metrics step {} after {last}", r.step)));
            }
        }
        if let Some(d) = r.accuracy.keys().find(|d| !self.domains.contains(d)) {
            return Err(Error::contract(format!("accuracy for unknown domain {d}")));
        }
        self.last_step = Some(r.step);
        self.csv.write_record(row(r, &self.domains))?;
        self.csv.flush().map_err(|e| Error::io(&self.csv_path, e))?;
        serde_json::to_writer(&mut self.jsonl, r)?;
        self.jsonl.write_all(b"\n").map_err(|e| Error::io(&self.csv_path, e))?;
        self.jsonl.flush().map_err(|e| Error::io(&self.csv_path, e))?;
        Ok(())
    }
}

/// Writes all records at once; an empty list gives a header-only CSV.
pub fn write_metrics(records: &[MetricsRecord], domains: &[String], path: &Path) -> Result<()> {
    let mut w = MetricsWriter::create(path, domains)?;
    for r in records {
        w.append(r)?;
    }
    Ok(())
}

fn parse<T: std::str::FromStr>(s: &str, col: &str, line: u64) -> Result<T> {
    s.parse().map_err(|_| Error::Parse {
        offset: line,
        msg: format!("bad value {s:?} in column {col}"),
    })
}

/// Parses a metrics CSV back into records and its domain list.
pub fn read_metrics(path: &Path) -> Result<(Vec<String>, Vec<MetricsRecord>)> {
    let mut rdr = csv::Reader::from_path(path)?;
    let head: Vec<String> = rdr.headers()?.iter().map(String::from).collect();
    let n = head.len();
    if n < LEADING_COLUMNS.len() + 1
        || head[..LEADING_COLUMNS.len()] != LEADING_COLUMNS
        || head[n - 1] != WALL_CLOCK_COLUMN
    {
        return Err(Error::Parse {
            offset: 0,
            msg: "unexpected metrics header".into(),
        });
    }
    let domains: Vec<String> = head[LEADING_COLUMNS.len()..n - 1]
        .iter()
        .map(|h| h.strip_prefix(ACC_PREFIX).unwrap_or(h).to_string())
        .collect();
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = i as u64 + 2;
        let f = |k: usize| parse::<f64>(&rec[k], &head[k], line);
        let mut accuracy = BTreeMap::new();
        for (j, d) in domains.iter().enumerate() {
            let cell = &rec[LEADING_COLUMNS.len() + j];
            if !cell.is_empty() {
                accuracy.insert(d.clone(), parse::<f64>(cell, d, line)?);
            }
        }
        out.push(MetricsRecord {
            step: parse(&rec[0], "step", line)?,
            epoch: parse(&rec[1], "epoch", line)?,
            seed: parse(&rec[2], "seed", line)?,
            inner_cl: f(3)?,
            inner_adv: f(4)?,
            outer_loss: f(5)?,
            grad_norm_theta: f(6)?,
            grad_norm_omega: f(7)?,
            lr_theta: f(8)?,
            lr_omega: f(9)?,
            accuracy,
            wall_clock_ms: parse(&rec[n - 1], WALL_CLOCK_COLUMN, line)?,
        });
    }
    Ok((domains, out))
}

/// Numeric column `name` against step, skipping empty cells.
pub fn column(records: &[MetricsRecord], name: &str) -> Result<Vec<(f64, f64)>> {
    let pick = |r: &MetricsRecord| -> Option<f64> {
        Some(match name {
            "inner_cl" => r.inner_cl,
            "inner_adv" => r.inner_adv,
            "outer_loss" => r.outer_loss,
            "grad_norm_theta" => r.grad_norm_theta,
            "grad_norm_omega" => r.grad_norm_omega,
            "lr_theta" => r.lr_theta,
            "lr_omega" => r.lr_omega,
            "epoch" => r.epoch as f64,
            WALL_CLOCK_COLUMN => r.wall_clock_ms as f64,
            other => return r.accuracy.get(other.strip_prefix(ACC_PREFIX).unwrap_or(other)).copied(),
        })
    };
    let known = LEADING_COLUMNS.contains(&name)
        || name == WALL_CLOCK_COLUMN
        || records.iter().any(|r| pick(r).is_some());
    if !known {
        return Err(Error::config(format!("no metrics column named {name}")));
    }
    Ok(records.iter().filter_map(|r| pick(r).map(|v| (r.step as f64, v))).collect())
}

/// Sample mean and standard deviation (n − 1; 0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
