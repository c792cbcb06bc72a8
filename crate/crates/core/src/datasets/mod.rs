//! Source-domain data: the procedural glyph benchmark, IDX ingestion,
//! batching, held-out evaluation domains and the on-disk format.

pub mod format;
mod glyphs;
pub mod idx;

use std::path::Path;

use rand::seq::SliceRandom;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::rng;
use crate::surrogate::{self, TransformPipeline};
use crate::tensor::Tensor;

pub use format::{load_dataset, save_dataset};
pub use idx::{load_idx, IdxOptions};

/// Images `[N, C, H, W]` in `[0, 1]` with one class label per image.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub name: String,
    /// Seed the data was generated from, when procedural.
    pub seed: Option<u64>,
}

impl LabeledDataset {
    pub fn new(
        images: Tensor<f32>,
        labels: Vec<usize>,
        num_classes: usize,
        name: impl Into<String>,
        seed: Option<u64>,
    ) -> Result<LabeledDataset> {
        let ds = LabeledDataset {
            images,
            labels,
            num_classes,
            name: name.into(),
            seed,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.images.shape().len() != 4 {
            return Err(Error::contract(format!(
                "images must be [N, C, H, W], got {:?}",
                self.images.shape()
            )));
        }
        let n = self.images.shape()[0];
        if self.labels.len() != n {
            return Err(Error::contract(format!("{n} images but {} labels", self.labels.len())));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= self.num_classes) {
            return Err(Error::contract(format!(
                "label {bad} out of range for {} classes",
                self.num_classes
            )));
        }
        if self.images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::contract("pixel values must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let s = self.images.shape();
        (s[0], s[1], s[2], s[3])
    }

    /// Flattened per-image input size `C * H * W`.
    pub fn input_dim(&self) -> usize {
        let (_, c, h, w) = self.dims();
        c * h * w
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    pub fn subset(&self, rows: &[usize]) -> Result<LabeledDataset> {
        Ok(LabeledDataset {
            images: self.images.select_rows(rows)?,
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            num_classes: self.num_classes,
            name: self.name.clone(),
            seed: self.seed,
        })
    }
}

/// Balanced procedural glyph dataset, `n_per_class * num_classes` grayscale
/// images of side `resolution`, classes interleaved.
pub fn generate_glyphs(
    n_per_class: usize,
    num_classes: usize,
    resolution: usize,
    seed: u64,
) -> Result<LabeledDataset> {
    if resolution != 16 && resolution != 32 {
        return Err(Error::config(format!("glyph resolution must be 16 or 32, got {resolution}")));
    }
    if n_per_class == 0 {
        return Err(Error::config("n_per_class must be at least 1"));
    }
    if !(2..=10).contains(&num_classes) {
        return Err(Error::config(format!("glyphs support 2..=10 classes, got {num_classes}")));
    }
    let n = n_per_class * num_classes;
    let mut data = Vec::with_capacity(n * resolution * resolution);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % num_classes;
        let mut r = rng::stream(rng::derive_path(seed, &[rng::labels::DATA, i as u64]));
        data.extend(glyphs::render(class, resolution, &mut r));
        labels.push(class);
    }
    LabeledDataset::new(
        Tensor::new(vec![n, 1, resolution, resolution], data)?,
        labels,
        num_classes,
        "glyphs",
        Some(seed),
    )
}

/// Train and test glyph splits drawn from independent streams of `seed`.
pub fn glyph_split(
    n_train_per_class: usize,
    n_test_per_class: usize,
    num_classes: usize,
    resolution: usize,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset)> {
    let mut train = generate_glyphs(n_train_per_class, num_classes, resolution, rng::derive(seed, 0))?;
    let mut test = generate_glyphs(n_test_per_class, num_classes, resolution, rng::derive(seed, 1))?;
    train.name = "glyphs-train".into();
    test.name = "glyphs-test".into();
    Ok((train, test))
}

/// One minibatch; `indices` are positions in the source dataset.
#[derive(Debug, Clone)]
pub struct Batch {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub indices: Vec<usize>,
}

/// Sample order for one epoch: identity, or a permutation from `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: u64, shuffle: bool) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        let mut r = rng::stream(rng::derive_path(seed, &[rng::labels::SHUFFLE, epoch]));
        order.shuffle(&mut r);
    }
    order
}

/// Iterator over one epoch of minibatches; the last batch may be short.
pub struct Batches<'a> {
    ds: &'a LabeledDataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl Iterator for Batches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let idx = self.order[self.pos..end].to_vec();
        self.pos = end;
        Some(Batch {
            images: self.ds.images.select_rows(&idx).expect("indices in range"),
            labels: idx.iter().map(|&i| self.ds.labels[i]).collect(),
            indices: idx,
        })
    }
}

pub fn batches(ds: &LabeledDataset, batch_size: usize, seed: u64, epoch: u64, shuffle: bool) -> Result<Batches<'_>> {
    if batch_size == 0 || batch_size > ds.len() {
        return Err(Error::config(format!(
            "batch size must be in 1..={}, got {batch_size}",
            ds.len()
        )));
    }
    Ok(Batches {
        ds,
        order: epoch_order(ds.len(), seed, epoch, shuffle),
        batch_size,
        pos: 0,
    })
}

/// Corrupted copies of a test split, one per held-out pipeline.
#[derive(Debug, Clone)]
pub struct EvalDomainSuite {
    pub domains: Vec<(String, LabeledDataset)>,
}

impl EvalDomainSuite {
    pub fn len(&self) -> usize {
        self.domains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.domains.is_empty()
    }

    pub fn names(&self) -> Vec<String> {
        self.domains.iter().map(|(n, _)| n.clone()).collect()
    }
}

pub fn make_eval_domains(
    test: &LabeledDataset,
    heldout: &[TransformPipeline],
    training: &[TransformPipeline],
    seed: u64,
) -> Result<EvalDomainSuite> {
    surrogate::check_disjoint(training, heldout)?;
    let domains = heldout
        .iter()
        .enumerate()
        .map(|(k, p)| {
            let images = surrogate::apply_pipeline(&test.images, p, rng::derive_path(seed, &[rng::labels::EVAL, k as u64]))?;
            let ds = LabeledDataset::new(images, test.labels.clone(), test.num_classes, p.name.clone(), test.seed)?;
            Ok((p.name.clone(), ds))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalDomainSuite { domains })
}

#[derive(Serialize)]
struct Manifest<'a> {
    source: &'a str,
    source_len: usize,
    seed: u64,
    pipelines: &'a [TransformPipeline],
    files: Vec<String>,
}

/// Writes every surrogate domain of `ds` as a dataset file plus `manifest.json`.
/// Sample `i` of domain `k` uses the stream `derive(derive(seed, k), i)`,
/// the same one per-batch synthesis uses for a batch starting at sample 0.
pub fn materialize(ds: &LabeledDataset, pipelines: &[TransformPipeline], seed: u64, dir: &Path) -> Result<Vec<String>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for (k, p) in pipelines.iter().enumerate() {
        let images = surrogate::apply_pipeline(&ds.images, p, rng::derive(seed, k as u64))?;
        let out = LabeledDataset::new(images, ds.labels.clone(), ds.num_classes, p.name.clone(), ds.seed)?;
        let file = format!("domain_{:02}.bsdg", k + 1);
        save_dataset(&out, &dir.join(&file))?;
        files.push(file);
    }
    let manifest = Manifest {
        source: &ds.name,
        source_len: ds.len(),
        seed,
        pipelines,
        files: files.clone(),
    };
    let path = dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(files)
}
