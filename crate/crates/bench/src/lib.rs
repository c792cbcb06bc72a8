//! Shared fixtures for the benchmarks.

use sdg_core::bilevel::TrainConfig;
use sdg_core::datasets::{batches, glyph_split, Batch};
use sdg_core::harness::ExperimentConfig;
use sdg_core::model::{presets, ModelSpec};

/// Glyph MLP, its default training config and one 32-sample glyph batch.
pub fn glyph_fixture() -> (ModelSpec, TrainConfig, Batch) {
    let (train, _) = glyph_split(10, 1, 10, 16, 0).expect("glyph split");
    let spec = presets::glyph_mlp([1, 16, 16], 10);
    let cfg = ExperimentConfig::glyph_default("unused").train;
    let batch = batches(&train, 32, 0, 0, true).expect("batches").next().expect("one batch");
    (spec, cfg, batch)
}
