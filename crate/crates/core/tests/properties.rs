use std::collections::BTreeMap;

use approx::assert_relative_eq;
use proptest::prelude::*;
use sdg_core::datasets::format::{decode, encode};
use sdg_core::datasets::{batches, glyph_split};
use sdg_core::harness::metrics::{read_metrics, write_metrics, MetricsRecord};
use sdg_core::model::checkpoint::Checkpoint;
use sdg_core::model::{images_on, presets};
use sdg_core::objectives::{adversarial_direction, InnerLossConfig};
use sdg_core::surrogate::{apply_pipeline, apply_pipeline_at, default_pipelines, heldout_pipelines, surrogate_batches};
use sdg_core::tensor::{Partition, Tape, Tensor};

fn images(n: usize, seed: u64) -> Tensor<f32> {
    let (train, _) = glyph_split(n.div_ceil(10), 1, 10, 16, seed).unwrap();
    train.images.slice_rows(0, n).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn surrogates_stay_in_unit_range_and_keep_shape(seed in any::<u64>(), n in 1usize..6) {
        let x = images(n, seed % 1000);
        let labels: Vec<usize> = (0..n).map(|i| i % 10).collect();
        let pipes: Vec<_> = default_pipelines().into_iter().chain(heldout_pipelines()).collect();
        for s in surrogate_batches(&x, &labels, &pipes, seed).unwrap() {
            prop_assert_eq!(s.images.shape(), x.shape());
            prop_assert_eq!(s.labels, &labels[..]);
            prop_assert!(s.images.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn pipelines_are_deterministic_and_chunkable(seed in any::<u64>(), split in 1usize..5) {
        let x = images(5, 3);
        for p in default_pipelines() {
            let whole = apply_pipeline(&x, &p, seed).unwrap();
            prop_assert_eq!(&whole, &apply_pipeline(&x, &p, seed).unwrap());
            let head = apply_pipeline_at(&x.slice_rows(0, split).unwrap(), &p, seed, 0).unwrap();
            let tail = apply_pipeline_at(&x.slice_rows(split, 5).unwrap(), &p, seed, split as u64).unwrap();
            prop_assert_eq!(whole, Tensor::stack_rows(&[head, tail]).unwrap());
        }
    }

    #[test]
    fn batches_partition_the_dataset(seed in any::<u64>(), epoch in 0u64..50, bs in 1usize..40, shuffle in any::<bool>()) {
        let (ds, _) = glyph_split(4, 1, 10, 16, 1).unwrap();
        let mut seen: Vec<usize> = batches(&ds, bs, seed, epoch, shuffle).unwrap().flat_map(|b| {
            assert!(b.labels.len() <= bs);
            b.indices
        }).collect();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..ds.len()).collect::<Vec<_>>());
    }

    #[test]
    fn dataset_format_round_trips(seed in 0u64..1000, per_class in 1usize..4) {
        let (ds, _) = glyph_split(per_class, 1, 10, 16, seed).unwrap();
        let back = decode(&encode(&ds).unwrap(), &ds.name).unwrap();
        prop_assert_eq!(back.images, ds.images);
        prop_assert_eq!(back.labels, ds.labels);
        prop_assert_eq!(back.num_classes, ds.num_classes);
    }

    #[test]
    fn corrupted_dataset_bytes_are_rejected(pos in 0usize..4096, bit in 0u8..8) {
        let (ds, _) = glyph_split(1, 1, 10, 16, 0).unwrap();
        let mut bytes = encode(&ds).unwrap();
        let i = pos % bytes.len();
        bytes[i] ^= 1 << bit;
        prop_assert!(decode(&bytes, "x").map(|d| d != ds).unwrap_or(true));
    }

    #[test]
    fn offset_is_reversible(seed in any::<u64>(), alpha in -2.0f64..2.0) {
        let spec = presets::tiny([1, 4, 4], 3, 2);
        let p = spec.init_params::<f64>(seed).unwrap();
        let tape = Tape::new();
        let v = p.register(&tape);
        let x = images_on(&tape, &Tensor::<f32>::full(vec![2, 1, 4, 4], 0.5));
        let loss = spec.forward(&v, &x).unwrap().logits.sum();
        let g = tape.backward(loss, &Partition::ALL).unwrap();
        let back = p.offset(&g, alpha).unwrap().offset(&g, -alpha).unwrap();
        for (a, b) in p.flatten(&Partition::ALL).iter().zip(back.flatten(&Partition::ALL)) {
            assert_relative_eq!(*a, b, epsilon = 1e-12, max_relative = 1e-12);
        }
    }

    #[test]
    fn adversarial_perturbations_have_radius_rho(seed in any::<u64>(), rho in 0.01f64..5.0, steps in 1usize..3) {
        let spec = presets::tiny([1, 16, 16], 4, 10);
        let p = spec.init_params::<f32>(seed).unwrap();
        let cfg = InnerLossConfig { rho, adv_steps: steps, ..Default::default() };
        let x = images(4, 0);
        let eps = adversarial_direction(&spec, &p, &x, &cfg, seed).unwrap().eps;
        prop_assert_eq!(eps.shape(), x.shape());
        for row in eps.data().chunks(256) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert_relative_eq!(n, rho, max_relative = 1e-9);
        }
    }

    #[test]
    fn checkpoints_round_trip(seed in any::<u64>(), step in any::<u64>()) {
        let spec = presets::glyph_mlp([1, 16, 16], 10);
        let ck = Checkpoint { spec: spec.clone(), seed, step, params: spec.init_params(seed).unwrap() };
        prop_assert_eq!(Checkpoint::decode(&ck.encode().unwrap()).unwrap(), ck);
    }

    #[test]
    fn metrics_csv_round_trips(rows in prop::collection::vec((0.0f64..10.0, 0.0f64..1.0, any::<bool>()), 1..12)) {
        let domains = vec!["source".to_string(), "Blur, Invert".to_string()];
        let records: Vec<MetricsRecord> = rows
            .iter()
            .enumerate()
            .map(|(i, &(loss, acc, eval))| MetricsRecord {
                step: i as u64,
                epoch: i as u64 / 3,
                seed: 4,
                inner_cl: loss,
                inner_adv: loss / 2.0,
                outer_loss: loss * 1.5,
                grad_norm_theta: loss + 1.0,
                grad_norm_omega: acc,
                lr_theta: 0.05,
                lr_omega: 0.01,
                accuracy: if eval {
                    domains.iter().map(|d| (d.clone(), acc)).collect()
                } else {
                    BTreeMap::new()
                },
                wall_clock_ms: 0,
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        write_metrics(&records, &domains, &path).unwrap();
        let (_, back) = read_metrics(&path).unwrap();
        prop_assert_eq!(back, records);
    }
}
