use criterion::{black_box, criterion_group, criterion_main, Criterion};
use sdg_bench::glyph_fixture;
use sdg_core::bilevel::{hypergrad_fd, outer_grads, train_step, InnerObjective, OuterObjective, TrainerState};
use sdg_core::model::images_on;
use sdg_core::objectives::{adversarial_direction, features_of};
use sdg_core::surrogate::{default_pipelines, surrogate_batches};
use sdg_core::tensor::{ParamSet, Partition, Tape, Tensor};

fn tensor_ops(c: &mut Criterion) {
    let a = Tensor::<f32>::new(vec![32, 256], (0..32 * 256).map(|i| (i % 17) as f32 * 0.01).collect()).unwrap();
    let w = Tensor::<f32>::new(vec![256, 128], (0..256 * 128).map(|i| (i % 13) as f32 * 0.01).collect()).unwrap();
    c.bench_function("matmul_32x256x128_fwd_bwd", |b| {
        b.iter(|| {
            let tape = Tape::<f32>::new();
            let x = tape.constant(a.clone());
            let wv = tape.param("w", Partition::Theta, w.clone());
            let y = x.matmul(&wv).unwrap().relu().sum();
            black_box(tape.backward(y, &[Partition::Theta]).unwrap());
        })
    });
}

fn surrogates(c: &mut Criterion) {
    let (_, _, batch) = glyph_fixture();
    let pipelines = default_pipelines();
    c.bench_function("surrogate_batches_k5_m3", |b| {
        b.iter(|| black_box(surrogate_batches(&batch.images, &batch.labels, &pipelines, 1).unwrap()))
    });
}

fn training(c: &mut Criterion) {
    let (spec, cfg, batch) = glyph_fixture();
    let pipelines = default_pipelines();
    let params: ParamSet<f32> = spec.init_params(0).unwrap();

    c.bench_function("adversarial_direction", |b| {
        b.iter(|| black_box(adversarial_direction(&spec, &params, &batch.images, &cfg.inner, 3).unwrap()))
    });

    let eps = adversarial_direction(&spec, &params, &batch.images, &cfg.inner, 3).unwrap().eps;
    let context = features_of(&spec, &params, &batch.images).unwrap();
    let inner = InnerObjective {
        spec: &spec,
        images: &batch.images,
        labels: &batch.labels,
        eps: Some(&eps),
        context: Some(&context),
        cfg: &cfg.inner,
    };
    let sur: Vec<Tensor<f32>> = surrogate_batches(&batch.images, &batch.labels, &pipelines, 1)
        .unwrap()
        .into_iter()
        .map(|s| s.images)
        .collect();
    let outer = OuterObjective {
        spec: &spec,
        surrogates: &sur,
        labels: &batch.labels,
        contexts: None,
    };
    let og = outer_grads(&outer, &params).unwrap();
    c.bench_function("outer_grads_k5", |b| b.iter(|| black_box(outer_grads(&outer, &params).unwrap())));
    c.bench_function("hypergrad_fd", |b| {
        b.iter(|| black_box(hypergrad_fd(&inner, &params, &og.delta, cfg.alpha_theta, 0.01, false).unwrap()))
    });

    let state = TrainerState::<f32>::new(&spec, 0, cfg.alpha_theta, cfg.alpha_omega).unwrap();
    c.bench_function("train_step_glyph_mlp", |b| {
        b.iter_batched(
            || state.clone(),
            |mut s| black_box(train_step(&mut s, &spec, &batch, &pipelines, &cfg).unwrap()),
            criterion::BatchSize::SmallInput,
        )
    });

    c.bench_function("eval_forward_32", |b| {
        b.iter(|| {
            let tape = Tape::<f32>::new();
            let v = params.register(&tape);
            let s = spec.forward(&v, &images_on(&tape, &batch.images)).unwrap().logits.value().sum();
            black_box(s)
        })
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = tensor_ops, surrogates, training
}
criterion_main!(benches);
