use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use hsicd_bench::{affinity, scene};
use hsicd_core::nn::{
    softmax_cross_entropy, AdagradState, Architecture, Network, SampleSource, Tensor,
};
use hsicd_core::unmixing::{bfm_cube_from, fcls_cube, BfmOptions};
use std::hint::black_box;

fn unmixing(c: &mut Criterion) {
    let s = scene();
    let cube = s.pair.time1();
    let mut g = c.benchmark_group("unmixing");
    g.sample_size(10);
    g.bench_function("fcls_cube_64x64x32", |b| {
        b.iter(|| fcls_cube(black_box(&s.endmembers), black_box(cube)).unwrap())
    });
    let lin = fcls_cube(&s.endmembers, cube).unwrap();
    g.bench_function("bfm_cube_64x64x32", |b| {
        b.iter(|| bfm_cube_from(&s.endmembers, cube, black_box(&lin), &BfmOptions::default()).unwrap())
    });
    g.finish();
}

fn affinity_fill(c: &mut Criterion) {
    let s = scene();
    let pair = affinity(&s);
    let n = pair.matrix_size();
    let mut buf = vec![0f32; n * n];
    c.bench_function("affinity_matrix_n40", |b| {
        let mut p = 0;
        b.iter(|| {
            pair.fill_sample(p % pair.sample_count(), black_box(&mut buf));
            p += 1;
        })
    });
}

fn train_step(c: &mut Criterion) {
    let s = scene();
    let pair = affinity(&s);
    let n = pair.matrix_size();
    let batch = 96;
    let mut x = vec![0f32; batch * n * n];
    for (i, chunk) in x.chunks_mut(n * n).enumerate() {
        pair.fill_sample(i * 37 % pair.sample_count(), chunk);
    }
    let x = Tensor::from_vec(&[batch, 1, n, n], x).unwrap();
    let labels: Vec<u8> = (0..batch).map(|i| u8::from(i % 3 == 0)).collect();
    let net = Network::<f32>::new(Architecture::new(32, 4).unwrap(), 0);

    let mut g = c.benchmark_group("network");
    g.sample_size(10);
    g.bench_function("forward_backward_batch96_n40", |b| {
        b.iter(|| {
            let (logits, cache) = net.forward_train(&x, None).unwrap();
            let (_, d) = softmax_cross_entropy(&logits, &labels, None).unwrap();
            black_box(net.backward(&cache, &d, false))
        })
    });
    g.bench_function("adagrad_step", |b| {
        let (logits, cache) = net.forward_train(&x, None).unwrap();
        let (_, d) = softmax_cross_entropy(&logits, &labels, None).unwrap();
        let (grads, _) = net.backward(&cache, &d, false);
        b.iter_batched(
            || (net.clone(), AdagradState::zeros_like(&net.params())),
            |(mut net, mut state)| {
                hsicd_core::nn::adagrad_step(&mut net.params_mut(), &grads.tensors, &mut state, 1e-4, 1e-8)
                    .unwrap();
                net
            },
            BatchSize::LargeInput,
        )
    });
    g.finish();
}

criterion_group!(benches, unmixing, affinity_fill, train_step);
criterion_main!(benches);
