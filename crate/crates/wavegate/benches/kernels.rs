//! Kernel benchmarks: the parallel (rayon) dispatch versus the sequential
//! fallback, plus the lag-mixture scorer and the wavelet transform.
//!
//! Run `cargo bench` for the default (parallel) feature set and
//! `cargo bench --no-default-features` for the sequential lane.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use wavegate::rng::SplitMix64;
use wavegate::spectral::{default_scales, morlet_cwt};
use wavegate::tensor::kernels::{mm_nn, mm_nn_seq, mm_nt, mm_nt_seq};
use wavegate::tensor::{Graph, Tensor};

fn bench_matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for &n in &[64usize, 128, 256] {
        let mut rng = SplitMix64::new(1);
        let a = Tensor::<f32>::randn(vec![n, n], 1.0, &mut rng);
        let b = Tensor::<f32>::randn(vec![n, n], 1.0, &mut rng);
        group.bench_with_input(BenchmarkId::new("nn_dispatch", n), &n, |bench, _| {
            bench.iter(|| {
                let mut out = vec![0.0f32; n * n];
                mm_nn(&a.data, &b.data, &mut out, 1, n, n, n, true);
                out
            })
        });
        group.bench_with_input(BenchmarkId::new("nn_seq", n), &n, |bench, _| {
            bench.iter(|| {
                let mut out = vec![0.0f32; n * n];
                mm_nn_seq(&a.data, &b.data, &mut out, 1, n, n, n, true);
                out
            })
        });
        group.bench_with_input(BenchmarkId::new("nt_dispatch", n), &n, |bench, _| {
            bench.iter(|| {
                let mut out = vec![0.0f32; n * n];
                mm_nt(&a.data, &b.data, &mut out, 1, n, n, n, true);
                out
            })
        });
        group.bench_with_input(BenchmarkId::new("nt_seq", n), &n, |bench, _| {
            bench.iter(|| {
                let mut out = vec![0.0f32; n * n];
                mm_nt_seq(&a.data, &b.data, &mut out, 1, n, n, n, true);
                out
            })
        });
    }
    group.finish();
}

fn bench_conv_scores(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv_scores");
    for &l in &[4usize, 8] {
        let mut rng = SplitMix64::new(2);
        let (b, h, t, dh) = (1, 4, 128, 16);
        let q = Tensor::<f32>::randn(vec![b, h, t, dh], 1.0, &mut rng);
        let k = Tensor::<f32>::randn(vec![b, h, t, dh], 1.0, &mut rng);
        group.bench_with_input(BenchmarkId::from_parameter(l), &l, |bench, _| {
            bench.iter(|| {
                let mut g: Graph<f32> = Graph::new();
                let qv = g.constant(q.clone());
                let kv = g.constant(k.clone());
                let lam = g.constant(Tensor::zeros(vec![2 * l + 1]));
                let w = g.softmax(lam);
                g.conv_scores(qv, kv, w, l)
            })
        });
    }
    group.finish();
}

fn bench_cwt(c: &mut Criterion) {
    let t = 256;
    let sig: Vec<f64> = (0..t).map(|i| (0.3 * i as f64).sin()).collect();
    let scales = default_scales(t);
    c.bench_function("morlet_cwt_256", |bench| {
        bench.iter(|| morlet_cwt(&sig, &scales))
    });
}

criterion_group!(benches, bench_matmul, bench_conv_scores, bench_cwt);
criterion_main!(benches);
