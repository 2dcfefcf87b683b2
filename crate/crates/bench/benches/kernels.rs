use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ifgmi_core::attack::project_l1_ball;
use ifgmi_core::models::{Generator, GeneratorArch};
use ifgmi_core::{metrics, seed, Graph, Tensor};
use std::hint::black_box;

fn conv(c: &mut Criterion) {
    let mut rng = seed::rng(1);
    let mut group = c.benchmark_group("conv3x3");
    for (cin, cout, size) in [(16, 32, 32), (64, 64, 8)] {
        let x = Tensor::<f32>::randn(&[16, cin, size, size], 1.0, &mut rng);
        let w = Tensor::<f32>::randn(&[cout, cin, 3, 3], 0.1, &mut rng);
        group.bench_with_input(BenchmarkId::from_parameter(format!("{cin}->{cout}@{size}")), &(x, w), |b, (x, w)| {
            b.iter(|| {
                let g = Graph::new();
                black_box(g.constant(x.clone()).conv2d(g.constant(w.clone())).unwrap().value())
            })
        });
    }
    group.finish();
}

fn synthesis(c: &mut Criterion) {
    let gen = Generator::<f32>::new(GeneratorArch::default(), 3);
    let w = gen.map_latent(&Generator::<f32>::sample_z(20, &mut seed::rng(2))).unwrap();
    c.bench_function("synthesize_20", |b| b.iter(|| black_box(gen.synthesize(&w).unwrap())));
}

fn projection(c: &mut Criterion) {
    let mut rng = seed::rng(3);
    let mut group = c.benchmark_group("project_l1_ball");
    for n in [64usize, 4096, 16384] {
        let x = Tensor::<f32>::randn(&[n], 1.0, &mut rng);
        let center = Tensor::<f32>::zeros(&[n]);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, &n| {
            b.iter(|| {
                let mut y = x.data().to_vec();
                project_l1_ball(&mut y, center.data(), 0.1 * n as f64);
                black_box(y)
            })
        });
    }
    group.finish();
}

fn fid(c: &mut Criterion) {
    let mut rng = seed::rng(4);
    let a = Tensor::<f32>::randn(&[1000, 64], 1.0, &mut rng);
    let b = Tensor::<f32>::randn(&[1000, 64], 1.2, &mut rng);
    c.bench_function("fid_1000x64", |bch| bch.iter(|| black_box(metrics::fid(&a, &b).unwrap())));
    c.bench_function("prdc_1000x64_k3", |bch| bch.iter(|| black_box(metrics::prdc(&a, &b, 3).unwrap())));
}

criterion_group!(benches, conv, synthesis, projection, fid);
criterion_main!(benches);
