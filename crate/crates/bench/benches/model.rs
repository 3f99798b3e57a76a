use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use dglr::losses::LossWeights;
use dglr::{compute_gradients, forward_all, reconstruct_adjacency};
use dglr_bench::fixture;
use ndarray::{s, Array2};

fn forward(c: &mut Criterion) {
    let mut group = c.benchmark_group("forward_all");
    for nodes in [12, 20, 40] {
        let (data, params, graph) = fixture(nodes, 60);
        let x = data.features.slice(s![..data.train_end, .., ..]);
        group.bench_with_input(BenchmarkId::from_parameter(nodes), &nodes, |b, _| {
            b.iter(|| forward_all(black_box(&params), x, &graph.current).unwrap())
        });
    }
    group.finish();
}

fn gradients(c: &mut Criterion) {
    let mut group = c.benchmark_group("compute_gradients");
    group.sample_size(20);
    for nodes in [12, 20] {
        let (data, params, graph) = fixture(nodes, 60);
        group.bench_with_input(BenchmarkId::from_parameter(nodes), &nodes, |b, _| {
            b.iter(|| {
                compute_gradients(black_box(&params), &graph, &data, LossWeights::ONES).unwrap()
            })
        });
    }
    group.finish();
}

fn reconstruction(c: &mut Criterion) {
    let mut group = c.benchmark_group("reconstruct_adjacency");
    for nodes in [12, 50, 200] {
        let h = Array2::from_shape_fn((nodes, 10), |(i, k)| ((i * 10 + k) as f64 * 0.37).sin());
        group.bench_with_input(BenchmarkId::from_parameter(nodes), &h, |b, h| {
            b.iter(|| reconstruct_adjacency(black_box(h), None).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, forward, gradients, reconstruction);
criterion_main!(benches);
