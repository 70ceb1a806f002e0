use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use pearl_bench::filled;
use pearl_core::Graph;
use std::hint::black_box;

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for n in [64, 128, 256] {
        let (a, b) = (filled(n, n, 1), filled(n, n, 2));
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| {
                let mut g = Graph::new();
                let x = g.insert(&a);
                let y = g.insert(&b);
                black_box(g.matmul(x, y).unwrap());
            })
        });
    }
    group.finish();
}

fn attention(c: &mut Criterion) {
    let mut group = c.benchmark_group("causal_attention_fwd_bwd");
    for t in [32, 96, 192] {
        let qkv = filled(t, 3 * 64, 7);
        group.bench_with_input(BenchmarkId::from_parameter(t), &t, |bench, _| {
            bench.iter(|| {
                let mut g = Graph::new();
                let x = g.insert(&qkv);
                let y = g.causal_attention(x, 4).unwrap();
                let s = g.sum(y);
                g.backward(s).unwrap();
                black_box(g.grad(x));
            })
        });
    }
    group.finish();
}

criterion_group!(benches, matmul, attention);
criterion_main!(benches);
