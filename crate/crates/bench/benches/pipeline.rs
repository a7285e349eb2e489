use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use freqdeno::bands::PartitionSpec;
use freqdeno::{bpsa, dft2_forward, dft2_inverse, pate, DenoConfig, Modality, SqrtScaling};
use freqdeno_bench::{feature_map, modality, module, plane, SIZES};
use std::hint::black_box;

fn transforms(c: &mut Criterion) {
    let mut g = c.benchmark_group("dft2");
    for (ch, h, w) in SIZES {
        let x = feature_map(ch, h, w);
        let id = format!("{ch}x{h}x{w}");
        g.bench_with_input(BenchmarkId::new("forward", &id), &x, |b, x| b.iter(|| dft2_forward(black_box(x)).unwrap()));
        let s = dft2_forward(&x).unwrap();
        g.bench_with_input(BenchmarkId::new("inverse", &id), &s, |b, s| b.iter(|| dft2_inverse(black_box(s)).unwrap()));
    }
    g.finish();
}

fn attention(c: &mut Criterion) {
    let mut g = c.benchmark_group("attention");
    let side = 32;
    for stride in [2, 4, 8] {
        let spec = PartitionSpec::square(stride, side, side).unwrap();
        let (a, p) = (modality(stride * stride), modality(stride * stride));
        let (am, pm) = (plane(side, side), plane(side, side));
        let sc = SqrtScaling::GroupCount;
        g.bench_function(BenchmarkId::new("bpsa", stride), |b| {
            b.iter(|| bpsa(black_box(&am), spec, &a, sc, Modality::Amplitude).unwrap())
        });
        g.bench_function(BenchmarkId::new("pate", stride), |b| {
            b.iter(|| pate(black_box(&am), &pm, spec, &a, &p, sc, true).unwrap())
        });
    }
    g.finish();
}

fn module_forward(c: &mut Criterion) {
    let mut g = c.benchmark_group("module");
    for (ch, h, w) in SIZES {
        let x = feature_map(ch, h, w);
        let m = module(DenoConfig::default());
        g.bench_with_input(BenchmarkId::new("forward", format!("{ch}x{h}x{w}")), &x, |b, x| {
            b.iter(|| m.forward(black_box(x)).unwrap())
        });
        let mut session = m.session();
        session.forward(&x).unwrap();
        let up = feature_map(ch, h, w);
        g.bench_with_input(BenchmarkId::new("backward", format!("{ch}x{h}x{w}")), &up, |b, up| {
            b.iter(|| session.backward(black_box(up)).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, transforms, attention, module_forward);
criterion_main!(benches);
