use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use pcda::encoder::SegModel;
use pcda::exec::Exec;
use pcda::neighbors::local_context_with;
use pcda::projection::{project_points_with, sample_features_with};
use pcda::synth::{gen_domain, DomainParams};
use pcda::training::evaluate;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const MODES: [(&str, Exec); 2] = [
    ("sequential", Exec::Sequential),
    ("parallel", Exec::Parallel),
];

fn bench(c: &mut Criterion) {
    let scenes = gen_domain(&DomainParams::source(), 8, 0, Exec::Sequential);
    let scene = &scenes[0];
    let view = &scene.views[0];
    let uv: Vec<[f64; 2]> = project_points_with(&scene.cloud, &view.calib, Exec::Sequential)
        .uv
        .into_iter()
        .filter(|q| q[0] >= 0.0 && q[1] >= 0.0 && q[0] <= 95.0 && q[1] <= 95.0)
        .collect();
    let model = SegModel::init(64, 16, 6, &mut ChaCha8Rng::seed_from_u64(0));

    let mut g = c.benchmark_group("exec");
    g.sample_size(20);
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::new("project", name), &exec, |b, &e| {
            b.iter(|| project_points_with(black_box(&scene.cloud), &view.calib, e))
        });
        g.bench_with_input(BenchmarkId::new("sample_features", name), &exec, |b, &e| {
            b.iter(|| sample_features_with(&view.features, black_box(&uv), e).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("local_context", name), &exec, |b, &e| {
            b.iter(|| local_context_with(black_box(&scene.cloud), 8, e))
        });
        g.bench_with_input(BenchmarkId::new("evaluate", name), &exec, |b, &e| {
            b.iter(|| evaluate(&model, black_box(&scenes), e).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
