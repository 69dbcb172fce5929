use criterion::{black_box, criterion_group, criterion_main, Criterion};
use ndarray::Array3;
use petseg::edt::distance_transform;
use petseg::guidance::render_clicks;
use petseg::nn::Tensor;
use petseg::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_mask(shape: usize, p: f64, seed: u64) -> Array3<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array3::from_shape_simple_fn((shape, shape, shape), || rng.gen_bool(p))
}

fn guidance(c: &mut Criterion) {
    let grid = ImageGrid::with_shape_spacing([64; 3], [3.0; 3]).unwrap();
    let mut clicks = ClickList::new(grid);
    for i in 0..10 {
        clicks.push(ClickKind::Foreground, [6 * i + 3, 5 * i + 7, 60 - 5 * i]).unwrap();
    }
    let cfg = GuidanceConfig::default();
    c.bench_function("render_clicks 64^3 x10", |b| {
        b.iter(|| render_clicks(black_box(&clicks), ClickKind::Foreground, &cfg).unwrap())
    });
}

fn edt(c: &mut Criterion) {
    let mask = random_mask(64, 0.02, 1).mapv(|v| !v);
    c.bench_function("distance_transform 64^3", |b| b.iter(|| distance_transform(black_box(&mask), [3.0; 3])));
}

fn metrics(c: &mut Criterion) {
    let grid = ImageGrid::with_shape_spacing([64; 3], [3.0; 3]).unwrap();
    let p = random_mask(64, 0.1, 2);
    let g = random_mask(64, 0.1, 3);
    c.bench_function("dice 64^3", |b| b.iter(|| dice(black_box(p.view()), g.view()).unwrap()));
    c.bench_function("fpv 64^3", |b| {
        b.iter(|| false_positive_volume(black_box(p.view()), g.view(), &grid, Connectivity::TwentySix).unwrap())
    });
}

fn forward(c: &mut Criterion) {
    let net = build_network(&NetworkConfig {
        n_stages: 3,
        features_per_stage: vec![8, 16, 32],
        blocks_per_stage: vec![1, 1, 1],
        patch_size: [32; 3],
        ..NetworkConfig::default()
    })
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = Tensor::from_vec([1, 4, 32, 32, 32], (0..4 * 32 * 32 * 32).map(|_| rng.gen_range(-1.0..1.0)).collect());
    let mut group = c.benchmark_group("segnet");
    group.sample_size(10);
    group.bench_function("forward 32^3", |b| b.iter(|| net.forward_lesion(black_box(&x))));
    group.finish();
}

criterion_group!(benches, guidance, edt, metrics, forward);
criterion_main!(benches);
