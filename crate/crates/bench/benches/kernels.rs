use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use pedet_core::align::{build_affine, grid_sample_3d_forward, Orientation};
use pedet_core::nn::conv::conv3d_forward;
use pedet_core::proposal::{iou, nms_3d};
use pedet_core::{BoxCube, Candidate, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut group = c.benchmark_group("conv3d_forward");
    for (ci, co, n) in [(1, 8, 48), (16, 32, 24), (32, 64, 12)] {
        let x = random(&[ci, n, n, n], &mut rng);
        let w = random(&[co, ci, 3, 3, 3], &mut rng);
        let b = random(&[co], &mut rng);
        group.bench_with_input(
            BenchmarkId::from_parameter(format!("{ci}x{n}^3->{co}")),
            &(),
            |bench, _| bench.iter(|| conv3d_forward(&x, &w, &b, 1, 1).unwrap()),
        );
    }
    group.finish();
}

fn boxes(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cands: Vec<Candidate> = (0..2000)
        .map(|_| Candidate {
            cube: BoxCube::new(
                std::array::from_fn(|_| rng.random_range(0.0..96.0)),
                rng.random_range(5.0..60.0),
            ),
            probability: rng.random_range(0.0..1.0),
        })
        .collect();
    c.bench_function("iou_1000_pairs", |b| {
        b.iter(|| {
            cands
                .windows(2)
                .take(1000)
                .map(|w| iou(&w[0].cube, &w[1].cube))
                .sum::<f64>()
        })
    });
    c.bench_function("nms_2000", |b| b.iter(|| nms_3d(&cands, 0.1).len()));
}

fn grid_sample(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&[64, 24, 24, 24], &mut rng);
    let o = Orientation::from_columns([[0.0, 0.6, 0.8], [0.0, 0.8, -0.6], [1.0, 0.0, 0.0]]);
    let a = build_affine(&o, [0.1, -0.2, 0.05], [0.3; 3]);
    c.bench_function("grid_sample_64ch_14^3", |b| {
        b.iter(|| grid_sample_3d_forward(&x, &a, [14; 3]).unwrap())
    });
}

criterion_group!(benches, conv, boxes, grid_sample);
criterion_main!(benches);
