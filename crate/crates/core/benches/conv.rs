use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use repblocks::init::random_kernel;
use repblocks::tensor::{conv2d, conv2d_serial, ConvParams, Dims, Tensor4};

// (in, out, hw, k, stride)
const SHAPES: [(usize, usize, usize, usize, usize); 4] = [
    (16, 16, 64, 3, 1),
    (64, 64, 32, 3, 1),
    (64, 128, 32, 3, 2),
    (128, 128, 16, 1, 1),
];

fn bench_conv(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv2d");
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for (ic, oc, hw, k, s) in SHAPES {
        let x = Tensor4::<f32>::random(Dims::new(1, ic, hw, hw), &mut rng);
        let p = ConvParams::new(random_kernel(oc, ic, k, 1.0, &mut rng), Some(vec![0.1; oc]), s, k / 2).unwrap();
        let out = p.output_dims(x.dims()).unwrap();
        group.throughput(Throughput::Elements((2 * k * k * ic * out.len()) as u64));
        let id = format!("{ic}x{oc}_{hw}_k{k}_s{s}");
        group.bench_with_input(BenchmarkId::new("parallel", &id), &(&x, &p), |b, (x, p)| {
            b.iter(|| conv2d(x, p).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("serial", &id), &(&x, &p), |b, (x, p)| {
            b.iter(|| conv2d_serial(x, p).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench_conv);
criterion_main!(benches);
