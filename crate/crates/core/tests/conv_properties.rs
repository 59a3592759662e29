use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use repblocks::init::random_kernel;
use repblocks::tensor::{
    concat_channels, conv2d, conv2d_oracle, conv2d_serial, upsample_nearest2x, ConvParams, Dims,
    Tensor4,
};

#[derive(Debug, Clone)]
struct Shape {
    n: usize,
    ic: usize,
    oc: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    bias: bool,
    seed: u64,
}

fn shapes() -> impl Strategy<Value = Shape> {
    (1usize..=2, 1usize..=6, 1usize..=6, 1usize..=11, 1usize..=11, prop_oneof![Just(1usize), Just(3)], 1usize..=2, 0usize..=1, any::<bool>(), any::<u64>())
        .prop_filter("output must be non-empty", |&(_, _, _, h, w, k, _, p, _, _)| {
            h + 2 * p >= k && w + 2 * p >= k
        })
        .prop_map(|(n, ic, oc, h, w, k, stride, pad, bias, seed)| Shape { n, ic, oc, h, w, k, stride, pad, bias, seed })
}

fn make(s: &Shape) -> (Tensor4<f64>, ConvParams<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let x = Tensor4::random(Dims::new(s.n, s.ic, s.h, s.w), &mut rng);
    let bias = s.bias.then(|| (0..s.oc).map(|o| 0.25 * o as f64 - 0.5).collect());
    let p = ConvParams::new(random_kernel(s.oc, s.ic, s.k, 1.0, &mut rng), bias, s.stride, s.pad).unwrap();
    (x, p)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(160))]

    #[test]
    fn fast_paths_match_oracle_bitwise(s in shapes()) {
        let (x, p) = make(&s);
        let want = conv2d_oracle(&x, &p).unwrap();
        prop_assert!(conv2d(&x, &p).unwrap().bit_eq(&want));
        prop_assert!(conv2d_serial(&x, &p).unwrap().bit_eq(&want));
    }

    #[test]
    fn output_dims_formula(s in shapes()) {
        let (x, p) = make(&s);
        let y = conv2d(&x, &p).unwrap().dims();
        prop_assert_eq!(y, Dims::new(s.n, s.oc, (s.h + 2 * s.pad - s.k) / s.stride + 1, (s.w + 2 * s.pad - s.k) / s.stride + 1));
    }

    #[test]
    fn linear_in_input_f32(s in shapes(), a in -2.0f32..2.0, b in -2.0f32..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(s.seed ^ 0x5eed);
        let d = Dims::new(s.n, s.ic, s.h, s.w);
        let x = Tensor4::<f32>::random(d, &mut rng);
        let y = Tensor4::<f32>::random(d, &mut rng);
        let p = ConvParams::new(random_kernel(s.oc, s.ic, s.k, 1.0, &mut rng), None, s.stride, s.pad).unwrap();
        let mix = Tensor4::from_fn(d, |n, c, i, j| a * x.at(n, c, i, j) + b * y.at(n, c, i, j));
        let lhs = conv2d(&mix, &p).unwrap();
        let (cx, cy) = (conv2d(&x, &p).unwrap(), conv2d(&y, &p).unwrap());
        let rhs = Tensor4::from_fn(lhs.dims(), |n, c, i, j| a * cx.at(n, c, i, j) + b * cy.at(n, c, i, j));
        let dev = lhs.max_abs_diff(&rhs).unwrap();
        prop_assert!(dev <= 1e-5 * rhs.max_abs().max(1.0), "deviation {}", dev);
    }

    #[test]
    fn concat_then_slice_recovers(c1 in 1usize..5, c2 in 1usize..5, h in 1usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Tensor4::<f64>::random(Dims::new(2, c1, h, h + 1), &mut rng);
        let b = Tensor4::<f64>::random(Dims::new(2, c2, h, h + 1), &mut rng);
        let cat = concat_channels(&a, &b).unwrap();
        prop_assert!(cat.slice_channels(0, c1).unwrap().bit_eq(&a));
        prop_assert!(cat.slice_channels(c1, c2).unwrap().bit_eq(&b));
    }

    #[test]
    fn upsample_replicates(c in 1usize..4, h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
        let x = Tensor4::<f64>::random(Dims::new(1, c, h, w), &mut ChaCha8Rng::seed_from_u64(seed));
        let y = upsample_nearest2x(&x);
        prop_assert_eq!(y.dims(), Dims::new(1, c, 2 * h, 2 * w));
        for ch in 0..c {
            for i in 0..2 * h {
                for j in 0..2 * w {
                    prop_assert_eq!(y.at(0, ch, i, j), x.at(0, ch, i / 2, j / 2));
                }
            }
        }
    }
}

#[test]
fn padded_taps_are_skipped_not_multiplied() {
    // a NaN-free input with infinite weights on border taps: skipping padding
    // must never produce inf * 0
    let x = Tensor4::<f64>::filled(Dims::new(1, 1, 1, 1), 2.0);
    let mut w = vec![f64::INFINITY; 9];
    w[4] = 3.0;
    let p = ConvParams::new(repblocks::tensor::Kernel::new(1, 1, 3, w).unwrap(), None, 1, 1).unwrap();
    assert_eq!(conv2d(&x, &p).unwrap().data(), &[6.0]);
    assert_eq!(conv2d_oracle(&x, &p).unwrap().data(), &[6.0]);
}
