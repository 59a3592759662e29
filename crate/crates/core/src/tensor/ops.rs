use crate::error::{Error, Result};

use super::{BatchNormParams, Dims, Element, Tensor4};

/// `y = gamma * (x - mean) / sqrt(var + eps) + beta`, per channel.
pub fn batchnorm_infer<T: Element>(
    input: &Tensor4<T>,
    p: &BatchNormParams<T>,
) -> Result<Tensor4<T>> {
    p.validate()?;
    let dims = input.dims();
    if dims.c != p.channels() {
        return Err(Error::ShapeMismatch {
            op: "batchnorm",
            dim: "channels",
            expected: p.channels(),
            actual: dims.c,
        });
    }
    let plane = dims.plane();
    let mut data = Vec::with_capacity(dims.len());
    for (i, chunk) in input.data().chunks(plane).enumerate() {
        let c = i % dims.c;
        let denom = p.running_var[c] + p.eps;
        if !(denom > T::zero()) {
            return Err(Error::NonPositiveVariance {
                channel: c,
                value: denom.as_f64(),
            });
        }
        let sd = denom.sqrt();
        data.extend(
            chunk
                .iter()
                .map(|&x| p.gamma[c] * (x - p.running_mean[c]) / sd + p.beta[c]),
        );
    }
    Ok(Tensor4::from_parts(dims, data))
}

pub fn relu<T: Element>(input: &Tensor4<T>) -> Tensor4<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn add<T: Element>(a: &Tensor4<T>, b: &Tensor4<T>) -> Result<Tensor4<T>> {
    check_same(a.dims(), b.dims(), "add")?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    Ok(Tensor4::from_parts(a.dims(), data))
}

fn check_same(a: Dims, b: Dims, op: &'static str) -> Result<()> {
    for (dim, x, y) in [
        ("batch", a.n, b.n),
        ("channels", a.c, b.c),
        ("height", a.h, b.h),
        ("width", a.w, b.w),
    ] {
        if x != y {
            return Err(Error::ShapeMismatch {
                op,
                dim,
                expected: x,
                actual: y,
            });
        }
    }
    Ok(())
}

/// Concatenates along the channel axis, `a`'s channels first.
pub fn concat_channels<T: Element>(a: &Tensor4<T>, b: &Tensor4<T>) -> Result<Tensor4<T>> {
    let (da, db) = (a.dims(), b.dims());
    for (dim, x, y) in [("batch", da.n, db.n), ("height", da.h, db.h), ("width", da.w, db.w)] {
        if x != y {
            return Err(Error::ShapeMismatch {
                op: "concat",
                dim,
                expected: x,
                actual: y,
            });
        }
    }
    let dims = Dims { c: da.c + db.c, ..da };
    let (sa, sb) = (da.c * da.plane(), db.c * db.plane());
    let mut data = Vec::with_capacity(dims.len());
    for n in 0..da.n {
        data.extend_from_slice(&a.data()[n * sa..(n + 1) * sa]);
        data.extend_from_slice(&b.data()[n * sb..(n + 1) * sb]);
    }
    Ok(Tensor4::from_parts(dims, data))
}

/// Nearest-neighbour upsampling by a factor of two in both spatial axes.
pub fn upsample_nearest2x<T: Element>(input: &Tensor4<T>) -> Tensor4<T> {
    let d = input.dims();
    let out = Dims {
        h: d.h * 2,
        w: d.w * 2,
        ..d
    };
    Tensor4::from_fn(out, |n, c, y, x| input.at(n, c, y / 2, x / 2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_bn(ch: usize, rng: &mut ChaCha8Rng) -> BatchNormParams<f64> {
        BatchNormParams {
            gamma: (0..ch).map(|_| rng.random_range(-2.0..2.0)).collect(),
            beta: (0..ch).map(|_| rng.random_range(-1.0..1.0)).collect(),
            running_mean: (0..ch).map(|_| rng.random_range(-1.0..1.0)).collect(),
            running_var: (0..ch).map(|_| rng.random_range(0.1..3.0)).collect(),
            eps: 1e-5,
        }
    }

    #[test]
    fn identity_bn_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = Tensor4::<f64>::random(Dims::new(2, 3, 4, 4), &mut rng);
        let y = batchnorm_infer(&x, &BatchNormParams::identity(3)).unwrap();
        assert!(y.max_abs_diff(&x).unwrap() < 1e-15);
    }

    #[test]
    fn zero_gamma_gives_beta() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor4::<f64>::random(Dims::new(1, 3, 4, 4), &mut rng);
        let mut p = rand_bn(3, &mut rng);
        p.gamma = vec![0.0; 3];
        let y = batchnorm_infer(&x, &p).unwrap();
        for c in 0..3 {
            for yy in 0..4 {
                for xx in 0..4 {
                    assert_eq!(y.at(0, c, yy, xx), p.beta[c]);
                }
            }
        }
    }

    #[test]
    fn bn_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = Tensor4::<f64>::random(Dims::new(2, 5, 3, 4), &mut rng);
        let p = rand_bn(5, &mut rng);
        let y = batchnorm_infer(&x, &p).unwrap();
        for n in 0..2 {
            for c in 0..5 {
                for yy in 0..3 {
                    for xx in 0..4 {
                        let v = x.at(n, c, yy, xx);
                        let expect = p.gamma[c] * (v - p.running_mean[c])
                            / (p.running_var[c] + p.eps).sqrt()
                            + p.beta[c];
                        assert_eq!(y.at(n, c, yy, xx), expect);
                    }
                }
            }
        }
    }

    #[test]
    fn bn_errors() {
        let x = Tensor4::<f64>::zeros(Dims::new(1, 3, 2, 2));
        assert!(matches!(
            batchnorm_infer(&x, &BatchNormParams::identity(4)),
            Err(Error::ShapeMismatch { dim: "channels", .. })
        ));
        let mut p = BatchNormParams::<f64>::identity(3);
        p.running_var[1] = -1.0;
        assert!(matches!(
            batchnorm_infer(&x, &p),
            Err(Error::NonPositiveVariance { channel: 1, .. })
        ));
    }

    #[test]
    fn relu_cases() {
        let x = Tensor4::new(Dims::new(1, 1, 1, 3), vec![-1.0f64, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        let neg = Tensor4::<f64>::filled(Dims::new(1, 2, 2, 2), -3.0);
        assert!(relu(&neg).data().iter().all(|v| *v == 0.0));
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let r = Tensor4::<f64>::random(Dims::new(1, 2, 5, 5), &mut rng);
        assert!(relu(&relu(&r)).bit_eq(&relu(&r)));
    }

    #[test]
    fn add_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let d = Dims::new(2, 3, 4, 5);
        let a = Tensor4::<f64>::random(d, &mut rng);
        let b = Tensor4::<f64>::random(d, &mut rng);
        assert!(add(&a, &Tensor4::zeros(d)).unwrap().bit_eq(&a));
        let ab = add(&a, &b).unwrap();
        assert!(ab.bit_eq(&add(&b, &a).unwrap()));
        for i in 0..d.len() {
            assert_eq!(ab.data()[i], a.data()[i] + b.data()[i]);
        }
        let bad = Tensor4::<f64>::zeros(Dims::new(2, 3, 4, 6));
        assert!(matches!(
            add(&a, &bad),
            Err(Error::ShapeMismatch { dim: "width", .. })
        ));
    }

    #[test]
    fn concat_preserves_order_and_slices_back() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let a = Tensor4::<f64>::random(Dims::new(2, 2, 3, 3), &mut rng);
        let b = Tensor4::<f64>::random(Dims::new(2, 3, 3, 3), &mut rng);
        let c = concat_channels(&a, &b).unwrap();
        assert_eq!(c.dims().c, 5);
        // index-arithmetic oracle
        for n in 0..2 {
            for ch in 0..5 {
                for y in 0..3 {
                    for x in 0..3 {
                        let expect = if ch < 2 { a.at(n, ch, y, x) } else { b.at(n, ch - 2, y, x) };
                        assert_eq!(c.at(n, ch, y, x), expect);
                    }
                }
            }
        }
        assert!(c.slice_channels(0, 2).unwrap().bit_eq(&a));
        assert!(c.slice_channels(2, 3).unwrap().bit_eq(&b));
        let bad = Tensor4::<f64>::zeros(Dims::new(2, 1, 4, 3));
        assert!(matches!(
            concat_channels(&a, &bad),
            Err(Error::ShapeMismatch { dim: "height", .. })
        ));
    }

    #[test]
    fn upsample_repeats_pixels() {
        let x = Tensor4::new(Dims::new(1, 1, 1, 2), vec![1.0f64, 2.0]).unwrap();
        let y = upsample_nearest2x(&x);
        assert_eq!(y.dims(), Dims::new(1, 1, 2, 4));
        assert_eq!(y.data(), &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
    }
}
