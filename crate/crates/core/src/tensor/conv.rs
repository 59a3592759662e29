use crate::error::{Error, Result};

use super::{Dims, Element, Tensor4};

/// Convolution weights laid out as `[out_ch, in_ch, k, k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel<T> {
    pub out_ch: usize,
    pub in_ch: usize,
    pub k: usize,
    pub data: Vec<T>,
}

impl<T: Element> Kernel<T> {
    pub fn new(out_ch: usize, in_ch: usize, k: usize, data: Vec<T>) -> Result<Self> {
        if out_ch == 0 || in_ch == 0 {
            return Err(Error::InvalidShape(format!(
                "kernel needs positive channels, got [{out_ch}, {in_ch}]"
            )));
        }
        if k != 1 && k != 3 {
            return Err(Error::Unsupported(format!("kernel size {k} (only 1 and 3)")));
        }
        if data.len() != out_ch * in_ch * k * k {
            return Err(Error::InvalidShape(format!(
                "kernel [{out_ch}, {in_ch}, {k}, {k}] needs {} values, got {}",
                out_ch * in_ch * k * k,
                data.len()
            )));
        }
        Ok(Kernel {
            out_ch,
            in_ch,
            k,
            data,
        })
    }

    pub fn zeros(out_ch: usize, in_ch: usize, k: usize) -> Self {
        Kernel {
            out_ch,
            in_ch,
            k,
            data: vec![T::zero(); out_ch * in_ch * k * k],
        }
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.out_ch, self.in_ch, self.k, self.k]
    }

    #[inline]
    pub fn index(&self, o: usize, i: usize, ky: usize, kx: usize) -> usize {
        ((o * self.in_ch + i) * self.k + ky) * self.k + kx
    }

    #[inline]
    pub fn at(&self, o: usize, i: usize, ky: usize, kx: usize) -> T {
        self.data[self.index(o, i, ky, kx)]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// The `k * k * in_ch` weights feeding output channel `o`.
    pub fn filter(&self, o: usize) -> &[T] {
        let len = self.in_ch * self.k * self.k;
        &self.data[o * len..(o + 1) * len]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<T> {
    pub weight: Kernel<T>,
    pub bias: Option<Vec<T>>,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl<T: Element> ConvParams<T> {
    pub fn new(
        weight: Kernel<T>,
        bias: Option<Vec<T>>,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let p = ConvParams {
            weight,
            bias,
            stride,
            padding,
            groups: 1,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 {
            return Err(Error::InvalidShape("stride must be positive".into()));
        }
        if self.groups != 1 {
            return Err(Error::Unsupported(format!("groups = {}", self.groups)));
        }
        if let Some(bias) = &self.bias {
            if bias.len() != self.weight.out_ch {
                return Err(Error::ShapeMismatch {
                    op: "conv2d",
                    dim: "bias length",
                    expected: self.weight.out_ch,
                    actual: bias.len(),
                });
            }
        }
        Ok(())
    }

    pub fn in_ch(&self) -> usize {
        self.weight.in_ch * self.groups
    }

    pub fn out_ch(&self) -> usize {
        self.weight.out_ch
    }

    pub fn k(&self) -> usize {
        self.weight.k
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.as_ref().map_or(0, Vec::len)
    }

    /// Output dims for an input of `dims`, checking every precondition.
    pub fn output_dims(&self, dims: Dims) -> Result<Dims> {
        self.validate()?;
        if dims.c != self.in_ch() {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                dim: "input channels",
                expected: self.in_ch(),
                actual: dims.c,
            });
        }
        let k = self.k();
        let (ph, pw) = (dims.h + 2 * self.padding, dims.w + 2 * self.padding);
        if ph < k {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                dim: "padded height",
                expected: k,
                actual: ph,
            });
        }
        if pw < k {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                dim: "padded width",
                expected: k,
                actual: pw,
            });
        }
        Ok(Dims {
            n: dims.n,
            c: self.out_ch(),
            h: (ph - k) / self.stride + 1,
            w: (pw - k) / self.stride + 1,
        })
    }
}

/// Inference-mode batch normalization parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormParams<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub eps: T,
}

impl<T: Element> BatchNormParams<T> {
    pub const DEFAULT_EPS: f64 = 1e-5;

    /// gamma = 1, beta = 0, mean = 0, var = 1 - eps: the identity map.
    pub fn identity(ch: usize) -> Self {
        let eps = T::from_f64(Self::DEFAULT_EPS);
        BatchNormParams {
            gamma: vec![T::one(); ch],
            beta: vec![T::zero(); ch],
            running_mean: vec![T::zero(); ch],
            running_var: vec![T::one() - eps; ch],
            eps,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn param_count(&self) -> usize {
        4 * self.channels()
    }

    pub fn validate(&self) -> Result<()> {
        let ch = self.channels();
        for (dim, len) in [
            ("beta length", self.beta.len()),
            ("running_mean length", self.running_mean.len()),
            ("running_var length", self.running_var.len()),
        ] {
            if len != ch {
                return Err(Error::ShapeMismatch {
                    op: "batchnorm",
                    dim,
                    expected: ch,
                    actual: len,
                });
            }
        }
        if !(self.eps > T::zero()) {
            return Err(Error::InvalidBlock(format!(
                "batch norm eps must be positive, got {:?}",
                self.eps
            )));
        }
        Ok(())
    }

    /// Per-channel `(scale, shift)` so that `bn(x) = scale * x + shift`.
    pub fn scale_shift(&self) -> Result<Vec<(T, T)>> {
        self.validate()?;
        (0..self.channels())
            .map(|i| {
                let denom = self.running_var[i] + self.eps;
                if !(denom > T::zero()) {
                    return Err(Error::NonPositiveVariance {
                        channel: i,
                        value: denom.as_f64(),
                    });
                }
                let scale = self.gamma[i] / denom.sqrt();
                Ok((scale, self.beta[i] - self.running_mean[i] * scale))
            })
            .collect()
    }
}

/// Direct convolution, parallel over output planes when the `parallel`
/// feature is enabled. Bitwise identical to [`conv2d_serial`].
pub fn conv2d<T: Element>(input: &Tensor4<T>, p: &ConvParams<T>) -> Result<Tensor4<T>> {
    #[cfg(feature = "parallel")]
    {
        conv2d_impl(input, p, true)
    }
    #[cfg(not(feature = "parallel"))]
    {
        conv2d_impl(input, p, false)
    }
}

/// Single-threaded [`conv2d`].
pub fn conv2d_serial<T: Element>(input: &Tensor4<T>, p: &ConvParams<T>) -> Result<Tensor4<T>> {
    conv2d_impl(input, p, false)
}

#[cfg_attr(not(feature = "parallel"), allow(unused_variables))]
fn conv2d_impl<T: Element>(
    input: &Tensor4<T>,
    p: &ConvParams<T>,
    parallel: bool,
) -> Result<Tensor4<T>> {
    let out_dims = p.output_dims(input.dims())?;
    let mut out = vec![T::zero(); out_dims.len()];
    let plane = out_dims.plane();
    let fill = |(idx, dst): (usize, &mut [T])| {
        conv_plane(input, p, idx / out_dims.c, idx % out_dims.c, out_dims, dst)
    };

    #[cfg(feature = "parallel")]
    if parallel {
        use rayon::prelude::*;
        out.par_chunks_mut(plane).enumerate().for_each(fill);
        return Ok(Tensor4::from_parts(out_dims, out));
    }

    out.chunks_mut(plane).enumerate().for_each(fill);
    Ok(Tensor4::from_parts(out_dims, out))
}

/// Fills one output plane `(n, o)`.
///
/// Every output element accumulates `x * w` in kernel-row-major order
/// (input channel, then kernel row, then kernel column), skipping taps that
/// land in the zero padding, then adds the bias. [`conv2d_oracle`] uses the
/// same order.
fn conv_plane<T: Element>(
    input: &Tensor4<T>,
    p: &ConvParams<T>,
    n: usize,
    o: usize,
    out_dims: Dims,
    dst: &mut [T],
) {
    let in_dims = input.dims();
    let (k, s, pad) = (p.k(), p.stride, p.padding);
    let x = input.data();
    let filter = p.weight.filter(o);

    for ic in 0..in_dims.c {
        let src = &x[(n * in_dims.c + ic) * in_dims.plane()..][..in_dims.plane()];
        for ky in 0..k {
            for kx in 0..k {
                let wv = filter[(ic * k + ky) * k + kx];
                // valid ox satisfy 0 <= ox*s + kx - pad < w
                let ox_lo = pad.saturating_sub(kx).div_ceil(s);
                let ox_hi = (in_dims.w + pad - kx).div_ceil(s).min(out_dims.w);
                for oy in 0..out_dims.h {
                    let iy = oy * s + ky;
                    if iy < pad || iy - pad >= in_dims.h {
                        continue;
                    }
                    let row = &src[(iy - pad) * in_dims.w..][..in_dims.w];
                    let out_row = &mut dst[oy * out_dims.w..][..out_dims.w];
                    for ox in ox_lo..ox_hi {
                        out_row[ox] = out_row[ox] + row[ox * s + kx - pad] * wv;
                    }
                }
            }
        }
    }
    if let Some(bias) = &p.bias {
        let b = bias[o];
        for v in dst.iter_mut() {
            *v = *v + b;
        }
    }
}

/// Brute-force nested-loop convolution used as ground truth for
/// [`conv2d`] and the fusion tests.
pub fn conv2d_oracle<T: Element>(input: &Tensor4<T>, p: &ConvParams<T>) -> Result<Tensor4<T>> {
    let od = p.output_dims(input.dims())?;
    let id = input.dims();
    let k = p.k();
    let mut data = Vec::with_capacity(od.len());
    for n in 0..od.n {
        for o in 0..od.c {
            for oy in 0..od.h {
                for ox in 0..od.w {
                    let mut acc = T::zero();
                    for ic in 0..id.c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * p.stride + ky) as isize - p.padding as isize;
                                let ix = (ox * p.stride + kx) as isize - p.padding as isize;
                                if iy < 0 || ix < 0 || iy >= id.h as isize || ix >= id.w as isize
                                {
                                    continue;
                                }
                                acc = acc
                                    + input.at(n, ic, iy as usize, ix as usize)
                                        * p.weight.at(o, ic, ky, kx);
                            }
                        }
                    }
                    if let Some(bias) = &p.bias {
                        acc = acc + bias[o];
                    }
                    data.push(acc);
                }
            }
        }
    }
    Ok(Tensor4::from_parts(od, data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn conv<T: Element>(w: Kernel<T>, bias: Option<Vec<T>>, stride: usize, pad: usize) -> ConvParams<T> {
        ConvParams::new(w, bias, stride, pad).unwrap()
    }

    #[test]
    fn box_filter_center_is_nine() {
        let x = Tensor4::<f64>::filled(Dims::new(1, 1, 3, 3), 1.0);
        let p = conv(Kernel::new(1, 1, 3, vec![1.0; 9]).unwrap(), None, 1, 1);
        let y = conv2d(&x, &p).unwrap();
        assert_eq!(y.dims(), Dims::new(1, 1, 3, 3));
        assert_eq!(y.at(0, 0, 1, 1), 9.0);
        assert_eq!(y.at(0, 0, 0, 0), 4.0);
    }

    #[test]
    fn pointwise_affine() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor4::<f64>::random(Dims::new(2, 1, 4, 5), &mut rng);
        let p = conv(Kernel::new(1, 1, 1, vec![2.0]).unwrap(), Some(vec![0.5]), 1, 0);
        let y = conv2d(&x, &p).unwrap();
        for (a, b) in x.data().iter().zip(y.data()) {
            assert_eq!(*b, 2.0 * a + 0.5);
        }
    }

    #[test]
    fn zero_kernel_annihilates() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor4::<f64>::random(Dims::new(1, 3, 6, 6), &mut rng);
        let p = conv(Kernel::zeros(4, 3, 3), Some(vec![0.0; 4]), 1, 1);
        let y = conv2d_oracle(&x, &p).unwrap();
        assert!(y.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn dirac_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor4::<f64>::random(Dims::new(1, 4, 8, 8), &mut rng);
        let mut w = Kernel::zeros(4, 4, 3);
        for c in 0..4 {
            let i = w.index(c, c, 1, 1);
            w.data[i] = 1.0;
        }
        let p = conv(w, None, 1, 1);
        assert!(conv2d_oracle(&x, &p).unwrap().bit_eq(&x));
        assert!(conv2d(&x, &p).unwrap().bit_eq(&x));
    }

    #[test]
    fn seeded_case_matches_oracle_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor4::<f64>::random(Dims::new(1, 4, 8, 8), &mut rng);
        let w = Tensor4::<f64>::random(Dims::new(8, 4, 3, 3), &mut rng).into_data();
        let b = Tensor4::<f64>::random(Dims::new(1, 8, 1, 1), &mut rng).into_data();
        let p = conv(Kernel::new(8, 4, 3, w).unwrap(), Some(b), 1, 1);
        let fast = conv2d(&x, &p).unwrap();
        assert!(fast.bit_eq(&conv2d_oracle(&x, &p).unwrap()));
        assert!(fast.bit_eq(&conv2d_serial(&x, &p).unwrap()));
    }

    #[test]
    fn output_dims_formula() {
        let p = conv(Kernel::<f32>::zeros(2, 3, 3), None, 2, 1);
        assert_eq!(p.output_dims(Dims::new(1, 3, 7, 8)).unwrap(), Dims::new(1, 2, 4, 4));
        let p = conv(Kernel::<f32>::zeros(2, 3, 1), None, 2, 0);
        assert_eq!(p.output_dims(Dims::new(1, 3, 7, 8)).unwrap(), Dims::new(1, 2, 4, 4));
    }

    #[test]
    fn errors_name_the_dimension() {
        let x = Tensor4::<f32>::zeros(Dims::new(1, 5, 4, 4));
        let p = conv(Kernel::<f32>::zeros(2, 3, 3), None, 1, 1);
        let msg = conv2d(&x, &p).unwrap_err().to_string();
        assert!(msg.contains("input channels"), "{msg}");

        let x = Tensor4::<f32>::zeros(Dims::new(1, 3, 1, 4));
        let p = conv(Kernel::<f32>::zeros(2, 3, 3), None, 1, 0);
        let msg = conv2d(&x, &p).unwrap_err().to_string();
        assert!(msg.contains("padded height"), "{msg}");
    }

    #[test]
    fn rejects_unsupported_configs() {
        assert!(matches!(
            Kernel::<f32>::new(1, 1, 5, vec![0.0; 25]),
            Err(Error::Unsupported(_))
        ));
        let mut p = conv(Kernel::<f32>::zeros(2, 2, 3), None, 1, 1);
        p.groups = 2;
        assert!(matches!(p.validate(), Err(Error::Unsupported(_))));
        assert!(ConvParams::new(Kernel::<f32>::zeros(2, 2, 3), Some(vec![0.0]), 1, 1).is_err());
    }
}
