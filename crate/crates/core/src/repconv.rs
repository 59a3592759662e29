//! The three-branch RepConv block and its collapse into a single 3×3
//! convolution.
//!
//! At training time a RepConv sums a 3×3 conv+BN branch, a 1×1 conv+BN
//! branch and (when shapes allow) a BN-only identity branch, then applies
//! the activation once. Every branch is affine in the input, so the sum is a
//! single 3×3 convolution with bias: fold each BN into its conv, pad the 1×1
//! kernel to 3×3 and express the identity as a Dirac kernel.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::init::{derive_seed, ParamSource};
use crate::tensor::{
    add, batchnorm_infer, conv2d, relu, BatchNormParams, ConvParams, Dims, Element, Kernel,
    Tensor4,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    None,
}

impl Activation {
    pub fn apply<T: Element>(self, x: Tensor4<T>) -> Tensor4<T> {
        match self {
            Activation::Relu => relu(&x),
            Activation::None => x,
        }
    }
}

/// A bias-free convolution followed by batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBn<T> {
    pub conv: ConvParams<T>,
    pub bn: BatchNormParams<T>,
}

impl<T: Element> ConvBn<T> {
    pub fn forward(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        batchnorm_infer(&conv2d(x, &self.conv)?, &self.bn)
    }

    pub fn param_count(&self) -> usize {
        self.conv.param_count() + self.bn.param_count()
    }
}

/// Training-form RepConv.
#[derive(Clone, Debug, PartialEq)]
pub struct RepConvTrain<T> {
    pub in_ch: usize,
    pub out_ch: usize,
    pub stride: usize,
    pub dense: ConvBn<T>,
    pub pointwise: ConvBn<T>,
    pub identity: Option<BatchNormParams<T>>,
    pub activation: Activation,
}

/// Inference-form RepConv: one 3×3 convolution with bias.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedConv<T> {
    pub params: ConvParams<T>,
    pub activation: Activation,
}

impl<T: Element> RepConvTrain<T> {
    pub fn new(
        dense: ConvBn<T>,
        pointwise: ConvBn<T>,
        identity: Option<BatchNormParams<T>>,
        activation: Activation,
    ) -> Result<Self> {
        let rc = RepConvTrain {
            in_ch: dense.conv.in_ch(),
            out_ch: dense.conv.out_ch(),
            stride: dense.conv.stride,
            dense,
            pointwise,
            identity,
            activation,
        };
        rc.validate()?;
        Ok(rc)
    }

    /// Random training-form RepConv. Carries an identity branch exactly when
    /// `in_ch == out_ch` and `stride == 1`.
    pub fn random<R: Rng + ?Sized>(
        in_ch: usize,
        out_ch: usize,
        stride: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        use crate::init::{random_bn, random_kernel};
        let has_identity = Self::identity_allowed(in_ch, out_ch, stride);
        // three branches summed: split unit gain between them
        let gain = if has_identity { 0.8 } else { 1.0 };
        let dense = ConvBn {
            conv: ConvParams {
                weight: random_kernel(out_ch, in_ch, 3, gain, rng),
                bias: None,
                stride,
                padding: 1,
                groups: 1,
            },
            bn: random_bn(out_ch, rng),
        };
        let pointwise = ConvBn {
            conv: ConvParams {
                weight: random_kernel(out_ch, in_ch, 1, 0.5 * gain, rng),
                bias: None,
                stride,
                padding: 0,
                groups: 1,
            },
            bn: random_bn(out_ch, rng),
        };
        let identity = has_identity.then(|| {
            let mut bn = random_bn::<T, R>(out_ch, rng);
            for g in bn.gamma.iter_mut() {
                *g = *g * T::from_f64(0.5);
            }
            bn
        });
        RepConvTrain {
            in_ch,
            out_ch,
            stride,
            dense,
            pointwise,
            identity,
            activation,
        }
    }

    /// Training-form block drawn from `src`; zero kernels with identity batch
    /// norms when `src` is not random.
    pub fn init(
        in_ch: usize,
        out_ch: usize,
        stride: usize,
        activation: Activation,
        src: &mut ParamSource,
    ) -> Self {
        match src.rng() {
            Some(rng) => Self::random(in_ch, out_ch, stride, activation, rng),
            None => Self::zeros(in_ch, out_ch, stride, activation),
        }
    }

    /// Training-form block with all-zero kernels and identity batch norms.
    pub fn zeros(in_ch: usize, out_ch: usize, stride: usize, activation: Activation) -> Self {
        let branch = |k: usize| ConvBn {
            conv: ConvParams {
                weight: Kernel::zeros(out_ch, in_ch, k),
                bias: None,
                stride,
                padding: k / 2,
                groups: 1,
            },
            bn: BatchNormParams::identity(out_ch),
        };
        RepConvTrain {
            in_ch,
            out_ch,
            stride,
            dense: branch(3),
            pointwise: branch(1),
            identity: Self::identity_allowed(in_ch, out_ch, stride)
                .then(|| BatchNormParams::identity(out_ch)),
            activation,
        }
    }

    /// Wraps a fused conv as a degenerate training-form block: its kernel
    /// and bias become the 3×3 branch under an identity BN, the 1×1 branch
    /// is zero and any identity branch has zero scale.
    pub fn from_fused(fc: &FusedConv<T>) -> Result<Self> {
        let p = &fc.params;
        if p.k() != 3 || p.padding != 1 {
            return Err(Error::InvalidBlock(
                "fused conv must be 3x3 with padding 1".into(),
            ));
        }
        let (in_ch, out_ch, stride) = (p.in_ch(), p.out_ch(), p.stride);
        let mut rc = Self::zeros(in_ch, out_ch, stride, fc.activation);
        rc.dense.conv = p.clone();
        if let Some(id) = rc.identity.as_mut() {
            id.gamma.iter_mut().for_each(|g| *g = T::zero());
        }
        rc.validate()?;
        Ok(rc)
    }

    pub fn identity_allowed(in_ch: usize, out_ch: usize, stride: usize) -> bool {
        in_ch == out_ch && stride == 1
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidBlock(msg));
        if self.in_ch == 0 || self.out_ch == 0 {
            return bad("rep conv channels must be positive".into());
        }
        if self.stride != 1 && self.stride != 2 {
            return bad(format!("rep conv stride must be 1 or 2, got {}", self.stride));
        }
        for (name, branch, k, pad) in [
            ("3x3 branch", &self.dense, 3, 1),
            ("1x1 branch", &self.pointwise, 1, 0),
        ] {
            let c = &branch.conv;
            c.validate()?;
            if c.k() != k || c.padding != pad {
                return bad(format!("{name} must be k={k} padding={pad}"));
            }
            if c.in_ch() != self.in_ch || c.out_ch() != self.out_ch || c.stride != self.stride {
                return bad(format!(
                    "{name} is {}->{} stride {}, block is {}->{} stride {}",
                    c.in_ch(),
                    c.out_ch(),
                    c.stride,
                    self.in_ch,
                    self.out_ch,
                    self.stride
                ));
            }
            branch.bn.validate()?;
            if branch.bn.channels() != self.out_ch {
                return bad(format!("{name} batch norm has {} channels", branch.bn.channels()));
            }
        }
        let allowed = Self::identity_allowed(self.in_ch, self.out_ch, self.stride);
        match (&self.identity, allowed) {
            (Some(_), false) => {
                return bad("identity branch requires in_ch == out_ch and stride 1".into())
            }
            (None, true) => {
                return bad("identity branch is required when in_ch == out_ch and stride 1".into())
            }
            (Some(bn), true) => {
                bn.validate()?;
                if bn.channels() != self.out_ch {
                    return bad(format!("identity batch norm has {} channels", bn.channels()));
                }
            }
            (None, false) => {}
        }
        Ok(())
    }

    pub fn output_dims(&self, dims: Dims) -> Result<Dims> {
        self.dense.conv.output_dims(dims)
    }

    /// `act(bn(conv3x3(x)) + bn(conv1x1(x)) + bn(x))`.
    pub fn forward(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        let mut y = add(&self.dense.forward(x)?, &self.pointwise.forward(x)?)?;
        if let Some(bn) = &self.identity {
            y = add(&y, &batchnorm_infer(x, bn)?)?;
        }
        Ok(self.activation.apply(y))
    }

    pub fn fuse(&self) -> Result<FusedConv<T>> {
        fuse_repconv(self)
    }

    pub fn param_count(&self) -> usize {
        self.dense.param_count()
            + self.pointwise.param_count()
            + self.identity.as_ref().map_or(0, BatchNormParams::param_count)
    }
}

impl<T: Element> FusedConv<T> {
    pub fn forward(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        Ok(self.activation.apply(conv2d(x, &self.params)?))
    }

    pub fn param_count(&self) -> usize {
        self.params.param_count()
    }

    pub fn in_ch(&self) -> usize {
        self.params.in_ch()
    }

    pub fn out_ch(&self) -> usize {
        self.params.out_ch()
    }
}

/// Absorbs an inference-mode batch norm into the preceding convolution.
pub fn fold_bn<T: Element>(conv: &ConvParams<T>, bn: &BatchNormParams<T>) -> Result<ConvParams<T>> {
    conv.validate()?;
    if bn.channels() != conv.out_ch() {
        return Err(Error::ShapeMismatch {
            op: "fold_bn",
            dim: "batch norm channels",
            expected: conv.out_ch(),
            actual: bn.channels(),
        });
    }
    let affine = bn.scale_shift()?;
    let mut weight = conv.weight.clone();
    let per_out = weight.in_ch * weight.k * weight.k;
    let mut bias = Vec::with_capacity(conv.out_ch());
    for (o, &(scale, shift)) in affine.iter().enumerate() {
        for w in &mut weight.data[o * per_out..(o + 1) * per_out] {
            *w = *w * scale;
        }
        let b = conv.bias.as_ref().map_or(T::zero(), |b| b[o]);
        bias.push(shift + b * scale);
    }
    Ok(ConvParams {
        weight,
        bias: Some(bias),
        ..conv.clone()
    })
}

/// Places a 1×1 kernel at the centre of an otherwise zero 3×3 kernel.
pub fn pad_1x1_to_3x3<T: Element>(w: &Kernel<T>) -> Result<Kernel<T>> {
    if w.k != 1 {
        return Err(Error::InvalidShape(format!(
            "expected a 1x1 kernel, got {}x{}",
            w.k, w.k
        )));
    }
    let mut out = Kernel::zeros(w.out_ch, w.in_ch, 3);
    for o in 0..w.out_ch {
        for i in 0..w.in_ch {
            let dst = out.index(o, i, 1, 1);
            out.data[dst] = w.at(o, i, 0, 0);
        }
    }
    Ok(out)
}

/// Dirac 3×3 convolution (stride 1, padding 1, zero bias): the identity map.
pub fn identity_as_conv<T: Element>(ch: usize) -> ConvParams<T> {
    let mut weight = Kernel::zeros(ch, ch, 3);
    for c in 0..ch {
        let i = weight.index(c, c, 1, 1);
        weight.data[i] = T::one();
    }
    ConvParams {
        weight,
        bias: Some(vec![T::zero(); ch]),
        stride: 1,
        padding: 1,
        groups: 1,
    }
}

pub fn fuse_repconv<T: Element>(rc: &RepConvTrain<T>) -> Result<FusedConv<T>> {
    rc.validate()?;
    let mut fused = fold_bn(&rc.dense.conv, &rc.dense.bn)?;
    let point = fold_bn(&rc.pointwise.conv, &rc.pointwise.bn)?;
    let point_w = pad_1x1_to_3x3(&point.weight)?;
    accumulate(&mut fused, &point_w, point.bias.as_deref());
    if let Some(bn) = &rc.identity {
        let id = fold_bn(&identity_as_conv(rc.out_ch), bn)?;
        accumulate(&mut fused, &id.weight, id.bias.as_deref());
    }
    fused.padding = 1;
    fused.stride = rc.stride;
    Ok(FusedConv {
        params: fused,
        activation: rc.activation,
    })
}

fn accumulate<T: Element>(dst: &mut ConvParams<T>, w: &Kernel<T>, bias: Option<&[T]>) {
    debug_assert_eq!(dst.weight.shape(), w.shape());
    for (a, b) in dst.weight.data.iter_mut().zip(&w.data) {
        *a = *a + *b;
    }
    if let (Some(acc), Some(b)) = (dst.bias.as_mut(), bias) {
        for (a, b) in acc.iter_mut().zip(b) {
            *a = *a + *b;
        }
    }
}

pub fn forward_train<T: Element>(rc: &RepConvTrain<T>, x: &Tensor4<T>) -> Result<Tensor4<T>> {
    rc.forward(x)
}

pub fn forward_fused<T: Element>(fc: &FusedConv<T>, x: &Tensor4<T>) -> Result<Tensor4<T>> {
    fc.forward(x)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub trials: usize,
    pub max_abs_deviation: f64,
    pub tol: f64,
    pub passed: bool,
}

/// Fuses `rc` and compares both forms on `trials` seeded random inputs.
pub fn verify_equivalence<T: Element>(
    rc: &RepConvTrain<T>,
    trials: usize,
    tol: f64,
    seed: u64,
) -> Result<VerificationReport> {
    let fused = fuse_repconv(rc)?;
    verify_against(rc, &fused, trials, tol, seed)
}

/// Compares a training-form block against a given fused conv on `trials`
/// seeded inputs of random spatial size in `3..=12`.
pub fn verify_against<T: Element>(
    rc: &RepConvTrain<T>,
    fused: &FusedConv<T>,
    trials: usize,
    tol: f64,
    seed: u64,
) -> Result<VerificationReport> {
    if trials == 0 {
        return Err(Error::InvalidBlock("verification needs at least one trial".into()));
    }
    let trial = |t: usize| -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, t as u64));
        let dims = Dims::new(1, rc.in_ch, rng.random_range(3..=12), rng.random_range(3..=12));
        let x = Tensor4::random(dims, &mut rng);
        rc.forward(&x)?.max_abs_diff(&fused.forward(&x)?)
    };

    #[cfg(feature = "parallel")]
    let deviations: Vec<f64> = {
        use rayon::prelude::*;
        (0..trials).into_par_iter().map(trial).collect::<Result<_>>()?
    };
    #[cfg(not(feature = "parallel"))]
    let deviations: Vec<f64> = (0..trials).map(trial).collect::<Result<_>>()?;

    let max_abs_deviation = deviations.into_iter().fold(0.0, f64::max);
    Ok(VerificationReport {
        trials,
        max_abs_deviation,
        tol,
        passed: max_abs_deviation <= tol,
    })
}
