//! Seeded parameter initialization.
//!
//! Weights are drawn so activations keep roughly unit scale through deep
//! stacks of blocks, and batch-norm statistics are deliberately far from the
//! identity so that folding is exercised for real.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::{BatchNormParams, Element, Kernel};

/// How a freshly built network gets its parameter values.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Every parameter zero and every batch norm the identity. Cheap; for
    /// structural work such as counting and roofline analysis.
    Zeros,
    /// Seeded random parameters.
    Random(u64),
}

pub fn random_kernel<T: Element, R: Rng + ?Sized>(
    out_ch: usize,
    in_ch: usize,
    k: usize,
    gain: f64,
    rng: &mut R,
) -> Kernel<T> {
    let std = gain / ((in_ch * k * k) as f64).sqrt();
    let data = (0..out_ch * in_ch * k * k)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            T::from_f64(z * std)
        })
        .collect();
    Kernel {
        out_ch,
        in_ch,
        k,
        data,
    }
}

pub fn random_bn<T: Element, R: Rng + ?Sized>(ch: usize, rng: &mut R) -> BatchNormParams<T> {
    let mut draw = |lo: f64, hi: f64| -> Vec<T> {
        (0..ch).map(|_| T::from_f64(rng.random_range(lo..hi))).collect()
    };
    BatchNormParams {
        gamma: draw(0.5, 1.5),
        beta: draw(-0.2, 0.2),
        running_mean: draw(-0.2, 0.2),
        running_var: draw(0.5, 2.0),
        eps: T::from_f64(BatchNormParams::<T>::DEFAULT_EPS),
    }
}

/// Derives an independent stream seed for item `index` of a seeded run.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Source of parameter values while a network is being built.
pub struct ParamSource {
    rng: Option<ChaCha8Rng>,
}

impl ParamSource {
    pub fn new(init: Init) -> Self {
        match init {
            Init::Zeros => ParamSource { rng: None },
            Init::Random(seed) => ParamSource {
                rng: Some(ChaCha8Rng::seed_from_u64(seed)),
            },
        }
    }

    pub fn rng(&mut self) -> Option<&mut ChaCha8Rng> {
        self.rng.as_mut()
    }

    pub fn kernel<T: Element>(&mut self, out_ch: usize, in_ch: usize, k: usize, gain: f64) -> Kernel<T> {
        match self.rng.as_mut() {
            Some(rng) => random_kernel(out_ch, in_ch, k, gain, rng),
            None => Kernel::zeros(out_ch, in_ch, k),
        }
    }

    pub fn bn<T: Element>(&mut self, ch: usize) -> BatchNormParams<T> {
        match self.rng.as_mut() {
            Some(rng) => random_bn(ch, rng),
            None => BatchNormParams::identity(ch),
        }
    }
}
