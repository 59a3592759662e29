//! Re-parameterizable RepVGG-style building blocks, YOLOv6-style backbone and
//! neck builders, and a roofline analyzer for the resulting networks.
//!
//! Training-form blocks ([`repconv::RepConvTrain`], Bep units, BepC3) are
//! evaluated with reference operators from [`tensor`]; [`blocks::fuse_block`]
//! and [`arch::fuse_model`] collapse them into single-branch inference form.

pub mod analyzer;
pub mod arch;
pub mod blocks;
pub mod error;
pub mod init;
pub mod io;
pub mod repconv;
pub mod tensor;

pub use error::{Error, Result};
