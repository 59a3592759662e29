//! Composite blocks built from RepConvs: Bep unit, RepBlock, BepC3, plus the
//! plain conv+BN+ReLU module used for CSP projections and neck laterals.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::init::ParamSource;
use crate::repconv::{fold_bn, Activation, FusedConv, RepConvTrain};
use crate::tensor::{
    add, batchnorm_infer, concat_channels, conv2d, BatchNormParams, ConvParams, Dims, Element,
    Tensor4,
};

/// A RepConv in either of its two forms.
#[derive(Clone, Debug, PartialEq)]
pub enum RepLayer<T> {
    Train(RepConvTrain<T>),
    Fused(FusedConv<T>),
}

impl<T: Element> RepLayer<T> {
    pub fn init(in_ch: usize, out_ch: usize, stride: usize, src: &mut ParamSource) -> Self {
        RepLayer::Train(RepConvTrain::init(in_ch, out_ch, stride, Activation::Relu, src))
    }

    pub fn forward(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        match self {
            RepLayer::Train(rc) => rc.forward(x),
            RepLayer::Fused(fc) => fc.forward(x),
        }
    }

    pub fn fuse(&self) -> Result<Self> {
        Ok(match self {
            RepLayer::Train(rc) => RepLayer::Fused(rc.fuse()?),
            RepLayer::Fused(fc) => RepLayer::Fused(fc.clone()),
        })
    }

    pub fn in_ch(&self) -> usize {
        match self {
            RepLayer::Train(rc) => rc.in_ch,
            RepLayer::Fused(fc) => fc.in_ch(),
        }
    }

    pub fn out_ch(&self) -> usize {
        match self {
            RepLayer::Train(rc) => rc.out_ch,
            RepLayer::Fused(fc) => fc.out_ch(),
        }
    }

    pub fn stride(&self) -> usize {
        match self {
            RepLayer::Train(rc) => rc.stride,
            RepLayer::Fused(fc) => fc.params.stride,
        }
    }

    pub fn output_dims(&self, dims: Dims) -> Result<Dims> {
        match self {
            RepLayer::Train(rc) => rc.output_dims(dims),
            RepLayer::Fused(fc) => fc.params.output_dims(dims),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            RepLayer::Train(rc) => rc.param_count(),
            RepLayer::Fused(fc) => fc.param_count(),
        }
    }

    pub fn is_fused(&self) -> bool {
        matches!(self, RepLayer::Fused(_))
    }
}

/// Convolution, batch norm, activation. Fusing folds the batch norm into the
/// convolution and drops it.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvModule<T> {
    pub conv: ConvParams<T>,
    pub bn: Option<BatchNormParams<T>>,
    pub activation: Activation,
}

impl<T: Element> ConvModule<T> {
    pub fn init(in_ch: usize, out_ch: usize, k: usize, stride: usize, src: &mut ParamSource) -> Self {
        ConvModule {
            conv: ConvParams {
                weight: src.kernel(out_ch, in_ch, k, 1.0),
                bias: None,
                stride,
                padding: k / 2,
                groups: 1,
            },
            bn: Some(src.bn(out_ch)),
            activation: Activation::Relu,
        }
    }

    pub fn forward(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        let mut y = conv2d(x, &self.conv)?;
        if let Some(bn) = &self.bn {
            y = batchnorm_infer(&y, bn)?;
        }
        Ok(self.activation.apply(y))
    }

    pub fn fuse(&self) -> Result<Self> {
        let conv = match &self.bn {
            Some(bn) => fold_bn(&self.conv, bn)?,
            None => self.conv.clone(),
        };
        Ok(ConvModule {
            conv,
            bn: None,
            activation: self.activation,
        })
    }

    pub fn in_ch(&self) -> usize {
        self.conv.in_ch()
    }

    pub fn out_ch(&self) -> usize {
        self.conv.out_ch()
    }

    pub fn param_count(&self) -> usize {
        self.conv.param_count() + self.bn.as_ref().map_or(0, BatchNormParams::param_count)
    }

    pub fn is_fused(&self) -> bool {
        self.bn.is_none()
    }
}

/// A chain of same-width RepConvs with one residual spanning the chain.
#[derive(Clone, Debug, PartialEq)]
pub struct BepUnit<T> {
    pub convs: Vec<RepLayer<T>>,
    pub shortcut: bool,
}

impl<T: Element> BepUnit<T> {
    pub fn init(ch: usize, n: usize, shortcut: bool, src: &mut ParamSource) -> Self {
        BepUnit {
            convs: (0..n).map(|_| RepLayer::init(ch, ch, 1, src)).collect(),
            shortcut,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ch = self.channels()?;
        for c in &self.convs {
            if c.in_ch() != ch || c.out_ch() != ch || c.stride() != 1 {
                return Err(Error::InvalidBlock(format!(
                    "bep unit convs must be {ch}->{ch} stride 1, found {}->{} stride {}",
                    c.in_ch(),
                    c.out_ch(),
                    c.stride()
                )));
            }
        }
        Ok(())
    }

    pub fn channels(&self) -> Result<usize> {
        self.convs
            .first()
            .map(RepLayer::in_ch)
            .ok_or_else(|| Error::InvalidBlock("bep unit needs at least one rep conv".into()))
    }

    pub fn forward(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        self.validate()?;
        let mut y = x.clone();
        for c in &self.convs {
            y = c.forward(&y)?;
        }
        if self.shortcut {
            y = add(&y, x)?;
        }
        Ok(y)
    }

    pub fn fuse(&self) -> Result<Self> {
        Ok(BepUnit {
            convs: self.convs.iter().map(RepLayer::fuse).collect::<Result<_>>()?,
            shortcut: self.shortcut,
        })
    }

    pub fn param_count(&self) -> usize {
        self.convs.iter().map(RepLayer::param_count).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum RepBlockBody<T> {
    /// Plain chain of RepConvs.
    Convs(Vec<RepLayer<T>>),
    /// Chain of Bep units.
    Bep(Vec<BepUnit<T>>),
}

/// Stage body: a sequence of RepConvs or of Bep units.
#[derive(Clone, Debug, PartialEq)]
pub struct RepBlock<T> {
    pub body: RepBlockBody<T>,
    pub declared_depth: usize,
}

/// Number of Bep units a Bep-style RepBlock of depth `depth` holds:
/// `round(depth / 2)` (halves away from zero), at least one.
pub fn bep_units_for_depth(depth: usize) -> usize {
    depth.div_ceil(2).max(1)
}

/// RepConvs per Bep unit.
pub const CONVS_PER_BEP_UNIT: usize = 2;

impl<T: Element> RepBlock<T> {
    /// `depth` RepConvs; the first maps `in_ch` to `out_ch`.
    pub fn conv_chain(in_ch: usize, out_ch: usize, depth: usize, src: &mut ParamSource) -> Self {
        let depth = depth.max(1);
        let convs = (0..depth)
            .map(|i| RepLayer::init(if i == 0 { in_ch } else { out_ch }, out_ch, 1, src))
            .collect();
        RepBlock {
            body: RepBlockBody::Convs(convs),
            declared_depth: depth,
        }
    }

    /// Bep units of two RepConvs each, with shortcuts, at width `ch`.
    pub fn bep_chain(ch: usize, depth: usize, src: &mut ParamSource) -> Self {
        let units = (0..bep_units_for_depth(depth))
            .map(|_| BepUnit::init(ch, CONVS_PER_BEP_UNIT, true, src))
            .collect();
        RepBlock {
            body: RepBlockBody::Bep(units),
            declared_depth: depth,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut prev = match &self.body {
            RepBlockBody::Convs(c) if !c.is_empty() => c[0].in_ch(),
            RepBlockBody::Bep(u) if !u.is_empty() => u[0].channels()?,
            _ => return Err(Error::InvalidBlock("rep block must not be empty".into())),
        };
        match &self.body {
            RepBlockBody::Convs(convs) => {
                for c in convs {
                    if c.in_ch() != prev || c.stride() != 1 {
                        return Err(Error::InvalidBlock(format!(
                            "rep block conv expects {} channels at stride {}, chain carries {prev}",
                            c.in_ch(),
                            c.stride()
                        )));
                    }
                    prev = c.out_ch();
                }
            }
            RepBlockBody::Bep(units) => {
                for u in units {
                    u.validate()?;
                    if u.channels()? != prev {
                        return Err(Error::InvalidBlock("bep units differ in width".into()));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn in_ch(&self) -> usize {
        match &self.body {
            RepBlockBody::Convs(c) => c.first().map_or(0, RepLayer::in_ch),
            RepBlockBody::Bep(u) => u.first().and_then(|u| u.channels().ok()).unwrap_or(0),
        }
    }

    pub fn out_ch(&self) -> usize {
        match &self.body {
            RepBlockBody::Convs(c) => c.last().map_or(0, RepLayer::out_ch),
            RepBlockBody::Bep(u) => u.last().and_then(|u| u.channels().ok()).unwrap_or(0),
        }
    }

    pub fn forward(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        self.validate()?;
        let mut y = x.clone();
        match &self.body {
            RepBlockBody::Convs(convs) => {
                for c in convs {
                    y = c.forward(&y)?;
                }
            }
            RepBlockBody::Bep(units) => {
                for u in units {
                    y = u.forward(&y)?;
                }
            }
        }
        Ok(y)
    }

    pub fn fuse(&self) -> Result<Self> {
        let body = match &self.body {
            RepBlockBody::Convs(c) => {
                RepBlockBody::Convs(c.iter().map(RepLayer::fuse).collect::<Result<_>>()?)
            }
            RepBlockBody::Bep(u) => {
                RepBlockBody::Bep(u.iter().map(BepUnit::fuse).collect::<Result<_>>()?)
            }
        };
        Ok(RepBlock {
            body,
            declared_depth: self.declared_depth,
        })
    }

    pub fn param_count(&self) -> usize {
        match &self.body {
            RepBlockBody::Convs(c) => c.iter().map(RepLayer::param_count).sum(),
            RepBlockBody::Bep(u) => u.iter().map(BepUnit::param_count).sum(),
        }
    }
}

/// CSP partial ratio, a rational in (0, 1).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PartialRatio {
    num: u32,
    den: u32,
}

impl PartialRatio {
    pub const HALF: PartialRatio = PartialRatio { num: 1, den: 2 };
    pub const TWO_THIRDS: PartialRatio = PartialRatio { num: 2, den: 3 };

    pub fn new(num: u32, den: u32) -> Result<Self> {
        if num == 0 || den == 0 || num >= den {
            return Err(Error::InvalidBlock(format!(
                "partial ratio {num}/{den} is not in (0, 1)"
            )));
        }
        let g = gcd(num, den);
        Ok(PartialRatio {
            num: num / g,
            den: den / g,
        })
    }

    pub fn num(self) -> u32 {
        self.num
    }

    pub fn den(self) -> u32 {
        self.den
    }

    pub fn as_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }

    /// `round(out_ch * ratio)` with halves rounded away from zero, at least 1.
    pub fn hidden_width(self, out_ch: usize) -> usize {
        let (num, den) = (self.num as usize, self.den as usize);
        ((2 * out_ch * num + den) / (2 * den)).max(1)
    }
}

fn gcd(a: u32, b: u32) -> u32 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

impl fmt::Display for PartialRatio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

impl FromStr for PartialRatio {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidBlock(format!("partial ratio {s:?} is not of the form p/q"));
        let (n, d) = s.split_once('/').ok_or_else(bad)?;
        let n = n.trim().parse().map_err(|_| bad())?;
        let d = d.trim().parse().map_err(|_| bad())?;
        PartialRatio::new(n, d)
    }
}

impl Serialize for PartialRatio {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for PartialRatio {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// CSP block: two parallel 1×1 projections of the input, a Bep RepBlock on
/// the first, channel concat (inner branch first) and a 1×1 merge.
#[derive(Clone, Debug, PartialEq)]
pub struct BepC3<T> {
    pub in_ch: usize,
    pub out_ch: usize,
    pub partial_ratio: PartialRatio,
    pub split_a: ConvModule<T>,
    pub split_b: ConvModule<T>,
    pub inner: RepBlock<T>,
    pub merge: ConvModule<T>,
}

impl<T: Element> BepC3<T> {
    pub fn init(
        in_ch: usize,
        out_ch: usize,
        partial_ratio: PartialRatio,
        depth: usize,
        src: &mut ParamSource,
    ) -> Self {
        let hidden = partial_ratio.hidden_width(out_ch);
        BepC3 {
            in_ch,
            out_ch,
            partial_ratio,
            split_a: ConvModule::init(in_ch, hidden, 1, 1, src),
            split_b: ConvModule::init(in_ch, hidden, 1, 1, src),
            inner: RepBlock::bep_chain(hidden, depth, src),
            merge: ConvModule::init(2 * hidden, out_ch, 1, 1, src),
        }
    }

    pub fn hidden_width(&self) -> usize {
        self.partial_ratio.hidden_width(self.out_ch)
    }

    pub fn validate(&self) -> Result<()> {
        let hidden = self.hidden_width();
        let bad = |what: &str| Err(Error::InvalidBlock(format!("bepc3 {what}")));
        if self.split_a.in_ch() != self.in_ch || self.split_b.in_ch() != self.in_ch {
            return bad("split convs must read the block input");
        }
        if self.split_a.out_ch() != hidden || self.split_b.out_ch() != hidden {
            return bad("split convs must produce the hidden width");
        }
        if self.inner.in_ch() != hidden || self.inner.out_ch() != hidden {
            return bad("inner rep block must keep the hidden width");
        }
        if self.merge.in_ch() != 2 * hidden || self.merge.out_ch() != self.out_ch {
            return bad("merge must map 2 * hidden to out_ch");
        }
        self.inner.validate()
    }

    pub fn forward(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        self.validate()?;
        let a = self.inner.forward(&self.split_a.forward(x)?)?;
        let b = self.split_b.forward(x)?;
        self.merge.forward(&concat_channels(&a, &b)?)
    }

    pub fn fuse(&self) -> Result<Self> {
        Ok(BepC3 {
            in_ch: self.in_ch,
            out_ch: self.out_ch,
            partial_ratio: self.partial_ratio,
            split_a: self.split_a.fuse()?,
            split_b: self.split_b.fuse()?,
            inner: self.inner.fuse()?,
            merge: self.merge.fuse()?,
        })
    }

    pub fn param_count(&self) -> usize {
        self.split_a.param_count()
            + self.split_b.param_count()
            + self.inner.param_count()
            + self.merge.param_count()
    }
}

/// Any block a network stage can hold.
#[derive(Clone, Debug, PartialEq)]
pub enum BlockNode<T> {
    RepConv(RepLayer<T>),
    Conv(ConvModule<T>),
    BepUnit(BepUnit<T>),
    RepBlock(RepBlock<T>),
    BepC3(BepC3<T>),
}

impl<T: Element> BlockNode<T> {
    pub fn forward(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        match self {
            BlockNode::RepConv(l) => l.forward(x),
            BlockNode::Conv(c) => c.forward(x),
            BlockNode::BepUnit(u) => u.forward(x),
            BlockNode::RepBlock(b) => b.forward(x),
            BlockNode::BepC3(b) => b.forward(x),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            BlockNode::RepConv(l) => l.param_count(),
            BlockNode::Conv(c) => c.param_count(),
            BlockNode::BepUnit(u) => u.param_count(),
            BlockNode::RepBlock(b) => b.param_count(),
            BlockNode::BepC3(b) => b.param_count(),
        }
    }

    pub fn in_ch(&self) -> usize {
        match self {
            BlockNode::RepConv(l) => l.in_ch(),
            BlockNode::Conv(c) => c.in_ch(),
            BlockNode::BepUnit(u) => u.channels().unwrap_or(0),
            BlockNode::RepBlock(b) => b.in_ch(),
            BlockNode::BepC3(b) => b.in_ch,
        }
    }

    pub fn out_ch(&self) -> usize {
        match self {
            BlockNode::RepConv(l) => l.out_ch(),
            BlockNode::Conv(c) => c.out_ch(),
            BlockNode::BepUnit(u) => u.channels().unwrap_or(0),
            BlockNode::RepBlock(b) => b.out_ch(),
            BlockNode::BepC3(b) => b.out_ch,
        }
    }

    /// Spatial stride of the block (1 or 2).
    pub fn stride(&self) -> usize {
        match self {
            BlockNode::RepConv(l) => l.stride(),
            BlockNode::Conv(c) => c.conv.stride,
            _ => 1,
        }
    }

    /// Every leaf layer in a fixed depth-first order.
    pub fn leaves(&self) -> Vec<Leaf<'_, T>> {
        let mut out = Vec::new();
        let rep = rep_leaf;
        match self {
            BlockNode::RepConv(l) => out.push(rep(l)),
            BlockNode::Conv(c) => out.push(Leaf::Conv(c)),
            BlockNode::BepUnit(u) => out.extend(u.convs.iter().map(rep)),
            BlockNode::RepBlock(b) => out.extend(block_leaves(b)),
            BlockNode::BepC3(b) => {
                out.push(Leaf::Conv(&b.split_a));
                out.push(Leaf::Conv(&b.split_b));
                out.extend(block_leaves(&b.inner));
                out.push(Leaf::Conv(&b.merge));
            }
        }
        out
    }

    /// Mutable leaves in the same order as [`BlockNode::leaves`].
    pub fn leaves_mut(&mut self) -> Vec<LeafMut<'_, T>> {
        fn rep<T>(l: &mut RepLayer<T>) -> LeafMut<'_, T> {
            match l {
                RepLayer::Train(rc) => LeafMut::RepTrain(rc),
                RepLayer::Fused(fc) => LeafMut::RepFused(fc),
            }
        }
        fn block<T>(b: &mut RepBlock<T>) -> Vec<LeafMut<'_, T>> {
            match &mut b.body {
                RepBlockBody::Convs(c) => c.iter_mut().map(rep).collect(),
                RepBlockBody::Bep(u) => u.iter_mut().flat_map(|u| u.convs.iter_mut().map(rep)).collect(),
            }
        }
        match self {
            BlockNode::RepConv(l) => vec![rep(l)],
            BlockNode::Conv(c) => vec![LeafMut::Conv(c)],
            BlockNode::BepUnit(u) => u.convs.iter_mut().map(rep).collect(),
            BlockNode::RepBlock(b) => block(b),
            BlockNode::BepC3(b) => {
                let mut out = vec![LeafMut::Conv(&mut b.split_a), LeafMut::Conv(&mut b.split_b)];
                out.extend(block(&mut b.inner));
                out.push(LeafMut::Conv(&mut b.merge));
                out
            }
        }
    }

    /// True when no training-form RepConv or unfolded batch norm remains.
    pub fn is_fused(&self) -> bool {
        self.leaves().iter().all(|l| match l {
            Leaf::RepTrain(_) => false,
            Leaf::RepFused(_) => true,
            Leaf::Conv(c) => c.is_fused(),
        })
    }

    pub fn rep_conv_count(&self) -> usize {
        self.leaves()
            .iter()
            .filter(|l| matches!(l, Leaf::RepTrain(_) | Leaf::RepFused(_)))
            .count()
    }
}

fn rep_leaf<T>(l: &RepLayer<T>) -> Leaf<'_, T> {
    match l {
        RepLayer::Train(rc) => Leaf::RepTrain(rc),
        RepLayer::Fused(fc) => Leaf::RepFused(fc),
    }
}

fn block_leaves<T>(b: &RepBlock<T>) -> Vec<Leaf<'_, T>> {
    match &b.body {
        RepBlockBody::Convs(c) => c.iter().map(rep_leaf).collect(),
        RepBlockBody::Bep(u) => u.iter().flat_map(|u| u.convs.iter().map(rep_leaf)).collect(),
    }
}

/// A parameter-carrying layer inside a block.
#[derive(Clone, Copy, Debug)]
pub enum Leaf<'a, T> {
    RepTrain(&'a RepConvTrain<T>),
    RepFused(&'a FusedConv<T>),
    Conv(&'a ConvModule<T>),
}

#[derive(Debug)]
pub enum LeafMut<'a, T> {
    RepTrain(&'a mut RepConvTrain<T>),
    RepFused(&'a mut FusedConv<T>),
    Conv(&'a mut ConvModule<T>),
}

/// Replaces every training-form RepConv with its fused conv and folds every
/// batch norm, keeping the block topology.
pub fn fuse_block<T: Element>(node: &BlockNode<T>) -> Result<BlockNode<T>> {
    Ok(match node {
        BlockNode::RepConv(l) => BlockNode::RepConv(l.fuse()?),
        BlockNode::Conv(c) => BlockNode::Conv(c.fuse()?),
        BlockNode::BepUnit(u) => BlockNode::BepUnit(u.fuse()?),
        BlockNode::RepBlock(b) => BlockNode::RepBlock(b.fuse()?),
        BlockNode::BepC3(b) => BlockNode::BepC3(b.fuse()?),
    })
}

pub fn bep_unit_forward<T: Element>(u: &BepUnit<T>, x: &Tensor4<T>) -> Result<Tensor4<T>> {
    u.forward(x)
}

pub fn bepc3_forward<T: Element>(b: &BepC3<T>, x: &Tensor4<T>) -> Result<Tensor4<T>> {
    b.forward(x)
}
