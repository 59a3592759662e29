//! Network builders: EfficientRep/Rep-PAN (v1) and CSPBep/CSPRepPAN (v2)
//! backbones and necks, scaled by the per-variant depth and width
//! multipliers.

mod builder;
mod graph;
mod scaling;
mod spec;

pub use builder::{
    backbone_depths, backbone_widths, build_backbone, build_model, build_neck, neck_depths,
    neck_output_channels, neck_widths,
};
pub use graph::{
    forward_model, fuse_model, GraphMode, NetworkGraph, Node, Op, TAP_NAMES, TAP_STRIDES,
};
pub use scaling::{scale_depth, scale_width, WIDTH_DIVISOR};
pub use spec::{
    ModelSpec, SpecDocument, Structure, Variant, Version, BACKBONE_DEPTHS, BACKBONE_WIDTHS,
    NECK_DEPTHS, NECK_WIDTHS, SCALING_TABLE,
};
