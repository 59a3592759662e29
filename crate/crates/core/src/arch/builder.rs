use crate::blocks::{BepC3, BlockNode, ConvModule, RepBlock, RepLayer};
use crate::error::Result;
use crate::init::{Init, ParamSource};
use crate::tensor::Element;

use super::graph::NetworkGraph;
use super::scaling::{scale_depth, scale_width, WIDTH_DIVISOR};
use super::spec::{
    ModelSpec, Structure, BACKBONE_DEPTHS, BACKBONE_WIDTHS, NECK_DEPTHS, NECK_WIDTHS,
};

/// Scaled stage repeat counts of the backbone (stem first).
pub fn backbone_depths(spec: &ModelSpec) -> [usize; 5] {
    BACKBONE_DEPTHS.map(|d| scale_depth(d, spec.depth_multiplier))
}

pub fn backbone_widths(spec: &ModelSpec) -> [usize; 5] {
    BACKBONE_WIDTHS.map(|w| scale_width(w, spec.width_multiplier, WIDTH_DIVISOR))
}

pub fn neck_depths(spec: &ModelSpec) -> [usize; 4] {
    NECK_DEPTHS.map(|d| scale_depth(d, spec.depth_multiplier))
}

/// Scaled neck widths in slot order (see [`NECK_WIDTHS`]).
pub fn neck_widths(spec: &ModelSpec) -> [usize; 6] {
    NECK_WIDTHS.map(|w| scale_width(w, spec.width_multiplier, WIDTH_DIVISOR))
}

/// Output channels of the neck's P3, P4, P5 taps.
pub fn neck_output_channels(spec: &ModelSpec) -> (usize, usize, usize) {
    let w = neck_widths(spec);
    (w[2], w[4], w[5])
}

fn stage_body<T: Element>(
    spec: &ModelSpec,
    in_ch: usize,
    out_ch: usize,
    depth: usize,
    src: &mut ParamSource,
) -> BlockNode<T> {
    match (spec.structure, spec.partial_ratio) {
        (Structure::BepC3, Some(ratio)) => {
            BlockNode::BepC3(BepC3::init(in_ch, out_ch, ratio, depth, src))
        }
        _ => BlockNode::RepBlock(RepBlock::conv_chain(in_ch, out_ch, depth, src)),
    }
}

/// Appends the backbone to `g` and returns the C3, C4, C5 node indices.
fn append_backbone<T: Element>(
    g: &mut NetworkGraph<T>,
    spec: &ModelSpec,
    src: &mut ParamSource,
) -> [usize; 3] {
    let depths = backbone_depths(spec);
    let widths = backbone_widths(spec);
    let input = g.add_input("input", spec.input_channels, 1);
    let mut prev = g.add_block(
        "stem",
        input,
        BlockNode::RepConv(RepLayer::init(spec.input_channels, widths[0], 2, src)),
    );
    let mut outs = Vec::with_capacity(4);
    for stage in 1..5 {
        let down = RepLayer::init(widths[stage - 1], widths[stage], 2, src);
        prev = g.add_block(&format!("stage{stage}.down"), prev, BlockNode::RepConv(down));
        let body = stage_body(spec, widths[stage], widths[stage], depths[stage], src);
        prev = g.add_block(&format!("stage{stage}.body"), prev, body);
        outs.push(prev);
    }
    [outs[1], outs[2], outs[3]]
}

/// Appends the PAN neck reading `c3`, `c4`, `c5`; returns the P3, P4, P5 taps.
fn append_neck<T: Element>(
    g: &mut NetworkGraph<T>,
    spec: &ModelSpec,
    [c3, c4, c5]: [usize; 3],
    src: &mut ParamSource,
) -> [usize; 3] {
    let d = neck_depths(spec);
    let [lat5_w, lat4_w, out3_w, down_w, out4_w, out5_w] = neck_widths(spec);
    let ch = |g: &NetworkGraph<T>, i: usize| g.nodes[i].out_ch;

    // top-down
    let lat5 = g.add_block(
        "neck.lateral_p5",
        c5,
        BlockNode::Conv(ConvModule::init(ch(g, c5), lat5_w, 1, 1, src)),
    );
    let up5 = g.add_upsample("neck.upsample_p5", lat5);
    let cat4 = g.add_concat("neck.concat_p4", &[up5, c4]);
    let td4_body = stage_body(spec, ch(g, cat4), lat5_w, d[0], src);
    let td4 = g.add_block("neck.topdown_p4", cat4, td4_body);
    let lat4 = g.add_block(
        "neck.lateral_p4",
        td4,
        BlockNode::Conv(ConvModule::init(lat5_w, lat4_w, 1, 1, src)),
    );
    let up4 = g.add_upsample("neck.upsample_p4", lat4);
    let cat3 = g.add_concat("neck.concat_p3", &[up4, c3]);
    let p3_body = stage_body(spec, ch(g, cat3), out3_w, d[1], src);
    let p3 = g.add_block("neck.out_p3", cat3, p3_body);

    // bottom-up
    let down3 = g.add_block(
        "neck.downsample_p3",
        p3,
        BlockNode::Conv(ConvModule::init(out3_w, down_w, 3, 2, src)),
    );
    let cat_n4 = g.add_concat("neck.concat_n4", &[down3, lat4]);
    let p4_body = stage_body(spec, ch(g, cat_n4), out4_w, d[2], src);
    let p4 = g.add_block("neck.out_p4", cat_n4, p4_body);
    let down4 = g.add_block(
        "neck.downsample_p4",
        p4,
        BlockNode::Conv(ConvModule::init(out4_w, down_w, 3, 2, src)),
    );
    let cat_n5 = g.add_concat("neck.concat_n5", &[down4, lat5]);
    let p5_body = stage_body(spec, ch(g, cat_n5), out5_w, d[3], src);
    let p5 = g.add_block("neck.out_p5", cat_n5, p5_body);
    [p3, p4, p5]
}

/// Backbone alone; its taps are the stride 8/16/32 stage outputs.
pub fn build_backbone<T: Element>(spec: &ModelSpec, init: Init) -> Result<NetworkGraph<T>> {
    let mut g = NetworkGraph::new(Some(spec.clone()));
    let mut src = ParamSource::new(init);
    g.taps = append_backbone(&mut g, spec, &mut src);
    g.validate()?;
    Ok(g)
}

/// Neck alone, reading three inputs shaped like the backbone's C3/C4/C5.
pub fn build_neck<T: Element>(spec: &ModelSpec, init: Init) -> Result<NetworkGraph<T>> {
    let mut g = NetworkGraph::new(Some(spec.clone()));
    let mut src = ParamSource::new(init);
    let w = backbone_widths(spec);
    let c3 = g.add_input("c3", w[2], 8);
    let c4 = g.add_input("c4", w[3], 16);
    let c5 = g.add_input("c5", w[4], 32);
    g.taps = append_neck(&mut g, spec, [c3, c4, c5], &mut src);
    g.validate()?;
    Ok(g)
}

/// Backbone followed by neck; taps are the neck's P3, P4, P5.
pub fn build_model<T: Element>(spec: &ModelSpec, init: Init) -> Result<NetworkGraph<T>> {
    let mut g = NetworkGraph::new(Some(spec.clone()));
    let mut src = ParamSource::new(init);
    let cs = append_backbone(&mut g, spec, &mut src);
    g.taps = append_neck(&mut g, spec, cs, &mut src);
    g.validate()?;
    Ok(g)
}
