use proptest::prelude::*;

use repblocks::analyzer::{analyze_model, count_flops, count_params, roofline, Bound, HardwareProfile, LayerCost, LayerKind};
use repblocks::arch::{build_model, fuse_model, GraphMode, ModelSpec, NetworkGraph, Node, Op, Variant, Version};
use repblocks::blocks::{BlockNode, ConvModule};
use repblocks::init::{Init, ParamSource};
use repblocks::tensor::Dims;

/// A graph holding one fused conv (bias, no BN, ReLU) for an input of stride 1.
fn single_conv(cin: usize, cout: usize, k: usize, stride: usize) -> NetworkGraph<f32> {
    let c = ConvModule::<f32>::init(cin, cout, k, stride, &mut ParamSource::new(Init::Zeros)).fuse().unwrap();
    let mut g = NetworkGraph::empty();
    g.nodes = vec![
        Node { name: "in".into(), op: Op::Input, inputs: vec![], out_ch: cin, stride: 1 },
        Node { name: "conv".into(), op: Op::Block(BlockNode::Conv(c)), inputs: vec![0], out_ch: cout, stride },
    ];
    g.mode = GraphMode::Fused;
    g
}

fn layer(flops: u64, bytes: u64) -> LayerCost {
    LayerCost { name: "x".into(), kind: LayerKind::Conv, params: 0, flops, bytes_moved: bytes, output: Dims::new(1, 1, 1, 1) }
}

proptest! {
    #[test]
    fn conv_flops_closed_form(cin in 1usize..64, cout in 1usize..64, k in prop_oneof![Just(1usize), Just(3)], stride in 1usize..=2, h in 1usize..40, w in 1usize..40, n in 1usize..3) {
        let g = single_conv(cin, cout, k, stride);
        let (ho, wo) = ((h + 2 * (k / 2) - k) / stride + 1, (w + 2 * (k / 2) - k) / stride + 1);
        let relu = n * cout * ho * wo;
        let conv = 2 * k * k * cin * cout * ho * wo * n;
        prop_assert_eq!(count_flops(&g, Dims::new(n, cin, h, w)).unwrap(), (conv + relu) as u64);
        prop_assert_eq!(count_params(&g), (k * k * cin * cout + cout) as u64);
    }

    #[test]
    fn classification_flips_at_the_ridge(ridge in 1u64..64, bw in 1u64..1000, bytes in 1u64..100_000) {
        let hw = HardwareProfile::new("p", (ridge * bw) as f64, bw as f64).unwrap();
        prop_assert_eq!(roofline(&layer(ridge * bytes, bytes), &hw).bound, Bound::Compute);
        prop_assert_eq!(roofline(&layer(ridge * bytes - 1, bytes), &hw).bound, Bound::Memory);
        prop_assert_eq!(roofline(&layer(ridge * bytes + 1, bytes), &hw).bound, Bound::Compute);
    }

    #[test]
    fn attainable_never_exceeds_either_roof(flops in 0u64..1_000_000, bytes in 1u64..1_000_000, peak in 1.0f64..1e13, bw in 1.0f64..1e12) {
        let hw = HardwareProfile::new("p", peak, bw).unwrap();
        let r = roofline(&layer(flops, bytes), &hw);
        prop_assert!(r.attainable <= peak);
        prop_assert!(r.attainable <= bw * r.arithmetic_intensity * (1.0 + 1e-12));
        let faster = HardwareProfile::new("p", peak, 2.0 * bw).unwrap();
        prop_assert!(roofline(&layer(flops, bytes), &faster).attainable >= r.attainable);
    }
}

#[test]
fn fusion_shrinks_every_row() {
    let x = Dims::new(1, 3, 128, 128);
    let hw = HardwareProfile::new("p", 2e12, 2e11).unwrap();
    for spec in ModelSpec::all_named() {
        let g = build_model::<f32>(&spec, Init::Zeros).unwrap();
        let f = fuse_model(&g).unwrap();
        let (a, b) = (analyze_model(&g, x, &hw).unwrap(), analyze_model(&f, x, &hw).unwrap());
        assert!(b.totals.params < a.totals.params, "{}", spec.name());
        assert!(b.totals.flops < a.totals.flops);
        assert!(b.totals.bytes_moved < a.totals.bytes_moved);
        assert!(b.totals.memory_bound_layers < a.totals.memory_bound_layers);
        assert!(b.totals.roofline_time_s < a.totals.roofline_time_s);
    }
}

#[test]
fn bytes_scale_with_precision() {
    let spec = ModelSpec::named(Version::V1, Variant::N).unwrap();
    let x = Dims::new(1, 3, 64, 64);
    let hw = HardwareProfile::new("p", 1e12, 1e11).unwrap();
    let a = analyze_model(&build_model::<f32>(&spec, Init::Zeros).unwrap(), x, &hw).unwrap();
    let b = analyze_model(&build_model::<f64>(&spec, Init::Zeros).unwrap(), x, &hw).unwrap();
    assert_eq!(2 * a.totals.bytes_moved, b.totals.bytes_moved);
    assert_eq!(a.totals.flops, b.totals.flops);
}
