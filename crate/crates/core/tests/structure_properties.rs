use proptest::prelude::*;

use repblocks::arch::{
    backbone_depths, backbone_widths, build_model, neck_depths, neck_widths, ModelSpec, Op, Structure, TAP_STRIDES,
};
use repblocks::blocks::{bep_units_for_depth, BepC3, BlockNode, PartialRatio, RepBlockBody};
use repblocks::init::{Init, ParamSource};

/// round-half-up(out * num / den) in integers
fn hidden_oracle(out: usize, num: usize, den: usize) -> usize {
    ((2 * out * num + den) / (2 * den)).max(1)
}

fn conv_module_params(cin: usize, cout: usize, k: usize) -> usize {
    cin * cout * k * k + 4 * cout
}

fn repconv_params(cin: usize, cout: usize) -> usize {
    // 3x3 + 1x1 weights, two BNs, identity BN
    9 * cin * cout + cin * cout + 8 * cout + 4 * cout
}

proptest! {
    #[test]
    fn bepc3_channel_accounting(out in 8usize..=256, third in any::<bool>(), cin in 1usize..64, depth in 1usize..4) {
        let (num, den, e) = if third { (2, 3, PartialRatio::TWO_THIRDS) } else { (1, 2, PartialRatio::HALF) };
        let hidden = hidden_oracle(out, num, den);
        prop_assert_eq!(e.hidden_width(out), hidden);

        let b = BepC3::<f32>::init(cin, out, e, depth, &mut ParamSource::new(Init::Zeros));
        b.validate().unwrap();
        prop_assert_eq!((b.split_a.in_ch(), b.split_a.out_ch()), (cin, hidden));
        prop_assert_eq!((b.split_b.in_ch(), b.split_b.out_ch()), (cin, hidden));
        prop_assert_eq!((b.merge.in_ch(), b.merge.out_ch()), (2 * hidden, out));
        let units = bep_units_for_depth(depth);
        let RepBlockBody::Bep(u) = &b.inner.body else { panic!("inner must be Bep units") };
        prop_assert_eq!(u.len(), units);

        let expected = 2 * conv_module_params(cin, hidden, 1)
            + conv_module_params(2 * hidden, out, 1)
            + 2 * units * repconv_params(hidden, hidden);
        prop_assert_eq!(b.param_count(), expected);
    }

    #[test]
    fn bep_unit_count_rule(depth in 1usize..100) {
        prop_assert_eq!(bep_units_for_depth(depth), (depth + 1) / 2);
    }
}

#[test]
fn every_row_builds_a_consistent_graph() {
    for spec in ModelSpec::all_named() {
        let g = build_model::<f32>(&spec, Init::Zeros).unwrap();
        g.validate().unwrap();
        let taps: Vec<usize> = g.taps.iter().map(|&t| g.nodes[t].stride).collect();
        assert_eq!(taps, TAP_STRIDES);
        for w in backbone_widths(&spec).iter().chain(&neck_widths(&spec)) {
            assert_eq!(w % 8, 0, "{}", spec.name());
        }
        assert_eq!(backbone_depths(&spec).len(), 5);
        assert_eq!(neck_depths(&spec).len(), 4);

        let bepc3: Vec<&BepC3<f32>> = g
            .nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::Block(BlockNode::BepC3(b)) => Some(b),
                _ => None,
            })
            .collect();
        match spec.structure {
            Structure::PureRep => assert!(bepc3.is_empty()),
            Structure::BepC3 => {
                assert_eq!(bepc3.len(), 8, "4 backbone stages + 4 neck blocks");
                assert!(bepc3.iter().all(|b| Some(b.partial_ratio) == spec.partial_ratio));
            }
        }
    }
}

#[test]
fn spec_files_match_named_rows() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for spec in ModelSpec::all_named() {
        let from_file = ModelSpec::from_path(dir.join(format!("{}.json", spec.name()))).unwrap();
        assert_eq!(from_file, spec);
    }
    let pure = ModelSpec::from_path(dir.join("yolov6m-v2-pure-rep.json")).unwrap();
    assert_eq!(pure.structure, Structure::PureRep);
}
