//! Parameter, FLOP and memory-traffic accounting with per-layer roofline
//! classification.
//!
//! Conventions:
//! - FLOPs count a multiply-accumulate as two operations; conv bias adds
//!   are not counted. An unfolded batch norm costs 2 FLOPs per element, add
//!   and ReLU 1 FLOP per element, concat and upsample none.
//! - `bytes_moved` is weights + inputs + outputs, each crossing memory once,
//!   at the element width of the graph.
//! - A layer is memory-bound iff `bandwidth * intensity < peak`; the ridge
//!   point itself counts as compute-bound.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::arch::{fuse_model, GraphMode, NetworkGraph, Op};
use crate::blocks::{BepC3, BepUnit, BlockNode, ConvModule, RepBlock, RepBlockBody, RepLayer};
use crate::error::{Error, Result};
use crate::repconv::{Activation, FusedConv, RepConvTrain};
use crate::tensor::{ConvParams, Dims, Element, Precision};

pub const CONVENTIONS: &str = "FLOPs = 2 x MACs (bias excluded); BN 2 FLOP/elem, add/relu 1 FLOP/elem; \
bytes = weights + inputs + outputs, each moved once; ridge ties are compute-bound";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HardwareProfile {
    pub name: String,
    /// FLOP/s.
    pub peak_compute: f64,
    /// Bytes/s.
    pub mem_bandwidth: f64,
}

impl HardwareProfile {
    pub fn new(name: impl Into<String>, peak_compute: f64, mem_bandwidth: f64) -> Result<Self> {
        if !(peak_compute > 0.0 && peak_compute.is_finite())
            || !(mem_bandwidth > 0.0 && mem_bandwidth.is_finite())
        {
            return Err(Error::InvalidSpec(format!(
                "hardware profile needs positive finite peak and bandwidth, got {peak_compute} and {mem_bandwidth}"
            )));
        }
        Ok(HardwareProfile {
            name: name.into(),
            peak_compute,
            mem_bandwidth,
        })
    }

    /// Intensity (FLOP/byte) where the two roofs meet.
    pub fn ridge_point(&self) -> f64 {
        self.peak_compute / self.mem_bandwidth
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv,
    BatchNorm,
    Add,
    Relu,
    Concat,
    Upsample,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bound {
    Compute,
    Memory,
}

/// Hardware-independent cost of one primitive layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerCost {
    pub name: String,
    pub kind: LayerKind,
    pub params: u64,
    pub flops: u64,
    pub bytes_moved: u64,
    pub output: Dims,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub name: String,
    pub kind: LayerKind,
    pub params: u64,
    pub flops: u64,
    pub bytes_moved: u64,
    /// FLOPs per byte.
    pub arithmetic_intensity: f64,
    pub bound: Bound,
    /// FLOP/s.
    pub attainable: f64,
    /// `max(flops / peak, bytes / bandwidth)`.
    pub roofline_time_s: f64,
}

/// Places a layer on the roofline of `hw`.
pub fn roofline(l: &LayerCost, hw: &HardwareProfile) -> LayerReport {
    let intensity = if l.bytes_moved == 0 {
        f64::INFINITY
    } else {
        l.flops as f64 / l.bytes_moved as f64
    };
    let memory_roof = hw.mem_bandwidth * intensity;
    let bound = if memory_roof < hw.peak_compute {
        Bound::Memory
    } else {
        Bound::Compute
    };
    LayerReport {
        name: l.name.clone(),
        kind: l.kind,
        params: l.params,
        flops: l.flops,
        bytes_moved: l.bytes_moved,
        arithmetic_intensity: intensity,
        bound,
        attainable: hw.peak_compute.min(memory_roof),
        roofline_time_s: (l.flops as f64 / hw.peak_compute)
            .max(l.bytes_moved as f64 / hw.mem_bandwidth),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Totals {
    pub layers: usize,
    pub params: u64,
    pub flops: u64,
    pub bytes_moved: u64,
    pub memory_bound_layers: usize,
    pub memory_bound_flops: u64,
    pub memory_bound_flop_fraction: f64,
    pub roofline_time_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub conventions: String,
    pub model: Option<String>,
    pub mode: GraphMode,
    pub precision: Precision,
    pub input: Dims,
    pub hardware: HardwareProfile,
    pub ridge_point: f64,
    pub layers: Vec<LayerReport>,
    pub totals: Totals,
}

impl AnalysisReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn totals(layers: &[LayerReport]) -> Totals {
    let flops: u64 = layers.iter().map(|l| l.flops).sum();
    let mem: Vec<&LayerReport> = layers.iter().filter(|l| l.bound == Bound::Memory).collect();
    let memory_bound_flops: u64 = mem.iter().map(|l| l.flops).sum();
    Totals {
        layers: layers.len(),
        params: layers.iter().map(|l| l.params).sum(),
        flops,
        bytes_moved: layers.iter().map(|l| l.bytes_moved).sum(),
        memory_bound_layers: mem.len(),
        memory_bound_flops,
        memory_bound_flop_fraction: if flops == 0 {
            0.0
        } else {
            memory_bound_flops as f64 / flops as f64
        },
        roofline_time_s: layers.iter().map(|l| l.roofline_time_s).sum(),
    }
}

/// Lowers a graph into primitive layers for an input of `input` dims.
struct Tracer {
    elem: u64,
    layers: Vec<LayerCost>,
}

impl Tracer {
    fn push(&mut self, name: String, kind: LayerKind, params: u64, flops: u64, moved: u64, output: Dims) {
        self.layers.push(LayerCost {
            name,
            kind,
            params,
            flops,
            bytes_moved: moved * self.elem,
            output,
        });
    }

    fn conv<T: Element>(&mut self, name: String, p: &ConvParams<T>, x: Dims) -> Result<Dims> {
        let y = p.output_dims(x)?;
        let k = p.k() as u64;
        let macs = k * k * (p.in_ch() / p.groups) as u64 * y.len() as u64;
        let params = p.param_count() as u64;
        self.push(
            name,
            LayerKind::Conv,
            params,
            2 * macs,
            params + x.len() as u64 + y.len() as u64,
            y,
        );
        Ok(y)
    }

    fn bn(&mut self, name: String, ch: usize, x: Dims) {
        let n = x.len() as u64;
        self.push(name, LayerKind::BatchNorm, 4 * ch as u64, 2 * n, 4 * ch as u64 + 2 * n, x);
    }

    fn add(&mut self, name: String, x: Dims) {
        let n = x.len() as u64;
        self.push(name, LayerKind::Add, 0, n, 3 * n, x);
    }

    fn act(&mut self, name: String, a: Activation, x: Dims) {
        if a == Activation::Relu {
            let n = x.len() as u64;
            self.push(name, LayerKind::Relu, 0, n, 2 * n, x);
        }
    }

    fn rep_train<T: Element>(&mut self, name: &str, rc: &RepConvTrain<T>, x: Dims) -> Result<Dims> {
        let y = self.conv(format!("{name}.conv3x3"), &rc.dense.conv, x)?;
        self.bn(format!("{name}.bn3x3"), rc.out_ch, y);
        self.conv(format!("{name}.conv1x1"), &rc.pointwise.conv, x)?;
        self.bn(format!("{name}.bn1x1"), rc.out_ch, y);
        self.add(format!("{name}.add"), y);
        if rc.identity.is_some() {
            self.bn(format!("{name}.bn_identity"), rc.out_ch, x);
            self.add(format!("{name}.add_identity"), y);
        }
        self.act(format!("{name}.relu"), rc.activation, y);
        Ok(y)
    }

    fn rep_fused<T: Element>(&mut self, name: &str, fc: &FusedConv<T>, x: Dims) -> Result<Dims> {
        let y = self.conv(format!("{name}.conv"), &fc.params, x)?;
        self.act(format!("{name}.relu"), fc.activation, y);
        Ok(y)
    }

    fn rep<T: Element>(&mut self, name: &str, l: &RepLayer<T>, x: Dims) -> Result<Dims> {
        match l {
            RepLayer::Train(rc) => self.rep_train(name, rc, x),
            RepLayer::Fused(fc) => self.rep_fused(name, fc, x),
        }
    }

    fn conv_module<T: Element>(&mut self, name: &str, c: &ConvModule<T>, x: Dims) -> Result<Dims> {
        let y = self.conv(format!("{name}.conv"), &c.conv, x)?;
        if c.bn.is_some() {
            self.bn(format!("{name}.bn"), c.out_ch(), y);
        }
        self.act(format!("{name}.relu"), c.activation, y);
        Ok(y)
    }

    fn bep_unit<T: Element>(&mut self, name: &str, u: &BepUnit<T>, x: Dims) -> Result<Dims> {
        let mut y = x;
        for (i, c) in u.convs.iter().enumerate() {
            y = self.rep(&format!("{name}.rep{i}"), c, y)?;
        }
        if u.shortcut {
            self.add(format!("{name}.shortcut"), y);
        }
        Ok(y)
    }

    fn rep_block<T: Element>(&mut self, name: &str, b: &RepBlock<T>, x: Dims) -> Result<Dims> {
        let mut y = x;
        match &b.body {
            RepBlockBody::Convs(convs) => {
                for (i, c) in convs.iter().enumerate() {
                    y = self.rep(&format!("{name}.rep{i}"), c, y)?;
                }
            }
            RepBlockBody::Bep(units) => {
                for (i, u) in units.iter().enumerate() {
                    y = self.bep_unit(&format!("{name}.unit{i}"), u, y)?;
                }
            }
        }
        Ok(y)
    }

    fn bepc3<T: Element>(&mut self, name: &str, b: &BepC3<T>, x: Dims) -> Result<Dims> {
        let a = self.conv_module(&format!("{name}.split_a"), &b.split_a, x)?;
        let a = self.rep_block(&format!("{name}.inner"), &b.inner, a)?;
        let c = self.conv_module(&format!("{name}.split_b"), &b.split_b, x)?;
        let cat = Dims { c: a.c + c.c, ..a };
        self.push(
            format!("{name}.concat"),
            LayerKind::Concat,
            0,
            0,
            (a.len() + c.len() + cat.len()) as u64,
            cat,
        );
        self.conv_module(&format!("{name}.merge"), &b.merge, cat)
    }

    fn block<T: Element>(&mut self, name: &str, b: &BlockNode<T>, x: Dims) -> Result<Dims> {
        match b {
            BlockNode::RepConv(l) => self.rep(name, l, x),
            BlockNode::Conv(c) => self.conv_module(name, c, x),
            BlockNode::BepUnit(u) => self.bep_unit(name, u, x),
            BlockNode::RepBlock(rb) => self.rep_block(name, rb, x),
            BlockNode::BepC3(c) => self.bepc3(name, c, x),
        }
    }
}

/// Primitive layers of `g` for an image of `input` dims, in execution order.
pub fn trace_graph<T: Element>(g: &NetworkGraph<T>, input: Dims) -> Result<Vec<LayerCost>> {
    let mut t = Tracer {
        elem: T::PRECISION.byte_width() as u64,
        layers: Vec::new(),
    };
    let mut dims: Vec<Dims> = Vec::with_capacity(g.nodes.len());
    for node in &g.nodes {
        let d = match &node.op {
            Op::Input => {
                if !input.h.is_multiple_of(node.stride) || !input.w.is_multiple_of(node.stride) {
                    return Err(Error::InvalidShape(format!(
                        "input {}x{} is not divisible by stride {} of {}",
                        input.h, input.w, node.stride, node.name
                    )));
                }
                Dims::new(input.n, node.out_ch, input.h / node.stride, input.w / node.stride)
            }
            Op::Block(b) => t.block(&node.name, b, dims[node.inputs[0]])?,
            Op::Upsample => {
                let x = dims[node.inputs[0]];
                let y = Dims { h: 2 * x.h, w: 2 * x.w, ..x };
                t.push(
                    node.name.clone(),
                    LayerKind::Upsample,
                    0,
                    0,
                    (x.len() + y.len()) as u64,
                    y,
                );
                y
            }
            Op::Concat => {
                let ins: Vec<Dims> = node.inputs.iter().map(|&i| dims[i]).collect();
                let y = Dims {
                    c: ins.iter().map(|d| d.c).sum(),
                    ..ins[0]
                };
                let moved = ins.iter().map(Dims::len).sum::<usize>() + y.len();
                t.push(node.name.clone(), LayerKind::Concat, 0, 0, moved as u64, y);
                y
            }
        };
        dims.push(d);
    }
    Ok(t.layers)
}

/// All weight, bias and batch-norm parameters of `g`.
pub fn count_params<T: Element>(g: &NetworkGraph<T>) -> u64 {
    g.param_count() as u64
}

pub fn count_flops<T: Element>(g: &NetworkGraph<T>, input: Dims) -> Result<u64> {
    Ok(trace_graph(g, input)?.iter().map(|l| l.flops).sum())
}

pub fn analyze_model<T: Element>(
    g: &NetworkGraph<T>,
    input: Dims,
    hw: &HardwareProfile,
) -> Result<AnalysisReport> {
    let layers: Vec<LayerReport> = trace_graph(g, input)?
        .iter()
        .map(|l| roofline(l, hw))
        .collect();
    Ok(AnalysisReport {
        conventions: CONVENTIONS.into(),
        model: g.spec.as_ref().map(|s| s.name()),
        mode: g.mode,
        precision: T::PRECISION,
        input,
        hardware: hw.clone(),
        ridge_point: hw.ridge_point(),
        totals: totals(&layers),
        layers,
    })
}

/// One structure's row in a block-structure comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub train_params: u64,
    pub fused_params: u64,
    pub fused_flops: u64,
    pub fused_bytes_moved: u64,
    pub fused_layers: usize,
    pub memory_bound_layers: usize,
    pub memory_bound_flop_fraction: f64,
    pub roofline_time_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub conventions: String,
    pub input: Dims,
    pub hardware: HardwareProfile,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Compares training-form graphs after fusion, one row per labelled graph.
pub fn compare_structures<T: Element>(
    graphs: &[(&str, &NetworkGraph<T>)],
    input: Dims,
    hw: &HardwareProfile,
) -> Result<AblationReport> {
    let rows = graphs
        .iter()
        .map(|(label, g)| {
            let fused = if g.mode == GraphMode::Fused {
                (*g).clone()
            } else {
                fuse_model(g)?
            };
            let r = analyze_model(&fused, input, hw)?;
            Ok(AblationRow {
                label: label.to_string(),
                train_params: count_params(g),
                fused_params: r.totals.params,
                fused_flops: r.totals.flops,
                fused_bytes_moved: r.totals.bytes_moved,
                fused_layers: r.totals.layers,
                memory_bound_layers: r.totals.memory_bound_layers,
                memory_bound_flop_fraction: r.totals.memory_bound_flop_fraction,
                roofline_time_s: r.totals.roofline_time_s,
            })
        })
        .collect::<Result<_>>()?;
    Ok(AblationReport {
        conventions: CONVENTIONS.into(),
        input,
        hardware: hw.clone(),
        rows,
    })
}

fn si(v: f64) -> String {
    let (scale, unit) = [(1e12, "T"), (1e9, "G"), (1e6, "M"), (1e3, "K")]
        .into_iter()
        .find(|(s, _)| v.abs() >= *s)
        .unwrap_or((1.0, ""));
    format!("{:.3}{unit}", v / scale)
}

impl fmt::Display for AnalysisReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "# {}", self.conventions)?;
        writeln!(
            f,
            "# model {} ({:?}, {:?}) input {} on {}: peak {} FLOP/s, bandwidth {} B/s, ridge {:.3} FLOP/B",
            self.model.as_deref().unwrap_or("-"),
            self.mode,
            self.precision,
            self.input,
            self.hardware.name,
            si(self.hardware.peak_compute),
            si(self.hardware.mem_bandwidth),
            self.ridge_point
        )?;
        writeln!(
            f,
            "{:<44} {:<10} {:>10} {:>10} {:>10} {:>9} {:<7} {:>12}",
            "layer", "kind", "params", "flops", "bytes", "flop/B", "bound", "attainable"
        )?;
        for l in &self.layers {
            writeln!(
                f,
                "{:<44} {:<10} {:>10} {:>10} {:>10} {:>9.3} {:<7} {:>12}",
                l.name,
                format!("{:?}", l.kind),
                l.params,
                si(l.flops as f64),
                si(l.bytes_moved as f64),
                l.arithmetic_intensity,
                match l.bound {
                    Bound::Compute => "compute",
                    Bound::Memory => "memory",
                },
                si(l.attainable)
            )?;
        }
        let t = &self.totals;
        writeln!(
            f,
            "total: {} layers, {} params, {} FLOPs, {} bytes, {} memory-bound layers ({:.2}% of FLOPs), roofline time {:.6e} s",
            t.layers,
            t.params,
            t.flops,
            t.bytes_moved,
            t.memory_bound_layers,
            100.0 * t.memory_bound_flop_fraction,
            t.roofline_time_s
        )
    }
}

impl fmt::Display for AblationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "# {}", self.conventions)?;
        writeln!(
            f,
            "# input {} on {}: peak {} FLOP/s, bandwidth {} B/s",
            self.input,
            self.hardware.name,
            si(self.hardware.peak_compute),
            si(self.hardware.mem_bandwidth)
        )?;
        writeln!(
            f,
            "{:<28} {:>12} {:>12} {:>14} {:>14} {:>8} {:>8} {:>9} {:>12}",
            "structure", "train params", "fused params", "fused FLOPs", "fused bytes", "layers", "mem-bnd", "mem FLOP%", "roofline s"
        )?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<28} {:>12} {:>12} {:>14} {:>14} {:>8} {:>8} {:>9.2} {:>12.6e}",
                r.label,
                r.train_params,
                r.fused_params,
                r.fused_flops,
                r.fused_bytes_moved,
                r.fused_layers,
                r.memory_bound_layers,
                100.0 * r.memory_bound_flop_fraction,
                r.roofline_time_s
            )?;
        }
        if let [a, b] = &self.rows[..] {
            let pct = |x: u64, y: u64| 100.0 * (y as f64 - x as f64) / x as f64;
            writeln!(
                f,
                "delta {} -> {}: params {:+.2}%, FLOPs {:+.2}%, bytes {:+.2}%, roofline time {:+.2}%",
                a.label,
                b.label,
                pct(a.fused_params, b.fused_params),
                pct(a.fused_flops, b.fused_flops),
                pct(a.fused_bytes_moved, b.fused_bytes_moved),
                100.0 * (b.roofline_time_s - a.roofline_time_s) / a.roofline_time_s
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{build_model, ModelSpec, Variant, Version};
    use crate::init::Init;
    use crate::tensor::Kernel;

    fn profile(peak: f64, bw: f64) -> HardwareProfile {
        HardwareProfile::new("test", peak, bw).unwrap()
    }

    fn cost(flops: u64, bytes: u64) -> LayerCost {
        LayerCost {
            name: "l".into(),
            kind: LayerKind::Conv,
            params: 0,
            flops,
            bytes_moved: bytes,
            output: Dims::new(1, 1, 1, 1),
        }
    }

    #[test]
    fn roofline_examples() {
        let hw = profile(100e9, 10e9);
        let r = roofline(&cost(500, 100), &hw);
        assert_eq!(r.arithmetic_intensity, 5.0);
        assert_eq!(r.attainable, 50e9);
        assert_eq!(r.bound, Bound::Memory);

        let r = roofline(&cost(1000, 100), &hw);
        assert_eq!(r.attainable, 100e9);
        assert_eq!(r.bound, Bound::Compute);

        let r = roofline(&cost(2000, 100), &hw);
        assert_eq!(r.attainable, 100e9);
        assert_eq!(r.bound, Bound::Compute);
    }

    #[test]
    fn rejects_bad_profiles() {
        assert!(HardwareProfile::new("x", 0.0, 1.0).is_err());
        assert!(HardwareProfile::new("x", 1.0, -1.0).is_err());
        assert!(HardwareProfile::new("x", 1.0, f64::INFINITY).is_err());
    }

    #[test]
    fn conv_flops_closed_form() {
        let mut t = Tracer { elem: 4, layers: vec![] };
        let p = ConvParams {
            weight: Kernel::<f32>::zeros(16, 16, 3),
            bias: None,
            stride: 1,
            padding: 1,
            groups: 1,
        };
        t.conv("c".into(), &p, Dims::new(1, 16, 8, 8)).unwrap();
        assert_eq!(t.layers[0].flops, 294_912);
        let p = ConvParams {
            weight: Kernel::<f32>::zeros(1, 1, 1),
            bias: None,
            stride: 1,
            padding: 0,
            groups: 1,
        };
        t.conv("c".into(), &p, Dims::new(1, 1, 1, 1)).unwrap();
        assert_eq!(t.layers[1].flops, 2);
    }

    #[test]
    fn fused_conv_params() {
        let fc = RepConvTrain::<f32>::zeros(16, 16, 1, Activation::Relu).fuse().unwrap();
        let mut g = NetworkGraph::<f32>::empty();
        let i = g.add_input("in", 16, 1);
        g.add_block("c", i, BlockNode::RepConv(RepLayer::Fused(fc)));
        assert_eq!(count_params(&g), 2320);
        assert_eq!(count_params(&NetworkGraph::<f32>::empty()), 0);
    }

    #[test]
    fn totals_are_additive() {
        let s = ModelSpec::named(Version::V2, Variant::S).unwrap();
        let g = build_model::<f32>(&s, Init::Zeros).unwrap();
        let r = analyze_model(&g, Dims::new(1, 3, 64, 64), &profile(1e12, 1e11)).unwrap();
        assert_eq!(r.totals.params, count_params(&g));
        assert_eq!(r.totals.flops, r.layers.iter().map(|l| l.flops).sum::<u64>());
        assert_eq!(r.totals.bytes_moved, r.layers.iter().map(|l| l.bytes_moved).sum::<u64>());
        assert_eq!(r.totals.layers, r.layers.len());
        let text = r.to_string();
        assert!(text.contains("2 x MACs"));
        let back: AnalysisReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back.totals, r.totals);
    }

    #[test]
    fn fusion_reduces_cost() {
        let s = ModelSpec::named(Version::V1, Variant::N).unwrap();
        let g = build_model::<f32>(&s, Init::Random(3)).unwrap();
        let f = fuse_model(&g).unwrap();
        let x = Dims::new(1, 3, 64, 64);
        for hw in [profile(1e12, 1e11), profile(5e11, 1e12), profile(1e13, 1e11)] {
            let a = analyze_model(&g, x, &hw).unwrap();
            let b = analyze_model(&f, x, &hw).unwrap();
            assert!(b.totals.params < a.totals.params);
            assert!(b.totals.flops < a.totals.flops);
            assert!(b.totals.bytes_moved < a.totals.bytes_moved);
            assert!(b.totals.memory_bound_layers < a.totals.memory_bound_layers);
        }
    }

    #[test]
    fn branch_overhead_matches_param_delta() {
        let s = ModelSpec::named(Version::V2, Variant::M).unwrap();
        let g = build_model::<f32>(&s, Init::Zeros).unwrap();
        let f = fuse_model(&g).unwrap();
        // per RepConv: 1x1 weights + two BNs (+ identity BN) replaced by one bias;
        // per ConvModule: its BN replaced by one bias
        let mut overhead = 0u64;
        for (_, _, b) in g.blocks() {
            for leaf in b.leaves() {
                overhead += match leaf {
                    crate::blocks::Leaf::RepTrain(rc) => {
                        let (i, o) = (rc.in_ch as u64, rc.out_ch as u64);
                        let id = if rc.identity.is_some() { 4 * o } else { 0 };
                        i * o + 8 * o + id - o
                    }
                    crate::blocks::Leaf::Conv(c) => 3 * c.out_ch() as u64,
                    crate::blocks::Leaf::RepFused(_) => unreachable!(),
                };
            }
        }
        assert_eq!(count_params(&g) - count_params(&f), overhead);
    }

    #[test]
    fn doubling_bandwidth_never_slows_a_layer() {
        let s = ModelSpec::named(Version::V1, Variant::S).unwrap();
        let g = build_model::<f64>(&s, Init::Zeros).unwrap();
        let x = Dims::new(1, 3, 64, 64);
        let a = analyze_model(&g, x, &profile(1e12, 5e10)).unwrap();
        let b = analyze_model(&g, x, &profile(1e12, 1e11)).unwrap();
        for (l, m) in a.layers.iter().zip(&b.layers) {
            assert!(m.attainable >= l.attainable);
        }
        assert!(b.totals.memory_bound_layers <= a.totals.memory_bound_layers);
        assert_eq!(a.precision, Precision::F64);
    }
}
