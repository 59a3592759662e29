use serde::{Deserialize, Serialize};

use crate::blocks::{fuse_block, BlockNode};
use crate::error::{Error, Result};
use crate::tensor::{concat_channels, upsample_nearest2x, Element, Tensor4};

use super::spec::ModelSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphMode {
    TrainForm,
    Fused,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Op<T> {
    /// External feature map entering the graph.
    Input,
    Block(BlockNode<T>),
    /// Nearest-neighbour ×2 upsampling.
    Upsample,
    /// Channel concatenation of the inputs, in order.
    Concat,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Node<T> {
    pub name: String,
    pub op: Op<T>,
    pub inputs: Vec<usize>,
    pub out_ch: usize,
    /// Cumulative stride relative to the graph input.
    pub stride: usize,
}

/// A feed-forward network in topological order with three pyramid taps.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkGraph<T> {
    pub nodes: Vec<Node<T>>,
    /// Node indices of the P3, P4, P5 outputs.
    pub taps: [usize; 3],
    pub mode: GraphMode,
    pub spec: Option<ModelSpec>,
}

pub const TAP_NAMES: [&str; 3] = ["P3", "P4", "P5"];
pub const TAP_STRIDES: [usize; 3] = [8, 16, 32];

impl<T: Element> NetworkGraph<T> {
    pub fn empty() -> Self {
        Self::new(None)
    }

    pub(crate) fn new(spec: Option<ModelSpec>) -> Self {
        NetworkGraph {
            nodes: Vec::new(),
            taps: [0; 3],
            mode: GraphMode::TrainForm,
            spec,
        }
    }

    pub(crate) fn add_input(&mut self, name: &str, channels: usize, stride: usize) -> usize {
        self.push(Node {
            name: name.into(),
            op: Op::Input,
            inputs: vec![],
            out_ch: channels,
            stride,
        })
    }

    pub(crate) fn add_block(&mut self, name: &str, input: usize, block: BlockNode<T>) -> usize {
        let stride = self.nodes[input].stride * block.stride();
        let out_ch = block.out_ch();
        self.push(Node {
            name: name.into(),
            op: Op::Block(block),
            inputs: vec![input],
            out_ch,
            stride,
        })
    }

    pub(crate) fn add_upsample(&mut self, name: &str, input: usize) -> usize {
        let src = &self.nodes[input];
        let (out_ch, stride) = (src.out_ch, src.stride / 2);
        self.push(Node {
            name: name.into(),
            op: Op::Upsample,
            inputs: vec![input],
            out_ch,
            stride,
        })
    }

    pub(crate) fn add_concat(&mut self, name: &str, inputs: &[usize]) -> usize {
        let out_ch = inputs.iter().map(|&i| self.nodes[i].out_ch).sum();
        let stride = self.nodes[inputs[0]].stride;
        self.push(Node {
            name: name.into(),
            op: Op::Concat,
            inputs: inputs.to_vec(),
            out_ch,
            stride,
        })
    }

    fn push(&mut self, node: Node<T>) -> usize {
        self.nodes.push(node);
        self.nodes.len() - 1
    }

    pub fn input_nodes(&self) -> Vec<usize> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.op, Op::Input))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn blocks(&self) -> impl Iterator<Item = (usize, &Node<T>, &BlockNode<T>)> {
        self.nodes.iter().enumerate().filter_map(|(i, n)| match &n.op {
            Op::Block(b) => Some((i, n, b)),
            _ => None,
        })
    }

    pub fn blocks_mut(&mut self) -> impl Iterator<Item = (usize, &mut BlockNode<T>)> {
        self.nodes.iter_mut().enumerate().filter_map(|(i, n)| match &mut n.op {
            Op::Block(b) => Some((i, b)),
            _ => None,
        })
    }

    pub fn param_count(&self) -> usize {
        self.blocks().map(|(_, _, b)| b.param_count()).sum()
    }

    /// Checks topological order, channel continuity on every edge, stride
    /// bookkeeping and the three pyramid taps.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidSpec(format!("graph: {msg}")));
        for (i, node) in self.nodes.iter().enumerate() {
            if node.inputs.iter().any(|&j| j >= i) {
                return bad(format!("node {} reads a later node", node.name));
            }
            let ins: Vec<&Node<T>> = node.inputs.iter().map(|&j| &self.nodes[j]).collect();
            match &node.op {
                Op::Input => {
                    if !ins.is_empty() {
                        return bad(format!("input {} has predecessors", node.name));
                    }
                }
                Op::Block(b) => {
                    let [src] = ins[..] else {
                        return bad(format!("block {} needs exactly one input", node.name));
                    };
                    if b.in_ch() != src.out_ch {
                        return bad(format!(
                            "{} expects {} channels but {} produces {}",
                            node.name,
                            b.in_ch(),
                            src.name,
                            src.out_ch
                        ));
                    }
                    if b.out_ch() != node.out_ch || src.stride * b.stride() != node.stride {
                        return bad(format!("{} has inconsistent bookkeeping", node.name));
                    }
                }
                Op::Upsample => {
                    let [src] = ins[..] else {
                        return bad(format!("upsample {} needs exactly one input", node.name));
                    };
                    if src.out_ch != node.out_ch || src.stride != 2 * node.stride {
                        return bad(format!("{} has inconsistent bookkeeping", node.name));
                    }
                }
                Op::Concat => {
                    if ins.len() < 2 {
                        return bad(format!("concat {} needs two or more inputs", node.name));
                    }
                    if ins.iter().any(|n| n.stride != node.stride) {
                        return bad(format!("concat {} mixes strides", node.name));
                    }
                    if ins.iter().map(|n| n.out_ch).sum::<usize>() != node.out_ch {
                        return bad(format!("concat {} channel sum is wrong", node.name));
                    }
                }
            }
        }
        for (k, &t) in self.taps.iter().enumerate() {
            let Some(node) = self.nodes.get(t) else {
                return bad(format!("tap {} points past the graph", TAP_NAMES[k]));
            };
            if node.stride != TAP_STRIDES[k] {
                return bad(format!(
                    "tap {} has stride {}, expected {}",
                    TAP_NAMES[k], node.stride, TAP_STRIDES[k]
                ));
            }
        }
        Ok(())
    }

    /// True when every block is in inference form.
    pub fn is_fully_fused(&self) -> bool {
        self.blocks().all(|(_, _, b)| b.is_fused())
    }

    /// Evaluates the graph on one tensor per input node; returns P3, P4, P5.
    pub fn forward_multi(&self, inputs: &[Tensor4<T>]) -> Result<[Tensor4<T>; 3]> {
        let input_ids = self.input_nodes();
        if inputs.len() != input_ids.len() {
            return Err(Error::InvalidShape(format!(
                "graph has {} inputs, got {} tensors",
                input_ids.len(),
                inputs.len()
            )));
        }
        // free intermediates after their last consumer
        let mut last_use = vec![0usize; self.nodes.len()];
        for (i, n) in self.nodes.iter().enumerate() {
            for &j in &n.inputs {
                last_use[j] = i;
            }
        }
        for &t in &self.taps {
            last_use[t] = usize::MAX;
        }

        let mut values: Vec<Option<Tensor4<T>>> = vec![None; self.nodes.len()];
        let mut next_input = inputs.iter();
        for (i, node) in self.nodes.iter().enumerate() {
            let get = |j: usize| -> &Tensor4<T> { values[j].as_ref().expect("topological order") };
            let out = match &node.op {
                Op::Input => {
                    let x = next_input.next().expect("counted above");
                    if x.dims().c != node.out_ch {
                        return Err(Error::ShapeMismatch {
                            op: "graph input",
                            dim: "channels",
                            expected: node.out_ch,
                            actual: x.dims().c,
                        });
                    }
                    x.clone()
                }
                Op::Block(b) => b.forward(get(node.inputs[0]))?,
                Op::Upsample => upsample_nearest2x(get(node.inputs[0])),
                Op::Concat => {
                    let mut acc = get(node.inputs[0]).clone();
                    for &j in &node.inputs[1..] {
                        acc = concat_channels(&acc, get(j))?;
                    }
                    acc
                }
            };
            values[i] = Some(out);
            for &j in &node.inputs {
                if last_use[j] == i {
                    values[j] = None;
                }
            }
        }
        let take = |k: usize| values[self.taps[k]].clone().expect("taps are kept");
        Ok([take(0), take(1), take(2)])
    }
}

/// Evaluates a single-input model and returns its P3, P4, P5 features.
pub fn forward_model<T: Element>(
    g: &NetworkGraph<T>,
    x: &Tensor4<T>,
) -> Result<(Tensor4<T>, Tensor4<T>, Tensor4<T>)> {
    let d = x.dims();
    if !d.h.is_multiple_of(32) || !d.w.is_multiple_of(32) {
        return Err(Error::InvalidShape(format!(
            "input spatial dims {}x{} must be divisible by 32",
            d.h, d.w
        )));
    }
    if g.input_nodes().len() != 1 {
        return Err(Error::InvalidShape("forward_model needs a single-input graph".into()));
    }
    let [p3, p4, p5] = g.forward_multi(std::slice::from_ref(x))?;
    Ok((p3, p4, p5))
}

/// Converts every block to inference form.
pub fn fuse_model<T: Element>(g: &NetworkGraph<T>) -> Result<NetworkGraph<T>> {
    if g.mode == GraphMode::Fused {
        return Err(Error::AlreadyFused);
    }
    let nodes = g
        .nodes
        .iter()
        .map(|n| {
            let op = match &n.op {
                Op::Block(b) => Op::Block(fuse_block(b)?),
                other => other.clone(),
            };
            Ok(Node {
                name: n.name.clone(),
                op,
                inputs: n.inputs.clone(),
                out_ch: n.out_ch,
                stride: n.stride,
            })
        })
        .collect::<Result<_>>()?;
    Ok(NetworkGraph {
        nodes,
        taps: g.taps,
        mode: GraphMode::Fused,
        spec: g.spec.clone(),
    })
}
