//! Simplified computational graphs used as RL environment states.
//!
//! Nodes are feature maps (the stack input plus one per layer output)
//! and directed edges are ML operations. Reshapes are invisible: a
//! flatten neither adds a node nor an edge. A residual add contributes
//! one extra edge from its tap on top of the chain edge.

use crate::nn::{Encoder, Layer, ModelError};
use crate::tensor::Tensor;

/// Node feature columns: channel count, spatial element count.
pub const NODE_FEATS: usize = 2;
/// Edge feature columns: one-hot conv/linear/relu/add, then in-channels,
/// out-channels and kernel size. Numeric columns are normalized by the
/// per-graph maximum.
pub const EDGE_FEATS: usize = 7;

#[derive(Debug, Clone, PartialEq)]
pub struct CompGraph {
    /// `[n_nodes, NODE_FEATS]`
    pub node_feats: Tensor,
    /// `[n_edges, EDGE_FEATS]`
    pub edge_feats: Tensor,
    /// `(src, dst)` per edge, indices into the node list.
    pub edges: Vec<(usize, usize)>,
}

impl CompGraph {
    pub fn n_nodes(&self) -> usize {
        self.node_feats.shape()[0]
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }
}

fn shape_to_node_feat(shape: &[usize]) -> (f64, f64) {
    match shape.len() {
        1 => (shape[0] as f64, 1.0),
        3 => (shape[0] as f64, (shape[1] * shape[2]) as f64),
        _ => (shape.iter().product::<usize>() as f64, 1.0),
    }
}

fn activation_shapes(enc: &Encoder) -> Vec<Vec<usize>> {
    // re-walk the shapes the encoder validated at construction
    let mut shapes = vec![enc.input_shape().to_vec()];
    for layer in enc.layers() {
        let cur = shapes.last().unwrap().clone();
        let next = match layer {
            Layer::Linear { out_features, .. } => vec![*out_features],
            Layer::Conv2d {
                out_channels,
                kernel,
                stride,
                padding,
                ..
            } => {
                let oh = (cur[1] + 2 * padding - kernel) / stride + 1;
                let ow = (cur[2] + 2 * padding - kernel) / stride + 1;
                vec![*out_channels, oh, ow]
            }
            Layer::Relu | Layer::ResidualAdd { .. } => cur,
            Layer::Flatten => vec![cur.iter().product()],
        };
        shapes.push(next);
    }
    shapes
}

struct EdgeRec {
    src: usize,
    dst: usize,
    onehot: usize,
    in_c: f64,
    out_c: f64,
    kernel: f64,
}

/// Build the state graph of an encoder. Deterministic; node count is the
/// number of non-reshape layer outputs plus one input node.
pub fn build_graph(enc: &Encoder) -> Result<CompGraph, ModelError> {
    if enc.layers().is_empty() {
        return Err(ModelError::Contract("graph needs at least one layer".into()));
    }
    let shapes = activation_shapes(enc);

    // map activation index -> node id; flatten reuses its input's node
    let mut node_of_act: Vec<usize> = vec![0];
    let mut node_shapes: Vec<Vec<usize>> = vec![shapes[0].clone()];
    let mut edges: Vec<EdgeRec> = Vec::new();

    for (i, layer) in enc.layers().iter().enumerate() {
        let src = node_of_act[i];
        match layer {
            Layer::Flatten => {
                node_of_act.push(src);
            }
            _ => {
                let dst = node_shapes.len();
                node_shapes.push(shapes[i + 1].clone());
                node_of_act.push(dst);
                match layer {
                    Layer::Conv2d {
                        in_channels,
                        out_channels,
                        kernel,
                        ..
                    } => edges.push(EdgeRec {
                        src,
                        dst,
                        onehot: 0,
                        in_c: *in_channels as f64,
                        out_c: *out_channels as f64,
                        kernel: *kernel as f64,
                    }),
                    Layer::Linear {
                        in_features,
                        out_features,
                        ..
                    } => edges.push(EdgeRec {
                        src,
                        dst,
                        onehot: 1,
                        in_c: *in_features as f64,
                        out_c: *out_features as f64,
                        kernel: 0.0,
                    }),
                    Layer::Relu => {
                        let c = shapes[i + 1][0] as f64;
                        edges.push(EdgeRec {
                            src,
                            dst,
                            onehot: 2,
                            in_c: c,
                            out_c: c,
                            kernel: 0.0,
                        });
                    }
                    Layer::ResidualAdd { tap } => {
                        let c = shapes[i + 1][0] as f64;
                        edges.push(EdgeRec {
                            src,
                            dst,
                            onehot: 3,
                            in_c: c,
                            out_c: c,
                            kernel: 0.0,
                        });
                        edges.push(EdgeRec {
                            src: node_of_act[*tap],
                            dst,
                            onehot: 3,
                            in_c: c,
                            out_c: c,
                            kernel: 0.0,
                        });
                    }
                    Layer::Flatten => unreachable!(),
                }
            }
        }
    }
    if edges.is_empty() {
        return Err(ModelError::Contract(
            "graph needs at least one ML-operation edge".into(),
        ));
    }

    let n_nodes = node_shapes.len();
    let mut node_data = vec![0.0; n_nodes * NODE_FEATS];
    let feats: Vec<(f64, f64)> = node_shapes.iter().map(|s| shape_to_node_feat(s)).collect();
    let max_c = feats.iter().map(|f| f.0).fold(0.0, f64::max);
    let max_s = feats.iter().map(|f| f.1).fold(0.0, f64::max);
    for (i, &(c, s)) in feats.iter().enumerate() {
        node_data[i * NODE_FEATS] = if max_c > 0.0 { c / max_c } else { 0.0 };
        node_data[i * NODE_FEATS + 1] = if max_s > 0.0 { s / max_s } else { 0.0 };
    }

    let mut edge_data = vec![0.0; edges.len() * EDGE_FEATS];
    let max_in = edges.iter().map(|e| e.in_c).fold(0.0, f64::max);
    let max_out = edges.iter().map(|e| e.out_c).fold(0.0, f64::max);
    let max_k = edges.iter().map(|e| e.kernel).fold(0.0, f64::max);
    for (i, e) in edges.iter().enumerate() {
        let row = &mut edge_data[i * EDGE_FEATS..(i + 1) * EDGE_FEATS];
        row[e.onehot] = 1.0;
        row[4] = if max_in > 0.0 { e.in_c / max_in } else { 0.0 };
        row[5] = if max_out > 0.0 { e.out_c / max_out } else { 0.0 };
        row[6] = if max_k > 0.0 { e.kernel / max_k } else { 0.0 };
    }

    Ok(CompGraph {
        node_feats: Tensor::from_vec(vec![n_nodes, NODE_FEATS], node_data)
            .map_err(|e| ModelError::Contract(e.to_string()))?,
        edge_feats: Tensor::from_vec(vec![edges.len(), EDGE_FEATS], edge_data)
            .map_err(|e| ModelError::Contract(e.to_string()))?,
        edges: edges.iter().map(|e| (e.src, e.dst)).collect(),
    })
}
