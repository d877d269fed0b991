//! Actor-critic policy over computational graphs.
//!
//! One edge-conditioned message-passing layer embeds the graph, a mean
//! readout pools it, and an MLP head projects the embedding to per-layer
//! sparsity means squashed into `[0, a_max]`. A scalar linear head on
//! the same embedding provides value estimates. Gather and aggregation
//! run as matmuls against constant incidence matrices, so the whole
//! forward stays inside the fixed primitive set.

use super::graph::{CompGraph, EDGE_FEATS, NODE_FEATS};
use crate::autograd::{AutogradError, NodeId, ParamNodes, Tape};
use crate::params::ParamSet;
use crate::tensor::Tensor;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("agent contract violated: {0}")]
    Contract(String),
    #[error(transparent)]
    Autograd(#[from] AutogradError),
    #[error(transparent)]
    Model(#[from] crate::nn::ModelError),
    #[error(transparent)]
    Optim(#[from] crate::optim::OptimError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyNet {
    hidden: usize,
    n_actions: usize,
    /// Upper bound of the squashed action range.
    pub a_max: f64,
    /// Fixed standard deviation of the Gaussian action distribution.
    pub sigma: f64,
    params: ParamSet,
}

/// Names of the graph-encoder parameters, frozen under head-only
/// fine-tuning.
const GNN_PREFIX: &str = "gnn.";

impl PolicyNet {
    pub fn new(hidden: usize, n_actions: usize, a_max: f64, sigma: f64, seed: u64) -> Result<Self, AgentError> {
        if hidden == 0 || n_actions == 0 {
            return Err(AgentError::Contract(format!(
                "hidden {hidden} / n_actions {n_actions} must be positive"
            )));
        }
        if !(0.0 < a_max && a_max <= 1.0) {
            return Err(AgentError::Contract(format!("a_max {a_max} outside (0,1]")));
        }
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(AgentError::Contract(format!("sigma {sigma}")));
        }
        let mut rng = crate::rng::rng_for(seed, "policy-init", &[]);
        let mut params = ParamSet::new();
        let u = |rows: usize, cols: usize, rng: &mut rand_chacha::ChaCha8Rng| {
            let bound = 1.0 / (cols as f64).sqrt();
            Tensor::rand_uniform(&[rows, cols], -bound, bound, rng)
        };
        params.insert("gnn.node.weight", u(hidden, NODE_FEATS, &mut rng));
        params.insert("gnn.node.bias", Tensor::zeros(&[hidden]));
        params.insert("gnn.msg_node.weight", u(hidden, hidden, &mut rng));
        params.insert("gnn.msg_edge.weight", u(hidden, EDGE_FEATS, &mut rng));
        params.insert("gnn.msg.bias", Tensor::zeros(&[hidden]));
        params.insert("head.l1.weight", u(hidden, hidden, &mut rng));
        params.insert("head.l1.bias", Tensor::zeros(&[hidden]));
        params.insert("head.l2.weight", u(n_actions, hidden, &mut rng));
        params.insert("head.l2.bias", Tensor::zeros(&[n_actions]));
        params.insert("value.weight", u(1, hidden, &mut rng));
        params.insert("value.bias", Tensor::zeros(&[1]));
        Ok(PolicyNet {
            hidden,
            n_actions,
            a_max,
            sigma,
            params,
        })
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// The pre-trained graph encoder carries over to a model with a
    /// different number of maskable layers; the action head's output
    /// layer is re-sized and freshly initialized.
    pub fn retarget(&self, n_actions: usize, seed: u64) -> Result<PolicyNet, AgentError> {
        if n_actions == 0 {
            return Err(AgentError::Contract("n_actions must be positive".into()));
        }
        let mut rng = crate::rng::rng_for(seed, "policy-retarget", &[]);
        let mut params = ParamSet::new();
        for (name, t) in self.params.iter() {
            if name == "head.l2.weight" {
                let bound = 1.0 / (self.hidden as f64).sqrt();
                params.insert(
                    name,
                    Tensor::rand_uniform(&[n_actions, self.hidden], -bound, bound, &mut rng),
                );
            } else if name == "head.l2.bias" {
                params.insert(name, Tensor::zeros(&[n_actions]));
            } else {
                params.insert(name, t.clone());
            }
        }
        Ok(PolicyNet {
            hidden: self.hidden,
            n_actions,
            a_max: self.a_max,
            sigma: self.sigma,
            params,
        })
    }

    /// Parameter names updated during head-only fine-tuning: the MLP
    /// action head and the value head; the graph encoder stays frozen.
    pub fn head_param_names(&self) -> Vec<String> {
        self.params
            .names()
            .filter(|n| !n.starts_with(GNN_PREFIX))
            .map(String::from)
            .collect()
    }

    pub fn all_param_names(&self) -> Vec<String> {
        self.params.names().map(String::from).collect()
    }

    /// Graph-encoder parameters only, for frozen-weight assertions.
    pub fn gnn_params(&self) -> ParamSet {
        self.params
            .iter()
            .filter(|(n, _)| n.starts_with(GNN_PREFIX))
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect()
    }

    fn check_graph(&self, graph: &CompGraph) -> Result<(), AgentError> {
        if graph.node_feats.shape()[1] != NODE_FEATS
            || graph.edge_feats.shape()[1] != EDGE_FEATS
        {
            return Err(AgentError::Contract(format!(
                "graph feature widths {:?}/{:?} do not match the policy",
                graph.node_feats.shape(),
                graph.edge_feats.shape()
            )));
        }
        Ok(())
    }

    /// Differentiable forward. Returns `(action_mean [1,N], value [1,1])`
    /// tape nodes; `prefix` namespaces parameter lookups.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        nodes: &ParamNodes,
        prefix: &str,
        graph: &CompGraph,
    ) -> Result<(NodeId, NodeId), AgentError> {
        self.check_graph(graph)?;
        let n_nodes = graph.n_nodes();
        let n_edges = graph.n_edges();

        // constant incidence matrices of this graph
        let mut src_sel = Tensor::zeros(&[n_edges, n_nodes]);
        let mut indeg = vec![0usize; n_nodes];
        for (e, &(src, dst)) in graph.edges.iter().enumerate() {
            src_sel.data_mut()[e * n_nodes + src] = 1.0;
            indeg[dst] += 1;
        }
        let mut agg = Tensor::zeros(&[n_nodes, n_edges]);
        for (e, &(_, dst)) in graph.edges.iter().enumerate() {
            agg.data_mut()[dst * n_edges + e] = 1.0 / indeg[dst] as f64;
        }
        let readout = Tensor::full(&[1, n_nodes], 1.0 / n_nodes as f64);

        let id = |name: &str| format!("{prefix}{name}");

        let x = tape.input(graph.node_feats.clone())?;
        let h0 = tape.matmul_nt(x, nodes.id(&id("gnn.node.weight"))?)?;
        let h0 = tape.add_row_broadcast(h0, nodes.id(&id("gnn.node.bias"))?)?;
        let h0 = tape.relu(h0)?;

        let src_sel = tape.input(src_sel)?;
        let h_src = tape.matmul(src_sel, h0)?;
        let m_node = tape.matmul_nt(h_src, nodes.id(&id("gnn.msg_node.weight"))?)?;
        let e_feats = tape.input(graph.edge_feats.clone())?;
        let m_edge = tape.matmul_nt(e_feats, nodes.id(&id("gnn.msg_edge.weight"))?)?;
        let m = tape.add(m_node, m_edge)?;
        let m = tape.add_row_broadcast(m, nodes.id(&id("gnn.msg.bias"))?)?;
        let m = tape.relu(m)?;

        let agg = tape.input(agg)?;
        let pooled = tape.matmul(agg, m)?;
        let h1 = tape.add(h0, pooled)?;
        let h1 = tape.relu(h1)?;

        let readout = tape.input(readout)?;
        let g = tape.matmul(readout, h1)?;

        let h = tape.matmul_nt(g, nodes.id(&id("head.l1.weight"))?)?;
        let h = tape.add_row_broadcast(h, nodes.id(&id("head.l1.bias"))?)?;
        let h = tape.relu(h)?;
        let z = tape.matmul_nt(h, nodes.id(&id("head.l2.weight"))?)?;
        let z = tape.add_row_broadcast(z, nodes.id(&id("head.l2.bias"))?)?;
        let squashed = tape.sigmoid(z)?;
        let action_mean = tape.scale(squashed, self.a_max)?;

        let v = tape.matmul_nt(g, nodes.id(&id("value.weight"))?)?;
        let v = tape.add_row_broadcast(v, nodes.id(&id("value.bias"))?)?;

        Ok((action_mean, v))
    }

    /// Deterministic inference: per-layer sparsity means in `[0, a_max]`
    /// plus the value estimate.
    pub fn forward(&self, graph: &CompGraph) -> Result<(Vec<f64>, f64), AgentError> {
        let mut tape = Tape::new();
        let nodes = ParamNodes::register(&mut tape, &self.params)?;
        let (a, v) = self.forward_on_tape(&mut tape, &nodes, "", graph)?;
        Ok((tape.value(a).data().to_vec(), tape.value(v).item()))
    }
}
