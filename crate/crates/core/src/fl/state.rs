//! Client/server state and the round-engine configuration.

use crate::agent::{AgentConfig, PolicyNet, PpoUpdater};
use crate::nn::{Encoder, Predictor, SalientSelection, WirePrecision};
use crate::params::ParamSet;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FlError {
    #[error("federation contract violated: {0}")]
    Contract(String),
    #[error(transparent)]
    Model(#[from] crate::nn::ModelError),
    #[error(transparent)]
    Agent(#[from] crate::agent::AgentError),
    #[error(transparent)]
    Autograd(#[from] crate::autograd::AutogradError),
    #[error(transparent)]
    Optim(#[from] crate::optim::OptimError),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
    #[error(transparent)]
    Metrics(#[from] crate::metrics::MetricsError),
}

/// Which SPATL ingredients are active; the ablation arms switch one off
/// at a time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpatlOptions {
    /// Upload only salient rows chosen by the RL agent.
    pub selection: bool,
    /// Keep predictors private per client (off = predictor is shared and
    /// aggregated like the encoder).
    pub transfer: bool,
    /// Maintain control variates and correct encoder gradients.
    pub gradient_control: bool,
}

impl Default for SpatlOptions {
    fn default() -> Self {
        SpatlOptions {
            selection: true,
            transfer: true,
            gradient_control: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Method {
    Spatl(SpatlOptions),
    FedAvg,
    FedProx { mu: f64 },
    Scaffold,
}

impl Method {
    /// Parse a method name; `mu` feeds the FedProx proximal weight.
    pub fn parse(name: &str, mu: f64) -> Result<Method, FlError> {
        Ok(match name {
            "spatl" => Method::Spatl(SpatlOptions::default()),
            "spatl-no-select" => Method::Spatl(SpatlOptions {
                selection: false,
                ..Default::default()
            }),
            "spatl-no-transfer" => Method::Spatl(SpatlOptions {
                transfer: false,
                ..Default::default()
            }),
            "spatl-no-gradctl" => Method::Spatl(SpatlOptions {
                gradient_control: false,
                ..Default::default()
            }),
            "fedavg" => Method::FedAvg,
            "fedprox" => Method::FedProx { mu },
            "scaffold" => Method::Scaffold,
            other => {
                return Err(FlError::Contract(format!(
                    "unknown method {other:?}; expected spatl, spatl-no-select, \
                     spatl-no-transfer, spatl-no-gradctl, fedavg, fedprox or scaffold"
                )))
            }
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Method::Spatl(o) => {
                if !o.selection {
                    "spatl-no-select"
                } else if !o.transfer {
                    "spatl-no-transfer"
                } else if !o.gradient_control {
                    "spatl-no-gradctl"
                } else {
                    "spatl"
                }
            }
            Method::FedAvg => "fedavg",
            Method::FedProx { .. } => "fedprox",
            Method::Scaffold => "scaffold",
        }
    }

    /// Does the server keep a shared predictor that is aggregated along
    /// with the encoder?
    pub fn shares_predictor(&self) -> bool {
        match self {
            Method::Spatl(o) => !o.transfer,
            _ => true,
        }
    }

    /// Are control variates maintained and shipped?
    pub fn uses_variates(&self) -> bool {
        match self {
            Method::Spatl(o) => o.gradient_control,
            Method::Scaffold => true,
            _ => false,
        }
    }

    /// Does the RL agent pick per-layer salient rows for the upload?
    pub fn uses_selection(&self) -> bool {
        matches!(self, Method::Spatl(o) if o.selection)
    }
}

/// How the aggregation divides accumulated per-row deltas.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AggDivisor {
    /// Divide every row by the number of sampled clients.
    #[default]
    Uniform,
    /// Divide each row by the number of clients that actually selected it.
    PerRowCoverage,
}

/// RL agent instance owned by one client: the policy plus its optimizer
/// moments, both persisted across rounds.
#[derive(Debug, Clone)]
pub struct AgentRuntime {
    pub net: PolicyNet,
    pub updater: PpoUpdater,
}

/// Per-client state. The predictor never leaves the client while
/// transfer is enabled.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    pub predictor: Predictor,
    /// Local control variate, shaped like the method's aggregation scope
    /// (encoder only for SPATL, the whole model for SCAFFOLD).
    pub local_variate: ParamSet,
    pub train_idx: Vec<usize>,
    pub val_idx: Vec<usize>,
    pub agent: Option<AgentRuntime>,
}

/// Server-side state: global weights, global control variate, counters.
#[derive(Debug, Clone)]
pub struct ServerState {
    pub encoder: Encoder,
    /// Present for methods that share the predictor.
    pub shared_predictor: Option<Predictor>,
    pub global_variate: ParamSet,
    pub n_clients: usize,
    pub round: u64,
}

impl ServerState {
    /// The aggregation scope: encoder params under `encoder.`, plus the
    /// shared predictor under `predictor.` when one exists.
    pub fn global_params(&self) -> ParamSet {
        let mut scope = self.encoder.params().with_prefix("encoder.");
        if let Some(pred) = &self.shared_predictor {
            scope = scope.merged(&pred.params().with_prefix("predictor."));
        }
        scope
    }

    pub fn set_global_params(&mut self, scope: &ParamSet) -> Result<(), FlError> {
        self.encoder.set_params(scope.strip_prefix("encoder."))?;
        if let Some(pred) = &mut self.shared_predictor {
            pred.set_params(scope.strip_prefix("predictor."))?;
        }
        Ok(())
    }
}

/// What one sampled client sends back: the selection, the sliced rows,
/// the restricted variate delta and accounting metadata. Private
/// predictors never appear here.
#[derive(Debug, Clone)]
pub struct ClientUpdate {
    pub client_id: usize,
    /// Present for the SPATL family; full index sets when selection is
    /// disabled.
    pub selection: Option<SalientSelection>,
    /// Uploaded tensors; names match the global scope. Tensors listed in
    /// `indices` carry only the kept rows, in index order.
    pub weights: ParamSet,
    /// Kept row indices per partially-uploaded tensor.
    pub indices: Vec<(String, Vec<usize>)>,
    /// Control-variate delta, restricted to the same rows.
    pub delta_variate: Option<ParamSet>,
    pub bytes_up: u64,
    pub bytes_down: u64,
    pub accuracy: f64,
    pub flops_sub: u64,
    pub sparsity: f64,
}

impl ClientUpdate {
    pub fn kept_rows(&self, name: &str) -> Option<&[usize]> {
        self.indices
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
    }
}

/// Round-engine configuration.
#[derive(Debug, Clone)]
pub struct FederationConfig {
    pub method: Method,
    pub n_clients: usize,
    pub sample_ratio: f64,
    pub rounds: u64,
    /// Local epochs per round (E).
    pub local_epochs: usize,
    pub batch_size: usize,
    /// Local learning rate.
    pub lr: f64,
    /// Server aggregation step size.
    pub server_lr: f64,
    pub wire_precision: WirePrecision,
    pub divisor: AggDivisor,
    pub agent: AgentConfig,
    /// Upper bound on sub-encoder FLOPs as a fraction of the full
    /// encoder.
    pub flops_constraint: f64,
    /// Rounds during which sampled clients fine-tune their agents by
    /// online search; afterwards the policy runs one-shot inference.
    pub agent_finetune_rounds: u64,
    pub seed: u64,
}

impl FederationConfig {
    pub fn validate(&self) -> Result<(), FlError> {
        if self.n_clients == 0 {
            return Err(FlError::Contract("need at least one client".into()));
        }
        if !(self.sample_ratio > 0.0 && self.sample_ratio <= 1.0) {
            return Err(FlError::Contract(format!(
                "sample_ratio {} outside (0,1]",
                self.sample_ratio
            )));
        }
        if self.rounds == 0 {
            return Err(FlError::Contract("rounds must be >= 1".into()));
        }
        if self.local_epochs == 0 {
            return Err(FlError::Contract("local_epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(FlError::Contract("batch_size must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(FlError::Contract(format!("learning rate {}", self.lr)));
        }
        if !(0.0 < self.flops_constraint && self.flops_constraint <= 1.0) {
            return Err(FlError::Contract(format!(
                "flops_constraint {} outside (0,1]",
                self.flops_constraint
            )));
        }
        if let Method::FedProx { mu } = self.method {
            if !(mu >= 0.0 && mu.is_finite()) {
                return Err(FlError::Contract(format!("fedprox mu {mu}")));
            }
        }
        self.agent.validate()?;
        Ok(())
    }

    pub fn sampled_per_round(&self) -> usize {
        ((self.sample_ratio * self.n_clients as f64).ceil() as usize).max(1)
    }
}
