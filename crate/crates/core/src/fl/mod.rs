//! Round orchestration for SPATL and its baselines.

pub mod aggregate;
pub mod local;
pub mod round;
pub mod state;

pub use aggregate::{aggregate_salient, update_global_control, SlicedDelta};
pub use local::{
    corrected_sgd_step, predictor_finetune, train_local_model, variate_update, GradCorrection,
    LocalFit, ProxTerm,
};
pub use round::run_round;
pub use state::{
    AgentRuntime, AggDivisor, ClientState, ClientUpdate, FederationConfig, FlError, Method,
    ServerState, SpatlOptions,
};
