//! RL-based topology-aware salient parameter selection.

pub mod graph;
pub mod policy;
pub mod ppo;
pub mod search;

pub use graph::{build_graph, CompGraph};
pub use policy::{AgentError, PolicyNet};
pub use ppo::{
    clipped_surrogate, gaussian_log_prob, ppo_objective, reward, PpoUpdater, Trajectory,
    TrajectoryStep,
};
pub use search::{
    finetune_head, pretrain_reference_agent, reference_pruning_env, rl_search, select_salient,
    AgentConfig, ReferenceEnv, SearchOutcome,
};
