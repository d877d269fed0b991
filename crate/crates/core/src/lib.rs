//! Desk-scale federated learning simulator.
//!
//! Trains a shared encoder across heterogeneous clients while each client
//! keeps a private predictor head. Clients upload only the salient rows of
//! the encoder, chosen per layer by a small graph-based RL agent, and both
//! sides maintain control variates that de-bias non-IID local gradients.
//! FedAvg, FedProx and SCAFFOLD baselines run through the same round
//! engine so communication cost and accuracy are directly comparable.
//!
//! The building blocks are organized bottom-up:
//!
//! - [`tensor`] / [`autograd`] / [`optim`] — dense f64 tensors, a tape-based
//!   reverse-mode differentiator and SGD/Adam steps
//! - [`nn`] — encoder/predictor models, channel selections, FLOPs and byte
//!   accounting, binary checkpoints
//! - [`data`] — synthetic datasets and Dirichlet non-IID partitioning
//! - [`agent`] — computational-graph states, the policy network and the
//!   PPO-based salient parameter search
//! - [`fl`] — local updates, index-aware aggregation and round orchestration
//! - [`metrics`] — accuracy evaluation and communication-cost ledgers
//! - [`experiment`] — experiment configs, presets, runs and comparisons

pub mod agent;
pub mod autograd;
pub mod checkpoint;
pub mod data;
pub mod experiment;
pub mod fl;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod params;
pub(crate) mod par;
pub mod rng;
pub mod tensor;

pub use params::ParamSet;
pub use tensor::Tensor;
