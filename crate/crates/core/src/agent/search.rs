//! Salient-parameter search: sample sparsity actions, evaluate admissible
//! sub-models on local validation data and improve the policy online.

use super::graph::build_graph;
use super::policy::{AgentError, PolicyNet};
use super::ppo::{gaussian_log_prob, reward, PpoUpdater, Trajectory, TrajectoryStep};
use crate::autograd::grad;
use crate::data::Dataset;
use crate::metrics::evaluate;
use crate::nn::{apply_selection, Encoder, Layer, Predictor, SalientSelection};
use crate::optim::{sgd_step, AdamParams};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// RL agent hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentConfig {
    /// Discount factor; episodes are single-step, kept for compatibility.
    pub gamma: f64,
    /// PPO clip parameter.
    pub clip: f64,
    /// Adam learning rate.
    pub lr: f64,
    pub betas: (f64, f64),
    /// Standard deviation of the Gaussian action distribution.
    pub sigma: f64,
    /// Upper bound of the per-layer sparsity action.
    pub a_max: f64,
    /// Search episodes per invocation.
    pub episodes: usize,
    /// Adam epochs per policy update.
    pub ppo_epochs: usize,
    /// Update only the MLP/value heads, keeping the graph encoder frozen.
    pub finetune_head_only: bool,
    /// Hidden width of the policy network.
    pub hidden: usize,
    /// Action draws per episode until one satisfies the FLOPs
    /// constraint; the search keeps producing candidates rather than
    /// discarding the episode outright.
    pub sample_retries: usize,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            gamma: 0.99,
            clip: 0.2,
            lr: 3e-4,
            betas: (0.9, 0.999),
            sigma: 0.5,
            a_max: 0.8,
            episodes: 8,
            ppo_epochs: 4,
            finetune_head_only: true,
            hidden: 24,
            sample_retries: 8,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<(), AgentError> {
        if !(0.0 < self.clip && self.clip < 1.0) {
            return Err(AgentError::Contract(format!("clip {} outside (0,1)", self.clip)));
        }
        if !(0.0 < self.gamma && self.gamma <= 1.0) {
            return Err(AgentError::Contract(format!("gamma {} outside (0,1]", self.gamma)));
        }
        if !(0.0 < self.a_max && self.a_max <= 1.0) {
            return Err(AgentError::Contract(format!("a_max {} outside (0,1]", self.a_max)));
        }
        Ok(())
    }

    pub fn adam_params(&self) -> AdamParams {
        AdamParams {
            lr: self.lr,
            beta1: self.betas.0,
            beta2: self.betas.1,
            eps: 1e-8,
        }
    }
}

/// Map a sparsity action vector to kept channel indices. Actions must
/// lie within `[0, a_max]`.
pub fn select_salient(
    enc: &Encoder,
    actions: &[f64],
    a_max: f64,
) -> Result<SalientSelection, AgentError> {
    if let Some(bad) = actions.iter().find(|a| !(0.0..=a_max).contains(*a)) {
        return Err(AgentError::Contract(format!(
            "action {bad} outside [0, {a_max}]"
        )));
    }
    Ok(SalientSelection::from_ratios(enc, actions)?)
}

/// Result of a search run.
#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub selection: SalientSelection,
    pub reward: f64,
    /// Reward recorded at each policy update, in order.
    pub update_rewards: Vec<f64>,
    /// No sampled candidate satisfied the FLOPs constraint; the all-keep
    /// selection was returned instead.
    pub fallback_all_keep: bool,
}

/// Run the salient-parameter search against a trained encoder.
///
/// Each episode samples per-layer sparsity ratios from the policy's
/// Gaussian (clamped to `[0, a_max]`), builds the sub-encoder and, when
/// its FLOPs ratio meets `constraint`, scores it on the validation data,
/// updates the policy and tracks the best selection seen. Advantages are
/// rewards against the running-mean baseline.
#[allow(clippy::too_many_arguments)]
pub fn rl_search(
    enc: &Encoder,
    pred: &Predictor,
    val_data: &Dataset,
    net: &mut PolicyNet,
    updater: &mut PpoUpdater,
    cfg: &AgentConfig,
    constraint: f64,
    episodes: usize,
    rng: &mut ChaCha8Rng,
) -> Result<SearchOutcome, AgentError> {
    if episodes == 0 {
        return Err(AgentError::Contract("episodes must be >= 1".into()));
    }
    if !(0.0 < constraint && constraint <= 1.0) {
        return Err(AgentError::Contract(format!(
            "FLOPs constraint {constraint} outside (0,1]"
        )));
    }
    if net.n_actions() != enc.maskable_layers().len() {
        return Err(AgentError::Contract(format!(
            "policy sized for {} layers, encoder has {}",
            net.n_actions(),
            enc.maskable_layers().len()
        )));
    }
    let graph = build_graph(enc)?;
    let full_flops = enc.count_flops();
    let mut best: Option<(SalientSelection, f64)> = None;
    let mut rewards: Vec<f64> = Vec::new();

    for _ in 0..episodes {
        // keep producing candidates until one fits the budget
        let mut admitted = None;
        for _ in 0..cfg.sample_retries.max(1) {
            let (mean, value) = net.forward(&graph)?;
            let action: Vec<f64> = mean
                .iter()
                .map(|m| {
                    let noise: f64 = rng.sample(StandardNormal);
                    (m + net.sigma * noise).clamp(0.0, net.a_max)
                })
                .collect();
            // sigma = 0 degenerates to the deterministic policy: the
            // density is a point mass and no update happens
            let log_prob = if net.sigma > 0.0 {
                gaussian_log_prob(&mean, &action, net.sigma)
            } else {
                0.0
            };
            let selection = select_salient(enc, &action, net.a_max)?;
            let sub = apply_selection(enc, &selection)?;
            let ratio = sub.count_flops() as f64 / full_flops as f64;
            if ratio <= constraint {
                admitted = Some((action, log_prob, value, selection, sub));
                break;
            }
        }
        let Some((action, log_prob, value, selection, sub)) = admitted else {
            continue;
        };
        let acc = evaluate(&sub, pred, val_data)
            .map_err(|e| AgentError::Contract(e.to_string()))?;
        let r = reward(acc)?;
        rewards.push(r);
        let baseline = rewards.iter().sum::<f64>() / rewards.len() as f64;
        let advantage = r - baseline;

        let mut traj = Trajectory::default();
        traj.push(TrajectoryStep {
            graph: graph.clone(),
            action,
            log_prob,
            reward: r,
            value,
            advantage,
        })?;
        updater.update(net, &traj, cfg.clip, cfg.ppo_epochs)?;

        if best.as_ref().map_or(true, |(_, br)| r > *br) {
            best = Some((selection, r));
        }
    }

    match best {
        Some((selection, r)) => Ok(SearchOutcome {
            selection,
            reward: r,
            update_rewards: rewards,
            fallback_all_keep: false,
        }),
        None => {
            let selection = SalientSelection::all_keep(enc);
            let acc = evaluate(enc, pred, val_data)
                .map_err(|e| AgentError::Contract(e.to_string()))?;
            Ok(SearchOutcome {
                selection,
                reward: reward(acc)?,
                update_rewards: rewards,
                fallback_all_keep: true,
            })
        }
    }
}

/// Head-only customization of a pre-trained agent: the MLP and value
/// heads move under Adam on the clipped objective, the graph encoder
/// stays bit-identical.
pub fn finetune_head(
    net: &mut PolicyNet,
    traj: &Trajectory,
    cfg: &AgentConfig,
    updates: usize,
) -> Result<(), AgentError> {
    if traj.is_empty() {
        return Err(AgentError::Contract("empty trajectory".into()));
    }
    let mut updater = PpoUpdater::new(net, true, cfg.adam_params());
    for _ in 0..updates {
        updater.update(net, traj, cfg.clip, cfg.ppo_epochs)?;
    }
    Ok(())
}

/// A small trained-MLP pruning task used to pre-train agents and as the
/// toy environment for the search smoke tests.
pub struct ReferenceEnv {
    pub encoder: Encoder,
    pub predictor: Predictor,
    pub val_data: Dataset,
}

pub fn reference_pruning_env(seed: u64) -> Result<ReferenceEnv, AgentError> {
    let data = crate::data::synth_classification(360, &[8], 4, 4.0, seed ^ 0x5eed)
        .map_err(|e| AgentError::Contract(e.to_string()))?;
    let mut rng = crate::rng::rng_for(seed, "reference-env", &[]);
    // narrow on purpose: accuracy should degrade smoothly with pruning
    // so that searching for a good selection carries real signal
    let mut encoder = Encoder::new(
        vec![
            Layer::Linear {
                in_features: 8,
                out_features: 14,
                bias: true,
            },
            Layer::Relu,
            Layer::Linear {
                in_features: 14,
                out_features: 14,
                bias: true,
            },
            Layer::Relu,
            Layer::Linear {
                in_features: 14,
                out_features: 10,
                bias: true,
            },
        ],
        vec![8],
        &mut rng,
    )?;
    let mut predictor = Predictor::new(
        vec![Layer::Linear {
            in_features: 10,
            out_features: 4,
            bias: true,
        }],
        10,
        &mut rng,
    )?;

    // brief full-batch training so pruning decisions carry real signal
    let train = data.subset(&(0..300).collect::<Vec<_>>()).unwrap();
    let val_data = data.subset(&(300..360).collect::<Vec<_>>()).unwrap();
    for _ in 0..120 {
        let merged = encoder
            .params()
            .with_prefix("encoder.")
            .merged(&predictor.params().with_prefix("predictor."));
        let enc_ref = &encoder;
        let pred_ref = &predictor;
        let (_, grads) = grad(&merged, |tape, nodes| {
            let x = tape.input(train.features.clone())?;
            let e = enc_ref
                .forward_on_tape(tape, nodes, "encoder.", x)
                .map_err(|err| crate::autograd::AutogradError::Shape {
                    op: "encoder",
                    detail: err.to_string(),
                })?;
            let logits = pred_ref
                .forward_on_tape(tape, nodes, "predictor.", e)
                .map_err(|err| crate::autograd::AutogradError::Shape {
                    op: "predictor",
                    detail: err.to_string(),
                })?;
            tape.softmax_cross_entropy(logits, &train.labels)
        })?;
        let stepped = sgd_step(&merged, &grads, 0.1)?;
        encoder.set_params(stepped.strip_prefix("encoder."))?;
        predictor.set_params(stepped.strip_prefix("predictor."))?;
    }
    Ok(ReferenceEnv {
        encoder,
        predictor,
        val_data,
    })
}

/// Pre-train a fresh agent on the reference pruning task with full
/// (encoder and head) updates.
pub fn pretrain_reference_agent(
    cfg: &AgentConfig,
    episodes: usize,
    constraint: f64,
    seed: u64,
) -> Result<PolicyNet, AgentError> {
    cfg.validate()?;
    let env = reference_pruning_env(seed)?;
    let n_actions = env.encoder.maskable_layers().len();
    let mut net = PolicyNet::new(cfg.hidden, n_actions, cfg.a_max, cfg.sigma, seed)?;
    let mut updater = PpoUpdater::new(&net, false, cfg.adam_params());
    let mut rng = crate::rng::rng_for(seed, "pretrain", &[]);
    rl_search(
        &env.encoder,
        &env.predictor,
        &env.val_data,
        &mut net,
        &mut updater,
        cfg,
        constraint,
        episodes,
        &mut rng,
    )?;
    Ok(net)
}
