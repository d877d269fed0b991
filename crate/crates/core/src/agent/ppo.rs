//! Clipped-surrogate policy optimization over collected search steps.

use super::graph::CompGraph;
use super::policy::{AgentError, PolicyNet};
use crate::autograd::{grad, NodeId, ParamNodes, Tape};
use crate::optim::{adam_step, AdamParams, AdamState};
use crate::params::ParamSet;
use crate::tensor::Tensor;

/// One completed sub-model evaluation.
#[derive(Debug, Clone)]
pub struct TrajectoryStep {
    pub graph: CompGraph,
    pub action: Vec<f64>,
    /// Log-probability of `action` under the collecting policy.
    pub log_prob: f64,
    pub reward: f64,
    /// Value-head estimate at collection time.
    pub value: f64,
    pub advantage: f64,
}

#[derive(Debug, Clone, Default)]
pub struct Trajectory {
    pub steps: Vec<TrajectoryStep>,
}

impl Trajectory {
    pub fn push(&mut self, step: TrajectoryStep) -> Result<(), AgentError> {
        if !step.advantage.is_finite() || !step.log_prob.is_finite() {
            return Err(AgentError::Contract(
                "non-finite advantage or log-prob in trajectory".into(),
            ));
        }
        self.steps.push(step);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Sub-network accuracy scaled to percentage points.
pub fn reward(accuracy: f64) -> Result<f64, AgentError> {
    if !(0.0..=1.0).contains(&accuracy) {
        return Err(AgentError::Contract(format!(
            "accuracy {accuracy} outside [0,1]"
        )));
    }
    Ok(accuracy * 100.0)
}

/// Diagonal-Gaussian log density of `action` around `mean`.
pub fn gaussian_log_prob(mean: &[f64], action: &[f64], sigma: f64) -> f64 {
    debug_assert_eq!(mean.len(), action.len());
    let n = mean.len() as f64;
    let quad: f64 = mean
        .iter()
        .zip(action)
        .map(|(m, a)| (a - m) * (a - m))
        .sum();
    -quad / (2.0 * sigma * sigma) - n * (sigma.ln() + 0.5 * (2.0 * std::f64::consts::PI).ln())
}

/// `min(r*A, clip(r, 1-eps, 1+eps)*A)` for one step.
pub fn clipped_surrogate(ratio: f64, advantage: f64, eps: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - eps, 1.0 + eps);
    (ratio * advantage).min(clipped * advantage)
}

/// Mean clipped surrogate given per-step log-probs under both policies.
pub fn objective_from_log_probs(
    log_probs_new: &[f64],
    log_probs_old: &[f64],
    advantages: &[f64],
    eps: f64,
) -> Result<f64, AgentError> {
    if log_probs_new.is_empty()
        || log_probs_new.len() != log_probs_old.len()
        || log_probs_new.len() != advantages.len()
    {
        return Err(AgentError::Contract(
            "objective needs equal, non-empty step lists".into(),
        ));
    }
    if !(0.0 < eps && eps < 1.0) {
        return Err(AgentError::Contract(format!("clip epsilon {eps} outside (0,1)")));
    }
    let total: f64 = log_probs_new
        .iter()
        .zip(log_probs_old)
        .zip(advantages)
        .map(|((ln, lo), &a)| clipped_surrogate((ln - lo).exp(), a, eps))
        .sum();
    Ok(total / advantages.len() as f64)
}

/// Empirical clipped objective of `net_new` against `net_old` on a
/// trajectory collected under `net_old`.
pub fn ppo_objective(
    traj: &Trajectory,
    net_new: &PolicyNet,
    net_old: &PolicyNet,
    eps: f64,
) -> Result<f64, AgentError> {
    if traj.is_empty() {
        return Err(AgentError::Contract("empty trajectory".into()));
    }
    let mut lp_new = Vec::with_capacity(traj.len());
    let mut lp_old = Vec::with_capacity(traj.len());
    let mut advs = Vec::with_capacity(traj.len());
    for step in &traj.steps {
        let (mean_new, _) = net_new.forward(&step.graph)?;
        let (mean_old, _) = net_old.forward(&step.graph)?;
        lp_new.push(gaussian_log_prob(&mean_new, &step.action, net_new.sigma));
        lp_old.push(gaussian_log_prob(&mean_old, &step.action, net_old.sigma));
        advs.push(step.advantage);
    }
    objective_from_log_probs(&lp_new, &lp_old, &advs, eps)
}

/// Adam over a fixed subset of policy parameters; moment buffers persist
/// across updates so frozen parameters never drift.
#[derive(Debug, Clone)]
pub struct PpoUpdater {
    trainable: Vec<String>,
    adam: AdamState,
    hp: AdamParams,
}

impl PpoUpdater {
    pub fn new(net: &PolicyNet, head_only: bool, hp: AdamParams) -> Self {
        let trainable = if head_only {
            net.head_param_names()
        } else {
            net.all_param_names()
        };
        let subset: ParamSet = net
            .params()
            .iter()
            .filter(|(n, _)| trainable.iter().any(|t| t == n))
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect();
        PpoUpdater {
            trainable,
            adam: AdamState::new(&subset),
            hp,
        }
    }

    /// One maximization step of the clipped objective (several Adam
    /// epochs) against the trajectory's recorded log-probs. Skipped for
    /// a deterministic policy (sigma = 0), whose density is degenerate.
    pub fn update(
        &mut self,
        net: &mut PolicyNet,
        traj: &Trajectory,
        eps: f64,
        epochs: usize,
    ) -> Result<(), AgentError> {
        if traj.is_empty() {
            return Err(AgentError::Contract("empty trajectory".into()));
        }
        if net.sigma == 0.0 {
            return Ok(());
        }
        for _ in 0..epochs {
            let params = net.params().clone();
            let inv_two_sigma_sq = -1.0 / (2.0 * net.sigma * net.sigma);
            let steps = &traj.steps;
            let netc = &*net;
            let (_, grads) = grad(&params, |tape, nodes| {
                let mut total: Option<NodeId> = None;
                for step in steps {
                    let surr = build_step_surrogate(
                        tape,
                        nodes,
                        netc,
                        step,
                        inv_two_sigma_sq,
                        eps,
                    )?;
                    total = Some(match total {
                        Some(t) => tape.add(t, surr)?,
                        None => surr,
                    });
                }
                let mean = tape.scale(total.unwrap(), 1.0 / steps.len() as f64)?;
                tape.scale(mean, -1.0) // maximize the objective
            })
            .map_err(AgentError::Autograd)?;

            let trainable_params: ParamSet = params
                .iter()
                .filter(|(n, _)| self.trainable.iter().any(|t| t == n))
                .map(|(n, t)| (n.to_string(), t.clone()))
                .collect();
            let trainable_grads: ParamSet = grads
                .iter()
                .filter(|(n, _)| self.trainable.iter().any(|t| t == n))
                .map(|(n, t)| (n.to_string(), t.clone()))
                .collect();
            let (updated, adam) =
                adam_step(&trainable_params, &self.adam, &trainable_grads, &self.hp)?;
            self.adam = adam;
            for (name, t) in updated.iter() {
                *net.params_mut().get_mut(name).expect("trainable name exists") = t.clone();
            }
        }
        Ok(())
    }
}

fn build_step_surrogate(
    tape: &mut Tape,
    nodes: &ParamNodes,
    net: &PolicyNet,
    step: &TrajectoryStep,
    inv_two_sigma_sq: f64,
    eps: f64,
) -> Result<NodeId, crate::autograd::AutogradError> {
    let (mean, _) = net
        .forward_on_tape(tape, nodes, "", &step.graph)
        .map_err(|e| crate::autograd::AutogradError::Shape {
            op: "policy_forward",
            detail: e.to_string(),
        })?;
    let action = tape.input(
        Tensor::from_vec(vec![1, step.action.len()], step.action.clone())
            .expect("action vector"),
    )?;
    let diff = tape.sub(action, mean)?;
    let sq = tape.mul(diff, diff)?;
    let quad = tape.sum(sq)?;
    let lp_new = tape.scale(quad, inv_two_sigma_sq)?;
    // identical constant terms of both densities cancel in the ratio
    let lp_old_quad = step.log_prob
        + step.action.len() as f64 * (net.sigma.ln() + 0.5 * (2.0 * std::f64::consts::PI).ln());
    let log_ratio = tape.add_scalar(lp_new, -lp_old_quad)?;
    let ratio = tape.exp(log_ratio)?;
    let surr1 = tape.scale(ratio, step.advantage)?;
    let clipped = tape.clamp(ratio, 1.0 - eps, 1.0 + eps)?;
    let surr2 = tape.scale(clipped, step.advantage)?;
    tape.min2(surr1, surr2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::graph::build_graph;
    use crate::nn::{Encoder, Layer};
    use crate::rng::rng_for;

    #[test]
    fn reward_scales_accuracy() {
        assert_eq!(reward(0.85).unwrap(), 85.0);
        assert_eq!(reward(0.0).unwrap(), 0.0);
        assert_eq!(reward(1.0).unwrap(), 100.0);
        assert!(reward(1.2).is_err());
        assert!(reward(-0.1).is_err());
    }

    #[test]
    fn surrogate_examples() {
        assert_eq!(clipped_surrogate(1.0, 2.0, 0.2), 2.0);
        assert_eq!(clipped_surrogate(1.5, 1.0, 0.2), 1.2);
        assert!((clipped_surrogate(0.5, -1.0, 0.2) - (-0.8)).abs() < 1e-15);
    }

    fn small_graph() -> CompGraph {
        let mut rng = rng_for(6, "ppo-test", &[]);
        let enc = Encoder::new(
            vec![
                Layer::Linear {
                    in_features: 4,
                    out_features: 6,
                    bias: false,
                },
                Layer::Relu,
                Layer::Linear {
                    in_features: 6,
                    out_features: 3,
                    bias: false,
                },
            ],
            vec![4],
            &mut rng,
        )
        .unwrap();
        build_graph(&enc).unwrap()
    }

    fn traj_for(net: &PolicyNet, rewards_advs: &[(f64, f64)]) -> Trajectory {
        let g = small_graph();
        let mut traj = Trajectory::default();
        for (i, &(r, a)) in rewards_advs.iter().enumerate() {
            let (mean, value) = net.forward(&g).unwrap();
            // deterministic pseudo-noise so actions differ per step
            let action: Vec<f64> = mean
                .iter()
                .enumerate()
                .map(|(j, m)| (m + 0.05 * ((i + j) as f64 - 1.0)).clamp(0.0, net.a_max))
                .collect();
            let lp = gaussian_log_prob(&mean, &action, net.sigma);
            traj.push(TrajectoryStep {
                graph: g.clone(),
                action,
                log_prob: lp,
                reward: r,
                value,
                advantage: a,
            })
            .unwrap();
        }
        traj
    }

    #[test]
    fn identical_policies_give_mean_advantage_exactly() {
        let net = PolicyNet::new(12, 2, 0.8, 0.5, 7).unwrap();
        let traj = traj_for(&net, &[(50.0, 2.0), (60.0, -1.0), (70.0, 0.5)]);
        let obj = ppo_objective(&traj, &net, &net, 0.2).unwrap();
        let mean_adv = (2.0 - 1.0 + 0.5) / 3.0;
        assert_eq!(obj, mean_adv);
    }

    #[test]
    fn objective_invariant_to_constant_log_prob_shift() {
        let lp_new = [0.3, -0.2, 1.1];
        let lp_old = [0.1, 0.4, 0.9];
        let advs = [1.0, -0.5, 2.0];
        let base = objective_from_log_probs(&lp_new, &lp_old, &advs, 0.2).unwrap();
        let c = 3.7;
        let shifted_new: Vec<f64> = lp_new.iter().map(|v| v + c).collect();
        let shifted_old: Vec<f64> = lp_old.iter().map(|v| v + c).collect();
        let shifted = objective_from_log_probs(&shifted_new, &shifted_old, &advs, 0.2).unwrap();
        assert!((base - shifted).abs() < 1e-9, "{base} vs {shifted}");
    }

    #[test]
    fn empty_trajectory_is_contract_error() {
        let net = PolicyNet::new(12, 2, 0.8, 0.5, 8).unwrap();
        let traj = Trajectory::default();
        assert!(ppo_objective(&traj, &net, &net, 0.2).is_err());
    }

    #[test]
    fn zero_advantage_leaves_parameters_unchanged() {
        let mut net = PolicyNet::new(12, 2, 0.8, 0.5, 9).unwrap();
        let traj = traj_for(&net, &[(50.0, 0.0), (60.0, 0.0)]);
        let before = net.params().content_hash();
        let mut upd = PpoUpdater::new(&net, true, AdamParams::default());
        upd.update(&mut net, &traj, 0.2, 10).unwrap();
        assert_eq!(net.params().content_hash(), before);
    }

    #[test]
    fn positive_advantage_on_higher_actions_raises_the_mean() {
        let mut net = PolicyNet::new(12, 2, 0.8, 0.5, 10).unwrap();
        let g = small_graph();
        let (mean0, _) = net.forward(&g).unwrap();
        let mut traj = Trajectory::default();
        for k in 0..6 {
            // actions above the current mean get positive advantage
            let bump = 0.1 + 0.02 * k as f64;
            let action: Vec<f64> = mean0.iter().map(|m| (m + bump).min(net.a_max)).collect();
            let lp = gaussian_log_prob(&mean0, &action, net.sigma);
            traj.push(TrajectoryStep {
                graph: g.clone(),
                action,
                log_prob: lp,
                reward: 1.0,
                value: 0.0,
                advantage: 1.0,
            })
            .unwrap();
        }
        let mut upd = PpoUpdater::new(&net, true, AdamParams { lr: 1e-2, ..Default::default() });
        for _ in 0..10 {
            upd.update(&mut net, &traj, 0.2, 1).unwrap();
        }
        let (mean1, _) = net.forward(&g).unwrap();
        let avg0: f64 = mean0.iter().sum::<f64>() / mean0.len() as f64;
        let avg1: f64 = mean1.iter().sum::<f64>() / mean1.len() as f64;
        assert!(avg1 > avg0, "mean action {avg1} did not rise above {avg0}");
    }

    #[test]
    fn head_only_update_freezes_the_graph_encoder() {
        let mut net = PolicyNet::new(12, 2, 0.8, 0.5, 11).unwrap();
        let traj = traj_for(&net, &[(50.0, 1.0), (40.0, -1.0)]);
        let gnn_before = net.gnn_params().content_hash();
        let head_before = net.params().get("head.l2.weight").unwrap().clone();
        let mut upd = PpoUpdater::new(&net, true, AdamParams::default());
        upd.update(&mut net, &traj, 0.2, 5).unwrap();
        assert_eq!(net.gnn_params().content_hash(), gnn_before);
        assert_ne!(
            net.params().get("head.l2.weight").unwrap(),
            &head_before,
            "head should move"
        );
    }
}
