//! One federation round: sample, broadcast, local updates, aggregate.
//!
//! Sampled clients run concurrently (rayon under the default `parallel`
//! feature); every client draws its own seed stream from (seed, round,
//! client id) and results are folded in client-id order, so a round's
//! outcome does not depend on scheduling.

use super::aggregate::{aggregate_salient, update_global_control, SlicedDelta};
use super::local::{train_local_model, variate_update, GradCorrection, ProxTerm};
use super::state::{
    AgentRuntime, ClientState, ClientUpdate, FederationConfig, FlError, Method, ServerState,
};
use crate::agent::{build_graph, rl_search, select_salient};
use crate::data::Dataset;
use crate::metrics::{evaluate, ClientRoundStat, RoundReport};
use crate::nn::{
    apply_selection, param_bytes, Encoder, Predictor, SalientSelection, INDEX_BYTES,
};
use crate::params::ParamSet;
use crate::rng::rng_for;
use rand::seq::SliceRandom;

/// Entries of `scope` whose names start with `prefix`, names kept intact.
fn subset_with_prefix(scope: &ParamSet, prefix: &str) -> ParamSet {
    scope
        .iter()
        .filter(|(n, _)| n.starts_with(prefix))
        .map(|(n, t)| (n.to_string(), t.clone()))
        .collect()
}

/// Wire bytes for the per-layer kept-index lists; layers keeping every
/// channel ship no list.
fn selection_index_bytes(sel: &SalientSelection, enc: &Encoder) -> u64 {
    sel.layers
        .iter()
        .filter(|l| {
            let channels = enc.layers()[l.layer].out_channels().unwrap();
            l.kept.len() < channels
        })
        .map(|l| l.kept.len() as u64 * INDEX_BYTES)
        .sum()
}

/// Slice an encoder-scope param set by a selection: masked layers keep
/// only their rows, everything else uploads in full. Returns the sliced
/// set plus per-tensor index lists.
fn slice_by_selection(
    scoped: &ParamSet,
    sel: &SalientSelection,
) -> Result<(ParamSet, Vec<(String, Vec<usize>)>), FlError> {
    let mut out = ParamSet::new();
    let mut indices = Vec::new();
    for (name, tensor) in scoped.iter() {
        let masked = sel.layers.iter().find(|l| {
            name == format!("encoder.layers.{}.weight", l.layer)
                || name == format!("encoder.layers.{}.bias", l.layer)
        });
        match masked {
            Some(l) if l.kept.len() < tensor.rows() => {
                out.insert(name, tensor.take_rows(&l.kept)?);
                indices.push((name.to_string(), l.kept.clone()));
            }
            _ => out.insert(name, tensor.clone()),
        }
    }
    Ok((out, indices))
}

struct Broadcast<'a> {
    encoder: &'a Encoder,
    shared_predictor: Option<&'a Predictor>,
    scope: &'a ParamSet,
    global_variate: &'a ParamSet,
    bytes_down: u64,
}

fn client_round(
    mut client: ClientState,
    bc: &Broadcast<'_>,
    cfg: &FederationConfig,
    data: &Dataset,
    round: u64,
) -> Result<(ClientUpdate, ClientState), FlError> {
    let mut rng = rng_for(cfg.seed, "local", &[round, client.id as u64]);
    // private predictors join the trainable set locally but are never
    // part of the broadcast scope
    let (pred_start, start) = match bc.shared_predictor {
        Some(p) => (p.clone(), bc.scope.clone()),
        None => {
            let pred = client.predictor.clone();
            let start = bc
                .scope
                .merged(&pred.params().with_prefix("predictor."));
            (pred, start)
        }
    };
    let val_ds = data.subset(&client.val_idx)?;

    let correction_set;
    let correction = match cfg.method {
        Method::Spatl(o) if o.gradient_control => {
            correction_set = bc
                .global_variate
                .sub(&client.local_variate)
                .map_err(FlError::Tensor)?;
            GradCorrection::Encoder(&correction_set)
        }
        Method::Scaffold => {
            correction_set = bc
                .global_variate
                .sub(&client.local_variate)
                .map_err(FlError::Tensor)?;
            GradCorrection::WholeModel(&correction_set)
        }
        _ => GradCorrection::None,
    };
    let prox = match cfg.method {
        Method::FedProx { mu } => Some(ProxTerm {
            mu,
            anchor: &start,
        }),
        _ => None,
    };

    let fit = train_local_model(
        bc.encoder,
        &pred_start,
        &start,
        data,
        &client.train_idx,
        cfg.local_epochs,
        cfg.batch_size,
        cfg.lr,
        correction,
        prox,
        &mut rng,
    )?;

    let mut enc_trained = bc.encoder.clone();
    enc_trained.set_params(fit.params.strip_prefix("encoder."))?;
    let mut pred_trained = pred_start.clone();
    pred_trained.set_params(fit.params.strip_prefix("predictor."))?;
    let accuracy = evaluate(&enc_trained, &pred_trained, &val_ds)?;

    // variate bookkeeping over the method's correction scope
    let mut delta_full: Option<ParamSet> = None;
    match cfg.method {
        Method::Spatl(o) if o.gradient_control => {
            let w_start = subset_with_prefix(&start, "encoder.");
            let w_end = subset_with_prefix(&fit.params, "encoder.");
            let (new_cl, delta) = variate_update(
                &client.local_variate,
                bc.global_variate,
                &w_start,
                &w_end,
                cfg.lr,
                fit.steps,
            )?;
            client.local_variate = new_cl;
            delta_full = Some(delta);
        }
        Method::Scaffold => {
            let (new_cl, delta) = variate_update(
                &client.local_variate,
                bc.global_variate,
                &start,
                &fit.params,
                cfg.lr,
                fit.steps,
            )?;
            client.local_variate = new_cl;
            delta_full = Some(delta);
        }
        _ => {}
    }

    // upload assembly
    let (selection, weights, indices, flops_enc) = match cfg.method {
        Method::Spatl(o) => {
            let sel = if o.selection {
                pick_selection(&enc_trained, &pred_trained, &val_ds, &mut client, cfg, round)?
            } else {
                SalientSelection::all_keep(&enc_trained)
            };
            let sub = apply_selection(&enc_trained, &sel)?;
            let flops_enc = sub.count_flops();
            let enc_scope = subset_with_prefix(&fit.params, "encoder.");
            let (mut weights, indices) = slice_by_selection(&enc_scope, &sel)?;
            if !o.transfer {
                weights = weights.merged(&subset_with_prefix(&fit.params, "predictor."));
            }
            (Some(sel), weights, indices, flops_enc)
        }
        _ => (
            None,
            fit.params.clone(),
            Vec::new(),
            enc_trained.count_flops(),
        ),
    };

    let delta_sliced = match (&delta_full, &selection) {
        (Some(delta), Some(sel)) => {
            let (sliced, _) = slice_by_selection(delta, sel)?;
            Some(sliced)
        }
        (Some(delta), None) => Some(delta.clone()),
        (None, _) => None,
    };

    let mut bytes_up = param_bytes(&weights, cfg.wire_precision);
    if let Some(d) = &delta_sliced {
        bytes_up += param_bytes(d, cfg.wire_precision);
    }
    if let Some(sel) = &selection {
        bytes_up += selection_index_bytes(sel, &enc_trained);
    }

    let flops_sub = flops_enc + pred_trained.count_flops();
    let sparsity = selection.as_ref().map_or(0.0, |s| s.mean_ratio());

    client.predictor = pred_trained;
    let update = ClientUpdate {
        client_id: client.id,
        selection,
        weights,
        indices,
        delta_variate: delta_sliced,
        bytes_up,
        bytes_down: bc.bytes_down,
        accuracy,
        flops_sub,
        sparsity,
    };
    Ok((update, client))
}

/// Choose the salient selection for the upload. During the fine-tuning
/// window the client runs the online search (which also updates its
/// agent); afterwards the policy mean is used one-shot, falling back to
/// all-keep when the constraint rejects it.
fn pick_selection(
    enc: &Encoder,
    pred: &Predictor,
    val_ds: &Dataset,
    client: &mut ClientState,
    cfg: &FederationConfig,
    round: u64,
) -> Result<SalientSelection, FlError> {
    let Some(AgentRuntime { net, updater }) = client.agent.as_mut() else {
        return Ok(SalientSelection::all_keep(enc));
    };
    if round < cfg.agent_finetune_rounds {
        let mut rng = rng_for(cfg.seed, "search", &[round, client.id as u64]);
        let outcome = rl_search(
            enc,
            pred,
            val_ds,
            net,
            updater,
            &cfg.agent,
            cfg.flops_constraint,
            cfg.agent.episodes,
            &mut rng,
        )?;
        Ok(outcome.selection)
    } else {
        let graph = build_graph(enc)?;
        let (mean, _) = net.forward(&graph)?;
        let sel = select_salient(enc, &mean, net.a_max)?;
        let sub = apply_selection(enc, &sel)?;
        let ratio = sub.count_flops() as f64 / enc.count_flops() as f64;
        if ratio <= cfg.flops_constraint {
            Ok(sel)
        } else {
            Ok(SalientSelection::all_keep(enc))
        }
    }
}

/// Run one round; `clients` holds all clients, the engine samples from
/// those with local data. Returns the per-client accounting.
pub fn run_round(
    server: &mut ServerState,
    clients: &mut [ClientState],
    cfg: &FederationConfig,
    data: &Dataset,
) -> Result<RoundReport, FlError> {
    cfg.validate()?;
    if clients.len() != cfg.n_clients {
        return Err(FlError::Contract(format!(
            "{} clients registered, config says {}",
            clients.len(),
            cfg.n_clients
        )));
    }
    let round = server.round;
    let pool: Vec<usize> = clients
        .iter()
        .filter(|c| !c.train_idx.is_empty() && !c.val_idx.is_empty())
        .map(|c| c.id)
        .collect();
    if pool.is_empty() {
        return Err(FlError::Contract("no client has local data".into()));
    }
    let n_sampled = cfg.sampled_per_round().min(pool.len());
    let mut shuffled = pool;
    let mut sample_rng = rng_for(cfg.seed, "sample", &[round]);
    shuffled.shuffle(&mut sample_rng);
    let mut sampled: Vec<usize> = shuffled[..n_sampled].to_vec();
    sampled.sort_unstable();

    let scope = server.global_params();
    let bytes_down = param_bytes(&scope, cfg.wire_precision)
        + if cfg.method.uses_variates() {
            param_bytes(&server.global_variate, cfg.wire_precision)
        } else {
            0
        };
    let broadcast = Broadcast {
        encoder: &server.encoder,
        shared_predictor: server.shared_predictor.as_ref(),
        scope: &scope,
        global_variate: &server.global_variate,
        bytes_down,
    };

    let work: Vec<ClientState> = sampled.iter().map(|&id| clients[id].clone()).collect();
    let results: Vec<Result<(ClientUpdate, ClientState), FlError>> =
        crate::par::map_indexed(work, |_, state| {
            client_round(state, &broadcast, cfg, data, round)
        });

    let mut updates = Vec::with_capacity(results.len());
    for r in results {
        let (update, state) = r?;
        let id = state.id;
        clients[id] = state;
        updates.push(update);
    }

    let new_scope = aggregate_salient(&scope, &updates, cfg.server_lr, cfg.divisor)?;
    server.set_global_params(&new_scope)?;

    if cfg.method.uses_variates() {
        let deltas: Vec<SlicedDelta> = updates
            .iter()
            .filter_map(|u| {
                u.delta_variate.as_ref().map(|d| SlicedDelta {
                    values: d.clone(),
                    indices: u.indices.clone(),
                })
            })
            .collect();
        server.global_variate =
            update_global_control(&server.global_variate, &deltas, cfg.n_clients)?;
    }

    server.round += 1;
    let report = RoundReport {
        round: round + 1,
        clients: updates
            .iter()
            .map(|u| ClientRoundStat {
                client_id: u.client_id,
                bytes_up: u.bytes_up,
                bytes_down: u.bytes_down,
                accuracy: u.accuracy,
                flops_sub: u.flops_sub,
                sparsity: u.sparsity,
            })
            .collect(),
    };
    report.validate()?;
    Ok(report)
}
