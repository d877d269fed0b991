//! Client-side local updates.
//!
//! The encoder step under gradient control is
//! `w_e <- w_e - lr * (grad + c_g - c_l)`; the predictor always takes
//! the raw gradient. After the local pass the local variate moves to
//! `c_l* = c_l - c_g + (w_start - w_end) / (steps * lr)` where `steps`
//! counts every SGD step taken (epochs times minibatches), and the
//! client ships `delta = c_l* - c_l`.

use super::state::FlError;
use crate::autograd::{grad, AutogradError, ParamNodes, Tape};
use crate::data::Dataset;
use crate::nn::{Encoder, Predictor};
use crate::params::ParamSet;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

/// One gradient step with an optional additive correction on a subset of
/// the parameters: `w - lr * (g + correction)`.
pub fn corrected_sgd_step(
    params: &ParamSet,
    grads: &ParamSet,
    correction: Option<&ParamSet>,
    lr: f64,
) -> Result<ParamSet, FlError> {
    let adjusted = match correction {
        Some(c) => grads.add(c)?,
        None => grads.clone(),
    };
    Ok(params.axpy(-lr, &adjusted)?)
}

/// Post-round local-variate update. Returns `(new_c_l, delta)`.
pub fn variate_update(
    c_l: &ParamSet,
    c_g: &ParamSet,
    w_start: &ParamSet,
    w_end: &ParamSet,
    lr: f64,
    steps: usize,
) -> Result<(ParamSet, ParamSet), FlError> {
    if lr == 0.0 || !lr.is_finite() {
        return Err(FlError::Contract(format!(
            "variate update divides by lr; lr = {lr}"
        )));
    }
    if steps == 0 {
        return Err(FlError::Contract("variate update needs >= 1 local step".into()));
    }
    let drift = w_start.sub(w_end)?.scale(1.0 / (steps as f64 * lr));
    let new_c_l = c_l.sub(c_g)?.add(&drift)?;
    let delta = new_c_l.sub(c_l)?;
    Ok((new_c_l, delta))
}

/// How local gradients are corrected before each step.
#[derive(Debug, Clone, Copy)]
pub enum GradCorrection<'a> {
    None,
    /// Correction over `encoder.*` entries only; the predictor head's
    /// gradient stays heterogeneous.
    Encoder(&'a ParamSet),
    /// Correction over the whole merged model (SCAFFOLD).
    WholeModel(&'a ParamSet),
}

/// Extra proximal pull toward an anchor, as FedProx adds to the loss;
/// realized exactly on the gradient as `mu * (w - anchor)`.
#[derive(Debug, Clone, Copy)]
pub struct ProxTerm<'a> {
    pub mu: f64,
    pub anchor: &'a ParamSet,
}

pub struct LocalFit {
    /// Trained merged parameters (`encoder.*` and `predictor.*`).
    pub params: ParamSet,
    /// SGD steps taken.
    pub steps: usize,
}

fn model_loss(
    enc: &Encoder,
    pred: &Predictor,
    tape: &mut Tape,
    nodes: &ParamNodes,
    batch: &Dataset,
) -> Result<crate::autograd::NodeId, AutogradError> {
    let as_ag = |e: crate::nn::ModelError| match e {
        crate::nn::ModelError::Autograd(a) => a,
        other => AutogradError::Shape {
            op: "model",
            detail: other.to_string(),
        },
    };
    let x = tape.input(batch.features.clone())?;
    let mut e = enc
        .forward_on_tape(tape, nodes, "encoder.", x)
        .map_err(as_ag)?;
    if tape.value(e).shape().len() > 2 {
        let n = tape.value(e).shape()[0];
        let cols: usize = tape.value(e).shape()[1..].iter().product();
        e = tape.reshape(e, &[n, cols])?;
    }
    let logits = pred
        .forward_on_tape(tape, nodes, "predictor.", e)
        .map_err(as_ag)?;
    tape.softmax_cross_entropy(logits, &batch.labels)
}

/// Minibatch SGD over the merged encoder+predictor parameters, starting
/// from `start`, with cross-entropy loss. Batch order reshuffles every
/// epoch from `rng`.
#[allow(clippy::too_many_arguments)]
pub fn train_local_model(
    enc: &Encoder,
    pred: &Predictor,
    start: &ParamSet,
    data: &Dataset,
    train_idx: &[usize],
    epochs: usize,
    batch_size: usize,
    lr: f64,
    correction: GradCorrection<'_>,
    prox: Option<ProxTerm<'_>>,
    rng: &mut ChaCha8Rng,
) -> Result<LocalFit, FlError> {
    if train_idx.is_empty() {
        return Err(FlError::Contract("client has no training samples".into()));
    }
    if epochs == 0 {
        return Err(FlError::Contract("epochs must be >= 1".into()));
    }
    let mut params = start.clone();
    let mut order: Vec<usize> = train_idx.to_vec();
    let mut steps = 0usize;
    for _ in 0..epochs {
        order.shuffle(rng);
        for chunk in order.chunks(batch_size) {
            let batch = data.subset(chunk)?;
            let (_, mut grads) = grad(&params, |tape, nodes| {
                model_loss(enc, pred, tape, nodes, &batch)
            })?;
            if let Some(p) = prox {
                // skipped entirely at mu = 0 so fedprox(0) is bit-equal to fedavg
                if p.mu != 0.0 {
                    let pull = params.sub(p.anchor)?.scale(p.mu);
                    grads = grads.add(&pull)?;
                }
            }
            match correction {
                GradCorrection::None => {
                    params = params.axpy(-lr, &grads)?;
                }
                GradCorrection::WholeModel(c) => {
                    params = corrected_sgd_step(&params, &grads, Some(c), lr)?;
                }
                GradCorrection::Encoder(c) => {
                    // correct encoder entries, step predictor entries raw
                    let corrected: ParamSet = grads
                        .iter()
                        .map(|(name, g)| {
                            let t = match c.get(name) {
                                Some(cv) => g.zip(cv, |a, b| a + b).expect("variate shape"),
                                None => g.clone(),
                            };
                            (name.to_string(), t)
                        })
                        .collect();
                    params = params.axpy(-lr, &corrected)?;
                }
            }
            steps += 1;
        }
    }
    Ok(LocalFit { params, steps })
}

/// Train only the predictor against frozen encoder embeddings.
#[allow(clippy::too_many_arguments)]
pub fn predictor_finetune(
    enc: &Encoder,
    pred: &Predictor,
    data: &Dataset,
    train_idx: &[usize],
    epochs: usize,
    batch_size: usize,
    lr: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Predictor, FlError> {
    if epochs == 0 {
        return Err(FlError::Contract("predictor finetune needs epochs >= 1".into()));
    }
    if train_idx.is_empty() {
        return Err(FlError::Contract("client has no training samples".into()));
    }
    let mut params = pred.params().clone();
    let mut order: Vec<usize> = train_idx.to_vec();
    for _ in 0..epochs {
        order.shuffle(rng);
        for chunk in order.chunks(batch_size) {
            let batch = data.subset(chunk)?;
            // embeddings are constants: the encoder stays frozen
            let mut embedding = enc.forward(&batch.features)?;
            if embedding.shape().len() > 2 {
                let cols: usize = embedding.shape()[1..].iter().product();
                embedding = embedding
                    .reshape(&[batch.len(), cols])
                    .map_err(|e| FlError::Contract(e.to_string()))?;
            }
            let labels = batch.labels.clone();
            let pred_ref = &*pred;
            let (_, grads) = grad(&params, |tape, nodes| {
                let e = tape.input(embedding.clone())?;
                let logits = pred_ref
                    .forward_on_tape(tape, nodes, "", e)
                    .map_err(|err| AutogradError::Shape {
                        op: "predictor",
                        detail: err.to_string(),
                    })?;
                tape.softmax_cross_entropy(logits, &labels)
            })?;
            params = params.axpy(-lr, &grads)?;
        }
    }
    let mut out = pred.clone();
    out.set_params(params)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_classification;
    use crate::metrics::evaluate;
    use crate::nn::Layer;
    use crate::rng::rng_for;
    use crate::tensor::Tensor;

    fn scalar(name: &str, v: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert(name, Tensor::scalar(v));
        p
    }

    #[test]
    fn quadratic_one_step_and_variate_update() {
        // loss 0.5*(w-2)^2, w_g = 0, lr = 0.1, c_g = c_l = 0, one step
        let w_start = scalar("w", 0.0);
        let grad_at = |w: &ParamSet| scalar("w", w.get("w").unwrap().item() - 2.0);
        let g = grad_at(&w_start);
        let w_end = corrected_sgd_step(&w_start, &g, None, 0.1).unwrap();
        assert!((w_end.get("w").unwrap().item() - 0.2).abs() < 1e-15);

        let zero = scalar("w", 0.0);
        let (new_cl, delta) = variate_update(&zero, &zero, &w_start, &w_end, 0.1, 1).unwrap();
        assert!((new_cl.get("w").unwrap().item() + 2.0).abs() < 1e-12);
        assert!((delta.get("w").unwrap().item() + 2.0).abs() < 1e-12);
    }

    #[test]
    fn correction_shifts_the_step() {
        // corrected gradient -2 + 0.5 = -1.5 -> w = 0.15
        let w = scalar("w", 0.0);
        let g = scalar("w", -2.0);
        let corr = scalar("w", 0.5);
        let stepped = corrected_sgd_step(&w, &g, Some(&corr), 0.1).unwrap();
        assert!((stepped.get("w").unwrap().item() - 0.15).abs() < 1e-15);
    }

    #[test]
    fn unmoved_weights_leave_variate_fixed() {
        let c_l = scalar("w", 0.7);
        let zero = scalar("w", 0.0);
        let w = scalar("w", 1.5);
        let (new_cl, delta) = variate_update(&c_l, &zero, &w, &w, 0.1, 3).unwrap();
        assert_eq!(new_cl.get("w").unwrap().item(), 0.7);
        assert_eq!(delta.get("w").unwrap().item(), 0.0);
    }

    #[test]
    fn variate_update_contract_errors() {
        let z = scalar("w", 0.0);
        assert!(variate_update(&z, &z, &z, &z, 0.0, 1).is_err());
        assert!(variate_update(&z, &z, &z, &z, 0.1, 0).is_err());
    }

    fn toy_setup(seed: u64) -> (Encoder, Predictor, Dataset, Vec<usize>) {
        let mut rng = rng_for(seed, "local-test", &[]);
        let enc = Encoder::new(
            vec![
                Layer::Linear {
                    in_features: 4,
                    out_features: 8,
                    bias: true,
                },
                Layer::Relu,
                Layer::Linear {
                    in_features: 8,
                    out_features: 6,
                    bias: true,
                },
            ],
            vec![4],
            &mut rng,
        )
        .unwrap();
        let pred = Predictor::new(
            vec![Layer::Linear {
                in_features: 6,
                out_features: 3,
                bias: true,
            }],
            6,
            &mut rng,
        )
        .unwrap();
        let ds = synth_classification(90, &[4], 3, 6.0, seed).unwrap();
        let idx: Vec<usize> = (0..60).collect();
        (enc, pred, ds, idx)
    }

    #[test]
    fn fedprox_mu_zero_equals_plain_sgd_bitwise() {
        let (enc, pred, ds, idx) = toy_setup(41);
        let start = enc
            .params()
            .with_prefix("encoder.")
            .merged(&pred.params().with_prefix("predictor."));
        let anchor = start.clone();
        let mut rng1 = rng_for(1, "prox", &[]);
        let mut rng2 = rng_for(1, "prox", &[]);
        let plain = train_local_model(
            &enc,
            &pred,
            &start,
            &ds,
            &idx,
            2,
            16,
            0.05,
            GradCorrection::None,
            None,
            &mut rng1,
        )
        .unwrap();
        let prox = train_local_model(
            &enc,
            &pred,
            &start,
            &ds,
            &idx,
            2,
            16,
            0.05,
            GradCorrection::None,
            Some(ProxTerm {
                mu: 0.0,
                anchor: &anchor,
            }),
            &mut rng2,
        )
        .unwrap();
        assert_eq!(plain.params.content_hash(), prox.params.content_hash());
    }

    #[test]
    fn zero_variates_equal_plain_sgd_bitwise() {
        let (enc, pred, ds, idx) = toy_setup(43);
        let start = enc
            .params()
            .with_prefix("encoder.")
            .merged(&pred.params().with_prefix("predictor."));
        let zeros = start.zeros_like();
        let mut rng1 = rng_for(2, "scaffold", &[]);
        let mut rng2 = rng_for(2, "scaffold", &[]);
        let plain = train_local_model(
            &enc, &pred, &start, &ds, &idx, 2, 16, 0.05,
            GradCorrection::None, None, &mut rng1,
        )
        .unwrap();
        let corrected = train_local_model(
            &enc, &pred, &start, &ds, &idx, 2, 16, 0.05,
            GradCorrection::WholeModel(&zeros), None, &mut rng2,
        )
        .unwrap();
        // c_g - c_l = 0 adds exact zeros, so the runs agree to the bit
        assert_eq!(plain.params.content_hash(), corrected.params.content_hash());
    }

    #[test]
    fn fedprox_pulls_toward_the_anchor() {
        // quadratic sanity: with mu = 1 and anchor 0, gradient of the
        // proximal term at w=0 is zero, so the first step matches plain
        let w = scalar("w", 0.0);
        let anchor = scalar("w", 0.0);
        let g = scalar("w", -2.0);
        let pull = w.sub(&anchor).unwrap().scale(1.0);
        let adjusted = g.add(&pull).unwrap();
        let stepped = corrected_sgd_step(&w, &adjusted, None, 0.1).unwrap();
        assert!((stepped.get("w").unwrap().item() - 0.2).abs() < 1e-15);
    }

    #[test]
    fn predictor_finetune_freezes_encoder_and_helps() {
        let (enc, pred, ds, idx) = toy_setup(47);
        let val: Vec<usize> = (60..90).collect();
        let val_ds = ds.subset(&val).unwrap();
        let before_hash = enc.params().content_hash();
        let before_acc = evaluate(&enc, &pred, &val_ds).unwrap();
        let mut rng = rng_for(3, "finetune", &[]);
        let tuned =
            predictor_finetune(&enc, &pred, &ds, &idx, 8, 16, 0.1, &mut rng).unwrap();
        let after_acc = evaluate(&enc, &tuned, &val_ds).unwrap();
        assert_eq!(enc.params().content_hash(), before_hash);
        assert!(
            after_acc >= before_acc,
            "finetune should not hurt on separable blobs: {before_acc} -> {after_acc}"
        );
        assert!(matches!(
            predictor_finetune(&enc, &pred, &ds, &idx, 0, 16, 0.1, &mut rng),
            Err(FlError::Contract(_))
        ));
    }
}
