//! SGD and Adam parameter updates over param sets.

use crate::params::ParamSet;
use crate::tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("optimizer contract violated: {0}")]
    Contract(String),
    #[error("non-finite gradient passed to {0}")]
    NonFiniteGrad(&'static str),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// One plain gradient step: `p - lr * g` for every entry.
pub fn sgd_step(params: &ParamSet, grads: &ParamSet, lr: f64) -> Result<ParamSet, OptimError> {
    if !lr.is_finite() || lr < 0.0 {
        return Err(OptimError::Contract(format!("learning rate {lr}")));
    }
    Ok(params.axpy(-lr, grads)?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment buffers plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: ParamSet,
    pub v: ParamSet,
}

impl AdamState {
    pub fn new(like: &ParamSet) -> Self {
        AdamState {
            step: 0,
            m: like.zeros_like(),
            v: like.zeros_like(),
        }
    }
}

/// Bias-corrected Adam update. Returns the new parameters and state;
/// the inputs are untouched.
pub fn adam_step(
    params: &ParamSet,
    state: &AdamState,
    grads: &ParamSet,
    hp: &AdamParams,
) -> Result<(ParamSet, AdamState), OptimError> {
    for (_, g) in grads.iter() {
        if !g.is_finite() {
            return Err(OptimError::NonFiniteGrad("adam_step"));
        }
    }
    let t = state.step + 1;
    let m = state.m.zip_map(grads, |m, g| hp.beta1 * m + (1.0 - hp.beta1) * g)?;
    let v = state
        .v
        .zip_map(grads, |v, g| hp.beta2 * v + (1.0 - hp.beta2) * g * g)?;
    let mc = 1.0 - hp.beta1.powi(t as i32);
    let vc = 1.0 - hp.beta2.powi(t as i32);
    let mhat = m.scale(1.0 / mc);
    let vhat = v.scale(1.0 / vc);
    let delta = mhat.zip_map(&vhat, |m, v| m / (v.sqrt() + hp.eps))?;
    let new_params = params.axpy(-hp.lr, &delta)?;
    Ok((new_params, AdamState { step: t, m, v }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn scalar_params(v: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::scalar(v));
        p
    }

    #[test]
    fn sgd_substitution() {
        let p = scalar_params(1.0);
        let g = scalar_params(2.0);
        let out = sgd_step(&p, &g, 0.1).unwrap();
        assert!((out.get("w").unwrap().item() - 0.8).abs() < 1e-15);
    }

    #[test]
    fn sgd_fixed_points() {
        let p = scalar_params(-0.25);
        let zero = scalar_params(0.0);
        assert_eq!(sgd_step(&p, &zero, 0.3).unwrap().get("w").unwrap().item(), -0.25);
        let g = scalar_params(7.0);
        assert_eq!(sgd_step(&p, &g, 0.0).unwrap().get("w").unwrap().item(), -0.25);
    }

    #[test]
    fn sgd_shape_mismatch_is_contract_error() {
        let p = scalar_params(1.0);
        let mut g = ParamSet::new();
        g.insert("w", Tensor::zeros(&[2]));
        assert!(sgd_step(&p, &g, 0.1).is_err());
    }

    #[test]
    fn adam_first_step_is_roughly_minus_lr() {
        let p = scalar_params(0.0);
        let g = scalar_params(1.0);
        let hp = AdamParams {
            lr: 1e-3,
            ..Default::default()
        };
        let (out, st) = adam_step(&p, &AdamState::new(&p), &g, &hp).unwrap();
        let dp = out.get("w").unwrap().item();
        assert!((dp + 1e-3).abs() < 1e-8, "delta {dp}");
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adam_zero_grads_fixed_point() {
        let p = scalar_params(0.7);
        let g = scalar_params(0.0);
        let hp = AdamParams::default();
        let mut state = AdamState::new(&p);
        let mut cur = p.clone();
        for _ in 0..5 {
            let (next, st) = adam_step(&cur, &state, &g, &hp).unwrap();
            cur = next;
            state = st;
        }
        assert_eq!(cur.get("w").unwrap().item(), 0.7);
    }

    #[test]
    fn adam_matches_scalar_reference_on_quadratic() {
        // minimize f(w) = w^2 from w = 1; gradient 2w
        let hp = AdamParams {
            lr: 0.05,
            ..Default::default()
        };
        let mut p = scalar_params(1.0);
        let mut state = AdamState::new(&p);

        // independent scalar reference
        let (mut rw, mut rm, mut rv) = (1.0f64, 0.0f64, 0.0f64);
        for t in 1..=10 {
            let g = 2.0 * p.get("w").unwrap().item();
            let (np, st) = adam_step(&p, &state, &scalar_params(g), &hp).unwrap();
            p = np;
            state = st;

            let rg = 2.0 * rw;
            rm = hp.beta1 * rm + (1.0 - hp.beta1) * rg;
            rv = hp.beta2 * rv + (1.0 - hp.beta2) * rg * rg;
            let mhat = rm / (1.0 - hp.beta1.powi(t));
            let vhat = rv / (1.0 - hp.beta2.powi(t));
            rw -= hp.lr * mhat / (vhat.sqrt() + hp.eps);
        }
        let w = p.get("w").unwrap().item();
        assert!((w - rw).abs() < 1e-12, "{w} vs reference {rw}");
        assert!(w.abs() < 1.0, "|w| should have decreased, got {w}");
    }

    #[test]
    fn adam_rejects_non_finite_grads() {
        let p = scalar_params(0.0);
        let g = scalar_params(f64::NAN);
        assert!(adam_step(&p, &AdamState::new(&p), &g, &AdamParams::default()).is_err());
    }
}
