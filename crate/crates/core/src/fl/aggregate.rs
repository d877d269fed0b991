//! Index-aware server-side aggregation.
//!
//! Every uploaded tensor is a set of first-axis rows of the matching
//! global tensor. For each row the server averages the movement
//! `w_k[row] - w_g[row]` over the clients that selected the row and
//! steps the global weights toward it:
//!
//! `w_g[row] += server_lr * sum_k (w_k[row] - w_g[row]) / divisor`
//!
//! With full index sets and `server_lr = 1` this is exactly FedAvg.
//! Folds run in client-id order whatever order updates arrive in, so
//! aggregation is independent of scheduling.

use super::state::{AggDivisor, ClientUpdate, FlError};
use crate::params::ParamSet;
use crate::tensor::Tensor;

fn check_rows(
    name: &str,
    global: &Tensor,
    uploaded: &Tensor,
    kept: Option<&[usize]>,
) -> Result<(), FlError> {
    let width = global.row_numel();
    if uploaded.row_numel() != width {
        return Err(FlError::Contract(format!(
            "{name}: uploaded row width {} != global {}",
            uploaded.row_numel(),
            width
        )));
    }
    match kept {
        Some(kept) => {
            if kept.len() != uploaded.rows() {
                return Err(FlError::Contract(format!(
                    "{name}: {} indices for {} uploaded rows",
                    kept.len(),
                    uploaded.rows()
                )));
            }
            if let Some(&bad) = kept.iter().find(|&&i| i >= global.rows()) {
                return Err(FlError::Contract(format!(
                    "{name}: row index {bad} out of range for {} rows",
                    global.rows()
                )));
            }
        }
        None => {
            if uploaded.rows() != global.rows() {
                return Err(FlError::Contract(format!(
                    "{name}: full upload has {} rows, global has {}",
                    uploaded.rows(),
                    global.rows()
                )));
            }
        }
    }
    Ok(())
}

/// Fold sampled-client uploads into the global weights. Rows selected by
/// no client are untouched.
pub fn aggregate_salient(
    global: &ParamSet,
    updates: &[ClientUpdate],
    server_lr: f64,
    divisor: AggDivisor,
) -> Result<ParamSet, FlError> {
    if updates.is_empty() {
        return Err(FlError::Contract("aggregation needs >= 1 update".into()));
    }
    let mut order: Vec<&ClientUpdate> = updates.iter().collect();
    order.sort_by_key(|u| u.client_id);

    let k = updates.len() as f64;
    let mut out = ParamSet::new();
    for (name, g_tensor) in global.iter() {
        let width = g_tensor.row_numel();
        let rows = g_tensor.rows();
        let mut delta = vec![0.0; g_tensor.numel()];
        let mut coverage = vec![0u32; rows];
        for u in &order {
            let Some(uploaded) = u.weights.get(name) else {
                continue;
            };
            let kept = u.kept_rows(name);
            check_rows(name, g_tensor, uploaded, kept)?;
            match kept {
                Some(kept) => {
                    for (slot, &row) in kept.iter().enumerate() {
                        coverage[row] += 1;
                        let up = uploaded.row(slot).expect("checked");
                        let gl = g_tensor.row(row).expect("checked");
                        let d = &mut delta[row * width..(row + 1) * width];
                        for e in 0..width {
                            d[e] += up[e] - gl[e];
                        }
                    }
                }
                None => {
                    for row in 0..rows {
                        coverage[row] += 1;
                        let up = uploaded.row(row).expect("checked");
                        let gl = g_tensor.row(row).expect("checked");
                        let d = &mut delta[row * width..(row + 1) * width];
                        for e in 0..width {
                            d[e] += up[e] - gl[e];
                        }
                    }
                }
            }
        }
        let mut data = g_tensor.data().to_vec();
        for row in 0..rows {
            let div = match divisor {
                AggDivisor::Uniform => k,
                AggDivisor::PerRowCoverage => coverage[row] as f64,
            };
            if coverage[row] == 0 {
                continue;
            }
            for e in 0..width {
                data[row * width + e] += server_lr * delta[row * width + e] / div;
            }
        }
        out.insert(
            name,
            Tensor::from_vec(g_tensor.shape().to_vec(), data)?,
        );
    }
    Ok(out)
}

/// A variate delta restricted to the rows its client selected.
#[derive(Debug, Clone)]
pub struct SlicedDelta {
    pub values: ParamSet,
    /// Kept row indices per partially-shipped tensor; unlisted tensors
    /// are full.
    pub indices: Vec<(String, Vec<usize>)>,
}

impl SlicedDelta {
    fn kept_rows(&self, name: &str) -> Option<&[usize]> {
        self.indices
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
    }
}

/// `c_g <- c_g + sum_k delta_k / n_total`, each delta contributing only
/// on its own rows. The divisor is the full client population.
pub fn update_global_control(
    c_g: &ParamSet,
    deltas: &[SlicedDelta],
    n_total: usize,
) -> Result<ParamSet, FlError> {
    if n_total == 0 {
        return Err(FlError::Contract(
            "global variate update needs a non-empty client population".into(),
        ));
    }
    let mut out = c_g.clone();
    for (name, tensor) in out.iter_mut() {
        let width = tensor.row_numel();
        let rows = tensor.rows();
        let mut acc = vec![0.0; tensor.numel()];
        for d in deltas {
            let Some(values) = d.values.get(name) else {
                continue;
            };
            let kept = d.kept_rows(name);
            if values.row_numel() != width {
                return Err(FlError::Contract(format!(
                    "{name}: delta row width {} != variate {}",
                    values.row_numel(),
                    width
                )));
            }
            match kept {
                Some(kept) => {
                    if kept.len() != values.rows() {
                        return Err(FlError::Contract(format!(
                            "{name}: {} indices for {} delta rows",
                            kept.len(),
                            values.rows()
                        )));
                    }
                    for (slot, &row) in kept.iter().enumerate() {
                        if row >= rows {
                            return Err(FlError::Contract(format!(
                                "{name}: delta row {row} out of range"
                            )));
                        }
                        let src = values.row(slot).expect("checked");
                        let dst = &mut acc[row * width..(row + 1) * width];
                        for e in 0..width {
                            dst[e] += src[e];
                        }
                    }
                }
                None => {
                    if values.rows() != rows {
                        return Err(FlError::Contract(format!(
                            "{name}: full delta has {} rows, variate has {rows}",
                            values.rows()
                        )));
                    }
                    for (d, s) in acc.iter_mut().zip(values.data()) {
                        *d += s;
                    }
                }
            }
        }
        let scale = 1.0 / n_total as f64;
        for (dst, a) in tensor.data_mut().iter_mut().zip(&acc) {
            *dst += scale * a;
        }
    }
    Ok(out)
}
