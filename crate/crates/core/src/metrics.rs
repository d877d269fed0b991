//! Accuracy evaluation, communication-cost arithmetic and run ledgers.

use crate::data::Dataset;
use crate::nn::{Encoder, ModelError, Predictor};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("metrics contract violated: {0}")]
    Contract(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub const MIB: f64 = 1024.0 * 1024.0;
pub const GIB: f64 = 1024.0 * 1024.0 * 1024.0;

/// Total communication volume: rounds x per-client round cost x sampled
/// clients per round. Exact product, in bytes.
pub fn comm_cost(rounds: u64, per_round_client_bytes: f64, sampled_clients: u64) -> f64 {
    rounds as f64 * per_round_client_bytes * sampled_clients as f64
}

/// Top-1 accuracy of `pred(enc(x))` over a dataset; argmax ties resolve
/// to the lowest class index.
pub fn evaluate(enc: &Encoder, pred: &Predictor, ds: &Dataset) -> Result<f64, MetricsError> {
    if ds.is_empty() {
        return Err(MetricsError::Contract("empty evaluation dataset".into()));
    }
    let embedding = enc.forward(&ds.features)?;
    let flat = if embedding.shape().len() > 2 {
        let cols: usize = embedding.shape()[1..].iter().product();
        embedding
            .reshape(&[ds.len(), cols])
            .map_err(|e| MetricsError::Contract(e.to_string()))?
    } else {
        embedding
    };
    let logits = pred.forward(&flat)?;
    let k = logits.shape()[1];
    let mut correct = 0usize;
    for (i, &y) in ds.labels.iter().enumerate() {
        let row = logits.row(i).map_err(|e| MetricsError::Contract(e.to_string()))?;
        let mut best = 0usize;
        for c in 1..k {
            if row[c] > row[best] {
                best = c;
            }
        }
        if best == y {
            correct += 1;
        }
    }
    Ok(correct as f64 / ds.len() as f64)
}

/// Accounting entry for one sampled client in one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientRoundStat {
    pub client_id: usize,
    pub bytes_up: u64,
    pub bytes_down: u64,
    /// Local top-1 accuracy after the local update, on the client's
    /// validation split.
    pub accuracy: f64,
    /// FLOPs of the selected sub-model (the full model when nothing was
    /// pruned).
    pub flops_sub: u64,
    /// Mean sparsity ratio across maskable layers.
    pub sparsity: f64,
}

/// Per-round accounting emitted by the round engine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    /// 1-based round index.
    pub round: u64,
    pub clients: Vec<ClientRoundStat>,
}

impl RoundReport {
    pub fn mean_accuracy(&self) -> f64 {
        if self.clients.is_empty() {
            return 0.0;
        }
        self.clients.iter().map(|c| c.accuracy).sum::<f64>() / self.clients.len() as f64
    }

    pub fn bytes_up(&self) -> u64 {
        self.clients.iter().map(|c| c.bytes_up).sum()
    }

    pub fn bytes_down(&self) -> u64 {
        self.clients.iter().map(|c| c.bytes_down).sum()
    }

    pub fn validate(&self) -> Result<(), MetricsError> {
        for c in &self.clients {
            if !(0.0..=1.0).contains(&c.accuracy) {
                return Err(MetricsError::Contract(format!(
                    "round {} client {}: accuracy {}",
                    self.round, c.client_id, c.accuracy
                )));
            }
        }
        Ok(())
    }
}

/// Cumulative communication totals plus the per-round mean accuracies,
/// appended round by round.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CostLedger {
    pub total_bytes_up: u64,
    pub total_bytes_down: u64,
    pub round_mean_accuracy: Vec<f64>,
}

impl CostLedger {
    pub fn new() -> Self {
        CostLedger::default()
    }

    pub fn record(&mut self, report: &RoundReport) {
        self.total_bytes_up += report.bytes_up();
        self.total_bytes_down += report.bytes_down();
        self.round_mean_accuracy.push(report.mean_accuracy());
    }

    pub fn rounds(&self) -> u64 {
        self.round_mean_accuracy.len() as u64
    }

    /// First 1-based round whose mean local accuracy reached the target.
    pub fn rounds_to_target(&self, target: f64) -> Result<Option<u64>, MetricsError> {
        if !(target > 0.0 && target <= 1.0) {
            return Err(MetricsError::Contract(format!(
                "target accuracy must be in (0,1], got {target}"
            )));
        }
        Ok(self
            .round_mean_accuracy
            .iter()
            .position(|&a| a >= target)
            .map(|i| i as u64 + 1))
    }
}

pub const ROUNDS_CSV_HEADER: &str = "round,client_id,bytes_up,bytes_down,acc,flops,sparsity";

/// Append-style CSV of every per-client round entry. Stable float
/// formatting keeps reruns byte-identical.
pub fn write_rounds_csv(path: &Path, reports: &[RoundReport]) -> Result<(), MetricsError> {
    let mut out = String::new();
    out.push_str(ROUNDS_CSV_HEADER);
    out.push('\n');
    for r in reports {
        for c in &r.clients {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.round, c.client_id, c.bytes_up, c.bytes_down, c.accuracy, c.flops_sub, c.sparsity
            ));
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_classification;
    use crate::nn::Layer;
    use crate::rng::rng_for;
    use crate::tensor::Tensor;

    #[test]
    fn cost_formula_is_exact() {
        assert_eq!(comm_cost(0, 2.1 * MIB, 10), 0.0);
        let fedavg = comm_cost(203, 2.1 * MIB, 10);
        assert!((fedavg / GIB - 4.163085937).abs() < 1e-6);
    }

    fn toy_model(seed: u64) -> (Encoder, Predictor) {
        let mut rng = rng_for(seed, "metrics-model", &[]);
        let enc = Encoder::new(
            vec![Layer::Linear {
                in_features: 4,
                out_features: 3,
                bias: false,
            }],
            vec![4],
            &mut rng,
        )
        .unwrap();
        let pred = Predictor::new(
            vec![Layer::Linear {
                in_features: 3,
                out_features: 3,
                bias: false,
            }],
            3,
            &mut rng,
        )
        .unwrap();
        (enc, pred)
    }

    #[test]
    fn evaluate_counts_argmax_matches() {
        let (enc, mut pred) = toy_model(1);
        let ds = synth_classification(30, &[4], 3, 6.0, 2).unwrap();

        // constant logits: tie-break predicts class 0 everywhere
        *pred.params_mut().get_mut("layers.0.weight").unwrap() = Tensor::zeros(&[3, 3]);
        let acc = evaluate(&enc, &pred, &ds).unwrap();
        let frac0 = ds.labels.iter().filter(|&&y| y == 0).count() as f64 / ds.len() as f64;
        assert!((acc - frac0).abs() < 1e-12);
    }

    #[test]
    fn evaluate_matches_per_sample_oracle() {
        let (enc, pred) = toy_model(3);
        let ds = synth_classification(50, &[4], 3, 2.0, 5).unwrap();
        let acc = evaluate(&enc, &pred, &ds).unwrap();

        let mut correct = 0usize;
        for i in 0..ds.len() {
            let x = ds.features.take_rows(&[i]).unwrap();
            let logits = pred.forward(&enc.forward(&x).unwrap()).unwrap();
            let row = logits.row(0).unwrap();
            let mut best = 0;
            for c in 1..row.len() {
                if row[c] > row[best] {
                    best = c;
                }
            }
            if best == ds.labels[i] {
                correct += 1;
            }
        }
        assert_eq!(acc, correct as f64 / ds.len() as f64);
    }

    #[test]
    fn evaluate_is_permutation_invariant() {
        let (enc, pred) = toy_model(7);
        let ds = synth_classification(40, &[4], 3, 2.0, 9).unwrap();
        let forward: Vec<usize> = (0..ds.len()).collect();
        let reversed: Vec<usize> = (0..ds.len()).rev().collect();
        let a = evaluate(&enc, &pred, &ds.subset(&forward).unwrap()).unwrap();
        let b = evaluate(&enc, &pred, &ds.subset(&reversed).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_dataset_is_contract_error() {
        let (enc, pred) = toy_model(11);
        let ds = Dataset {
            features: Tensor::zeros(&[1, 4]),
            labels: vec![],
            n_classes: 3,
        };
        // labels empty while features nonempty: treat as empty dataset
        assert!(evaluate(&enc, &pred, &ds).is_err());
    }

    #[test]
    fn rounds_to_target_finds_first_crossing() {
        let mut ledger = CostLedger::new();
        for (i, acc) in [0.5, 0.82, 0.9].iter().enumerate() {
            ledger.record(&RoundReport {
                round: i as u64 + 1,
                clients: vec![ClientRoundStat {
                    client_id: 0,
                    bytes_up: 10,
                    bytes_down: 20,
                    accuracy: *acc,
                    flops_sub: 1,
                    sparsity: 0.0,
                }],
            });
        }
        assert_eq!(ledger.rounds_to_target(0.8).unwrap(), Some(2));
        assert_eq!(ledger.rounds_to_target(0.95).unwrap(), None);
        assert!(ledger.rounds_to_target(0.0).is_err());
        assert_eq!(ledger.total_bytes_up, 30);
        assert_eq!(ledger.total_bytes_down, 60);
    }
}
