//! Synthetic datasets, Dirichlet non-IID partitioning and local splits.

use crate::rng::rng_for;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("data contract violated: {0}")]
    Contract(String),
    #[error("client {0} has no samples")]
    EmptyClient(usize),
    #[error("csv import failed: {0}")]
    Csv(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Features plus integer labels in `[0, n_classes)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub n_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample feature shape.
    pub fn sample_shape(&self) -> &[usize] {
        &self.features.shape()[1..]
    }

    /// Copy out the rows at `indices`, in order.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset, DataError> {
        let features = self
            .features
            .take_rows(indices)
            .map_err(|e| DataError::Contract(e.to_string()))?;
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Ok(Dataset {
            features,
            labels,
            n_classes: self.n_classes,
        })
    }
}

/// Gaussian-blob classification data. Class means sit on distinct scaled
/// basis vectors so every pair of means is exactly `margin` apart, which
/// needs `dims >= classes` whenever `margin > 0`. Unit-variance isotropic
/// noise, deterministic per seed.
pub fn synth_classification(
    n: usize,
    shape: &[usize],
    classes: usize,
    margin: f64,
    seed: u64,
) -> Result<Dataset, DataError> {
    let dims: usize = shape.iter().product();
    if classes < 2 {
        return Err(DataError::Contract(format!("need >= 2 classes, got {classes}")));
    }
    if n < classes {
        return Err(DataError::Contract(format!(
            "need n >= classes, got {n} < {classes}"
        )));
    }
    if !(margin.is_finite() && margin >= 0.0) {
        return Err(DataError::Contract(format!("margin {margin}")));
    }
    if margin > 0.0 && dims < classes {
        return Err(DataError::Contract(format!(
            "margin > 0 needs dims >= classes, got {dims} < {classes}"
        )));
    }
    let mut rng = rng_for(seed, "synth", &[]);
    // round-robin labels, then shuffle the sample order
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    labels.shuffle(&mut rng);
    let scale = margin / std::f64::consts::SQRT_2;
    let mut data = vec![0.0; n * dims];
    for (i, &y) in labels.iter().enumerate() {
        let row = &mut data[i * dims..(i + 1) * dims];
        for v in row.iter_mut() {
            *v = rng.sample::<f64, _>(StandardNormal);
        }
        if margin > 0.0 {
            row[y] += scale;
        }
    }
    let mut full_shape = vec![n];
    full_shape.extend_from_slice(shape);
    let features = Tensor::from_vec(full_shape, data)
        .map_err(|e| DataError::Contract(e.to_string()))?;
    Ok(Dataset {
        features,
        labels,
        n_classes: classes,
    })
}

/// Per-client index lists into a parent dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub client_indices: Vec<Vec<usize>>,
    pub alpha: f64,
    pub seed: u64,
}

impl Partition {
    pub fn n_clients(&self) -> usize {
        self.client_indices.len()
    }

    pub fn client(&self, id: usize) -> &[usize] {
        &self.client_indices[id]
    }

    /// Clients that ended up with no samples (allowed, reported).
    pub fn empty_clients(&self) -> Vec<usize> {
        self.client_indices
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_empty())
            .map(|(i, _)| i)
            .collect()
    }
}

/// For each class, draw client proportions from `Dir(alpha)` and hand
/// out contiguous chunks of the shuffled class samples. Counts start at
/// `floor(p_j * n_class)` and the remainder goes to the clients with the
/// largest fractional parts, so per-class counts are within one of the
/// ideal allocation and the union covers the dataset exactly.
pub fn dirichlet_partition(
    ds: &Dataset,
    n_clients: usize,
    alpha: f64,
    seed: u64,
) -> Result<Partition, DataError> {
    if n_clients == 0 {
        return Err(DataError::Contract("need at least one client".into()));
    }
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(DataError::Contract(format!(
            "dirichlet concentration must be positive, got {alpha}"
        )));
    }
    let mut rng = rng_for(seed, "dirichlet", &[]);
    let mut client_indices: Vec<Vec<usize>> = vec![Vec::new(); n_clients];
    let gamma = Gamma::new(alpha, 1.0)
        .map_err(|e| DataError::Contract(format!("gamma setup: {e}")))?;

    for class in 0..ds.n_classes {
        let mut members: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == class).collect();
        members.shuffle(&mut rng);
        if members.is_empty() {
            continue;
        }
        // p ~ Dir(alpha) via normalized gamma draws
        let mut draws: Vec<f64> = (0..n_clients).map(|_| gamma.sample(&mut rng)).collect();
        let total: f64 = draws.iter().sum();
        if total <= 0.0 {
            draws = vec![1.0; n_clients];
        }
        let total: f64 = draws.iter().sum();
        let props: Vec<f64> = draws.iter().map(|d| d / total).collect();

        let n_k = members.len();
        let ideal: Vec<f64> = props.iter().map(|p| p * n_k as f64).collect();
        let mut counts: Vec<usize> = ideal.iter().map(|v| v.floor() as usize).collect();
        let assigned: usize = counts.iter().sum();
        let mut order: Vec<usize> = (0..n_clients).collect();
        order.sort_by(|&a, &b| {
            let fa = ideal[a] - ideal[a].floor();
            let fb = ideal[b] - ideal[b].floor();
            fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
        });
        for &j in order.iter().take(n_k - assigned) {
            counts[j] += 1;
        }

        let mut offset = 0;
        for (j, &c) in counts.iter().enumerate() {
            client_indices[j].extend_from_slice(&members[offset..offset + c]);
            offset += c;
        }
    }
    Ok(Partition {
        client_indices,
        alpha,
        seed,
    })
}

/// Deterministic train/validation split of one client's indices:
/// `floor(val_fraction * n)` samples go to validation.
pub fn split_local(
    part: &Partition,
    client: usize,
    val_fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>), DataError> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(DataError::Contract(format!(
            "val_fraction must be in (0,1), got {val_fraction}"
        )));
    }
    if client >= part.n_clients() {
        return Err(DataError::Contract(format!(
            "client {client} out of range for {} clients",
            part.n_clients()
        )));
    }
    let indices = part.client(client);
    if indices.is_empty() {
        return Err(DataError::EmptyClient(client));
    }
    let mut shuffled = indices.to_vec();
    let mut rng = rng_for(seed, "split", &[client as u64]);
    shuffled.shuffle(&mut rng);
    let n_val = ((val_fraction * shuffled.len() as f64).floor() as usize).max(1);
    let val = shuffled[..n_val].to_vec();
    let train = shuffled[n_val..].to_vec();
    Ok((train, val))
}

/// Read a dataset from CSV: every column but the last is a feature, the
/// last column is an integer class label. No header.
pub fn import_csv(path: &Path) -> Result<Dataset, DataError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| DataError::Csv(e.to_string()))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| DataError::Csv(e.to_string()))?;
        if record.len() < 2 {
            return Err(DataError::Csv(format!(
                "row {line}: need at least one feature column plus a label"
            )));
        }
        let mut row = Vec::with_capacity(record.len() - 1);
        for field in record.iter().take(record.len() - 1) {
            row.push(field.trim().parse::<f64>().map_err(|e| {
                DataError::Csv(format!("row {line}: bad feature {field:?}: {e}"))
            })?);
        }
        let label_field = record.get(record.len() - 1).unwrap();
        let label = label_field.trim().parse::<usize>().map_err(|e| {
            DataError::Csv(format!("row {line}: bad label {label_field:?}: {e}"))
        })?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(DataError::Csv(format!(
                    "row {line}: {} columns, expected {}",
                    row.len() + 1,
                    first.len() + 1
                )));
            }
        }
        rows.push(row);
        labels.push(label);
    }
    if rows.is_empty() {
        return Err(DataError::Csv("empty file".into()));
    }
    let dims = rows[0].len();
    let n = rows.len();
    let n_classes = labels.iter().copied().max().unwrap() + 1;
    let data: Vec<f64> = rows.into_iter().flatten().collect();
    let features = Tensor::from_vec(vec![n, dims], data)
        .map_err(|e| DataError::Contract(e.to_string()))?;
    Ok(Dataset {
        features,
        labels,
        n_classes,
    })
}

/// Mean over clients of the label entropy (nats) of each client's local
/// data; lower means more heterogeneous clients.
pub fn mean_label_entropy(ds: &Dataset, part: &Partition) -> f64 {
    let mut total = 0.0;
    let mut counted = 0usize;
    for indices in &part.client_indices {
        if indices.is_empty() {
            continue;
        }
        let mut counts = vec![0usize; ds.n_classes];
        for &i in indices {
            counts[ds.labels[i]] += 1;
        }
        let n = indices.len() as f64;
        let h: f64 = counts
            .iter()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let p = c as f64 / n;
                -p * p.ln()
            })
            .sum();
        total += h;
        counted += 1;
    }
    if counted == 0 {
        0.0
    } else {
        total / counted as f64
    }
}
