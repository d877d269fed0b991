//! Experiment configs, presets, end-to-end runs and run comparison.

use crate::agent::{pretrain_reference_agent, AgentConfig, PpoUpdater};
use crate::data::{dirichlet_partition, import_csv, split_local, synth_classification, Dataset};
use crate::fl::{
    predictor_finetune, run_round, AgentRuntime, AggDivisor, ClientState, FederationConfig,
    FlError, Method, ServerState,
};
use crate::metrics::{evaluate, write_rounds_csv, CostLedger, RoundReport, GIB, MIB};
use crate::nn::{Encoder, Layer, Predictor, WirePrecision};
use crate::rng::rng_for;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config error: {0}")]
    Config(String),
    #[error("missing summary.json in {0}")]
    MissingSummary(PathBuf),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Fl(#[from] FlError),
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
    #[error(transparent)]
    Model(#[from] crate::nn::ModelError),
    #[error(transparent)]
    Metrics(#[from] crate::metrics::MetricsError),
    #[error(transparent)]
    Agent(#[from] crate::agent::AgentError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetSpec {
    Synthetic {
        n: usize,
        shape: Vec<usize>,
        classes: usize,
        margin: f64,
    },
    Csv {
        path: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ModelSpec {
    Mlp {
        hidden: Vec<usize>,
        embedding: usize,
    },
    Cnn {
        channels: Vec<usize>,
        embedding: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentSettings {
    pub episodes: usize,
    pub pretrain_episodes: usize,
    pub finetune_rounds: u64,
    pub flops_constraint: f64,
    pub a_max: f64,
    pub sigma: f64,
    pub lr: f64,
    pub clip: f64,
    pub gamma: f64,
    pub ppo_epochs: usize,
    pub hidden: usize,
    pub finetune_head_only: bool,
    pub sample_retries: usize,
}

impl Default for AgentSettings {
    fn default() -> Self {
        AgentSettings {
            episodes: 8,
            pretrain_episodes: 24,
            finetune_rounds: 10,
            flops_constraint: 0.4,
            a_max: 0.8,
            sigma: 0.5,
            lr: 3e-4,
            clip: 0.2,
            gamma: 0.99,
            ppo_epochs: 4,
            hidden: 24,
            finetune_head_only: true,
            sample_retries: 8,
        }
    }
}

impl AgentSettings {
    fn to_agent_config(&self) -> AgentConfig {
        AgentConfig {
            gamma: self.gamma,
            clip: self.clip,
            lr: self.lr,
            betas: (0.9, 0.999),
            sigma: self.sigma,
            a_max: self.a_max,
            episodes: self.episodes,
            ppo_epochs: self.ppo_epochs,
            finetune_head_only: self.finetune_head_only,
            hidden: self.hidden,
            sample_retries: self.sample_retries,
        }
    }
}

/// Two-phase transferability evaluation: federate on one split, then
/// fine-tune fresh predictors on a held-out split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransferSpec {
    pub holdout_fraction: f64,
    pub finetune_epochs: usize,
}

impl Default for TransferSpec {
    fn default() -> Self {
        TransferSpec {
            holdout_fraction: 0.25,
            finetune_epochs: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub method: String,
    pub clients: usize,
    pub sample_ratio: f64,
    pub rounds: u64,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub server_lr: f64,
    pub fedprox_mu: f64,
    /// Upload precision in bits: 32 or 64.
    pub wire_precision: u8,
    /// Divide aggregated rows by per-row coverage instead of the sampled
    /// client count.
    pub per_row_divisor: bool,
    pub dirichlet_alpha: f64,
    pub val_fraction: f64,
    pub target_accuracy: f64,
    pub dataset: DatasetSpec,
    pub model: ModelSpec,
    pub agent: AgentSettings,
    pub transfer: Option<TransferSpec>,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            method: "spatl".into(),
            clients: 10,
            sample_ratio: 1.0,
            rounds: 30,
            local_epochs: 10,
            batch_size: 32,
            lr: 0.05,
            server_lr: 1.0,
            fedprox_mu: 0.01,
            wire_precision: 32,
            per_row_divisor: false,
            dirichlet_alpha: 0.1,
            val_fraction: 0.2,
            target_accuracy: 0.8,
            dataset: DatasetSpec::Synthetic {
                n: 1200,
                shape: vec![1, 8, 8],
                classes: 4,
                margin: 6.0,
            },
            model: ModelSpec::Cnn {
                channels: vec![6, 12],
                embedding: 16,
            },
            agent: AgentSettings::default(),
            transfer: None,
            seed: 42,
        }
    }
}

pub const PRESET_NAMES: &[&str] = &[
    "spatl",
    "fedavg",
    "fedprox",
    "scaffold",
    "ablation-no-select",
    "ablation-no-transfer",
    "ablation-no-gradctl",
    "transfer-eval",
];

/// Built-in configurations; flags can override individual fields.
pub fn preset(name: &str) -> Option<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    match name {
        "spatl" => {}
        "fedavg" => cfg.method = "fedavg".into(),
        "fedprox" => cfg.method = "fedprox".into(),
        "scaffold" => cfg.method = "scaffold".into(),
        "ablation-no-select" => cfg.method = "spatl-no-select".into(),
        "ablation-no-transfer" => cfg.method = "spatl-no-transfer".into(),
        "ablation-no-gradctl" => cfg.method = "spatl-no-gradctl".into(),
        "transfer-eval" => {
            cfg.transfer = Some(TransferSpec::default());
        }
        _ => return None,
    }
    Some(cfg)
}

/// CLI flag overrides applied on top of a config.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub method: Option<String>,
    pub clients: Option<usize>,
    pub sample_ratio: Option<f64>,
    pub rounds: Option<u64>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<ExperimentConfig, ExperimentError> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn apply(&mut self, over: &Overrides) {
        if let Some(v) = over.seed {
            self.seed = v;
        }
        if let Some(v) = &over.method {
            self.method = v.clone();
        }
        if let Some(v) = over.clients {
            self.clients = v;
        }
        if let Some(v) = over.sample_ratio {
            self.sample_ratio = v;
        }
        if let Some(v) = over.rounds {
            self.rounds = v;
        }
    }

    pub fn wire(&self) -> Result<WirePrecision, ExperimentError> {
        match self.wire_precision {
            32 => Ok(WirePrecision::F32),
            64 => Ok(WirePrecision::F64),
            other => Err(ExperimentError::Config(format!(
                "wire_precision must be 32 or 64, got {other}"
            ))),
        }
    }

    pub fn method_parsed(&self) -> Result<Method, ExperimentError> {
        Ok(Method::parse(&self.method, self.fedprox_mu)?)
    }

    pub fn federation(&self) -> Result<FederationConfig, ExperimentError> {
        let fed = FederationConfig {
            method: self.method_parsed()?,
            n_clients: self.clients,
            sample_ratio: self.sample_ratio,
            rounds: self.rounds,
            local_epochs: self.local_epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            server_lr: self.server_lr,
            wire_precision: self.wire()?,
            divisor: if self.per_row_divisor {
                AggDivisor::PerRowCoverage
            } else {
                AggDivisor::Uniform
            },
            agent: self.agent.to_agent_config(),
            flops_constraint: self.agent.flops_constraint,
            agent_finetune_rounds: self.agent.finetune_rounds,
            seed: self.seed,
        };
        fed.validate()?;
        Ok(fed)
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        self.federation()?;
        if !(self.dirichlet_alpha > 0.0) {
            return Err(ExperimentError::Config(format!(
                "dirichlet_alpha must be positive, got {}",
                self.dirichlet_alpha
            )));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(ExperimentError::Config(format!(
                "val_fraction must be in (0,1), got {}",
                self.val_fraction
            )));
        }
        if !(self.target_accuracy > 0.0 && self.target_accuracy <= 1.0) {
            return Err(ExperimentError::Config(format!(
                "target_accuracy must be in (0,1], got {}",
                self.target_accuracy
            )));
        }
        if let Some(t) = &self.transfer {
            if !(t.holdout_fraction > 0.0 && t.holdout_fraction < 1.0) {
                return Err(ExperimentError::Config(format!(
                    "transfer.holdout_fraction must be in (0,1), got {}",
                    t.holdout_fraction
                )));
            }
            if t.finetune_epochs == 0 {
                return Err(ExperimentError::Config(
                    "transfer.finetune_epochs must be >= 1".into(),
                ));
            }
        }
        if let DatasetSpec::Csv { path } = &self.dataset {
            if !Path::new(path).exists() {
                return Err(ExperimentError::Config(format!(
                    "dataset.path {path:?} does not exist"
                )));
            }
        }
        Ok(())
    }

    fn load_dataset(&self) -> Result<Dataset, ExperimentError> {
        match &self.dataset {
            DatasetSpec::Synthetic {
                n,
                shape,
                classes,
                margin,
            } => Ok(synth_classification(*n, shape, *classes, *margin, self.seed)?),
            DatasetSpec::Csv { path } => Ok(import_csv(Path::new(path))?),
        }
    }

    fn build_encoder(&self, sample_shape: &[usize], seed: u64) -> Result<Encoder, ExperimentError> {
        let mut rng = rng_for(seed, "model", &[]);
        let layers = match &self.model {
            ModelSpec::Mlp { hidden, embedding } => {
                let mut layers = Vec::new();
                let mut d: usize = sample_shape.iter().product();
                if sample_shape.len() > 1 {
                    layers.push(Layer::Flatten);
                }
                for &h in hidden {
                    layers.push(Layer::Linear {
                        in_features: d,
                        out_features: h,
                        bias: true,
                    });
                    layers.push(Layer::Relu);
                    d = h;
                }
                layers.push(Layer::Linear {
                    in_features: d,
                    out_features: *embedding,
                    bias: true,
                });
                layers
            }
            ModelSpec::Cnn {
                channels,
                embedding,
            } => {
                if sample_shape.len() != 3 {
                    return Err(ExperimentError::Config(format!(
                        "cnn model needs [c,h,w] samples, dataset has {sample_shape:?}"
                    )));
                }
                let (mut c, mut h, mut w) = (sample_shape[0], sample_shape[1], sample_shape[2]);
                let mut layers = Vec::new();
                for (i, &out) in channels.iter().enumerate() {
                    let stride = if i == 0 { 1 } else { 2 };
                    layers.push(Layer::Conv2d {
                        in_channels: c,
                        out_channels: out,
                        kernel: 3,
                        stride,
                        padding: 1,
                        bias: true,
                    });
                    layers.push(Layer::Relu);
                    h = (h + 2 - 3) / stride + 1;
                    w = (w + 2 - 3) / stride + 1;
                    c = out;
                }
                layers.push(Layer::Flatten);
                layers.push(Layer::Linear {
                    in_features: c * h * w,
                    out_features: *embedding,
                    bias: true,
                });
                layers
            }
        };
        Ok(Encoder::new(layers, sample_shape.to_vec(), &mut rng)?)
    }

    fn build_predictor(&self, classes: usize, seed: u64, tag: u64) -> Result<Predictor, ExperimentError> {
        let embedding = match &self.model {
            ModelSpec::Mlp { embedding, .. } | ModelSpec::Cnn { embedding, .. } => *embedding,
        };
        let mut rng = rng_for(seed, "predictor", &[tag]);
        Ok(Predictor::new(
            vec![Layer::Linear {
                in_features: embedding,
                out_features: classes,
                bias: true,
            }],
            embedding,
            &mut rng,
        )?)
    }
}

/// Machine-readable run result written to `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub method: String,
    pub clients: usize,
    pub sample_ratio: f64,
    pub rounds: u64,
    pub seed: u64,
    pub final_mean_accuracy: f64,
    pub total_bytes_up: u64,
    pub total_bytes_down: u64,
    /// Number of (round, client) upload events.
    pub client_rounds: u64,
    /// Mean per-client per-round uplink bytes.
    pub mean_round_client_bytes: f64,
    pub target_accuracy: f64,
    pub rounds_to_target: Option<u64>,
    /// `1 - flops(sub-model)/flops(full model)` averaged over the last
    /// round's clients.
    pub mean_flops_reduction: f64,
    /// Mean accuracy after predictor-only fine-tuning on the held-out
    /// split; present only for transfer evaluations.
    pub transferred_accuracy: Option<f64>,
}

pub struct RunResult {
    pub summary: Summary,
    pub reports: Vec<RoundReport>,
}

/// A federation ready to run: config, data and initialized state.
pub struct Setup {
    pub fed: FederationConfig,
    pub fl_data: Dataset,
    pub holdout: Option<Dataset>,
    pub clients: Vec<ClientState>,
    pub server: ServerState,
    pub predictor_template: Predictor,
}

/// Build the federation an experiment config describes. The optional
/// method override lets callers combine SPATL switches beyond the named
/// ablation arms.
pub fn build_setup(
    cfg: &ExperimentConfig,
    method_override: Option<Method>,
) -> Result<Setup, ExperimentError> {
    let mut fed = cfg.federation()?;
    if let Some(m) = method_override {
        fed.method = m;
    }
    let full = cfg.load_dataset()?;

    // hold out a transfer split before federating
    let (fl_data, holdout): (Dataset, Option<Dataset>) = match &cfg.transfer {
        Some(t) => {
            let n = full.len();
            let cut = ((1.0 - t.holdout_fraction) * n as f64).floor() as usize;
            let a: Vec<usize> = (0..cut).collect();
            let b: Vec<usize> = (cut..n).collect();
            (full.subset(&a)?, Some(full.subset(&b)?))
        }
        None => (full, None),
    };

    let partition = dirichlet_partition(&fl_data, cfg.clients, cfg.dirichlet_alpha, cfg.seed)?;
    let encoder = cfg.build_encoder(fl_data.sample_shape(), cfg.seed)?;
    let embedding_numel: usize = encoder.output_shape().iter().product();
    let predictor_template = cfg.build_predictor(fl_data.n_classes, cfg.seed, u64::MAX)?;
    if predictor_template.input_dim() != embedding_numel {
        return Err(ExperimentError::Config(format!(
            "predictor expects {} inputs, encoder embeds {}",
            predictor_template.input_dim(),
            embedding_numel
        )));
    }

    let method = fed.method;
    let variate_scope = match method {
        Method::Spatl(o) if o.gradient_control => {
            encoder.params().with_prefix("encoder.").zeros_like()
        }
        Method::Scaffold => encoder
            .params()
            .with_prefix("encoder.")
            .merged(&predictor_template.params().with_prefix("predictor."))
            .zeros_like(),
        _ => crate::params::ParamSet::new(),
    };

    let agent_template = if method.uses_selection() {
        let pretrained = pretrain_reference_agent(
            &fed.agent,
            cfg.agent.pretrain_episodes,
            0.6,
            cfg.seed,
        )?;
        Some(pretrained.retarget(encoder.maskable_layers().len(), cfg.seed)?)
    } else {
        None
    };

    let mut clients: Vec<ClientState> = Vec::with_capacity(cfg.clients);
    for id in 0..cfg.clients {
        let (train_idx, val_idx) = if partition.client(id).len() >= 2 {
            split_local(&partition, id, cfg.val_fraction, cfg.seed)?
        } else {
            (Vec::new(), Vec::new())
        };
        let predictor = if method.shares_predictor() {
            predictor_template.clone()
        } else {
            cfg.build_predictor(fl_data.n_classes, cfg.seed, id as u64)?
        };
        let agent = agent_template.as_ref().map(|net| {
            let updater = PpoUpdater::new(
                net,
                fed.agent.finetune_head_only,
                fed.agent.adam_params(),
            );
            AgentRuntime {
                net: net.clone(),
                updater,
            }
        });
        clients.push(ClientState {
            id,
            predictor,
            local_variate: variate_scope.clone(),
            train_idx,
            val_idx,
            agent,
        });
    }

    let server = ServerState {
        encoder,
        shared_predictor: method.shares_predictor().then(|| predictor_template.clone()),
        global_variate: variate_scope,
        n_clients: cfg.clients,
        round: 0,
    };
    Ok(Setup {
        fed,
        fl_data,
        holdout,
        clients,
        server,
        predictor_template,
    })
}

/// Run a full experiment, writing `rounds.csv` and `summary.json` into
/// `out_dir`. Deterministic for a fixed config and seed.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<RunResult, ExperimentError> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;

    let Setup {
        fed,
        fl_data,
        holdout,
        mut clients,
        mut server,
        predictor_template,
    } = build_setup(cfg, None)?;

    let mut reports = Vec::with_capacity(cfg.rounds as usize);
    let mut ledger = CostLedger::new();
    for _ in 0..cfg.rounds {
        let report = run_round(&mut server, &mut clients, &fed, &fl_data)?;
        ledger.record(&report);
        reports.push(report);
    }

    // final mean accuracy over every client that has validation data
    let mut acc_sum = 0.0;
    let mut acc_n = 0usize;
    for c in &clients {
        if c.val_idx.is_empty() {
            continue;
        }
        let val = fl_data.subset(&c.val_idx)?;
        let pred = match &server.shared_predictor {
            Some(p) => p,
            None => &c.predictor,
        };
        acc_sum += evaluate(&server.encoder, pred, &val)?;
        acc_n += 1;
    }
    let final_mean_accuracy = if acc_n > 0 { acc_sum / acc_n as f64 } else { 0.0 };

    let full_model_flops =
        server.encoder.count_flops() + predictor_template.count_flops();
    let mean_flops_reduction = reports.last().map_or(0.0, |r| {
        if r.clients.is_empty() {
            return 0.0;
        }
        r.clients
            .iter()
            .map(|c| 1.0 - c.flops_sub as f64 / full_model_flops as f64)
            .sum::<f64>()
            / r.clients.len() as f64
    });

    // transferability phase: fresh predictors fine-tuned on held-out data
    let transferred_accuracy = match (&cfg.transfer, &holdout) {
        (Some(t), Some(b)) => {
            let part_b = dirichlet_partition(b, cfg.clients, cfg.dirichlet_alpha, cfg.seed ^ 0xb)?;
            let mut sum = 0.0;
            let mut n = 0usize;
            for id in 0..cfg.clients {
                if part_b.client(id).len() < 2 {
                    continue;
                }
                let (train_idx, val_idx) = split_local(&part_b, id, cfg.val_fraction, cfg.seed ^ 0xb)?;
                let fresh = cfg.build_predictor(b.n_classes, cfg.seed ^ 0xb, id as u64)?;
                let mut rng = rng_for(cfg.seed, "transfer", &[id as u64]);
                let tuned = predictor_finetune(
                    &server.encoder,
                    &fresh,
                    b,
                    &train_idx,
                    t.finetune_epochs,
                    cfg.batch_size,
                    cfg.lr,
                    &mut rng,
                )?;
                sum += evaluate(&server.encoder, &tuned, &b.subset(&val_idx)?)?;
                n += 1;
            }
            Some(if n > 0 { sum / n as f64 } else { 0.0 })
        }
        _ => None,
    };

    let client_rounds: u64 = reports.iter().map(|r| r.clients.len() as u64).sum();
    let summary = Summary {
        method: cfg.method.clone(),
        clients: cfg.clients,
        sample_ratio: cfg.sample_ratio,
        rounds: cfg.rounds,
        seed: cfg.seed,
        final_mean_accuracy,
        total_bytes_up: ledger.total_bytes_up,
        total_bytes_down: ledger.total_bytes_down,
        client_rounds,
        mean_round_client_bytes: if client_rounds > 0 {
            ledger.total_bytes_up as f64 / client_rounds as f64
        } else {
            0.0
        },
        target_accuracy: cfg.target_accuracy,
        rounds_to_target: ledger.rounds_to_target(cfg.target_accuracy)?,
        mean_flops_reduction,
        transferred_accuracy,
    };

    write_rounds_csv(&out_dir.join("rounds.csv"), &reports)?;
    std::fs::write(
        out_dir.join("summary.json"),
        serde_json::to_string_pretty(&summary)? + "\n",
    )?;
    Ok(RunResult { summary, reports })
}

pub fn read_summary(dir: &Path) -> Result<Summary, ExperimentError> {
    let path = dir.join("summary.json");
    if !path.exists() {
        return Err(ExperimentError::MissingSummary(dir.to_path_buf()));
    }
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

pub const COMPARE_CSV_HEADER: &str =
    "run,method,rounds_to_target,round_client_mib,total_gib,delta_cost_gib,speedup";

/// Tabulate completed runs against the first one: rounds to target,
/// per-client round cost, total cost, cost delta and speedup.
pub fn compare(dirs: &[PathBuf]) -> Result<String, ExperimentError> {
    if dirs.len() < 2 {
        return Err(ExperimentError::Config(
            "compare needs at least two run directories".into(),
        ));
    }
    let summaries: Vec<(String, Summary)> = dirs
        .iter()
        .map(|d| {
            read_summary(d).map(|s| (d.display().to_string(), s))
        })
        .collect::<Result<_, _>>()?;
    let baseline_total = summaries[0].1.total_bytes_up as f64;
    let mut out = String::from(COMPARE_CSV_HEADER);
    out.push('\n');
    for (run, s) in &summaries {
        let rtt = s
            .rounds_to_target
            .map_or_else(|| "-".to_string(), |r| r.to_string());
        let total = s.total_bytes_up as f64;
        let speedup = if total > 0.0 { baseline_total / total } else { f64::INFINITY };
        out.push_str(&format!(
            "{},{},{},{:.4},{:.4},{:+.4},{:.2}\n",
            run,
            s.method,
            rtt,
            s.mean_round_client_bytes / MIB,
            total / GIB,
            (total - baseline_total) / GIB,
            speedup
        ));
    }
    Ok(out)
}
