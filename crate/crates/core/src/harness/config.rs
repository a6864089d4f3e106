//! Flat TOML experiment configuration.
//!
//! Every key is top level except the optional `[sweep]` table, which lists
//! values to take the cartesian product over. Individual keys can be
//! overridden from the command line with `key=value`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{AdamWConfig, NesterovConfig};
use crate::protocol::{EvalModel, Method, NetworkConfig, ProtocolConfig, Selection, SimConfig};
use crate::tasks::{derive_seed, TaskConfig, TaskKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMetric {
    Loss,
    Ppl,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    pub output: String,

    // protocol
    pub workers: usize,
    pub local_steps: u64,
    pub fragments: usize,
    pub tau: Option<u64>,
    pub blocking: bool,
    pub gamma: f64,
    pub lambda: f64,
    pub alpha: f64,
    pub literal_sign: bool,
    pub compensation: bool,
    pub selection: Selection,

    // task
    pub task: TaskKind,
    pub dimension: usize,
    pub classes: usize,
    pub hidden: usize,
    pub num_layers: usize,
    pub samples_per_worker: usize,
    pub validation_samples: usize,
    pub batch_size: usize,
    pub dirichlet_alpha: Option<f64>,
    pub feature_shift: f64,
    pub class_separation: f64,
    pub noise_std: f64,
    pub task_seed: u64,
    pub symmetric_workers: bool,

    // inner optimizer
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: u64,
    pub min_lr_ratio: f64,

    // outer optimizer
    pub outer_lr: f64,
    pub outer_momentum: f64,

    // network
    pub compute_seconds: f64,
    pub sync_seconds: Option<f64>,
    pub latency: f64,
    pub bandwidth: f64,
    pub bytes_per_element: u64,
    pub jitter_sigma: f64,
    pub ema_timings: bool,
    pub ema_decay: f64,

    // evaluation
    pub total_steps: u64,
    pub eval_every: u64,
    pub eval_model: EvalModel,
    pub threshold: f64,
    pub threshold_metric: ThresholdMetric,

    /// Key → list of values; each combination is a separate experiment.
    pub sweep: BTreeMap<String, Vec<toml::Value>>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let protocol = ProtocolConfig::default();
        let task = TaskConfig::default();
        let adamw = AdamWConfig::default();
        let outer = NesterovConfig::default();
        let net = NetworkConfig::default();
        ExperimentConfig {
            name: "experiment".into(),
            methods: vec![Method::Cocodc],
            seeds: vec![0],
            output: "out".into(),
            workers: 4,
            local_steps: protocol.local_steps,
            fragments: protocol.fragments,
            tau: net.tau,
            blocking: protocol.blocking,
            gamma: protocol.gamma,
            lambda: protocol.lambda,
            alpha: protocol.alpha,
            literal_sign: protocol.literal_sign,
            compensation: protocol.compensation,
            selection: protocol.selection,
            task: task.kind,
            dimension: task.dimension,
            classes: task.classes,
            hidden: task.hidden,
            num_layers: task.num_layers,
            samples_per_worker: task.samples_per_worker,
            validation_samples: task.validation_samples,
            batch_size: task.batch_size,
            dirichlet_alpha: task.dirichlet_alpha,
            feature_shift: task.feature_shift,
            class_separation: task.class_separation,
            noise_std: task.noise_std,
            task_seed: task.seed,
            symmetric_workers: false,
            lr: adamw.lr,
            beta1: adamw.beta1,
            beta2: adamw.beta2,
            eps: adamw.eps,
            weight_decay: adamw.weight_decay,
            warmup_steps: 0,
            min_lr_ratio: 0.1,
            outer_lr: outer.outer_lr,
            outer_momentum: outer.momentum,
            compute_seconds: net.compute_seconds,
            sync_seconds: net.sync_seconds,
            latency: net.latency,
            bandwidth: net.bandwidth,
            bytes_per_element: net.bytes_per_element,
            jitter_sigma: net.jitter_sigma,
            ema_timings: net.ema_timings,
            ema_decay: net.ema_decay,
            total_steps: 1000,
            eval_every: 50,
            eval_model: EvalModel::WorkerMean,
            threshold: 20.0,
            threshold_metric: ThresholdMetric::Ppl,
            sweep: BTreeMap::new(),
        }
    }
}

/// Parses `key=value`; the value is read as a TOML literal, falling back to
/// a bare string.
pub fn parse_override(raw: &str) -> Result<(String, toml::Value)> {
    let (key, value) = raw
        .split_once('=')
        .ok_or_else(|| Error::config(raw, "override must look like key=value"))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(Error::config(raw, "override has an empty key"));
    }
    let value = value.trim();
    let parsed = toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()));
    Ok((key.to_string(), parsed))
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str, overrides: &[(String, toml::Value)]) -> Result<Self> {
        let mut table: toml::Table =
            toml::from_str(text).map_err(|e| Error::config("<file>", e.message().to_string()))?;
        for (key, value) in overrides {
            table.insert(key.clone(), value.clone());
        }
        Self::from_table(table)
    }

    pub fn load(path: &Path, overrides: &[(String, toml::Value)]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, overrides)
    }

    pub fn from_table(table: toml::Table) -> Result<Self> {
        let cfg = match table.clone().try_into::<ExperimentConfig>() {
            Ok(cfg) => cfg,
            Err(err) => return Err(Self::blame(&table, err)),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Finds the first key that fails to deserialize on its own.
    fn blame(table: &toml::Table, err: toml::de::Error) -> Error {
        for (key, value) in table {
            let mut single = toml::Table::new();
            single.insert(key.clone(), value.clone());
            if let Err(e) = single.try_into::<ExperimentConfig>() {
                return Error::config(key.clone(), e.message().trim().to_string());
            }
        }
        Error::config("<config>", err.message().trim().to_string())
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serialize(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::config("methods", "at least one method required"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "at least one seed required"));
        }
        if self.total_steps == 0 {
            return Err(Error::config("total_steps", "must be positive"));
        }
        if !(self.threshold.is_finite()) {
            return Err(Error::config("threshold", "must be finite"));
        }
        if self.workers < 2 {
            return Err(Error::config("workers", "at least two workers required"));
        }
        if let Some(alpha) = self.dirichlet_alpha {
            if !(alpha > 0.0) {
                return Err(Error::config("dirichlet_alpha", "must be positive"));
            }
        }
        for (key, values) in &self.sweep {
            if key == "sweep" {
                return Err(Error::config("sweep", "cannot sweep over `sweep`"));
            }
            if values.is_empty() {
                return Err(Error::config(format!("sweep.{key}"), "needs at least one value"));
            }
        }
        // Each method preset is validated against the shared settings.
        for &method in &self.methods {
            self.protocol_config(method).validate()?;
            self.sim_config(method, self.seeds[0]).adamw.validate()?;
            NesterovConfig {
                outer_lr: self.outer_lr,
                momentum: self.outer_momentum,
            }
            .validate()?;
        }
        if self.tau == Some(0) {
            return Err(Error::config("tau", "must be at least 1"));
        }
        if self.eval_every == 0 {
            return Err(Error::config("eval_every", "must be positive"));
        }
        Ok(())
    }

    pub fn protocol_config(&self, method: Method) -> ProtocolConfig {
        ProtocolConfig {
            method,
            local_steps: self.local_steps,
            fragments: self.fragments,
            alpha: self.alpha,
            lambda: self.lambda,
            literal_sign: self.literal_sign,
            gamma: self.gamma,
            compensation: self.compensation,
            selection: self.selection,
            blocking: self.blocking,
        }
    }

    /// Task for run seed `seed`; every method sees the same data for a seed.
    pub fn task_config(&self, seed: u64) -> TaskConfig {
        TaskConfig {
            kind: self.task,
            dimension: self.dimension,
            classes: self.classes,
            hidden: self.hidden,
            num_layers: self.num_layers,
            samples_per_worker: self.samples_per_worker,
            validation_samples: self.validation_samples,
            batch_size: self.batch_size,
            dirichlet_alpha: self.dirichlet_alpha,
            feature_shift: self.feature_shift,
            class_separation: self.class_separation,
            noise_std: self.noise_std,
            seed: derive_seed(&[self.task_seed, seed]),
        }
    }

    pub fn sim_config(&self, method: Method, seed: u64) -> SimConfig {
        SimConfig {
            protocol: self.protocol_config(method),
            workers: self.workers,
            total_steps: self.total_steps,
            eval_every: self.eval_every,
            adamw: AdamWConfig {
                lr: self.lr,
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.eps,
                weight_decay: self.weight_decay,
            },
            warmup_steps: self.warmup_steps,
            min_lr_ratio: self.min_lr_ratio,
            outer: NesterovConfig {
                outer_lr: self.outer_lr,
                momentum: self.outer_momentum,
            },
            network: NetworkConfig {
                compute_seconds: self.compute_seconds,
                sync_seconds: self.sync_seconds,
                latency: self.latency,
                bandwidth: self.bandwidth,
                bytes_per_element: self.bytes_per_element,
                tau: self.tau,
                jitter_sigma: self.jitter_sigma,
                ema_timings: self.ema_timings,
                ema_decay: self.ema_decay,
            },
            eval_model: self.eval_model,
            symmetric_workers: self.symmetric_workers,
            seed: derive_seed(&[seed, 0x5EED]),
        }
    }

    /// Expands `[sweep]` into labelled concrete configs. Without a sweep the
    /// config itself is returned with an empty label.
    pub fn expand_sweep(&self) -> Result<Vec<(String, ExperimentConfig)>> {
        let mut base = toml::Table::try_from(self).map_err(|e| Error::Serialize(e.to_string()))?;
        base.remove("sweep");
        let mut combos: Vec<Vec<(String, toml::Value)>> = vec![Vec::new()];
        for (key, values) in &self.sweep {
            combos = combos
                .into_iter()
                .flat_map(|prefix| {
                    values.iter().map(move |v| {
                        let mut next = prefix.clone();
                        next.push((key.clone(), v.clone()));
                        next
                    })
                })
                .collect();
        }
        combos
            .into_iter()
            .map(|assignment| {
                let mut table = base.clone();
                let mut label = Vec::new();
                for (k, v) in assignment {
                    label.push(format!("{k}={}", display_value(&v)));
                    table.insert(k, v);
                }
                let cfg = ExperimentConfig::from_table(table)?;
                Ok((label.join(","), cfg))
            })
            .collect()
    }
}

fn display_value(v: &toml::Value) -> String {
    match v {
        toml::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}
