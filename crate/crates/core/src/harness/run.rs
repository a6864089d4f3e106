use rayon::prelude::*;
use serde::Serialize;

use crate::error::Result;
use crate::protocol::{CurvePoint, Method, Outcome, Simulation};
use crate::tasks::make_task;

use super::config::{ExperimentConfig, ThresholdMetric};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub final_loss: f64,
    pub final_ppl: f64,
    pub steps_to_threshold: Option<u64>,
    pub bytes_transmitted: u64,
    /// Completed syncs per fragment.
    pub sync_counts: Vec<u64>,
    pub virtual_seconds: f64,
    pub steps_completed: u64,
}

/// Result of one (method, seed) simulation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunRecord {
    pub method: Method,
    pub seed: u64,
    pub curve: Vec<CurvePoint>,
    pub summary: RunSummary,
    pub failed: bool,
    pub failure: Option<String>,
}

impl RunRecord {
    pub fn from_outcome(
        method: Method,
        seed: u64,
        outcome: Outcome,
        threshold: f64,
        metric: ThresholdMetric,
    ) -> Self {
        let mut sync_counts = vec![0u64; outcome.num_fragments];
        let mut bytes = 0;
        for s in &outcome.syncs {
            sync_counts[s.fragment] += 1;
            bytes += s.bytes;
        }
        let last = outcome.curve.last();
        let summary = RunSummary {
            final_loss: last.map_or(f64::NAN, |p| p.val_loss),
            final_ppl: last.map_or(f64::NAN, |p| p.val_ppl),
            steps_to_threshold: steps_to_threshold(&outcome.curve, threshold, metric),
            bytes_transmitted: bytes,
            sync_counts,
            virtual_seconds: outcome.virtual_seconds,
            steps_completed: outcome.steps_completed,
        };
        RunRecord {
            method,
            seed,
            curve: outcome.curve,
            summary,
            failed: outcome.failure.is_some(),
            failure: outcome.failure,
        }
    }
}

/// First evaluated step whose metric is at or below `threshold`.
pub fn steps_to_threshold(
    curve: &[CurvePoint],
    threshold: f64,
    metric: ThresholdMetric,
) -> Option<u64> {
    curve
        .iter()
        .find(|p| {
            let value = match metric {
                ThresholdMetric::Loss => p.val_loss,
                ThresholdMetric::Ppl => p.val_ppl,
            };
            value <= threshold
        })
        .map(|p| p.step)
}

/// Runs one simulation.
pub fn run_single(cfg: &ExperimentConfig, method: Method, seed: u64) -> Result<RunRecord> {
    let sim_cfg = cfg.sim_config(method, seed);
    let fragments = sim_cfg.protocol.effective().fragments;
    let task = make_task(&cfg.task_config(seed), cfg.workers, fragments)?;
    let outcome = Simulation::new(sim_cfg, &task)?.run();
    Ok(RunRecord::from_outcome(
        method,
        seed,
        outcome,
        cfg.threshold,
        cfg.threshold_metric,
    ))
}

/// One record per (method, seed), methods in config order then seeds in
/// config order. Simulations run in parallel.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<RunRecord>> {
    cfg.validate()?;
    let jobs: Vec<(Method, u64)> = cfg
        .methods
        .iter()
        .flat_map(|&m| cfg.seeds.iter().map(move |&s| (m, s)))
        .collect();
    jobs.par_iter()
        .map(|&(method, seed)| run_single(cfg, method, seed))
        .collect()
}

/// Median with `None` ordered above every value; `None` if the median
/// itself falls on an unreached run.
pub fn median_steps(values: &[Option<u64>]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v: Vec<Option<u64>> = values.to_vec();
    v.sort_by_key(|x| x.unwrap_or(u64::MAX));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2].map(|x| x as f64)
    } else {
        match (v[n / 2 - 1], v[n / 2]) {
            (Some(a), Some(b)) => Some((a as f64 + b as f64) / 2.0),
            _ => None,
        }
    }
}

pub fn median(values: &[f64]) -> Option<f64> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| !x.is_nan()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodSummary {
    pub method: Method,
    pub runs: usize,
    pub failed: usize,
    pub reached_threshold: usize,
    pub median_steps_to_threshold: Option<f64>,
    pub median_final_loss: Option<f64>,
    pub median_final_ppl: Option<f64>,
    pub median_virtual_seconds: Option<f64>,
    pub median_bytes_transmitted: Option<f64>,
    /// Per-fragment completed syncs summed over seeds.
    pub total_sync_counts: Vec<u64>,
}

pub fn summarize(records: &[RunRecord], method: Method) -> MethodSummary {
    let runs: Vec<&RunRecord> = records.iter().filter(|r| r.method == method).collect();
    let fragments = runs.iter().map(|r| r.summary.sync_counts.len()).max().unwrap_or(0);
    let mut total_sync_counts = vec![0; fragments];
    for r in &runs {
        for (t, c) in total_sync_counts.iter_mut().zip(&r.summary.sync_counts) {
            *t += c;
        }
    }
    let steps: Vec<Option<u64>> = runs.iter().map(|r| r.summary.steps_to_threshold).collect();
    let collect = |f: fn(&RunSummary) -> f64| -> Vec<f64> { runs.iter().map(|r| f(&r.summary)).collect() };
    MethodSummary {
        method,
        runs: runs.len(),
        failed: runs.iter().filter(|r| r.failed).count(),
        reached_threshold: steps.iter().filter(|s| s.is_some()).count(),
        median_steps_to_threshold: median_steps(&steps),
        median_final_loss: median(&collect(|s| s.final_loss)),
        median_final_ppl: median(&collect(|s| s.final_ppl)),
        median_virtual_seconds: median(&collect(|s| s.virtual_seconds)),
        median_bytes_transmitted: median(&collect(|s| s.bytes_transmitted as f64)),
        total_sync_counts,
    }
}
