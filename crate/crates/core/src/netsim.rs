//! WAN timing model: ring all-reduce cost, conversion of sync durations into
//! overlap depth, and moving-average estimates of per-step compute time
//! (`T_c`) and per-fragment sync time (`T_s`).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LinkModel {
    /// Seconds per hop.
    pub latency: f64,
    /// Bytes per second.
    pub bandwidth: f64,
    pub num_workers: usize,
}

impl LinkModel {
    pub fn new(latency: f64, bandwidth: f64, num_workers: usize) -> Result<Self> {
        if !(latency >= 0.0 && latency.is_finite()) {
            return Err(Error::config("latency", "must be non-negative and finite"));
        }
        if !(bandwidth > 0.0) {
            return Err(Error::config("bandwidth", "must be positive"));
        }
        if num_workers < 2 {
            return Err(Error::config("workers", "a ring needs at least two workers"));
        }
        Ok(LinkModel {
            latency,
            bandwidth,
            num_workers,
        })
    }
}

/// Ring all-reduce time for a payload of `bytes`: a reduce-scatter and an
/// all-gather, each `M - 1` hops moving `bytes / M` per hop.
pub fn allreduce_time(link: &LinkModel, bytes: f64) -> f64 {
    let m = link.num_workers as f64;
    let hops = 2.0 * (m - 1.0);
    hops * (bytes / (m * link.bandwidth)) + hops * link.latency
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimingKind {
    Compute,
    Sync,
}

/// Running estimates of `T_c` and `T_s`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NetworkTimings {
    pub compute: Option<f64>,
    pub sync: Option<f64>,
    /// Weight of the newest observation.
    pub ema_decay: f64,
}

impl NetworkTimings {
    pub fn new(ema_decay: f64) -> Result<Self> {
        if !(ema_decay > 0.0 && ema_decay <= 1.0) {
            return Err(Error::config("ema_decay", "must lie in (0, 1]"));
        }
        Ok(NetworkTimings {
            compute: None,
            sync: None,
            ema_decay,
        })
    }

    /// Estimates seeded from a benchmark instead of live observations.
    pub fn benchmarked(compute: f64, sync: f64, ema_decay: f64) -> Result<Self> {
        let mut t = NetworkTimings::new(ema_decay)?;
        t.compute = Some(compute);
        t.sync = Some(sync);
        Ok(t)
    }

    pub fn observe(&mut self, kind: TimingKind, seconds: f64) {
        debug_assert!(seconds > 0.0);
        let slot = match kind {
            TimingKind::Compute => &mut self.compute,
            TimingKind::Sync => &mut self.sync,
        };
        *slot = Some(match *slot {
            None => seconds,
            Some(prev) => self.ema_decay * seconds + (1.0 - self.ema_decay) * prev,
        });
    }
}

/// Number of local steps that elapse while a sync of `sync_seconds` runs.
/// Never less than one.
pub fn overlap_depth(timings: &NetworkTimings, sync_seconds: f64) -> Result<u64> {
    let tc = timings
        .compute
        .filter(|t| *t > 0.0)
        .ok_or_else(|| Error::internal("overlap depth requested before T_c was observed"))?;
    let steps = (sync_seconds / tc).ceil();
    Ok(if steps.is_finite() && steps >= 1.0 {
        steps as u64
    } else {
        1
    })
}

/// Produces per-step compute durations and per-sync durations, optionally
/// perturbed by seeded log-normal jitter.
#[derive(Debug, Clone)]
pub struct TimingModel {
    pub compute_seconds: f64,
    pub link: LinkModel,
    /// Constant per-fragment sync time overriding the ring model.
    pub sync_override: Option<f64>,
    jitter: Option<(LogNormal<f64>, ChaCha8Rng)>,
}

impl TimingModel {
    pub fn new(
        compute_seconds: f64,
        link: LinkModel,
        sync_override: Option<f64>,
        jitter_sigma: f64,
        seed: u64,
    ) -> Result<Self> {
        if !(compute_seconds > 0.0 && compute_seconds.is_finite()) {
            return Err(Error::config("compute_seconds", "must be positive"));
        }
        if let Some(s) = sync_override {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::config("sync_seconds", "must be positive"));
            }
        }
        if !(jitter_sigma >= 0.0 && jitter_sigma.is_finite()) {
            return Err(Error::config("jitter_sigma", "must be non-negative"));
        }
        let jitter = if jitter_sigma > 0.0 {
            // median-one multiplicative noise
            let dist = LogNormal::new(0.0, jitter_sigma)
                .map_err(|e| Error::config("jitter_sigma", e.to_string()))?;
            Some((dist, ChaCha8Rng::seed_from_u64(seed)))
        } else {
            None
        };
        Ok(TimingModel {
            compute_seconds,
            link,
            sync_override,
            jitter,
        })
    }

    /// Nominal sync time of a `bytes` payload, without jitter.
    pub fn nominal_sync(&self, bytes: u64) -> f64 {
        self.sync_override
            .unwrap_or_else(|| allreduce_time(&self.link, bytes as f64))
    }

    /// Nominal time of a blocking whole-model sync spanning `fragments`
    /// fragment-sized payloads totalling `bytes`.
    pub fn nominal_full_sync(&self, bytes: u64, fragments: usize) -> f64 {
        match self.sync_override {
            Some(s) => s * fragments as f64,
            None => allreduce_time(&self.link, bytes as f64),
        }
    }

    fn perturb(&mut self, seconds: f64) -> f64 {
        match &mut self.jitter {
            Some((dist, rng)) => seconds * dist.sample(rng),
            None => seconds,
        }
    }

    pub fn sample_compute(&mut self) -> f64 {
        let c = self.compute_seconds;
        self.perturb(c)
    }

    pub fn sample_sync(&mut self, nominal: f64) -> f64 {
        self.perturb(nominal)
    }
}
