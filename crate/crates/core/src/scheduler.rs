//! Adaptive fragment transmission: how many syncs fit in an `H`-step window,
//! how strongly each fragment is changing, and which fragment goes next.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::netsim::NetworkTimings;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SchedulerConfig {
    /// Network utilization factor in (0, 1].
    pub gamma: f64,
    /// Local steps per outer window.
    pub local_steps: u64,
    pub fragments: usize,
}

impl SchedulerConfig {
    pub fn new(gamma: f64, local_steps: u64, fragments: usize) -> Result<Self> {
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(Error::config("gamma", "must lie in (0, 1]"));
        }
        if local_steps == 0 {
            return Err(Error::config("local_steps", "must be positive"));
        }
        if fragments == 0 {
            return Err(Error::config("fragments", "must be positive"));
        }
        if fragments as u64 > local_steps {
            return Err(Error::config(
                "fragments",
                "cannot schedule more fragments than local steps per window",
            ));
        }
        Ok(SchedulerConfig {
            gamma,
            local_steps,
            fragments,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SchedulePlan {
    /// Sync initiations per window.
    pub syncs_per_window: u64,
    /// Steps between consecutive initiations.
    pub interval: u64,
}

impl SchedulePlan {
    /// The fixed cadence: every fragment exactly once per window.
    pub fn round_robin(cfg: &SchedulerConfig) -> Self {
        let n = cfg.fragments as u64;
        SchedulePlan {
            syncs_per_window: n,
            interval: cfg.local_steps / n,
        }
    }
}

/// Number of syncs that fit in a window of `H` compute steps, never fewer
/// than one per fragment and never more than one per step.
pub fn plan(cfg: &SchedulerConfig, timings: &NetworkTimings) -> Result<SchedulePlan> {
    let (tc, ts) = match (timings.compute, timings.sync) {
        (Some(c), Some(s)) if c > 0.0 && s > 0.0 => (c, s),
        _ => {
            return Err(Error::internal(
                "plan requires positive T_c and T_s estimates",
            ))
        }
    };
    let capacity = cfg.gamma * (cfg.local_steps as f64 * tc) / ts;
    // absorb rounding noise such as 7.999999999999999
    let capacity = (capacity * (1.0 + 1e-12)).floor();
    let k = cfg.fragments as u64;
    let n = if capacity.is_finite() && capacity > k as f64 {
        (capacity as u64).min(cfg.local_steps)
    } else {
        k
    };
    Ok(SchedulePlan {
        syncs_per_window: n,
        interval: cfg.local_steps / n,
    })
}

/// Per-fragment change-rate metric and the step of its last completed sync.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImpactTracker {
    /// `+inf` until the fragment completes its first sync.
    rates: Vec<f64>,
    last_sync: Vec<u64>,
}

impl ImpactTracker {
    pub fn new(fragments: usize) -> Self {
        ImpactTracker {
            rates: vec![f64::INFINITY; fragments],
            last_sync: vec![0; fragments],
        }
    }

    pub fn num_fragments(&self) -> usize {
        self.rates.len()
    }

    pub fn rate(&self, p: usize) -> f64 {
        self.rates[p]
    }

    pub fn rates(&self) -> &[f64] {
        &self.rates
    }

    pub fn last_sync(&self, p: usize) -> u64 {
        self.last_sync[p]
    }

    /// Sets the raw state; for tests and replay.
    pub fn from_parts(rates: Vec<f64>, last_sync: Vec<u64>) -> Self {
        assert_eq!(rates.len(), last_sync.len());
        ImpactTracker { rates, last_sync }
    }

    /// Records a completed sync of fragment `p` initiated at `initiated`.
    /// `update_norm` is the L2 norm of the aggregated pseudo-gradient.
    pub fn update(&mut self, p: usize, update_norm: f64, initiated: u64) -> Result<()> {
        let interval = initiated
            .checked_sub(self.last_sync[p])
            .filter(|&i| i > 0)
            .ok_or_else(|| {
                Error::internal(format!(
                    "fragment {p}: sync initiated at {initiated} does not follow previous at {}",
                    self.last_sync[p]
                ))
            })?;
        self.rates[p] = update_norm / interval as f64;
        self.last_sync[p] = initiated;
        Ok(())
    }
}

/// Picks the next fragment to sync at step `now`.
///
/// A fragment that has gone `window` steps without a sync is served first
/// (lowest index among several); otherwise the fragment with the largest
/// rate wins, ties going to the lowest index.
pub fn select_fragment(tracker: &ImpactTracker, now: u64, window: u64) -> usize {
    select_fragment_excluding(tracker, now, window, |_| false)
        .expect("at least one fragment is always eligible")
}

/// Like [`select_fragment`] but skips fragments for which `busy` holds,
/// e.g. ones with a sync already in flight. `None` when all are busy.
pub fn select_fragment_excluding(
    tracker: &ImpactTracker,
    now: u64,
    window: u64,
    busy: impl Fn(usize) -> bool,
) -> Option<usize> {
    let eligible = || (0..tracker.num_fragments()).filter(|&p| !busy(p));
    if let Some(p) = eligible().find(|&p| now.saturating_sub(tracker.last_sync[p]) >= window) {
        return Some(p);
    }
    eligible().fold(None, |best: Option<usize>, p| match best {
        Some(b) if tracker.rates[p] <= tracker.rates[b] => Some(b),
        _ => Some(p),
    })
}
