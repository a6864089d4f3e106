//! Synchronization protocols over a lockstep simulation.
//!
//! All three methods share one engine. DiLoCo is the single-fragment,
//! blocking, full-adoption special case; Streaming DiLoCo overlaps fragment
//! syncs with compute and blends the result; CoCoDC replaces blending with
//! delay compensation and picks fragments adaptively.

mod sim;
mod sync;
mod worker;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use sim::{CurvePoint, Decision, EvalModel, NetworkConfig, Outcome, SimConfig, Simulation, SyncEvent};
pub use sync::{aggregate, blend, compensate, InFlightSync};
pub use worker::{CompensationSnapshot, GlobalShardState, WorkerState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Diloco,
    StreamingDiloco,
    Cocodc,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Diloco, Method::StreamingDiloco, Method::Cocodc];

    pub fn name(self) -> &'static str {
        match self {
            Method::Diloco => "diloco",
            Method::StreamingDiloco => "streaming_diloco",
            Method::Cocodc => "cocodc",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::config("methods", format!("unknown method `{s}`")))
    }
}

/// How the next fragment is chosen at each initiation slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// Starvation guard, then largest impact metric.
    Adaptive,
    /// Every fragment once per window in index order.
    RoundRobin,
}

/// What a worker does with a freshly updated global fragment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Completion {
    /// `(1 - alpha) * local + alpha * global`
    Blend { alpha: f64 },
    /// Global state plus corrected local progress over the overlap.
    Compensate { lambda: f64, literal_sign: bool },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    pub method: Method,
    /// `H`: local steps per outer window.
    pub local_steps: u64,
    /// `K` for the fragment-wise methods; DiLoCo always uses one.
    pub fragments: usize,
    /// Mixing factor for blending.
    pub alpha: f64,
    /// Compensation strength.
    pub lambda: f64,
    /// Use the change rate exactly as first written, `(θ_tp - θ_tl) / τ`.
    pub literal_sign: bool,
    /// Network utilization factor for adaptive planning.
    pub gamma: f64,
    /// CoCoDC only: compensate (true) or fall back to blending with `alpha`.
    pub compensation: bool,
    /// CoCoDC only: fragment selection policy.
    pub selection: Selection,
    /// Fragment syncs complete in the step they start, with no overlap.
    pub blocking: bool,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            method: Method::Cocodc,
            local_steps: 100,
            fragments: 4,
            alpha: 0.5,
            lambda: 0.5,
            literal_sign: false,
            gamma: 0.4,
            compensation: true,
            selection: Selection::Adaptive,
            blocking: false,
        }
    }
}

/// A [`ProtocolConfig`] with the method presets applied.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EffectiveProtocol {
    pub method: Method,
    pub local_steps: u64,
    pub fragments: usize,
    pub blocking: bool,
    pub completion: Completion,
    pub selection: Selection,
    pub gamma: f64,
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<()> {
        if self.local_steps == 0 {
            return Err(Error::config("local_steps", "must be at least 1"));
        }
        if self.fragments == 0 {
            return Err(Error::config("fragments", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config("alpha", "must lie in [0, 1]"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config("lambda", "must be non-negative and finite"));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::config("gamma", "must lie in (0, 1]"));
        }
        let eff = self.effective();
        if eff.fragments as u64 > eff.local_steps {
            return Err(Error::config(
                "fragments",
                "more fragments than local steps per window",
            ));
        }
        if eff.blocking && matches!(eff.completion, Completion::Compensate { .. }) {
            return Err(Error::config(
                "blocking",
                "delay compensation needs a non-zero overlap; disable compensation for blocking syncs",
            ));
        }
        Ok(())
    }

    pub fn effective(&self) -> EffectiveProtocol {
        match self.method {
            Method::Diloco => EffectiveProtocol {
                method: self.method,
                local_steps: self.local_steps,
                fragments: 1,
                blocking: true,
                completion: Completion::Blend { alpha: 1.0 },
                selection: Selection::RoundRobin,
                gamma: self.gamma,
            },
            Method::StreamingDiloco => EffectiveProtocol {
                method: self.method,
                local_steps: self.local_steps,
                fragments: self.fragments,
                blocking: self.blocking,
                completion: Completion::Blend { alpha: self.alpha },
                selection: Selection::RoundRobin,
                gamma: self.gamma,
            },
            Method::Cocodc => EffectiveProtocol {
                method: self.method,
                local_steps: self.local_steps,
                fragments: self.fragments,
                blocking: self.blocking,
                completion: if self.compensation {
                    Completion::Compensate {
                        lambda: self.lambda,
                        literal_sign: self.literal_sign,
                    }
                } else {
                    Completion::Blend { alpha: self.alpha }
                },
                selection: self.selection,
                gamma: self.gamma,
            },
        }
    }
}
