//! Deterministic lockstep simulation of cross-region distributed training.
//!
//! Three synchronization protocols are modelled over `M` simulated workers:
//!
//! * **DiLoCo**: every `H` local steps the full model is averaged with a
//!   blocking all-reduce and fed to an outer Nesterov optimizer.
//! * **Streaming DiLoCo**: the model is split into `K` fragments which are
//!   synchronized one at a time, overlapped with `τ` steps of local compute,
//!   and blended back into the local model with a mixing factor `α`.
//! * **CoCoDC**: like Streaming DiLoCo, but the stale global fragment is
//!   corrected with a Taylor-expansion delay compensation, and fragments are
//!   picked adaptively by their recent rate of change.
//!
//! Workers are plain data advanced by a single-threaded loop, so every run is
//! bit-reproducible from its config and seed.

pub mod error;
pub mod harness;
pub mod netsim;
pub mod optim;
pub mod param;
pub mod protocol;
pub mod scheduler;
pub mod tasks;

pub use error::{Error, Result};
