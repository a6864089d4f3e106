use crate::error::{Error, Result};
use crate::optim::{adamw_step, outer_step, AdamWConfig, AdamWState, NesterovConfig, NesterovState};
use crate::param::{gather, scatter_into, FragmentationSpec, FragmentView, ParamVector};
use crate::scheduler::ImpactTracker;
use crate::tasks::{SyntheticTask, WorkerShard};

use super::sync::{blend, compensate};
use super::Completion;

/// Local fragment state captured when a sync is launched.
#[derive(Debug, Clone, PartialEq)]
pub struct CompensationSnapshot {
    pub fragment: usize,
    pub initiated_step: u64,
    pub params_at_initiation: ParamVector,
}

/// One fragment of the global consensus model, as replicated on a worker.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalShardState {
    pub params: ParamVector,
    /// Step at which the last completed sync of this fragment was initiated.
    pub last_global_sync_step: u64,
    pub outer: NesterovState,
}

/// A simulated worker. Besides its own parameters it carries a full replica
/// of the global fragments and the impact tracker, both of which every
/// worker updates identically from the all-reduced pseudo-gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkerState {
    pub worker_id: usize,
    pub params: ParamVector,
    pub inner: AdamWState,
    pub local_step: u64,
    /// At most one snapshot per fragment.
    pub snapshots: Vec<Option<CompensationSnapshot>>,
    pub global: Vec<GlobalShardState>,
    pub tracker: ImpactTracker,
}

impl WorkerState {
    pub fn new(
        worker_id: usize,
        init: &ParamVector,
        spec: &FragmentationSpec,
        adamw: &AdamWConfig,
        outer: &NesterovConfig,
    ) -> Result<Self> {
        let global = spec
            .fragments()
            .iter()
            .map(|f| {
                Ok(GlobalShardState {
                    params: gather(init, f)?,
                    last_global_sync_step: 0,
                    outer: NesterovState::new(f.len(), outer),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(WorkerState {
            worker_id,
            params: init.clone(),
            inner: AdamWState::new(init.len(), adamw),
            local_step: 0,
            snapshots: vec![None; spec.num_fragments()],
            global,
            tracker: ImpactTracker::new(spec.num_fragments()),
        })
    }

    /// One minibatch gradient and AdamW update at learning rate `lr`.
    /// Returns the minibatch loss.
    pub fn local_step(
        &mut self,
        task: &SyntheticTask,
        shard: &WorkerShard,
        batch_seed: u64,
        lr: f64,
    ) -> Result<f64> {
        let (loss, grad) = task.minibatch_grad(shard, &self.params, batch_seed);
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                step: self.local_step,
                what: format!("loss on worker {}", self.worker_id),
            });
        }
        self.inner.lr = lr;
        adamw_step(&mut self.params, &grad, &mut self.inner, self.local_step)?;
        if !self.params.is_finite() {
            return Err(Error::NonFinite {
                step: self.local_step,
                what: format!("parameters on worker {}", self.worker_id),
            });
        }
        self.local_step += 1;
        Ok(loss)
    }

    /// Pseudo-gradient of fragment `f` against this worker's global replica.
    /// With `snapshot` the current fragment is saved for compensation.
    pub fn initiate_sync(&mut self, f: &FragmentView, snapshot: bool) -> Result<ParamVector> {
        let p = f.index;
        let local = gather(&self.params, f)?;
        let delta = local.sub(&self.global[p].params);
        if snapshot {
            if self.snapshots[p].is_some() {
                return Err(Error::internal(format!(
                    "worker {}: fragment {p} already has an outstanding snapshot",
                    self.worker_id
                )));
            }
            self.snapshots[p] = Some(CompensationSnapshot {
                fragment: p,
                initiated_step: self.local_step,
                params_at_initiation: local,
            });
        }
        Ok(delta)
    }

    /// Applies the aggregated pseudo-gradient of a sync launched at
    /// `initiated` to the global replica, then folds the new global fragment
    /// into the local parameters.
    pub fn complete_sync(
        &mut self,
        f: &FragmentView,
        aggregated: &ParamVector,
        initiated: u64,
        tau: u64,
        local_steps: u64,
        completion: Completion,
    ) -> Result<()> {
        let p = f.index;
        let shard = &mut self.global[p];
        outer_step(&mut shard.params, aggregated, &mut shard.outer)?;
        shard.last_global_sync_step = initiated;
        self.tracker.update(p, aggregated.l2_norm(), initiated)?;

        let local = gather(&self.params, f)?;
        let updated = match completion {
            Completion::Blend { alpha } => blend(&local, &self.global[p].params, alpha),
            Completion::Compensate {
                lambda,
                literal_sign,
            } => {
                let snap = self.snapshots[p].take().ok_or_else(|| {
                    Error::internal(format!(
                        "worker {}: no snapshot for fragment {p}",
                        self.worker_id
                    ))
                })?;
                if snap.initiated_step != initiated {
                    return Err(Error::internal(format!(
                        "worker {}: snapshot for fragment {p} taken at {} but sync began at {initiated}",
                        self.worker_id, snap.initiated_step
                    )));
                }
                compensate(
                    &local,
                    &snap.params_at_initiation,
                    &self.global[p].params,
                    lambda,
                    local_steps,
                    tau,
                    literal_sign,
                )?
            }
        };
        scatter_into(&mut self.params, f, &updated)
    }

    /// Global replica assembled into a full parameter vector.
    pub fn global_params(&self, spec: &FragmentationSpec) -> Result<ParamVector> {
        let mut out = ParamVector::zeros(spec.num_params());
        for (f, shard) in spec.fragments().iter().zip(&self.global) {
            scatter_into(&mut out, f, &shard.params)?;
        }
        Ok(out)
    }
}
