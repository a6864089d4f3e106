use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netsim::{overlap_depth, LinkModel, NetworkTimings, TimingKind, TimingModel};
use crate::optim::{AdamWConfig, LrSchedule, NesterovConfig};
use crate::param::{partition, FragmentationSpec, ParamVector};
use crate::scheduler::{plan, select_fragment_excluding, SchedulePlan, SchedulerConfig};
use crate::tasks::{derive_seed, EvalReport, SyntheticTask};

use super::sync::{aggregate, InFlightSync};
use super::worker::WorkerState;
use super::{Completion, EffectiveProtocol, ProtocolConfig, Selection};

/// Timing and link parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    /// `T_c`, seconds per local step.
    pub compute_seconds: f64,
    /// Constant per-fragment sync time; `None` uses the ring model.
    pub sync_seconds: Option<f64>,
    pub latency: f64,
    pub bandwidth: f64,
    pub bytes_per_element: u64,
    /// Fixed overlap depth; `None` derives it from each sync's duration.
    pub tau: Option<u64>,
    pub jitter_sigma: f64,
    /// Track `T_c`/`T_s` with moving averages instead of the constants.
    pub ema_timings: bool,
    pub ema_decay: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            compute_seconds: 1.0,
            sync_seconds: Some(5.0),
            latency: 0.05,
            bandwidth: 1e6,
            bytes_per_element: 4,
            tau: None,
            jitter_sigma: 0.0,
            ema_timings: false,
            ema_decay: 0.1,
        }
    }
}

/// Which parameters the validation metric is computed on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalModel {
    /// Elementwise mean of all workers' local parameters.
    WorkerMean,
    /// The global replica of the first worker.
    Global,
    /// The first worker's local parameters.
    FirstWorker,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub protocol: ProtocolConfig,
    pub workers: usize,
    pub total_steps: u64,
    pub eval_every: u64,
    pub adamw: AdamWConfig,
    pub warmup_steps: u64,
    pub min_lr_ratio: f64,
    pub outer: NesterovConfig,
    pub network: NetworkConfig,
    pub eval_model: EvalModel,
    /// Every worker trains on shard 0 with identical minibatches.
    pub symmetric_workers: bool,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            protocol: ProtocolConfig::default(),
            workers: 4,
            total_steps: 1000,
            eval_every: 50,
            adamw: AdamWConfig::default(),
            warmup_steps: 0,
            min_lr_ratio: 0.1,
            outer: NesterovConfig::default(),
            network: NetworkConfig::default(),
            eval_model: EvalModel::WorkerMean,
            symmetric_workers: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CurvePoint {
    pub step: u64,
    pub virtual_seconds: f64,
    pub val_loss: f64,
    pub val_ppl: f64,
}

/// One sync, from initiation to completion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SyncEvent {
    pub fragment: usize,
    pub initiated_step: u64,
    pub completed_step: u64,
    pub bytes: u64,
}

/// Fragment choices of every worker at one adaptive selection.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Decision {
    pub step: u64,
    pub per_worker: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub curve: Vec<CurvePoint>,
    pub syncs: Vec<SyncEvent>,
    pub decisions: Vec<Decision>,
    pub plans: Vec<(u64, SchedulePlan)>,
    pub virtual_seconds: f64,
    pub steps_completed: u64,
    pub num_fragments: usize,
    pub fragment_bytes: Vec<u64>,
    /// Set when the run aborted, e.g. on a non-finite loss.
    pub failure: Option<String>,
}

#[derive(Debug, Clone, Copy)]
struct Request {
    /// Fixed for round-robin; chosen at transmission start otherwise.
    fragment: Option<usize>,
}

/// Deterministic lockstep simulation of `M` workers.
pub struct Simulation<'a> {
    cfg: SimConfig,
    proto: EffectiveProtocol,
    task: &'a SyntheticTask,
    spec: FragmentationSpec,
    workers: Vec<WorkerState>,
    schedule: LrSchedule,
    timing: TimingModel,
    timings: NetworkTimings,
    step: u64,
    clock: f64,
    /// Upcoming initiation slots of the current window.
    slots: VecDeque<(u64, Request)>,
    queue: VecDeque<Request>,
    in_flight: Option<InFlightSync>,
    curve: Vec<CurvePoint>,
    syncs: Vec<SyncEvent>,
    decisions: Vec<Decision>,
    plans: Vec<(u64, SchedulePlan)>,
}

impl<'a> Simulation<'a> {
    pub fn new(cfg: SimConfig, task: &'a SyntheticTask) -> Result<Self> {
        cfg.protocol.validate()?;
        cfg.adamw.validate()?;
        cfg.outer.validate()?;
        if cfg.eval_every == 0 {
            return Err(Error::config("eval_every", "must be positive"));
        }
        if task.shards().len() != cfg.workers {
            return Err(Error::internal(format!(
                "task has {} shards for {} workers",
                task.shards().len(),
                cfg.workers
            )));
        }
        if cfg.network.tau == Some(0) {
            return Err(Error::config("tau", "must be at least 1; use `blocking` for no overlap"));
        }
        if !(0.0..=1.0).contains(&cfg.min_lr_ratio) {
            return Err(Error::config("min_lr_ratio", "must lie in [0, 1]"));
        }

        let proto = cfg.protocol.effective();
        let spec = partition(task.layer_sizes(), proto.fragments, cfg.network.bytes_per_element)?;
        let init = task.initial_params();
        let workers = (0..cfg.workers)
            .map(|m| WorkerState::new(m, &init, &spec, &cfg.adamw, &cfg.outer))
            .collect::<Result<Vec<_>>>()?;

        let net = &cfg.network;
        let link = LinkModel::new(net.latency, net.bandwidth, cfg.workers)?;
        let timing = TimingModel::new(
            net.compute_seconds,
            link,
            net.sync_seconds,
            net.jitter_sigma,
            derive_seed(&[cfg.seed, 0x7177]),
        )?;
        let mean_fragment_bytes = spec.total_bytes() / spec.num_fragments() as u64;
        let timings = NetworkTimings::benchmarked(
            net.compute_seconds,
            timing.nominal_sync(mean_fragment_bytes),
            net.ema_decay,
        )?;

        let schedule = LrSchedule {
            peak_lr: cfg.adamw.lr,
            warmup_steps: cfg.warmup_steps,
            total_steps: cfg.total_steps,
            min_lr_ratio: cfg.min_lr_ratio,
        };

        Ok(Simulation {
            proto,
            task,
            spec,
            workers,
            schedule,
            timing,
            timings,
            step: 0,
            clock: 0.0,
            slots: VecDeque::new(),
            queue: VecDeque::new(),
            in_flight: None,
            curve: Vec::new(),
            syncs: Vec::new(),
            decisions: Vec::new(),
            plans: Vec::new(),
            cfg,
        })
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn workers(&self) -> &[WorkerState] {
        &self.workers
    }

    pub fn spec(&self) -> &FragmentationSpec {
        &self.spec
    }

    pub fn protocol(&self) -> &EffectiveProtocol {
        &self.proto
    }

    pub fn in_flight(&self) -> Option<&InFlightSync> {
        self.in_flight.as_ref()
    }

    pub fn syncs(&self) -> &[SyncEvent] {
        &self.syncs
    }

    pub fn decisions(&self) -> &[Decision] {
        &self.decisions
    }

    pub fn virtual_seconds(&self) -> f64 {
        self.clock
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.cfg.total_steps
    }

    /// Runs to `total_steps`, recording failures instead of returning them.
    pub fn run(mut self) -> Outcome {
        let failure = loop {
            match self.tick() {
                Ok(true) => continue,
                Ok(false) => break None,
                Err(e) => break Some(e.to_string()),
            }
        };
        self.into_outcome(failure)
    }

    pub fn into_outcome(self, failure: Option<String>) -> Outcome {
        Outcome {
            curve: self.curve,
            syncs: self.syncs,
            decisions: self.decisions,
            plans: self.plans,
            virtual_seconds: self.clock,
            steps_completed: self.step,
            num_fragments: self.spec.num_fragments(),
            fragment_bytes: self.spec.fragments().iter().map(|f| f.byte_size).collect(),
            failure,
        }
    }

    /// Processes syncs due at the current step, evaluates if scheduled, and
    /// advances every worker by one local step. Returns `false` once the
    /// final step has been processed.
    pub fn tick(&mut self) -> Result<bool> {
        let t = self.step;
        self.process_syncs(t)?;
        if t % self.cfg.eval_every == 0 || t == self.cfg.total_steps {
            self.evaluate()?;
        }
        if t >= self.cfg.total_steps {
            return Ok(false);
        }

        let lr = self.schedule.lr_at(t);
        let task = self.task;
        for w in &mut self.workers {
            let (shard, stream) = if self.cfg.symmetric_workers {
                (task.shard(0), 0)
            } else {
                (task.shard(w.worker_id), w.worker_id as u64)
            };
            let seed = derive_seed(&[self.cfg.seed, stream, t]);
            w.local_step(task, shard, seed, lr)?;
        }
        let compute = self.timing.sample_compute();
        if self.cfg.network.ema_timings {
            self.timings.observe(TimingKind::Compute, compute);
        }
        self.clock += compute;
        self.step += 1;
        Ok(true)
    }

    fn process_syncs(&mut self, t: u64) -> Result<()> {
        if t % self.proto.local_steps == 0 {
            self.plan_window(t)?;
        }
        if self.in_flight.as_ref().is_some_and(|s| s.completes_at_step == t) {
            let sync = self.in_flight.take().expect("checked above");
            self.finish(sync, t)?;
        }
        while self.slots.front().is_some_and(|&(s, _)| s == t) {
            let (_, req) = self.slots.pop_front().expect("checked above");
            self.queue.push_back(req);
        }
        while self.in_flight.is_none() {
            let Some(req) = self.queue.pop_front() else {
                break;
            };
            self.launch(req, t)?;
        }
        Ok(())
    }

    fn plan_window(&mut self, t: u64) -> Result<()> {
        let sched = SchedulerConfig::new(self.proto.gamma, self.proto.local_steps, self.proto.fragments)?;
        let window_plan = match self.proto.selection {
            Selection::RoundRobin => SchedulePlan::round_robin(&sched),
            Selection::Adaptive => plan(&sched, &self.timings)?,
        };
        self.plans.push((t, window_plan));
        let k = self.proto.fragments;
        for j in 1..=window_plan.syncs_per_window {
            let fragment = match self.proto.selection {
                Selection::RoundRobin => Some((j as usize - 1) % k),
                Selection::Adaptive => None,
            };
            self.slots
                .push_back((t + j * window_plan.interval, Request { fragment }));
        }
        Ok(())
    }

    fn choose_fragment(&mut self, t: u64) -> Result<usize> {
        let busy = self.in_flight.as_ref().map(|s| s.fragment);
        let per_worker = self
            .workers
            .iter()
            .map(|w| {
                select_fragment_excluding(&w.tracker, t, self.proto.local_steps, |p| Some(p) == busy)
                    .ok_or_else(|| Error::internal("no fragment eligible for selection"))
            })
            .collect::<Result<Vec<_>>>()?;
        let chosen = per_worker[0];
        if per_worker.iter().any(|&p| p != chosen) {
            return Err(Error::internal(format!(
                "workers disagree on fragment selection at step {t}: {per_worker:?}"
            )));
        }
        self.decisions.push(Decision { step: t, per_worker });
        Ok(chosen)
    }

    fn launch(&mut self, req: Request, t: u64) -> Result<()> {
        let p = match req.fragment {
            Some(p) => p,
            None => self.choose_fragment(t)?,
        };
        let f = self.spec.fragment(p);
        let snapshot = matches!(self.proto.completion, Completion::Compensate { .. });
        let contributions = self
            .workers
            .iter_mut()
            .map(|w| w.initiate_sync(f, snapshot))
            .collect::<Result<Vec<_>>>()?;

        let nominal = if self.proto.method == super::Method::Diloco {
            self.timing
                .nominal_full_sync(self.spec.total_bytes(), self.cfg.protocol.fragments)
        } else {
            self.timing.nominal_sync(f.byte_size)
        };
        let seconds = self.timing.sample_sync(nominal);
        let bytes = self.cfg.workers as u64 * f.byte_size;

        if self.proto.blocking {
            // no local steps run while a blocking sync is on the wire
            let stall = overlap_depth(&self.timings, seconds)?;
            let tc = self.timings.compute.expect("benchmarked at construction");
            self.clock += stall as f64 * tc;
            let sync = InFlightSync {
                fragment: p,
                initiated_step: t,
                completes_at_step: t,
                contributions,
                bytes,
                seconds,
            };
            return self.finish(sync, t);
        }

        let tau = match self.cfg.network.tau {
            Some(tau) => tau,
            None => overlap_depth(&self.timings, seconds)?,
        };
        self.in_flight = Some(InFlightSync {
            fragment: p,
            initiated_step: t,
            completes_at_step: t + tau,
            contributions,
            bytes,
            seconds,
        });
        Ok(())
    }

    fn finish(&mut self, sync: InFlightSync, t: u64) -> Result<()> {
        let f = self.spec.fragment(sync.fragment);
        let aggregated = aggregate(&sync.contributions, self.cfg.workers)?;
        let tau = sync.overlap();
        for w in &mut self.workers {
            w.complete_sync(
                f,
                &aggregated,
                sync.initiated_step,
                tau,
                self.proto.local_steps,
                self.proto.completion,
            )?;
        }
        if self.cfg.network.ema_timings {
            self.timings.observe(TimingKind::Sync, sync.seconds);
        }
        self.syncs.push(SyncEvent {
            fragment: sync.fragment,
            initiated_step: sync.initiated_step,
            completed_step: t,
            bytes: sync.bytes,
        });
        Ok(())
    }

    /// Parameters the validation metric is computed on.
    pub fn eval_params(&self) -> Result<ParamVector> {
        match self.cfg.eval_model {
            EvalModel::FirstWorker => Ok(self.workers[0].params.clone()),
            EvalModel::Global => self.workers[0].global_params(&self.spec),
            EvalModel::WorkerMean => {
                let mut sum = self.workers[0].params.clone();
                for w in &self.workers[1..] {
                    sum.axpy(1.0, &w.params);
                }
                let m = self.workers.len() as f64;
                Ok(ParamVector::new(sum.iter().map(|v| v / m).collect()))
            }
        }
    }

    fn evaluate(&mut self) -> Result<()> {
        let params = self.eval_params()?;
        let EvalReport {
            step,
            val_loss,
            val_ppl,
        } = self.task.evaluate(&params, self.step);
        if !val_loss.is_finite() {
            return Err(Error::NonFinite {
                step,
                what: "validation loss".into(),
            });
        }
        self.curve.push(CurvePoint {
            step,
            virtual_seconds: self.clock,
            val_loss,
            val_ppl,
        });
        Ok(())
    }
}
