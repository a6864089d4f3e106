#![allow(dead_code)]

use cocodc_sim::protocol::{Method, Selection, SimConfig, Simulation};
use cocodc_sim::tasks::{make_task, SyntheticTask, TaskConfig, TaskKind};

pub fn least_squares_task(workers: usize, fragments: usize) -> SyntheticTask {
    let cfg = TaskConfig {
        kind: TaskKind::LeastSquares,
        dimension: 16,
        num_layers: 8,
        samples_per_worker: 256,
        validation_samples: 128,
        batch_size: 16,
        noise_std: 0.1,
        seed: 11,
        ..TaskConfig::default()
    };
    make_task(&cfg, workers, fragments).unwrap()
}

pub fn logistic_task(workers: usize, fragments: usize, seed: u64) -> SyntheticTask {
    let cfg = TaskConfig {
        dimension: 16,
        classes: 4,
        num_layers: 8,
        samples_per_worker: 512,
        validation_samples: 256,
        batch_size: 16,
        dirichlet_alpha: Some(0.5),
        seed,
        ..TaskConfig::default()
    };
    make_task(&cfg, workers, fragments).unwrap()
}

pub fn sim_config(method: Method, total_steps: u64) -> SimConfig {
    let mut cfg = SimConfig {
        total_steps,
        eval_every: 50,
        seed: 3,
        ..SimConfig::default()
    };
    cfg.protocol.method = method;
    cfg.adamw.lr = 0.01;
    cfg
}

/// CoCoDC with compensation off and the fixed round-robin cadence.
pub fn cocodc_as_streaming(mut cfg: SimConfig) -> SimConfig {
    cfg.protocol.method = Method::Cocodc;
    cfg.protocol.compensation = false;
    cfg.protocol.selection = Selection::RoundRobin;
    cfg
}

/// Ticks both simulations in lockstep and reports the first step at which
/// any worker's parameters differ bit-wise.
pub fn first_divergence(a: &mut Simulation<'_>, b: &mut Simulation<'_>) -> Option<u64> {
    loop {
        let step = a.step();
        let more_a = a.tick().unwrap();
        let more_b = b.tick().unwrap();
        let same = a
            .workers()
            .iter()
            .zip(b.workers())
            .all(|(x, y)| bits(x.params.as_slice()) == bits(y.params.as_slice()));
        if !same || more_a != more_b {
            return Some(step);
        }
        if !more_a {
            return None;
        }
    }
}

pub fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}
