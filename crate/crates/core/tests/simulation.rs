mod common;

use cocodc_sim::optim::{adamw_step, AdamWState, LrSchedule};
use cocodc_sim::protocol::{Method, Selection, Simulation};
use cocodc_sim::tasks::derive_seed;

use common::*;

#[test]
fn diloco_updates_global_exactly_every_h_steps() {
    let task = least_squares_task(4, 1);
    let sim = Simulation::new(sim_config(Method::Diloco, 450), &task).unwrap();
    let out = sim.run();
    assert!(out.failure.is_none());
    let steps: Vec<u64> = out.syncs.iter().map(|s| s.completed_step).collect();
    assert_eq!(steps, vec![100, 200, 300, 400]);
    assert!(out.syncs.iter().all(|s| s.initiated_step == s.completed_step));
}

#[test]
fn without_syncs_every_method_is_independent_adamw() {
    let workers = 3;
    let total = 60;
    for method in Method::ALL {
        let task = least_squares_task(workers, 4);
        let mut cfg = sim_config(method, total);
        cfg.workers = workers;
        cfg.protocol.local_steps = 1000;
        cfg.protocol.gamma = 1e-6;
        cfg.warmup_steps = 10;
        let mut sim = Simulation::new(cfg.clone(), &task).unwrap();
        while sim.tick().unwrap() {}
        assert!(sim.syncs().is_empty());

        let schedule = LrSchedule {
            peak_lr: cfg.adamw.lr,
            warmup_steps: cfg.warmup_steps,
            total_steps: total,
            min_lr_ratio: cfg.min_lr_ratio,
        };
        for m in 0..workers {
            let mut params = task.initial_params();
            let mut state = AdamWState::new(params.len(), &cfg.adamw);
            for t in 0..total {
                let seed = derive_seed(&[cfg.seed, m as u64, t]);
                let (_, grad) = task.minibatch_grad(task.shard(m), &params, seed);
                state.lr = schedule.lr_at(t);
                adamw_step(&mut params, &grad, &mut state, t).unwrap();
            }
            assert_eq!(
                bits(params.as_slice()),
                bits(sim.workers()[m].params.as_slice()),
                "{method} worker {m}"
            );
        }
    }
}

#[test]
fn sync_result_is_consumed_tau_steps_after_initiation() {
    let task = least_squares_task(4, 4);
    for (tau, sync_seconds) in [(None, 5.0), (Some(3), 5.0), (None, 0.2)] {
        for method in [Method::StreamingDiloco, Method::Cocodc] {
            let mut cfg = sim_config(method, 600);
            cfg.network.tau = tau;
            cfg.network.sync_seconds = Some(sync_seconds);
            let expected = tau.unwrap_or((sync_seconds / cfg.network.compute_seconds).ceil().max(1.0) as u64);
            let out = Simulation::new(cfg, &task).unwrap().run();
            assert!(out.failure.is_none());
            assert!(!out.syncs.is_empty());
            for s in &out.syncs {
                assert_eq!(s.completed_step - s.initiated_step, expected, "{method} {s:?}");
            }
        }
    }
}

#[test]
fn reference_overlap_completes_at_105_for_a_sync_started_at_100() {
    let task = least_squares_task(4, 4);
    let mut cfg = sim_config(Method::StreamingDiloco, 300);
    cfg.protocol.local_steps = 100;
    let out = Simulation::new(cfg, &task).unwrap().run();
    let s = out.syncs.iter().find(|s| s.initiated_step == 100).unwrap();
    assert_eq!(s.completed_step, 105);
}

#[test]
fn channel_carries_one_sync_at_a_time() {
    let task = least_squares_task(4, 4);
    for method in [Method::StreamingDiloco, Method::Cocodc] {
        let mut cfg = sim_config(method, 800);
        // syncs longer than the slot spacing force queueing
        cfg.network.sync_seconds = Some(30.0);
        let mut sim = Simulation::new(cfg, &task).unwrap();
        while sim.tick().unwrap() {}
        let syncs = sim.syncs();
        assert!(syncs.len() > 4);
        for pair in syncs.windows(2) {
            assert!(pair[1].initiated_step >= pair[0].completed_step, "{method} {pair:?}");
        }
    }
}

#[test]
fn snapshots_exist_only_for_the_fragment_in_flight() {
    let task = logistic_task(4, 4, 5);
    let mut sim = Simulation::new(sim_config(Method::Cocodc, 700), &task).unwrap();
    loop {
        let in_flight = sim.in_flight().map(|s| (s.fragment, s.initiated_step));
        for w in sim.workers() {
            let held: Vec<(usize, u64)> = w
                .snapshots
                .iter()
                .flatten()
                .map(|s| (s.fragment, s.initiated_step))
                .collect();
            match in_flight {
                Some(f) => assert_eq!(held, vec![f]),
                None => assert!(held.is_empty()),
            }
        }
        if !sim.tick().unwrap() {
            break;
        }
    }
    assert!(sim.syncs().len() > 10);
}

#[test]
fn cocodc_initiates_eight_syncs_per_window_at_reference_rates() {
    let task = logistic_task(4, 4, 2);
    let cfg = sim_config(Method::Cocodc, 1000);
    let sim = Simulation::new(cfg, &task).unwrap();
    let out = sim.run();
    assert!(out.failure.is_none());
    assert!(out.plans.iter().all(|(_, p)| p.syncs_per_window == 8 && p.interval == 12));
    for window in 0..9u64 {
        let started = out
            .syncs
            .iter()
            .filter(|s| s.initiated_step / 100 == window)
            .count();
        assert_eq!(started, 8, "window {window}");
    }
}

#[test]
fn adaptive_selection_serves_every_fragment_within_the_guard() {
    let task = logistic_task(4, 4, 9);
    let out = Simulation::new(sim_config(Method::Cocodc, 2000), &task).unwrap().run();
    let mut last = [0u64; 4];
    for s in &out.syncs {
        assert!(s.initiated_step - last[s.fragment] <= 2 * 100, "{s:?}");
        last[s.fragment] = s.initiated_step;
    }
}

#[test]
fn jitter_and_moving_average_timings_are_seeded() {
    let task = logistic_task(4, 4, 1);
    let mut cfg = sim_config(Method::Cocodc, 600);
    cfg.network.jitter_sigma = 0.3;
    cfg.network.ema_timings = true;
    cfg.network.ema_decay = 0.2;
    let a = Simulation::new(cfg.clone(), &task).unwrap().run();
    let b = Simulation::new(cfg.clone(), &task).unwrap().run();
    assert!(a.failure.is_none());
    assert_eq!(a.curve, b.curve);
    assert_eq!(a.syncs, b.syncs);
    assert!(a.plans.len() >= 6);

    cfg.network.jitter_sigma = 0.0;
    cfg.network.ema_timings = false;
    let fixed = Simulation::new(cfg, &task).unwrap().run();
    assert_ne!(a.virtual_seconds, fixed.virtual_seconds);
    assert_eq!(fixed.virtual_seconds, 600.0);
}

#[test]
fn blocking_diloco_charges_sync_time_to_the_clock() {
    let task = least_squares_task(4, 1);
    let mut cfg = sim_config(Method::Diloco, 300);
    cfg.protocol.fragments = 1;
    let out = Simulation::new(cfg, &task).unwrap().run();
    assert_eq!(out.syncs.len(), 3);
    assert_eq!(out.virtual_seconds, 300.0 + 3.0 * 5.0);
}

#[test]
fn round_robin_cocodc_cycles_through_fragments() {
    let task = least_squares_task(4, 4);
    let mut cfg = cocodc_as_streaming(sim_config(Method::Cocodc, 500));
    cfg.protocol.compensation = true;
    cfg.protocol.selection = Selection::RoundRobin;
    let out = Simulation::new(cfg, &task).unwrap().run();
    let order: Vec<usize> = out.syncs.iter().map(|s| s.fragment).take(8).collect();
    assert_eq!(order, vec![0, 1, 2, 3, 0, 1, 2, 3]);
    assert!(out.decisions.is_empty());
}
