//! End-to-end runs through the public controller and simulation interfaces.

use std::sync::Arc;

use nalgebra::DVector;
use proptest::prelude::*;

use sltmpc::mpc::{
    build_controller, ClarabelBackend, Controller, ControllerConfig, Method, SolverBackend,
};
use sltmpc::sim::{simulate_closed_loop, DisturbanceMode, SimOptions};
use sltmpc::slp::LtiSystem;

fn offline_controller(sys: &LtiSystem) -> Box<dyn Controller> {
    let backend: Arc<dyn SolverBackend> = Arc::new(ClarabelBackend::new());
    build_controller(
        Method::FirSltmpcOffline,
        sys,
        &ControllerConfig::for_system(sys),
        backend,
    )
    .unwrap()
}

fn short(sys: &LtiSystem, seed: u64, mode: DisturbanceMode) -> SimOptions {
    let mut opts = SimOptions::for_system(sys);
    opts.steps = 6;
    opts.n_runs = 4;
    opts.seed = seed;
    opts.mode = mode;
    opts
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn same_seed_same_runs(seed in any::<u64>(), vertex in any::<bool>()) {
        let sys = LtiSystem::benchmark(0.04);
        let ctrl = offline_controller(&sys);
        let mode = if vertex { DisturbanceMode::VertexWalk } else { DisturbanceMode::Uniform };
        let x0 = DVector::from_vec(vec![-0.5, 0.3]);
        let a = simulate_closed_loop(&sys, ctrl.as_ref(), &x0, &short(&sys, seed, mode)).unwrap();
        let b = simulate_closed_loop(&sys, ctrl.as_ref(), &x0, &short(&sys, seed, mode)).unwrap();
        prop_assert_eq!(a.runs.len(), b.runs.len());
        for (ra, rb) in a.runs.iter().zip(&b.runs) {
            prop_assert_eq!(&ra.states, &rb.states);
            prop_assert_eq!(&ra.disturbances, &rb.disturbances);
            prop_assert_eq!(ra.cost, rb.cost);
        }
        prop_assert_eq!(a.mean_cost, b.mean_cost);
        // Disturbances stay in W and the runs differ from each other.
        for r in &a.runs {
            for w in &r.disturbances {
                prop_assert!(sys.w.contains(w, 1e-12).unwrap());
            }
        }
        prop_assert_ne!(&a.runs[0].disturbances, &a.runs[1].disturbances);
    }
}

#[test]
fn every_method_keeps_constraints_from_a_feasible_start() {
    let sys = LtiSystem::benchmark(0.04);
    let backend: Arc<dyn SolverBackend> = Arc::new(ClarabelBackend::new());
    let cfg = ControllerConfig::for_system(&sys);
    let x0 = DVector::from_vec(vec![-0.3, 0.2]);
    for m in Method::ALL {
        let ctrl = build_controller(m, &sys, &cfg, backend.clone()).unwrap();
        let opts = short(&sys, 1, DisturbanceMode::VertexWalk);
        let res = simulate_closed_loop(&sys, ctrl.as_ref(), &x0, &opts).unwrap();
        assert_eq!(res.n_failed, 0, "{m}");
        assert!(res.max_violation() <= 1e-6, "{m}: {}", res.max_violation());
    }
}

#[test]
fn cost_is_the_sum_of_stage_costs() {
    let sys = LtiSystem::benchmark(0.04);
    let ctrl = offline_controller(&sys);
    let x0 = DVector::from_vec(vec![-1.0, -0.5]);
    let res = simulate_closed_loop(
        &sys,
        ctrl.as_ref(),
        &x0,
        &short(&sys, 9, DisturbanceMode::Uniform),
    )
    .unwrap();
    for r in &res.runs {
        let mut x = r.states[0].clone();
        let mut total = 0.0;
        for (t, (u, w)) in r.inputs.iter().zip(&r.disturbances).enumerate() {
            let stage = 100.0 * x.norm_squared() + 10.0 * u.norm_squared();
            assert!((stage - r.stage_costs[t]).abs() < 1e-9);
            total += stage;
            x = &sys.a * &x + &sys.b * u + w;
            assert!((&x - &r.states[t + 1]).amax() < 1e-12);
        }
        assert!((total - r.cost).abs() < 1e-9);
    }
    let mean = res.runs.iter().map(|r| r.cost).sum::<f64>() / res.runs.len() as f64;
    assert!((mean - res.mean_cost).abs() < 1e-9);
}
