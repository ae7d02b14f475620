mod common;

use common::{idx, six_bus, thirteen_node};
use feederstate::measurements::*;
use feederstate::powerflow::{nominal_loads, solve_power_flow, PowerFlowOptions};
use feederstate::wls::*;
use feederstate::{FeederModel, StateVector};

fn truth(model: &FeederModel) -> StateVector {
    solve_power_flow(model, &nominal_loads(model), PowerFlowOptions::for_model(model))
        .unwrap()
        .state
}

fn max_error_pu(model: &FeederModel, a: &StateVector, b: &StateVector) -> f64 {
    a.values()
        .iter()
        .zip(b.values())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
        / model.base_voltage()
}

#[test]
fn noiseless_full_plan_recovers_truth() {
    let m = six_bus();
    let x = truth(&m);
    let t = plan_with_levels(&m, &idx(&m, &[4]), &m.load_buses(), NoiseLevels::noiseless()).unwrap();
    let z = synthesize(&m, &t, &x, 0).unwrap();
    let rep = estimate(&m, &z, &WlsConfig::default()).unwrap();
    assert!(rep.converged);
    let err = max_error_pu(&m, &rep.x_hat, &x);
    assert!(err < 1e-8, "{err:e}");
}

#[test]
fn objective_history_is_monotone() {
    for m in [six_bus(), thirteen_node()] {
        let x = truth(&m);
        let pmus = vec![m.source()];
        let t = plan_measurements(&m, &pmus, &[], 0.5).unwrap();
        for seed in 0..20 {
            let z = synthesize(&m, &t, &x, seed).unwrap();
            let rep = estimate(&m, &z, &WlsConfig::default()).unwrap();
            for w in rep.objective_history.windows(2) {
                assert!(w[1] <= w[0], "{:?}", rep.objective_history);
            }
            assert_eq!(*rep.objective_history.last().unwrap(), rep.objective);
            assert!(rep.gain_condition.is_finite());
        }
    }
}

#[test]
fn argmin_is_invariant_to_covariance_scale() {
    let m = thirteen_node();
    let x = truth(&m);
    let t = plan_measurements(&m, &idx(&m, &[1, 12]), &[], 0.3).unwrap();
    for seed in 0..5 {
        let z = synthesize(&m, &t, &x, seed).unwrap();
        let scaled = z.with_data(&z.values(), &z.variances().iter().map(|v| v * 7.5).collect::<Vec<_>>());
        let a = estimate(&m, &z, &WlsConfig::default()).unwrap();
        let b = estimate(&m, &scaled, &WlsConfig::default()).unwrap();
        // Same Gauss-Newton path; the minimizer is located to the stopping tolerance.
        assert_eq!(a.iterations, b.iterations);
        assert!(max_error_pu(&m, &a.x_hat, &b.x_hat) < WlsConfig::default().tolerance);
        assert!((b.objective * 7.5 - a.objective).abs() <= 1e-9 * a.objective);
    }
}

#[test]
fn gain_is_symmetric() {
    let m = thirteen_node();
    let x = truth(&m);
    let t = plan_measurements(&m, &idx(&m, &[1, 12]), &[], 0.3).unwrap();
    let z = synthesize(&m, &t, &x, 1).unwrap();
    let g = gain_matrix(&m, &z, &x).unwrap();
    let scale = g.amax();
    assert!((&g - g.transpose()).amax() <= 1e-14 * scale);
}

#[test]
fn objective_matches_double_loop() {
    let m = six_bus();
    let x = truth(&m);
    let t = plan_measurements(&m, &idx(&m, &[4]), &[], 0.3).unwrap();
    let z = synthesize(&m, &t, &x, 4).unwrap();
    let probe = StateVector::flat(&m);
    let h = measurement_function(&m, &z, &probe).unwrap();
    let mut naive = 0.0;
    for i in 0..z.len() {
        for k in 0..z.len() {
            let r_inv = if i == k { 1.0 / z.rows[i].variance } else { 0.0 };
            naive += (z.rows[i].value - h[i]) * r_inv * (z.rows[k].value - h[k]);
        }
    }
    let fast = objective(&m, &z, &probe).unwrap();
    assert!((fast - naive).abs() <= 1e-12 * naive);
    let exact = evaluate_exact(&m, &t, &x).unwrap();
    assert_eq!(objective(&m, &exact, &x).unwrap(), 0.0);
}

#[test]
fn removing_pseudo_rows_of_a_bus_is_unobservable() {
    let m = six_bus();
    let x = truth(&m);
    let t = plan_measurements(&m, &idx(&m, &[4]), &[], 0.3).unwrap();
    let z = synthesize(&m, &t, &x, 8).unwrap();
    assert!(estimate(&m, &z, &WlsConfig::default()).is_ok());

    let b2 = m.bus_index(2).unwrap();
    let mut cut = z.clone();
    cut.rows.retain(|r| !(r.class == NoiseClass::PseudoPower && r.locus == Locus::Bus(b2)));
    for _ in 0..3 {
        let err = estimate(&m, &cut, &WlsConfig::default()).unwrap_err();
        assert!(matches!(err, WlsError::Unobservable { .. }), "{err}");
    }
    assert!(!is_observable(&m, &cut, &x, &WlsConfig::default()).unwrap());
}

#[test]
fn iteration_cap_reports_non_convergence() {
    let m = thirteen_node();
    let x = truth(&m);
    let t = plan_measurements(&m, &[m.source()], &[], 0.3).unwrap();
    let z = synthesize(&m, &t, &x, 2).unwrap();
    let config = WlsConfig {
        max_iter: 1,
        ..WlsConfig::default()
    };
    match estimate(&m, &z, &config) {
        Err(WlsError::NonConverged(rep)) => {
            assert!(!rep.converged);
            assert_eq!(rep.iterations, 1);
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn pmu_start_also_converges() {
    let m = thirteen_node();
    let x = truth(&m);
    let t = plan_measurements(&m, &idx(&m, &[1, 12]), &[], 0.3).unwrap();
    let z = synthesize(&m, &t, &x, 6).unwrap();
    let flat = estimate(&m, &z, &WlsConfig::default()).unwrap();
    let pmu = estimate(
        &m,
        &z,
        &WlsConfig {
            flat_start: false,
            ..WlsConfig::default()
        },
    )
    .unwrap();
    assert!(max_error_pu(&m, &flat.x_hat, &pmu.x_hat) < 1e-6);
}
