mod common;

use common::{parents_from, six_bus, thirteen_node, tree_from_parents};
use feederstate::powerflow::{line_losses, nominal_loads, solve_power_flow, source_power, PowerFlowOptions};
use feederstate::{FeederModel, StateLayout};
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use proptest::prelude::*;

/// Bus admittance matrix over state slots.
fn ybus(model: &FeederModel, layout: &StateLayout) -> DMatrix<Complex64> {
    let n = layout.len();
    let mut y = DMatrix::from_element(n, n, Complex64::new(0.0, 0.0));
    for br in model.branches() {
        let phases: Vec<_> = br.phases.iter().collect();
        for (a, &pa) in phases.iter().enumerate() {
            for (b, &pb) in phases.iter().enumerate() {
                let v = br.admittance[(a, b)];
                let (fa, fb) = (layout.slot(br.from, pa).unwrap(), layout.slot(br.from, pb).unwrap());
                let (ta, tb) = (layout.slot(br.to, pa).unwrap(), layout.slot(br.to, pb).unwrap());
                y[(fa, fb)] += v;
                y[(ta, tb)] += v;
                y[(fa, tb)] -= v;
                y[(ta, fb)] -= v;
            }
        }
    }
    y
}

/// Full Newton-Raphson on the rectangular power-balance equations
/// `V_k conj((Y V)_k) + S_load,k = 0` for every non-source slot.
fn newton_raphson(model: &FeederModel) -> Vec<Complex64> {
    let layout = StateLayout::new(model);
    let y = ybus(model, &layout);
    let base = model.base_voltage();
    let mut v: Vec<Complex64> = layout.slots().iter().map(|&(_, p)| p.nominal_phasor(base)).collect();
    let free: Vec<usize> = (0..layout.len()).filter(|&k| layout.slots()[k].0 != model.source()).collect();
    let load = |k: usize| {
        let (b, p) = layout.slots()[k];
        model.nominal_load(b)[p.index()]
    };
    for _ in 0..50 {
        let vv = DVector::from_vec(v.clone());
        let current = &y * &vv;
        let mut f = DVector::zeros(2 * free.len());
        for (r, &k) in free.iter().enumerate() {
            let s = v[k] * current[k].conj() + load(k);
            f[2 * r] = s.re;
            f[2 * r + 1] = s.im;
        }
        if f.amax() < 1e-9 * model.power_base() {
            return v;
        }
        let mut jac = DMatrix::zeros(2 * free.len(), 2 * free.len());
        for (r, &k) in free.iter().enumerate() {
            for (c, &m) in free.iter().enumerate() {
                let own = if k == m { current[k].conj() } else { Complex64::new(0.0, 0.0) };
                let d_re = own + v[k] * y[(k, m)].conj();
                let d_im = Complex64::i() * own - Complex64::i() * v[k] * y[(k, m)].conj();
                jac[(2 * r, 2 * c)] = d_re.re;
                jac[(2 * r + 1, 2 * c)] = d_re.im;
                jac[(2 * r, 2 * c + 1)] = d_im.re;
                jac[(2 * r + 1, 2 * c + 1)] = d_im.im;
            }
        }
        let dx = jac.lu().solve(&(-f)).expect("nonsingular power-flow Jacobian");
        for (c, &m) in free.iter().enumerate() {
            v[m] += Complex64::new(dx[2 * c], dx[2 * c + 1]);
        }
    }
    panic!("oracle did not converge");
}

#[test]
fn sweep_matches_newton_raphson() {
    for m in [six_bus(), thirteen_node()] {
        let r = solve_power_flow(&m, &nominal_loads(&m), PowerFlowOptions::for_model(&m)).unwrap();
        let oracle = newton_raphson(&m);
        let base = m.base_voltage();
        for (k, v) in oracle.iter().enumerate() {
            let err = (r.state.phasor(k) - v).norm() / base;
            assert!(err < 1e-6, "slot {k}: {err:e} p.u.");
        }
    }
}

fn balance_error(m: &FeederModel) -> f64 {
    let opts = PowerFlowOptions::for_model(m);
    let r = solve_power_flow(m, &nominal_loads(m), opts).unwrap();
    let src = source_power(m, &r);
    let losses = line_losses(m, &r);
    let mut worst: f64 = 0.0;
    for p in 0..3 {
        let demand: Complex64 = (0..m.bus_count()).map(|b| m.nominal_load(b)[p]).sum();
        worst = worst.max((src[p] - demand - losses[p]).norm());
    }
    worst / m.power_base()
}

#[test]
fn power_balance_on_fixtures() {
    for m in [six_bus(), thirteen_node()] {
        let rel_tol = PowerFlowOptions::for_model(&m).tolerance / m.base_voltage();
        let err = balance_error(&m);
        assert!(err <= 10.0 * rel_tol, "{err:e}");
    }
}

#[test]
fn magnitudes_drop_along_six_bus_paths() {
    let m = six_bus();
    let r = solve_power_flow(&m, &nominal_loads(&m), PowerFlowOptions::for_model(&m)).unwrap();
    for br in m.branches() {
        for p in br.phases.iter() {
            let up = r.state.voltage(br.from, p).unwrap().norm();
            let down = r.state.voltage(br.to, p).unwrap().norm();
            assert!(down < up, "{} -> {}", m.label(br.from), m.label(br.to));
        }
    }
}

#[test]
fn tighter_tolerance_never_raises_mismatch() {
    for m in [six_bus(), thirteen_node()] {
        let mut opts = PowerFlowOptions::for_model(&m);
        let mut last = f64::INFINITY;
        for _ in 0..6 {
            let r = solve_power_flow(&m, &nominal_loads(&m), opts).unwrap();
            assert!(r.max_mismatch <= opts.tolerance);
            assert!(r.max_mismatch <= last);
            last = r.max_mismatch;
            opts.tolerance /= 2.0;
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn balance_and_drop_on_random_trees(draws in prop::collection::vec(any::<u32>(), 1..25)) {
        let m = tree_from_parents(&parents_from(&draws));
        let rel_tol = PowerFlowOptions::for_model(&m).tolerance / m.base_voltage();
        prop_assert!(balance_error(&m) <= 10.0 * rel_tol);
        let r = solve_power_flow(&m, &nominal_loads(&m), PowerFlowOptions::for_model(&m)).unwrap();
        for br in m.branches() {
            for p in br.phases.iter() {
                prop_assert!(r.state.voltage(br.to, p).unwrap().norm() < r.state.voltage(br.from, p).unwrap().norm());
            }
        }
    }
}
