mod common;

use std::collections::BTreeSet;
use std::sync::Arc;

use common::{idx, six_bus, thirteen_node};
use feederstate::grid::BusKind;
use feederstate::measurements::*;
use feederstate::powerflow::{nominal_loads, solve_power_flow, PowerFlowOptions};
use feederstate::{FeederModel, StateLayout, StateVector};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_state(model: &FeederModel, rng: &mut impl Rng) -> StateVector {
    let layout = Arc::new(StateLayout::new(model));
    let base = model.base_voltage();
    let phasors: Vec<Complex64> = layout
        .slots()
        .iter()
        .map(|&(_, p)| {
            let mag = base * rng.random_range(0.9..1.1);
            Complex64::from_polar(mag, p.nominal_angle() + rng.random_range(-0.2..0.2))
        })
        .collect();
    StateVector::from_phasors(layout, &phasors)
}

fn solved(model: &FeederModel) -> StateVector {
    solve_power_flow(model, &nominal_loads(model), PowerFlowOptions::for_model(model))
        .unwrap()
        .state
}

#[test]
fn six_bus_pmu_at_bus_four() {
    let m = six_bus();
    let t = plan_measurements(&m, &idx(&m, &[4]), &[], 0.3).unwrap();
    let b4 = m.bus_index(4).unwrap();
    let mut branches = BTreeSet::new();
    for r in &t.rows {
        match (r.kind, r.locus) {
            (MeasurementKind::VReal | MeasurementKind::VImag, Locus::Bus(b)) => assert_eq!(b, b4),
            (MeasurementKind::IReal | MeasurementKind::IImag, Locus::Branch { branch, at }) => {
                assert_eq!(at, b4);
                let br = &m.branches()[branch];
                let mut ends = [m.label(br.from), m.label(br.to)];
                ends.sort();
                branches.insert(ends);
            }
            (MeasurementKind::PInjection | MeasurementKind::QInjection, Locus::Bus(_)) => {}
            other => panic!("unexpected row {other:?}"),
        }
    }
    assert_eq!(branches, BTreeSet::from([[3, 4], [4, 5], [4, 6]]));
    // 6 voltage rows, 18 current rows, 6 injection rows on each of buses 2, 3, 4, 5, 6.
    assert_eq!(t.len(), 6 + 18 + 30);
}

#[test]
fn thirteen_node_row_count_matches_enumeration() {
    let m = thirteen_node();
    let loads = m.load_buses();
    let metered = vec![loads[0], loads[3]];
    let pmus = idx(&m, &[1, 12]);
    let t = plan_measurements(&m, &pmus, &metered, 0.3).unwrap();

    let mut expected = 0;
    let mut smart = 0;
    for &p in &pmus {
        expected += 2 * m.buses()[p].phases.len();
        for br in m.branches() {
            if br.from == p || br.to == p {
                expected += 2 * br.phases.len();
            }
        }
    }
    for (b, bus) in m.buses().iter().enumerate() {
        if matches!(bus.kind, BusKind::Load | BusKind::ZeroInjection) {
            expected += 2 * bus.phases.len();
            if metered.contains(&b) {
                smart += 2 * bus.phases.len();
            }
        }
    }
    assert_eq!(t.len(), expected);
    let counted = t.rows.iter().filter(|r| r.class == NoiseClass::SmartMeterPower).count();
    assert_eq!(counted, smart);
}

#[test]
fn plan_rejects_bad_inputs() {
    let m = six_bus();
    assert!(matches!(plan_measurements(&m, &[], &[], 0.3), Err(MeasurementError::NoPmu)));
    assert!(matches!(plan_measurements(&m, &[17], &[], 0.3), Err(MeasurementError::InvalidPmuBus(17))));
    let zi = m.bus_index(4).unwrap();
    assert!(matches!(plan_measurements(&m, &[0], &[zi], 0.3), Err(MeasurementError::NotALoadBus(_))));
}

#[test]
fn jacobian_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for m in [six_bus(), thirteen_node()] {
        let loads = m.load_buses();
        let pmus = vec![m.source(), loads[loads.len() / 2]];
        let t = plan_measurements(&m, &pmus, &loads[..1], 0.3).unwrap();
        let hm = MeasurementModel::new(&m, &t).unwrap();
        for _ in 0..50 {
            let x = random_state(&m, &mut rng);
            let analytic = hm.jacobian(x.values());
            let mut fd = analytic.clone();
            let mut probe = x.values().to_vec();
            // Step scaled by the typical state magnitude, not the component itself:
            // components near zero still enter rows whose value is of order base voltage.
            let typical = probe.iter().fold(1.0f64, |a, v| a.max(v.abs()));
            let h = f64::EPSILON.sqrt() * typical;
            for c in 0..probe.len() {
                let orig = probe[c];
                probe[c] = orig + h;
                let up = hm.evaluate(&probe);
                probe[c] = orig - h;
                let down = hm.evaluate(&probe);
                probe[c] = orig;
                for r in 0..up.len() {
                    fd[(r, c)] = (up[r] - down[r]) / (2.0 * h);
                }
            }
            for r in 0..analytic.nrows() {
                let scale = analytic.row(r).amax();
                let err = (analytic.row(r) - fd.row(r)).amax();
                assert!(err <= 1e-6 * scale, "row {r}: {err:e} vs {scale:e}");
            }
        }
    }
}

#[test]
fn pmu_rows_do_not_depend_on_state() {
    let m = thirteen_node();
    let t = plan_measurements(&m, &idx(&m, &[1, 12]), &[], 0.3).unwrap();
    let hm = MeasurementModel::new(&m, &t).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = hm.jacobian(random_state(&m, &mut rng).values());
    let b = hm.jacobian(random_state(&m, &mut rng).values());
    for (r, row) in t.rows.iter().enumerate() {
        let linear = matches!(row.class, NoiseClass::PmuVoltage | NoiseClass::PmuCurrent);
        assert_eq!(hm.is_linear_row(r), linear);
        if linear {
            assert_eq!(a.row(r), b.row(r));
        }
    }
}

#[test]
fn voltage_rows_copy_state() {
    let m = six_bus();
    let t = plan_measurements(&m, &[0, 3], &[], 0.3).unwrap();
    let x = random_state(&m, &mut ChaCha8Rng::seed_from_u64(1));
    let h = measurement_function(&m, &t, &x).unwrap();
    for (r, row) in t.rows.iter().enumerate() {
        let Locus::Bus(b) = row.locus else { continue };
        match row.kind {
            MeasurementKind::VReal => assert_eq!(h[r], x.voltage(b, row.phase).unwrap().re),
            MeasurementKind::VImag => assert_eq!(h[r], x.voltage(b, row.phase).unwrap().im),
            _ => {}
        }
    }
}

#[test]
fn injections_vanish_at_flat_zero_load_state() {
    let m = thirteen_node();
    let t = plan_measurements(&m, &[0], &[], 0.3).unwrap();
    let h = measurement_function(&m, &t, &StateVector::flat(&m)).unwrap();
    for (r, row) in t.rows.iter().enumerate() {
        if matches!(row.kind, MeasurementKind::PInjection | MeasurementKind::QInjection) {
            assert!(h[r].abs() < 1e-9, "{}", h[r]);
        }
    }
}

#[test]
fn injections_equal_negative_loads_at_power_flow_solution() {
    for m in [six_bus(), thirteen_node()] {
        let t = plan_measurements(&m, &[0], &[], 0.3).unwrap();
        let h = measurement_function(&m, &t, &solved(&m)).unwrap();
        for (r, row) in t.rows.iter().enumerate() {
            let Locus::Bus(b) = row.locus else { continue };
            let load = m.nominal_load(b)[row.phase.index()];
            let expected = match row.kind {
                MeasurementKind::PInjection => -load.re,
                MeasurementKind::QInjection => -load.im,
                _ => continue,
            };
            assert!((h[r] - expected).abs() < 1e-6 * m.power_base(), "row {r}: {} vs {expected}", h[r]);
        }
    }
}

#[test]
fn noiseless_levels_reproduce_h() {
    let m = six_bus();
    let t = plan_with_levels(&m, &[3], &[], NoiseLevels::noiseless()).unwrap();
    let x = solved(&m);
    let z = synthesize(&m, &t, &x, 9).unwrap();
    assert_eq!(z.values(), measurement_function(&m, &t, &x).unwrap());
    assert!(z.variances().iter().all(|&v| v > 0.0));
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[test]
fn synthesis_statistics() {
    let m = six_bus();
    let t = plan_measurements(&m, &[m.source()], &[], 0.3).unwrap();
    let x = StateVector::flat(&m);
    let v_row = t
        .rows
        .iter()
        .position(|r| r.kind == MeasurementKind::VReal && r.phase == feederstate::Phase::A)
        .unwrap();
    let zi_row = t.rows.iter().position(|r| r.class == NoiseClass::ZeroInjection).unwrap();

    let n = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut v = Vec::with_capacity(n);
    let mut zi = Vec::with_capacity(n);
    for _ in 0..n {
        let z = synthesize_with_rng(&m, &t, &x, &mut rng).unwrap();
        v.push(z.rows[v_row].value);
        zi.push(z.rows[zi_row].value);
    }

    let sigma = 0.01 * 2400.0 / 3.0;
    assert!((sigma - 8.0f64).abs() < 1e-12);
    let (mean, sd) = mean_std(&v);
    assert!((mean - 2400.0).abs() < 0.02 * sigma, "mean {mean}");
    assert!((sd - sigma).abs() < 0.02 * sigma, "sd {sd}");
    let within = v.iter().filter(|&&x| (x - 2400.0).abs() <= 24.0).count() as f64 / n as f64;
    assert!(within >= 0.995, "{within}");

    let zi_sigma = 1e-5 * m.power_base() / 3.0;
    let (mean, sd) = mean_std(&zi);
    assert!(mean.abs() < 0.02 * zi_sigma, "mean {mean}");
    assert!((sd - zi_sigma).abs() < 0.02 * zi_sigma, "sd {sd}");
}

#[test]
fn synthesis_is_seeded() {
    let m = thirteen_node();
    let t = plan_measurements(&m, &[0], &[], 0.5).unwrap();
    let x = solved(&m);
    let a = synthesize(&m, &t, &x, 77).unwrap();
    assert_eq!(a, synthesize(&m, &t, &x, 77).unwrap());
    assert_ne!(a, synthesize(&m, &t, &x, 78).unwrap());
}

#[test]
fn csv_round_trip() {
    let m = thirteen_node();
    let t = plan_measurements(&m, &idx(&m, &[1, 12]), &m.load_buses()[..2], 0.3).unwrap();
    let z = synthesize(&m, &t, &solved(&m), 3).unwrap();
    let mut buf = Vec::new();
    write_measurements(&m, &z, &mut buf).unwrap();
    let text = String::from_utf8(buf.clone()).unwrap();
    assert!(text.starts_with("kind,locus,phase,value,variance,class\n"));
    let back = read_measurements(&m, buf.as_slice()).unwrap();
    assert_eq!(back.rows, z.rows);
}

#[test]
fn csv_rejects_garbage() {
    let m = six_bus();
    let bad = "kind,locus,phase,value,variance,class\nv_real,bus:99,A,1.0,1.0,pmu_voltage\n";
    assert!(read_measurements(&m, bad.as_bytes()).is_err());
    assert!(read_measurements(&m, "a,b\n".as_bytes()).is_err());
}
