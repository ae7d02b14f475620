//! Weighted least squares state estimation in rectangular coordinates.
//!
//! Minimizes `J(x) = (z - h(x))^T R^-1 (z - h(x))` with Gauss-Newton steps
//! `dx = G^-1 H^T R^-1 (z - h(x))`, `G = H^T R^-1 H`, both evaluated at the
//! current iterate. A step is halved up to four times until `J` does not
//! increase. Iteration stops when the largest component of the full step,
//! in per-unit of the feeder base voltage, drops below the tolerance.
//!
//! Every iteration checks observability before factorizing: the condition
//! estimate from [`observability_condition`] must stay below
//! [`WlsConfig::condition_limit`] and the Cholesky factorization of the gain
//! matrix must exist. Either failure is reported as [`WlsError::Unobservable`].

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use thiserror::Error;

use crate::grid::FeederModel;
use crate::measurements::{MeasurementError, MeasurementKind, MeasurementModel, MeasurementSet};
use crate::state::StateVector;

#[derive(Debug, Error)]
pub enum WlsError {
    #[error("unobservable: gain matrix is singular (condition estimate {condition:.3e})")]
    Unobservable { condition: f64 },
    #[error("Gauss-Newton did not converge within {} iterations", .0.iterations)]
    NonConverged(Box<WlsReport>),
    #[error("measurement row {row} has non-positive variance")]
    BadVariance { row: usize },
    #[error(transparent)]
    Measurement(#[from] MeasurementError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WlsConfig {
    /// Per-unit threshold on the max-norm of the state update.
    pub tolerance: f64,
    pub max_iter: usize,
    /// Start from balanced nominal voltages. Otherwise every bus starts at the
    /// first PMU voltage phasor of the matching phase.
    pub flat_start: bool,
    pub condition_limit: f64,
    pub max_halvings: usize,
}

impl Default for WlsConfig {
    fn default() -> Self {
        WlsConfig {
            tolerance: 1e-7,
            max_iter: 50,
            flat_start: true,
            condition_limit: 1e12,
            max_halvings: 4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct WlsReport {
    pub x_hat: StateVector,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    /// [`observability_condition`] at the last iterate.
    pub gain_condition: f64,
    /// `J` at the start and after every accepted step.
    pub objective_history: Vec<f64>,
}

/// `J(x)` for the rows of `z`.
pub fn objective(model: &FeederModel, z: &MeasurementSet, x: &StateVector) -> Result<f64, MeasurementError> {
    let mm = MeasurementModel::new(model, z)?;
    Ok(weighted_residual(&mm, &z.values(), &weights(z), x.values()))
}

/// `H^T R^-1 H` at `x`.
pub fn gain_matrix(model: &FeederModel, z: &MeasurementSet, x: &StateVector) -> Result<DMatrix<f64>, MeasurementError> {
    let mm = MeasurementModel::new(model, z)?;
    Ok(assemble_gain(&mm.jacobian(x.values()), &weights(z)).0)
}

pub fn estimate(model: &FeederModel, z: &MeasurementSet, config: &WlsConfig) -> Result<WlsReport, WlsError> {
    let start = if config.flat_start {
        StateVector::flat(model)
    } else {
        pmu_start(model, z)
    };
    estimate_from(model, z, config, start)
}

pub fn estimate_from(model: &FeederModel, z: &MeasurementSet, config: &WlsConfig, start: StateVector) -> Result<WlsReport, WlsError> {
    if let Some(row) = z.rows.iter().position(|m| !(m.variance > 0.0)) {
        return Err(WlsError::BadVariance { row });
    }
    let mm = MeasurementModel::new(model, z)?;
    let values = z.values();
    let w = weights(z);
    let base = model.base_voltage();

    let mut x = start;
    let mut j = weighted_residual(&mm, &values, &w, x.values());
    let mut history = vec![j];
    let mut condition = f64::NAN;

    for iter in 1..=config.max_iter {
        let h = mm.evaluate(x.values());
        let jac = mm.jacobian(x.values());
        let (gain, rhs) = {
            let (g, hw) = assemble_gain(&jac, &w);
            let r = DVector::from_iterator(values.len(), values.iter().zip(&h).map(|(z, h)| z - h));
            (g, hw.tr_mul(&r))
        };
        condition = observability_condition(&jac);
        if !(condition <= config.condition_limit) {
            return Err(WlsError::Unobservable { condition });
        }
        let chol = gain
            .clone()
            .cholesky()
            .ok_or(WlsError::Unobservable { condition })?;
        let dx = chol.solve(&rhs);
        let step_pu = dx.amax() / base;

        let trial = |alpha: f64| -> Vec<f64> { x.values().iter().zip(dx.iter()).map(|(a, d)| a + alpha * d).collect() };

        if step_pu < config.tolerance {
            let candidate = trial(1.0);
            let jc = weighted_residual(&mm, &values, &w, &candidate);
            if jc <= j {
                x.values_mut().copy_from_slice(&candidate);
                j = jc;
                history.push(j);
            }
            return Ok(WlsReport {
                x_hat: x,
                objective: j,
                iterations: iter,
                converged: true,
                gain_condition: condition,
                objective_history: history,
            });
        }

        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..=config.max_halvings {
            let candidate = trial(alpha);
            let jc = weighted_residual(&mm, &values, &w, &candidate);
            if jc <= j {
                x.values_mut().copy_from_slice(&candidate);
                j = jc;
                history.push(j);
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            return Err(WlsError::NonConverged(Box::new(WlsReport {
                x_hat: x,
                objective: j,
                iterations: iter,
                converged: false,
                gain_condition: condition,
                objective_history: history,
            })));
        }
    }

    Err(WlsError::NonConverged(Box::new(WlsReport {
        x_hat: x,
        objective: j,
        iterations: config.max_iter,
        converged: false,
        gain_condition: condition,
        objective_history: history,
    })))
}

/// True when the gain matrix at `x` passes the same observability test
/// [`estimate`] applies.
pub fn is_observable(model: &FeederModel, z: &MeasurementSet, x: &StateVector, config: &WlsConfig) -> Result<bool, MeasurementError> {
    let mm = MeasurementModel::new(model, z)?;
    let jac = mm.jacobian(x.values());
    let g = assemble_gain(&jac, &weights(z)).0;
    Ok(observability_condition(&jac) <= config.condition_limit && g.cholesky().is_some())
}

fn weights(z: &MeasurementSet) -> Vec<f64> {
    z.rows.iter().map(|m| 1.0 / m.variance).collect()
}

fn weighted_residual(mm: &MeasurementModel, values: &[f64], w: &[f64], x: &[f64]) -> f64 {
    mm.evaluate(x)
        .iter()
        .zip(values)
        .zip(w)
        .map(|((h, z), w)| w * (z - h) * (z - h))
        .sum()
}

/// Returns `(G, W H)` where `G = H^T W H`.
fn assemble_gain(jac: &DMatrix<f64>, w: &[f64]) -> (DMatrix<f64>, DMatrix<f64>) {
    let mut hw = jac.clone();
    for (r, &wr) in w.iter().enumerate() {
        hw.row_mut(r).scale_mut(wr.sqrt());
    }
    let g = hw.tr_mul(&hw);
    for (r, &wr) in w.iter().enumerate() {
        hw.row_mut(r).scale_mut(wr.sqrt());
    }
    (g, hw)
}

/// Condition estimate used for the observability test: the condition number
/// of `Hn^T Hn`, `Hn` being `H` with unit-norm rows, after diagonal scaling.
/// Measurement weights are left out; their spread (zero-injection rows are
/// weighted about 1e8 times heavier than pseudo rows) inflates the condition
/// of `G` without any loss of rank.
pub fn observability_condition(jac: &DMatrix<f64>) -> f64 {
    let mut hn = jac.clone();
    for mut row in hn.row_iter_mut() {
        let norm = row.norm();
        if norm > 0.0 {
            row /= norm;
        }
    }
    scaled_condition(&hn.tr_mul(&hn))
}

/// Condition number of `D G D` with `D = diag(G)^-1/2`; infinite when a
/// diagonal entry vanishes or the scaled matrix is not positive definite.
pub fn scaled_condition(g: &DMatrix<f64>) -> f64 {
    let n = g.nrows();
    if n == 0 {
        return 1.0;
    }
    let d: Vec<f64> = (0..n).map(|i| g[(i, i)]).collect();
    if d.iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
        return f64::INFINITY;
    }
    let scaled = DMatrix::from_fn(n, n, |i, j| g[(i, j)] / (d[i] * d[j]).sqrt());
    let eig = scaled.symmetric_eigenvalues();
    let max = eig.max();
    let min = eig.min();
    if !(min > 0.0) {
        f64::INFINITY
    } else {
        max / min
    }
}

fn pmu_start(model: &FeederModel, z: &MeasurementSet) -> StateVector {
    let flat = StateVector::flat(model);
    let layout = flat.layout().clone();
    let mut reference: [Option<Complex64>; 3] = [None; 3];
    for (k, m) in z.rows.iter().enumerate() {
        if m.kind == MeasurementKind::VReal && reference[m.phase.index()].is_none() {
            if let Some(im) = z.rows.get(k + 1).filter(|n| n.kind == MeasurementKind::VImag && n.locus == m.locus) {
                reference[m.phase.index()] = Some(Complex64::new(m.value, im.value));
            }
        }
    }
    let phasors: Vec<Complex64> = layout
        .slots()
        .iter()
        .enumerate()
        .map(|(k, &(_, p))| reference[p.index()].unwrap_or_else(|| flat.phasor(k)))
        .collect();
    StateVector::from_phasors(layout, &phasors)
}

/// Voltage magnitudes of an estimate in per-unit of the feeder base.
pub fn magnitudes_pu(model: &FeederModel, x: &StateVector) -> Vec<f64> {
    let base = model.base_voltage();
    x.magnitudes().into_iter().map(|v| v / base).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Bus, BusKind, PhaseSet};
    use crate::measurements::{Locus, Measurement, NoiseClass, NoiseLevels};
    use crate::state::StateLayout;
    use std::sync::Arc;

    fn lone_bus() -> FeederModel {
        FeederModel::new(
            vec![Bus {
                label: 1,
                phases: PhaseSet::ABC,
                kind: BusKind::Source,
                base_voltage: 2400.0,
            }],
            vec![],
            vec![],
        )
        .unwrap()
    }

    fn direct_rows(model: &FeederModel, x: &StateVector, variance: f64) -> MeasurementSet {
        let layout = StateLayout::new(model);
        let mut rows = Vec::new();
        for (k, &(b, p)) in layout.slots().iter().enumerate() {
            for (kind, value) in [
                (MeasurementKind::VReal, x.values()[2 * k]),
                (MeasurementKind::VImag, x.values()[2 * k + 1]),
            ] {
                rows.push(Measurement {
                    kind,
                    locus: Locus::Bus(b),
                    phase: p,
                    class: NoiseClass::PmuVoltage,
                    value,
                    variance,
                });
            }
        }
        MeasurementSet {
            rows,
            levels: NoiseLevels::default(),
        }
    }

    #[test]
    fn identity_measurements_are_recovered_immediately() {
        let model = lone_bus();
        let layout = Arc::new(StateLayout::new(&model));
        let x = StateVector::from_values(layout, vec![2390.0, 5.0, -1190.0, -2070.0, -1200.0, 2080.0]);
        let z = direct_rows(&model, &x, 4.0);
        let report = estimate(&model, &z, &WlsConfig::default()).unwrap();
        assert!(report.iterations <= 2);
        for (a, b) in report.x_hat.values().iter().zip(x.values()) {
            assert!((a - b).abs() < 1e-9);
        }
        assert!(report.objective < 1e-18);
    }

    #[test]
    fn single_row_objective() {
        let model = lone_bus();
        let x = StateVector::flat(&model);
        let mut z = direct_rows(&model, &x, 1.0);
        z.rows.truncate(1);
        z.rows[0].value += 3.0;
        z.rows[0].variance = 4.0;
        assert_eq!(objective(&model, &z, &x).unwrap(), 9.0 / 4.0);
    }

    #[test]
    fn missing_component_is_unobservable() {
        let model = lone_bus();
        let x = StateVector::flat(&model);
        let mut z = direct_rows(&model, &x, 1.0);
        z.rows.remove(3);
        assert!(matches!(
            estimate(&model, &z, &WlsConfig::default()),
            Err(WlsError::Unobservable { .. })
        ));
    }

    #[test]
    fn rejects_zero_variance() {
        let model = lone_bus();
        let x = StateVector::flat(&model);
        let mut z = direct_rows(&model, &x, 1.0);
        z.rows[2].variance = 0.0;
        assert!(matches!(
            estimate(&model, &z, &WlsConfig::default()),
            Err(WlsError::BadVariance { row: 2 })
        ));
    }

    #[test]
    fn condition_of_identity_is_one() {
        assert_eq!(scaled_condition(&DMatrix::identity(4, 4)), 1.0);
        let mut g = DMatrix::identity(3, 3);
        g[(2, 2)] = 0.0;
        assert!(scaled_condition(&g).is_infinite());
    }
}
