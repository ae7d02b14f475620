//! Backward/forward sweep power flow for radial three-phase feeders.
//!
//! Loads are constant-power wye connections. The source bus is held at the
//! balanced reference set (base voltage, 0/-120/+120 degrees). Each iteration
//! accumulates branch currents from the leaves up and then propagates voltage
//! drops `Z * I` from the source down. Iteration stops once the largest
//! voltage update falls below the tolerance.

use std::sync::Arc;

use num_complex::Complex64;
use thiserror::Error;

use crate::grid::{FeederModel, Phase};
use crate::state::{StateLayout, StateVector};

/// Per-bus complex demand indexed by [`Phase::index`], in W + j var.
pub type BusPowers = Vec<[Complex64; 3]>;

#[derive(Debug, Error, PartialEq)]
pub enum PowerFlowError {
    #[error("power flow did not converge after {iterations} iterations (last mismatch {mismatch:.3e} V)")]
    NonConvergence { iterations: usize, mismatch: f64 },
    #[error("load on phase {phase} at bus {bus}, which does not carry that phase")]
    LoadOnMissingPhase { bus: u32, phase: Phase },
    #[error("expected loads for {expected} buses, got {got}")]
    LoadShape { expected: usize, got: usize },
    #[error("tolerance must be positive and finite")]
    InvalidTolerance,
}

#[derive(Debug, Clone, Copy)]
pub struct PowerFlowOptions {
    /// Volts.
    pub tolerance: f64,
    pub max_iter: usize,
}

impl PowerFlowOptions {
    /// 1e-8 of the feeder base voltage, at most 100 sweeps.
    pub fn for_model(model: &FeederModel) -> Self {
        PowerFlowOptions {
            tolerance: 1e-8 * model.base_voltage(),
            max_iter: 100,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PowerFlowResult {
    pub state: StateVector,
    /// Per branch, current from the upstream end, aligned with the branch phases.
    pub branch_currents: Vec<Vec<Complex64>>,
    pub iterations: usize,
    /// Largest voltage update of the final sweep, in volts.
    pub max_mismatch: f64,
}

/// Nominal demand of every bus as read from the feeder file.
pub fn nominal_loads(model: &FeederModel) -> BusPowers {
    (0..model.bus_count()).map(|b| model.nominal_load(b)).collect()
}

pub fn solve_power_flow(
    model: &FeederModel,
    loads: &[[Complex64; 3]],
    options: PowerFlowOptions,
) -> Result<PowerFlowResult, PowerFlowError> {
    if !(options.tolerance > 0.0 && options.tolerance.is_finite()) {
        return Err(PowerFlowError::InvalidTolerance);
    }
    let n = model.bus_count();
    if loads.len() != n {
        return Err(PowerFlowError::LoadShape {
            expected: n,
            got: loads.len(),
        });
    }
    for (b, bus) in model.buses().iter().enumerate() {
        for p in Phase::ALL {
            if !bus.phases.contains(p) && loads[b][p.index()] != Complex64::new(0.0, 0.0) {
                return Err(PowerFlowError::LoadOnMissingPhase { bus: bus.label, phase: p });
            }
        }
    }

    let base = model.base_voltage();
    let zero = Complex64::new(0.0, 0.0);
    // Voltages per bus indexed by phase; absent phases stay zero.
    let mut v: Vec<[Complex64; 3]> = model
        .buses()
        .iter()
        .map(|bus| {
            let mut row = [zero; 3];
            for p in bus.phases.iter() {
                row[p.index()] = p.nominal_phasor(base);
            }
            row
        })
        .collect();
    let mut currents: Vec<[Complex64; 3]> = vec![[zero; 3]; model.branches().len()];

    let mut mismatch = f64::INFINITY;
    for iter in 1..=options.max_iter {
        backward_sweep(model, loads, &v, &mut currents);
        mismatch = forward_sweep(model, &currents, &mut v);
        if mismatch < options.tolerance {
            backward_sweep(model, loads, &v, &mut currents);
            let layout = Arc::new(StateLayout::new(model));
            let phasors: Vec<Complex64> = layout.slots().iter().map(|&(b, p)| v[b][p.index()]).collect();
            let branch_currents = model
                .branches()
                .iter()
                .zip(&currents)
                .map(|(br, i)| br.phases.iter().map(|p| i[p.index()]).collect())
                .collect();
            return Ok(PowerFlowResult {
                state: StateVector::from_phasors(layout, &phasors),
                branch_currents,
                iterations: iter,
                max_mismatch: mismatch,
            });
        }
    }
    Err(PowerFlowError::NonConvergence {
        iterations: options.max_iter,
        mismatch,
    })
}

fn backward_sweep(model: &FeederModel, loads: &[[Complex64; 3]], v: &[[Complex64; 3]], currents: &mut [[Complex64; 3]]) {
    let zero = Complex64::new(0.0, 0.0);
    let mut injected: Vec<[Complex64; 3]> = vec![[zero; 3]; model.bus_count()];
    for (b, bus) in model.buses().iter().enumerate() {
        for p in bus.phases.iter() {
            let k = p.index();
            injected[b][k] = (loads[b][k] / v[b][k]).conj();
        }
    }
    for &b in model.bfs_order().iter().rev() {
        let Some(k) = model.parent_branch(b) else { continue };
        let total = injected[b];
        currents[k] = total;
        let parent = model.branches()[k].from;
        for p in model.branches()[k].phases.iter() {
            injected[parent][p.index()] += total[p.index()];
        }
    }
}

fn forward_sweep(model: &FeederModel, currents: &[[Complex64; 3]], v: &mut [[Complex64; 3]]) -> f64 {
    let mut mismatch: f64 = 0.0;
    for &b in model.bfs_order() {
        let Some(k) = model.parent_branch(b) else { continue };
        let br = &model.branches()[k];
        let phases: Vec<Phase> = br.phases.iter().collect();
        for (i, &pi) in phases.iter().enumerate() {
            let drop: Complex64 = phases
                .iter()
                .enumerate()
                .map(|(j, &pj)| br.impedance[(i, j)] * currents[k][pj.index()])
                .sum();
            let updated = v[br.from][pi.index()] - drop;
            mismatch = mismatch.max((updated - v[b][pi.index()]).norm());
            v[b][pi.index()] = updated;
        }
    }
    mismatch
}

/// Per-phase complex power delivered by the source, indexed by [`Phase::index`].
pub fn source_power(model: &FeederModel, result: &PowerFlowResult) -> [Complex64; 3] {
    let src = model.source();
    let mut s = [Complex64::new(0.0, 0.0); 3];
    for &(_, k) in model.neighbors(src) {
        let br = &model.branches()[k];
        for (i, p) in br.phases.iter().enumerate() {
            let v = result.state.voltage(src, p).expect("branch phase present at source");
            s[p.index()] += v * result.branch_currents[k][i].conj();
        }
    }
    s
}

/// Per-phase series losses `(Z I)_p * conj(I_p)` summed over branches.
pub fn line_losses(model: &FeederModel, result: &PowerFlowResult) -> [Complex64; 3] {
    let mut s = [Complex64::new(0.0, 0.0); 3];
    for (br, i) in model.branches().iter().zip(&result.branch_currents) {
        for (r, p) in br.phases.iter().enumerate() {
            let drop: Complex64 = (0..i.len()).map(|c| br.impedance[(r, c)] * i[c]).sum();
            s[p.index()] += drop * i[r].conj();
        }
    }
    s
}
