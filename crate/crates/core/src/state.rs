//! Rectangular three-phase state vectors.
//!
//! Layout is bus-major, phase-minor (A, B, C order, absent phases skipped),
//! and each complex voltage occupies two consecutive reals `[re, im]`. For a
//! slot `k` the real part sits at `2k` and the imaginary part at `2k + 1`.

use std::sync::Arc;

use num_complex::Complex64;

use crate::grid::{FeederModel, Phase};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StateLayout {
    slots: Vec<(usize, Phase)>,
    index: Vec<[Option<usize>; 3]>,
}

impl StateLayout {
    pub fn new(model: &FeederModel) -> Self {
        let mut slots = Vec::new();
        let mut index = vec![[None; 3]; model.bus_count()];
        for (b, bus) in model.buses().iter().enumerate() {
            for p in bus.phases.iter() {
                index[b][p.index()] = Some(slots.len());
                slots.push((b, p));
            }
        }
        StateLayout { slots, index }
    }

    /// Number of complex voltages.
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Number of real unknowns, `2 * len()`.
    pub fn dim(&self) -> usize {
        2 * self.slots.len()
    }

    pub fn slot(&self, bus: usize, phase: Phase) -> Option<usize> {
        self.index.get(bus)?[phase.index()]
    }

    pub fn slots(&self) -> &[(usize, Phase)] {
        &self.slots
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StateVector {
    layout: Arc<StateLayout>,
    values: Vec<f64>,
}

impl StateVector {
    pub fn from_values(layout: Arc<StateLayout>, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), layout.dim(), "state length does not match layout");
        StateVector { layout, values }
    }

    pub fn from_phasors(layout: Arc<StateLayout>, phasors: &[Complex64]) -> Self {
        assert_eq!(phasors.len(), layout.len(), "phasor count does not match layout");
        let values = phasors.iter().flat_map(|v| [v.re, v.im]).collect();
        StateVector { layout, values }
    }

    /// Balanced nominal voltages at the feeder base: 0, -120, +120 degrees.
    pub fn flat(model: &FeederModel) -> Self {
        let layout = Arc::new(StateLayout::new(model));
        let base = model.base_voltage();
        let phasors: Vec<Complex64> = layout.slots().iter().map(|&(_, p)| p.nominal_phasor(base)).collect();
        Self::from_phasors(layout, &phasors)
    }

    pub fn layout(&self) -> &Arc<StateLayout> {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn phasor(&self, slot: usize) -> Complex64 {
        Complex64::new(self.values[2 * slot], self.values[2 * slot + 1])
    }

    pub fn voltage(&self, bus: usize, phase: Phase) -> Option<Complex64> {
        self.layout.slot(bus, phase).map(|k| self.phasor(k))
    }

    pub fn phasors(&self) -> Vec<Complex64> {
        (0..self.layout.len()).map(|k| self.phasor(k)).collect()
    }

    /// Element-wise modulus per (bus, phase) slot, in volts.
    pub fn magnitudes(&self) -> Vec<f64> {
        voltage_magnitudes(&self.values)
    }
}

/// Moduli of consecutive `[re, im]` pairs.
pub fn voltage_magnitudes(rectangular: &[f64]) -> Vec<f64> {
    rectangular.chunks_exact(2).map(|c| c[0].hypot(c[1])).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_four_five() {
        assert_eq!(voltage_magnitudes(&[3.0, 4.0]), vec![5.0]);
        assert_eq!(voltage_magnitudes(&[2400.0, 0.0]), vec![2400.0]);
        assert!(voltage_magnitudes(&[]).is_empty());
    }
}
