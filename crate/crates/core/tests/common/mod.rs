#![allow(dead_code)]

pub mod oracle;

use feederstate::grid::{branch, load_feeder, Bus, BusKind, Load};
use feederstate::{FeederModel, PhaseSet};
use nalgebra::DMatrix;
use num_complex::Complex64;

pub fn fixture(name: &str) -> FeederModel {
    let path = format!("{}/fixtures/{name}.toml", env!("CARGO_MANIFEST_DIR"));
    load_feeder(&path).unwrap_or_else(|e| panic!("{path}: {e}"))
}

pub fn six_bus() -> FeederModel {
    fixture("six_bus")
}

pub fn thirteen_node() -> FeederModel {
    fixture("thirteen_node")
}

/// Bus indices for a list of feeder ids.
pub fn idx(model: &FeederModel, labels: &[u32]) -> Vec<usize> {
    labels.iter().map(|&l| model.bus_index(l).expect("known label")).collect()
}

/// Three-phase tree where bus `i + 1` hangs off `parents[i]` (which must be
/// `<= i`). Bus 0 is the source; every other bus carries a small load.
pub fn tree_from_parents(parents: &[usize]) -> FeederModel {
    let n = parents.len() + 1;
    let buses = (0..n)
        .map(|i| Bus {
            label: i as u32 + 1,
            phases: PhaseSet::ABC,
            kind: if i == 0 { BusKind::Source } else { BusKind::Load },
            base_voltage: 2400.0,
        })
        .collect();
    let z = DMatrix::from_fn(3, 3, |r, c| {
        if r == c {
            Complex64::new(0.05, 0.1)
        } else {
            Complex64::new(0.0, 0.0)
        }
    });
    let branches = parents
        .iter()
        .enumerate()
        .map(|(i, &p)| branch(p, i + 1, PhaseSet::ABC, z.clone()))
        .collect();
    let loads = (1..n)
        .map(|b| Load {
            bus: b,
            phases: PhaseSet::ABC,
            power: vec![Complex64::new(5e3, 2e3); 3],
        })
        .collect();
    FeederModel::new(buses, branches, loads).expect("valid random tree")
}

/// Parent list from raw draws: bus `i + 1` attaches to `draw % (i + 1)`.
pub fn parents_from(draws: &[u32]) -> Vec<usize> {
    draws.iter().enumerate().map(|(i, &r)| r as usize % (i + 1)).collect()
}
