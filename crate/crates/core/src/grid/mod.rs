//! Three-phase radial feeder model.
//!
//! A [`FeederModel`] is built once from a feeder file (see [`file`]) and is
//! immutable afterwards. Bus indices are contiguous `0..N` in file order; the
//! original ids from the file are kept as [`Bus::label`]. Branches are
//! re-oriented during ingestion so that `from` is always the upstream end
//! (closer to the source bus).

pub mod file;

use std::collections::VecDeque;
use std::fmt;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use file::{feeder_hash, load_feeder, parse_feeder, to_feeder_string};

#[derive(Debug, Error)]
pub enum GridError {
    #[error("io error reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("unknown bus id {0}")]
    UnknownBus(usize),
}

fn invalid(msg: impl Into<String>) -> GridError {
    GridError::Validation(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Phase {
    A,
    B,
    C,
}

impl Phase {
    pub const ALL: [Phase; 3] = [Phase::A, Phase::B, Phase::C];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_char(c: char) -> Option<Phase> {
        match c.to_ascii_uppercase() {
            'A' => Some(Phase::A),
            'B' => Some(Phase::B),
            'C' => Some(Phase::C),
            _ => None,
        }
    }

    /// Nominal angle of the balanced reference set: 0, -120, +120 degrees.
    pub fn nominal_angle(self) -> f64 {
        match self {
            Phase::A => 0.0,
            Phase::B => -2.0 * std::f64::consts::FRAC_PI_3,
            Phase::C => 2.0 * std::f64::consts::FRAC_PI_3,
        }
    }

    pub fn nominal_phasor(self, magnitude: f64) -> Complex64 {
        Complex64::from_polar(magnitude, self.nominal_angle())
    }

    pub fn letter(self) -> char {
        match self {
            Phase::A => 'A',
            Phase::B => 'B',
            Phase::C => 'C',
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.letter())
    }
}

/// Non-empty subset of {A, B, C}.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PhaseSet(u8);

impl PhaseSet {
    pub const ABC: PhaseSet = PhaseSet(0b111);

    pub fn new(phases: &[Phase]) -> Option<PhaseSet> {
        let bits = phases.iter().fold(0u8, |acc, p| acc | (1 << p.index()));
        (bits != 0).then_some(PhaseSet(bits))
    }

    pub fn single(phase: Phase) -> PhaseSet {
        PhaseSet(1 << phase.index())
    }

    pub fn parse(s: &str) -> Option<PhaseSet> {
        let mut bits = 0u8;
        for c in s.chars() {
            let bit = 1 << Phase::from_char(c)?.index();
            if bits & bit != 0 {
                return None;
            }
            bits |= bit;
        }
        (bits != 0).then_some(PhaseSet(bits))
    }

    pub fn contains(self, phase: Phase) -> bool {
        self.0 & (1 << phase.index()) != 0
    }

    pub fn is_subset_of(self, other: PhaseSet) -> bool {
        self.0 & !other.0 == 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    /// Phases in A, B, C order.
    pub fn iter(self) -> impl Iterator<Item = Phase> {
        Phase::ALL.into_iter().filter(move |p| self.contains(*p))
    }

    /// Position of `phase` within this set, in A, B, C order.
    pub fn position(self, phase: Phase) -> Option<usize> {
        self.iter().position(|p| p == phase)
    }
}

impl fmt::Display for PhaseSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for p in self.iter() {
            write!(f, "{p}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BusKind {
    Source,
    Load,
    ZeroInjection,
    Junction,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bus {
    /// Id used in the feeder file.
    pub label: u32,
    pub phases: PhaseSet,
    pub kind: BusKind,
    /// Line-to-neutral base voltage in volts.
    pub base_voltage: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub from: usize,
    pub to: usize,
    pub phases: PhaseSet,
    /// Series impedance in ohms, `|phases| x |phases|`, rows and columns in A, B, C order.
    pub impedance: DMatrix<Complex64>,
    /// Inverse of `impedance`.
    pub admittance: DMatrix<Complex64>,
}

impl Branch {
    pub fn other_end(&self, bus: usize) -> usize {
        if bus == self.from {
            self.to
        } else {
            self.from
        }
    }
}

/// Constant-power wye load.
#[derive(Debug, Clone, PartialEq)]
pub struct Load {
    pub bus: usize,
    pub phases: PhaseSet,
    /// Complex demand per phase (W + j var), aligned with `phases`.
    pub power: Vec<Complex64>,
}

impl Load {
    pub fn power_on(&self, phase: Phase) -> Option<Complex64> {
        self.phases.position(phase).map(|k| self.power[k])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeederModel {
    buses: Vec<Bus>,
    branches: Vec<Branch>,
    loads: Vec<Load>,
    source: usize,
    /// Per bus: `(neighbor, branch index)`.
    neighbors: Vec<Vec<(usize, usize)>>,
    /// Per bus: branch to its parent, `None` for the source.
    parent_branch: Vec<Option<usize>>,
    /// Buses in breadth-first order from the source.
    order: Vec<usize>,
}

impl FeederModel {
    /// Validates and assembles a feeder. Branch orientation is normalized so
    /// that `from` is the upstream bus.
    pub fn new(buses: Vec<Bus>, mut branches: Vec<Branch>, loads: Vec<Load>) -> Result<Self, GridError> {
        let n = buses.len();
        if n == 0 {
            return Err(invalid("feeder has no buses"));
        }

        let sources: Vec<usize> = (0..n).filter(|&i| buses[i].kind == BusKind::Source).collect();
        let source = match sources.as_slice() {
            [s] => *s,
            [] => return Err(invalid("no source bus")),
            _ => {
                let labels: Vec<u32> = sources.iter().map(|&i| buses[i].label).collect();
                return Err(invalid(format!("multiple sources: buses {labels:?}")));
            }
        };

        let base = buses[source].base_voltage;
        for bus in &buses {
            if !(bus.base_voltage > 0.0 && bus.base_voltage.is_finite()) {
                return Err(invalid(format!("bus {}: base voltage must be positive", bus.label)));
            }
            if (bus.base_voltage - base).abs() > 1e-9 * base {
                return Err(invalid(format!(
                    "bus {}: base voltage {} differs from feeder base {}",
                    bus.label, bus.base_voltage, base
                )));
            }
        }

        for (k, br) in branches.iter().enumerate() {
            if br.from >= n || br.to >= n {
                return Err(invalid(format!("branch {k}: endpoint out of range")));
            }
            let (f, t) = (&buses[br.from], &buses[br.to]);
            if !br.phases.is_subset_of(f.phases) || !br.phases.is_subset_of(t.phases) {
                return Err(invalid(format!(
                    "phase mismatch: branch {}-{} has phases {} but buses carry {} and {}",
                    f.label, t.label, br.phases, f.phases, t.phases
                )));
            }
            check_impedance(br, f.label, t.label)?;
        }

        if branches.len() + 1 != n {
            // Still report the more specific cause when we can find one.
            let mut uf = UnionFind::new(n);
            for br in &branches {
                if !uf.union(br.from, br.to) {
                    return Err(invalid(format!(
                        "cycle found through buses {} and {}",
                        buses[br.from].label, buses[br.to].label
                    )));
                }
            }
            return Err(invalid(format!(
                "disconnected bus: {} buses but {} branches",
                n,
                branches.len()
            )));
        }
        let mut uf = UnionFind::new(n);
        for br in &branches {
            if !uf.union(br.from, br.to) {
                return Err(invalid(format!(
                    "cycle found through buses {} and {}",
                    buses[br.from].label, buses[br.to].label
                )));
            }
        }

        let mut neighbors = vec![Vec::new(); n];
        for (k, br) in branches.iter().enumerate() {
            neighbors[br.from].push((br.to, k));
            neighbors[br.to].push((br.from, k));
        }

        let mut parent_branch = vec![None; n];
        let mut seen = vec![false; n];
        let mut order = Vec::with_capacity(n);
        let mut queue = VecDeque::from([source]);
        seen[source] = true;
        while let Some(b) = queue.pop_front() {
            order.push(b);
            for &(m, k) in &neighbors[b] {
                if !seen[m] {
                    seen[m] = true;
                    parent_branch[m] = Some(k);
                    let br = &mut branches[k];
                    if br.from != b {
                        std::mem::swap(&mut br.from, &mut br.to);
                    }
                    queue.push_back(m);
                }
            }
        }
        if let Some(lost) = (0..n).find(|&i| !seen[i]) {
            return Err(invalid(format!("disconnected bus {}", buses[lost].label)));
        }
        for (i, bus) in buses.iter().enumerate() {
            if let Some(k) = parent_branch[i] {
                if branches[k].phases != bus.phases {
                    return Err(invalid(format!(
                        "phase mismatch: bus {} carries {} but its upstream branch supplies {}",
                        bus.label, bus.phases, branches[k].phases
                    )));
                }
            }
        }

        for load in &loads {
            let bus = buses
                .get(load.bus)
                .ok_or_else(|| invalid(format!("load on unknown bus index {}", load.bus)))?;
            if load.power.len() != load.phases.len() {
                return Err(invalid(format!("load at bus {}: power entries do not match phases", bus.label)));
            }
            if !load.phases.is_subset_of(bus.phases) {
                return Err(invalid(format!(
                    "phase mismatch: load at bus {} has phases {} but bus carries {}",
                    bus.label, load.phases, bus.phases
                )));
            }
            if bus.kind != BusKind::Load {
                return Err(invalid(format!(
                    "load attached to bus {} of kind {:?}; only load buses may carry loads",
                    bus.label, bus.kind
                )));
            }
            if load.power.iter().any(|s| !s.re.is_finite() || !s.im.is_finite()) {
                return Err(invalid(format!("load at bus {}: non-finite power", bus.label)));
            }
        }

        Ok(FeederModel {
            buses,
            branches,
            loads,
            source,
            neighbors,
            parent_branch,
            order,
        })
    }

    pub fn buses(&self) -> &[Bus] {
        &self.buses
    }

    pub fn branches(&self) -> &[Branch] {
        &self.branches
    }

    pub fn loads(&self) -> &[Load] {
        &self.loads
    }

    pub fn bus_count(&self) -> usize {
        self.buses.len()
    }

    pub fn source(&self) -> usize {
        self.source
    }

    pub fn base_voltage(&self) -> f64 {
        self.buses[self.source].base_voltage
    }

    /// Internal index of the bus with file id `label`.
    pub fn bus_index(&self, label: u32) -> Option<usize> {
        self.buses.iter().position(|b| b.label == label)
    }

    pub fn label(&self, bus: usize) -> u32 {
        self.buses[bus].label
    }

    pub fn neighbors(&self, bus: usize) -> &[(usize, usize)] {
        &self.neighbors[bus]
    }

    pub fn parent_branch(&self, bus: usize) -> Option<usize> {
        self.parent_branch[bus]
    }

    /// Buses in breadth-first order from the source; parents precede children.
    pub fn bfs_order(&self) -> &[usize] {
        &self.order
    }

    /// Branch joining `a` and `b`, if any.
    pub fn branch_between(&self, a: usize, b: usize) -> Option<usize> {
        self.neighbors
            .get(a)?
            .iter()
            .find(|&&(m, _)| m == b)
            .map(|&(_, k)| k)
    }

    /// Summed nominal demand per phase at `bus`, indexed by [`Phase::index`].
    pub fn nominal_load(&self, bus: usize) -> [Complex64; 3] {
        let mut total = [Complex64::new(0.0, 0.0); 3];
        for load in self.loads.iter().filter(|l| l.bus == bus) {
            for (p, s) in load.phases.iter().zip(&load.power) {
                total[p.index()] += s;
            }
        }
        total
    }

    /// Buses with at least one attached load, ascending.
    pub fn load_buses(&self) -> Vec<usize> {
        let mut out: Vec<usize> = self.loads.iter().map(|l| l.bus).collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    /// Sum of nominal apparent power over all loads and phases, in VA.
    pub fn power_base(&self) -> f64 {
        self.loads.iter().flat_map(|l| l.power.iter()).map(|s| s.norm()).sum()
    }

    /// Boolean `N x N` pattern: `(i, j)` set iff `i == j` or a branch joins them.
    pub fn adjacency_pattern(&self) -> Vec<Vec<bool>> {
        let n = self.bus_count();
        let mut pattern = vec![vec![false; n]; n];
        for (i, row) in pattern.iter_mut().enumerate() {
            row[i] = true;
            for &(j, _) in &self.neighbors[i] {
                row[j] = true;
            }
        }
        pattern
    }

    /// Hop count of the unique tree path between `a` and `b`.
    pub fn graph_distance(&self, a: usize, b: usize) -> Result<usize, GridError> {
        let n = self.bus_count();
        if a >= n {
            return Err(GridError::UnknownBus(a));
        }
        if b >= n {
            return Err(GridError::UnknownBus(b));
        }
        Ok(self.distances_from(a)[b])
    }

    /// Hop counts from `start` to every bus.
    pub fn distances_from(&self, start: usize) -> Vec<usize> {
        let n = self.bus_count();
        let mut dist = vec![usize::MAX; n];
        dist[start] = 0;
        let mut queue = VecDeque::from([start]);
        while let Some(b) = queue.pop_front() {
            for &(m, _) in &self.neighbors[b] {
                if dist[m] == usize::MAX {
                    dist[m] = dist[b] + 1;
                    queue.push_back(m);
                }
            }
        }
        dist
    }
}

fn check_impedance(br: &Branch, from: u32, to: u32) -> Result<(), GridError> {
    let k = br.phases.len();
    let z = &br.impedance;
    if z.nrows() != k || z.ncols() != k {
        return Err(invalid(format!(
            "branch {from}-{to}: impedance must be {k}x{k} for phases {}",
            br.phases
        )));
    }
    for i in 0..k {
        if !(z[(i, i)].re > 0.0) {
            return Err(invalid(format!(
                "branch {from}-{to}: diagonal impedance entries need positive resistance"
            )));
        }
        for j in 0..k {
            let (a, b) = (z[(i, j)], z[(j, i)]);
            if !a.re.is_finite() || !a.im.is_finite() {
                return Err(invalid(format!("branch {from}-{to}: non-finite impedance")));
            }
            if (a - b).norm() > 1e-12 * (1.0 + a.norm()) {
                return Err(invalid(format!("branch {from}-{to}: impedance matrix is not symmetric")));
            }
        }
    }
    if br.admittance.nrows() != k || br.admittance.iter().any(|y| !y.re.is_finite() || !y.im.is_finite()) {
        return Err(invalid(format!("branch {from}-{to}: impedance matrix is singular")));
    }
    Ok(())
}

/// Builds a branch, inverting the impedance. A singular impedance yields an
/// admittance of the wrong shape, which validation rejects.
pub fn branch(from: usize, to: usize, phases: PhaseSet, impedance: DMatrix<Complex64>) -> Branch {
    let admittance = impedance.clone().try_inverse().unwrap_or_else(|| DMatrix::zeros(0, 0));
    Branch {
        from,
        to,
        phases,
        impedance,
        admittance,
    }
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind { parent: (0..n).collect() }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    /// Returns false when `a` and `b` were already joined.
    fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        self.parent[ra] = rb;
        true
    }
}
