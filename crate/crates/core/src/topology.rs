//! Vertex-cut partitioning at PMU buses and the layer masks derived from it.
//!
//! Removing the PMU buses splits the tree into components; each component,
//! together with the PMU buses adjacent to it, is one partition. A branch
//! joining two PMU buses forms a two-bus partition of its own.
//!
//! Layer `t` of a network (1-based) is `k_t = act(W_t k_{t-1} + b_t)` with
//! `k_0` the embedded input. `masks[t - 1]` is the bus-level pattern of `W_t`:
//! entry `(i, j)` lets bus `i` at layer `t` read bus `j` at layer `t - 1`.
//! A partition is resolved once `depth` layers have run, where `depth` is its
//! hop diameter but never less than two; later layers drop the connections
//! it alone needed, and its buses read out at layer `depth`.

use std::collections::{BTreeSet, VecDeque};
use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::grid::FeederModel;

#[derive(Debug, Error)]
pub enum TopologyError {
    #[error("at least one PMU bus is required")]
    NoPmu,
    #[error("bus index {0} does not exist")]
    UnknownBus(usize),
    #[error("block width must be at least 1")]
    ZeroWidth,
    #[error("mask plan file line {line}: {reason}")]
    Format { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    /// Ascending bus indices.
    pub buses: Vec<usize>,
    /// The PMU buses among `buses`, ascending.
    pub pmu_buses: Vec<usize>,
    /// Longest shortest path, in hops, inside the induced subgraph.
    pub diameter: usize,
    /// Layers needed to resolve the partition: `max(diameter, 2)`. A single
    /// branch hanging off a PMU still gets two layers before its readout.
    pub depth: usize,
}

impl Partition {
    pub fn contains(&self, bus: usize) -> bool {
        self.buses.binary_search(&bus).is_ok()
    }
}

pub fn partition_at_pmus(model: &FeederModel, pmu_buses: &[usize]) -> Result<Vec<Partition>, TopologyError> {
    if pmu_buses.is_empty() {
        return Err(TopologyError::NoPmu);
    }
    let n = model.bus_count();
    if let Some(&bad) = pmu_buses.iter().find(|&&b| b >= n) {
        return Err(TopologyError::UnknownBus(bad));
    }
    let mut is_pmu = vec![false; n];
    for &b in pmu_buses {
        is_pmu[b] = true;
    }

    let mut groups: Vec<BTreeSet<usize>> = Vec::new();
    let mut seen = vec![false; n];
    for start in 0..n {
        if is_pmu[start] || seen[start] {
            continue;
        }
        let mut group = BTreeSet::new();
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        while let Some(b) = queue.pop_front() {
            group.insert(b);
            for &(m, _) in model.neighbors(b) {
                if is_pmu[m] {
                    group.insert(m);
                } else if !seen[m] {
                    seen[m] = true;
                    queue.push_back(m);
                }
            }
        }
        groups.push(group);
    }
    for br in model.branches() {
        if is_pmu[br.from] && is_pmu[br.to] {
            groups.push(BTreeSet::from([br.from, br.to]));
        }
    }
    if n == 1 {
        groups.push(BTreeSet::from([0]));
    }

    let mut parts: Vec<Partition> = groups
        .into_iter()
        .map(|g| {
            let buses: Vec<usize> = g.into_iter().collect();
            let pmu: Vec<usize> = buses.iter().copied().filter(|&b| is_pmu[b]).collect();
            let diameter = induced_diameter(model, &buses);
            Partition {
                diameter,
                depth: resolution_depth(diameter),
                buses,
                pmu_buses: pmu,
            }
        })
        .collect();
    parts.sort_by(|a, b| a.buses.cmp(&b.buses));
    Ok(parts)
}

/// Diameters of `partitions`, recomputed on each induced subgraph.
pub fn partition_diameters(partitions: &[Partition], model: &FeederModel) -> Vec<usize> {
    partitions.iter().map(|p| induced_diameter(model, &p.buses)).collect()
}

pub fn resolution_depth(diameter: usize) -> usize {
    diameter.max(2)
}

fn induced_diameter(model: &FeederModel, buses: &[usize]) -> usize {
    let inside = |b: usize| buses.binary_search(&b).is_ok();
    let mut best = 0;
    let mut dist = vec![usize::MAX; model.bus_count()];
    for &s in buses {
        for &b in buses {
            dist[b] = usize::MAX;
        }
        dist[s] = 0;
        let mut queue = VecDeque::from([s]);
        while let Some(b) = queue.pop_front() {
            best = best.max(dist[b]);
            for &(m, _) in model.neighbors(b) {
                if inside(m) && dist[m] == usize::MAX {
                    dist[m] = dist[b] + 1;
                    queue.push_back(m);
                }
            }
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanKind {
    /// Every layer follows the feeder adjacency; all buses read out at the last layer.
    Pawnn,
    /// Layers drop connections of resolved partitions; buses read out early.
    P2n2,
}

impl fmt::Display for PlanKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PlanKind::Pawnn => "pawnn",
            PlanKind::P2n2 => "p2n2",
        })
    }
}

impl std::str::FromStr for PlanKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "pawnn" => Ok(PlanKind::Pawnn),
            "p2n2" => Ok(PlanKind::P2n2),
            _ => Err(format!("unknown plan kind {s:?} (expected pawnn or p2n2)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub kind: PlanKind,
    /// Number of hidden layers `T`, the largest partition depth.
    pub depth: usize,
    /// Hidden channels per bus.
    pub block_width: usize,
    /// `masks[t]` is the `N x N` pattern of layer `t + 1`.
    pub masks: Vec<Vec<Vec<bool>>>,
    /// Layer (1..=depth) whose activations feed each bus's readout.
    pub exit_layer: Vec<usize>,
    /// Output magnitudes per bus (its phase count).
    pub outputs: Vec<usize>,
    /// PMU buses the partitions were cut at, ascending.
    pub pmu_buses: Vec<usize>,
}

/// Pruned plan: connections of a partition stop after `depth` layers and its
/// buses read out there. The diagonal is kept at every layer.
pub fn build_mask_plan(model: &FeederModel, partitions: &[Partition], block_width: usize) -> Result<MaskPlan, TopologyError> {
    if block_width == 0 {
        return Err(TopologyError::ZeroWidth);
    }
    let n = model.bus_count();
    let depth = partitions.iter().map(|p| p.depth).max().unwrap_or(2);
    let adjacency = model.adjacency_pattern();
    let masks = (1..=depth)
        .map(|t| {
            let mut mask = vec![vec![false; n]; n];
            for (i, row) in mask.iter_mut().enumerate() {
                row[i] = true;
            }
            for p in partitions.iter().filter(|p| t <= p.depth) {
                for &i in &p.buses {
                    for &j in &p.buses {
                        if adjacency[i][j] {
                            mask[i][j] = true;
                        }
                    }
                }
            }
            mask
        })
        .collect();
    let mut exit_layer = vec![1; n];
    for p in partitions {
        for &b in &p.buses {
            exit_layer[b] = exit_layer[b].max(p.depth);
        }
    }
    Ok(MaskPlan {
        kind: PlanKind::P2n2,
        depth,
        block_width,
        masks,
        exit_layer,
        outputs: model.buses().iter().map(|b| b.phases.len()).collect(),
        pmu_buses: partitions
            .iter()
            .flat_map(|p| p.pmu_buses.iter().copied())
            .collect::<BTreeSet<usize>>()
            .into_iter()
            .collect(),
    })
}

/// Unpruned plan of the same depth: adjacency at every layer, all buses exit at `T`.
pub fn pawnn_plan(model: &FeederModel, partitions: &[Partition], block_width: usize) -> Result<MaskPlan, TopologyError> {
    let pruned = build_mask_plan(model, partitions, block_width)?;
    Ok(pruned.unpruned())
}

impl MaskPlan {
    /// Partitions the feeder at `pmu_buses` and builds the plan of the given kind.
    pub fn for_pmus(model: &FeederModel, pmu_buses: &[usize], kind: PlanKind, block_width: usize) -> Result<MaskPlan, TopologyError> {
        let parts = partition_at_pmus(model, pmu_buses)?;
        match kind {
            PlanKind::P2n2 => build_mask_plan(model, &parts, block_width),
            PlanKind::Pawnn => pawnn_plan(model, &parts, block_width),
        }
    }

    pub fn bus_count(&self) -> usize {
        self.exit_layer.len()
    }

    /// The PAWNN counterpart: layer-1 pattern repeated, every bus exiting at `T`.
    pub fn unpruned(&self) -> MaskPlan {
        MaskPlan {
            kind: PlanKind::Pawnn,
            depth: self.depth,
            block_width: self.block_width,
            masks: vec![self.masks[0].clone(); self.depth],
            exit_layer: vec![self.depth; self.bus_count()],
            outputs: self.outputs.clone(),
            pmu_buses: self.pmu_buses.clone(),
        }
    }

    /// Allowed `(to, from)` bus pairs of layer `t` (1-based).
    pub fn allowed(&self, t: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.masks[t - 1]
            .iter()
            .enumerate()
            .flat_map(|(i, row)| row.iter().enumerate().filter(|(_, &a)| a).map(move |(j, _)| (i, j)))
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("plan serializes");
        hex::encode(Sha256::digest(&json))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCount {
    /// 1-based layer index.
    pub layer: usize,
    pub pawnn_weights: usize,
    pub p2n2_weights: usize,
    pub biases: usize,
    /// Buses reading out from this layer.
    pub pawnn_readouts: usize,
    pub p2n2_readouts: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub pawnn_params: usize,
    pub p2n2_params: usize,
    pub per_layer: Vec<LayerCount>,
}

/// Weights (`F^2` per allowed bus pair) plus biases (`F` per bus and layer)
/// plus the per-bus linear readouts, for the plan and its unpruned form.
pub fn count_params(plan: &MaskPlan) -> ParamCount {
    let f = plan.block_width;
    let n = plan.bus_count();
    let pawnn = plan.unpruned();
    let readout: usize = plan.outputs.iter().map(|&k| k * f + k).sum();
    let mut per_layer = Vec::with_capacity(plan.depth);
    let (mut pawnn_params, mut p2n2_params) = (readout, readout);
    for t in 1..=plan.depth {
        let count = |p: &MaskPlan| p.masks[t - 1].iter().flatten().filter(|&&a| a).count() * f * f;
        let exits = |p: &MaskPlan| p.exit_layer.iter().filter(|&&e| e == t).count();
        let row = LayerCount {
            layer: t,
            pawnn_weights: count(&pawnn),
            p2n2_weights: count(plan),
            biases: n * f,
            pawnn_readouts: exits(&pawnn),
            p2n2_readouts: exits(plan),
        };
        pawnn_params += row.pawnn_weights + row.biases;
        p2n2_params += row.p2n2_weights + row.biases;
        per_layer.push(row);
    }
    ParamCount {
        pawnn_params,
        p2n2_params,
        per_layer,
    }
}

/// Writes the plan as plain text using feeder bus ids:
///
/// ```text
/// kind p2n2
/// depth 3
/// block_width 8
/// mask <layer> <from> <to>     one line per allowed pair
/// exit <bus> <layer>           one line per bus
/// outputs <bus> <count>        one line per bus
/// pmu <bus>                    one line per PMU bus
/// ```
pub fn write_mask_plan<W: Write>(model: &FeederModel, plan: &MaskPlan, mut out: W) -> Result<(), TopologyError> {
    writeln!(out, "kind {}", plan.kind)?;
    writeln!(out, "depth {}", plan.depth)?;
    writeln!(out, "block_width {}", plan.block_width)?;
    for t in 1..=plan.depth {
        for (to, from) in plan.allowed(t) {
            writeln!(out, "mask {t} {} {}", model.label(from), model.label(to))?;
        }
    }
    for (b, e) in plan.exit_layer.iter().enumerate() {
        writeln!(out, "exit {} {e}", model.label(b))?;
    }
    for (b, k) in plan.outputs.iter().enumerate() {
        writeln!(out, "outputs {} {k}", model.label(b))?;
    }
    for &b in &plan.pmu_buses {
        writeln!(out, "pmu {}", model.label(b))?;
    }
    Ok(())
}

pub fn read_mask_plan<R: BufRead>(model: &FeederModel, input: R) -> Result<MaskPlan, TopologyError> {
    let n = model.bus_count();
    let mut kind = None;
    let mut depth = None;
    let mut width = None;
    let mut entries = Vec::new();
    let mut exit_layer = vec![0; n];
    let mut outputs = vec![0; n];
    let mut pmu_buses = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        let bad = |reason: &str| TopologyError::Format {
            line: i + 1,
            reason: reason.to_string(),
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad(&format!("bad number {s:?}")));
        let bus = |s: &str| {
            s.parse::<u32>()
                .ok()
                .and_then(|l| model.bus_index(l))
                .ok_or_else(|| bad(&format!("unknown bus {s:?}")))
        };
        match fields.as_slice() {
            [] => {}
            ["kind", k] => kind = Some(k.parse::<PlanKind>().map_err(|e| bad(&e))?),
            ["depth", d] => depth = Some(num(d)?),
            ["block_width", f] => width = Some(num(f)?),
            ["mask", t, from, to] => entries.push((num(t)?, bus(to)?, bus(from)?)),
            ["exit", b, e] => exit_layer[bus(b)?] = num(e)?,
            ["outputs", b, k] => outputs[bus(b)?] = num(k)?,
            ["pmu", b] => pmu_buses.push(bus(b)?),
            _ => return Err(bad("unrecognized line")),
        }
    }
    let missing = |what: &str| TopologyError::Format {
        line: 0,
        reason: format!("missing {what}"),
    };
    let depth = depth.ok_or_else(|| missing("depth"))?;
    let mut masks = vec![vec![vec![false; n]; n]; depth];
    for (t, to, from) in entries {
        if t == 0 || t > depth {
            return Err(TopologyError::Format {
                line: 0,
                reason: format!("layer {t} outside 1..={depth}"),
            });
        }
        masks[t - 1][to][from] = true;
    }
    Ok(MaskPlan {
        kind: kind.ok_or_else(|| missing("kind"))?,
        depth,
        block_width: width.ok_or_else(|| missing("block_width"))?,
        masks,
        exit_layer,
        outputs,
        pmu_buses,
    })
}
