//! Feeder description files.
//!
//! Feeders are TOML documents with three arrays of tables. Unknown keys are
//! rejected everywhere.
//!
//! ```toml
//! [[buses]]
//! id = 1                 # any unsigned integer, unique
//! phases = "ABC"         # non-empty subset of "ABC"
//! kind = "source"        # source | load | zero_injection | junction
//! base_voltage_v = 2400.0  # line-to-neutral, identical for every bus
//!
//! [[branches]]
//! from = 1
//! to = 2
//! phases = "ABC"
//! # row-major |phases| x |phases| matrix of [r_ohm, x_ohm] pairs
//! impedance = [
//!   [[0.2, 0.4], [0.0, 0.0], [0.0, 0.0]],
//!   [[0.0, 0.0], [0.2, 0.4], [0.0, 0.0]],
//!   [[0.0, 0.0], [0.0, 0.0], [0.2, 0.4]],
//! ]
//!
//! [[loads]]
//! bus = 2
//! phases = "AB"
//! power = [[60000.0, 25000.0], [55000.0, 20000.0]]  # [p_w, q_var] per phase
//! ```

use std::collections::HashMap;
use std::path::Path;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::{branch, Bus, BusKind, FeederModel, GridError, Load, PhaseSet};

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FeederFile {
    buses: Vec<BusEntry>,
    #[serde(default)]
    branches: Vec<BranchEntry>,
    #[serde(default)]
    loads: Vec<LoadEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BusEntry {
    id: u32,
    phases: String,
    kind: BusKind,
    base_voltage_v: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BranchEntry {
    from: u32,
    to: u32,
    phases: String,
    impedance: Vec<Vec<[f64; 2]>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LoadEntry {
    bus: u32,
    phases: String,
    power: Vec<[f64; 2]>,
}

pub fn load_feeder(path: impl AsRef<Path>) -> Result<FeederModel, GridError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| GridError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_feeder(&text)
}

pub fn parse_feeder(text: &str) -> Result<FeederModel, GridError> {
    let file: FeederFile = toml::from_str(text).map_err(|e| GridError::Parse(e.to_string()))?;

    let mut index = HashMap::new();
    let mut buses = Vec::with_capacity(file.buses.len());
    for (i, b) in file.buses.iter().enumerate() {
        if index.insert(b.id, i).is_some() {
            return Err(GridError::Validation(format!("duplicate bus id {}", b.id)));
        }
        buses.push(Bus {
            label: b.id,
            phases: phases(&b.phases, || format!("bus {}", b.id))?,
            kind: b.kind,
            base_voltage: b.base_voltage_v,
        });
    }
    let lookup = |id: u32, what: &str| {
        index
            .get(&id)
            .copied()
            .ok_or_else(|| GridError::Validation(format!("{what} references unknown bus {id}")))
    };

    let mut branches = Vec::with_capacity(file.branches.len());
    for br in &file.branches {
        let name = || format!("branch {}-{}", br.from, br.to);
        let ph = phases(&br.phases, name)?;
        let k = ph.len();
        if br.impedance.len() != k || br.impedance.iter().any(|row| row.len() != k) {
            return Err(GridError::Validation(format!(
                "{}: impedance must be {k}x{k} for phases {ph}",
                name()
            )));
        }
        let z = DMatrix::from_fn(k, k, |i, j| {
            let [r, x] = br.impedance[i][j];
            Complex64::new(r, x)
        });
        branches.push(branch(lookup(br.from, "branch")?, lookup(br.to, "branch")?, ph, z));
    }

    let mut loads = Vec::with_capacity(file.loads.len());
    for l in &file.loads {
        let ph = phases(&l.phases, || format!("load at bus {}", l.bus))?;
        if l.power.len() != ph.len() {
            return Err(GridError::Validation(format!(
                "load at bus {}: {} power entries for phases {ph}",
                l.bus,
                l.power.len()
            )));
        }
        loads.push(Load {
            bus: lookup(l.bus, "load")?,
            phases: ph,
            power: l.power.iter().map(|&[p, q]| Complex64::new(p, q)).collect(),
        });
    }

    FeederModel::new(buses, branches, loads)
}

/// SHA-256 of the canonical serialization, hex encoded. Two files that load
/// to the same model hash the same.
pub fn feeder_hash(model: &FeederModel) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(to_feeder_string(model).as_bytes()))
}

/// Serializes a model back to the feeder schema. Branches are written in
/// their normalized (upstream to downstream) orientation.
pub fn to_feeder_string(model: &FeederModel) -> String {
    let file = FeederFile {
        buses: model
            .buses()
            .iter()
            .map(|b| BusEntry {
                id: b.label,
                phases: b.phases.to_string(),
                kind: b.kind,
                base_voltage_v: b.base_voltage,
            })
            .collect(),
        branches: model
            .branches()
            .iter()
            .map(|br| BranchEntry {
                from: model.label(br.from),
                to: model.label(br.to),
                phases: br.phases.to_string(),
                impedance: (0..br.impedance.nrows())
                    .map(|i| {
                        (0..br.impedance.ncols())
                            .map(|j| [br.impedance[(i, j)].re, br.impedance[(i, j)].im])
                            .collect()
                    })
                    .collect(),
            })
            .collect(),
        loads: model
            .loads()
            .iter()
            .map(|l| LoadEntry {
                bus: model.label(l.bus),
                phases: l.phases.to_string(),
                power: l.power.iter().map(|s| [s.re, s.im]).collect(),
            })
            .collect(),
    };
    toml::to_string(&file).expect("feeder schema always serializes")
}

fn phases(s: &str, owner: impl Fn() -> String) -> Result<PhaseSet, GridError> {
    PhaseSet::parse(s).ok_or_else(|| GridError::Parse(format!("{}: invalid phase set {s:?}", owner())))
}

#[cfg(test)]
mod tests {
    use super::*;

    const TWO_BUS: &str = r#"
[[buses]]
id = 10
phases = "A"
kind = "source"
base_voltage_v = 2400.0

[[buses]]
id = 20
phases = "A"
kind = "load"
base_voltage_v = 2400.0

[[branches]]
from = 20
to = 10
phases = "A"
impedance = [[[1.0, 0.0]]]

[[loads]]
bus = 20
phases = "A"
power = [[100000.0, 0.0]]
"#;

    #[test]
    fn parses_and_normalizes() {
        let m = parse_feeder(TWO_BUS).unwrap();
        assert_eq!(m.bus_count(), 2);
        assert_eq!(m.branches()[0].from, 0);
        assert_eq!(m.nominal_load(1)[0], Complex64::new(1e5, 0.0));
    }

    #[test]
    fn rejects_unknown_keys() {
        let text = TWO_BUS.replace("kind = \"load\"", "kind = \"load\"\ncolor = \"red\"");
        assert!(matches!(parse_feeder(&text), Err(GridError::Parse(_))));
        let text = format!("title = \"x\"\n{TWO_BUS}");
        assert!(matches!(parse_feeder(&text), Err(GridError::Parse(_))));
    }

    #[test]
    fn rejects_malformed() {
        assert!(matches!(parse_feeder("[[buses]\n"), Err(GridError::Parse(_))));
        let text = TWO_BUS.replace("phases = \"A\"\nkind = \"load\"", "phases = \"X\"\nkind = \"load\"");
        assert!(matches!(parse_feeder(&text), Err(GridError::Parse(_))));
        let text = TWO_BUS.replace("from = 20", "from = 99");
        assert!(parse_feeder(&text).unwrap_err().to_string().contains("unknown bus 99"));
    }

    #[test]
    fn round_trip() {
        let m = parse_feeder(TWO_BUS).unwrap();
        let again = parse_feeder(&to_feeder_string(&m)).unwrap();
        assert_eq!(m, again);
    }
}
