//! Measurement planning, the measurement function `h(x)`, its Jacobian, and
//! noisy synthesis `z = h(x) + e`.
//!
//! Row order of a planned set is fixed:
//! 1. for each PMU bus in ascending index: `v_real`, `v_imag` per phase, then
//!    for each incident branch (ascending branch index) `i_real`, `i_imag` per
//!    branch phase, measured as current flowing out of the PMU bus;
//! 2. for each load or zero-injection bus in ascending index: `p_injection`,
//!    `q_injection` per bus phase.
//!
//! Injections use the generator convention: a bus consuming power reports a
//! negative injection. Noise is Gaussian with `sigma = max_error / 3`; PMU
//! magnitude/angle limits are propagated to the rectangular components to
//! first order.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{BusKind, FeederModel, Phase};
use crate::state::{StateLayout, StateVector};

#[derive(Debug, Error)]
pub enum MeasurementError {
    #[error("at least one PMU bus is required")]
    NoPmu,
    #[error("PMU bus index {0} does not exist")]
    InvalidPmuBus(usize),
    #[error("metered bus index {0} is not a load bus")]
    NotALoadBus(usize),
    #[error("measurement row {row} does not fit the feeder: {reason}")]
    Misaligned { row: usize, reason: String },
    #[error("measurement file: {0}")]
    Format(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeasurementKind {
    VReal,
    VImag,
    IReal,
    IImag,
    PInjection,
    QInjection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseClass {
    PmuVoltage,
    PmuCurrent,
    SmartMeterPower,
    PseudoPower,
    ZeroInjection,
}

impl NoiseClass {
    pub fn is_pmu(self) -> bool {
        matches!(self, NoiseClass::PmuVoltage | NoiseClass::PmuCurrent)
    }
}

/// Where a measurement is taken. Currents are measured on `branch` as the
/// current leaving bus `at`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Locus {
    Bus(usize),
    Branch { branch: usize, at: usize },
}

impl Locus {
    /// Bus the measurement is attached to.
    pub fn bus(self) -> usize {
        match self {
            Locus::Bus(b) => b,
            Locus::Branch { at, .. } => at,
        }
    }
}

/// Maximum errors per class: relative fractions, except the PMU angle in radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseLevels {
    pub pmu_magnitude: f64,
    pub pmu_angle: f64,
    pub smart_meter: f64,
    pub pseudo: f64,
    pub zero_injection: f64,
}

impl Default for NoiseLevels {
    fn default() -> Self {
        NoiseLevels {
            pmu_magnitude: 0.01,
            pmu_angle: 0.01,
            smart_meter: 0.02,
            pseudo: 0.5,
            zero_injection: 1e-5,
        }
    }
}

impl NoiseLevels {
    pub fn with_pseudo(pseudo: f64) -> Self {
        NoiseLevels {
            pseudo,
            ..Self::default()
        }
    }

    /// Every class at zero: synthesis reproduces `h(x)` exactly.
    pub fn noiseless() -> Self {
        NoiseLevels {
            pmu_magnitude: 0.0,
            pmu_angle: 0.0,
            smart_meter: 0.0,
            pseudo: 0.0,
            zero_injection: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub kind: MeasurementKind,
    pub locus: Locus,
    pub phase: Phase,
    pub class: NoiseClass,
    /// SI units: volts, amps, watts or vars. Zero in an unsynthesized template.
    pub value: f64,
    /// Diagonal entry of R, squared units. Zero in an unsynthesized template.
    pub variance: f64,
}

impl Measurement {
    /// Kind, locus and phase; the part of a row that must match between a
    /// template and data produced from it.
    pub fn key(&self) -> (MeasurementKind, Locus, Phase) {
        (self.kind, self.locus, self.phase)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementSet {
    pub rows: Vec<Measurement>,
    pub levels: NoiseLevels,
}

impl MeasurementSet {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn values(&self) -> Vec<f64> {
        self.rows.iter().map(|m| m.value).collect()
    }

    pub fn variances(&self) -> Vec<f64> {
        self.rows.iter().map(|m| m.variance).collect()
    }

    /// True when both sets have the same kinds, loci and phases in the same order.
    pub fn same_layout(&self, other: &MeasurementSet) -> bool {
        self.rows.len() == other.rows.len() && self.rows.iter().zip(&other.rows).all(|(a, b)| a.key() == b.key())
    }

    /// Copy of the template carrying `values` and `variances`.
    pub fn with_data(&self, values: &[f64], variances: &[f64]) -> MeasurementSet {
        assert_eq!(values.len(), self.rows.len());
        assert_eq!(variances.len(), self.rows.len());
        let rows = self
            .rows
            .iter()
            .zip(values.iter().zip(variances))
            .map(|(m, (&value, &variance))| Measurement { value, variance, ..m.clone() })
            .collect();
        MeasurementSet { rows, levels: self.levels }
    }
}

pub fn plan_measurements(
    model: &FeederModel,
    pmu_buses: &[usize],
    metered_loads: &[usize],
    pseudo_noise: f64,
) -> Result<MeasurementSet, MeasurementError> {
    plan_with_levels(model, pmu_buses, metered_loads, NoiseLevels::with_pseudo(pseudo_noise))
}

pub fn plan_with_levels(
    model: &FeederModel,
    pmu_buses: &[usize],
    metered_loads: &[usize],
    levels: NoiseLevels,
) -> Result<MeasurementSet, MeasurementError> {
    if pmu_buses.is_empty() {
        return Err(MeasurementError::NoPmu);
    }
    let n = model.bus_count();
    if let Some(&bad) = pmu_buses.iter().find(|&&b| b >= n) {
        return Err(MeasurementError::InvalidPmuBus(bad));
    }
    let load_buses = model.load_buses();
    if let Some(&bad) = metered_loads.iter().find(|b| !load_buses.contains(b)) {
        return Err(MeasurementError::NotALoadBus(bad));
    }

    let mut pmus = pmu_buses.to_vec();
    pmus.sort_unstable();
    pmus.dedup();

    let row = |kind, locus, phase, class| Measurement {
        kind,
        locus,
        phase,
        class,
        value: 0.0,
        variance: 0.0,
    };
    let mut rows = Vec::new();
    for &b in &pmus {
        for p in model.buses()[b].phases.iter() {
            rows.push(row(MeasurementKind::VReal, Locus::Bus(b), p, NoiseClass::PmuVoltage));
            rows.push(row(MeasurementKind::VImag, Locus::Bus(b), p, NoiseClass::PmuVoltage));
        }
        let mut incident: Vec<usize> = model.neighbors(b).iter().map(|&(_, k)| k).collect();
        incident.sort_unstable();
        for k in incident {
            let locus = Locus::Branch { branch: k, at: b };
            for p in model.branches()[k].phases.iter() {
                rows.push(row(MeasurementKind::IReal, locus, p, NoiseClass::PmuCurrent));
                rows.push(row(MeasurementKind::IImag, locus, p, NoiseClass::PmuCurrent));
            }
        }
    }
    for (b, bus) in model.buses().iter().enumerate() {
        let nominal = model.nominal_load(b);
        let classify = |p: Phase| match bus.kind {
            BusKind::ZeroInjection => Some(NoiseClass::ZeroInjection),
            BusKind::Load if nominal[p.index()] == Complex64::new(0.0, 0.0) && !has_load_on(model, b, p) => {
                Some(NoiseClass::ZeroInjection)
            }
            BusKind::Load if metered_loads.contains(&b) => Some(NoiseClass::SmartMeterPower),
            BusKind::Load => Some(NoiseClass::PseudoPower),
            BusKind::Source | BusKind::Junction => None,
        };
        for p in bus.phases.iter() {
            if let Some(class) = classify(p) {
                rows.push(row(MeasurementKind::PInjection, Locus::Bus(b), p, class));
                rows.push(row(MeasurementKind::QInjection, Locus::Bus(b), p, class));
            }
        }
    }
    Ok(MeasurementSet { rows, levels })
}

fn has_load_on(model: &FeederModel, bus: usize, phase: Phase) -> bool {
    model.loads().iter().any(|l| l.bus == bus && l.phases.contains(phase))
}

/// Linear combination `sum c_j V_j` of complex state slots.
#[derive(Debug, Clone)]
struct Current {
    terms: Vec<(usize, Complex64)>,
}

impl Current {
    fn eval(&self, x: &[f64]) -> Complex64 {
        self.terms
            .iter()
            .map(|&(j, c)| c * Complex64::new(x[2 * j], x[2 * j + 1]))
            .sum()
    }
}

#[derive(Debug, Clone)]
enum Row {
    Component(usize),
    CurrentRe(Current),
    CurrentIm(Current),
    P { slot: usize, current: Current },
    Q { slot: usize, current: Current },
}

/// A measurement template compiled against a feeder for repeated evaluation
/// of `h(x)` and `H(x)`.
#[derive(Debug, Clone)]
pub struct MeasurementModel {
    rows: Vec<Row>,
    dim: usize,
}

impl MeasurementModel {
    pub fn new(model: &FeederModel, set: &MeasurementSet) -> Result<Self, MeasurementError> {
        let layout = StateLayout::new(model);
        let mut rows = Vec::with_capacity(set.len());
        for (r, m) in set.rows.iter().enumerate() {
            let misaligned = |reason: &str| MeasurementError::Misaligned {
                row: r,
                reason: reason.to_string(),
            };
            let bus = m.locus.bus();
            if bus >= model.bus_count() {
                return Err(misaligned("unknown bus"));
            }
            let slot = layout
                .slot(bus, m.phase)
                .ok_or_else(|| misaligned("phase absent at bus"))?;
            let compiled = match (m.kind, m.locus) {
                (MeasurementKind::VReal, Locus::Bus(_)) => Row::Component(2 * slot),
                (MeasurementKind::VImag, Locus::Bus(_)) => Row::Component(2 * slot + 1),
                (MeasurementKind::IReal | MeasurementKind::IImag, Locus::Branch { branch, at }) => {
                    let br = model
                        .branches()
                        .get(branch)
                        .filter(|br| br.from == at || br.to == at)
                        .ok_or_else(|| misaligned("branch not incident to measuring bus"))?;
                    let i = br
                        .phases
                        .position(m.phase)
                        .ok_or_else(|| misaligned("phase absent on branch"))?;
                    let current = Current {
                        terms: branch_current_terms(model, &layout, branch, at, i),
                    };
                    if m.kind == MeasurementKind::IReal {
                        Row::CurrentRe(current)
                    } else {
                        Row::CurrentIm(current)
                    }
                }
                (MeasurementKind::PInjection | MeasurementKind::QInjection, Locus::Bus(b)) => {
                    let mut terms = Vec::new();
                    for &(_, k) in model.neighbors(b) {
                        if let Some(i) = model.branches()[k].phases.position(m.phase) {
                            terms.extend(branch_current_terms(model, &layout, k, b, i));
                        }
                    }
                    let current = Current { terms };
                    if m.kind == MeasurementKind::PInjection {
                        Row::P { slot, current }
                    } else {
                        Row::Q { slot, current }
                    }
                }
                _ => return Err(misaligned("measurement kind does not match locus")),
            };
            rows.push(compiled);
        }
        Ok(MeasurementModel { rows, dim: layout.dim() })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.dim
    }

    /// `h(x)` for a real state vector in the interleaved layout.
    pub fn evaluate(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.dim, "state dimension mismatch");
        self.rows
            .iter()
            .map(|row| match row {
                Row::Component(j) => x[*j],
                Row::CurrentRe(c) => c.eval(x).re,
                Row::CurrentIm(c) => c.eval(x).im,
                Row::P { slot, current } => {
                    let v = Complex64::new(x[2 * slot], x[2 * slot + 1]);
                    (v * current.eval(x).conj()).re
                }
                Row::Q { slot, current } => {
                    let v = Complex64::new(x[2 * slot], x[2 * slot + 1]);
                    (v * current.eval(x).conj()).im
                }
            })
            .collect()
    }

    /// Analytic `H(x) = dh/dx`, `|z| x |x|`.
    pub fn jacobian(&self, x: &[f64]) -> DMatrix<f64> {
        assert_eq!(x.len(), self.dim, "state dimension mismatch");
        let mut h = DMatrix::zeros(self.rows.len(), self.dim);
        for (r, row) in self.rows.iter().enumerate() {
            match row {
                Row::Component(j) => h[(r, *j)] = 1.0,
                Row::CurrentRe(c) => {
                    for &(j, y) in &c.terms {
                        h[(r, 2 * j)] += y.re;
                        h[(r, 2 * j + 1)] -= y.im;
                    }
                }
                Row::CurrentIm(c) => {
                    for &(j, y) in &c.terms {
                        h[(r, 2 * j)] += y.im;
                        h[(r, 2 * j + 1)] += y.re;
                    }
                }
                Row::P { slot, current } | Row::Q { slot, current } => {
                    let is_p = matches!(row, Row::P { .. });
                    let (vr, vi) = (x[2 * slot], x[2 * slot + 1]);
                    let i = current.eval(x);
                    // P = vr*ir + vi*ii ; Q = vi*ir - vr*ii
                    let (wr, wi) = if is_p { (vr, vi) } else { (vi, -vr) };
                    for &(j, y) in &current.terms {
                        // d(ir)/d(vr_j) = y.re, d(ir)/d(vi_j) = -y.im
                        // d(ii)/d(vr_j) = y.im, d(ii)/d(vi_j) = y.re
                        h[(r, 2 * j)] += wr * y.re + wi * y.im;
                        h[(r, 2 * j + 1)] += -wr * y.im + wi * y.re;
                    }
                    if is_p {
                        h[(r, 2 * slot)] += i.re;
                        h[(r, 2 * slot + 1)] += i.im;
                    } else {
                        h[(r, 2 * slot)] -= i.im;
                        h[(r, 2 * slot + 1)] += i.re;
                    }
                }
            }
        }
        h
    }

    /// True for rows whose Jacobian does not depend on the state.
    pub fn is_linear_row(&self, r: usize) -> bool {
        !matches!(self.rows[r], Row::P { .. } | Row::Q { .. })
    }
}

/// Terms of the phase-`i` current leaving bus `at` on branch `k`:
/// `sum_q Y[i, q] (V_at,q - V_other,q)`.
fn branch_current_terms(model: &FeederModel, layout: &StateLayout, k: usize, at: usize, i: usize) -> Vec<(usize, Complex64)> {
    let br = &model.branches()[k];
    let other = br.other_end(at);
    let mut terms = Vec::new();
    for (q, p) in br.phases.iter().enumerate() {
        let y = br.admittance[(i, q)];
        if y == Complex64::new(0.0, 0.0) {
            continue;
        }
        let a = layout.slot(at, p).expect("branch phase present at bus");
        let b = layout.slot(other, p).expect("branch phase present at bus");
        terms.push((a, y));
        terms.push((b, -y));
    }
    terms
}

pub fn measurement_function(model: &FeederModel, set: &MeasurementSet, x: &StateVector) -> Result<Vec<f64>, MeasurementError> {
    Ok(MeasurementModel::new(model, set)?.evaluate(x.values()))
}

pub fn jacobian_rows(model: &FeederModel, set: &MeasurementSet, x: &StateVector) -> Result<DMatrix<f64>, MeasurementError> {
    Ok(MeasurementModel::new(model, set)?.jacobian(x.values()))
}

/// Standard deviation per row for a given true measurement value.
///
/// `exact` holds `h(x_true)` for every row; PMU rows look up their partner
/// component (real/imag) in it to recover magnitude and angle.
fn row_sigmas(model: &FeederModel, set: &MeasurementSet, exact: &[f64], levels: &NoiseLevels) -> Vec<f64> {
    let power_base = model.power_base().max(1.0);
    let current_ref = power_base / model.base_voltage();
    let rows = &set.rows;
    let mut sigma = vec![0.0; rows.len()];
    for r in 0..rows.len() {
        let m = &rows[r];
        sigma[r] = match m.class {
            NoiseClass::PmuVoltage | NoiseClass::PmuCurrent => {
                let partner = partner_row(rows, r);
                let (re, im) = match m.kind {
                    MeasurementKind::VReal | MeasurementKind::IReal => (exact[r], partner.map_or(0.0, |p| exact[p])),
                    _ => (partner.map_or(0.0, |p| exact[p]), exact[r]),
                };
                let floor = if m.class == NoiseClass::PmuCurrent {
                    1e-3 * current_ref
                } else {
                    1e-3 * model.base_voltage()
                };
                let mag = re.hypot(im).max(floor);
                let angle = im.atan2(re);
                let s_mag = levels.pmu_magnitude * mag / 3.0;
                let s_ang = levels.pmu_angle / 3.0;
                let (c, s) = (angle.cos(), angle.sin());
                if matches!(m.kind, MeasurementKind::VReal | MeasurementKind::IReal) {
                    ((c * s_mag).powi(2) + (mag * s * s_ang).powi(2)).sqrt()
                } else {
                    ((s * s_mag).powi(2) + (mag * c * s_ang).powi(2)).sqrt()
                }
            }
            NoiseClass::SmartMeterPower | NoiseClass::PseudoPower => {
                let partner = partner_row(rows, r).map_or(0.0, |p| exact[p]);
                let apparent = exact[r].hypot(partner).max(1e-4 * power_base);
                let max = if m.class == NoiseClass::SmartMeterPower {
                    levels.smart_meter
                } else {
                    levels.pseudo
                };
                max * apparent / 3.0
            }
            NoiseClass::ZeroInjection => levels.zero_injection * power_base / 3.0,
        };
    }
    sigma
}

/// Index of the row pairing with `r` (real with imag, P with Q) at the same locus and phase.
fn partner_row(rows: &[Measurement], r: usize) -> Option<usize> {
    use MeasurementKind::*;
    let want = match rows[r].kind {
        VReal => VImag,
        VImag => VReal,
        IReal => IImag,
        IImag => IReal,
        PInjection => QInjection,
        QInjection => PInjection,
    };
    let probe = |j: usize| rows[j].kind == want && rows[j].locus == rows[r].locus && rows[j].phase == rows[r].phase;
    [r.wrapping_sub(1), r + 1]
        .into_iter()
        .filter(|&j| j < rows.len())
        .find(|&j| probe(j))
        .or_else(|| (0..rows.len()).find(|&j| probe(j)))
}

/// Values `h(x_true)` with each row's class variance, no noise drawn.
pub fn evaluate_exact(model: &FeederModel, template: &MeasurementSet, x_true: &StateVector) -> Result<MeasurementSet, MeasurementError> {
    let exact = measurement_function(model, template, x_true)?;
    let sigma = row_sigmas(model, template, &exact, &template.levels);
    let variances = variances_from(&sigma, model, template, &exact);
    Ok(template.with_data(&exact, &variances))
}

pub fn synthesize(model: &FeederModel, template: &MeasurementSet, x_true: &StateVector, rng_seed: u64) -> Result<MeasurementSet, MeasurementError> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    synthesize_with_rng(model, template, x_true, &mut rng)
}

pub fn synthesize_with_rng<R: Rng>(
    model: &FeederModel,
    template: &MeasurementSet,
    x_true: &StateVector,
    rng: &mut R,
) -> Result<MeasurementSet, MeasurementError> {
    let exact = measurement_function(model, template, x_true)?;
    let sigma = row_sigmas(model, template, &exact, &template.levels);
    let values: Vec<f64> = exact
        .iter()
        .zip(&sigma)
        .map(|(&h, &s)| {
            let e: f64 = rng.sample(StandardNormal);
            h + s * e
        })
        .collect();
    let variances = variances_from(&sigma, model, template, &exact);
    Ok(template.with_data(&values, &variances))
}

/// Squared sigmas; classes configured noiseless get a tiny positive variance
/// on the same scale so that R stays invertible.
fn variances_from(sigma: &[f64], model: &FeederModel, template: &MeasurementSet, exact: &[f64]) -> Vec<f64> {
    let unit = NoiseLevels {
        pmu_magnitude: 1e-6,
        pmu_angle: 1e-6,
        smart_meter: 1e-6,
        pseudo: 1e-6,
        zero_injection: 1e-6,
    };
    let fallback = row_sigmas(model, template, exact, &unit);
    sigma
        .iter()
        .zip(&fallback)
        .map(|(&s, &f)| if s > 0.0 { s * s } else { f * f })
        .collect()
}

impl fmt::Display for MeasurementKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            MeasurementKind::VReal => "v_real",
            MeasurementKind::VImag => "v_imag",
            MeasurementKind::IReal => "i_real",
            MeasurementKind::IImag => "i_imag",
            MeasurementKind::PInjection => "p_injection",
            MeasurementKind::QInjection => "q_injection",
        };
        f.write_str(s)
    }
}

impl FromStr for MeasurementKind {
    type Err = MeasurementError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "v_real" => MeasurementKind::VReal,
            "v_imag" => MeasurementKind::VImag,
            "i_real" => MeasurementKind::IReal,
            "i_imag" => MeasurementKind::IImag,
            "p_injection" => MeasurementKind::PInjection,
            "q_injection" => MeasurementKind::QInjection,
            _ => return Err(MeasurementError::Format(format!("unknown kind {s:?}"))),
        })
    }
}

impl fmt::Display for NoiseClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            NoiseClass::PmuVoltage => "pmu_voltage",
            NoiseClass::PmuCurrent => "pmu_current",
            NoiseClass::SmartMeterPower => "smart_meter_power",
            NoiseClass::PseudoPower => "pseudo_power",
            NoiseClass::ZeroInjection => "zero_injection",
        };
        f.write_str(s)
    }
}

impl FromStr for NoiseClass {
    type Err = MeasurementError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "pmu_voltage" => NoiseClass::PmuVoltage,
            "pmu_current" => NoiseClass::PmuCurrent,
            "smart_meter_power" => NoiseClass::SmartMeterPower,
            "pseudo_power" => NoiseClass::PseudoPower,
            "zero_injection" => NoiseClass::ZeroInjection,
            _ => return Err(MeasurementError::Format(format!("unknown class {s:?}"))),
        })
    }
}

/// Writes the columnar measurement file. Columns:
/// `kind,locus,phase,value,variance,class`. Loci use feeder bus ids:
/// `bus:<id>` or `branch:<from>-<to>@<id>`.
pub fn write_measurements<W: Write>(model: &FeederModel, set: &MeasurementSet, out: W) -> Result<(), MeasurementError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["kind", "locus", "phase", "value", "variance", "class"])?;
    for m in &set.rows {
        let locus = match m.locus {
            Locus::Bus(b) => format!("bus:{}", model.label(b)),
            Locus::Branch { branch, at } => {
                let br = &model.branches()[branch];
                format!("branch:{}-{}@{}", model.label(br.from), model.label(br.to), model.label(at))
            }
        };
        w.write_record([
            m.kind.to_string(),
            locus,
            m.phase.to_string(),
            format!("{:?}", m.value),
            format!("{:?}", m.variance),
            m.class.to_string(),
        ])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Reads a file written by [`write_measurements`]. Noise levels are not part
/// of the file; the returned set carries the defaults.
pub fn read_measurements<R: Read>(model: &FeederModel, input: R) -> Result<MeasurementSet, MeasurementError> {
    let mut reader = csv::Reader::from_reader(input);
    let headers = reader.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["kind", "locus", "phase", "value", "variance", "class"] {
        return Err(MeasurementError::Format(format!("unexpected header {headers:?}")));
    }
    let bus = |label: &str| -> Result<usize, MeasurementError> {
        let id: u32 = label
            .parse()
            .map_err(|_| MeasurementError::Format(format!("bad bus id {label:?}")))?;
        model
            .bus_index(id)
            .ok_or_else(|| MeasurementError::Format(format!("unknown bus id {id}")))
    };
    let number = |s: &str| -> Result<f64, MeasurementError> {
        s.parse().map_err(|_| MeasurementError::Format(format!("bad number {s:?}")))
    };
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record?;
        let locus_text = &record[1];
        let locus = if let Some(id) = locus_text.strip_prefix("bus:") {
            Locus::Bus(bus(id)?)
        } else if let Some(rest) = locus_text.strip_prefix("branch:") {
            let (ends, at) = rest
                .split_once('@')
                .ok_or_else(|| MeasurementError::Format(format!("bad locus {locus_text:?}")))?;
            let (from, to) = ends
                .split_once('-')
                .ok_or_else(|| MeasurementError::Format(format!("bad locus {locus_text:?}")))?;
            let (from, to) = (bus(from)?, bus(to)?);
            let branch = model
                .branch_between(from, to)
                .ok_or_else(|| MeasurementError::Format(format!("no branch {ends}")))?;
            Locus::Branch { branch, at: bus(at)? }
        } else {
            return Err(MeasurementError::Format(format!("bad locus {locus_text:?}")));
        };
        let phase = match record[2].chars().collect::<Vec<_>>().as_slice() {
            [c] => Phase::from_char(*c),
            _ => None,
        }
        .ok_or_else(|| MeasurementError::Format(format!("bad phase {:?}", &record[2])))?;
        rows.push(Measurement {
            kind: record[0].parse()?,
            locus,
            phase,
            class: record[5].parse()?,
            value: number(&record[3])?,
            variance: number(&record[4])?,
        });
    }
    Ok(MeasurementSet {
        rows,
        levels: NoiseLevels::default(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Bus, PhaseSet};

    #[test]
    fn isolated_pmu_bus_only_has_voltage_rows() {
        let model = FeederModel::new(
            vec![Bus {
                label: 3,
                phases: PhaseSet::single(Phase::B),
                kind: BusKind::Source,
                base_voltage: 2400.0,
            }],
            vec![],
            vec![],
        )
        .unwrap();
        let set = plan_measurements(&model, &[0], &[], 0.5).unwrap();
        let kinds: Vec<_> = set.rows.iter().map(|m| (m.kind, m.phase)).collect();
        assert_eq!(kinds, vec![(MeasurementKind::VReal, Phase::B), (MeasurementKind::VImag, Phase::B)]);
    }

    #[test]
    fn plan_errors() {
        let model = FeederModel::new(
            vec![Bus {
                label: 1,
                phases: PhaseSet::ABC,
                kind: BusKind::Source,
                base_voltage: 2400.0,
            }],
            vec![],
            vec![],
        )
        .unwrap();
        assert!(matches!(plan_measurements(&model, &[], &[], 0.5), Err(MeasurementError::NoPmu)));
        assert!(matches!(
            plan_measurements(&model, &[4], &[], 0.5),
            Err(MeasurementError::InvalidPmuBus(4))
        ));
        assert!(matches!(
            plan_measurements(&model, &[0], &[0], 0.5),
            Err(MeasurementError::NotALoadBus(0))
        ));
    }

    #[test]
    fn kind_round_trips_through_text() {
        for k in [
            MeasurementKind::VReal,
            MeasurementKind::VImag,
            MeasurementKind::IReal,
            MeasurementKind::IImag,
            MeasurementKind::PInjection,
            MeasurementKind::QInjection,
        ] {
            assert_eq!(k.to_string().parse::<MeasurementKind>().unwrap(), k);
        }
    }
}
