//! Monte Carlo datasets, scenario runs and benchmark reports.
//!
//! A dataset holds load-driven power-flow solutions: for each sample the
//! synthesized measurement values and variances under one template, plus
//! the per-unit magnitudes of the true state. Scenarios reuse datasets when
//! they only differ in which rows are kept, so the rows an estimator sees
//! are always a projection of one generated set.

mod report;

pub use report::{format_table, read_summary_csv, summary_csv, trace_csv, write_report, SummaryLine};

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::grid::{feeder_hash, FeederModel};
use crate::measurements::{plan_measurements, synthesize_with_rng, MeasurementError, MeasurementSet, NoiseClass};
use crate::nn::{self, EvalReport, MaskedNetwork, NnError, Sample, TrainConfig};
use crate::powerflow::{nominal_loads, solve_power_flow, PowerFlowError, PowerFlowOptions};
use crate::topology::{count_params, MaskPlan, PlanKind, TopologyError};
use crate::wls::{self, magnitudes_pu, WlsConfig, WlsError};

pub const DATASET_SCHEMA: u32 = 1;
pub const REPORT_SCHEMA: u32 = 1;

/// Redraws allowed for one sample before generation gives up.
const MAX_REDRAWS: usize = 100;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("unknown bus {0}")]
    UnknownBus(u32),
    #[error("sample {index}: power flow failed on {attempts} consecutive draws: {last}")]
    PowerFlow {
        index: usize,
        attempts: usize,
        last: PowerFlowError,
    },
    #[error("dataset: {0}")]
    Dataset(String),
    #[error(transparent)]
    Measurement(#[from] MeasurementError),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Wls(#[from] WlsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Synthetic demand: a daily cosine shape shared by all loads times an
/// independent lognormal factor per bus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoadProfileConfig {
    pub samples: usize,
    pub seed: u64,
    /// Hour of the daily maximum.
    pub peak_hour: f64,
    /// Relative swing of the daily shape around 1.
    pub amplitude: f64,
    /// Standard deviation of the log of the per-bus factor.
    pub noise_sigma: f64,
    /// Samples walk through the day in this many equal steps.
    pub steps_per_day: usize,
}

impl Default for LoadProfileConfig {
    fn default() -> Self {
        LoadProfileConfig {
            samples: 10_000,
            seed: 0,
            peak_hour: 19.0,
            amplitude: 0.3,
            noise_sigma: 0.03,
            steps_per_day: 96,
        }
    }
}

impl LoadProfileConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: &str| Err(PipelineError::Config(m.into()));
        if self.samples == 0 {
            return bad("profile needs at least one sample");
        }
        if self.steps_per_day == 0 {
            return bad("steps_per_day must be positive");
        }
        if !(self.amplitude >= 0.0 && self.amplitude < 1.0) {
            return bad("amplitude must lie in [0, 1)");
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be finite and non-negative");
        }
        Ok(())
    }

    /// Daily shape factor of sample `index`.
    pub fn shape(&self, index: usize) -> f64 {
        let hour = (index % self.steps_per_day) as f64 * 24.0 / self.steps_per_day as f64;
        1.0 + self.amplitude * (2.0 * PI * (hour - self.peak_hour) / 24.0).cos()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub schema: u32,
    pub feeder_hash: String,
    /// Hash of the feeder, profile and template that produced the data.
    pub config_hash: String,
    pub profile: LoadProfileConfig,
    pub template: MeasurementSet,
    pub samples: Vec<Sample>,
    /// Row variances of each sample, aligned with `samples[i].z`.
    pub variances: Vec<Vec<f64>>,
    /// Load draws rejected because the power flow failed.
    pub redraws: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Measurement set of sample `i`, ready for WLS.
    pub fn measurement(&self, i: usize) -> MeasurementSet {
        self.template.with_data(&self.samples[i].z, &self.variances[i])
    }

    /// Keeps only template rows `keep` (in that order).
    pub fn project(&self, keep: &[usize]) -> Dataset {
        let pick = |v: &[f64]| keep.iter().map(|&r| v[r]).collect::<Vec<f64>>();
        Dataset {
            template: MeasurementSet {
                rows: keep.iter().map(|&r| self.template.rows[r].clone()).collect(),
                levels: self.template.levels,
            },
            samples: self
                .samples
                .iter()
                .map(|s| Sample {
                    z: pick(&s.z),
                    v: s.v.clone(),
                })
                .collect(),
            variances: self.variances.iter().map(|v| pick(v)).collect(),
            ..self.clone()
        }
    }
}

/// Hex SHA-256 of the JSON encoding of `value`.
pub fn content_hash<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("config types serialize");
    hex::encode(Sha256::digest(&json))
}

pub fn dataset_hash(model: &FeederModel, profile: &LoadProfileConfig, template: &MeasurementSet) -> String {
    content_hash(&(feeder_hash(model), profile, template))
}

/// Draws `profile.samples` labelled samples. Sample `i` uses its own random
/// stream derived from `(seed, i)`, so the result does not depend on thread
/// scheduling.
pub fn generate_dataset(model: &FeederModel, profile: &LoadProfileConfig, template: &MeasurementSet) -> Result<Dataset, PipelineError> {
    profile.validate()?;
    let base = nominal_loads(model);
    let options = PowerFlowOptions::for_model(model);
    let lognormal = LogNormal::new(0.0, profile.noise_sigma).map_err(|e| PipelineError::Config(e.to_string()))?;
    let drawn: Vec<(Sample, Vec<f64>, usize)> = (0..profile.samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(profile.seed);
            rng.set_stream(i as u64);
            let shape = profile.shape(i);
            let mut redraws = 0;
            let pf = loop {
                let loads: Vec<_> = base
                    .iter()
                    .map(|row| {
                        let f = shape * lognormal.sample(&mut rng);
                        row.map(|s| s * f)
                    })
                    .collect();
                match solve_power_flow(model, &loads, options) {
                    Ok(pf) => break pf,
                    Err(e) if redraws + 1 >= MAX_REDRAWS => {
                        return Err(PipelineError::PowerFlow {
                            index: i,
                            attempts: redraws + 1,
                            last: e,
                        })
                    }
                    Err(_) => redraws += 1,
                }
            };
            let z = synthesize_with_rng(model, template, &pf.state, &mut rng)?;
            let sample = Sample {
                z: z.values(),
                v: magnitudes_pu(model, &pf.state),
            };
            Ok((sample, z.variances(), redraws))
        })
        .collect::<Result<_, PipelineError>>()?;

    let mut samples = Vec::with_capacity(drawn.len());
    let mut variances = Vec::with_capacity(drawn.len());
    let mut redraws = 0;
    for (s, v, r) in drawn {
        samples.push(s);
        variances.push(v);
        redraws += r;
    }
    Ok(Dataset {
        schema: DATASET_SCHEMA,
        feeder_hash: feeder_hash(model),
        config_hash: dataset_hash(model, profile, template),
        profile: profile.clone(),
        template: template.clone(),
        samples,
        variances,
        redraws,
    })
}

pub fn save_dataset(path: &Path, dataset: &Dataset) -> Result<(), PipelineError> {
    let mut out = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut out, dataset)?;
    out.flush()?;
    Ok(())
}

pub fn load_dataset(path: &Path, model: &FeederModel) -> Result<Dataset, PipelineError> {
    let ds: Dataset = serde_json::from_reader(BufReader::new(File::open(path)?))?;
    if ds.schema != DATASET_SCHEMA {
        return Err(PipelineError::Dataset(format!("schema {} is not supported", ds.schema)));
    }
    if ds.feeder_hash != feeder_hash(model) {
        return Err(PipelineError::Dataset("generated for a different feeder".into()));
    }
    if ds.samples.len() != ds.variances.len() || ds.samples.iter().any(|s| s.z.len() != ds.template.len()) {
        return Err(PipelineError::Dataset("sample rows do not match the template".into()));
    }
    Ok(ds)
}

/// Train and test indices. The split depends only on the arguments.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn split_indices(seed: u64, samples: usize, train_fraction: f64) -> Split {
    let mut order: Vec<usize> = (0..samples).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((samples as f64 * train_fraction.clamp(0.0, 1.0)).round() as usize).min(samples);
    let test = order.split_off(n_train);
    Split { train: order, test }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PseudoRemoval {
    None,
    /// Drop pseudo rows in template order until WLS loses observability.
    UntilUnobservable,
    /// Drop this many pseudo rows in template order.
    Rows(usize),
}

/// One measurement configuration. Buses are feeder labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub pmu_buses: Vec<u32>,
    #[serde(default)]
    pub metered: Vec<u32>,
    #[serde(default = "default_pseudo")]
    pub pseudo_noise: f64,
    #[serde(default = "no_removal")]
    pub remove_pseudo: PseudoRemoval,
}

fn default_pseudo() -> f64 {
    0.3
}

fn no_removal() -> PseudoRemoval {
    PseudoRemoval::None
}

/// A scenario turned into a template plus the rows estimators get to see.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedScenario {
    /// Template the dataset is generated from.
    pub template: MeasurementSet,
    /// Rows of `template` that are kept.
    pub keep: Vec<usize>,
    pub removed_rows: usize,
    pub pmu_buses: Vec<usize>,
}

fn bus_indices(model: &FeederModel, labels: &[u32]) -> Result<Vec<usize>, PipelineError> {
    labels
        .iter()
        .map(|&l| model.bus_index(l).ok_or(PipelineError::UnknownBus(l)))
        .collect()
}

impl Scenario {
    pub fn resolve(&self, model: &FeederModel) -> Result<ResolvedScenario, PipelineError> {
        let pmu_buses = bus_indices(model, &self.pmu_buses)?;
        let metered = bus_indices(model, &self.metered)?;
        let template = plan_measurements(model, &pmu_buses, &metered, self.pseudo_noise)?;
        let pseudo: Vec<usize> = (0..template.len())
            .filter(|&r| template.rows[r].class == NoiseClass::PseudoPower)
            .collect();
        let all: Vec<usize> = (0..template.len()).collect();
        let keep_without = |n: usize| -> Vec<usize> {
            let dropped = &pseudo[..n];
            all.iter().copied().filter(|r| !dropped.contains(r)).collect()
        };
        let removed = match self.remove_pseudo {
            PseudoRemoval::None => 0,
            PseudoRemoval::Rows(n) => {
                if n > pseudo.len() {
                    return Err(PipelineError::Config(format!(
                        "scenario {} removes {n} pseudo rows but only {} exist",
                        self.name,
                        pseudo.len()
                    )));
                }
                n
            }
            PseudoRemoval::UntilUnobservable => {
                let truth = solve_power_flow(model, &nominal_loads(model), PowerFlowOptions::for_model(model))
                    .map_err(|e| PipelineError::Config(format!("nominal power flow: {e}")))?
                    .state;
                let exact = crate::measurements::evaluate_exact(model, &template, &truth)?;
                let cfg = WlsConfig::default();
                let mut n = 0;
                loop {
                    if n == pseudo.len() {
                        return Err(PipelineError::Config(format!(
                            "scenario {}: still observable with every pseudo row removed",
                            self.name
                        )));
                    }
                    n += 1;
                    let reduced = MeasurementSet {
                        rows: keep_without(n).iter().map(|&r| exact.rows[r].clone()).collect(),
                        levels: exact.levels,
                    };
                    if !wls::is_observable(model, &reduced, &truth, &cfg)? {
                        break n;
                    }
                }
            }
        };
        Ok(ResolvedScenario {
            keep: keep_without(removed),
            removed_rows: removed,
            template,
            pmu_buses,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    Wls,
    Pawnn,
    P2n2,
}

impl std::fmt::Display for Estimator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Estimator::Wls => "wls",
            Estimator::Pawnn => "pawnn",
            Estimator::P2n2 => "p2n2",
        })
    }
}

impl std::str::FromStr for Estimator {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "wls" => Ok(Estimator::Wls),
            "pawnn" => Ok(Estimator::Pawnn),
            "p2n2" => Ok(Estimator::P2n2),
            _ => Err(format!("unknown estimator {s:?} (expected wls, pawnn or p2n2)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Ok,
    Unobservable,
    NonConverged,
}

impl std::fmt::Display for Status {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Status::Ok => "ok",
            Status::Unobservable => "unobservable",
            Status::NonConverged => "nonconverged",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub scenario: String,
    pub estimator: Estimator,
    pub status: Status,
    /// Mean squared magnitude error over the test samples the estimator
    /// solved. Absent when it solved none or the set was unobservable.
    pub nu: Option<f64>,
    pub per_bus: Vec<f64>,
    /// Seconds per estimate call.
    pub mean_time: Option<f64>,
    pub solved: usize,
    pub failed: usize,
    pub params: Option<usize>,
}

/// True and estimated magnitudes of one test sample, for plotting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub scenario: String,
    pub estimator: Estimator,
    /// Feeder label and phase letter per slot.
    pub slots: Vec<(u32, char)>,
    pub truth: Vec<f64>,
    pub estimate: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioInfo {
    pub name: String,
    pub rows: usize,
    pub removed_pseudo_rows: usize,
    pub dataset_hash: String,
    pub redraws: usize,
    pub test_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub schema: u32,
    pub config_hash: String,
    pub scenarios: Vec<ScenarioInfo>,
    pub rows: Vec<BenchRow>,
    pub traces: Vec<Trace>,
}

/// Settings shared by every scenario of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSettings {
    pub block_width: usize,
    pub train: TrainConfig,
    pub wls: WlsConfig,
    pub estimators: Vec<Estimator>,
    /// Seed of the train/test split.
    pub split_seed: u64,
}

/// Trains the network estimators on the training split of `dataset` and
/// evaluates every estimator on the identical test split. Each estimate call
/// is timed on its own, one sample at a time.
pub fn run_scenario(
    model: &FeederModel,
    name: &str,
    pmu_buses: &[usize],
    dataset: &Dataset,
    settings: &RunSettings,
) -> Result<(Vec<BenchRow>, Vec<Trace>), PipelineError> {
    let split = split_indices(settings.split_seed, dataset.len(), settings.train.train_fraction);
    if split.test.is_empty() || split.train.is_empty() {
        return Err(PipelineError::Config(format!(
            "scenario {name}: {} samples leave an empty train or test split",
            dataset.len()
        )));
    }
    let offsets = nn::slot_offsets(model);
    let slots: Vec<(u32, char)> = crate::state::StateLayout::new(model)
        .slots()
        .iter()
        .map(|&(b, p)| (model.label(b), p.letter()))
        .collect();
    let truths: Vec<&[f64]> = split.test.iter().map(|&i| dataset.samples[i].v.as_slice()).collect();
    let trace_of = |estimator, estimate: Vec<f64>| Trace {
        scenario: name.to_string(),
        estimator,
        slots: slots.clone(),
        truth: truths[0].to_vec(),
        estimate,
    };

    let mut rows = Vec::new();
    let mut traces = Vec::new();
    let mut plans = BTreeMap::new();
    for &est in &settings.estimators {
        if est == Estimator::Wls {
            let (row, trace) = run_wls(model, name, dataset, &split.test, &offsets, &truths, &settings.wls)?;
            rows.push(row);
            if let Some(e) = trace {
                traces.push(trace_of(est, e));
            }
            continue;
        }
        let kind = if est == Estimator::Pawnn { PlanKind::Pawnn } else { PlanKind::P2n2 };
        let plan = MaskPlan::for_pmus(model, pmu_buses, kind, settings.block_width)?;
        let counts = count_params(&MaskPlan::for_pmus(model, pmu_buses, PlanKind::P2n2, settings.block_width)?);
        plans.insert(est, plan.clone());
        let net = train_on_split(model, &plan, dataset, &split.train, &settings.train)?;

        let mut estimates = Vec::with_capacity(split.test.len());
        let mut elapsed = 0.0;
        for &i in &split.test {
            let z = &dataset.samples[i].z;
            let start = Instant::now();
            let v = net.forward(z)?;
            elapsed += start.elapsed().as_secs_f64();
            estimates.push(v);
        }
        let est_refs: Vec<&[f64]> = estimates.iter().map(|e| e.as_slice()).collect();
        let report = EvalReport::from_estimates(&offsets, &est_refs, &truths)?;
        rows.push(BenchRow {
            scenario: name.to_string(),
            estimator: est,
            status: Status::Ok,
            nu: Some(report.nu),
            per_bus: report.per_bus,
            mean_time: Some(elapsed / split.test.len() as f64),
            solved: split.test.len(),
            failed: 0,
            params: Some(if kind == PlanKind::Pawnn {
                counts.pawnn_params
            } else {
                counts.p2n2_params
            }),
        });
        traces.push(trace_of(est, estimates.swap_remove(0)));
    }
    Ok((rows, traces))
}

/// Fits a network on the `train` indices, holding out the tail of the
/// (already shuffled) index list for early stopping.
pub fn train_on_split(
    model: &FeederModel,
    plan: &MaskPlan,
    dataset: &Dataset,
    train: &[usize],
    config: &TrainConfig,
) -> Result<MaskedNetwork, PipelineError> {
    let n_val = ((train.len() as f64 * config.validation_fraction.clamp(0.0, 1.0)).round() as usize).min(train.len() - 1);
    let (fit_idx, val_idx) = train.split_at(train.len() - n_val);
    let fit_set: Vec<Sample> = fit_idx.iter().map(|&i| dataset.samples[i].clone()).collect();
    let val_set: Vec<Sample> = val_idx.iter().map(|&i| dataset.samples[i].clone()).collect();
    let (net, _) = nn::train(model, plan, &dataset.template, &fit_set, &val_set, config)?;
    Ok(net)
}

fn run_wls(
    model: &FeederModel,
    name: &str,
    dataset: &Dataset,
    test: &[usize],
    offsets: &[usize],
    truths: &[&[f64]],
    config: &WlsConfig,
) -> Result<(BenchRow, Option<Vec<f64>>), PipelineError> {
    let mut estimates = Vec::new();
    let mut solved_truths = Vec::new();
    let mut elapsed = 0.0;
    let mut unobservable = 0;
    let mut nonconverged = 0;
    let mut first = None;
    for (k, &i) in test.iter().enumerate() {
        let z = dataset.measurement(i);
        let start = Instant::now();
        let result = wls::estimate(model, &z, config);
        elapsed += start.elapsed().as_secs_f64();
        match result {
            Ok(rep) => {
                let v = magnitudes_pu(model, &rep.x_hat);
                if k == 0 {
                    first = Some(v.clone());
                }
                estimates.push(v);
                solved_truths.push(truths[k]);
            }
            Err(WlsError::Unobservable { .. }) => unobservable += 1,
            Err(WlsError::NonConverged(_)) => nonconverged += 1,
            Err(e) => return Err(e.into()),
        }
    }
    let status = if unobservable > 0 {
        Status::Unobservable
    } else if nonconverged > 0 {
        Status::NonConverged
    } else {
        Status::Ok
    };
    let report = if status == Status::Unobservable || estimates.is_empty() {
        None
    } else {
        let refs: Vec<&[f64]> = estimates.iter().map(|e| e.as_slice()).collect();
        Some(EvalReport::from_estimates(offsets, &refs, &solved_truths)?)
    };
    Ok((
        BenchRow {
            scenario: name.to_string(),
            estimator: Estimator::Wls,
            status,
            nu: report.as_ref().map(|r| r.nu),
            per_bus: report.map(|r| r.per_bus).unwrap_or_default(),
            mean_time: Some(elapsed / test.len() as f64),
            solved: estimates.len(),
            failed: unobservable + nonconverged,
            params: None,
        },
        first,
    ))
}

/// A benchmark run: one feeder, one load profile, several scenarios.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteConfig {
    /// Feeder file, relative to the suite file.
    pub feeder: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_block_width")]
    pub block_width: usize,
    #[serde(default = "all_estimators")]
    pub estimators: Vec<Estimator>,
    #[serde(default)]
    pub profile: LoadProfileConfig,
    #[serde(default)]
    pub train: TrainConfig,
    pub scenario: Vec<Scenario>,
}

fn default_block_width() -> usize {
    8
}

fn all_estimators() -> Vec<Estimator> {
    vec![Estimator::Wls, Estimator::Pawnn, Estimator::P2n2]
}

impl SuiteConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.scenario.is_empty() {
            return Err(PipelineError::Config("suite has no scenarios".into()));
        }
        if self.block_width == 0 {
            return Err(PipelineError::Config("block_width must be positive".into()));
        }
        let mut names: Vec<&str> = self.scenario.iter().map(|s| s.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(PipelineError::Config("scenario names must be unique".into()));
        }
        if let Some(s) = self
            .scenario
            .iter()
            .find(|s| s.name.is_empty() || !s.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-'))
        {
            return Err(PipelineError::Config(format!(
                "scenario name {:?} must be non-empty ASCII letters, digits, '-' or '_'",
                s.name
            )));
        }
        self.profile.validate()
    }

    /// The run's seed applied to the load profile and the trainer.
    pub fn seeded(&self) -> (LoadProfileConfig, TrainConfig) {
        let profile = LoadProfileConfig {
            seed: self.seed,
            ..self.profile.clone()
        };
        let train = TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        };
        (profile, train)
    }
}

/// Runs every scenario of `suite`. Datasets are cached in `cache_dir`
/// under their content hash when a directory is given.
pub fn run_suite(model: &FeederModel, suite: &SuiteConfig, cache_dir: Option<&Path>) -> Result<BenchReport, PipelineError> {
    suite.validate()?;
    let (profile, train) = suite.seeded();
    let settings = RunSettings {
        block_width: suite.block_width,
        train,
        wls: WlsConfig::default(),
        estimators: suite.estimators.clone(),
        split_seed: suite.seed,
    };
    let mut datasets: BTreeMap<String, Dataset> = BTreeMap::new();
    let mut report = BenchReport {
        schema: REPORT_SCHEMA,
        config_hash: content_hash(&(feeder_hash(model), suite.seed, suite.block_width, &suite.estimators, &profile, &settings.train, &suite.scenario)),
        scenarios: Vec::new(),
        rows: Vec::new(),
        traces: Vec::new(),
    };
    for sc in &suite.scenario {
        let resolved = sc.resolve(model)?;
        let hash = dataset_hash(model, &profile, &resolved.template);
        if !datasets.contains_key(&hash) {
            let ds = cached_dataset(model, &profile, &resolved.template, &hash, cache_dir)?;
            datasets.insert(hash.clone(), ds);
        }
        let data = datasets[&hash].project(&resolved.keep);
        let (rows, traces) = run_scenario(model, &sc.name, &resolved.pmu_buses, &data, &settings)?;
        report.scenarios.push(ScenarioInfo {
            name: sc.name.clone(),
            rows: resolved.keep.len(),
            removed_pseudo_rows: resolved.removed_rows,
            dataset_hash: hash,
            redraws: data.redraws,
            test_samples: split_indices(settings.split_seed, data.len(), settings.train.train_fraction).test.len(),
        });
        report.rows.extend(rows);
        report.traces.extend(traces);
    }
    Ok(report)
}

fn cached_dataset(
    model: &FeederModel,
    profile: &LoadProfileConfig,
    template: &MeasurementSet,
    hash: &str,
    cache_dir: Option<&Path>,
) -> Result<Dataset, PipelineError> {
    let Some(dir) = cache_dir else {
        return generate_dataset(model, profile, template);
    };
    let path = dir.join(format!("dataset-{}.json", &hash[..16]));
    if path.exists() {
        let ds = load_dataset(&path, model)?;
        if ds.config_hash == hash {
            return Ok(ds);
        }
    }
    let ds = generate_dataset(model, profile, template)?;
    std::fs::create_dir_all(dir)?;
    save_dataset(&path, &ds)?;
    Ok(ds)
}
