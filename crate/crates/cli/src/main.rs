//! `feederstate`: generate datasets, train masked networks, run estimators
//! and benchmarks on radial three-phase feeders.
//!
//! Exit status: 0 on success, 2 for invalid input, 3 when WLS finds the
//! measurement set unobservable, 4 when an iterative solve or training run
//! fails to converge.

use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use feederstate::grid::{load_feeder, FeederModel};
use feederstate::measurements::{plan_measurements, read_measurements, write_measurements};
use feederstate::nn::{self, load_checkpoint, save_checkpoint, NnError, TrainConfig};
use feederstate::pipeline::{
    self, format_table, generate_dataset, load_dataset, save_dataset, split_indices, train_on_split, write_report, LoadProfileConfig,
    PipelineError, SuiteConfig,
};
use feederstate::powerflow::PowerFlowError;
use feederstate::topology::{count_params, write_mask_plan, MaskPlan, PlanKind};
use feederstate::wls::{self, magnitudes_pu, WlsConfig, WlsError};
use feederstate::StateLayout;
use serde::Deserialize;

#[derive(Parser)]
#[command(name = "feederstate", version, about = "Distribution feeder state estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a Monte Carlo dataset of measurements and true magnitudes.
    Generate(GenerateArgs),
    /// Train a masked network on a dataset.
    Train(TrainArgs),
    /// Estimate bus voltage magnitudes from one measurement file.
    Estimate(EstimateArgs),
    /// Run a scenario suite and write accuracy and timing reports.
    Bench(BenchArgs),
    /// Export the layer masks for a PMU placement.
    Masks(MasksArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    feeder: PathBuf,
    /// TOML with `pmu_buses`, optional `metered`, `pseudo_noise` and a `[profile]` table.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the profile seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Also write the first N samples as measurement files into this directory.
    #[arg(long, value_name = "DIR")]
    export_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 1, requires = "export_dir")]
    export_count: usize,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct GenerateConfig {
    pmu_buses: Vec<u32>,
    #[serde(default)]
    metered: Vec<u32>,
    #[serde(default = "default_pseudo")]
    pseudo_noise: f64,
    #[serde(default)]
    profile: LoadProfileConfig,
}

fn default_pseudo() -> f64 {
    0.3
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    feeder: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value = "p2n2")]
    kind: PlanKind,
    /// TOML with training settings; defaults apply to anything left out.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    block_width: usize,
    /// Checkpoint output path.
    #[arg(long)]
    out: PathBuf,
    /// Seeds initialization, shuffling and the train/test split.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EstimateArgs {
    #[arg(long)]
    feeder: PathBuf,
    /// Network checkpoint; without it the WLS estimator runs.
    #[arg(long, conflicts_with = "wls")]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    wls: bool,
    /// Measurement file (`kind,locus,phase,value,variance,class`).
    #[arg(long)]
    measurements: PathBuf,
    /// Output CSV; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// Suite TOML; its `feeder` path is relative to the suite file.
    #[arg(long)]
    suite: PathBuf,
    /// Report directory. Results go to a subdirectory named by the run hash.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct MasksArgs {
    #[arg(long)]
    feeder: PathBuf,
    /// Comma-separated PMU bus ids.
    #[arg(long, value_delimiter = ',', required = true)]
    pmus: Vec<u32>,
    #[arg(long, default_value = "p2n2")]
    kind: PlanKind,
    #[arg(long, default_value_t = 8)]
    block_width: usize,
    /// Plan file output; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(a) => generate(a),
        Command::Train(a) => train(a),
        Command::Estimate(a) => estimate(a),
        Command::Bench(a) => bench(a),
        Command::Masks(a) => masks(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 3 for unobservable, 4 for non-convergence, 2 for everything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<WlsError>() {
            return wls_code(e);
        }
        if let Some(e) = cause.downcast_ref::<PipelineError>() {
            match e {
                PipelineError::Wls(w) => return wls_code(w),
                PipelineError::PowerFlow { .. } => return 4,
                PipelineError::Nn(NnError::Diverged { .. }) => return 4,
                _ => {}
            }
        }
        if let Some(NnError::Diverged { .. }) = cause.downcast_ref::<NnError>() {
            return 4;
        }
        if let Some(PowerFlowError::NonConvergence { .. }) = cause.downcast_ref::<PowerFlowError>() {
            return 4;
        }
    }
    2
}

fn wls_code(e: &WlsError) -> u8 {
    match e {
        WlsError::Unobservable { .. } => 3,
        WlsError::NonConverged(_) => 4,
        _ => 2,
    }
}

fn feeder(path: &Path) -> Result<FeederModel> {
    load_feeder(path).with_context(|| format!("loading feeder {}", path.display()))
}

fn read_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn bus_indices(model: &FeederModel, labels: &[u32]) -> Result<Vec<usize>> {
    labels
        .iter()
        .map(|&l| model.bus_index(l).with_context(|| format!("feeder has no bus {l}")))
        .collect()
}

fn generate(a: GenerateArgs) -> Result<()> {
    let model = feeder(&a.feeder)?;
    let mut cfg: GenerateConfig = read_toml(&a.config)?;
    if let Some(seed) = a.seed {
        cfg.profile.seed = seed;
    }
    let pmus = bus_indices(&model, &cfg.pmu_buses)?;
    let metered = bus_indices(&model, &cfg.metered)?;
    let template = plan_measurements(&model, &pmus, &metered, cfg.pseudo_noise)?;
    let ds = generate_dataset(&model, &cfg.profile, &template)?;
    save_dataset(&a.out, &ds).with_context(|| format!("writing {}", a.out.display()))?;
    eprintln!(
        "{} samples, {} rows each, {} power-flow redraws, hash {}",
        ds.len(),
        template.len(),
        ds.redraws,
        &ds.config_hash[..16]
    );
    if let Some(dir) = a.export_dir {
        fs::create_dir_all(&dir)?;
        for i in 0..a.export_count.min(ds.len()) {
            let path = dir.join(format!("sample-{i}.csv"));
            write_measurements(&model, &ds.measurement(i), BufWriter::new(File::create(&path)?))?;
        }
    }
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let model = feeder(&a.feeder)?;
    let mut cfg: TrainConfig = match &a.config {
        Some(p) => read_toml(p)?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    if a.block_width == 0 {
        bail!("block width must be positive");
    }
    let ds = load_dataset(&a.dataset, &model)?;
    let pmus = ds.template.rows.iter().filter(|m| m.class.is_pmu()).map(|m| m.locus.bus());
    let mut pmus: Vec<usize> = pmus.collect();
    pmus.sort_unstable();
    pmus.dedup();
    let plan = MaskPlan::for_pmus(&model, &pmus, a.kind, a.block_width)?;
    let split = split_indices(cfg.seed, ds.len(), cfg.train_fraction);
    if split.train.is_empty() {
        bail!("train fraction {} leaves no training samples", cfg.train_fraction);
    }
    let net = train_on_split(&model, &plan, &ds, &split.train, &cfg)?;
    save_checkpoint(&a.out, &model, &net, Some(&cfg)).with_context(|| format!("writing {}", a.out.display()))?;
    if !split.test.is_empty() {
        let test: Vec<nn::Sample> = split.test.iter().map(|&i| ds.samples[i].clone()).collect();
        let report = net.evaluate(&test)?;
        eprintln!("test nu {:.4e} over {} samples", report.nu, report.n);
    }
    let counts = count_params(&plan);
    eprintln!(
        "{} plan, depth {}, {} parameters ({} unpruned)",
        a.kind,
        plan.depth,
        if a.kind == PlanKind::P2n2 { counts.p2n2_params } else { counts.pawnn_params },
        counts.pawnn_params
    );
    Ok(())
}

fn estimate(a: EstimateArgs) -> Result<()> {
    let model = feeder(&a.feeder)?;
    let file = File::open(&a.measurements).with_context(|| format!("opening {}", a.measurements.display()))?;
    let z = read_measurements(&model, BufReader::new(file))?;
    let magnitudes = match &a.checkpoint {
        Some(path) => load_checkpoint(path, &model)?.estimate(&z)?,
        None => {
            if !a.wls {
                bail!("pass --checkpoint <file> or --wls");
            }
            let report = wls::estimate(&model, &z, &WlsConfig::default())?;
            eprintln!("wls converged in {} iterations, objective {:.4e}", report.iterations, report.objective);
            magnitudes_pu(&model, &report.x_hat)
        }
    };
    let out: Box<dyn Write> = match &a.out {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(io::stdout().lock()),
    };
    let mut out = out;
    writeln!(out, "bus,phase,v_pu")?;
    for (&(b, p), v) in StateLayout::new(&model).slots().iter().zip(&magnitudes) {
        writeln!(out, "{},{},{v}", model.label(b), p)?;
    }
    out.flush()?;
    Ok(())
}

fn bench(a: BenchArgs) -> Result<()> {
    let mut suite: SuiteConfig = read_toml(&a.suite)?;
    if let Some(seed) = a.seed {
        suite.seed = seed;
    }
    let base = a.suite.parent().unwrap_or(Path::new("."));
    let model = feeder(&base.join(&suite.feeder))?;
    let report = pipeline::run_suite(&model, &suite, Some(&a.out.join("datasets")))?;
    let dir = a.out.join(&report.config_hash[..16]);
    let labels: Vec<u32> = (0..model.bus_count()).map(|b| model.label(b)).collect();
    write_report(&dir, &report, &labels)?;
    print!("{}", format_table(&report.rows));
    eprintln!("report written to {}", dir.display());
    Ok(())
}

fn masks(a: MasksArgs) -> Result<()> {
    let model = feeder(&a.feeder)?;
    let pmus = bus_indices(&model, &a.pmus)?;
    let plan = MaskPlan::for_pmus(&model, &pmus, a.kind, a.block_width)?;
    match &a.out {
        Some(p) => write_mask_plan(&model, &plan, BufWriter::new(File::create(p)?))?,
        None => write_mask_plan(&model, &plan, io::stdout().lock())?,
    }
    let counts = count_params(&plan);
    eprintln!(
        "depth {}, plan hash {}, parameters: pawnn {}, p2n2 {}",
        plan.depth,
        &plan.hash()[..16],
        counts.pawnn_params,
        counts.p2n2_params
    );
    Ok(())
}
