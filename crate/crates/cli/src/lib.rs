//! Batch front-end: every subcommand reads one JSON run configuration,
//! writes the resolved configuration next to its artifacts and reports
//! success or failure through the process exit code.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use disent_core::equilibrium::{
    dependent_scenario, independent_scenario, scenario_sweep, DiscreteJoint, SweepReport, DEFAULT_SWEEP_BUDGET,
};
use disent_core::flf::{train_flf_logged, FlfConfig, FlfModel};
use disent_core::gradsuite::{run_gradient_suite, GradSuiteReport};
use disent_core::metric_train::{train_metric_logged, MetricTrainConfig};
use disent_core::mining::{cost_report, CostMethod, CostReport};
use disent_core::probe::{dump_embeddings, probe_accuracy_matrix, ProbeReport};
use disent_core::synthdata::{gen_identity_expression_dataset, Dataset};
use disent_core::CoreError;
use disent_tensor::ParamStore;
use serde::{Deserialize, Serialize};

pub const CONFIG_FILE: &str = "config.json";
pub const DATASET_FILE: &str = "dataset.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const REPORT_FILE: &str = "report.json";
pub const EMBEDDINGS_FILE: &str = "embeddings.csv";
pub const EQUILIBRIUM_FILE: &str = "equilibrium.csv";

#[derive(Debug, Parser)]
#[command(name = "disent", version, about = "Metric-learning and adversarial disentanglement lab")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// JSON run configuration; every key is optional.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory for artifacts.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Overrides the configuration's seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset CSV.
    GenData,
    /// Train a metric loss on identity/expression data.
    TrainMetric,
    /// Train the adversarial FLF model.
    TrainFlf,
    /// Probe a trained FLF checkpoint.
    Probe,
    /// Run the finite-difference gradient suite.
    Gradcheck,
    /// Sweep every deterministic encoder of a discrete toy.
    Equilibrium,
    /// Print input-pass and distance counts for a batch layout.
    Costs,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    /// Class/attribute/latent factors, generated from the `flf` section.
    #[default]
    Factor,
    /// Subject/expression data, generated from the `metric` section.
    Identity,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenDataConfig {
    pub kind: DataKind,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    /// Checkpoint to probe; defaults to the one in the output directory.
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    #[default]
    Independent,
    Dependent,
    /// The table given under `joint`.
    Custom,
}

/// `prob` is indexed `[(x · s_size + s) · y_size + y]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointTable {
    pub x_size: usize,
    pub s_size: usize,
    pub y_size: usize,
    pub prob: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EquilibriumConfig {
    pub scenario: Scenario,
    pub joint: Option<JointTable>,
    pub d_size: usize,
    pub alphas: Vec<f64>,
    pub budget: u64,
}

impl Default for EquilibriumConfig {
    fn default() -> Self {
        Self {
            scenario: Scenario::Independent,
            joint: None,
            d_size: 2,
            alphas: vec![0.1, 0.5, 0.9],
            budget: DEFAULT_SWEEP_BUDGET,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostsConfig {
    pub tuplet_size: u64,
    pub n: u64,
    pub m: u64,
    pub method: CostMethod,
}

impl Default for CostsConfig {
    fn default() -> Self {
        Self {
            tuplet_size: 12,
            n: 6,
            m: 6,
            method: CostMethod::TupleClusters,
        }
    }
}

/// The whole run configuration. Each subcommand reads its own section; the
/// top-level `seed` is authoritative and is copied into every section.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Dataset CSV to train or probe on instead of generating one.
    pub dataset: Option<PathBuf>,
    pub gen_data: GenDataConfig,
    pub metric: MetricTrainConfig,
    pub flf: FlfConfig,
    pub probe: ProbeConfig,
    pub equilibrium: EquilibriumConfig,
    pub costs: CostsConfig,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error at line {line}, column {column}: {message}")]
    Config { line: usize, column: usize, message: String },
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Output(String),
    #[error("{0}")]
    ChecksFailed(String),
}

impl CliError {
    /// 2 for configuration problems, 3 for divergence, 4 for mining
    /// failures, 1 for everything else.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config { .. } => 2,
            CliError::Core(CoreError::Divergence { .. }) => 3,
            CliError::Core(CoreError::Mining(_)) => 4,
            _ => 1,
        }
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Output(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Output(e.to_string())
    }
}

impl From<disent_tensor::TensorError> for CliError {
    fn from(e: disent_tensor::TensorError) -> Self {
        CliError::Core(e.into())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// 1-based line of the first occurrence of `"key"`, or 1.
fn line_of(text: &str, key: &str) -> usize {
    let needle = format!("\"{key}\"");
    text.lines().position(|l| l.contains(&needle)).map_or(1, |i| i + 1)
}

fn section_error(text: &str, section: &str, err: impl std::fmt::Display) -> CliError {
    CliError::Config {
        line: line_of(text, section),
        column: 1,
        message: format!("{section}: {err}"),
    }
}

impl RunConfig {
    /// Parses and validates a configuration. Errors carry the line of the
    /// offending text (for semantic errors, the line of its section key).
    pub fn parse(text: &str, seed_override: Option<u64>) -> CliResult<Self> {
        let mut config: RunConfig = serde_json::from_str(text).map_err(|e| CliError::Config {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        if let Some(seed) = seed_override {
            config.seed = seed;
        }
        config.metric.seed = config.seed;
        config.flf.seed = config.seed;
        config.metric.validate().map_err(|e| section_error(text, "metric", e))?;
        config.flf.validate().map_err(|e| section_error(text, "flf", e))?;
        let eq = &config.equilibrium;
        if eq.d_size == 0 || eq.alphas.is_empty() || eq.alphas.iter().any(|a| !a.is_finite()) {
            return Err(section_error(text, "equilibrium", "need d_size ≥ 1 and a non-empty list of finite alphas"));
        }
        if (eq.scenario == Scenario::Custom) != eq.joint.is_some() {
            return Err(section_error(text, "equilibrium", "`joint` must be given exactly when scenario is custom"));
        }
        if let Some(j) = &eq.joint {
            DiscreteJoint::new(j.x_size, j.s_size, j.y_size, j.prob.clone())
                .map_err(|e| section_error(text, "joint", e))?;
        }
        let c = &config.costs;
        if c.tuplet_size == 0 || c.n == 0 || c.m == 0 {
            return Err(section_error(text, "costs", "tuplet_size, n and m must be positive"));
        }
        Ok(config)
    }

    pub fn load(path: Option<&Path>, seed_override: Option<u64>) -> CliResult<Self> {
        let text = match path {
            Some(p) => fs::read_to_string(p).map_err(|e| CliError::Config {
                line: 0,
                column: 0,
                message: format!("cannot read {}: {e}", p.display()),
            })?,
            None => "{}".to_string(),
        };
        Self::parse(&text, seed_override)
    }

    fn dataset_or(&self, generate: impl FnOnce() -> disent_core::Result<Dataset>) -> CliResult<Dataset> {
        Ok(match &self.dataset {
            Some(path) => Dataset::load_csv(path)?,
            None => generate()?,
        })
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Streams rows to a CSV file, flushing each one so a failed run still
/// leaves everything logged before the failure.
struct RowSink {
    writer: csv::Writer<BufWriter<File>>,
}

impl RowSink {
    fn create(path: &Path) -> CliResult<Self> {
        Ok(Self {
            writer: csv::Writer::from_writer(BufWriter::new(File::create(path)?)),
        })
    }

    fn push<T: Serialize>(&mut self, row: &T) -> disent_core::Result<()> {
        self.writer.serialize(row)?;
        self.writer.flush()?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub nn1_accuracy: f64,
    pub raw_nn1_accuracy: f64,
    pub train_size: usize,
    pub test_size: usize,
}

/// Executes one subcommand and writes its artifacts under `out`.
pub fn execute(command: Command, config: &RunConfig, out: &Path) -> CliResult<()> {
    fs::create_dir_all(out)?;
    write_json(&out.join(CONFIG_FILE), config)?;
    match command {
        Command::GenData => {
            let ds = match config.gen_data.kind {
                DataKind::Factor => config.flf.dataset()?,
                DataKind::Identity => gen_identity_expression_dataset(&config.metric.data, config.seed)?,
            };
            ds.save_csv(&out.join(DATASET_FILE))?;
            println!("wrote {} samples to {}", ds.len(), out.join(DATASET_FILE).display());
        }
        Command::TrainMetric => {
            let ds = config.dataset_or(|| gen_identity_expression_dataset(&config.metric.data, config.seed))?;
            let mut sink = RowSink::create(&out.join(METRICS_FILE))?;
            let result = train_metric_logged(&config.metric, &ds, |row| sink.push(row))?;
            result.params.save(&out.join(CHECKPOINT_FILE))?;
            let report = MetricReport {
                nn1_accuracy: result.nn1_accuracy,
                raw_nn1_accuracy: result.raw_nn1_accuracy,
                train_size: result.train_indices.len(),
                test_size: result.test_indices.len(),
            };
            write_json(&out.join(REPORT_FILE), &report)?;
            println!(
                "1-NN accuracy: learned {:.4}, raw {:.4}",
                report.nn1_accuracy, report.raw_nn1_accuracy
            );
        }
        Command::TrainFlf => {
            let ds = config.dataset_or(|| config.flf.dataset())?;
            let (train, _) = config.flf.split_of(ds.len());
            let mut sink = RowSink::create(&out.join(METRICS_FILE))?;
            let model = train_flf_logged(&config.flf, &ds, &train, |row| sink.push(row))?;
            model.params.save(&out.join(CHECKPOINT_FILE))?;
            println!("trained {} iterations; checkpoint in {}", config.flf.iters, out.join(CHECKPOINT_FILE).display());
        }
        Command::Probe => {
            let report = probe(config, out)?;
            println!(
                "y|d {:.4}  s|d {:.4}  y|l {:.4}  s|l {:.4}  (chance y {:.4}, s {:.4})",
                report.acc_y_given_d,
                report.acc_s_given_d,
                report.acc_y_given_l,
                report.acc_s_given_l,
                report.chance_y,
                report.chance_s
            );
        }
        Command::Gradcheck => {
            let report = gradcheck(config.seed, out)?;
            if !report.passed() {
                return Err(CliError::ChecksFailed(format!(
                    "gradient check failed: max relative error {:e} exceeds {:e}",
                    report.max_rel_error(),
                    report.tolerance
                )));
            }
        }
        Command::Equilibrium => {
            let report = equilibrium(config)?;
            let mut buf = Vec::new();
            report.write_csv(&mut buf)?;
            fs::write(out.join(EQUILIBRIUM_FILE), &buf)?;
            print!("{}", String::from_utf8_lossy(&buf));
        }
        Command::Costs => {
            let c = &config.costs;
            let report: CostReport = cost_report(c.tuplet_size, c.n, c.m, c.method);
            write_json(&out.join(REPORT_FILE), &report)?;
            println!("passes={} distances={}", report.input_passes, report.distance_calculations);
        }
    }
    Ok(())
}

/// Probes the FLF checkpoint named in the config (or `out/checkpoint.json`)
/// and writes the report and the code dump.
pub fn probe(config: &RunConfig, out: &Path) -> CliResult<ProbeReport> {
    let ckpt = config.probe.checkpoint.clone().unwrap_or_else(|| out.join(CHECKPOINT_FILE));
    let params = ParamStore::load(&ckpt)?;
    let model = FlfModel::from_params(config.flf.dims(), params)?;
    let ds = config.dataset_or(|| config.flf.dataset())?;
    let (train, test) = config.flf.split_of(ds.len());
    let report = probe_accuracy_matrix(&model, &ds, &train, &test)?;
    write_json(&out.join(REPORT_FILE), &report)?;
    dump_embeddings(&model, &ds, &out.join(EMBEDDINGS_FILE))?;
    Ok(report)
}

/// Runs the gradient suite, prints one line per case and writes the report.
pub fn gradcheck(seed: u64, out: &Path) -> CliResult<GradSuiteReport> {
    let report = run_gradient_suite(seed)?;
    let mut stdout = std::io::stdout().lock();
    for c in &report.cases {
        writeln!(
            stdout,
            "{:<32} {} points  max rel error {:.3e}  {}",
            c.name,
            c.points,
            c.max_rel_error,
            if c.passed { "ok" } else { "FAILED" }
        )?;
    }
    writeln!(stdout, "max relative error: {:.3e} (tolerance {:.0e})", report.max_rel_error(), report.tolerance)?;
    write_json(&out.join(REPORT_FILE), &report)?;
    Ok(report)
}

pub fn equilibrium(config: &RunConfig) -> CliResult<SweepReport> {
    let eq = &config.equilibrium;
    let q = match (eq.scenario, &eq.joint) {
        (Scenario::Independent, _) => independent_scenario(),
        (Scenario::Dependent, _) => dependent_scenario(),
        (Scenario::Custom, Some(j)) => DiscreteJoint::new(j.x_size, j.s_size, j.y_size, j.prob.clone())?,
        (Scenario::Custom, None) => unreachable!("validated when the config was parsed"),
    };
    Ok(scenario_sweep(&q, eq.d_size, &eq.alphas, eq.budget)?)
}

/// Parses arguments' configuration, runs the command and maps the outcome
/// to an exit code.
pub fn run(cli: &Cli) -> u8 {
    let outcome = RunConfig::load(cli.config.as_deref(), cli.seed).and_then(|c| execute(cli.command, &c, &cli.out));
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
