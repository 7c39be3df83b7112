//! Command-line surface: fit real data, simulate datasets, and run the
//! Monte Carlo benchmark grid.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use ctsls::dataset::{self, ColumnSpec};
use ctsls::estimator::{fit_cols, fit_ctsls, FitOptions, FitResult};
use ctsls::mc_harness::{run_grid, summarize, EstimatorKind};
use ctsls::simgen::{
    calibration_for, derive_seed, generate_dataset, ErrorScenario, SimConfig, TrueParams,
};

const EXIT_NONCONVERGED: u8 = 1;
const EXIT_INPUT_ERROR: u8 = 2;

#[derive(Parser)]
#[command(
    name = "ctsls",
    version,
    about = "Censored two-stage least squares for IV accelerated-failure-time analysis"
)]
struct Cli {
    /// Worker threads (fallback: CTSLS_THREADS, then available parallelism)
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit cTSLS and the cOLS comparator to a dataset CSV
    Fit {
        /// Input CSV (columns time,status,x,d1..dp,z1..zq)
        #[arg(long)]
        input: PathBuf,
        /// Write the JSON report here (defaults to standard output)
        #[arg(long)]
        output: Option<PathBuf>,
        /// Optional column-binding JSON overriding the default schema
        #[arg(long)]
        columns: Option<PathBuf>,
        /// Stopping tolerance of the reweighting loop (max-norm)
        #[arg(long, default_value_t = 1e-3)]
        tol: f64,
        /// Maximum reweighting iterations
        #[arg(long, default_value_t = 10)]
        kmax: usize,
        /// Keep unit weights (the unweighted comparator)
        #[arg(long)]
        unweighted: bool,
        /// Input times are on the raw scale; log-transform at load
        #[arg(long)]
        raw_time: bool,
    },
    /// Generate one simulated dataset CSV plus an oracle sidecar JSON
    Simulate {
        /// Simulation config JSON
        #[arg(long)]
        input: PathBuf,
        /// Output CSV path (sidecar goes to <output>.oracle.json)
        #[arg(long)]
        output: PathBuf,
        /// Override the config's master seed
        #[arg(long)]
        seed: Option<u64>,
        /// Write raw-scale times instead of log times
        #[arg(long)]
        raw_time: bool,
    },
    /// Run a Monte Carlo grid and write report.csv / report.json
    Benchmark {
        /// Grid specification JSON
        #[arg(long)]
        grid: PathBuf,
        /// Output directory for the report files
        #[arg(long)]
        output: PathBuf,
        /// Replicates per cell (overrides the grid file)
        #[arg(long)]
        replicates: Option<usize>,
        /// Override the master seed for every cell
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 1e-3)]
        tol: f64,
        #[arg(long, default_value_t = 10)]
        kmax: usize,
    },
}

/// Scenario given either by paper name ("1"/"2") or spelled out in full.
#[derive(Deserialize)]
#[serde(untagged)]
enum ScenarioSpec {
    Name(String),
    Full(ErrorScenario),
}

impl ScenarioSpec {
    fn resolve(self) -> ctsls::Result<ErrorScenario> {
        match self {
            Self::Name(name) => ErrorScenario::by_name(&name),
            Self::Full(s) => {
                s.validate()?;
                Ok(s)
            }
        }
    }
}

#[derive(Deserialize)]
struct SimSpec {
    n: usize,
    censor_rate: f64,
    scenario: ScenarioSpec,
    #[serde(default)]
    true_params: Option<TrueParams>,
    seed: u64,
    #[serde(default)]
    calibration_pop: Option<usize>,
    /// Replicate index within the seed's stream family.
    #[serde(default)]
    replicate: usize,
}

impl SimSpec {
    fn into_config(self, seed_override: Option<u64>) -> ctsls::Result<(SimConfig, usize)> {
        let config = SimConfig {
            n: self.n,
            censor_rate: self.censor_rate,
            scenario: self.scenario.resolve()?,
            true_params: self.true_params.unwrap_or_default(),
            seed: seed_override.unwrap_or(self.seed),
            calibration_pop: self.calibration_pop.unwrap_or(100_000),
        };
        config.validate()?;
        Ok((config, self.replicate))
    }
}

#[derive(Deserialize)]
struct GridSpec {
    cells: Vec<SimSpec>,
    #[serde(default)]
    estimators: Option<Vec<String>>,
    #[serde(default)]
    replicates: Option<usize>,
    #[serde(default)]
    seed: Option<u64>,
}

struct Failure {
    code: u8,
    message: String,
}

impl From<ctsls::Error> for Failure {
    fn from(e: ctsls::Error) -> Self {
        Failure {
            code: EXIT_INPUT_ERROR,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure {
            code: EXIT_INPUT_ERROR,
            message: e.to_string(),
        }
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure {
            code: EXIT_INPUT_ERROR,
            message: format!("JSON parse error: {e}"),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = cli.threads.or_else(|| {
        std::env::var("CTSLS_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
    });
    if let Some(t) = threads {
        // ignore the error if a pool already exists (tests)
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global();
    }
    match run(cli.command) {
        Ok(code) => code,
        Err(f) => {
            // machine-readable error on stdout, human message on stderr
            println!("{}", json!({ "error": f.message }));
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run(command: Command) -> Result<ExitCode, Failure> {
    match command {
        Command::Fit {
            input,
            output,
            columns,
            tol,
            kmax,
            unweighted,
            raw_time,
        } => cmd_fit(&input, output.as_deref(), columns.as_deref(), tol, kmax, unweighted, raw_time),
        Command::Simulate {
            input,
            output,
            seed,
            raw_time,
        } => cmd_simulate(&input, &output, seed, raw_time),
        Command::Benchmark {
            grid,
            output,
            replicates,
            seed,
            tol,
            kmax,
        } => cmd_benchmark(&grid, &output, replicates, seed, tol, kmax),
    }
}

#[derive(Serialize)]
struct EstimatorReport {
    theta: ctsls::ParameterVector,
    beta1: f64,
    beta1_se: f64,
    beta1_ci: (f64, f64),
    beta1_p: f64,
    std_errors: Vec<f64>,
    conf_intervals: Vec<(f64, f64)>,
    p_values: Vec<f64>,
    iterations: usize,
    converged: bool,
    first_stage_r2: f64,
    a_condition: f64,
    clamp_activations: usize,
    runtime_s: f64,
}

impl EstimatorReport {
    fn from_fit(fit: &FitResult, runtime_s: f64) -> Self {
        let k = fit.theta.beta1_index();
        Self {
            theta: fit.theta.clone(),
            beta1: fit.beta1(),
            beta1_se: fit.std_errors[k],
            beta1_ci: fit.conf_intervals[k],
            beta1_p: fit.p_values[k],
            std_errors: fit.std_errors.clone(),
            conf_intervals: fit.conf_intervals.clone(),
            p_values: fit.p_values.clone(),
            iterations: fit.iterations,
            converged: fit.converged,
            first_stage_r2: fit.diagnostics.first_stage_r2,
            a_condition: fit.diagnostics.a_condition,
            clamp_activations: fit.diagnostics.clamp_activations,
            runtime_s,
        }
    }
}

fn cmd_fit(
    input: &Path,
    output: Option<&Path>,
    columns: Option<&Path>,
    tol: f64,
    kmax: usize,
    unweighted: bool,
    raw_time: bool,
) -> Result<ExitCode, Failure> {
    let mut spec = match columns {
        Some(path) => ColumnSpec::from_json_reader(fs::File::open(path)?)?,
        None => ColumnSpec::default(),
    };
    spec.raw_time = spec.raw_time || raw_time;
    let sample = dataset::load_csv(input, &spec)?;
    let warnings = dataset::validate(&sample);

    let opts = FitOptions {
        tol,
        kmax,
        weighted: !unweighted,
    };
    let ctsls_name = if unweighted {
        "ctsls_unweighted"
    } else {
        "ctsls_weighted"
    };

    let start = Instant::now();
    let ctsls_fit = fit_ctsls(&sample, &opts)?;
    let ctsls_time = start.elapsed().as_secs_f64();
    let start = Instant::now();
    let cols_fit = fit_cols(&sample)?;
    let cols_time = start.elapsed().as_secs_f64();

    let report = json!({
        "input": input.display().to_string(),
        "n": sample.n(),
        "p": sample.p(),
        "q": sample.q(),
        "censoring_fraction": sample.censoring_fraction(),
        "warnings": warnings.iter().map(|w| w.to_string()).collect::<Vec<_>>(),
        "options": { "tol": tol, "kmax": kmax, "weighted": !unweighted },
        "estimators": {
            ctsls_name: EstimatorReport::from_fit(&ctsls_fit, ctsls_time),
            "cols": EstimatorReport::from_fit(&cols_fit, cols_time),
        },
    });
    let rendered = serde_json::to_string_pretty(&report)?;

    print_fit_table(ctsls_name, &ctsls_fit, &cols_fit, &warnings);
    match output {
        Some(path) => fs::write(path, rendered + "\n")?,
        None => println!("{rendered}"),
    }

    if ctsls_fit.converged {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!(
            "warning: reweighting loop did not converge within {kmax} iterations"
        );
        Ok(ExitCode::from(EXIT_NONCONVERGED))
    }
}

fn print_fit_table(
    ctsls_name: &str,
    ctsls_fit: &FitResult,
    cols_fit: &FitResult,
    warnings: &[dataset::Warning],
) {
    println!(
        "{:<18} {:>10} {:>10} {:>22} {:>10} {:>6} {:>5}",
        "estimator", "beta1", "se", "95% CI", "p", "iter", "conv"
    );
    for (name, fit) in [(ctsls_name, ctsls_fit), ("cols", cols_fit)] {
        let k = fit.theta.beta1_index();
        let (lo, hi) = fit.conf_intervals[k];
        println!(
            "{:<18} {:>10.4} {:>10.4} {:>22} {:>10.3e} {:>6} {:>5}",
            name,
            fit.beta1(),
            fit.std_errors[k],
            format!("({lo:.4}, {hi:.4})"),
            fit.p_values[k],
            fit.iterations,
            if fit.converged { "yes" } else { "no" },
        );
    }
    for w in warnings {
        println!("warning: {w}");
    }
}

fn cmd_simulate(
    input: &Path,
    output: &Path,
    seed: Option<u64>,
    raw_time: bool,
) -> Result<ExitCode, Failure> {
    let spec: SimSpec = serde_json::from_reader(fs::File::open(input)?)?;
    let (config, replicate) = spec.into_config(seed)?;
    let calibration = calibration_for(&config)?;
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(derive_seed(
        config.seed,
        replicate as u64 + 1,
    ));
    let (sample, oracle) = generate_dataset(&config, &calibration, &mut rng)?;

    let file = fs::File::create(output)?;
    dataset::write_csv(&sample, file, raw_time)?;

    let sidecar_path = sidecar_path(output);
    let sidecar = json!({
        "beta1_true": oracle.beta1_true,
        "y_true": oracle.y_true,
        "calibration": calibration,
        "seed": config.seed,
        "replicate": replicate,
        "n": config.n,
        "censor_rate": config.censor_rate,
        "realized_censoring_fraction": sample.censoring_fraction(),
    });
    let mut f = fs::File::create(&sidecar_path)?;
    writeln!(f, "{}", serde_json::to_string_pretty(&sidecar)?)?;
    eprintln!(
        "wrote {} and {}",
        output.display(),
        sidecar_path.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn sidecar_path(output: &Path) -> PathBuf {
    let mut name = output
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "output".into());
    name.push_str(".oracle.json");
    output.with_file_name(name)
}

fn parse_estimators(names: Option<Vec<String>>) -> Result<Vec<EstimatorKind>, Failure> {
    match names {
        None => Ok(EstimatorKind::all().to_vec()),
        Some(list) => list
            .iter()
            .map(|n| {
                EstimatorKind::all()
                    .into_iter()
                    .find(|k| k.name() == n)
                    .ok_or_else(|| Failure {
                        code: EXIT_INPUT_ERROR,
                        message: format!("unknown estimator `{n}`"),
                    })
            })
            .collect(),
    }
}

fn cmd_benchmark(
    grid_path: &Path,
    out_dir: &Path,
    replicates: Option<usize>,
    seed: Option<u64>,
    tol: f64,
    kmax: usize,
) -> Result<ExitCode, Failure> {
    let spec: GridSpec = serde_json::from_reader(fs::File::open(grid_path)?)?;
    let estimators = parse_estimators(spec.estimators)?;
    let replicates = replicates.or(spec.replicates).unwrap_or(500);
    let seed = seed.or(spec.seed);
    if replicates < 2 {
        return Err(Failure {
            code: EXIT_INPUT_ERROR,
            message: "at least 2 replicates required".into(),
        });
    }

    let mut grid = Vec::with_capacity(spec.cells.len());
    for cell in spec.cells {
        let (config, _) = cell.into_config(seed)?;
        grid.push(config);
    }

    let opts = FitOptions {
        tol,
        kmax,
        weighted: true,
    };
    fs::create_dir_all(out_dir)?;
    let mut reports = Vec::with_capacity(grid.len());
    for (i, config) in grid.iter().enumerate() {
        eprintln!(
            "cell {}/{}: scenario={} n={} censor_rate={} R={replicates}",
            i + 1,
            grid.len(),
            config.scenario.name,
            config.n,
            config.censor_rate
        );
        let mut cell_reports =
            run_grid(std::slice::from_ref(config), replicates, &estimators, &opts)?;
        reports.append(&mut cell_reports);
    }

    let csv_file = fs::File::create(out_dir.join("report.csv"))?;
    let json_file = fs::File::create(out_dir.join("report.json"))?;
    summarize(&reports, csv_file, json_file)?;
    eprintln!(
        "wrote {} and {}",
        out_dir.join("report.csv").display(),
        out_dir.join("report.json").display()
    );
    Ok(ExitCode::SUCCESS)
}
