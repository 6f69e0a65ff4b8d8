use std::fs::{self, File};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use exante::dataio::{generate_synthetic, ingest, select_variables, SelectionOptions, SyntheticSpec};
use exante::measures::MeasureKind;
use exante::panel::Domain;
use exante::pipeline::{replay, run_pipeline, DataSource, PipelineError, RunConfig};
use exante::Error;

#[derive(Parser)]
#[command(name = "exante", version, about = "Ex ante accuracy of dispersion forecasts under market shocks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit, forecast, bootstrap every scenario and write the reports.
    Run(RunArgs),
    /// Re-run a manifest and check that every artifact is reproduced.
    Replay {
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, env = "EXANTE_WORKERS")]
        workers: Option<usize>,
    },
    /// Run covariate selection and print the trace as JSON.
    Select {
        #[command(flatten)]
        source: SourceArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        subset_cap: Option<usize>,
    },
    /// Write a synthetic dataset as CSV.
    Generate {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Clone)]
struct SourceArgs {
    /// Transactions CSV.
    #[arg(long, conflicts_with = "synthetic")]
    data: Option<PathBuf>,
    /// Generate synthetic data with this seed.
    #[arg(long)]
    synthetic: Option<u64>,
    /// Numeric columns to treat as 0-1 indicators.
    #[arg(long, value_delimiter = ',')]
    binary: Vec<String>,
}

#[derive(Args)]
struct RunArgs {
    /// TOML run configuration; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    source: SourceArgs,
    /// Scenario names or TOML paths.
    #[arg(long, value_delimiter = ',')]
    scenarios: Option<Vec<String>>,
    #[arg(short = 'B', long = "iterations")]
    iterations: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_delimiter = ',')]
    measures: Option<Vec<MeasureKind>>,
    #[arg(long, value_delimiter = ',')]
    domains: Option<Vec<Domain>>,
    #[arg(long, value_delimiter = ',')]
    qape: Option<Vec<f64>>,
    #[arg(long, env = "EXANTE_WORKERS")]
    workers: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Moderate and high ratio thresholds, e.g. `1.15,2`.
    #[arg(long, value_delimiter = ',', num_args = 2)]
    thresholds: Option<Vec<f64>>,
    /// Keep the variance ratio fixed across bootstrap samples.
    #[arg(long)]
    no_refit: bool,
    /// Run covariate selection before fitting.
    #[arg(long)]
    select: bool,
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::InvalidArgument(_) | Error::Scenario(_) => 2,
        Error::Data(_)
        | Error::MissingColumn(_)
        | Error::Csv(_)
        | Error::Io(_)
        | Error::EmptySample
        | Error::NoBasePeriod(_)
        | Error::Selection(_)
        | Error::DimensionMismatch { .. } => 3,
        Error::TooManyFailures { .. } => 5,
        Error::Numerical(_) | Error::SingularDesign(_) | Error::InsufficientSample(_) => 4,
    }
}

fn data_source(src: &SourceArgs) -> Option<DataSource> {
    if let Some(path) = &src.data {
        return Some(DataSource::Csv { path: path.clone(), binary: src.binary.clone() });
    }
    src.synthetic.map(|seed| DataSource::Synthetic { seed, spec: SyntheticSpec::default() })
}

fn build_config(args: RunArgs) -> Result<RunConfig, Error> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::from_toml(&fs::read_to_string(path)?)?,
        None => RunConfig::default(),
    };
    if let Some(d) = data_source(&args.source) {
        cfg.data = d;
    }
    if let Some(v) = args.scenarios {
        cfg.scenarios = v;
    }
    if let Some(v) = args.iterations {
        cfg.iterations = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.measures {
        cfg.measures = v;
    }
    if let Some(v) = args.domains {
        cfg.domains = v;
    }
    if let Some(v) = args.qape {
        cfg.qape_orders = v;
    }
    if let Some(v) = args.workers {
        cfg.workers = Some(v);
    }
    if let Some(v) = args.out {
        cfg.out_dir = v;
    }
    if let Some(v) = args.thresholds {
        cfg.thresholds.moderate = v[0];
        cfg.thresholds.high = v[1];
    }
    if args.no_refit {
        cfg.refit = false;
    }
    if args.select && cfg.selection.is_none() {
        cfg.selection = Some(SelectionOptions::default());
    }
    Ok(cfg)
}

fn report(err: PipelineError) -> ExitCode {
    eprintln!("error: {err}");
    ExitCode::from(exit_code(&err.source))
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Run(args) => {
            let cfg = match build_config(args) {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("error: {e}");
                    return Ok(ExitCode::from(exit_code(&e)));
                }
            };
            match run_pipeline(&cfg) {
                Ok(summary) => {
                    println!("wrote {} artifacts to {}", summary.artifacts.len(), summary.out_dir.display());
                    if summary.failed_iterations > 0 {
                        println!("{} bootstrap iterations failed", summary.failed_iterations);
                    }
                    Ok(ExitCode::SUCCESS)
                }
                Err(e) => Ok(report(e)),
            }
        }
        Command::Replay { manifest, out, workers } => match replay(&manifest, &out, workers) {
            Ok(outcome) if outcome.identical() => {
                println!("all {} artifacts reproduced", outcome.summary.artifacts.len());
                Ok(ExitCode::SUCCESS)
            }
            Ok(outcome) => {
                eprintln!("artifacts differ: {}", outcome.mismatched.join(", "));
                Ok(ExitCode::from(4))
            }
            Err(e) => Ok(report(e)),
        },
        Command::Select { source, seed, subset_cap } => {
            let ds = match (&source.data, source.synthetic) {
                (Some(path), _) => {
                    let (ds, rep) = ingest(File::open(path).with_context(|| format!("opening {}", path.display()))?, &source.binary)?;
                    eprintln!("accepted {} records, rejected {}", rep.accepted, rep.rejected_missing + rep.rejected_invalid);
                    ds
                }
                (None, Some(s)) => generate_synthetic(&SyntheticSpec::default(), s)?.dataset,
                (None, None) => anyhow::bail!("either --data or --synthetic is required"),
            };
            let mut opts = SelectionOptions { seed, ..Default::default() };
            if let Some(c) = subset_cap {
                opts.subset_cap = c;
            }
            match select_variables(&ds, &opts) {
                Ok(trace) => {
                    println!("{}", serde_json_string(&trace)?);
                    Ok(ExitCode::SUCCESS)
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    Ok(ExitCode::from(exit_code(&e)))
                }
            }
        }
        Command::Generate { seed, n, out } => {
            let mut spec = SyntheticSpec::default();
            if let Some(n) = n {
                spec.n = n;
            }
            let data = generate_synthetic(&spec, seed)?;
            data.dataset.write_csv(File::create(&out).with_context(|| format!("creating {}", out.display()))?)?;
            println!("wrote {} records to {}", data.dataset.len(), out.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn serde_json_string<T: serde::Serialize>(value: &T) -> anyhow::Result<String> {
    Ok(serde_json::to_string_pretty(value)?)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(3)
        }
    }
}
