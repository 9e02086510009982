//! `ectn`: train, evaluate and benchmark ECTN models on QoS logs.
//!
//! Exit status: 0 success, 1 usage error, 2 data error, 3 numerical failure.

mod commands;
mod error;
mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ectn_core::Dims;

use commands::{EvalData, Scale};
use error::CliError;
use manifest::{DataSource, ExperimentManifest, SynthSettings, TrainSettings};

#[derive(Debug, Parser)]
#[command(name = "ectn", version, about = "ECTN tensor completion for QoS data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train on repeated random splits and write one run directory per split.
    Train(ExperimentArgs),
    /// Evaluate a saved model on one set of a saved split.
    Eval(EvalArgs),
    /// Pick λ by mean validation RMSE over a grid.
    GridLambda {
        #[command(flatten)]
        experiment: ExperimentArgs,
        /// `lo:hi:step` (inclusive) or a comma-separated list.
        #[arg(long, default_value = "0.1:1.0:0.1")]
        grid: String,
    },
    /// Time training epochs while scaling the entry count or R·M.
    BenchScaling(BenchArgs),
    /// Write a QoS log drawn from a random nonnegative ECTN model.
    GenSynth {
        #[command(flatten)]
        synth: SynthArgs,
        /// Output QoS log.
        #[arg(short, long)]
        out: PathBuf,
        /// Also write the generating model here.
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Friedman mean ranks of a CSV result table (`case,<model>,...`).
    Rank {
        input: PathBuf,
        /// Larger values are better (default: smaller is better).
        #[arg(long)]
        higher_is_better: bool,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
}

fn parse_triple<T: std::str::FromStr>(s: &str) -> Result<[T; 3], String>
where
    T::Err: std::fmt::Display,
{
    let parts: Vec<&str> = s.split([',', 'x']).collect();
    let [a, b, c] = parts[..] else {
        return Err(format!("expected three comma-separated values, got {s:?}"));
    };
    let p = |v: &str| v.trim().parse::<T>().map_err(|e| format!("{v:?}: {e}"));
    Ok([p(a)?, p(b)?, p(c)?])
}

fn parse_dims(s: &str) -> Result<[usize; 3], String> {
    parse_triple(s)
}

fn parse_ratios(s: &str) -> Result<[f64; 3], String> {
    parse_triple(s)
}

/// Experiment settings; any flag given overrides the `--manifest` value.
#[derive(Debug, Args)]
struct ExperimentArgs {
    /// TOML experiment manifest, e.g. the `manifest.toml` of an earlier run.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// QoS log (`user service time value` per line).
    #[arg(short, long, conflicts_with = "manifest")]
    data: Option<PathBuf>,
    /// Tensor shape `users,services,times`, overriding the log.
    #[arg(long, value_parser = parse_dims)]
    dims: Option<[usize; 3]>,
    /// Train, validation and test fractions [default: 0.01,0.09,0.9].
    #[arg(long, value_parser = parse_ratios)]
    ratios: Option<[f64; 3]>,
    /// Number of random splits [default: 10].
    #[arg(long)]
    repeats: Option<usize>,
    /// CP rank R [default: 5].
    #[arg(short, long)]
    rank: Option<usize>,
    /// Expansion M [default: 5].
    #[arg(short = 'm', long)]
    expansion: Option<usize>,
    /// Regularization λ [default: 0.4].
    #[arg(long)]
    lambda: Option<f64>,
    /// Stop when successive objectives differ by less than this [default: 1e-5].
    #[arg(long)]
    tol: Option<f64>,
    /// [default: 1000]
    #[arg(long)]
    max_epochs: Option<usize>,
    /// Initial factors are drawn from (0, init_scale] [default: 0.1].
    #[arg(long)]
    init_scale: Option<f64>,
    /// Base seed; run r uses seed + r for its split and initialization [default: 0].
    #[arg(long)]
    seed: Option<u64>,
    /// Threads per training run [default: 1].
    #[arg(long)]
    workers: Option<usize>,
    /// Output directory [default: runs].
    #[arg(short, long)]
    out: Option<PathBuf>,
}

impl ExperimentArgs {
    fn manifest(&self) -> Result<ExperimentManifest, CliError> {
        let mut m = match (&self.manifest, &self.data) {
            (Some(path), _) => ExperimentManifest::load(path)?,
            (None, Some(data)) => ExperimentManifest {
                data: DataSource::File {
                    path: data.clone(),
                    dims: None,
                },
                ratios: [0.01, 0.09, 0.90],
                repeats: 10,
                seed: 0,
                output_dir: PathBuf::from("runs"),
                train: TrainSettings::default(),
            },
            (None, None) => return Err(CliError::Usage("either --data or --manifest is required".into())),
        };
        if let Some(d) = self.dims {
            match &mut m.data {
                DataSource::File { dims, .. } => *dims = Some(d),
                DataSource::Synthetic(_) => {
                    return Err(CliError::Usage("--dims does not apply to synthetic data".into()))
                }
            }
        }
        let t = &mut m.train;
        set(&mut m.ratios, self.ratios);
        set(&mut m.repeats, self.repeats);
        set(&mut m.seed, self.seed);
        set(&mut m.output_dir, self.out.clone());
        set(&mut t.rank, self.rank);
        set(&mut t.expansion, self.expansion);
        set(&mut t.lambda, self.lambda);
        set(&mut t.tol, self.tol);
        set(&mut t.max_epochs, self.max_epochs);
        set(&mut t.init_scale, self.init_scale);
        set(&mut t.workers, self.workers);
        Ok(m)
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum EvalSet {
    Train,
    Validation,
    Test,
    All,
}

impl EvalSet {
    fn name(self) -> &'static str {
        match self {
            EvalSet::Train => "train",
            EvalSet::Validation => "validation",
            EvalSet::Test => "test",
            EvalSet::All => "all",
        }
    }
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Model dump written by `train`.
    #[arg(long)]
    model: PathBuf,
    /// QoS log the model was trained on.
    #[arg(short, long, required_unless_present = "manifest")]
    data: Option<PathBuf>,
    #[arg(long, value_parser = parse_dims, requires = "data")]
    dims: Option<[usize; 3]>,
    /// Take the data source from an experiment manifest instead.
    #[arg(long, conflicts_with = "data")]
    manifest: Option<PathBuf>,
    /// Split file written by `train`.
    #[arg(long)]
    split: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    set: EvalSet,
    /// Also write the metrics as CSV.
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, value_parser = parse_dims, default_value = "20,30,10")]
    dims: [usize; 3],
    #[arg(short, long, default_value_t = 2)]
    rank: usize,
    #[arg(short = 'm', long, default_value_t = 2)]
    expansion: usize,
    /// Fraction of cells observed.
    #[arg(long, default_value_t = 0.2)]
    density: f64,
    /// Standard deviation of additive Gaussian noise (values are clipped at 0).
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    /// Biases are drawn from (0, bias_scale].
    #[arg(long, default_value_t = 1.0)]
    bias_scale: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl SynthArgs {
    fn settings(&self) -> SynthSettings {
        SynthSettings {
            dims: self.dims,
            rank: self.rank,
            expansion: self.expansion,
            density: self.density,
            noise_sigma: self.noise,
            bias_scale: self.bias_scale,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ScaleArg {
    /// Multiply the observed density.
    Entries,
    /// Multiply the fitted model's expansion M (R·M scales by the same factor).
    RankExpansion,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[arg(long, value_parser = parse_dims, default_value = "100,200,50")]
    dims: [usize; 3],
    /// Fitted (and, when scaling entries, generating) rank.
    #[arg(short, long, default_value_t = 5)]
    rank: usize,
    #[arg(short = 'm', long, default_value_t = 5)]
    expansion: usize,
    /// Base density.
    #[arg(long, default_value_t = 0.05)]
    density: f64,
    /// Comma-separated factors, each at least 1.
    #[arg(long, value_delimiter = ',', default_value = "2")]
    factors: Vec<f64>,
    #[arg(long, value_enum, default_value = "entries")]
    scale: ScaleArg,
    /// Epochs per timing.
    #[arg(long, default_value_t = 5)]
    epochs: usize,
    /// Timings per row; the fastest is reported.
    #[arg(long, default_value_t = 3)]
    repeats: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV output (default: stdout).
    #[arg(short, long)]
    out: Option<PathBuf>,
}

fn emit(text: &str, out: Option<&Path>) -> Result<(), CliError> {
    match out {
        Some(path) => std::fs::write(path, text).map_err(|e| CliError::io(path, e)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(args) => {
            let manifest = args.manifest()?;
            let agg = commands::cmd_train(&manifest)?;
            println!(
                "test RMSE {} MAE {} over {} runs -> {}",
                agg.rmse,
                agg.mae,
                manifest.repeats,
                manifest.output_dir.display()
            );
        }
        Command::Eval(args) => {
            let data = match (&args.data, &args.manifest) {
                (Some(path), _) => EvalData::File {
                    path: path.clone(),
                    dims: args.dims.map(|d| Dims::new(d[0], d[1], d[2])),
                },
                (None, Some(m)) => EvalData::Manifest(m.clone()),
                (None, None) => return Err(CliError::Usage("either --data or --manifest is required".into())),
            };
            let name = args.set.name();
            let m = commands::cmd_eval(&args.model, &data, &args.split, name)?;
            println!("{name}: RMSE {} MAE {} over {} entries", m.rmse, m.mae, m.count);
            if let Some(out) = &args.out {
                emit(&commands::metrics_csv(&[(name, m)]), Some(out))?;
            }
        }
        Command::GridLambda { experiment, grid } => {
            let grid = commands::parse_grid(&grid).map_err(CliError::Usage)?;
            let manifest = experiment.manifest()?;
            let (best, rows) = commands::cmd_grid_lambda(&manifest, &grid)?;
            println!("lambda,validation_rmse");
            for r in &rows {
                println!("{},{}", r.lambda, r.validation.rmse);
            }
            println!("best lambda {best}");
        }
        Command::BenchScaling(b) => {
            let base = SynthSettings {
                dims: b.dims,
                rank: b.rank,
                expansion: b.expansion,
                density: b.density,
                noise_sigma: 0.0,
                bias_scale: 0.5,
                seed: b.seed,
            };
            let scale = match b.scale {
                ScaleArg::Entries => Scale::Entries,
                ScaleArg::RankExpansion => Scale::RankExpansion,
            };
            let table = commands::cmd_bench_scaling(&base, &b.factors, scale, b.epochs, b.repeats)?;
            emit(&table, b.out.as_deref())?;
        }
        Command::GenSynth { synth, out, truth } => {
            let n = commands::cmd_gen_synth(&synth.settings(), &out, truth.as_deref())?;
            println!("wrote {n} entries to {}", out.display());
        }
        Command::Rank {
            input,
            higher_is_better,
            out,
        } => {
            let table = commands::cmd_rank(&input, higher_is_better)?;
            emit(&table, out.as_deref())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
