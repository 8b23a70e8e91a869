//! `switchleak`: oracle training, power-assisted extraction, FGSM transfer
//! evaluation and reporting over the MNIST experiment matrix.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use switchleak::experiment::{self, RunSpec};
use switchleak::extraction::SurrogateInit;
use switchleak::Error;

#[derive(Parser, Debug)]
#[command(name = "switchleak", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one oracle per run and report its test accuracy.
    TrainOracle(SpecArgs),
    /// Train a surrogate for every (run, subset size, beta) cell.
    Extract {
        /// Use this oracle for every run instead of the per-run oracles.
        #[arg(long)]
        oracle: Option<PathBuf>,
        #[command(flatten)]
        spec: SpecArgs,
    },
    /// Run white-box and black-box FGSM and write the per-epsilon table.
    Attack {
        #[arg(long)]
        oracle: Option<PathBuf>,
        /// Surrogate files (surrogate-run<r>-size<n>-beta<b>.bin); default: every attack cell.
        surrogates: Vec<PathBuf>,
        #[command(flatten)]
        spec: SpecArgs,
    },
    /// Every stage, then the summary tables.
    Full(SpecArgs),
    /// Rebuild the summary tables from weight_mse.csv and attack.csv.
    Report(SpecArgs),
}

/// Flags override the config file, which overrides built-in defaults.
#[derive(Args, Debug)]
struct SpecArgs {
    /// Config file of `key = value` lines (a previous manifest.txt works).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory holding the four MNIST IDX files.
    #[arg(long, env = "SWITCHLEAK_DATA_DIR")]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    sizes: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    betas: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    epsilons: Option<Vec<f64>>,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    /// Leave adversarial pixels outside [0, 1].
    #[arg(long)]
    no_clip: bool,
    #[arg(long)]
    oracle_lr: Option<f64>,
    #[arg(long)]
    oracle_epochs: Option<usize>,
    #[arg(long)]
    oracle_batch_size: Option<usize>,
    #[arg(long)]
    surrogate_lr: Option<f64>,
    #[arg(long)]
    surrogate_epochs: Option<usize>,
    /// `independent` or `shared` (start from the oracle's initial weights).
    #[arg(long)]
    surrogate_init: Option<String>,
    /// Std of Gaussian noise added to leaked switch counts.
    #[arg(long)]
    noise_std: Option<f64>,
    /// Test images used for attacks (0 = all).
    #[arg(long)]
    attack_samples: Option<usize>,
    /// Subset sizes whose surrogates get attacked (default: all).
    #[arg(long, value_delimiter = ',')]
    attack_sizes: Option<Vec<usize>>,
    /// Write first-epoch query logs and power traces per cell.
    #[arg(long)]
    export_traces: bool,
}

impl SpecArgs {
    fn into_spec(self) -> anyhow::Result<RunSpec> {
        let mut spec = RunSpec::default();
        if let Some(path) = &self.config {
            spec.apply_config_file(path)
                .with_context(|| format!("reading config {}", path.display()))?;
        }
        macro_rules! take {
            ($flag:expr => $field:ident) => {
                if let Some(v) = $flag {
                    spec.$field = v;
                }
            };
        }
        take!(self.data_dir => data_dir);
        take!(self.out_dir => out_dir);
        take!(self.sizes => subset_sizes);
        take!(self.betas => betas);
        take!(self.epsilons => epsilons);
        take!(self.runs => n_runs);
        take!(self.seed => base_seed);
        take!(self.workers => workers);
        take!(self.oracle_lr => oracle_learning_rate);
        take!(self.oracle_epochs => oracle_epochs);
        take!(self.oracle_batch_size => oracle_batch_size);
        take!(self.surrogate_lr => surrogate_learning_rate);
        take!(self.surrogate_epochs => surrogate_epochs);
        take!(self.noise_std => leakage_noise_std);
        take!(self.attack_samples => attack_samples);
        take!(self.attack_sizes => attack_sizes);
        if let Some(init) = &self.surrogate_init {
            spec.surrogate_init = SurrogateInit::parse(init)?;
        }
        if self.no_clip {
            spec.clip = false;
        }
        if self.export_traces {
            spec.export_traces = true;
        }
        spec.validate()?;
        Ok(spec)
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let files = match cli.command {
        Command::TrainOracle(args) => experiment::cmd_train_oracle(&args.into_spec()?)?,
        Command::Extract { oracle, spec } => {
            experiment::cmd_extract(&spec.into_spec()?, oracle.as_deref())?
        }
        Command::Attack {
            oracle,
            surrogates,
            spec,
        } => vec![experiment::cmd_attack(
            &spec.into_spec()?,
            oracle.as_deref(),
            &surrogates,
        )?],
        Command::Full(args) => experiment::cmd_full(&args.into_spec()?)?,
        Command::Report(args) => experiment::cmd_report(&args.into_spec()?)?,
    };
    for f in files {
        println!("{}", f.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if let Some(Error::CellsFailed { stage, failed }) = e.downcast_ref::<Error>() {
                eprintln!("error: {stage} failed for {} cell(s):", failed.len());
                for cell in failed {
                    eprintln!("  {cell}");
                }
            } else {
                eprintln!("error: {e:#}");
            }
            ExitCode::FAILURE
        }
    }
}
