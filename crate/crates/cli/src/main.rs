use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use treevae::config::RunConfig;
use treevae::error::{ConfigError, RunError};
use treevae::runner::{self, EvalSettings, GenerateMode};

#[derive(Parser)]
#[command(
    name = "treevae",
    version,
    about = "Hierarchical clustering with a growing tree of latent variables"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct DataArgs {
    /// Run configuration; defaults to the `config.toml` of the checkpoint's run directory.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset name, overriding the configuration.
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    deterministic: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Grow and train a tree, writing a run directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        dataset: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        deterministic: bool,
    },
    /// Test-split metrics of a checkpoint as CSV.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        /// Importance samples for the log-likelihood (0 skips it).
        #[arg(long)]
        k: Option<usize>,
        /// Output file; stdout if absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sample from a checkpoint or reconstruct test inputs.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        mode: Mode,
        #[arg(long, default_value_t = 8)]
        n: usize,
        #[command(flatten)]
        data: DataArgs,
        /// Output directory.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Write the tree with per-leaf statistics as JSON or DOT.
    ExportTree {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
        #[command(flatten)]
        data: DataArgs,
        /// Output file; stdout if absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Conditional,
    Unconditional,
    Reconstruct,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Dot,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

/// Config used to interpret a checkpoint: explicit, else the run directory's.
fn checkpoint_config(checkpoint: &Path, args: &DataArgs) -> Result<RunConfig, RunError> {
    let found = args.config.clone().or_else(|| {
        checkpoint
            .ancestors()
            .skip(1)
            .take(2)
            .map(|d| d.join("config.toml"))
            .find(|p| p.is_file())
    });
    let mut cfg = match (found, &args.dataset) {
        (Some(path), _) => RunConfig::from_file(&path)?,
        (None, Some(name)) => RunConfig::from_toml(&format!("[dataset]\nname = {name:?}\n"))?,
        (None, None) => {
            return Err(ConfigError::Invalid("pass --config or --dataset to name the data".into()).into());
        }
    };
    override_config(&mut cfg, args.dataset.clone(), args.seed, args.deterministic);
    Ok(cfg)
}

fn override_config(cfg: &mut RunConfig, dataset: Option<String>, seed: Option<u64>, deterministic: bool) {
    if let Some(name) = dataset {
        if name != cfg.dataset.name {
            cfg.dataset.synthetic = None;
        }
        cfg.dataset.name = name;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.deterministic |= deterministic;
}

fn emit(out: Option<&Path>, text: &str) -> Result<(), RunError> {
    match out {
        Some(p) => runner::write_file(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(command: Command) -> Result<(), RunError> {
    match command {
        Command::Train {
            config,
            dataset,
            out,
            seed,
            deterministic,
        } => {
            let mut cfg = RunConfig::from_file(&config)?;
            override_config(&mut cfg, dataset, seed, deterministic);
            if let Some(o) = out {
                cfg.out_dir = o;
            }
            cfg.validate()?;
            let data = cfg.load_dataset()?;
            let result = runner::train_to_dir(&cfg, &data)?;
            print!("{}", runner::metrics_csv(std::slice::from_ref(&result.metrics)));
            eprintln!("run written to {}", result.dir.display());
            Ok(())
        }
        Command::Eval {
            checkpoint,
            data,
            k,
            out,
        } => {
            let cfg = checkpoint_config(&checkpoint, &data)?;
            let dataset = cfg.load_dataset()?;
            let settings = EvalSettings {
                samples: cfg.evaluation.samples,
                iw_samples: k.unwrap_or(cfg.evaluation.iw_samples),
                iw_chunk: cfg.evaluation.iw_chunk,
            };
            let row = runner::eval_checkpoint(&checkpoint, &dataset, cfg.seed, cfg.deterministic, settings)?;
            emit(out.as_deref(), &runner::metrics_csv(&[row]))
        }
        Command::Generate {
            checkpoint,
            mode,
            n,
            data,
            out,
        } => {
            let mode = match mode {
                Mode::Conditional => GenerateMode::Conditional,
                Mode::Unconditional => GenerateMode::Unconditional,
                Mode::Reconstruct => GenerateMode::Reconstruct,
            };
            let dataset = match checkpoint_config(&checkpoint, &data) {
                Ok(cfg) => Some((cfg.load_dataset()?, cfg.seed)),
                Err(e) if mode == GenerateMode::Reconstruct => return Err(e),
                Err(_) => None,
            };
            let seed = dataset.as_ref().map_or(data.seed.unwrap_or(0), |d| d.1);
            let (generated, shape) = runner::generate(&checkpoint, mode, n, dataset.as_ref().map(|d| &d.0), seed)?;
            let path = runner::write_generated(&out, mode, &generated, &shape)?;
            println!("{}", path.display());
            Ok(())
        }
        Command::ExportTree {
            checkpoint,
            format,
            data,
            out,
        } => {
            let cfg = checkpoint_config(&checkpoint, &data)?;
            let dataset = cfg.load_dataset()?;
            let text = runner::export_checkpoint(&checkpoint, &dataset, cfg.evaluation.top_k, format == Format::Dot)?;
            emit(out.as_deref(), &text)
        }
    }
}
