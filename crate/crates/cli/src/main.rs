use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::{error, info};

use plus_core::checkpoint::Checkpoint;
use plus_core::config::RunConfig;
use plus_core::dataset::{generate_dataset, read_json};
use plus_core::phantom::GeneratorSpec;
use plus_core::pipeline;
use plus_core::{PlusError, Result};

#[derive(Parser)]
#[command(name = "plus", version, about = "Prior-aware liver lesion classification on synthetic phantoms")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a phantom dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        cases: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Generator spec JSON; missing fields take defaults.
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Train a model; writes last.ckpt, best.ckpt and train_log.tsv.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a split; writes report.json/csv and roc.tsv.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        report: PathBuf,
    },
    /// Train and test a list of arms under shared seeds.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma separated: lesion-only, none, weighted, gated, distillation, gpr.
        #[arg(long, default_value = "lesion-only,none,weighted,gated,distillation,gpr")]
        strategies: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export input-gradient saliency for one case.
    Saliency {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory; defaults to the one stored in the checkpoint.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        case: String,
        #[arg(long)]
        class: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: &Path, data: &Path) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    cfg.data_dir = Some(data.display().to_string());
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { out, cases, seed, spec } => {
            let spec = match spec {
                Some(p) => read_json::<GeneratorSpec>(&p).map_err(|e| PlusError::Config(e.to_string()))?,
                None => GeneratorSpec::default(),
            };
            spec.validate().map_err(|e| PlusError::Config(e.to_string()))?;
            let manifest = generate_dataset(&out, cases, seed, &spec)?;
            for (name, ids) in &manifest.splits {
                info!("{name}: {} cases", ids.len());
            }
        }
        Command::Train { config, data, out } => {
            let cfg = load_config(&config, &data)?;
            let summary = pipeline::train(&cfg, &out)?;
            println!("best epoch {} -> {}", summary.best_epoch, summary.best_checkpoint.display());
        }
        Command::Eval { checkpoint, data, split, report } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let r = pipeline::evaluate(&ckpt, Some(&data), &split, &report)?;
            print!("{}", r.to_csv());
        }
        Command::Ablate { config, data, strategies, out } => {
            let cfg = load_config(&config, &data)?;
            let arms = pipeline::parse_arms(&strategies)?;
            let rows = pipeline::ablate(&cfg, &arms, &out)?;
            print!("{}", pipeline::ablation_csv(&rows));
        }
        Command::Saliency { checkpoint, data, case, class, out } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let meta = pipeline::saliency(&ckpt, data.as_deref(), &case, class, &out)?;
            println!("wrote {} ({:?})", out.display(), meta.shape);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
