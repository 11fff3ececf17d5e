use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sentimix_cli::{config, CliError, RunConfig};

#[derive(Parser)]
#[command(name = "sentimix", version, about = "Code-mixed tweet sentiment: synth, pretrain, finetune, predict, evaluate, ablate")]
struct Args {
    #[command(subcommand)]
    command: Command,

    /// Flat key=value configuration file
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Run seed (overrides the config file)
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory (overrides the config file)
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Extra key=value overrides, applied after the config file
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a noisy synthetic train/valid corpus
    Synth,
    /// Build the vocabulary and pre-train the encoder with masked-LM
    Pretrain,
    /// Swap in a classifier head and fine-tune on labeled tweets
    Finetune {
        /// Start from a freshly initialized encoder instead of the pre-trained checkpoint
        #[arg(long)]
        from_scratch: bool,
    },
    /// Write `Uid,Sentiment` predictions for the test corpus
    Predict,
    /// Score a prediction file against the labeled test corpus
    Evaluate,
    /// Run the base / +pre-processing / +pre-processing+ulmfit comparison
    Ablate,
}

fn resolve(args: &Args) -> Result<RunConfig, CliError> {
    let mut cfg = match &args.config {
        Some(path) => config::load(path)?,
        None => RunConfig::default(),
    };
    for pair in &args.overrides {
        cfg.set_pair(pair).map_err(|e| CliError::BadArgs(e.to_string()))?;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &args.out {
        cfg.out = out.clone();
    }
    Ok(cfg)
}

fn run(args: &Args) -> Result<(), CliError> {
    let cfg = resolve(args)?;
    match args.command {
        Command::Synth => {
            let (train, valid) = sentimix_cli::cmd_synth(&cfg)?;
            println!("wrote {} and {}", train.display(), valid.display());
        }
        Command::Pretrain => {
            let history = sentimix_cli::cmd_pretrain(&cfg)?;
            if let (Some(first), Some(last)) = (history.rows.first(), history.rows.last()) {
                println!("pretrain: {} steps, masked loss {:.4} -> {:.4}", history.rows.len(), first.loss, last.loss);
            }
        }
        Command::Finetune { from_scratch } => {
            let outcome = sentimix_cli::cmd_finetune(&cfg, from_scratch)?;
            for (epoch, report) in outcome.reports.iter().enumerate() {
                println!("epoch {epoch}: val weighted-F1 {:.4}, accuracy {:.4}", report.weighted_f1, report.accuracy);
            }
        }
        Command::Predict => {
            let path = sentimix_cli::cmd_predict(&cfg)?;
            println!("wrote {}", path.display());
        }
        Command::Evaluate => print!("{}", sentimix_cli::cmd_evaluate(&cfg)?.to_text()),
        Command::Ablate => {
            for row in sentimix_cli::cmd_ablate(&cfg)? {
                println!("{}: mean weighted-F1 {:.4}", row.configuration, row.mean());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
