use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fedfta_cli::{apply_seed_override, cmd_compare, cmd_gen_data, cmd_run, parse_config, CliError, ExperimentConfig};
use fedfta_core::aggregate::Aggregator;

#[derive(Parser)]
#[command(name = "fedfta", version, about = "Federated transfer learning with fine-tuned aggregation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset described by a config.
    GenData {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train once and write history, metrics and confusion matrix.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; defaults to the config's output-dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare aggregators over distributions and seeds.
    Compare {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated aggregator names.
        #[arg(long, value_delimiter = ',', default_value = "fedavg,fta")]
        aggregators: Vec<Aggregator>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load(path: &Path) -> Result<ExperimentConfig, CliError> {
    let mut cfg = parse_config(path)?;
    apply_seed_override(&mut cfg, std::env::var("FEDFTA_SEED").ok().as_deref())?;
    Ok(cfg)
}

fn execute(command: Command, out_dir: &mut Option<PathBuf>) -> Result<(), CliError> {
    match command {
        Command::GenData { config } => {
            let cfg = load(&config)?;
            *out_dir = Some(cfg.output_dir.clone());
            let path = cmd_gen_data(&cfg)?;
            println!("wrote {}", path.display());
        }
        Command::Run { config, out } => {
            let cfg = load(&config)?;
            let out = out.unwrap_or_else(|| cfg.output_dir.clone());
            *out_dir = Some(out.clone());
            let (outcome, _) = cmd_run(&cfg, &out)?;
            println!(
                "{} rounds; final accuracy {}; artifacts in {}",
                cfg.rounds,
                outcome.final_accuracy().map_or("NA".into(), |a| format!("{a:.4}")),
                out.display()
            );
        }
        Command::Compare { config, aggregators, out } => {
            let cfg = load(&config)?;
            let out = out.unwrap_or_else(|| cfg.output_dir.clone());
            *out_dir = Some(out.clone());
            let cmp = cmd_compare(&cfg, &aggregators, &out)?;
            for s in &cmp.summary {
                println!(
                    "{:<8} {:<16} acc {:.4} ± {:.4}  f1 {:.4} ± {:.4}  rounds-to-target {:.1}",
                    s.aggregator, s.distribution, s.mean_accuracy, s.std_accuracy, s.mean_macro_f1, s.std_macro_f1, s.mean_rounds_to_target
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut out_dir = None;
    match execute(cli.command, &mut out_dir) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let record = serde_json::to_string(&err.record()).expect("record serializes");
            eprintln!("{record}");
            if let Some(dir) = out_dir.filter(|d| d.is_dir()) {
                let _ = std::fs::write(dir.join("error.json"), format!("{record}\n"));
            }
            ExitCode::FAILURE
        }
    }
}
