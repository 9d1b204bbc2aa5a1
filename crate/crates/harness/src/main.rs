use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dtta_harness::config::{self, output_root, ExperimentConfig, Paths};
use dtta_harness::report::report;
use dtta_harness::results::aggregate;
use dtta_harness::run::{self, RunOptions};
use dtta_harness::Result;

#[derive(Parser)]
#[command(name = "dtta", version, about = "Diffusion-driven test-time adaptation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML config file; defaults apply to anything it leaves out.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override one field, e.g. `--set tta.lr=0.2` or `--set experiment.seeds=[1,2]`.
    #[arg(long = "set", value_name = "SECTION.FIELD=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the classifier, denoiser and class embeddings; write checkpoints.
    Train(ConfigArgs),
    /// Run the configured methods over the corrupted test set.
    Tta {
        #[command(flatten)]
        config: ConfigArgs,
        /// Also write per-example step records as JSON lines.
        #[arg(long)]
        dump_reports: bool,
    },
    /// Run the ablation grid.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        dump_reports: bool,
    },
    /// Summarise a results directory as markdown plus loss plots.
    Report {
        dir: PathBuf,
        /// Where to write report.md and plots; defaults to `dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rerun a result file from its embedded config and compare bytes.
    Replay {
        file: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the resolved config.
    Config(ConfigArgs),
}

fn load(args: &ConfigArgs) -> Result<ExperimentConfig> {
    config::load(args.config.as_deref(), &args.overrides)
}

fn print_table(path: &Path, rows: &[dtta_harness::ResultRow]) {
    println!("wrote {}", path.display());
    for g in aggregate(rows) {
        println!(
            "{:<22} {:<22} {:<12} phi={:<5} acc {:.2}% -> {:.2}% (delta {:+.2} ± {:.2} pts, {} seeds)",
            g.method,
            g.condition,
            g.subset,
            g.adapt_phi,
            100.0 * g.acc_before.mean,
            100.0 * g.acc_after.mean,
            100.0 * g.delta.mean,
            100.0 * g.delta.std,
            g.seeds
        );
    }
}

fn execute(cli: Cli) -> Result<()> {
    let root = output_root();
    match cli.command {
        Command::Train(args) => {
            let cfg = load(&args)?;
            let paths = Paths::resolve(&cfg, &root);
            let out = run::train(&cfg, &paths)?;
            println!(
                "checkpoints in {}; final losses: classifier {:.4}, diffusion {:.4}; clean test accuracy {:.2}%",
                paths.checkpoints.display(),
                out.classifier_curve.last().copied().unwrap_or(f64::NAN),
                out.diffusion_curve.last().copied().unwrap_or(f64::NAN),
                100.0 * out.clean_accuracy
            );
        }
        Command::Tta { config, dump_reports } => {
            let cfg = load(&config)?;
            let (path, rows) = run::tta(&cfg, &Paths::resolve(&cfg, &root), &RunOptions { dump_reports })?;
            print_table(&path, &rows);
        }
        Command::Ablate { config, dump_reports } => {
            let cfg = load(&config)?;
            let (path, rows) = run::ablate(&cfg, &Paths::resolve(&cfg, &root), &RunOptions { dump_reports })?;
            print_table(&path, &rows);
        }
        Command::Report { dir, out } => {
            let md = report(&dir, out.as_deref().unwrap_or(&dir))?;
            print!("{md}");
        }
        Command::Replay { file, out } => {
            let produced = run::replay(&file, &root, &out)?;
            println!("{} reproduces {} byte for byte", produced.display(), file.display());
        }
        Command::Config(args) => print!("{}", load(&args)?.to_toml()),
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
