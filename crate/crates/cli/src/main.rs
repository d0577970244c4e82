use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sar_cli::commands;
use sar_cli::{CliError, ConfigBuilder, ExperimentConfig, KEYS};

#[derive(Parser)]
#[command(
    name = "sar",
    version,
    about = "Semantic anchor regularization experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Flat `key = value` config file; `--key value` overrides follow.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Config overrides as `--key value` or `--key=value`.
    #[arg(
        trailing_var_arg = true,
        allow_hyphen_values = true,
        value_name = "OVERRIDES"
    )]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Sample the long-tailed dataset and its balanced test set.
    GenData(Common),
    /// Train one model and write metrics, log and anchor or prototype dumps.
    Train(Common),
    /// Train every mode for every seed and summarize.
    Compare(Common),
    /// Generate an anchor set and report its pairwise cosines.
    Anchors(Common),
    /// List every config key with its default.
    Keys,
}

fn load(common: &Common) -> Result<ExperimentConfig, CliError> {
    let mut b = ConfigBuilder::new();
    if let Some(path) = &common.config {
        b = b.file(path)?;
    }
    b.overrides(&common.overrides)?.build()
}

fn fmt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |x| format!("{x:.4}"))
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData(c) => {
            let cfg = load(&c)?;
            let out = commands::gen_data(&cfg)?;
            let counts: Vec<String> = out.class_counts.iter().map(ToString::to_string).collect();
            println!("class_counts: {}", counts.join(","));
            println!("wrote {}", out.train_path.display());
            println!("wrote {}", out.test_path.display());
        }
        Command::Train(c) => {
            let cfg = load(&c)?;
            let out = commands::train(&cfg)?;
            let m = &out.report;
            println!(
                "{} seed {}: acc {:.4} head {} body {} tail {} compactness {:.4} separability {:.4}",
                out.mode,
                out.seed,
                m.overall_acc,
                fmt(m.head_acc),
                fmt(m.body_acc),
                fmt(m.tail_acc),
                m.compactness,
                m.separability
            );
            println!(
                "metrics: {}",
                out.dir.join(commands::METRICS_JSON).display()
            );
        }
        Command::Compare(c) => {
            let cfg = load(&c)?;
            let out = commands::compare(&cfg)?;
            println!("mode   runs  overall  head    body    tail    compact  consistency");
            for s in &out.summary {
                println!(
                    "{:<6} {:>4}  {:.4}   {:.4}  {:.4}  {:.4}  {:.4}   {}",
                    s.mode,
                    s.runs,
                    s.overall.0,
                    s.head.0,
                    s.body.0,
                    s.tail.0,
                    s.compactness.0,
                    fmt(s.consistency)
                );
            }
            println!(
                "wrote {}",
                cfg.output_dir.join(commands::SUMMARY_CSV).display()
            );
        }
        Command::Anchors(c) => {
            let cfg = load(&c)?;
            let s = commands::anchors(&cfg)?;
            println!(
                "{} anchors C={} D={} seed {}: off-diagonal cosine min {:.4} max {:.4} mean {:.4}",
                s.source, s.classes, s.dim, s.seed, s.min_cosine, s.max_cosine, s.mean_cosine
            );
            println!(
                "wrote {}",
                cfg.output_dir.join(commands::ANCHORS_CSV).display()
            );
        }
        Command::Keys => {
            for (key, default, doc) in KEYS {
                println!("{key:<20} {default:<16} {doc}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
