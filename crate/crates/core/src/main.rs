use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use modeldiff::pipeline::{self, ExperimentConfig, Role};
use modeldiff::{Direction, Result};

#[derive(Parser)]
#[command(name = "modeldiff", version, about = "Compare sequence models over their low-NLL inputs")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured base seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the configured number of independent runs.
    #[arg(long, global = true)]
    runs: Option<u32>,
    /// Worker threads; defaults to all cores. Results do not depend on it.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Build the configured models and write them as JSON.
    TrainToy,
    /// Sample output distributions and representative inputs.
    Sample {
        /// Models to sample; all configured models by default.
        #[arg(long = "model", value_parser = parse_role)]
        models: Vec<Role>,
    },
    /// Directed differences and normalized ratios from sampled artifacts.
    Diff,
    /// Exact results by enumerating every sequence.
    Enumerate,
    /// Precision and recall of annotated inputs.
    AnnotateReport {
        /// JSONL of {"id", "score"} objects.
        #[arg(long)]
        annotations: PathBuf,
        /// Trace to annotate; defaults to the one written by `diff`.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// `ab` or `ba`.
        #[arg(long, default_value = "ab", value_parser = parse_direction)]
        direction: Direction,
        #[arg(long, default_value_t = 0)]
        run: usize,
    },
    /// Compare B and C through the reference model A.
    CompareRef,
}

fn parse_role(s: &str) -> std::result::Result<Role, String> {
    Role::parse(s).map_err(|e| e.to_string())
}

fn parse_direction(s: &str) -> std::result::Result<Direction, String> {
    match s {
        "ab" => Ok(Direction::AToB),
        "ba" => Ok(Direction::BToA),
        _ => Err(format!("expected ab or ba, got {s:?}")),
    }
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let path = common
        .config
        .as_ref()
        .ok_or_else(|| modeldiff::Error::Config("--config is required".into()))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(runs) = common.runs {
        cfg.runs = runs;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.common)?;
    let out = &cli.common.out;
    log::info!("configuration fingerprint {}", cfg.fingerprint());
    match cli.command {
        Command::TrainToy => {
            for p in pipeline::cmd_train_toy(&cfg, out)? {
                println!("{}", p.display());
            }
        }
        Command::Sample { models } => {
            let roles = if models.is_empty() { cfg.roles() } else { models };
            pipeline::cmd_sample(&cfg, out, &roles)?;
        }
        Command::Diff => {
            for (r, run) in pipeline::cmd_diff(&cfg, out)?.iter().enumerate() {
                for row in &run.sweep {
                    match row.terms() {
                        Some(t) => println!(
                            "run {r} lambda {:+.3}: {:.4} {:.4} {:.4} {:.4}",
                            row.lambda, t[0], t[1], t[2], t[3]
                        ),
                        None => println!("run {r} lambda {:+.3}: degenerate", row.lambda),
                    }
                }
            }
        }
        Command::Enumerate => {
            let report = pipeline::cmd_enumerate(&cfg, out)?;
            println!(
                "enumerated {} sequences: |X_A| = {}, |X_B| = {}, |X_AB| = {}",
                report.space_size(),
                report.size_a,
                report.size_b,
                report.size_ab
            );
        }
        Command::AnnotateReport { annotations, trace, direction, run } => {
            let r = pipeline::cmd_annotate_report(&cfg, out, &annotations, trace.as_deref(), direction, run)?;
            println!("precision {:.4}, proportional recall {:.4}", r.precision, r.proportional_recall);
        }
        Command::CompareRef => {
            for (r, c) in pipeline::cmd_compare_ref(&cfg, out)?.iter().enumerate() {
                println!("run {r}: Q_B = {:.4}, Q_C = {:.4}, Q_B/Q_C = {:.4}", c.q_b, c.q_c, c.reverse_ratio());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.common.workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot start {n} workers: {e}");
            return ExitCode::from(pipeline::EXIT_CONFIG as u8);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(pipeline::exit_code(&e) as u8)
        }
    }
}
