//! `otmf` command line: generate streams, train, merge, evaluate, sweep alpha.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use otmf::io;
use otmf::pipeline::{default_alpha_grid, MergeMethod, RunConfig};
use otmf::workspace::{self, SeedDir};
use otmf::{Error, Result};

/// Environment variable holding the log filter (e.g. `info`, `debug`).
const LOG_ENV: &str = "OTMF_LOG";

#[derive(Parser)]
#[command(name = "otmf", version, about = "Continual model merging with OT-trained masks")]
struct Cli {
    /// TOML run configuration; omitted fields take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run only this seed instead of the configured list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output root; overrides `output_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic task stream.
    Gen,
    /// Pretrain and fine-tune one model per task.
    Train,
    /// Merge the fine-tuned models in task order.
    Merge {
        #[arg(long, value_parser = parse_method)]
        method: MergeMethod,
    },
    /// Evaluate a checkpoint on every task it has a head for.
    Eval {
        /// Checkpoint to evaluate; defaults to the merged model of `--method`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_parser = parse_method, default_value = "otmf")]
        method: MergeMethod,
    },
    /// Sweep the OTMF alpha over a comma-separated grid.
    AblateAlpha {
        #[arg(long, value_parser = parse_grid)]
        grid: Option<Grid>,
    },
}

#[derive(Clone)]
struct Grid(Vec<f64>);

fn parse_method(s: &str) -> std::result::Result<MergeMethod, String> {
    MergeMethod::parse(s).map_err(|e| e.to_string())
}

fn parse_grid(s: &str) -> std::result::Result<Grid, String> {
    s.split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|_| format!("`{v}` is not a number")))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map(Grid)
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 2,
        Error::ShapeMismatch { .. } | Error::Data(_) | Error::Io { .. } => 3,
        Error::Numerical(_) => 4,
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(path) => io::load_config(path).map_err(|e| match e {
            Error::Io { path, source } => Error::Config(format!("{}: {source}", path.display())),
            e => e,
        })?,
        None => RunConfig::default(),
    };
    cfg.validate()?;
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.output_dir));
    let seeds = cli.seed.map_or_else(|| cfg.seeds.clone(), |s| vec![s]);
    for seed in seeds {
        let dir = SeedDir::new(&out, seed);
        match &cli.command {
            Command::Gen => {
                workspace::gen(&cfg, seed, &dir)?;
                println!("seed {seed}: stream written to {}", dir.root().display());
            }
            Command::Train => {
                let r = workspace::train(&cfg, seed, &dir)?;
                println!(
                    "seed {seed}: fine-tuned accuracy {:?}, pretrained {:?}",
                    r.finetuned, r.pretrained
                );
            }
            Command::Merge { method } => {
                let r = workspace::merge(&cfg, seed, &dir, *method)?;
                println!(
                    "seed {seed}: {} average accuracy {:.4}, bwt {:+.4}",
                    method.name(),
                    r.average_accuracy,
                    r.bwt
                );
            }
            Command::Eval { checkpoint, method } => {
                let (path, name) = match checkpoint {
                    Some(p) => (
                        p.clone(),
                        p.file_stem().map_or("checkpoint".into(), |s| s.to_string_lossy().into_owned()),
                    ),
                    None => (dir.merge_dir(*method).join("merged.ckpt"), method.name().to_string()),
                };
                let r = workspace::eval(&cfg, seed, &dir, &path, &name)?;
                for t in &r.tasks {
                    println!(
                        "seed {seed}: task{} accuracy {:.4} l1 {:.4} sinkhorn {:.4}",
                        t.task, t.accuracy, t.l1_shift, t.sinkhorn_shift
                    );
                }
            }
            Command::AblateAlpha { grid } => {
                let grid = grid.clone().map_or_else(default_alpha_grid, |g| g.0);
                for r in workspace::ablate(&cfg, seed, &dir, &grid)? {
                    println!(
                        "seed {seed}: alpha {:.2} average {:.4}{}",
                        r.alpha,
                        r.average,
                        if r.best { " (best)" } else { "" }
                    );
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or(LOG_ENV, "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
