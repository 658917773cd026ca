use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use gridlm::config::RunConfig;
use gridlm::run;
use gridlm::GridError;

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Command {
    Train,
    Ablate,
    Sample,
    Eval,
    Viz,
}

/// Next-2D-distribution grid models: train, ablate, sample, evaluate, visualize.
#[derive(Debug, Parser)]
#[command(name = "gridlm", version)]
struct Cli {
    command: Command,
    /// Flat `section.key = value` config file.
    #[arg(long)]
    config: PathBuf,
    /// Training seed for train/ablate; generation or evaluation seed otherwise.
    #[arg(long)]
    seed: Option<u64>,
    /// Output root (overrides run.out).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Load checkpoints whose config hash does not match.
    #[arg(long)]
    force: bool,
}

fn exit_code(err: &GridError) -> u8 {
    match err {
        GridError::Config(_) => 2,
        GridError::Numeric { .. } => 3,
        _ => 1,
    }
}

fn execute(cli: &Cli) -> gridlm::Result<()> {
    let text = std::fs::read_to_string(&cli.config)
        .map_err(|e| GridError::Config(format!("cannot read {}: {e}", cli.config.display())))?;
    let mut config = RunConfig::parse(&text)?;
    let trains = matches!(cli.command, Command::Train | Command::Ablate);
    if let (Some(seed), true) = (cli.seed, trains) {
        config = config.with_overrides(&[("train.seed".into(), seed.to_string())])?;
    }
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from(config.text("run.out")));
    let seed = cli.seed.unwrap_or(0);
    let out = out.as_path();
    match cli.command {
        Command::Train => {
            let r = run::cmd_train(&config, out, cli.force, None)?;
            println!("trained {} steps -> {}", r.steps, r.dir.display());
            if let Some(loss) = r.final_loss {
                println!("final loss {loss:.6}");
            }
        }
        Command::Ablate => {
            let (dir, rows) = run::cmd_ablate(&config, out)?;
            let failed = rows.iter().filter(|r| r.status != "ok").count();
            println!("{} cells ({failed} failed) -> {}", rows.len(), dir.join("ablation.csv").display());
        }
        Command::Sample => {
            let dir = run::cmd_sample(&config, out, seed, cli.force)?;
            println!("samples -> {}", dir.display());
        }
        Command::Eval => {
            let (dir, report) = run::cmd_eval(&config, out, seed, cli.force)?;
            println!(
                "tv_mean {:.4} tv_p95 {:.4} nll {:.4} marginal_tv {:.4} order_sens {:.4}",
                report.tv_mean, report.tv_p95, report.nll, report.marginal_tv, report.order_sens
            );
            println!("report -> {}", dir.join("report.jsonl").display());
        }
        Command::Viz => {
            let (dir, files) = run::cmd_viz(&config, out, cli.force)?;
            println!("{} maps -> {}", files.len(), dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
