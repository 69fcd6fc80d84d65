use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use frl::config::RunConfig;
use frl::pipeline;

#[derive(Parser)]
#[command(name = "frl", version, about = "Offline RL in factorisable action spaces")]
struct Cli {
    /// TOML run configuration. Omitted keys take their defaults.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,

    /// Root for relative output directories.
    #[arg(long, global = true, env = "FRL_OUTPUT_ROOT")]
    output_root: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train behaviour policies, collect and mix the dataset suite.
    Collect,
    /// Mix existing dataset files per the [mix] section.
    Mix,
    /// Train and evaluate the offline grid.
    Train,
    /// Evaluate one checkpoint directory.
    Eval {
        /// Overrides eval.checkpoint.
        checkpoint: Option<PathBuf>,
    },
    /// Run the overestimation-bias simulations.
    Simulate,
    /// Tabulate normalised scores across seeds.
    Report {
        /// Results directory; defaults to the configured output directory.
        results: Option<PathBuf>,
    },
    /// Print the fully resolved configuration.
    ShowConfig,
}

fn load_config(path: Option<&Path>) -> frl::Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut config = load_config(cli.config.as_deref())?;
    let out = config.output_path(cli.output_root.as_deref());
    match cli.command {
        Command::Collect => {
            let m = pipeline::cmd_collect(&config, &out)?;
            println!(
                "suite in {}: random {:.2}, medium {:.2}, expert {:.2}",
                out.join("suite").display(),
                m.random_anchor,
                m.medium.mean_return,
                m.expert_anchor
            );
            for d in &m.datasets {
                println!("{:<22} {:>6} transitions  {}", d.name, d.transitions, d.sha256);
            }
        }
        Command::Mix => {
            let ds = pipeline::cmd_mix(&config, &out)?;
            println!("{} transitions written", ds.len());
        }
        Command::Train => {
            let results = pipeline::cmd_train(&config, &out)?;
            for r in &results {
                println!("{} {} seed {}: {}", r.label, r.dataset, r.seed, r.report.summary());
            }
            let report = pipeline::cmd_report(&out, Some(&config)).context("writing report")?;
            print!("{}", report.to_text());
        }
        Command::Eval { checkpoint } => {
            if checkpoint.is_some() {
                config.eval.checkpoint = checkpoint;
            }
            let (report, q_error) = pipeline::cmd_eval(&config, &out)?;
            println!("{}", report.summary());
            println!("monte-carlo q error: {q_error:.4}");
        }
        Command::Simulate => {
            for path in pipeline::cmd_simulate(&config, &out)? {
                println!("{}", path.display());
            }
        }
        Command::Report { results } => {
            let dir = results.unwrap_or(out);
            let with_config = cli.config.is_some().then_some(&config);
            let report = pipeline::cmd_report(&dir, with_config)?;
            print!("{}", report.to_text());
        }
        Command::ShowConfig => print!("{}", config.to_toml()),
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    err.chain()
        .find_map(|e| e.downcast_ref::<frl::Error>())
        .map_or(1, |e| e.exit_code() as u8)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
