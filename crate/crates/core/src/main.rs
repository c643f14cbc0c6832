use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use suspension_lab::config::{ExperimentConfig, ExperimentKind};
use suspension_lab::experiments;

#[derive(Parser)]
#[command(name = "suspension-lab", version, about = "Reproducible experiments on a tower over the dyadic odometer")]
struct Cli {
    /// List the available experiments and exit.
    #[arg(long)]
    list: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment config.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.list {
        for k in ExperimentKind::ALL {
            println!("{:<16} {}", k.name(), k.description());
            println!("{:<16} keys: seed, {}", "", k.keys().join(", "));
        }
        return ExitCode::SUCCESS;
    }
    let Some(Command::Run { config, out }) = cli.command else {
        eprintln!("nothing to do: use `run --config <file> --out <dir>` or `--list`");
        return ExitCode::from(2);
    };
    let outcome = ExperimentConfig::from_file(&config).and_then(|cfg| experiments::run(&cfg, &out));
    match outcome {
        Ok(o) if o.passed() => {
            for a in &o.assertions {
                println!("PASS {}: {}", a.name, a.detail);
            }
            println!("{} passed; artifacts in {}", o.experiment, out.display());
            ExitCode::SUCCESS
        }
        Ok(o) => {
            let report = json!({
                "experiment": o.experiment.name(),
                "failures": o.failures(),
            });
            println!("{}", serde_json::to_string_pretty(&report).unwrap_or_default());
            ExitCode::from(1)
        }
        Err(e) => {
            let report = json!({"error": e.to_string()});
            println!("{report}");
            ExitCode::from(2)
        }
    }
}
