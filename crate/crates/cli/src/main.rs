mod commands;
mod draws;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "hdsdm", version, about = "Variance-partitioning species distribution models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the MCMC seed from the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; overrides the config, defaults to `hdsdm-out`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Fit on the training rows; writes draws, R-hat and acceptance tables.
    Fit(Common),
    /// Predicted probabilities for the test rows.
    Predict(Common),
    /// Log-likelihood, Brier score, Tjur R² and accuracy on the test rows.
    Metrics(Common),
    /// Variance partition φ and posterior-mean trends.
    Partition(Common),
    /// Refit over the configured Dirichlet q values.
    Sensitivity(Common),
    /// Prior-only sampling checked against the analytic prior marginals.
    PriorCheck(Common),
}

impl Command {
    fn parts(&self) -> (&'static str, &Common) {
        match self {
            Command::Fit(c) => ("fit", c),
            Command::Predict(c) => ("predict", c),
            Command::Metrics(c) => ("metrics", c),
            Command::Partition(c) => ("partition", c),
            Command::Sensitivity(c) => ("sensitivity", c),
            Command::PriorCheck(c) => ("prior-check", c),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (name, common) = cli.command.parts();
    match commands::run(name, common) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = commands::exit_code(&e);
            let record = serde_json::json!({
                "status": "error",
                "command": name,
                "kind": e.kind(),
                "message": e.to_string(),
                "exit_code": code,
            });
            eprintln!("{record}");
            let out = commands::out_dir(common, None);
            if std::fs::create_dir_all(&out).is_ok() {
                let _ = std::fs::write(out.join("error.json"), format!("{record:#}\n"));
            }
            ExitCode::from(code)
        }
    }
}
