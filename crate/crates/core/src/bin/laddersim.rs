use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use laddersim::scenario::{run_scenario, Scenario, ScenarioConfig};

/// Run a named scenario and write its report, summary and CSV outputs.
#[derive(Parser, Debug)]
#[command(name = "laddersim", version)]
struct Cli {
    /// One of: exactness, recursion, bn, expressibility, disentangle, overfit, sgd.
    scenario: Scenario,
    /// Scenario config (JSON). Defaults to the bundled config for the scenario.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides the number of training steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Overrides the learning rate.
    #[arg(long)]
    lr: Option<f64>,
}

fn run(cli: &Cli) -> laddersim::Result<bool> {
    let mut config = match &cli.config {
        Some(p) => ScenarioConfig::from_path(p)?,
        None => ScenarioConfig::bundled(cli.scenario),
    };
    if let Some(s) = cli.steps {
        config.train.steps = s;
    }
    if let Some(lr) = cli.lr {
        config.train.lr = lr;
    }
    let output = run_scenario(cli.scenario, &config, cli.seed)?;
    output.write_to(&cli.out)?;
    print!("{}", output.report.summary());
    Ok(output.report.pass)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("laddersim: {e}");
            ExitCode::from(2)
        }
    }
}
