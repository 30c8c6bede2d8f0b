use clap::{Parser, Subcommand};
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "feroma",
    about = "Federated-learning simulation with distribution-profile aggregation",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run training and inference for every configured seed.
    Run {
        /// Experiment config file.
        #[arg(long)]
        config: PathBuf,
        /// Override a config value, e.g. --set federation.aggregation=fedavg.
        #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
        overrides: Vec<String>,
        /// Shortcut for --set federation.aggregation=<kind>.
        #[arg(long)]
        aggregation: Option<String>,
    },
    /// Run the fidelity, stochasticity, and sanity harnesses.
    Validate {
        /// Diagonal-Gaussian pairs for the fidelity sweep.
        #[arg(long, default_value_t = 10_000)]
        pairs: usize,
        /// Repeated extractions for the stochasticity check.
        #[arg(long, default_value_t = 1_000)]
        trials: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Where the JSON report is written.
        #[arg(long, default_value = "validation_report.json")]
        output: PathBuf,
    },
    /// Write every (round, client) dataset and a tag manifest to disk.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
        overrides: Vec<String>,
    },
}

fn init_worker_pool() {
    if let Ok(n) = std::env::var("FEROMA_WORKERS") {
        if let Ok(threads) = n.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build_global();
        }
    }
}

fn main() {
    init_worker_pool();
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Run {
            config,
            mut overrides,
            aggregation,
        } => {
            if let Some(kind) = aggregation {
                overrides.push(format!("federation.aggregation={kind}"));
            }
            feroma_cli::cmd_run(&config, &overrides)
        }
        Command::Validate {
            pairs,
            trials,
            seed,
            output,
        } => feroma_cli::cmd_validate(pairs, trials, seed, &output),
        Command::GenData { config, overrides } => feroma_cli::cmd_gen_data(&config, &overrides),
    };
    std::process::exit(code);
}
