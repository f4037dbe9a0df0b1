use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tollnet_core::harness::{self, Experiment, ExperimentConfig, HarnessError, IntegrationConfig};

#[derive(Parser)]
#[command(
    name = "tollnet",
    version,
    about = "Payment-channel edge offloading experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Completion time and gas fee with and without a payment channel.
    ChannelBenefit(GridArgs),
    /// Greedy versus random edge selection cost.
    CostMin(GridArgs),
    /// Full lifecycle over local sockets.
    Integration(IntegrationArgs),
}

#[derive(Args)]
struct Common {
    /// JSON config file; command-line flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output CSV path (stdout when absent).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GridArgs {
    #[command(flatten)]
    common: Common,
    /// channel_benefit_time or channel_benefit_gas; both when absent.
    #[arg(long, value_parser = parse_experiment)]
    experiment: Option<Experiment>,
    #[arg(long, value_delimiter = ',')]
    task_counts: Option<Vec<u64>>,
    #[arg(long, value_delimiter = ',')]
    gas_prices_gwei: Option<Vec<u64>>,
    #[arg(long, value_delimiter = ',')]
    block_intervals_s: Option<Vec<f64>>,
    #[arg(long)]
    repetitions: Option<u32>,
    #[arg(long, value_delimiter = ',')]
    edge_counts: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    price_schemes: Option<Vec<u8>>,
    #[arg(long)]
    t_service_s: Option<f64>,
}

#[derive(Args)]
struct IntegrationArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    tasks: Option<u64>,
    /// Close the terminal's channel together with the last payment.
    #[arg(long)]
    withdraw: bool,
    /// Sign the payment for this task index (0-based) with a foreign key.
    #[arg(long)]
    forge_at: Option<u64>,
}

fn parse_experiment(s: &str) -> Result<Experiment, String> {
    serde_json::from_value(serde_json::Value::String(s.to_owned())).map_err(|_| {
        format!("unknown experiment {s:?}; expected channel_benefit_time, channel_benefit_gas, or cost_min")
    })
}

impl GridArgs {
    fn into_config(self) -> Result<(ExperimentConfig, Option<PathBuf>), HarnessError> {
        let mut cfg = match &self.common.config {
            Some(p) => ExperimentConfig::from_json_file(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.common.seed {
            cfg.seed = s;
        }
        if self.experiment.is_some() {
            cfg.experiment = self.experiment;
        }
        if self.task_counts.is_some() {
            cfg.task_counts = self.task_counts;
        }
        if let Some(v) = self.gas_prices_gwei {
            cfg.gas_prices_gwei = v;
        }
        if let Some(v) = self.block_intervals_s {
            cfg.block_intervals_s = v;
        }
        if let Some(v) = self.repetitions {
            cfg.repetitions = v;
        }
        if let Some(v) = self.edge_counts {
            cfg.edge_counts = v;
        }
        if let Some(v) = self.price_schemes {
            cfg.price_schemes = v;
        }
        if let Some(v) = self.t_service_s {
            cfg.t_service_s = v;
        }
        let out = self.common.out.or_else(|| cfg.output_path.clone());
        Ok((cfg, out))
    }
}

fn open_out(path: Option<&PathBuf>) -> Result<Box<dyn Write>, HarnessError> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(io::stdout().lock()),
    })
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::ChannelBenefit(args) => {
            let (cfg, out) = args.into_config()?;
            let rows = harness::run_channel_benefit(&cfg)?;
            harness::write_csv(&rows, open_out(out.as_ref())?)
        }
        Command::CostMin(args) => {
            let (cfg, out) = args.into_config()?;
            let rows = harness::run_cost_min(&cfg)?;
            harness::write_csv(&rows, open_out(out.as_ref())?)
        }
        Command::Integration(args) => {
            let mut cfg = match &args.common.config {
                Some(p) => IntegrationConfig::from_json_file(p)?,
                None => IntegrationConfig::default(),
            };
            if let Some(s) = args.common.seed {
                cfg.seed = s;
            }
            if let Some(t) = args.tasks {
                cfg.tasks = t;
            }
            cfg.withdraw |= args.withdraw;
            if args.forge_at.is_some() {
                cfg.forge_at = args.forge_at;
            }
            let out = args.common.out.or_else(|| cfg.output_path.clone());
            let report = harness::run_integration(&cfg)?;
            eprintln!(
                "integration ok: {} tasks, {} wei paid, terminal collateral {} wei",
                report.session.tasks.len(),
                report.session.total_paid(),
                report.user_channel_collateral
            );
            harness::write_balances_csv(&report.balances, open_out(out.as_ref())?)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("tollnet: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
