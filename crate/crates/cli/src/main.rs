//! `coinfer` command line: dataset and predictor lifecycle, simulation
//! drivers and the networked runtime roles.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "coinfer", version, about = "Device-edge GNN co-inference scheduling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Head {
    Throughput,
    Relative,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FixtureName {
    Adaptivity,
    Loopback,
    BatchKnee,
    Pipeline,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate random systems and schemes into a training set.
    GenData {
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        samples: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a predictor head and write a checkpoint.
    Train {
        #[arg(long, value_enum)]
        head: Head,
        #[arg(long, default_value_t = 200)]
        epochs: usize,
        #[arg(long, default_value_t = 2e-3)]
        lr: f64,
        #[arg(long, default_value_t = 64, value_parser = clap::value_parser!(u32).range(1..=512))]
        hidden: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the simulator on a configuration.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        lut: PathBuf,
        /// `auto`, `all-dp`, `pp:<s>` or a scheme JSON file.
        #[arg(long, default_value = "auto")]
        scheme: String,
        /// `<ms>`, `ms:<ms>`, `tasks:<n>`, or omitted for the oracle horizon.
        #[arg(long)]
        horizon: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Per-task CSV output.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Use this checkpoint's relative head instead of the simulator
        /// when `--scheme auto` ranks candidates.
        #[arg(long)]
        predictor: Option<PathBuf>,
    },
    /// Run the edge server.
    Serve {
        #[arg(long, default_value = "127.0.0.1:7400")]
        listen: String,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        lut: PathBuf,
        #[arg(long)]
        predictor: Option<PathBuf>,
        /// Registrations to wait for before the first scheme; default all clients.
        #[arg(long)]
        wait_for: Option<usize>,
        /// Exit after this many device sessions have ended.
        #[arg(long)]
        sessions: Option<usize>,
        /// Broadcast `--switch-to` once this many results have been sent.
        #[arg(long, requires = "switch_to")]
        switch_after: Option<u64>,
        /// `all-dp`, `pp:<s>` or a scheme JSON file.
        #[arg(long, requires = "switch_after")]
        switch_to: Option<String>,
        #[arg(long, default_value_t = 1.0)]
        time_scale: f64,
        /// Write the session report as JSON.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Run one device session against a server.
    Device {
        #[arg(long, default_value = "127.0.0.1:7400")]
        connect: String,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        lut: PathBuf,
        /// Device id from the configuration.
        #[arg(long)]
        device: String,
        /// Expected model id; must match the configuration.
        #[arg(long)]
        model: Option<String>,
        #[arg(long, default_value_t = 100)]
        tasks: u64,
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long, default_value_t = 32)]
        window: usize,
        #[arg(long, default_value_t = 3)]
        attempts: u32,
        #[arg(long, default_value_t = 200)]
        retry_delay_ms: u64,
        #[arg(long, default_value_t = 1.0)]
        time_scale: f64,
        /// Hold uploads back for their wire time at the configured bandwidth.
        #[arg(long)]
        emulate_link: bool,
        /// Let DP tasks run on the device when that is projected faster.
        #[arg(long)]
        local_dp: bool,
    },
    /// Write a built-in example configuration and LUT.
    Fixture {
        #[arg(value_enum)]
        name: FixtureName,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        lut: PathBuf,
        /// Adaptivity fixture: bandwidth drops to 1 Mbps at this time.
        #[arg(long)]
        drop_at_ms: Option<f64>,
        /// Client count for the loopback and batch-knee fixtures.
        #[arg(long, default_value_t = 3)]
        clients: usize,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
