use std::path::PathBuf;

use chainlog_cli::{execute, CliCommand};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "chainlog-node", version, about = "Run and inspect a chainlog desk")]
struct Args {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run every node in the config in real time, printing events.
    Start {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        run_for_ms: Option<u64>,
    },
    ServerInfo {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        endpoint: String,
    },
    Peers {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        endpoint: String,
    },
    /// Sign a write with the key file and wait for it to validate.
    Submit {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        endpoint: String,
        #[arg(long)]
        key: PathBuf,
        sql: String,
    },
    Select {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        endpoint: String,
        #[arg(long)]
        key: Option<PathBuf>,
        sql: String,
    },
    Scenario {
        script: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    VerifyChain {
        data_dir: PathBuf,
    },
    Keygen {
        key: PathBuf,
    },
}

fn main() {
    let cmd = match Args::parse().cmd {
        Cmd::Start { config, run_for_ms } => CliCommand::Start { config, run_for_ms },
        Cmd::ServerInfo { config, endpoint } => CliCommand::ServerInfo { config, endpoint },
        Cmd::Peers { config, endpoint } => CliCommand::Peers { config, endpoint },
        Cmd::Submit { config, endpoint, key, sql } => CliCommand::Submit { config, endpoint, key, sql },
        Cmd::Select { config, endpoint, key, sql } => CliCommand::Select { config, endpoint, key, sql },
        Cmd::Scenario { script, seed } => CliCommand::Scenario { script, seed },
        Cmd::VerifyChain { data_dir } => CliCommand::VerifyChain { data_dir },
        Cmd::Keygen { key } => CliCommand::Keygen { key },
    };
    let code = execute(&cmd, &mut std::io::stdout().lock(), &mut std::io::stderr().lock());
    std::process::exit(code);
}
