//! Standalone dispatcher process.

use std::path::PathBuf;
use std::time::Duration;

use anyhow::{Context, Result};
use clap::Parser;
use prepserve::dispatcher::{DispatcherConfig, DispatcherServer};

#[derive(Parser)]
#[command(name = "dispatcher", about = "Serve the job and shard registry")]
struct Args {
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    #[arg(long, default_value_t = 5050)]
    port: u16,
    /// Durable journal; state is memory-only without it.
    #[arg(long)]
    journal_path: Option<PathBuf>,
    /// Skip fsync after each journal append.
    #[arg(long)]
    no_fsync: bool,
    #[arg(long, default_value_t = 1000)]
    heartbeat_interval_ms: u64,
    /// Defaults to three heartbeat intervals.
    #[arg(long)]
    worker_timeout_ms: Option<u64>,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let a = Args::parse();
    let server = DispatcherServer::start(
        &format!("{}:{}", a.host, a.port),
        DispatcherConfig {
            journal_path: a.journal_path,
            fsync: !a.no_fsync,
            heartbeat_interval: Duration::from_millis(a.heartbeat_interval_ms),
            worker_timeout: a.worker_timeout_ms.map(Duration::from_millis),
        },
    )
    .context("starting dispatcher")?;
    log::info!("dispatcher listening on {}", server.addr());
    loop {
        std::thread::park();
    }
}
