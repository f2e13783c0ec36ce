//! Standalone worker process.

use std::time::Duration;

use anyhow::{Context, Result};
use clap::Parser;
use prepserve::worker::{Worker, WorkerConfig};

#[derive(Parser)]
#[command(name = "worker", about = "Run pipelines for a dispatcher")]
struct Args {
    #[arg(long, default_value = "127.0.0.1:5050")]
    dispatcher_addr: String,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    /// 0 picks a free port.
    #[arg(long, default_value_t = 0)]
    port: u16,
    /// Address announced to the dispatcher, if not the bound one.
    #[arg(long)]
    advertise_addr: Option<String>,
    #[arg(long, default_value_t = 8)]
    buffer_batches: usize,
    #[arg(long, default_value_t = 16)]
    window_batches: usize,
    #[arg(long, default_value_t = 1000)]
    heartbeat_interval_ms: u64,
    #[arg(long)]
    compression: bool,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let a = Args::parse();
    let w = Worker::start(WorkerConfig {
        dispatcher_addr: a.dispatcher_addr,
        listen_addr: Some(format!("{}:{}", a.host, a.port)),
        advertise_addr: a.advertise_addr,
        buffer_batches: a.buffer_batches,
        window_batches: a.window_batches,
        heartbeat_interval: Duration::from_millis(a.heartbeat_interval_ms),
        compression: a.compression,
        ..Default::default()
    })
    .context("starting worker")?;
    log::info!("worker {} serving on {}", w.worker_id(), w.address());
    loop {
        std::thread::park();
    }
}
