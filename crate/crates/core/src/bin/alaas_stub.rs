//! Standalone inference stub speaking the remote backend protocol.

use std::time::Duration;

use alaas_core::inference::stub::{StubConfig, StubServer};
use clap::Parser;

#[derive(Parser)]
#[command(name = "alaas-stub", about = "Mock-model inference server over HTTP")]
struct Args {
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    #[arg(long, default_value_t = 8090)]
    port: u16,
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value_t = 16)]
    embed_dim: usize,
    /// Fixed delay added to every call, in milliseconds.
    #[arg(long, default_value_t = 0.0)]
    per_call_ms: f64,
    /// Delay added per row, in milliseconds.
    #[arg(long, default_value_t = 0.0)]
    per_item_ms: f64,
    #[arg(long, default_value_t = 4)]
    workers: usize,
}

fn main() -> std::io::Result<()> {
    let args = Args::parse();
    let server = StubServer::bind(
        &format!("{}:{}", args.host, args.port),
        StubConfig {
            classes: args.classes,
            embed_dim: args.embed_dim,
            per_call_delay: Duration::from_secs_f64(args.per_call_ms.max(0.0) / 1000.0),
            per_row_delay: Duration::from_secs_f64(args.per_item_ms.max(0.0) / 1000.0),
            faults: Vec::new(),
            workers: args.workers,
        },
    )?;
    eprintln!("alaas-stub listening on {}:{}", args.host, server.port());
    server.join();
    Ok(())
}
