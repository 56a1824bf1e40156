//! Runs the gatekeeper HTTP service.
//!
//! Configuration comes from the environment (flags override):
//! `LOMAS_BIND_ADDR`, `LOMAS_STORE_PATH`, `LOMAS_MIN_LATENCY_MS`,
//! `LOMAS_WORKERS`, plus the dataset store's `LOMAS_*` keys.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::Parser;
use gatekeeper_server::{AppState, Gatekeeper, GatekeeperConfig};
use gatekeeper_store::AdminStore;
use tokio::net::TcpListener;

#[derive(Parser)]
#[command(version, about = "Differential-privacy gatekeeper service")]
struct Args {
    #[arg(long, env = "LOMAS_BIND_ADDR", default_value = "127.0.0.1:8080")]
    bind: SocketAddr,
    #[arg(long, env = "LOMAS_STORE_PATH", default_value = "lomas_store.jsonl")]
    store: PathBuf,
    /// Concurrent request executions (default: 4 per core).
    #[arg(long, env = "LOMAS_WORKERS")]
    workers: Option<usize>,
}

async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
    tracing::info!("shutting down");
}

async fn run(args: Args) -> Result<(), String> {
    let config = GatekeeperConfig::from_env()?;
    let store = AdminStore::open(&args.store).map_err(|e| format!("{}: {e}", args.store.display()))?;
    let cleared = store.reconcile_after_restart().map_err(|e| e.to_string())?;
    if cleared > 0 {
        tracing::warn!(cleared, "released query guards left over from a previous run");
    }
    let workers = args
        .workers
        .unwrap_or_else(|| 4 * std::thread::available_parallelism().map(|n| n.get()).unwrap_or(2));
    let gatekeeper = Arc::new(Gatekeeper::new(Arc::new(store), config));
    let listener = TcpListener::bind(args.bind)
        .await
        .map_err(|e| format!("bind {}: {e}", args.bind))?;
    let addr = listener.local_addr().map_err(|e| e.to_string())?;
    // Tests and scripts read this line to find the port.
    println!("listening on {addr}");
    tracing::info!(%addr, store = %args.store.display(), workers, "gatekeeper ready");
    gatekeeper_server::serve(listener, AppState::new(gatekeeper, workers), shutdown_signal())
        .await
        .map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .with_writer(std::io::stderr)
        .init();
    let args = Args::parse();
    let runtime = match tokio::runtime::Builder::new_multi_thread().enable_all().build() {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    };
    match runtime.block_on(run(args)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
