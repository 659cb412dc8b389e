use std::path::Path;
use std::sync::Arc;

use aerolog_core::ingest::{http, IngestConfig, Service};
use aerolog_core::storage::Store;
use anyhow::{anyhow, Context};
use chrono::Duration;
use clap::Args;
use tracing::info;

use crate::config::CliConfig;
use crate::{CmdResult, Failure};

#[derive(Debug, Clone, Args)]
pub struct ServeArgs {
    /// Honor client `created_at` and derive keys from a fixed seed
    #[arg(long)]
    pub test_mode: bool,
    /// Seed for channel key generation
    #[arg(long, value_name = "N")]
    pub key_seed: Option<u64>,
}

pub fn run(cfg: &CliConfig, args: &ServeArgs) -> CmdResult {
    let store = open_writable(&cfg.data_dir)?;
    let window = i64::try_from(cfg.rate_window_secs)
        .map(Duration::seconds)
        .map_err(|_| Failure::usage(anyhow!("rate-window too large")))?;
    let service = Arc::new(Service::new(
        Arc::new(store),
        IngestConfig {
            rate_window: window,
            test_mode: args.test_mode,
            key_seed: args.key_seed,
        },
    ));
    let rt = crate::runtime()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&cfg.listen_addr)
            .await
            .with_context(|| format!("cannot bind {}", cfg.listen_addr))
            .map_err(Failure::internal)?;
        let addr = listener.local_addr().map_err(Failure::internal)?;
        eprintln!("listening on {addr}");
        info!(%addr, data_dir = %cfg.data_dir.display(), test_mode = args.test_mode, "serving");
        axum::serve(listener, http::router(service))
            .with_graceful_shutdown(shutdown_signal())
            .await
            .map_err(Failure::internal)?;
        info!("stopped");
        Ok(())
    })
}

/// Opens the store and checks that new files can be created in it.
fn open_writable(dir: &Path) -> CmdResult<Store> {
    let store = Store::open(dir)
        .with_context(|| format!("opening data dir {}", dir.display()))
        .map_err(Failure::internal)?;
    let probe = dir.join("channels").join(".write-probe");
    std::fs::write(&probe, b"")
        .and_then(|_| std::fs::remove_file(&probe))
        .with_context(|| format!("data dir {} is not writable", dir.display()))
        .map_err(Failure::internal)?;
    Ok(store)
}

async fn shutdown_signal() {
    let interrupt = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let terminate = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending().await,
        }
    };
    #[cfg(not(unix))]
    let terminate = std::future::pending::<()>();
    tokio::select! {
        _ = interrupt => {}
        _ = terminate => {}
    }
    info!("shutdown requested; draining in-flight requests");
}
