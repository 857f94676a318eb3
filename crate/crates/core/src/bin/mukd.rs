//! The kernel daemon. Configuration comes from `--config`, or the file named
//! by `MUK_CONFIG`; `MUK_SECRET` overrides the token secret.

use std::path::PathBuf;

use clap::Parser;
use tracing_subscriber::EnvFilter;

use muk::config::KernelConfig;
use muk::kernel;

#[derive(Parser, Debug)]
#[command(name = "mukd")]
struct Args {
    #[arg(long)]
    config: Option<PathBuf>,
}

async fn terminated() {
    #[cfg(unix)]
    {
        use tokio::signal::unix::{signal, SignalKind};
        let mut term = signal(SignalKind::terminate()).expect("SIGTERM handler");
        tokio::select! {
            _ = tokio::signal::ctrl_c() => {}
            _ = term.recv() => {}
        }
    }
    #[cfg(not(unix))]
    {
        let _ = tokio::signal::ctrl_c().await;
    }
}

#[tokio::main]
async fn main() {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .init();
    let args = Args::parse();
    let cfg = match KernelConfig::from_env(args.config.as_deref()) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("mukd: {e}");
            std::process::exit(2);
        }
    };
    let k = match kernel::boot(cfg).await {
        Ok(k) => k,
        Err(e) => {
            eprintln!("mukd: {e}");
            std::process::exit(1);
        }
    };
    tracing::info!(edge = %k.listen_addr(), admin = %k.admin_addr(), "kernel up");
    terminated().await;
    let report = k.shutdown().await;
    for f in &report.failures {
        tracing::warn!("{f}");
    }
    tracing::info!(stopped = report.stopped.len(), "kernel down");
}
