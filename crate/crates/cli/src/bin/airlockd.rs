//! Runs all three zones of a deployment in one process and serves the
//! gateway API until interrupted.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use airlock_cli::{finish, read_secret_file, CliError};
use airlock_core::deploy::{DaemonLock, Deployment, DeploymentConfig, Layout};
use airlock_core::executor::runner::ProcessRunner;
use airlock_core::gateway::http;
use airlock_core::SystemClock;
use clap::Parser;

#[derive(Parser)]
#[command(name = "airlockd", version, about = "Data airlock daemon: public gateway, secure executor and restricted vault")]
struct Cli {
    #[arg(long, env = "AIRLOCK_ROOT", default_value = "/var/lib/airlock")]
    root: PathBuf,
    /// Address for the gateway API. TLS is expected to terminate in front of it.
    #[arg(long, env = "AIRLOCK_LISTEN", default_value = "127.0.0.1:8700")]
    listen: SocketAddr,
    #[arg(long, env = "AIRLOCK_PASSPHRASE_FILE")]
    passphrase_file: PathBuf,
    /// Concurrent airlocks (K).
    #[arg(long, default_value_t = 1)]
    parallelism: usize,
    /// Distinct vetter approvals required before a job may run.
    #[arg(long, default_value_t = 1)]
    approval_threshold: usize,
    /// Seconds the executor waits for a vault credential.
    #[arg(long, default_value_t = 60)]
    credential_timeout_s: u64,
    /// Largest accepted bundle, in bytes.
    #[arg(long)]
    max_bundle_bytes: Option<usize>,
}

fn main() -> ExitCode {
    airlock_cli::init_tracing();
    finish(run(Cli::parse()))
}

fn run(cli: Cli) -> Result<(), CliError> {
    if cli.parallelism == 0 || cli.approval_threshold == 0 {
        return Err(CliError::validation("parallelism and approval threshold must be at least 1"));
    }
    let layout = Layout::new(&cli.root);
    if !layout.restricted.join(airlock_core::vault::CONFIG_FILE).exists() {
        return Err(CliError::validation(format!("no deployment under {}; run airlock-admin init", cli.root.display())));
    }
    let _lock = DaemonLock::try_acquire(&layout)?
        .ok_or_else(|| CliError::validation(format!("another daemon is running on {}", cli.root.display())))?;

    let mut config = DeploymentConfig::default();
    config.executor.parallelism = cli.parallelism;
    config.executor.approval_threshold = cli.approval_threshold;
    config.executor.credential_timeout = Duration::from_secs(cli.credential_timeout_s);
    config.gateway.approval_threshold = cli.approval_threshold;
    if let Some(max) = cli.max_bundle_bytes {
        config.gateway.max_bundle_bytes = max;
    }
    let mut deployment =
        Deployment::open(&cli.root, Arc::new(SystemClock), config, Arc::new(ProcessRunner::default())).map_err(|e| CliError::rejected(e.to_string()))?;
    {
        let pass = read_secret_file(&cli.passphrase_file)?;
        let report = deployment.unlock(&pass).map_err(|e| CliError::rejected(e.to_string()))?;
        tracing::info!(serviceable = report.serviceable.len(), quarantined = report.quarantined.len(), "vault unlocked");
    }
    deployment.start();

    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    let served = runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(cli.listen).await?;
        let bound = listener.local_addr()?;
        // Tests and supervisors read this line to learn the bound port.
        println!("listening on {bound}");
        tracing::info!(%bound, parallelism = cli.parallelism, "gateway serving");
        http::serve(deployment.public.clone(), listener, shutdown_signal()).await
    });
    tracing::info!("shutting down");
    deployment.stop();
    served.map_err(|e| CliError::transport(e.to_string()))
}

async fn shutdown_signal() {
    use tokio::signal::unix::{signal, SignalKind};
    let mut term = signal(SignalKind::terminate()).expect("SIGTERM handler");
    tokio::select! {
        _ = tokio::signal::ctrl_c() => {}
        _ = term.recv() => {}
    }
}
