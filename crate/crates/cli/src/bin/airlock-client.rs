//! Consumer client: submit bundles, follow their status, fetch released
//! results.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use airlock_cli::{finish, pack_bundle_dir, write_download, ApiClient, CliError, ManifestOverrides};
use airlock_core::JobState;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "airlock-client", version, about = "Submit jobs to a data airlock and retrieve vetted results")]
struct Cli {
    #[command(flatten)]
    conn: Connection,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Connection {
    /// Gateway base URL.
    #[arg(long, env = "AIRLOCK_GATEWAY", default_value = "http://127.0.0.1:8700", global = true)]
    gateway: String,
    /// Bearer token. Prefer --token-file or the environment over the command line.
    #[arg(long, env = "AIRLOCK_TOKEN", hide_env_values = true, global = true)]
    token: Option<String>,
    /// File holding the bearer token on one line.
    #[arg(long, env = "AIRLOCK_TOKEN_FILE", global = true, conflicts_with = "token")]
    token_file: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Pack a bundle directory and submit it. Prints the job id and code hash.
    Submit {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long)]
        entrypoint: Option<String>,
        #[arg(long, env = "AIRLOCK_RUNTIME_REF")]
        runtime_ref: Option<String>,
        #[arg(long)]
        dataset_id: Option<String>,
        #[arg(long)]
        max_runtime_s: Option<u64>,
        /// Only pack and print the code hash; do not contact the gateway.
        #[arg(long)]
        dry_run: bool,
    },
    /// Print the job's current state, or wait for a terminal outcome.
    Poll {
        #[arg(long)]
        job_id: String,
        /// Wait until the job is released or rejected.
        #[arg(long)]
        until_terminal: bool,
        #[arg(long, env = "AIRLOCK_POLL_INTERVAL_S", default_value_t = 3.0)]
        interval_s: f64,
        /// Give up after this many seconds (0 waits indefinitely).
        #[arg(long, default_value_t = 0)]
        timeout_s: u64,
    },
    /// Print the full job record as JSON.
    Status {
        #[arg(long)]
        job_id: String,
    },
    /// Download released results into a directory.
    Fetch {
        #[arg(long)]
        job_id: String,
        #[arg(long)]
        out: PathBuf,
    },
}

impl Connection {
    fn client(&self) -> Result<ApiClient, CliError> {
        let token = match (&self.token, &self.token_file) {
            (Some(t), _) => t.clone(),
            (None, Some(path)) => String::from_utf8(airlock_cli::read_secret_file(path)?.to_vec())
                .map_err(|_| CliError::validation("token file is not UTF-8"))?,
            (None, None) => return Err(CliError { code: airlock_cli::EXIT_AUTH, message: "no token given".into() }),
        };
        Ok(ApiClient::new(&self.gateway, token.trim()))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    finish(run(cli))
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Submit { dir, entrypoint, runtime_ref, dataset_id, max_runtime_s, dry_run } => {
            let overrides = ManifestOverrides { entrypoint, runtime_ref, dataset_id, max_runtime_s };
            let archive = pack_bundle_dir(&dir, &overrides)?;
            let local = archive.canonical_hash();
            if dry_run {
                println!("code_hash {local}");
                return Ok(());
            }
            let receipt = cli.conn.client()?.submit(&archive)?;
            if receipt.code_hash != local {
                return Err(CliError::rejected(format!("gateway hash {} differs from local hash {local}", receipt.code_hash)));
            }
            println!("job_id {}", receipt.job_id);
            println!("code_hash {}", receipt.code_hash);
            Ok(())
        }
        Command::Poll { job_id, until_terminal, interval_s, timeout_s } => {
            let client = cli.conn.client()?;
            let interval = Duration::from_secs_f64(interval_s.max(0.05));
            let deadline = (timeout_s > 0).then(|| Instant::now() + Duration::from_secs(timeout_s));
            let mut last = None;
            loop {
                let job = client.status(&job_id)?;
                if last != Some(job.state) {
                    match &job.detail {
                        Some(d) => println!("{:?} ({d})", job.state),
                        None => println!("{:?}", job.state),
                    }
                    last = Some(job.state);
                }
                match job.state {
                    JobState::Released | JobState::Retrieved => return Ok(()),
                    JobState::RejectedInput | JobState::RejectedOutput => {
                        return Err(CliError::rejected(format!("job {job_id} was {:?}", job.state)));
                    }
                    _ if !until_terminal => return Ok(()),
                    _ => {}
                }
                if deadline.is_some_and(|d| Instant::now() >= d) {
                    return Err(CliError::transport(format!("timed out waiting for job {job_id}")));
                }
                std::thread::sleep(interval);
            }
        }
        Command::Status { job_id } => {
            let job = cli.conn.client()?.status(&job_id)?;
            println!("{}", serde_json::to_string_pretty(&job).expect("serialisable"));
            Ok(())
        }
        Command::Fetch { job_id, out } => {
            let download = cli.conn.client()?.results(&job_id)?;
            let written = write_download(&download, &out)?;
            for path in written {
                println!("{}", path.display());
            }
            Ok(())
        }
    }
}
