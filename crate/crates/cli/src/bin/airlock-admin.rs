//! Local console for the zone hosts: vault setup and dataset loading, vetter
//! key registries, principals, audit verification and queue inspection.

use std::fs;
use std::io::BufReader;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use airlock_cli::{finish, read_secret_file, CliError, EXIT_REJECTED};
use airlock_core::attestation::PublicKey;
use airlock_core::audit::{verify_audit_file, AuditAction, AuditLog, ChainReport, AUDIT_FILE};
use airlock_core::deploy::{DaemonLock, Deployment, Layout};
use airlock_core::gateway::auth::{Role, StaticTokens};
use airlock_core::messages::wiring;
use airlock_core::vault::{KdfParams, Vault, VaultOptions};
use airlock_core::wal::{Queue, QueueError, QueueOptions};
use airlock_core::{Clock, SystemClock, Zone};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

#[derive(Parser)]
#[command(name = "airlock-admin", version, about = "Local administration of an airlock deployment")]
struct Cli {
    /// Deployment root directory.
    #[arg(long, env = "AIRLOCK_ROOT", global = true, default_value = "/var/lib/airlock")]
    root: PathBuf,
    /// Name recorded as the actor in audit events.
    #[arg(long, global = true, default_value = "console")]
    actor: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ZoneArg {
    Public,
    Secure,
    Restricted,
    All,
}

impl ZoneArg {
    fn zones(self) -> Vec<Zone> {
        match self {
            ZoneArg::Public => vec![Zone::Public],
            ZoneArg::Secure => vec![Zone::Secure],
            ZoneArg::Restricted => vec![Zone::Restricted],
            ZoneArg::All => Zone::ALL.to_vec(),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Create the directory layout and a new vault.
    Init {
        #[arg(long, env = "AIRLOCK_PASSPHRASE_FILE")]
        passphrase_file: PathBuf,
        #[arg(long, default_value_t = KdfParams::default().memory_kib)]
        kdf_memory_kib: u32,
        #[arg(long, default_value_t = KdfParams::default().iterations)]
        kdf_iterations: u32,
    },
    /// Encrypt a dataset into the vault.
    LoadDataset {
        #[arg(long, env = "AIRLOCK_PASSPHRASE_FILE")]
        passphrase_file: PathBuf,
        #[arg(long)]
        id: String,
        #[arg(long)]
        file: PathBuf,
        #[arg(long, default_value_t = 1)]
        version: u64,
    },
    /// List datasets the vault holds.
    ListDatasets,
    /// Register a vetter's public key with zone registries.
    RegisterVetter {
        #[arg(long)]
        id: String,
        #[arg(long)]
        pubkey: PathBuf,
        #[arg(long, value_enum, default_value = "all")]
        zone: ZoneArg,
    },
    /// Disable a vetter: their signatures stop being accepted.
    DisableVetter {
        #[arg(long)]
        id: String,
        #[arg(long, value_enum, default_value = "all")]
        zone: ZoneArg,
    },
    /// Re-enable a previously disabled vetter.
    EnableVetter {
        #[arg(long)]
        id: String,
        #[arg(long, value_enum, default_value = "all")]
        zone: ZoneArg,
    },
    /// Add a gateway principal and print its bearer token once.
    AddPrincipal {
        #[arg(long)]
        id: String,
        #[arg(long)]
        role: Role,
        /// Write the token here (mode 0600) instead of stdout.
        #[arg(long)]
        token_out: Option<PathBuf>,
    },
    /// Verify zone audit chains.
    VerifyAudit {
        #[arg(long, value_enum, default_value = "all")]
        zone: ZoneArg,
    },
    /// Run queue recovery and print each queue's state. Refuses while the
    /// daemon is running unless --force is given.
    QueueInspect {
        #[arg(long)]
        queue: Option<String>,
        /// Also print every retained record.
        #[arg(long)]
        records: bool,
        #[arg(long)]
        force: bool,
    },
}

fn main() -> ExitCode {
    airlock_cli::init_tracing();
    finish(run(Cli::parse()))
}

fn other(e: impl std::fmt::Display) -> CliError {
    CliError::rejected(e.to_string())
}

fn open_vault(layout: &Layout, clock: Arc<dyn Clock>, passphrase_file: Option<&PathBuf>) -> Result<Vault, CliError> {
    if !layout.restricted.join(airlock_core::vault::CONFIG_FILE).exists() {
        return Err(CliError::validation(format!("no vault under {}; run init first", layout.root.display())));
    }
    let vault = Vault::open(&layout.restricted, clock, VaultOptions::default()).map_err(other)?;
    if let Some(path) = passphrase_file {
        let pass = read_secret_file(path)?;
        let report = vault.unlock(&pass).map_err(other)?;
        for q in &report.quarantined {
            eprintln!("warning: dataset {q:?} failed verification and is quarantined");
        }
    }
    Ok(vault)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let layout = Layout::new(&cli.root);
    let clock: Arc<dyn Clock> = Arc::new(SystemClock);
    match cli.command {
        Command::Init { passphrase_file, kdf_memory_kib, kdf_iterations } => {
            if layout.restricted.join(airlock_core::vault::CONFIG_FILE).exists() {
                return Err(CliError::validation(format!("{} already holds a vault", layout.root.display())));
            }
            let pass = read_secret_file(&passphrase_file)?;
            let kdf = KdfParams { memory_kib: kdf_memory_kib, iterations: kdf_iterations, ..KdfParams::default() };
            Deployment::init(&cli.root, &pass, kdf).map_err(other)?;
            println!("initialised {}", layout.root.display());
            Ok(())
        }
        Command::LoadDataset { passphrase_file, id, file, version } => {
            let vault = open_vault(&layout, clock, Some(&passphrase_file))?;
            let mut src = BufReader::new(fs::File::open(&file).map_err(|e| CliError::validation(format!("{}: {e}", file.display())))?);
            let manifest = vault.load_dataset(&cli.actor, &mut src, &id, version).map_err(other)?;
            println!("loaded {} v{} ({} bytes, sha256 {})", manifest.dataset_id, manifest.version, manifest.byte_size, manifest.plaintext_digest);
            Ok(())
        }
        Command::ListDatasets => {
            let vault = open_vault(&layout, clock, None)?;
            for m in vault.manifests().map_err(other)? {
                println!("{} v{} {} bytes sha256 {}", m.dataset_id, m.version, m.byte_size, m.plaintext_digest);
            }
            Ok(())
        }
        Command::RegisterVetter { id, pubkey, zone } => {
            let text = fs::read_to_string(&pubkey).map_err(|e| CliError::validation(format!("{}: {e}", pubkey.display())))?;
            let key: PublicKey = text.trim_end().parse().map_err(|e| CliError::validation(format!("bad key: {e}")))?;
            for z in zone.zones() {
                let store = layout.key_store(z, clock.clone()).map_err(other)?;
                store.register(&cli.actor, &id, key, clock.now()).map_err(other)?;
                println!("{}: vetter {id} registered and enabled", z.as_str());
            }
            Ok(())
        }
        Command::DisableVetter { id, zone } => set_enabled(&layout, clock, &cli.actor, &id, zone, false),
        Command::EnableVetter { id, zone } => set_enabled(&layout, clock, &cli.actor, &id, zone, true),
        Command::AddPrincipal { id, role, token_out } => {
            let tokens = StaticTokens::open(&layout.principals());
            let token = zeroize::Zeroizing::new(tokens.add(&id, role).map_err(other)?);
            let audit = AuditLog::open(&layout.audit_dir(Zone::Public), Zone::Public, clock).map_err(other)?;
            audit.record(&cli.actor, AuditAction::PrincipalRegistered, &json!({ "principal_id": id, "role": role })).map_err(other)?;
            match token_out {
                Some(path) => {
                    use std::io::Write;
                    use std::os::unix::fs::OpenOptionsExt;
                    let mut f = fs::OpenOptions::new().write(true).create_new(true).mode(0o600).open(&path)?;
                    writeln!(f, "{}", token.as_str())?;
                    println!("token for {id} written to {}", path.display());
                }
                None => println!("{}", token.as_str()),
            }
            Ok(())
        }
        Command::VerifyAudit { zone } => {
            let mut broken = false;
            for z in zone.zones() {
                let path = layout.audit_dir(z).join(AUDIT_FILE);
                if !path.exists() {
                    println!("{}: chain ok, 0 events", z.as_str());
                    continue;
                }
                match verify_audit_file(&path).map_err(other)? {
                    ChainReport::Ok { length } => println!("{}: chain ok, {length} events", z.as_str()),
                    ChainReport::Broken { index, reason } => {
                        broken = true;
                        println!("{}: chain broken at index {index} ({reason:?})", z.as_str());
                    }
                }
            }
            if broken {
                return Err(CliError { code: EXIT_REJECTED, message: "audit verification failed".into() });
            }
            Ok(())
        }
        Command::QueueInspect { queue, records, force } => {
            if !force && DaemonLock::is_held(&layout)? {
                return Err(CliError::validation("the daemon is running; stop it or pass --force"));
            }
            let mut frozen = false;
            for spec in wiring() {
                if queue.as_ref().is_some_and(|q| *q != spec.name) {
                    continue;
                }
                match Queue::open(&layout.queues.join(&spec.name), &spec.name, QueueOptions::default()) {
                    Ok((q, report)) => {
                        println!("{}", json!({ "recovery": report, "status": q.status() }));
                        if records {
                            for d in q.scan().map_err(other)? {
                                let text = String::from_utf8(d.payload.clone()).unwrap_or_else(|_| hex::encode(&d.payload));
                                println!("  {} {}", d.seq, text);
                            }
                        }
                    }
                    Err(e @ QueueError::CorruptInterior { .. }) => {
                        frozen = true;
                        println!("{}", json!({ "queue": spec.name, "error": e.to_string() }));
                    }
                    Err(e) => return Err(other(e)),
                }
            }
            if frozen {
                return Err(CliError { code: EXIT_REJECTED, message: "interior corruption found".into() });
            }
            Ok(())
        }
    }
}

fn set_enabled(layout: &Layout, clock: Arc<dyn Clock>, actor: &str, id: &str, zone: ZoneArg, enabled: bool) -> Result<(), CliError> {
    for z in zone.zones() {
        let store = layout.key_store(z, clock.clone()).map_err(other)?;
        store.set_enabled(actor, id, enabled).map_err(other)?;
        println!("{}: vetter {id} {}", z.as_str(), if enabled { "enabled" } else { "disabled" });
    }
    Ok(())
}
