//! Offline vetter signer. Holds the only copy of a vetter's private key and
//! never opens a network connection.

use std::fs;
use std::io::Write;
use std::os::unix::fs::{OpenOptionsExt, PermissionsExt};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use airlock_cli::{finish, CliError, EXIT_REJECTED};
use airlock_core::attestation::{sign_offline, PublicKey, SecretSeed, VettingSignature};
use airlock_core::{Clock, Digest, Random256, SystemClock};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "airlock-signer", version, about = "Offline Ed25519 signing of vetting approvals")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a key pair as <out>.key (seed, mode 0600) and <out>.pub.
    Keygen {
        #[arg(long)]
        out: PathBuf,
    },
    /// Sign an approval for one job and print (or write) the signature file.
    Sign {
        /// Canonical code hash shown on the vetting case.
        #[arg(long)]
        hash: String,
        /// Nonce issued to this vetter by the gateway.
        #[arg(long)]
        nonce: String,
        #[arg(long)]
        job_id: String,
        #[arg(long)]
        key: PathBuf,
        #[arg(long, env = "AIRLOCK_VETTER_ID")]
        vetter_id: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a signature file against a public key file.
    Verify {
        #[arg(long)]
        sig: PathBuf,
        #[arg(long)]
        pubkey: PathBuf,
        /// Also require the signature to cover this code hash.
        #[arg(long)]
        hash: Option<String>,
    },
}

fn main() -> ExitCode {
    finish(run(Cli::parse().command))
}

fn bad_key(msg: impl std::fmt::Display) -> CliError {
    CliError::validation(format!("bad key: {msg}"))
}

fn malformed(msg: impl std::fmt::Display) -> CliError {
    CliError::validation(format!("malformed input: {msg}"))
}

fn with_suffix(base: &Path, suffix: &str) -> PathBuf {
    let mut s = base.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn load_seed(path: &Path) -> Result<SecretSeed, CliError> {
    let meta = fs::metadata(path).map_err(|e| bad_key(format!("{}: {e}", path.display())))?;
    if meta.permissions().mode() & 0o077 != 0 {
        return Err(bad_key(format!("{} is readable by other users; chmod 600 it", path.display())));
    }
    let text = zeroize::Zeroizing::new(fs::read_to_string(path).map_err(|e| bad_key(format!("{}: {e}", path.display())))?);
    SecretSeed::from_key_file(&text).map_err(bad_key)
}

fn load_public(path: &Path) -> Result<PublicKey, CliError> {
    let text = fs::read_to_string(path).map_err(|e| bad_key(format!("{}: {e}", path.display())))?;
    text.trim_end().parse().map_err(bad_key)
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Keygen { out } => {
            let key_path = with_suffix(&out, ".key");
            let pub_path = with_suffix(&out, ".pub");
            for p in [&key_path, &pub_path] {
                if p.exists() {
                    return Err(CliError::validation(format!("{} already exists", p.display())));
                }
            }
            let seed = SecretSeed::generate();
            let mut f = fs::OpenOptions::new().write(true).create_new(true).mode(0o600).open(&key_path)?;
            f.write_all(seed.to_key_file().as_bytes())?;
            f.sync_all()?;
            fs::write(&pub_path, format!("{}\n", seed.public_key()))?;
            println!("{}", key_path.display());
            println!("{}", pub_path.display());
            Ok(())
        }
        Command::Sign { hash, nonce, job_id, key, vetter_id, out } => {
            let hash: Digest = hash.trim().parse().map_err(|e| malformed(format!("hash: {e}")))?;
            let nonce: Random256 = nonce.trim().parse().map_err(|e| malformed(format!("nonce: {e}")))?;
            if job_id.is_empty() || vetter_id.is_empty() {
                return Err(malformed("job id and vetter id must be non-empty"));
            }
            let seed = load_seed(&key)?;
            let sig = sign_offline(&job_id, &vetter_id, hash, nonce, &seed, SystemClock.now());
            let mut bytes = sig.to_file_bytes();
            bytes.push(b'\n');
            match out {
                Some(path) => fs::write(path, bytes)?,
                None => std::io::stdout().write_all(&bytes)?,
            }
            Ok(())
        }
        Command::Verify { sig, pubkey, hash } => {
            let raw = fs::read(&sig).map_err(|e| malformed(format!("{}: {e}", sig.display())))?;
            let sig = VettingSignature::from_file_bytes(&raw).map_err(malformed)?;
            let public = load_public(&pubkey)?;
            if !sig.verify_with_public(&public) {
                return Err(CliError { code: EXIT_REJECTED, message: "signature does not verify".into() });
            }
            if let Some(h) = hash {
                let h: Digest = h.trim().parse().map_err(|e| malformed(format!("hash: {e}")))?;
                if h != sig.code_hash {
                    return Err(CliError { code: EXIT_REJECTED, message: "signature covers a different code hash".into() });
                }
            }
            println!("signature ok: vetter {} job {} code_hash {}", sig.vetter_id, sig.job_id, sig.code_hash);
            Ok(())
        }
    }
}
