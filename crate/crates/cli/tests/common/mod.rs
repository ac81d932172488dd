//! Drives the real binaries: admin console, offline signer, client and
//! daemon, talking HTTP to the gateway.
#![allow(dead_code)]

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};
use std::time::{Duration, Instant};

use airlock_cli::ApiClient;
use serde_json::{json, Value};

pub fn bin(name: &str) -> PathBuf {
    match name {
        "airlock-admin" => PathBuf::from(env!("CARGO_BIN_EXE_airlock-admin")),
        "airlock-client" => PathBuf::from(env!("CARGO_BIN_EXE_airlock-client")),
        "airlock-signer" => PathBuf::from(env!("CARGO_BIN_EXE_airlock-signer")),
        "airlockd" => PathBuf::from(env!("CARGO_BIN_EXE_airlockd")),
        other => panic!("unknown binary {other}"),
    }
}

/// Runs a tool with a clean airlock environment.
pub fn run(name: &str, args: &[&str]) -> Output {
    let mut cmd = Command::new(bin(name));
    for (k, _) in std::env::vars() {
        if k.starts_with("AIRLOCK_") {
            cmd.env_remove(k);
        }
    }
    cmd.args(args).output().expect("spawn tool")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn check(o: Output) -> String {
    assert!(o.status.success(), "exit {:?}\nstdout: {}\nstderr: {}", o.status.code(), stdout(&o), String::from_utf8_lossy(&o.stderr));
    stdout(&o)
}

pub fn path_str(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

pub struct SiteVetter {
    pub id: String,
    pub key: PathBuf,
    pub public: PathBuf,
    pub token_file: PathBuf,
}

/// An initialised deployment with one consumer and `n` vetters, each with
/// an offline key pair under `keys/`.
pub struct Site {
    pub dir: PathBuf,
    pub root: PathBuf,
    pub passphrase: PathBuf,
    pub consumer_token: PathBuf,
    pub vetters: Vec<SiteVetter>,
}

impl Site {
    pub fn create(dir: &Path, vetters: usize) -> Site {
        let root = dir.join("deploy");
        let passphrase = dir.join("passphrase");
        fs::write(&passphrase, "correct horse battery staple\n").unwrap();
        let r = path_str(&root).to_owned();
        check(run("airlock-admin", &["--root", &r, "init", "--passphrase-file", path_str(&passphrase), "--kdf-memory-kib", "64", "--kdf-iterations", "1"]));
        let consumer_token = dir.join("carol.token");
        check(run("airlock-admin", &["--root", &r, "add-principal", "--id", "carol", "--role", "consumer", "--token-out", path_str(&consumer_token)]));
        fs::create_dir_all(dir.join("keys")).unwrap();
        let mut vs = Vec::new();
        for i in 0..vetters {
            let id = format!("vetter-{i}");
            let base = dir.join("keys").join(&id);
            check(run("airlock-signer", &["keygen", "--out", path_str(&base)]));
            let public = base.with_extension("pub");
            check(run("airlock-admin", &["--root", &r, "register-vetter", "--id", &id, "--pubkey", path_str(&public)]));
            let token_file = dir.join(format!("{id}.token"));
            check(run("airlock-admin", &["--root", &r, "add-principal", "--id", &id, "--role", "vetter", "--token-out", path_str(&token_file)]));
            vs.push(SiteVetter { id, key: base.with_extension("key"), public, token_file });
        }
        Site { dir: dir.to_owned(), root, passphrase, consumer_token, vetters: vs }
    }

    pub fn admin(&self, args: &[&str]) -> Output {
        let mut full = vec!["--root", path_str(&self.root)];
        full.extend_from_slice(args);
        run("airlock-admin", &full)
    }

    pub fn load_dataset(&self, id: &str, bytes: &[u8]) {
        let file = self.dir.join(format!("{id}.src"));
        fs::write(&file, bytes).unwrap();
        check(self.admin(&["load-dataset", "--passphrase-file", path_str(&self.passphrase), "--id", id, "--file", path_str(&file)]));
        fs::remove_file(file).unwrap();
    }

    pub fn start(&self, extra: &[&str]) -> Daemon {
        let mut cmd = Command::new(bin("airlockd"));
        cmd.args(["--root", path_str(&self.root), "--listen", "127.0.0.1:0", "--passphrase-file", path_str(&self.passphrase)])
            .args(extra)
            .env("AIRLOCK_LOG", "warn")
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit());
        let mut child = cmd.spawn().expect("spawn airlockd");
        let mut lines = BufReader::new(child.stdout.take().unwrap()).lines();
        let first = lines.next().expect("daemon output").expect("read daemon output");
        let addr = first.strip_prefix("listening on ").unwrap_or_else(|| panic!("unexpected daemon output {first:?}")).to_owned();
        Daemon { child, url: format!("http://{addr}") }
    }

    pub fn token(path: &Path) -> String {
        fs::read_to_string(path).unwrap().trim().to_owned()
    }

    pub fn consumer(&self, d: &Daemon) -> ApiClient {
        ApiClient::new(&d.url, &Site::token(&self.consumer_token))
    }

    /// Runs the client binary against the daemon as the consumer.
    pub fn client(&self, d: &Daemon, args: &[&str]) -> Output {
        let mut full = vec!["--gateway", d.url.as_str(), "--token-file", path_str(&self.consumer_token)];
        full.extend_from_slice(args);
        run("airlock-client", &full)
    }

    /// A vetter's full input approval: request a nonce over HTTP, sign it
    /// offline with the signer binary, upload the signature file.
    pub fn approve_input(&self, d: &Daemon, vetter: usize, job_id: &str, code_hash: &str) -> Value {
        let v = &self.vetters[vetter];
        let api = ApiClient::new(&d.url, &Site::token(&v.token_file));
        let nonce = api.json("POST", "/v1/nonces", None).expect("nonce");
        let sig_path = self.dir.join(format!("{job_id}.{}.sig", v.id));
        check(run(
            "airlock-signer",
            &[
                "sign", "--hash", code_hash, "--nonce", nonce["value"].as_str().unwrap(), "--job-id", job_id,
                "--key", path_str(&v.key), "--vetter-id", &v.id, "--out", path_str(&sig_path),
            ],
        ));
        let sig: Value = serde_json::from_slice(&fs::read(&sig_path).unwrap()).unwrap();
        api.json("POST", &format!("/v1/vetting/input/{job_id}/decision"), Some(&json!({ "approve": true, "signature": sig })))
            .expect("input decision")
    }

    pub fn decide_output(&self, d: &Daemon, job_id: &str, approve: bool, reason: &str) -> Value {
        let api = ApiClient::new(&d.url, &Site::token(&self.vetters[0].token_file));
        api.json("POST", &format!("/v1/vetting/output/{job_id}/decision"), Some(&json!({ "approve": approve, "reason": reason })))
            .expect("output decision")
    }

    pub fn wait_state(&self, d: &Daemon, job_id: &str, states: &[&str], timeout: Duration) -> Value {
        let api = self.consumer(d);
        let deadline = Instant::now() + timeout;
        loop {
            let job = api.json("GET", &format!("/v1/jobs/{job_id}"), None).expect("status");
            if states.iter().any(|s| job["state"] == *s) {
                return job;
            }
            assert!(Instant::now() < deadline, "job stuck: {job:#}");
            std::thread::sleep(Duration::from_millis(25));
        }
    }
}

pub struct Daemon {
    child: Child,
    pub url: String,
}

impl Daemon {
    /// Sends SIGTERM and waits for a clean exit.
    pub fn stop(mut self) -> std::process::ExitStatus {
        self.terminate()
    }

    fn terminate(&mut self) -> std::process::ExitStatus {
        let _ = Command::new("kill").args(["-TERM", &self.child.id().to_string()]).status();
        self.child.wait().expect("wait for daemon")
    }
}

impl Drop for Daemon {
    fn drop(&mut self) {
        if let Ok(None) = self.child.try_wait() {
            self.terminate();
        }
    }
}

/// Writes a bundle directory with a manifest and the given files.
pub fn bundle_dir(dir: &Path, runtime_ref: &str, entrypoint: &str, dataset_id: &str, files: &[(&str, &str)]) -> PathBuf {
    fs::create_dir_all(dir).unwrap();
    let manifest = json!({
        "entrypoint": entrypoint,
        "runtime_ref": runtime_ref,
        "dataset_id": dataset_id,
        "resource_request": { "cpu_cores": 1, "memory_mb": 512, "max_runtime_s": 30 },
    });
    fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest).unwrap()).unwrap();
    for (path, body) in files {
        let p = dir.join(path);
        fs::create_dir_all(p.parent().unwrap()).unwrap();
        fs::write(p, body).unwrap();
    }
    dir.to_owned()
}

/// Parses `key value` lines printed by the client.
pub fn field(out: &str, key: &str) -> String {
    out.lines()
        .find_map(|l| l.strip_prefix(&format!("{key} ")))
        .unwrap_or_else(|| panic!("no {key} in {out:?}"))
        .to_owned()
}
