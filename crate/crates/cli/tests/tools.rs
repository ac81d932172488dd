mod common;

use std::fs;
use std::os::unix::fs::PermissionsExt;
use std::time::Duration;

use common::*;
use serde_json::Value;

const WAIT: Duration = Duration::from_secs(30);

#[test]
fn keygen_sign_verify_and_tamper() {
    let dir = tempfile::tempdir().unwrap();
    let base = dir.path().join("alice");
    check(run("airlock-signer", &["keygen", "--out", path_str(&base)]));
    let key = fs::read_to_string(base.with_extension("key")).unwrap();
    let public = fs::read_to_string(base.with_extension("pub")).unwrap();
    assert_eq!(key.trim_end().len(), 64);
    assert_eq!(public.trim_end().len(), 64);
    assert!(key.trim_end().bytes().all(|b| b.is_ascii_hexdigit() && !b.is_ascii_uppercase()));
    assert_eq!(fs::metadata(base.with_extension("key")).unwrap().permissions().mode() & 0o777, 0o600);
    // Refuses to overwrite an existing key.
    assert_eq!(run("airlock-signer", &["keygen", "--out", path_str(&base)]).status.code(), Some(2));

    let hash = "ab".repeat(32);
    let nonce = "cd".repeat(32);
    let sig = dir.path().join("approval.sig");
    let args = |nonce: &str| {
        vec![
            "sign".to_owned(), "--hash".into(), hash.clone(), "--nonce".into(), nonce.to_owned(), "--job-id".into(), "job-1".into(),
            "--key".into(), path_str(&base.with_extension("key")).into(), "--vetter-id".into(), "alice".into(), "--out".into(), path_str(&sig).into(),
        ]
    };
    let a = args(&nonce);
    check(run("airlock-signer", &a.iter().map(String::as_str).collect::<Vec<_>>()));
    let pub_path = base.with_extension("pub");
    let verify = ["verify", "--sig", path_str(&sig), "--pubkey", path_str(&pub_path)];
    assert!(check(run("airlock-signer", &verify)).starts_with("signature ok"));
    let mut with_hash = verify.to_vec();
    with_hash.extend(["--hash", &hash]);
    check(run("airlock-signer", &with_hash));
    let other_hash = "ef".repeat(32);
    let mut wrong_hash = verify.to_vec();
    wrong_hash.extend(["--hash", &other_hash]);
    assert_eq!(run("airlock-signer", &wrong_hash).status.code(), Some(4));

    // Edit the nonce inside the signature file.
    let text = fs::read_to_string(&sig).unwrap();
    fs::write(&sig, text.replace(&nonce, &"ce".repeat(32))).unwrap();
    let out = run("airlock-signer", &verify);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));

    // Malformed inputs and loose key permissions are validation errors.
    let bad = args("not-hex");
    assert_eq!(run("airlock-signer", &bad.iter().map(String::as_str).collect::<Vec<_>>()).status.code(), Some(2));
    fs::set_permissions(base.with_extension("key"), fs::Permissions::from_mode(0o644)).unwrap();
    let loose = run("airlock-signer", &a.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(loose.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&loose.stderr).contains("bad key"));
}

#[test]
fn signer_works_without_a_network() {
    let probe = std::process::Command::new("unshare").args(["-n", "true"]).status();
    if !probe.is_ok_and(|s| s.success()) {
        eprintln!("skipping: cannot create a network namespace here");
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let base = dir.path().join("v");
    let signer = bin("airlock-signer");
    let offline = |args: &[&str]| {
        let out = std::process::Command::new("unshare").arg("-n").arg(&signer).args(args).output().unwrap();
        check(out)
    };
    offline(&["keygen", "--out", path_str(&base)]);
    let sig = dir.path().join("s.sig");
    let hash = "01".repeat(32);
    let nonce = "02".repeat(32);
    offline(&[
        "sign", "--hash", &hash, "--nonce", &nonce, "--job-id", "j", "--key", path_str(&base.with_extension("key")),
        "--vetter-id", "v", "--out", path_str(&sig),
    ]);
    offline(&["verify", "--sig", path_str(&sig), "--pubkey", path_str(&base.with_extension("pub"))]);
}

#[test]
fn client_validates_locally_before_any_network_call() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("main.py"), "print(1)").unwrap();
    // Port 9 on localhost has nothing listening; a network attempt would exit 5.
    let out = run("airlock-client", &["--gateway", "http://127.0.0.1:9", "--token", "t", "submit", "--dir", path_str(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("manifest.json"));

    let bundle = bundle_dir(&dir.path().join("b"), "posix-sh", "job.sh", "d", &[("job.sh", "true\n")]);
    let out = run("airlock-client", &["--gateway", "http://127.0.0.1:9", "--token", "t", "submit", "--dir", path_str(&bundle)]);
    assert_eq!(out.status.code(), Some(5));
}

#[test]
fn full_pipeline_through_the_binaries() {
    let dir = tempfile::tempdir().unwrap();
    let site = Site::create(dir.path(), 2);
    site.load_dataset("cohort", b"alpha\nbeta\ngamma\n");
    let d = site.start(&["--approval-threshold", "2"]);

    let bundle = bundle_dir(
        &dir.path().join("job"),
        "posix-sh",
        "job.sh",
        "cohort",
        &[("job.sh", "wc -l < \"$AIRLOCK_DATA_DIR/cohort\" > \"$AIRLOCK_OUTPUT_DIR/count.txt\"\n")],
    );
    let dry = check(site.client(&d, &["submit", "--dir", path_str(&bundle), "--dry-run"]));
    let out = check(site.client(&d, &["submit", "--dir", path_str(&bundle)]));
    let job_id = field(&out, "job_id");
    let code_hash = field(&out, "code_hash");
    assert_eq!(field(&dry, "code_hash"), code_hash);

    let first = site.approve_input(&d, 0, &job_id, &code_hash);
    assert_eq!(first["state"], "PendingInputVetting");
    let second = site.approve_input(&d, 1, &job_id, &code_hash);
    assert_eq!(second["state"], "QueuedForExecution");
    site.wait_state(&d, &job_id, &["PendingOutputVetting"], WAIT);

    // Not released yet: fetch is a remote rejection.
    assert_eq!(site.client(&d, &["fetch", "--job-id", &job_id, "--out", path_str(&dir.path().join("early"))]).status.code(), Some(4));
    site.decide_output(&d, &job_id, true, "aggregate only");
    let polled = check(site.client(&d, &["poll", "--job-id", &job_id, "--until-terminal", "--interval-s", "0.05", "--timeout-s", "30"]));
    assert!(polled.contains("Released"));
    let out_dir = dir.path().join("results");
    check(site.client(&d, &["fetch", "--job-id", &job_id, "--out", path_str(&out_dir)]));
    assert_eq!(fs::read(out_dir.join("artifacts/count.txt")).unwrap(), b"3\n");
    let status: Value = serde_json::from_str(&check(site.client(&d, &["status", "--job-id", &job_id]))).unwrap();
    assert_eq!(status["state"], "Retrieved");

    // Wrong token is an auth failure.
    let bad = run("airlock-client", &["--gateway", &d.url, "--token", "nope", "status", "--job-id", &job_id]);
    assert_eq!(bad.status.code(), Some(3));

    // A rejected job makes poll exit non-zero.
    let out = check(site.client(&d, &["submit", "--dir", path_str(&bundle)]));
    let rejected = field(&out, "job_id");
    let api = airlock_cli::ApiClient::new(&d.url, &Site::token(&site.vetters[0].token_file));
    api.json("POST", &format!("/v1/vetting/input/{rejected}/decision"), Some(&serde_json::json!({ "approve": false, "reason": "no" })))
        .unwrap();
    let polled = site.client(&d, &["poll", "--job-id", &rejected, "--until-terminal", "--interval-s", "0.05"]);
    assert_eq!(polled.status.code(), Some(4));

    // The inspect command refuses while the daemon holds the root.
    assert_eq!(site.admin(&["queue-inspect"]).status.code(), Some(2));
    assert!(d.stop().success());

    let verify = check(site.admin(&["verify-audit"]));
    for zone in ["public", "secure", "restricted"] {
        assert!(verify.lines().any(|l| l.starts_with(&format!("{zone}: chain ok, "))), "{verify}");
    }
    let inspect = check(site.admin(&["queue-inspect"]));
    assert_eq!(inspect.lines().count(), 8);
    assert!(inspect.lines().all(|l| l.contains("\"pending\":0")), "{inspect}");

    // Tamper with the secure chain: flip one character inside event 2.
    let audit = site.root.join("secure/audit/audit.jsonl");
    let text = fs::read_to_string(&audit).unwrap();
    let mut lines: Vec<String> = text.lines().map(str::to_owned).collect();
    lines[2] = lines[2].replacen("\"actor\":\"", "\"actor\":\"x", 1);
    fs::write(&audit, lines.join("\n") + "\n").unwrap();
    let out = site.admin(&["verify-audit", "--zone", "secure"]);
    assert_eq!(out.status.code(), Some(4));
    assert_eq!(stdout(&out).trim(), "secure: chain broken at index 2 (EventHashMismatch)");
}

#[test]
fn admin_vetter_registry_and_datasets() {
    let dir = tempfile::tempdir().unwrap();
    let site = Site::create(dir.path(), 1);
    for zone in ["public", "secure", "restricted"] {
        let reg: Value = serde_json::from_slice(&fs::read(site.root.join(zone).join("vetters.json")).unwrap()).unwrap();
        assert!(reg.to_string().contains("vetter-0"), "{zone}: {reg}");
    }
    check(site.admin(&["disable-vetter", "--id", "vetter-0", "--zone", "restricted"]));
    let reg = fs::read_to_string(site.root.join("restricted/vetters.json")).unwrap();
    assert!(reg.contains("\"enabled\":false"), "{reg}");
    assert_eq!(site.admin(&["disable-vetter", "--id", "nobody"]).status.code(), Some(4));

    site.load_dataset("d1", b"x,y\n1,2\n");
    let listed = check(site.admin(&["list-datasets"]));
    assert!(listed.starts_with("d1 v1 8 bytes"), "{listed}");
    // Wrong passphrase cannot load.
    let wrong = dir.path().join("wrong");
    fs::write(&wrong, "guess\n").unwrap();
    let src = dir.path().join("src");
    fs::write(&src, "z").unwrap();
    let out = site.admin(&["load-dataset", "--passphrase-file", path_str(&wrong), "--id", "d2", "--file", path_str(&src)]);
    assert_eq!(out.status.code(), Some(4));
    // Dataset plaintext is not present anywhere under the deployment root.
    for entry in walk(&site.root) {
        let bytes = fs::read(&entry).unwrap();
        assert!(!bytes.windows(8).any(|w| w == b"x,y\n1,2\n"), "{}", entry.display());
    }
}

fn walk(dir: &std::path::Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap().flatten() {
        let p = e.path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else if p.is_file() {
            out.push(p);
        }
    }
    out
}
