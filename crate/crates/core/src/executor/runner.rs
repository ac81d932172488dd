//! Sandbox runners.
//!
//! A conforming runner executes the entrypoint with only the airlock's
//! three areas writable or readable by the job identity, no network, the
//! requested limits, closed stdin and captured output.

use std::io::Read;
use std::os::unix::process::{CommandExt, ExitStatusExt};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, ExitStatus, Stdio};
use std::sync::mpsc;
use std::thread;
use std::time::{Duration, Instant};

use crate::model::{ResourceRequest, RuntimeSpec};

/// Upper bound on captured bytes per stream.
pub const DEFAULT_LOG_CAP: usize = 8 * 1024 * 1024;
pub const DATA_ENV: &str = "AIRLOCK_DATA_DIR";
pub const WORK_ENV: &str = "AIRLOCK_WORK_DIR";
pub const OUTPUT_ENV: &str = "AIRLOCK_OUTPUT_DIR";

/// Unprivileged identity an airlock runs as.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SlotIdentity {
    pub uid: u32,
    pub gid: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AirlockPaths {
    pub root: PathBuf,
    pub data: PathBuf,
    pub workspace: PathBuf,
    pub output: PathBuf,
}

#[derive(Debug, Clone)]
pub struct LaunchSpec {
    pub job_id: String,
    pub runtime: RuntimeSpec,
    /// Entrypoint relative to the workspace.
    pub entrypoint: String,
    pub paths: AirlockPaths,
    pub limits: ResourceRequest,
    pub identity: Option<SlotIdentity>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunOutcome {
    /// Exit code, or the negated signal number if the process was killed.
    pub exit_status: i32,
    pub timed_out: bool,
    pub stdout: Vec<u8>,
    pub stderr: Vec<u8>,
    pub wall_ms: u64,
}

#[derive(Debug, thiserror::Error)]
pub enum RunnerError {
    #[error("failed to launch: {0}")]
    Launch(std::io::Error),
    #[error("runner fault: {0}")]
    Fault(String),
    /// The runner lost the job mid-flight, as if the executor had died.
    #[error("executor interrupted")]
    Interrupted,
}

pub trait SandboxRunner: Send + Sync {
    fn name(&self) -> &str;
    fn run(&self, spec: &LaunchSpec) -> Result<RunOutcome, RunnerError>;
}

pub fn is_root() -> bool {
    // SAFETY: geteuid has no preconditions.
    unsafe { libc::geteuid() == 0 }
}

fn status_code(status: ExitStatus) -> i32 {
    status.code().unwrap_or_else(|| -status.signal().unwrap_or(0))
}

fn capture(mut pipe: impl Read + Send + 'static, cap: usize) -> mpsc::Receiver<Vec<u8>> {
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        let mut kept = Vec::new();
        let mut buf = [0u8; 8192];
        loop {
            match pipe.read(&mut buf) {
                Ok(0) | Err(_) => break,
                Ok(n) => {
                    let room = cap.saturating_sub(kept.len());
                    kept.extend_from_slice(&buf[..n.min(room)]);
                }
            }
        }
        let _ = tx.send(kept);
    });
    rx
}

/// Waits for `child` until `limit`, calling `kill` on timeout. Returns the
/// exit status and whether the deadline fired.
fn wait_with_deadline(child: &mut Child, limit: Duration, kill: &dyn Fn(u32)) -> std::io::Result<(ExitStatus, bool)> {
    let deadline = Instant::now() + limit;
    let mut timed_out = false;
    loop {
        if let Some(status) = child.try_wait()? {
            return Ok((status, timed_out));
        }
        if !timed_out && Instant::now() >= deadline {
            timed_out = true;
            kill(child.id());
        }
        thread::sleep(Duration::from_millis(10));
    }
}

fn collect_streams(out: mpsc::Receiver<Vec<u8>>, err: mpsc::Receiver<Vec<u8>>) -> (Vec<u8>, Vec<u8>) {
    // A descendant that escaped cleanup may hold a pipe open; do not wait
    // on it forever.
    let grace = Duration::from_secs(2);
    (out.recv_timeout(grace).unwrap_or_default(), err.recv_timeout(grace).unwrap_or_default())
}

/// Kills every process owned by `uid` other than the caller.
pub fn reap_uid(uid: u32) {
    if !is_root() {
        return;
    }
    let mut cmd = Command::new("/bin/true");
    cmd.stdin(Stdio::null()).stdout(Stdio::null()).stderr(Stdio::null());
    // SAFETY: only async-signal-safe libc calls run between fork and exec.
    unsafe {
        cmd.pre_exec(move || {
            if libc::setgid(uid) != 0 || libc::setuid(uid) != 0 {
                return Err(std::io::Error::last_os_error());
            }
            // kill(-1) never signals the calling process on Linux.
            libc::kill(-1, libc::SIGKILL);
            Ok(())
        });
    }
    if let Ok(mut child) = cmd.spawn() {
        let _ = child.wait();
    }
}

mod seccomp {
    //! A classic-BPF filter that makes socket creation fail with EPERM.

    const BPF_LD_W_ABS: u16 = 0x20;
    const BPF_JEQ_K: u16 = 0x15;
    const BPF_JGE_K: u16 = 0x35;
    const BPF_RET_K: u16 = 0x06;
    const RET_ALLOW: u32 = 0x7fff_0000;
    const RET_ERRNO: u32 = 0x0005_0000;
    const RET_KILL_PROCESS: u32 = 0x8000_0000;
    const OFFSET_NR: u32 = 0;
    const OFFSET_ARCH: u32 = 4;

    #[cfg(target_arch = "x86_64")]
    const ARCH: Option<(u32, &[u32])> = Some((0xC000_003E, &[41, 53]));
    #[cfg(target_arch = "aarch64")]
    const ARCH: Option<(u32, &[u32])> = Some((0xC000_00B7, &[198, 199]));
    #[cfg(not(any(target_arch = "x86_64", target_arch = "aarch64")))]
    const ARCH: Option<(u32, &[u32])> = None;

    fn stmt(code: u16, k: u32) -> libc::sock_filter {
        libc::sock_filter { code, jt: 0, jf: 0, k }
    }

    fn jump(code: u16, k: u32, jt: u8, jf: u8) -> libc::sock_filter {
        libc::sock_filter { code, jt, jf, k }
    }

    pub fn supported() -> bool {
        ARCH.is_some()
    }

    /// Denies `socket` and `socketpair`; kills on a foreign architecture or
    /// the x32 ABI.
    pub fn socket_filter() -> Vec<libc::sock_filter> {
        let Some((arch, denied)) = ARCH else { return Vec::new() };
        let mut prog = vec![
            stmt(BPF_LD_W_ABS, OFFSET_ARCH),
            jump(BPF_JEQ_K, arch, 1, 0),
            stmt(BPF_RET_K, RET_KILL_PROCESS),
            stmt(BPF_LD_W_ABS, OFFSET_NR),
        ];
        if cfg!(target_arch = "x86_64") {
            prog.push(jump(BPF_JGE_K, 0x4000_0000, 0, 1));
            prog.push(stmt(BPF_RET_K, RET_KILL_PROCESS));
        }
        for nr in denied {
            prog.push(jump(BPF_JEQ_K, *nr, 0, 1));
            prog.push(stmt(BPF_RET_K, RET_ERRNO | libc::EPERM as u32));
        }
        prog.push(stmt(BPF_RET_K, RET_ALLOW));
        prog
    }
}

/// Process-level runner for desk-scale deployments.
#[derive(Debug, Clone)]
pub struct ProcessRunner {
    /// Run the job in a fresh, empty network namespace (needs root).
    pub network_namespace: bool,
    /// Install the socket-denying seccomp filter.
    pub seccomp: bool,
    pub log_cap: usize,
}

impl Default for ProcessRunner {
    fn default() -> Self {
        ProcessRunner { network_namespace: is_root(), seccomp: seccomp::supported(), log_cap: DEFAULT_LOG_CAP }
    }
}

impl ProcessRunner {
    fn command(&self, spec: &LaunchSpec) -> Result<Command, RunnerError> {
        let (program, args) =
            spec.runtime.command.split_first().ok_or_else(|| RunnerError::Fault("empty runtime command".into()))?;
        let mut cmd = Command::new(program);
        cmd.args(args)
            .arg(spec.paths.workspace.join(&spec.entrypoint))
            .current_dir(&spec.paths.workspace)
            .env_clear()
            .env("PATH", "/usr/local/bin:/usr/bin:/bin")
            .env("HOME", &spec.paths.workspace)
            .env("LANG", "C.UTF-8")
            .env(DATA_ENV, &spec.paths.data)
            .env(WORK_ENV, &spec.paths.workspace)
            .env(OUTPUT_ENV, &spec.paths.output)
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped());

        let filter = if self.seccomp { seccomp::socket_filter() } else { Vec::new() };
        let limits = spec.limits;
        let identity = spec.identity;
        let netns = self.network_namespace;
        // SAFETY: the closure runs between fork and exec and calls only
        // async-signal-safe libc functions on data prepared beforehand.
        unsafe {
            cmd.pre_exec(move || {
                let fail = || Err(std::io::Error::last_os_error());
                if libc::setsid() < 0 {
                    return fail();
                }
                let mem = limits.memory_mb.saturating_mul(1024 * 1024);
                let cpu = limits.max_runtime_s.saturating_add(1);
                let rl = |res, v: u64| {
                    let lim = libc::rlimit { rlim_cur: v as libc::rlim_t, rlim_max: v as libc::rlim_t };
                    libc::setrlimit(res, &lim)
                };
                if rl(libc::RLIMIT_AS, mem) != 0
                    || rl(libc::RLIMIT_CPU, cpu) != 0
                    || rl(libc::RLIMIT_NOFILE, 256) != 0
                    || rl(libc::RLIMIT_CORE, 0) != 0
                    || rl(libc::RLIMIT_FSIZE, 1 << 30) != 0
                {
                    return fail();
                }
                if netns && libc::unshare(libc::CLONE_NEWNET) != 0 {
                    return fail();
                }
                if let Some(id) = identity {
                    if rl(libc::RLIMIT_NPROC, 64) != 0
                        || libc::setgroups(0, std::ptr::null()) != 0
                        || libc::setgid(id.gid) != 0
                        || libc::setuid(id.uid) != 0
                    {
                        return fail();
                    }
                }
                if libc::prctl(libc::PR_SET_NO_NEW_PRIVS, 1, 0, 0, 0) != 0 {
                    return fail();
                }
                if !filter.is_empty() {
                    let prog = libc::sock_fprog { len: filter.len() as u16, filter: filter.as_ptr() as *mut _ };
                    if libc::prctl(libc::PR_SET_SECCOMP, libc::SECCOMP_MODE_FILTER, &prog as *const _ as libc::c_ulong, 0, 0) != 0 {
                        return fail();
                    }
                }
                Ok(())
            });
        }
        Ok(cmd)
    }
}

impl SandboxRunner for ProcessRunner {
    fn name(&self) -> &str {
        "process"
    }

    fn run(&self, spec: &LaunchSpec) -> Result<RunOutcome, RunnerError> {
        let started = Instant::now();
        let mut child = self.command(spec)?.spawn().map_err(RunnerError::Launch)?;
        let out = capture(child.stdout.take().expect("piped"), self.log_cap);
        let err = capture(child.stderr.take().expect("piped"), self.log_cap);
        let kill_group = |pid: u32| {
            // SAFETY: signalling a process group we created.
            unsafe { libc::killpg(pid as libc::pid_t, libc::SIGKILL) };
        };
        let waited = wait_with_deadline(&mut child, Duration::from_secs(spec.limits.max_runtime_s), &kill_group);
        kill_group(child.id());
        if let Some(id) = spec.identity {
            reap_uid(id.uid);
        }
        let (status, timed_out) = waited.map_err(|e| RunnerError::Fault(e.to_string()))?;
        let (stdout, stderr) = collect_streams(out, err);
        Ok(RunOutcome {
            exit_status: status_code(status),
            timed_out,
            stdout,
            stderr,
            wall_ms: started.elapsed().as_millis() as u64,
        })
    }
}

/// Container runner for production parity: maps the contract onto
/// `docker run` flags.
#[derive(Debug, Clone)]
pub struct ContainerRunner {
    pub docker: PathBuf,
    pub log_cap: usize,
}

impl Default for ContainerRunner {
    fn default() -> Self {
        ContainerRunner { docker: PathBuf::from("docker"), log_cap: DEFAULT_LOG_CAP }
    }
}

impl ContainerRunner {
    pub const DATA_MOUNT: &'static str = "/airlock/data";
    pub const WORK_MOUNT: &'static str = "/airlock/work";
    pub const OUTPUT_MOUNT: &'static str = "/airlock/output";

    pub fn container_name(job_id: &str) -> String {
        format!("airlock-{job_id}")
    }

    /// The full `docker` argument vector for `spec`.
    pub fn argv(&self, spec: &LaunchSpec) -> Vec<String> {
        let mount = |host: &Path, target: &str, mode: &str| format!("type=bind,source={},target={target}{mode}", host.display());
        let mut argv = vec![
            "run".to_owned(),
            "--rm".into(),
            "--name".into(),
            Self::container_name(&spec.job_id),
            "--network".into(),
            "none".into(),
            "--read-only".into(),
            "--cap-drop".into(),
            "ALL".into(),
            "--security-opt".into(),
            "no-new-privileges".into(),
            "--pids-limit".into(),
            "64".into(),
            "--cpus".into(),
            spec.limits.cpu_cores.to_string(),
            "--memory".into(),
            format!("{}m", spec.limits.memory_mb),
            "--mount".into(),
            mount(&spec.paths.data, Self::DATA_MOUNT, ",readonly"),
            "--mount".into(),
            mount(&spec.paths.workspace, Self::WORK_MOUNT, ""),
            "--mount".into(),
            mount(&spec.paths.output, Self::OUTPUT_MOUNT, ""),
            "--workdir".into(),
            Self::WORK_MOUNT.into(),
            "--env".into(),
            format!("{DATA_ENV}={}", Self::DATA_MOUNT),
            "--env".into(),
            format!("{WORK_ENV}={}", Self::WORK_MOUNT),
            "--env".into(),
            format!("{OUTPUT_ENV}={}", Self::OUTPUT_MOUNT),
            "--env".into(),
            format!("HOME={}", Self::WORK_MOUNT),
        ];
        if let Some(id) = spec.identity {
            argv.push("--user".into());
            argv.push(format!("{}:{}", id.uid, id.gid));
        }
        argv.push(spec.runtime.image.clone());
        argv.extend(spec.runtime.command.iter().cloned());
        argv.push(format!("{}/{}", Self::WORK_MOUNT, spec.entrypoint));
        argv
    }
}

impl SandboxRunner for ContainerRunner {
    fn name(&self) -> &str {
        "container"
    }

    fn run(&self, spec: &LaunchSpec) -> Result<RunOutcome, RunnerError> {
        let started = Instant::now();
        let mut child = Command::new(&self.docker)
            .args(self.argv(spec))
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(RunnerError::Launch)?;
        let out = capture(child.stdout.take().expect("piped"), self.log_cap);
        let err = capture(child.stderr.take().expect("piped"), self.log_cap);
        let docker = self.docker.clone();
        let name = Self::container_name(&spec.job_id);
        let kill = move |_pid: u32| {
            let _ = Command::new(&docker).args(["kill", &name]).stdout(Stdio::null()).stderr(Stdio::null()).status();
        };
        let (status, timed_out) = wait_with_deadline(&mut child, Duration::from_secs(spec.limits.max_runtime_s), &kill)
            .map_err(|e| RunnerError::Fault(e.to_string()))?;
        let (stdout, stderr) = collect_streams(out, err);
        Ok(RunOutcome {
            exit_status: status_code(status),
            timed_out,
            stdout,
            stderr,
            wall_ms: started.elapsed().as_millis() as u64,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::RuntimeCatalogue;
    use std::fs;

    fn spec(dir: &Path, script: &str, runtime: &str, max_runtime_s: u64) -> LaunchSpec {
        let paths = AirlockPaths {
            root: dir.to_owned(),
            data: dir.join("data"),
            workspace: dir.join("workspace"),
            output: dir.join("output"),
        };
        for p in [&paths.data, &paths.workspace, &paths.output] {
            fs::create_dir_all(p).unwrap();
        }
        let entry = if runtime == "posix-sh" { "main.sh" } else { "main.py" };
        fs::write(paths.workspace.join(entry), script).unwrap();
        LaunchSpec {
            job_id: "t".into(),
            runtime: RuntimeCatalogue::default().get(runtime).unwrap().clone(),
            entrypoint: entry.into(),
            paths,
            limits: ResourceRequest { cpu_cores: 1, memory_mb: 512, max_runtime_s },
            identity: None,
        }
    }

    #[test]
    fn environment_is_scrubbed_and_contract_vars_present() {
        std::env::set_var("AIRLOCK_TEST_SECRET", "leak");
        let dir = tempfile::tempdir().unwrap();
        let s = spec(dir.path(), "env; echo err >&2; exit 3", "posix-sh", 10);
        let out = ProcessRunner::default().run(&s).unwrap();
        let env = String::from_utf8(out.stdout).unwrap();
        assert_eq!(out.exit_status, 3);
        assert!(!env.contains("AIRLOCK_TEST_SECRET"));
        assert!(env.contains(&format!("AIRLOCK_DATA_DIR={}", s.paths.data.display())));
        assert!(env.contains(&format!("AIRLOCK_OUTPUT_DIR={}", s.paths.output.display())));
        assert_eq!(out.stderr, b"err\n");
    }

    #[test]
    fn stdin_is_closed() {
        let dir = tempfile::tempdir().unwrap();
        let s = spec(dir.path(), "if read line; then echo got; else echo eof; fi", "posix-sh", 10);
        assert_eq!(ProcessRunner::default().run(&s).unwrap().stdout, b"eof\n");
    }

    #[test]
    fn socket_creation_is_denied() {
        let dir = tempfile::tempdir().unwrap();
        let script = "import socket\ntry:\n    socket.socket()\n    print('open')\nexcept OSError as e:\n    print('denied', e.errno)\n";
        let s = spec(dir.path(), script, "python3-datasci", 20);
        let out = ProcessRunner::default().run(&s).unwrap();
        assert_eq!(String::from_utf8_lossy(&out.stdout), "denied 1\n", "stderr: {}", String::from_utf8_lossy(&out.stderr));
    }

    #[test]
    fn timeout_kills_the_whole_group() {
        let dir = tempfile::tempdir().unwrap();
        let s = spec(dir.path(), "sleep 30 & sleep 30; echo never", "posix-sh", 1);
        let started = Instant::now();
        let out = ProcessRunner::default().run(&s).unwrap();
        assert!(out.timed_out);
        assert_eq!(out.exit_status, -libc::SIGKILL);
        assert!(started.elapsed() < Duration::from_secs(6));
    }

    #[test]
    fn log_capture_is_capped() {
        let dir = tempfile::tempdir().unwrap();
        let s = spec(dir.path(), "head -c 100000 /dev/zero", "posix-sh", 10);
        let runner = ProcessRunner { log_cap: 1000, ..ProcessRunner::default() };
        assert_eq!(runner.run(&s).unwrap().stdout.len(), 1000);
    }

    #[test]
    fn container_argv_maps_the_contract() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = spec(dir.path(), "print(1)", "python3-datasci", 30);
        s.identity = Some(SlotIdentity { uid: 61000, gid: 61000 });
        let argv = ContainerRunner::default().argv(&s);
        let joined = argv.join(" ");
        assert!(joined.contains("--network none"));
        assert!(joined.contains("--read-only"));
        assert!(joined.contains(&format!("source={},target=/airlock/data,readonly", s.paths.data.display())));
        assert!(joined.contains("--memory 512m"));
        assert!(joined.contains("--user 61000:61000"));
        assert!(joined.ends_with("python:3.10-slim /usr/bin/python3 -I -B /airlock/work/main.py"));
    }
}
