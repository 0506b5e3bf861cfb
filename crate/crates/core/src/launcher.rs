//! Job orchestration: memory daemons, the coordinator, and its workers,
//! either as child processes of one executable or as threads.

use std::io::{BufRead, BufReader, Write};
use std::os::unix::process::CommandExt;
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crossbeam_channel::Sender;
use log::debug;

use crate::client::{Client, DEFAULT_FLUSH_THRESHOLD};
use crate::coordinator::{Coordinator, CoordinatorConfig, ThreadSpawner};
use crate::elastic::{daemon_socket, serve_daemon, DaemonClient};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Mode {
    /// Every role is a child process running `exe`.
    Process { exe: PathBuf },
    /// Everything runs in this process; only for tests and debugging.
    Thread,
}

#[derive(Debug, Clone)]
pub struct JobConfig {
    pub workers: usize,
    pub max_workers: usize,
    pub odf: usize,
    pub endpoint: String,
    /// Created if missing; a fresh temporary directory when `None`.
    pub scratch: Option<PathBuf>,
    pub flush_depth: usize,
    pub mode: Mode,
    pub jitter: Option<u64>,
}

impl JobConfig {
    pub fn new(workers: usize, mode: Mode) -> JobConfig {
        JobConfig {
            workers,
            max_workers: workers,
            odf: 1,
            endpoint: "127.0.0.1:0".into(),
            scratch: None,
            flush_depth: DEFAULT_FLUSH_THRESHOLD,
            mode,
            jitter: None,
        }
    }

    fn check(&self) -> Result<()> {
        if self.workers == 0 || self.workers > self.max_workers || self.odf == 0 {
            return Err(Error::SpawnFailed(format!(
                "need 1 <= workers ({}) <= max ({}) and odf ({}) >= 1",
                self.workers, self.max_workers, self.odf
            )));
        }
        Ok(())
    }
}

/// Live child processes of a job.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Census {
    pub coordinator: usize,
    pub workers: usize,
    pub daemons: usize,
}

impl Census {
    pub fn total(&self) -> usize {
        self.coordinator + self.workers + self.daemons
    }
}

/// Kills the child when this process dies, so nothing outlives the job.
fn die_with_parent(cmd: &mut Command) {
    // SAFETY: prctl is async-signal-safe and touches no Rust state.
    unsafe {
        cmd.pre_exec(|| {
            libc::prctl(libc::PR_SET_PDEATHSIG, libc::SIGKILL);
            Ok(())
        });
    }
}

fn spawn_child(exe: &Path, args: &[String]) -> Result<Child> {
    let mut cmd = Command::new(exe);
    cmd.args(args).stdin(Stdio::null());
    die_with_parent(&mut cmd);
    cmd.spawn()
        .map_err(|e| Error::SpawnFailed(format!("{}: {e}", exe.display())))
}

fn alive(children: &mut [Child]) -> usize {
    children
        .iter_mut()
        .map(|c| matches!(c.try_wait(), Ok(None)) as usize)
        .sum()
}

fn stop_child(c: &mut Child, grace: Duration) {
    let deadline = Instant::now() + grace;
    while Instant::now() < deadline {
        if !matches!(c.try_wait(), Ok(None)) {
            return;
        }
        thread::sleep(Duration::from_millis(5));
    }
    let _ = c.kill();
    let _ = c.wait();
}

enum Roles {
    Process {
        coordinator: Child,
        workers: Arc<Mutex<Vec<Child>>>,
        daemons: Vec<Child>,
        supervisor: Option<JoinHandle<()>>,
    },
    Thread {
        stop: Arc<AtomicBool>,
        coordinator: Option<JoinHandle<Result<()>>>,
        daemons: Vec<JoinHandle<Result<()>>>,
        daemon_stop: Arc<AtomicBool>,
    },
}

pub struct Job {
    endpoint: String,
    scratch: PathBuf,
    owns_scratch: bool,
    config: JobConfig,
    roles: Roles,
}

static SCRATCH_COUNTER: AtomicU64 = AtomicU64::new(0);

fn fresh_scratch() -> PathBuf {
    let n = SCRATCH_COUNTER.fetch_add(1, Ordering::SeqCst);
    std::env::temp_dir().join(format!("stencilrt-{}-{n}", std::process::id()))
}

/// Answers the coordinator's spawn requests by starting worker processes
/// and forwards its `LISTEN <addr>` line.
fn supervise(
    exe: PathBuf,
    scratch: PathBuf,
    lines: impl BufRead,
    mut reply: ChildStdin,
    workers: Arc<Mutex<Vec<Child>>>,
    listen: Sender<String>,
) {
    let retire = |workers: &Mutex<Vec<Child>>| {
        let mut w = workers.lock().unwrap();
        for c in w.iter_mut() {
            stop_child(c, Duration::from_secs(10));
        }
        w.clear();
    };
    for line in lines.lines() {
        let Ok(line) = line else { break };
        let words: Vec<&str> = line.split_whitespace().collect();
        let answer = match words.as_slice() {
            ["SPAWN", generation, count, addr] => {
                retire(&workers);
                let count: usize = count.parse().unwrap_or(0);
                let mut started = Vec::with_capacity(count);
                let mut failure = None;
                for rank in 0..count {
                    let args = vec![
                        "worker".to_string(),
                        "--coordinator".into(),
                        addr.to_string(),
                        "--rank".into(),
                        rank.to_string(),
                        "--generation".into(),
                        generation.to_string(),
                        "--scratch".into(),
                        scratch.display().to_string(),
                    ];
                    match spawn_child(&exe, &args) {
                        Ok(c) => started.push(c),
                        Err(e) => {
                            failure = Some(e);
                            break;
                        }
                    }
                }
                workers.lock().unwrap().extend(started);
                match failure {
                    None => "SPAWNED".to_string(),
                    Some(e) => format!("FAILED {e}"),
                }
            }
            ["REAP"] => {
                retire(&workers);
                "REAPED".to_string()
            }
            ["LISTEN", addr] => {
                let _ = listen.send(addr.to_string());
                continue;
            }
            _ => {
                debug!("coordinator: {line}");
                continue;
            }
        };
        if writeln!(reply, "{answer}").and_then(|_| reply.flush()).is_err() {
            break;
        }
    }
}

impl Job {
    pub fn launch(config: JobConfig) -> Result<Job> {
        config.check()?;
        let (scratch, owns_scratch) = match &config.scratch {
            Some(p) => (p.clone(), false),
            None => (fresh_scratch(), true),
        };
        std::fs::create_dir_all(&scratch)?;
        match &config.mode {
            Mode::Thread => Job::launch_threads(config, scratch, owns_scratch),
            Mode::Process { exe } => {
                let exe = exe.clone();
                Job::launch_processes(config, exe, scratch, owns_scratch)
            }
        }
    }

    fn launch_threads(config: JobConfig, scratch: PathBuf, owns_scratch: bool) -> Result<Job> {
        let daemon_stop = Arc::new(AtomicBool::new(false));
        let mut daemons = Vec::new();
        for slot in 0..config.max_workers {
            let path = daemon_socket(&scratch, slot);
            let stop = daemon_stop.clone();
            daemons.push(thread::spawn(move || serve_daemon(&path, stop)));
        }
        for slot in 0..config.max_workers {
            DaemonClient::wait(&daemon_socket(&scratch, slot), Duration::from_secs(10))?;
        }
        let coord = Coordinator::bind(
            CoordinatorConfig {
                endpoint: config.endpoint.clone(),
                workers: config.workers,
                max_workers: config.max_workers,
                odf: config.odf,
                scratch: scratch.clone(),
                jitter: config.jitter,
            },
            Box::new(ThreadSpawner::new(scratch.clone())),
        );
        let coord = match coord {
            Ok(c) => c,
            Err(e) => {
                daemon_stop.store(true, Ordering::SeqCst);
                for d in daemons {
                    let _ = d.join();
                }
                return Err(e);
            }
        };
        let endpoint = coord.local_addr()?.to_string();
        let stop = Arc::new(AtomicBool::new(false));
        let s = stop.clone();
        let handle = thread::Builder::new()
            .name("coordinator".into())
            .spawn(move || coord.serve(s))?;
        Ok(Job {
            endpoint,
            scratch,
            owns_scratch,
            config,
            roles: Roles::Thread {
                stop,
                coordinator: Some(handle),
                daemons,
                daemon_stop,
            },
        })
    }

    fn launch_processes(config: JobConfig, exe: PathBuf, scratch: PathBuf, owns_scratch: bool) -> Result<Job> {
        let mut daemons = Vec::new();
        let kill_all = |children: &mut Vec<Child>| {
            for c in children.iter_mut() {
                let _ = c.kill();
                let _ = c.wait();
            }
        };
        for slot in 0..config.max_workers {
            let path = daemon_socket(&scratch, slot);
            let _ = std::fs::remove_file(&path);
            match spawn_child(&exe, &["daemon".into(), "--socket".into(), path.display().to_string()]) {
                Ok(c) => daemons.push(c),
                Err(e) => {
                    kill_all(&mut daemons);
                    return Err(e);
                }
            }
        }
        for slot in 0..config.max_workers {
            if let Err(e) = DaemonClient::wait(&daemon_socket(&scratch, slot), Duration::from_secs(10)) {
                kill_all(&mut daemons);
                return Err(e);
            }
        }
        let mut args = vec![
            "coordinator".to_string(),
            "--endpoint".into(),
            config.endpoint.clone(),
            "--workers".into(),
            config.workers.to_string(),
            "--max-workers".into(),
            config.max_workers.to_string(),
            "--odf".into(),
            config.odf.to_string(),
            "--scratch".into(),
            scratch.display().to_string(),
        ];
        if let Some(seed) = config.jitter {
            args.extend(["--jitter".into(), seed.to_string()]);
        }
        let mut cmd = Command::new(&exe);
        cmd.args(&args).stdin(Stdio::piped()).stdout(Stdio::piped());
        die_with_parent(&mut cmd);
        let mut coordinator = match cmd.spawn() {
            Ok(c) => c,
            Err(e) => {
                kill_all(&mut daemons);
                return Err(Error::SpawnFailed(e.to_string()));
            }
        };
        let stdin = coordinator.stdin.take().unwrap();
        let lines = BufReader::new(coordinator.stdout.take().unwrap());
        let workers = Arc::new(Mutex::new(Vec::new()));

        // The coordinator asks for its first workers before it reports
        // its address, so the supervisor starts right away.
        let (addr_tx, addr_rx) = crossbeam_channel::bounded(1);
        let supervisor = {
            let workers = workers.clone();
            let scratch = scratch.clone();
            thread::Builder::new()
                .name("supervisor".into())
                .spawn(move || supervise(exe, scratch, lines, stdin, workers, addr_tx))?
        };
        let endpoint = match addr_rx.recv_timeout(Duration::from_secs(60)) {
            Ok(a) => a,
            Err(_) => {
                let status = coordinator.wait().ok();
                kill_all(&mut daemons);
                for c in workers.lock().unwrap().iter_mut() {
                    let _ = c.kill();
                    let _ = c.wait();
                }
                // Exit status 3 marks an endpoint already in use.
                return Err(match status.and_then(|s| s.code()) {
                    Some(3) => Error::PortInUse(config.endpoint.clone()),
                    _ => Error::SpawnFailed("coordinator did not start".into()),
                });
            }
        };
        Ok(Job {
            endpoint,
            scratch,
            owns_scratch,
            config,
            roles: Roles::Process {
                coordinator,
                workers,
                daemons,
                supervisor: Some(supervisor),
            },
        })
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    pub fn scratch(&self) -> &Path {
        &self.scratch
    }

    pub fn config(&self) -> &JobConfig {
        &self.config
    }

    /// Opens a client session with the job's flush depth.
    pub fn connect(&self) -> Result<Client> {
        let mut c = Client::connect(&self.endpoint)?;
        c.set_threshold(self.config.flush_depth);
        Ok(c)
    }

    pub fn census(&mut self) -> Census {
        match &mut self.roles {
            Roles::Process {
                coordinator,
                workers,
                daemons,
                ..
            } => Census {
                coordinator: alive(std::slice::from_mut(coordinator)),
                workers: alive(&mut workers.lock().unwrap()),
                daemons: alive(daemons),
            },
            Roles::Thread { .. } => Census::default(),
        }
    }

    /// Waits for the coordinator to exit (after a client `shutdown`), then
    /// stops the daemons.
    pub fn wait(mut self, timeout: Duration) -> Result<()> {
        let res = self.wait_coordinator(timeout);
        self.teardown();
        res
    }

    fn wait_coordinator(&mut self, timeout: Duration) -> Result<()> {
        match &mut self.roles {
            Roles::Process {
                coordinator,
                supervisor,
                ..
            } => {
                let deadline = Instant::now() + timeout;
                loop {
                    if let Some(status) = coordinator.try_wait()? {
                        if let Some(h) = supervisor.take() {
                            let _ = h.join();
                        }
                        return if status.success() {
                            Ok(())
                        } else {
                            Err(Error::SpawnFailed(format!("coordinator exited with {status}")))
                        };
                    }
                    if Instant::now() > deadline {
                        return Err(Error::SpawnFailed("coordinator did not exit".into()));
                    }
                    thread::sleep(Duration::from_millis(10));
                }
            }
            Roles::Thread {
                stop, coordinator, ..
            } => {
                let Some(h) = coordinator.take() else {
                    return Ok(());
                };
                let deadline = Instant::now() + timeout;
                while !h.is_finished() && Instant::now() < deadline {
                    thread::sleep(Duration::from_millis(10));
                }
                stop.store(true, Ordering::SeqCst);
                h.join().map_err(|_| Error::SpawnFailed("coordinator panicked".into()))?
            }
        }
    }

    fn teardown(&mut self) {
        match &mut self.roles {
            Roles::Process {
                coordinator,
                workers,
                daemons,
                supervisor,
            } => {
                let _ = coordinator.kill();
                let _ = coordinator.wait();
                if let Some(h) = supervisor.take() {
                    let _ = h.join();
                }
                for c in workers.lock().unwrap().iter_mut().chain(daemons.iter_mut()) {
                    let _ = c.kill();
                    let _ = c.wait();
                }
            }
            Roles::Thread {
                stop,
                coordinator,
                daemons,
                daemon_stop,
            } => {
                stop.store(true, Ordering::SeqCst);
                if let Some(h) = coordinator.take() {
                    let _ = h.join();
                }
                daemon_stop.store(true, Ordering::SeqCst);
                for d in daemons.drain(..) {
                    let _ = d.join();
                }
            }
        }
        if self.owns_scratch {
            let _ = std::fs::remove_dir_all(&self.scratch);
        }
    }
}

impl Drop for Job {
    fn drop(&mut self) {
        self.teardown();
    }
}
