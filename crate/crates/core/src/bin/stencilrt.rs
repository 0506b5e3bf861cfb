use std::fs::OpenOptions;
use std::io::{self, BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::AtomicBool;
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use rand::rngs::StdRng;
use rand::{RngCore, SeedableRng};

use stencil_core::bench::{self, digest_bytes, BenchReport, BenchSpec, Benchmark, RescalePoint};
use stencil_core::coordinator::{Coordinator, CoordinatorConfig, StdioSpawner};
use stencil_core::elastic::{serve_daemon, DaemonClient};
use stencil_core::launcher::{Job, JobConfig, Mode};
use stencil_core::worker::{run_worker, WorkerArgs};
use stencil_core::Error;

#[derive(Parser)]
#[command(name = "stencilrt", about = "Distributed stencil runtime", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct JobArgs {
    /// Initial worker count.
    #[arg(long, default_value_t = 4)]
    workers: usize,
    /// Largest worker count a rescale may ask for (defaults to --workers).
    #[arg(long)]
    max_workers: Option<usize>,
    /// Tiles per initial worker.
    #[arg(long, default_value_t = 1)]
    odf: usize,
    #[arg(long, default_value = "127.0.0.1:0")]
    endpoint: String,
    #[arg(long)]
    scratch: Option<PathBuf>,
    /// Pending DAG nodes that trigger a batch.
    #[arg(long, default_value_t = 100)]
    flush_depth: usize,
    /// Run every role as a thread of this process.
    #[arg(long)]
    threads: bool,
}

impl JobArgs {
    fn config(&self) -> Result<JobConfig, Error> {
        let mode = if self.threads {
            Mode::Thread
        } else {
            Mode::Process {
                exe: std::env::current_exe()?,
            }
        };
        Ok(JobConfig {
            workers: self.workers,
            max_workers: self.max_workers.unwrap_or(self.workers).max(self.workers),
            odf: self.odf,
            endpoint: self.endpoint.clone(),
            scratch: self.scratch.clone(),
            flush_depth: self.flush_depth,
            mode,
            jitter: None,
        })
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Start daemons, coordinator, and workers; run until a client shuts
    /// the job down.
    Launch {
        #[command(flatten)]
        job: JobArgs,
    },
    /// Run a bundled benchmark end to end and print a JSON report.
    Bench {
        /// laplace or cavity
        name: Benchmark,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 100)]
        iters: usize,
        #[command(flatten)]
        job: JobArgs,
        /// Append the report as one JSON line to this file.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        no_verify: bool,
        /// Rescale points as ITER:WORKERS, comma separated.
        #[arg(long, value_delimiter = ',')]
        rescale: Vec<String>,
    },
    /// Laplace with a rescale schedule; writes a per-interval timeline CSV.
    RescaleDemo {
        #[arg(long, default_value_t = 512)]
        size: usize,
        /// Iterations per phase.
        #[arg(long, default_value_t = 1000)]
        phase: usize,
        /// Worker count of each phase, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "8,4,8")]
        schedule: Vec<usize>,
        #[arg(long, default_value_t = 10)]
        sample_every: usize,
        #[arg(long, default_value_t = 1)]
        odf: usize,
        #[arg(long, default_value_t = 100)]
        flush_depth: usize,
        #[arg(long, default_value = "timeline.csv")]
        csv: PathBuf,
        #[arg(long)]
        threads: bool,
    },
    /// Summarize JSON-lines report files.
    Report { files: Vec<PathBuf> },
    #[command(hide = true)]
    Worker {
        #[arg(long)]
        coordinator: String,
        #[arg(long)]
        rank: u32,
        #[arg(long)]
        generation: u64,
        #[arg(long)]
        scratch: PathBuf,
    },
    #[command(hide = true)]
    Daemon {
        #[arg(long)]
        socket: PathBuf,
    },
    #[command(hide = true)]
    Coordinator {
        #[arg(long)]
        endpoint: String,
        #[arg(long)]
        workers: usize,
        #[arg(long)]
        max_workers: usize,
        #[arg(long)]
        odf: usize,
        #[arg(long)]
        scratch: PathBuf,
        #[arg(long)]
        jitter: Option<u64>,
    },
    /// Talk to a memory daemon directly.
    #[command(hide = true)]
    DaemonClient {
        #[arg(long)]
        socket: PathBuf,
        #[command(subcommand)]
        op: DaemonOp,
    },
}

#[derive(Subcommand)]
enum DaemonOp {
    /// Store a payload (a file, or --random bytes) and print its id and hash.
    Store {
        #[arg(long)]
        file: Option<PathBuf>,
        #[arg(long)]
        random: Option<usize>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Stay alive after storing, until killed.
        #[arg(long)]
        hold: bool,
    },
    /// Retrieve (and free) a payload; print its length and hash.
    Retrieve {
        #[arg(long)]
        id: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    Stats,
}

/// Exit codes: 0 ok, 1 oracle mismatch, 2 infrastructure failure, 3
/// endpoint already in use.
fn exit_for(e: &Error) -> ExitCode {
    eprintln!("stencilrt: {e}");
    match e {
        Error::OracleMismatch(_) => ExitCode::from(1),
        Error::PortInUse(_) => ExitCode::from(3),
        _ => ExitCode::from(2),
    }
}

fn parse_rescale(points: &[String]) -> Result<Vec<RescalePoint>, Error> {
    points
        .iter()
        .map(|p| {
            let (a, w) = p
                .split_once(':')
                .ok_or_else(|| Error::InvalidShape(format!("rescale point {p:?} is not ITER:WORKERS")))?;
            let parse = |s: &str| s.trim().parse::<usize>().map_err(|e| Error::InvalidShape(format!("{p:?}: {e}")));
            Ok(RescalePoint {
                after: parse(a)?,
                workers: parse(w)?,
            })
        })
        .collect()
}

fn append_line(path: &Path, line: &str) -> Result<(), Error> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{line}")?;
    Ok(())
}

fn run_bench(job_args: &JobArgs, spec: &BenchSpec, report_path: Option<&Path>) -> Result<BenchReport, Error> {
    let job = Job::launch(job_args.config()?)?;
    let mut client = job.connect()?;
    let (report, _) = bench::run(&mut client, spec, job_args.workers, job_args.odf)?;
    client.shutdown()?;
    job.wait(Duration::from_secs(30))?;
    let line = serde_json::to_string(&report).map_err(|e| Error::Io(io::Error::other(e)))?;
    println!("{line}");
    if let Some(p) = report_path {
        append_line(p, &line)?;
    }
    report.check()?;
    Ok(report)
}

fn rescale_demo(
    size: usize,
    phase: usize,
    schedule: &[usize],
    sample_every: usize,
    job: JobArgs,
    csv: &Path,
) -> Result<(), Error> {
    let first = *schedule.first().ok_or_else(|| Error::RescaleUnavailable("empty schedule".into()))?;
    let max = schedule.iter().copied().max().unwrap();
    let job = JobArgs {
        workers: first,
        max_workers: Some(max),
        ..job
    };
    let mut spec = BenchSpec::new(Benchmark::Laplace, size, phase * schedule.len());
    spec.sample_every = sample_every;
    spec.rescales = schedule
        .iter()
        .enumerate()
        .skip(1)
        .map(|(k, &w)| RescalePoint {
            after: k * phase,
            workers: w,
        })
        .collect();
    let report = run_bench(&job, &spec, None)?;
    let mut out = String::from("iteration,workers,ms\n");
    for s in &report.samples {
        out.push_str(&format!("{},{},{:.3}\n", s.iter, s.workers, s.ms));
    }
    std::fs::write(csv, out)?;
    for t in &report.rescales {
        eprintln!(
            "rescale to {}: lb {:.1} ms, checkpoint {:.1} ms, restart {:.1} ms, restore {:.1} ms, {} bytes",
            t.workers, t.lb_ms, t.checkpoint_ms, t.restart_ms, t.restore_ms, t.bytes
        );
    }
    Ok(())
}

fn report(files: &[PathBuf]) -> Result<(), Error> {
    println!(
        "{:<8} {:>6} {:>6} {:>4} {:>4} {:>6} {:>10} {:>8} {:>9} {:>8} {:>8}",
        "bench", "size", "iters", "wrk", "odf", "flush", "wall_ms", "batches", "launches", "rounds", "verified"
    );
    for f in files {
        for line in BufReader::new(std::fs::File::open(f)?).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let Ok(r) = serde_json::from_str::<BenchReport>(&line) else {
                eprintln!("{}: skipping a line that is not a bench report", f.display());
                continue;
            };
            println!(
                "{:<8} {:>6} {:>6} {:>4} {:>4} {:>6} {:>10.1} {:>8} {:>9} {:>8} {:>8}",
                r.benchmark.to_string(),
                r.size,
                r.iters,
                r.workers,
                r.odf,
                r.flush_depth,
                r.wall_ms,
                r.stats.batches,
                r.stats.kernel_launches,
                r.stats.total_rounds(),
                match r.verified {
                    Some(true) => "yes",
                    Some(false) => "NO",
                    None => "-",
                }
            );
            for t in &r.rescales {
                println!(
                    "  rescale -> {}: lb {:.1} ckpt {:.1} restart {:.1} restore {:.1} ms ({} bytes)",
                    t.workers, t.lb_ms, t.checkpoint_ms, t.restart_ms, t.restore_ms, t.bytes
                );
            }
        }
    }
    Ok(())
}

fn daemon_client(socket: &Path, op: DaemonOp) -> Result<(), Error> {
    let mut c = DaemonClient::wait(socket, Duration::from_secs(5))?;
    match op {
        DaemonOp::Store {
            file,
            random,
            seed,
            hold,
        } => {
            let payload = match (file, random) {
                (Some(f), _) => std::fs::read(f)?,
                (None, Some(n)) => {
                    let mut buf = vec![0u8; n];
                    StdRng::seed_from_u64(seed).fill_bytes(&mut buf);
                    buf
                }
                (None, None) => {
                    let mut buf = Vec::new();
                    io::stdin().read_to_end(&mut buf)?;
                    buf
                }
            };
            let id = c.store(&payload)?;
            println!("{id} {} {}", payload.len(), digest_bytes(&payload));
            io::stdout().flush()?;
            drop(payload);
            if hold {
                loop {
                    std::thread::sleep(Duration::from_secs(3600));
                }
            }
        }
        DaemonOp::Retrieve { id, out } => {
            let payload = c.retrieve(id)?;
            println!("{id} {} {}", payload.len(), digest_bytes(&payload));
            if let Some(p) = out {
                std::fs::write(p, &payload)?;
            }
        }
        DaemonOp::Stats => {
            let s = c.stats()?;
            println!("{} {}", s.allocations, s.bytes);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Launch { job } => (|| {
            let job = Job::launch(job.config()?)?;
            println!("ENDPOINT {}", job.endpoint());
            println!("export STENCILRT_ENDPOINT={}", job.endpoint());
            io::stdout().flush()?;
            job.wait(Duration::from_secs(u32::MAX as u64))
        })(),
        Cmd::Bench {
            name,
            size,
            iters,
            job,
            report,
            no_verify,
            rescale,
        } => (|| {
            let mut spec = BenchSpec::new(name, size, iters);
            spec.verify = !no_verify;
            spec.rescales = parse_rescale(&rescale)?;
            let mut job = job;
            let peak = spec.rescales.iter().map(|p| p.workers).max().unwrap_or(0);
            job.max_workers = Some(job.max_workers.unwrap_or(job.workers).max(peak));
            run_bench(&job, &spec, report.as_deref()).map(|_| ())
        })(),
        Cmd::RescaleDemo {
            size,
            phase,
            schedule,
            sample_every,
            odf,
            flush_depth,
            csv,
            threads,
        } => {
            let job = JobArgs {
                workers: 1,
                max_workers: None,
                odf,
                endpoint: "127.0.0.1:0".into(),
                scratch: None,
                flush_depth,
                threads,
            };
            rescale_demo(size, phase, &schedule, sample_every, job, &csv)
        }
        Cmd::Report { files } => report(&files),
        Cmd::Worker {
            coordinator,
            rank,
            generation,
            scratch,
        } => run_worker(&WorkerArgs {
            coordinator,
            rank,
            generation,
            scratch,
        }),
        Cmd::Daemon { socket } => serve_daemon(&socket, Arc::new(AtomicBool::new(false))),
        Cmd::Coordinator {
            endpoint,
            workers,
            max_workers,
            odf,
            scratch,
            jitter,
        } => (|| {
            let cfg = CoordinatorConfig {
                endpoint,
                workers,
                max_workers,
                odf,
                scratch,
                jitter,
            };
            let coord = Coordinator::bind(cfg, Box::new(StdioSpawner::stdio()))?;
            println!("LISTEN {}", coord.local_addr()?);
            io::stdout().flush()?;
            coord.serve(Arc::new(AtomicBool::new(false)))
        })(),
        Cmd::DaemonClient { socket, op } => daemon_client(&socket, op),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => exit_for(&e),
    }
}
