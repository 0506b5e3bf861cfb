//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails, except the two scaling criteria (7 and
//! 9) on machines with fewer than 4 cores, which are reported as hardware
//! failures. `STENCILRT_STRICT=1` makes every failure fatal. Criterion
//! numbers given as arguments select a subset.

mod common;

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::{Child, Command as Proc, Stdio};
use std::time::{Duration, Instant};

use rand::rngs::StdRng;
use rand::{Rng, RngCore, SeedableRng};

use stencil_core::bench::{self, bitwise_eq, BenchReport, BenchSpec, Benchmark, RescalePoint};
use stencil_core::error::ErrorCode;
use stencil_core::ir::{fuse, ArrayId, Expr, Shape};
use stencil_core::launcher::{Job, JobConfig};
use stencil_core::oracle::{cavity_reference, epoch_simulate, laplace_reference, reference_execute, ArraySet, CavityParams};
use stencil_core::programs::{Builder, Laplace, LocalProgram};
use stencil_core::proto::{decode_reply, encode_command, Command, Reply, PROTOCOL_VERSION};
use stencil_core::wire::{read_frame, write_frame};

type Outcome = Result<String, String>;

const WAIT: Duration = Duration::from_secs(60);
const EXE: &str = env!("CARGO_BIN_EXE_stencilrt");

fn launch(workers: usize, max: usize, odf: usize) -> Job {
    let mut cfg = JobConfig::new(workers, common::exe());
    cfg.odf = odf;
    cfg.max_workers = max.max(workers);
    Job::launch(cfg).expect("launch job")
}

fn close(job: Job, c: stencil_core::client::Client) -> Result<(), String> {
    c.shutdown().map_err(|e| e.to_string())?;
    job.wait(WAIT).map_err(|e| e.to_string())
}

/// One benchmark run on a fresh process job.
fn bench_job(spec: &BenchSpec, workers: usize, max: usize, odf: usize, flush: Option<usize>) -> Result<(BenchReport, Vec<f64>), String> {
    let job = launch(workers, max, odf);
    let mut c = job.connect().map_err(|e| e.to_string())?;
    if let Some(t) = flush {
        c.set_threshold(t);
    }
    let out = bench::run(&mut c, spec, workers, odf).map_err(|e| e.to_string())?;
    close(job, c)?;
    Ok(out)
}

fn c1() -> Outcome {
    let t0 = Instant::now();
    let expected = laplace_reference(64, 1000);
    let spec = BenchSpec::new(Benchmark::Laplace, 64, 1000);
    let mut runs = Vec::new();
    for w in [1, 2, 4] {
        for odf in [1, 4] {
            let (r, v) = bench_job(&spec, w, w, odf, None)?;
            if !bitwise_eq(&v, &expected) {
                return Err(format!("workers {w} odf {odf} differs from the reference"));
            }
            runs.push(format!("{w}x{odf} {:.0}ms", r.wall_ms));
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    let detail = format!("laplace 64x64 x1000 bitwise equal for {} in {secs:.1}s", runs.join(", "));
    if secs < 60.0 {
        Ok(detail)
    } else {
        Err(format!("{detail} (limit 60s)"))
    }
}

fn c2() -> Outcome {
    let (u, v, p) = cavity_reference(64, 50, CavityParams::default());
    let expected = [u, v, p].concat();
    let (r, got) = bench_job(&BenchSpec::new(Benchmark::Cavity, 64, 50), 4, 4, 1, None)?;
    if bitwise_eq(&got, &expected) {
        Ok(format!("cavity 64x64 x50 on 4 workers bitwise equal ({:.0}ms)", r.wall_ms))
    } else {
        Err("cavity u, v, p differ from the reference".into())
    }
}

fn run_program(seed: u64, fusion: bool) -> Result<Vec<Vec<f64>>, String> {
    let job = launch(2, 2, 2);
    let mut c = job.connect().map_err(|e| e.to_string())?;
    c.set_fusion(fusion);
    c.set_threshold(1 + (seed % 13) as usize);
    let arrays = common::random_program(&mut c, seed, 16).map_err(|e| e.to_string())?;
    let vals = arrays
        .iter()
        .map(|&a| c.fetch_all(a))
        .collect::<stencil_core::Result<Vec<_>>>()
        .map_err(|e| e.to_string())?;
    close(job, c)?;
    Ok(vals)
}

fn launches(fusion: bool) -> Result<u64, String> {
    let job = launch(2, 2, 2);
    let mut c = job.connect().map_err(|e| e.to_string())?;
    c.set_fusion(fusion);
    let s = c.create(Shape::d2(32, 32)).unwrap();
    let u = c.create(Shape::d2(32, 32)).unwrap();
    let v = c.create(Shape::d2(32, 32)).unwrap();
    c.set(s, ":, :", 1.0).unwrap();
    let base = c.sync().map_err(|e| e.to_string())?;
    for _ in 0..20 {
        c.set(u, "1:-1, 1:-1", Expr::at(s, ":-2, 1:-1") * 0.5 + Expr::at(s, "2:, 1:-1")).unwrap();
        c.set(v, "1:-1, 1:-1", Expr::at(s, "1:-1, :-2") - Expr::at(s, "1:-1, 2:") * 0.5).unwrap();
    }
    let n = c.sync().map_err(|e| e.to_string())?.since(&base).kernel_launches;
    close(job, c)?;
    Ok(n)
}

fn c3() -> Outcome {
    for seed in 0..200u64 {
        let mut p = LocalProgram::new();
        common::random_program(&mut p, seed, 16).unwrap();
        let mut reference = ArraySet::new();
        reference_execute(&p.dag, &mut reference).unwrap();
        let fused = run_program(seed, true)?;
        let plain = run_program(seed, false)?;
        for (k, (f, u)) in fused.iter().zip(&plain).enumerate() {
            if !bitwise_eq(f, u) || !bitwise_eq(f, &reference.data[&ArrayId(k as u32)]) {
                return Err(format!("program {seed} array {k}: fused and unfused results differ"));
            }
        }
    }
    let (fused, plain) = (launches(true)?, launches(false)?);
    let detail = format!("200 random programs agree; two-field loop launches {fused} fused vs {plain} unfused");
    if fused * 2 == plain {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn rounds_match(seed: Option<u64>) -> Result<String, String> {
    let job = launch(4, 4, 1);
    let mut c = job.connect().map_err(|e| e.to_string())?;
    c.record_transcript();
    let what = match seed {
        None => {
            c.set_threshold(7);
            let mut lp = Laplace::setup(&mut c, 32).unwrap();
            for _ in 0..40 {
                lp.step(&mut c).unwrap();
            }
            "laplace".to_string()
        }
        Some(s) => {
            c.set_threshold(3 + s as usize);
            common::random_program(&mut c, s, 24).unwrap();
            format!("program {s}")
        }
    };
    let stats = c.sync().map_err(|e| e.to_string())?;
    let fused: Vec<_> = c.take_transcript().iter().map(fuse).collect();
    close(job, c)?;
    let expected: BTreeMap<u32, u64> = epoch_simulate(&fused)
        .into_iter()
        .filter(|(_, n)| *n > 0)
        .map(|(a, n)| (a.0, n))
        .collect();
    if stats.rounds == expected {
        Ok(format!("{what}: {} rounds", stats.total_rounds()))
    } else {
        Err(format!("{what}: server {:?} vs model {expected:?}", stats.rounds))
    }
}

fn c4() -> Outcome {
    let mut parts = vec![rounds_match(None)?];
    for s in 1..=5 {
        parts.push(rounds_match(Some(s))?);
    }

    let job = launch(4, 4, 1);
    let mut c = job.connect().map_err(|e| e.to_string())?;
    c.set_fusion(false);
    let a = c.create(Shape::d2(32, 32)).unwrap();
    let b = c.create(Shape::d2(32, 32)).unwrap();
    let d = c.create(Shape::d2(32, 32)).unwrap();
    c.set(a, ":, :", 2.0).unwrap();
    let base = c.sync().map_err(|e| e.to_string())?;
    c.set(b, "1:-1, 1:-1", Expr::at(a, ":-2, 1:-1")).unwrap();
    c.set(d, "1:-1, 1:-1", Expr::at(a, "2:, 1:-1")).unwrap();
    let n = c.sync().map_err(|e| e.to_string())?.since(&base).rounds_for(a);
    close(job, c)?;
    if n != 1 {
        return Err(format!("two reads with no write took {n} rounds"));
    }
    parts.push("read-read: 1 round".into());
    Ok(parts.join("; "))
}

fn c5() -> Outcome {
    let iters = 2000;
    let spec = BenchSpec::new(Benchmark::Laplace, 64, iters);
    let mut sha = None;
    let mut wall = BTreeMap::new();
    let mut parts = Vec::new();
    for t in [1, 10, 100, iters] {
        // Best of five for the two thresholds whose times are compared.
        let reps = if t == 1 || t == 100 { 5 } else { 1 };
        let mut best = f64::INFINITY;
        for _ in 0..reps {
            let (r, _) = bench_job(&spec, 4, 4, 1, Some(t))?;
            if r.verified != Some(true) || sha.get_or_insert(r.sha256.clone()) != &r.sha256 {
                return Err(format!("threshold {t} changed the result"));
            }
            let want = iters.div_ceil(t) as u64;
            if r.stats.batches != want {
                return Err(format!("threshold {t}: {} batches, expected {want}", r.stats.batches));
            }
            best = best.min(r.wall_ms);
        }
        wall.insert(t, best);
        parts.push(format!("t={t}: {} batches {best:.0}ms", iters.div_ceil(t)));
    }
    let detail = parts.join(", ");
    if wall[&100] <= wall[&1] {
        Ok(detail)
    } else {
        Err(format!("{detail} (t=100 slower than t=1)"))
    }
}

fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let cov: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let vx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let vy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

fn c6() -> Outcome {
    let t0 = Instant::now();
    let mut spec = BenchSpec::new(Benchmark::Laplace, 64, 1000);
    let (_, plain) = bench_job(&spec, 4, 4, 2, None)?;
    spec.rescales = vec![
        RescalePoint { after: 300, workers: 2 },
        RescalePoint { after: 600, workers: 4 },
    ];
    let (rep, got) = bench_job(&spec, 4, 4, 2, None)?;
    if !bitwise_eq(&got, &plain) {
        return Err("4->2->4 result differs from the run without rescaling".into());
    }
    for t in &rep.rescales {
        let stages = [t.lb_ms, t.checkpoint_ms, t.restart_ms, t.restore_ms];
        if rep.rescales.len() != 2 || stages.iter().any(|s| !s.is_finite() || *s < 0.0) || t.restart_ms <= 0.0 || t.bytes == 0 {
            return Err(format!("incomplete stage timings {t:?}"));
        }
    }

    // Checkpoint plus restore time against checkpoint size, best of three
    // rescales per size; the first one also pays for first-touch pages.
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for mb in [16usize, 64, 256] {
        let job = launch(4, 4, 1);
        let mut c = job.connect().map_err(|e| e.to_string())?;
        for _ in 0..mb / 8 {
            let a = c.create(Shape::d2(1024, 1024)).unwrap();
            c.set(a, ":, :", 1.5).unwrap();
        }
        c.sync().map_err(|e| e.to_string())?;
        let mut best = (0.0, f64::INFINITY);
        for _ in 0..3 {
            let t = c.rescale(4).map_err(|e| e.to_string())?;
            best = (t.bytes as f64, best.1.min(t.checkpoint_ms + t.restore_ms));
        }
        xs.push(best.0);
        ys.push(best.1);
        close(job, c)?;
    }
    let r = pearson(&xs, &ys);
    let secs = t0.elapsed().as_secs_f64();
    let points: Vec<String> = xs.iter().zip(&ys).map(|(x, y)| format!("{:.0}MB:{y:.0}ms", x / 1048576.0)).collect();
    let detail = format!(
        "4->2->4 bitwise equal; first rescale lb/ckpt/restart/restore {:.1}/{:.1}/{:.1}/{:.1} ms; size-time r={r:.3} [{}]; {secs:.0}s",
        rep.rescales[0].lb_ms,
        rep.rescales[0].checkpoint_ms,
        rep.rescales[0].restart_ms,
        rep.rescales[0].restore_ms,
        points.join(" ")
    );
    if r >= 0.9 && secs < 180.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn c7() -> Outcome {
    let phase = 300;
    let mut spec = BenchSpec::new(Benchmark::Laplace, 512, 3 * phase);
    spec.verify = false;
    spec.sample_every = 10;
    spec.rescales = vec![
        RescalePoint { after: phase, workers: 4 },
        RescalePoint { after: 2 * phase, workers: 8 },
    ];
    let (r, _) = bench_job(&spec, 8, 8, 1, None)?;
    let mean = |k: usize| {
        let s: Vec<f64> = r
            .samples
            .iter()
            .filter(|s| s.iter > k * phase && s.iter <= (k + 1) * phase)
            .map(|s| s.ms)
            .collect();
        s.iter().sum::<f64>() / s.len() as f64
    };
    let (a, b, c) = (mean(0), mean(1), mean(2));
    let detail = format!(
        "512x512 8->4->8 per-10-iteration ms: {a:.1} / {b:.1} / {c:.1} (shrunk {:.2}x, final {:+.0}%)",
        b / a,
        (c / a - 1.0) * 100.0
    );
    if b >= 1.5 * a && (c - a).abs() <= 0.2 * a {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn daemon_client(socket: &Path, args: &[&str]) -> Child {
    Proc::new(EXE)
        .arg("daemon-client")
        .arg("--socket")
        .arg(socket)
        .args(args)
        .stdout(Stdio::piped())
        .spawn()
        .expect("spawn daemon client")
}

fn first_line(child: &mut Child) -> String {
    let mut line = String::new();
    BufReader::new(child.stdout.as_mut().unwrap()).read_line(&mut line).unwrap();
    line.trim().to_string()
}

fn c8() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let socket = dir.path().join("daemon.sock");
    let mut daemon = Proc::new(EXE).arg("daemon").arg("--socket").arg(&socket).spawn().map_err(|e| e.to_string())?;
    let result = (|| {
        let stats = |s: &Path| {
            let mut c = daemon_client(s, &["stats"]);
            let l = first_line(&mut c);
            let _ = c.wait();
            l
        };
        let baseline = stats(&socket);
        let mut holder = daemon_client(&socket, &["store", "--random", "8388608", "--seed", "7", "--hold"]);
        let stored = first_line(&mut holder);
        holder.kill().map_err(|e| e.to_string())?;
        holder.wait().map_err(|e| e.to_string())?;
        let id = stored.split(' ').next().unwrap_or_default().to_string();
        let mut fresh = daemon_client(&socket, &["retrieve", "--id", &id]);
        let back = first_line(&mut fresh);
        let status = fresh.wait().map_err(|e| e.to_string())?;
        let after = stats(&socket);
        let detail = format!("stored [{stored}] retrieved [{back}] daemon [{baseline}] -> [{after}]");
        if status.success() && !stored.is_empty() && back == stored && after == baseline {
            Ok(detail)
        } else {
            Err(detail)
        }
    })();
    let _ = daemon.kill();
    let _ = daemon.wait();
    result
}

fn c9() -> Outcome {
    let mut spec = BenchSpec::new(Benchmark::Laplace, 2048, 200);
    spec.verify = false;
    let (one, _) = bench_job(&spec, 1, 1, 1, None)?;
    let (four, _) = bench_job(&spec, 4, 4, 1, None)?;
    if one.sha256 != four.sha256 {
        return Err("1 and 4 workers disagree".into());
    }
    let speedup = one.wall_ms / four.wall_ms;
    let detail = format!(
        "2048x2048 x200: 1 worker {:.0}ms, 4 workers {:.0}ms, speedup {speedup:.2}x",
        one.wall_ms, four.wall_ms
    );
    if speedup >= 1.5 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn c10() -> Outcome {
    let mut job = launch(2, 2, 1);
    let addr = job.endpoint().to_string();
    let mut rng = StdRng::seed_from_u64(10);
    let valid = encode_command(1, &Command::Sync);
    let mut dag_prog = LocalProgram::new();
    common::random_program(&mut dag_prog, 3, 6).unwrap();
    let batch = encode_command(1, &Command::SubmitBatch(dag_prog.dag));
    for i in 0..400 {
        let mut s = TcpStream::connect(&addr).map_err(|e| format!("server gone after {i} frames: {e}"))?;
        s.set_read_timeout(Some(Duration::from_millis(200))).unwrap();
        let _ = match i % 5 {
            0 => {
                let mut body = vec![0u8; rng.random_range(0..300)];
                rng.fill_bytes(&mut body);
                write_frame(&mut s, &body).map_err(|e| e.to_string())
            }
            1 => {
                let cut = rng.random_range(0..batch.len());
                s.write_all(&(batch.len() as u32).to_le_bytes())
                    .and_then(|_| s.write_all(&batch[..cut]))
                    .map_err(|e| e.to_string())
            }
            2 => {
                let mut bad = batch.clone();
                let k = rng.random_range(0..bad.len());
                bad[k] ^= 1 << rng.random_range(0..8);
                write_frame(&mut s, &bad).map_err(|e| e.to_string())
            }
            3 => s.write_all(&u32::MAX.to_le_bytes()).map_err(|e| e.to_string()),
            _ => {
                let mut raw = vec![0u8; rng.random_range(1..64)];
                rng.fill_bytes(&mut raw);
                s.write_all(&raw).map_err(|e| e.to_string())
            }
        };
        let _ = s.shutdown(std::net::Shutdown::Write);
        let mut sink = Vec::new();
        let _ = s.read_to_end(&mut sink);
    }
    if job.census().coordinator != 1 {
        return Err("coordinator exited under fuzzing".into());
    }

    let mut s = TcpStream::connect(&addr).map_err(|e| e.to_string())?;
    s.set_read_timeout(Some(WAIT)).unwrap();
    let mut frame = valid.clone();
    frame[..2].copy_from_slice(&(PROTOCOL_VERSION + 1).to_le_bytes());
    write_frame(&mut s, &frame).map_err(|e| e.to_string())?;
    let reply = read_frame(&mut s)
        .map_err(|e| e.to_string())?
        .ok_or("no reply to version mismatch")
        .and_then(|f| decode_reply(&f).map_err(|_| "undecodable reply"))?;
    if !matches!(reply, Reply::Error { seq: 0, code: ErrorCode::VersionMismatch, .. }) {
        return Err(format!("version mismatch answered with {reply:?}"));
    }

    let mut c = job.connect().map_err(|e| e.to_string())?;
    let mut lp = Laplace::setup(&mut c, 16).unwrap();
    for _ in 0..5 {
        lp.step(&mut c).unwrap();
    }
    let ok = c.fetch_all(lp.u1).map_err(|e| e.to_string())? == laplace_reference(16, 5);
    close(job, c)?;
    if ok {
        Ok("400 fuzzed/truncated frames survived; version mismatch -> VersionMismatch (seq 0); server still correct".into())
    } else {
        Err("server state wrong after fuzzing".into())
    }
}

fn main() {
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    let strict = std::env::var("STENCILRT_STRICT").is_ok_and(|v| v == "1");
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [(usize, fn() -> Outcome); 10] = [
        (1, c1),
        (2, c2),
        (3, c3),
        (4, c4),
        (5, c5),
        (6, c6),
        (7, c7),
        (8, c8),
        (9, c9),
        (10, c10),
    ];
    let mut fatal = 0;
    for (n, f) in criteria {
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let t0 = Instant::now();
        let out = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = t0.elapsed().as_secs_f64();
        match out {
            Ok(d) => println!("criterion {n:>2}: PASS ({secs:.1}s) {d}"),
            Err(d) if matches!(n, 7 | 9) && cores < 4 && !strict => {
                println!("criterion {n:>2}: FAIL (hardware: {cores} cores; needs >= 4) ({secs:.1}s) {d}")
            }
            Err(d) => {
                fatal += 1;
                println!("criterion {n:>2}: FAIL ({secs:.1}s) {d}");
            }
        }
        let _ = std::io::stdout().flush();
    }
    if fatal > 0 {
        std::process::exit(1);
    }
}
