//! Bundled benchmarks driven through a client session, with optional
//! rescale points, per-interval timing samples, and oracle verification.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::client::Client;
use crate::error::{Error, Result};
use crate::oracle::{cavity_reference, laplace_reference, CavityParams};
use crate::programs::{Cavity, Laplace};
use crate::proto::{StageTimings, Stats};

/// Largest grid edge verified against the sequential oracle.
pub const ORACLE_LIMIT: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Benchmark {
    Laplace,
    Cavity,
}

impl FromStr for Benchmark {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "laplace" => Ok(Benchmark::Laplace),
            "cavity" => Ok(Benchmark::Cavity),
            other => Err(format!("unknown benchmark {other:?} (laplace, cavity)")),
        }
    }
}

impl fmt::Display for Benchmark {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Benchmark::Laplace => "laplace",
            Benchmark::Cavity => "cavity",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RescalePoint {
    /// Rescale after this many iterations.
    pub after: usize,
    pub workers: usize,
}

#[derive(Debug, Clone)]
pub struct BenchSpec {
    pub benchmark: Benchmark,
    pub size: usize,
    pub iters: usize,
    pub verify: bool,
    pub rescales: Vec<RescalePoint>,
    /// Sync and record a timing sample every this many iterations; 0 for
    /// none.
    pub sample_every: usize,
}

impl BenchSpec {
    pub fn new(benchmark: Benchmark, size: usize, iters: usize) -> BenchSpec {
        BenchSpec {
            benchmark,
            size,
            iters,
            verify: true,
            rescales: Vec::new(),
            sample_every: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Sample {
    /// Iterations completed when the sample was taken.
    pub iter: usize,
    pub workers: usize,
    pub ms: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchReport {
    pub benchmark: Benchmark,
    pub size: usize,
    pub iters: usize,
    pub workers: usize,
    pub odf: usize,
    pub flush_depth: usize,
    pub wall_ms: f64,
    pub stats: Stats,
    /// `None` when the grid is too large for the oracle or checks are off.
    pub verified: Option<bool>,
    pub sha256: String,
    pub samples: Vec<Sample>,
    pub rescales: Vec<StageTimings>,
}

/// Hash of the little-endian bytes of `values`.
pub fn digest(values: &[f64]) -> String {
    let mut h = Sha256::new();
    for v in values {
        h.update(v.to_le_bytes());
    }
    hex(&h.finalize())
}

pub fn digest_bytes(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

fn hex(b: &[u8]) -> String {
    b.iter().map(|b| format!("{b:02x}")).collect()
}

enum Running {
    Laplace(Laplace),
    Cavity(Cavity),
}

/// Runs `spec` on a fresh session. `workers`/`odf` are recorded in the
/// report only. Returns the report and the final arrays concatenated (u1
/// for Laplace; u, v, p for cavity).
pub fn run(client: &mut Client, spec: &BenchSpec, workers: usize, odf: usize) -> Result<(BenchReport, Vec<f64>)> {
    let n = spec.size;
    let prm = CavityParams::default();
    let mut prog = match spec.benchmark {
        Benchmark::Laplace => Running::Laplace(Laplace::setup(client, n)?),
        Benchmark::Cavity => Running::Cavity(Cavity::setup(client, n, prm)?),
    };
    // Counters and batch boundaries cover the iterations only.
    let base = client.sync()?;
    let mut current = workers;
    let mut samples = Vec::new();
    let mut rescales = Vec::new();
    let mut points = spec.rescales.clone();
    points.sort_by_key(|p| p.after);
    let mut points = points.into_iter().peekable();

    let t0 = Instant::now();
    let mut lap = Instant::now();
    for i in 1..=spec.iters {
        match &mut prog {
            Running::Laplace(lp) => lp.step(client)?,
            Running::Cavity(cv) => cv.step(client)?,
        }
        if spec.sample_every > 0 && i % spec.sample_every == 0 {
            client.sync()?;
            samples.push(Sample {
                iter: i,
                workers: current,
                ms: lap.elapsed().as_secs_f64() * 1e3,
            });
        }
        while let Some(p) = points.next_if(|p| p.after == i) {
            rescales.push(client.rescale(p.workers)?);
            current = p.workers;
            lap = Instant::now();
        }
        if spec.sample_every > 0 && i % spec.sample_every == 0 {
            lap = Instant::now();
        }
    }
    let stats = client.sync()?.since(&base);
    let wall_ms = t0.elapsed().as_secs_f64() * 1e3;

    let values = match &prog {
        Running::Laplace(lp) => client.fetch_all(lp.u1)?,
        Running::Cavity(cv) => {
            let mut all = client.fetch_all(cv.u)?;
            all.extend(client.fetch_all(cv.v)?);
            all.extend(client.fetch_all(cv.p)?);
            all
        }
    };
    let verified = (spec.verify && n <= ORACLE_LIMIT).then(|| {
        let expected = match spec.benchmark {
            Benchmark::Laplace => laplace_reference(n, spec.iters),
            Benchmark::Cavity => {
                let (u, v, p) = cavity_reference(n, spec.iters, prm);
                [u, v, p].concat()
            }
        };
        bitwise_eq(&expected, &values)
    });
    let report = BenchReport {
        benchmark: spec.benchmark,
        size: n,
        iters: spec.iters,
        workers,
        odf,
        flush_depth: client.threshold(),
        wall_ms,
        stats,
        verified,
        sha256: digest(&values),
        samples,
        rescales,
    };
    Ok((report, values))
}

pub fn bitwise_eq(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

impl BenchReport {
    pub fn check(&self) -> Result<()> {
        match self.verified {
            Some(false) => Err(Error::OracleMismatch(format!(
                "{} {}x{} after {} iterations differs from the reference",
                self.benchmark, self.size, self.size, self.iters
            ))),
            _ => Ok(()),
        }
    }
}
