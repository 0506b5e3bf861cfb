//! Server side of the client protocol. Owns the worker set: validates and
//! broadcasts batches, gathers fetches, and runs the rescale stages.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crossbeam_channel::{unbounded, Receiver};
use log::{debug, info, warn};
use serde_json::json;

use crate::analysis::{analyze, ghost_depth};
use crate::control::{ArrayMeta, BatchReport, Request, Response, Setup, StoredTile};
use crate::elastic::{CheckpointManifest, ManifestArray, ManifestTile, MANIFEST_VERSION};
use crate::error::{Error, Result};
use crate::grid::{decompose_tiles, Decomposition};
use crate::ir::{ArrayId, Dag, NodeKind, ShapeMap, SliceSpec};
use crate::proto::{decode_command, send_reply, Command, Reply, StageTimings, Stats};
use crate::wire::{read_frame, write_frame, Wire};
use crate::worker::{run_worker, WorkerArgs};

/// Starts worker processes (or threads) on request.
pub trait Spawner: Send {
    /// Retires every previously spawned worker, then starts `count` workers
    /// of `generation` that connect to `ctl_addr`.
    fn spawn(&mut self, generation: u64, count: usize, ctl_addr: &str) -> Result<()>;

    /// Waits for all workers to exit.
    fn finish(&mut self) -> Result<()>;
}

/// Runs workers as threads of this process.
pub struct ThreadSpawner {
    scratch: PathBuf,
    running: Vec<JoinHandle<Result<()>>>,
}

impl ThreadSpawner {
    pub fn new(scratch: PathBuf) -> ThreadSpawner {
        ThreadSpawner {
            scratch,
            running: Vec::new(),
        }
    }
}

impl Spawner for ThreadSpawner {
    fn spawn(&mut self, generation: u64, count: usize, ctl_addr: &str) -> Result<()> {
        self.finish()?;
        for rank in 0..count {
            let args = WorkerArgs {
                coordinator: ctl_addr.to_string(),
                rank: rank as u32,
                generation,
                scratch: self.scratch.clone(),
            };
            let h = thread::Builder::new()
                .name(format!("worker-{rank}"))
                .spawn(move || run_worker(&args))
                .map_err(|e| Error::SpawnFailed(e.to_string()))?;
            self.running.push(h);
        }
        Ok(())
    }

    fn finish(&mut self) -> Result<()> {
        for h in self.running.drain(..) {
            match h.join() {
                Ok(Ok(())) => {}
                Ok(Err(e)) => warn!("worker exited with {e}"),
                Err(_) => warn!("worker thread panicked"),
            }
        }
        Ok(())
    }
}

/// Delegates spawning to a supervising parent over stdio: writes
/// `SPAWN <generation> <count> <addr>` and waits for `SPAWNED` or
/// `FAILED <reason>`.
pub struct StdioSpawner {
    input: Box<dyn BufRead + Send>,
    output: Box<dyn Write + Send>,
}

impl StdioSpawner {
    pub fn new(input: Box<dyn BufRead + Send>, output: Box<dyn Write + Send>) -> StdioSpawner {
        StdioSpawner { input, output }
    }

    pub fn stdio() -> StdioSpawner {
        StdioSpawner::new(Box::new(BufReader::new(io::stdin())), Box::new(io::stdout()))
    }

    fn request(&mut self, line: &str) -> Result<()> {
        writeln!(self.output, "{line}")?;
        self.output.flush()?;
        let mut reply = String::new();
        if self.input.read_line(&mut reply)? == 0 {
            return Err(Error::SpawnFailed("supervisor closed the channel".into()));
        }
        match reply.trim() {
            "SPAWNED" | "REAPED" => Ok(()),
            other => Err(Error::SpawnFailed(
                other.strip_prefix("FAILED").unwrap_or(other).trim().to_string(),
            )),
        }
    }
}

impl Spawner for StdioSpawner {
    fn spawn(&mut self, generation: u64, count: usize, ctl_addr: &str) -> Result<()> {
        self.request(&format!("SPAWN {generation} {count} {ctl_addr}"))
    }

    fn finish(&mut self) -> Result<()> {
        self.request("REAP")
    }
}

#[derive(Debug, Clone)]
pub struct CoordinatorConfig {
    pub endpoint: String,
    pub workers: usize,
    pub max_workers: usize,
    pub odf: usize,
    pub scratch: PathBuf,
    /// Seed for randomized node order and delays on workers.
    pub jitter: Option<u64>,
}

struct WorkerLink {
    w: TcpStream,
    r: BufReader<TcpStream>,
}

pub struct Coordinator {
    cfg: CoordinatorConfig,
    client: TcpListener,
    ctl: TcpListener,
    spawner: Box<dyn Spawner>,
    links: Vec<WorkerLink>,
    generation: u64,
    tiles: usize,
    map_workers: usize,
    shapes: ShapeMap,
    stats: Stats,
    sequence: u64,
    deferred: Option<Error>,
    batch_log: File,
    rescale_log: File,
}

/// Binds `endpoint`, mapping address-in-use to [`Error::PortInUse`].
pub fn bind_endpoint(endpoint: &str) -> Result<TcpListener> {
    TcpListener::bind(endpoint).map_err(|e| {
        if e.kind() == io::ErrorKind::AddrInUse {
            Error::PortInUse(endpoint.to_string())
        } else {
            Error::Io(e)
        }
    })
}

fn open_log(path: PathBuf) -> Result<File> {
    Ok(OpenOptions::new().create(true).append(true).open(path)?)
}

enum Intake {
    Cmd(u64, Command),
    End,
}

impl Coordinator {
    pub fn bind(cfg: CoordinatorConfig, spawner: Box<dyn Spawner>) -> Result<Coordinator> {
        if cfg.workers == 0 || cfg.workers > cfg.max_workers || cfg.odf == 0 {
            return Err(Error::SpawnFailed(format!(
                "need 1 <= workers ({}) <= max ({}) and odf >= 1",
                cfg.workers, cfg.max_workers
            )));
        }
        std::fs::create_dir_all(&cfg.scratch)?;
        let client = bind_endpoint(&cfg.endpoint)?;
        let ctl = TcpListener::bind("127.0.0.1:0")?;
        let batch_log = open_log(cfg.scratch.join("batches.jsonl"))?;
        let rescale_log = open_log(cfg.scratch.join("rescale.jsonl"))?;
        let mut c = Coordinator {
            tiles: cfg.workers * cfg.odf,
            map_workers: cfg.workers,
            cfg,
            client,
            ctl,
            spawner,
            links: Vec::new(),
            generation: 0,
            shapes: ShapeMap::new(),
            stats: Stats::default(),
            sequence: 0,
            deferred: None,
            batch_log,
            rescale_log,
        };
        c.start_workers(c.cfg.workers)?;
        Ok(c)
    }

    pub fn local_addr(&self) -> Result<SocketAddr> {
        Ok(self.client.local_addr()?)
    }

    pub fn worker_count(&self) -> usize {
        self.links.len()
    }

    fn start_workers(&mut self, count: usize) -> Result<()> {
        self.generation += 1;
        let ctl_addr = self.ctl.local_addr()?.to_string();
        self.spawner.spawn(self.generation, count, &ctl_addr)?;
        self.ctl.set_nonblocking(true)?;
        let deadline = Instant::now() + Duration::from_secs(60);
        let mut hello: BTreeMap<u32, (WorkerLink, String)> = BTreeMap::new();
        while hello.len() < count {
            match self.ctl.accept() {
                Ok((s, _)) => {
                    s.set_nonblocking(false)?;
                    s.set_nodelay(true)?;
                    let mut link = WorkerLink {
                        w: s.try_clone()?,
                        r: BufReader::new(s),
                    };
                    match recv_response(&mut link, usize::MAX)? {
                        Response::Hello(h) if h.generation == self.generation && (h.rank as usize) < count => {
                            hello.insert(h.rank, (link, h.peer_addr));
                        }
                        other => warn!("ignoring control connection with {other:?}"),
                    }
                }
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                    if Instant::now() > deadline {
                        return Err(Error::RestartFailed(format!(
                            "only {} of {count} workers connected",
                            hello.len()
                        )));
                    }
                    thread::sleep(Duration::from_millis(5));
                }
                Err(e) => return Err(e.into()),
            }
        }
        let peers: Vec<String> = hello.values().map(|(_, a)| a.clone()).collect();
        self.links = hello.into_values().map(|(l, _)| l).collect();
        for (rank, link) in self.links.iter_mut().enumerate() {
            let setup = Request::Setup(Setup {
                rank: rank as u32,
                workers: count as u32,
                tiles: self.tiles as u32,
                map_workers: self.map_workers as u32,
                jitter: self.cfg.jitter,
                peers: peers.clone(),
            });
            write_frame(&mut link.w, &setup.to_bytes())?;
        }
        self.collect()?;
        info!("generation {} up with {count} workers", self.generation);
        Ok(())
    }

    /// Reads one response from every worker; the first error wins.
    fn collect(&mut self) -> Result<Vec<Response>> {
        let mut out = Vec::with_capacity(self.links.len());
        let mut first_err = None;
        for (rank, link) in self.links.iter_mut().enumerate() {
            match recv_response(link, rank).and_then(Response::into_result) {
                Ok(r) => out.push(r),
                Err(e) => {
                    first_err.get_or_insert(e);
                }
            }
        }
        match first_err {
            Some(e) => Err(e),
            None => Ok(out),
        }
    }

    fn broadcast(&mut self, req: &Request) -> Result<Vec<Response>> {
        let bytes = req.to_bytes();
        for (rank, link) in self.links.iter_mut().enumerate() {
            write_frame(&mut link.w, &bytes).map_err(|_| Error::PeerLost(rank))?;
        }
        self.collect()
    }

    fn create_array(&mut self, id: ArrayId, shape: crate::ir::Shape) -> Result<()> {
        if self.shapes.contains_key(&id) {
            return Err(Error::DuplicateArray(id));
        }
        decompose_tiles(shape, self.tiles)?;
        self.broadcast(&Request::Create { id, shape })?;
        self.shapes.insert(id, shape);
        Ok(())
    }

    fn decomposition(&self, a: ArrayId) -> Result<Decomposition> {
        decompose_tiles(*self.shapes.get(&a).ok_or(Error::UnknownArray(a))?, self.tiles)
    }

    /// Server-side checks beyond `Dag::validate`: every array exists, all
    /// arrays of a statement share one shape (and so one decomposition),
    /// and ghost depths fit the tiles.
    fn check_batch(&self, dag: &Dag) -> Result<()> {
        for node in dag.nodes() {
            match &node.kind {
                NodeKind::Create { array, .. } => {
                    if !self.shapes.contains_key(array) {
                        return Err(Error::UnknownArray(*array));
                    }
                }
                NodeKind::Compute { statements } => {
                    for st in statements {
                        let out = self.shapes.get(&st.output).ok_or(Error::UnknownArray(st.output))?;
                        for a in &st.inputs {
                            let s = self.shapes.get(a).ok_or(Error::UnknownArray(*a))?;
                            if s != out {
                                return Err(Error::ShapeMismatch {
                                    expected: out.dims(),
                                    found: s.dims(),
                                });
                            }
                        }
                    }
                }
            }
        }
        dag.validate(&self.shapes)?;
        let metas: Vec<_> = dag.nodes().iter().map(|n| analyze(dag, n)).collect();
        let arrays: std::collections::BTreeSet<ArrayId> =
            metas.iter().flat_map(|m| m.args.iter().copied()).collect();
        for a in arrays {
            self.decomposition(a)?.check_depth(ghost_depth(a, &metas))?;
        }
        Ok(())
    }

    fn run_batch(&mut self, dag: &Dag) -> Result<()> {
        if dag.is_empty() {
            return Ok(());
        }
        self.check_batch(dag)?;
        let t0 = Instant::now();
        let replies = self.broadcast(&Request::Batch(dag.clone()))?;
        let wall_us = t0.elapsed().as_micros() as u64;
        let reports: Vec<BatchReport> = replies
            .into_iter()
            .map(|r| match r {
                Response::Batch(b) => Ok(b),
                other => Err(Error::malformed(format!("expected batch report, got {other:?}"))),
            })
            .collect::<Result<_>>()?;
        let lead = &reports[0];
        self.stats.batches += 1;
        self.stats.kernel_launches += lead.kernel_launches;
        for (a, n) in &lead.rounds {
            *self.stats.rounds.entry(*a).or_default() += n;
        }
        let net: u64 = reports.iter().map(|r| r.network_messages).sum();
        let local: u64 = reports.iter().map(|r| r.local_copies).sum();
        self.stats.network_messages += net;
        self.stats.local_copies += local;
        let node_us: Vec<u64> = (0..lead.nodes.len())
            .map(|k| reports.iter().map(|r| r.nodes.get(k).map_or(0, |n| n.1)).max().unwrap_or(0))
            .collect();
        let line = json!({
            "batch": self.stats.batches,
            "workers": self.links.len(),
            "nodes": dag.len(),
            "kernel_launches": lead.kernel_launches,
            "rounds": lead.rounds,
            "network_messages": net,
            "local_copies": local,
            "wall_us": wall_us,
            "node_us": node_us,
        });
        writeln!(self.batch_log, "{line}")?;
        Ok(())
    }

    fn fetch(&mut self, id: ArrayId, slice: &SliceSpec) -> Result<(u32, u32, Vec<f64>)> {
        let shape = *self.shapes.get(&id).ok_or(Error::UnknownArray(id))?;
        let region = slice.normalize(&shape)?;
        let decomp = self.decomposition(id)?;
        let [_, cols] = shape.dims();
        let mut full = vec![0.0; shape.len()];
        for reply in self.broadcast(&Request::Fetch { id })? {
            let Response::Tiles(tiles) = reply else {
                return Err(Error::malformed("expected tiles"));
            };
            for (t, values) in tiles {
                let r = decomp.tile_region(t as usize);
                let w = r.extent()[1];
                if values.len() != r.len() {
                    return Err(Error::malformed(format!("tile {t} has {} values", values.len())));
                }
                for (i, y) in (r.start[0]..r.stop[0]).enumerate() {
                    full[y * cols + r.start[1]..y * cols + r.stop[1]].copy_from_slice(&values[i * w..(i + 1) * w]);
                }
            }
        }
        let [h, w] = region.extent();
        let mut out = Vec::with_capacity(h * w);
        for y in region.start[0]..region.stop[0] {
            out.extend_from_slice(&full[y * cols + region.start[1]..y * cols + region.stop[1]]);
        }
        Ok((h as u32, w as u32, out))
    }

    fn migrate(&mut self, to: usize) -> Result<f64> {
        let t0 = Instant::now();
        self.broadcast(&Request::Migrate {
            from_workers: self.map_workers as u32,
            to_workers: to as u32,
        })?;
        self.map_workers = to;
        Ok(ms(t0))
    }

    fn checkpoint(&mut self, workers_after: usize) -> Result<(f64, u64)> {
        let t0 = Instant::now();
        let mut arrays: BTreeMap<ArrayId, ArrayMeta> = BTreeMap::new();
        let mut tiles: Vec<StoredTile> = Vec::new();
        for reply in self.broadcast(&Request::Checkpoint)? {
            let Response::Checkpointed { arrays: a, tiles: t } = reply else {
                return Err(Error::malformed("expected checkpoint entries"));
            };
            for m in a {
                arrays.entry(m.id).or_insert(m);
            }
            tiles.extend(t);
        }
        self.sequence += 1;
        let manifest = CheckpointManifest {
            version: MANIFEST_VERSION,
            generation: self.generation,
            sequence: self.sequence,
            tiles: self.tiles,
            workers_before: self.links.len(),
            workers_after,
            held_under: self.map_workers,
            arrays: arrays
                .values()
                .map(|m| ManifestArray {
                    id: m.id.0,
                    shape: m.shape.extents(),
                    depth: m.depth,
                    local_epoch: m.local_epoch,
                })
                .collect(),
            entries: tiles
                .iter()
                .map(|t| ManifestTile {
                    array: t.array.0,
                    tile: t.tile as usize,
                    daemon: t.daemon as usize,
                    allocation: t.allocation,
                    bytes: t.bytes,
                })
                .collect(),
        };
        let expected: usize = manifest.arrays.len() * self.tiles;
        if manifest.entries.len() != expected {
            return Err(Error::RestartFailed(format!(
                "checkpoint holds {} tiles, expected {expected}",
                manifest.entries.len()
            )));
        }
        manifest.write(&self.cfg.scratch)?;
        Ok((ms(t0), manifest.total_bytes()))
    }

    fn restart(&mut self, count: usize) -> Result<f64> {
        let t0 = Instant::now();
        self.broadcast(&Request::Shutdown)?;
        self.links.clear();
        self.start_workers(count)
            .map_err(|e| Error::RestartFailed(e.to_string()))?;
        Ok(ms(t0))
    }

    fn restore(&mut self) -> Result<f64> {
        let t0 = Instant::now();
        self.broadcast(&Request::Restore {
            sequence: self.sequence,
        })?;
        Ok(ms(t0))
    }

    /// Shrink (and identity): migrate, checkpoint, restart, restore.
    /// Expand: checkpoint, restart, restore, migrate.
    pub fn rescale(&mut self, count: usize) -> Result<StageTimings> {
        if count == 0 || count > self.cfg.max_workers {
            return Err(Error::RescaleUnavailable(format!(
                "{count} workers requested, launcher provides 1..={}",
                self.cfg.max_workers
            )));
        }
        let before = self.links.len();
        let mut t = StageTimings {
            workers: count as u32,
            ..Default::default()
        };
        if count <= before {
            t.lb_ms = self.migrate(count)?;
            (t.checkpoint_ms, t.bytes) = self.checkpoint(count)?;
            t.restart_ms = self.restart(count)?;
            t.restore_ms = self.restore()?;
        } else {
            (t.checkpoint_ms, t.bytes) = self.checkpoint(count)?;
            t.restart_ms = self.restart(count)?;
            t.restore_ms = self.restore()?;
            t.lb_ms = self.migrate(count)?;
        }
        let line = json!({ "from": before, "timings": &t });
        writeln!(self.rescale_log, "{line}")?;
        info!("rescaled {before} -> {count}: {t:?}");
        Ok(t)
    }

    fn take_deferred(&mut self) -> Result<()> {
        match self.deferred.take() {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }

    /// Executes one command. `None` means the reply was already sent.
    fn dispatch(&mut self, seq: u64, cmd: Command) -> Option<Reply> {
        let result = match cmd {
            Command::CreateArray { id, shape } => self.create_array(id, shape).map(|_| Reply::Ack { seq }),
            Command::SubmitBatch(dag) => {
                if let Err(e) = self.run_batch(&dag) {
                    debug!("batch {seq} failed: {e}");
                    self.deferred.get_or_insert(e);
                }
                return None;
            }
            Command::Fetch { id, slice } => self
                .take_deferred()
                .and_then(|_| self.fetch(id, &slice))
                .map(|(rows, cols, values)| Reply::FetchData {
                    seq,
                    rows,
                    cols,
                    values,
                }),
            Command::Sync => self.take_deferred().map(|_| Reply::SyncDone {
                seq,
                stats: self.stats.clone(),
            }),
            Command::Rescale { workers } => self
                .take_deferred()
                .and_then(|_| self.rescale(workers as usize))
                .map(|timings| Reply::RescaleDone { seq, timings }),
            Command::Shutdown => Ok(Reply::Ack { seq }),
        };
        Some(result.unwrap_or_else(|e| Reply::error(seq, &e)))
    }

    /// Serves client sessions one at a time until a client sends
    /// `Shutdown` or `stop` is set. Workers are shut down on return.
    pub fn serve(mut self, stop: Arc<AtomicBool>) -> Result<()> {
        self.client.set_nonblocking(true)?;
        let result = loop {
            if stop.load(Ordering::SeqCst) {
                break Ok(());
            }
            match self.client.accept() {
                Ok((s, peer)) => {
                    debug!("session from {peer}");
                    s.set_nonblocking(false)?;
                    s.set_nodelay(true)?;
                    match self.session(s) {
                        Ok(true) => break Ok(()),
                        Ok(false) => {}
                        Err(e) => break Err(e),
                    }
                }
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(5)),
                Err(e) => break Err(e.into()),
            }
        };
        let _ = self.broadcast(&Request::Shutdown);
        self.links.clear();
        self.spawner.finish()?;
        result
    }

    /// Returns `true` when the client asked for shutdown.
    fn session(&mut self, stream: TcpStream) -> Result<bool> {
        // A failed batch is reported only to the session that sent it.
        self.deferred = None;
        let writer = Arc::new(Mutex::new(stream.try_clone()?));
        let (tx, rx) = unbounded();
        let intake = {
            let writer = writer.clone();
            let stream = stream.try_clone()?;
            thread::Builder::new()
                .name("intake".into())
                .spawn(move || intake(stream, writer, tx))?
        };
        let shutdown = self.drain(&rx, &writer);
        let _ = stream.shutdown(std::net::Shutdown::Both);
        let _ = intake.join();
        Ok(shutdown)
    }

    fn drain(&mut self, rx: &Receiver<Intake>, writer: &Mutex<TcpStream>) -> bool {
        while let Ok(Intake::Cmd(seq, cmd)) = rx.recv() {
            let shutdown = matches!(cmd, Command::Shutdown);
            if let Some(reply) = self.dispatch(seq, cmd) {
                if send_reply(&mut *writer.lock().unwrap(), &reply).is_err() {
                    return false;
                }
            }
            if shutdown {
                return true;
            }
        }
        false
    }
}

fn ms(t0: Instant) -> f64 {
    t0.elapsed().as_secs_f64() * 1e3
}

fn recv_response(link: &mut WorkerLink, rank: usize) -> Result<Response> {
    match read_frame(&mut link.r) {
        Ok(Some(b)) => Response::from_bytes(&b),
        Ok(None) | Err(Error::Io(_)) => Err(Error::PeerLost(rank)),
        Err(e) => Err(e),
    }
}

/// Reads and checks frames. Submissions are acknowledged on receipt;
/// everything else is answered by the dispatcher once executed. A bad
/// frame gets an error reply with sequence 0 and ends the session.
fn intake(stream: TcpStream, writer: Arc<Mutex<TcpStream>>, tx: crossbeam_channel::Sender<Intake>) {
    let mut r = BufReader::with_capacity(1 << 16, stream);
    let mut expected = 1u64;
    let fail = |e: Error| {
        let _ = send_reply(&mut *writer.lock().unwrap(), &Reply::error(0, &e));
    };
    loop {
        let frame = match read_frame(&mut r) {
            Ok(Some(f)) => f,
            Ok(None) => break,
            Err(e) => {
                fail(e);
                break;
            }
        };
        let (seq, cmd) = match decode_command(&frame) {
            Ok(c) => c,
            Err(e) => {
                fail(e);
                break;
            }
        };
        if seq != expected {
            fail(Error::SequenceGap { expected, found: seq });
            break;
        }
        expected += 1;
        if matches!(cmd, Command::SubmitBatch(_)) && send_reply(&mut *writer.lock().unwrap(), &Reply::Ack { seq }).is_err() {
            break;
        }
        let last = matches!(cmd, Command::Shutdown);
        if tx.send(Intake::Cmd(seq, cmd)).is_err() || last {
            break;
        }
    }
    let _ = tx.send(Intake::End);
}
