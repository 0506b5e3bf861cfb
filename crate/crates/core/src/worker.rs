//! Worker runtime. The main thread serves coordinator requests and runs
//! kernels; a second thread (the comm lane) runs halo rounds and receives
//! everything that arrives from peers.

use std::collections::BTreeMap;
use std::io::{BufReader, Read};
use std::net::{TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crossbeam_channel::{never, select, unbounded, Receiver, Sender};
use log::{debug, warn};

use crate::control::{ArrayMeta, Hello, PeerMsg, Request, Response, Setup, StoredTile};
use crate::elastic::{daemon_socket, CheckpointManifest, DaemonClient};
use crate::error::{Error, Result};
use crate::exchange::{destination, pack, strip_is_empty, unpack, Accept, Direction, RoundTracker};
use crate::executor::{Epochs, Executor};
use crate::grid::{block_owner, decompose_tiles, Decomposition, TileBuf, TileCheckpoint};
use crate::ir::{ArrayId, Shape};
use crate::wire::{read_frame, write_frame, Reader, Wire, Writer};

#[derive(Debug, Clone)]
pub struct WorkerArgs {
    pub coordinator: String,
    pub rank: u32,
    pub generation: u64,
    pub scratch: PathBuf,
}

/// Tiles of one array held by this worker.
#[derive(Clone)]
pub(crate) struct ArrayTiles {
    pub shape: Shape,
    pub decomp: Decomposition,
    pub tiles: BTreeMap<usize, Arc<RwLock<TileBuf>>>,
}

pub(crate) struct Store {
    pub rank: usize,
    pub tiles: usize,
    /// Worker count of the tile-to-worker map in force.
    pub map_workers: AtomicUsize,
    pub arrays: RwLock<BTreeMap<ArrayId, ArrayTiles>>,
    pub network_messages: AtomicU64,
    pub local_copies: AtomicU64,
}

impl Store {
    pub fn owner(&self, tile: usize) -> usize {
        block_owner(tile, self.tiles, self.map_workers.load(Ordering::SeqCst))
    }

    pub fn view(&self, a: ArrayId) -> Result<ArrayTiles> {
        self.arrays
            .read()
            .unwrap()
            .get(&a)
            .cloned()
            .ok_or(Error::UnknownArray(a))
    }

    fn create(&self, id: ArrayId, shape: Shape, depth: [usize; 2]) -> Result<()> {
        let decomp = decompose_tiles(shape, self.tiles)?;
        let mut tiles = BTreeMap::new();
        for t in 0..decomp.tile_count() {
            if self.owner(t) == self.rank {
                let mut buf = TileBuf::new(decomp.tile_extent);
                buf.ensure_depth(depth)?;
                tiles.insert(t, Arc::new(RwLock::new(buf)));
            }
        }
        let mut arrays = self.arrays.write().unwrap();
        if arrays.contains_key(&id) {
            return Err(Error::DuplicateArray(id));
        }
        arrays.insert(id, ArrayTiles { shape, decomp, tiles });
        Ok(())
    }
}

/// Outgoing half of the peer mesh, indexed by rank.
pub(crate) struct Mesh {
    out: Vec<Option<Mutex<TcpStream>>>,
}

impl Mesh {
    pub fn send(&self, to: usize, msg: &PeerMsg) -> Result<()> {
        let stream = self.out.get(to).and_then(|s| s.as_ref()).ok_or(Error::PeerLost(to))?;
        let bytes = msg.encode();
        let mut s = stream.lock().unwrap();
        write_frame(&mut *s, &bytes).map_err(|_| Error::PeerLost(to))
    }
}

pub(crate) enum CommCmd {
    Start { array: ArrayId, epoch: u64 },
    /// The array's ghost frame was rebuilt; forget its round history.
    Reset(ArrayId),
    Stop,
}

pub(crate) enum Event {
    RoundDone { array: ArrayId, epoch: u64 },
    Tile { tile: usize, payload: Vec<u8> },
    Failed(Error),
}

enum Inbound {
    Msg(Vec<u8>),
    Lost(usize),
}

struct CommLane {
    store: Arc<Store>,
    mesh: Arc<Mesh>,
    tracker: RoundTracker,
    events: Sender<Event>,
}

impl CommLane {
    fn run(mut self, cmds: Receiver<CommCmd>, mut inbound: Receiver<Inbound>) {
        loop {
            let mut peers_gone = false;
            let res = select! {
                recv(cmds) -> c => match c {
                    Ok(CommCmd::Start { array, epoch }) => self.start(array, epoch),
                    Ok(CommCmd::Reset(a)) => {
                        self.tracker.reset(a);
                        Ok(())
                    }
                    Ok(CommCmd::Stop) | Err(_) => return,
                },
                recv(inbound) -> m => match m {
                    Ok(Inbound::Msg(bytes)) => self.incoming(&bytes),
                    Ok(Inbound::Lost(rank)) => Err(Error::PeerLost(rank)),
                    // No peer readers remain (a single worker has none).
                    Err(_) => {
                        peers_gone = true;
                        Ok(())
                    }
                },
            };
            if peers_gone {
                inbound = never();
            }
            if let Err(e) = res {
                if self.events.send(Event::Failed(e)).is_err() {
                    return;
                }
            }
        }
    }

    fn start(&mut self, array: ArrayId, epoch: u64) -> Result<()> {
        let view = self.store.view(array)?;
        let rank = self.store.rank;
        let mut local = Vec::new();
        let mut expected = 0;
        for (&t, buf) in &view.tiles {
            let buf = buf.read().unwrap();
            for d in Direction::ALL {
                if strip_is_empty(d, buf.depth) {
                    continue;
                }
                let Some(nt) = view.decomp.neighbor(t, d.delta()) else {
                    continue;
                };
                let msg = pack(&buf, &view.decomp, array, t, d, epoch);
                let owner = self.store.owner(nt);
                if owner == rank {
                    local.push((nt, msg));
                } else {
                    self.mesh.send(owner, &PeerMsg::Halo(msg))?;
                    self.store.network_messages.fetch_add(1, Ordering::Relaxed);
                }
            }
            expected += Direction::ALL
                .iter()
                .filter(|d| !strip_is_empty(**d, buf.depth))
                .filter_map(|d| view.decomp.neighbor(t, d.delta()))
                .filter(|&nt| self.store.owner(nt) != rank)
                .count();
        }
        for (nt, msg) in local {
            let buf = view.tiles.get(&nt).ok_or_else(|| Error::malformed("local halo for unowned tile"))?;
            unpack(&mut buf.write().unwrap(), &msg)?;
            self.store.local_copies.fetch_add(1, Ordering::Relaxed);
        }
        let early = self.tracker.start(array, epoch, expected);
        let mut done = None;
        for msg in early {
            self.apply(&view, &msg)?;
            done = done.or(self.tracker.record(array));
        }
        if let Some(e) = done.or_else(|| self.tracker.finish_if_complete(array)) {
            let _ = self.events.send(Event::RoundDone { array, epoch: e });
        }
        Ok(())
    }

    fn apply(&self, view: &ArrayTiles, msg: &crate::exchange::HaloMessage) -> Result<()> {
        let dest = destination(&view.decomp, msg)
            .filter(|t| view.tiles.contains_key(t))
            .ok_or_else(|| Error::malformed(format!("halo for {} addressed to a tile not held here", msg.array)))?;
        unpack(&mut view.tiles[&dest].write().unwrap(), msg)
    }

    fn incoming(&mut self, bytes: &[u8]) -> Result<()> {
        match PeerMsg::decode(bytes)? {
            PeerMsg::Halo(msg) => {
                let array = msg.array;
                if let (Accept::Apply, Some(msg)) = self.tracker.classify(msg)? {
                    let view = self.store.view(array)?;
                    self.apply(&view, &msg)?;
                    if let Some(epoch) = self.tracker.record(array) {
                        let _ = self.events.send(Event::RoundDone { array, epoch });
                    }
                }
                Ok(())
            }
            PeerMsg::Tile { tile, payload } => {
                let _ = self.events.send(Event::Tile {
                    tile: tile as usize,
                    payload,
                });
                Ok(())
            }
        }
    }
}

/// Everything the control loop and the executor share.
pub(crate) struct WorkerCtx {
    pub store: Arc<Store>,
    pub mesh: Arc<Mesh>,
    pub cmds: Sender<CommCmd>,
    pub events: Receiver<Event>,
    pub epochs: BTreeMap<ArrayId, Epochs>,
    pub jitter: Option<u64>,
    scratch: PathBuf,
    daemons: BTreeMap<usize, DaemonClient>,
    comm: Option<JoinHandle<()>>,
}

impl WorkerCtx {
    fn daemon(&mut self, slot: usize) -> Result<&mut DaemonClient> {
        if !self.daemons.contains_key(&slot) {
            let c = DaemonClient::wait(&daemon_socket(&self.scratch, slot), Duration::from_secs(10))?;
            self.daemons.insert(slot, c);
        }
        Ok(self.daemons.get_mut(&slot).unwrap())
    }

    fn reset_ghosts(&mut self) {
        for (a, e) in self.epochs.iter_mut() {
            e.ghost = 0;
            let _ = self.cmds.send(CommCmd::Reset(*a));
        }
    }

    fn fetch(&self, id: ArrayId) -> Result<Response> {
        let view = self.store.view(id)?;
        let tiles = view
            .tiles
            .iter()
            .map(|(&t, b)| (t as u32, b.read().unwrap().interior()))
            .collect();
        Ok(Response::Tiles(tiles))
    }

    fn checkpoint_bytes(&self, id: ArrayId, view: &ArrayTiles, t: usize, buf: &TileBuf) -> Vec<u8> {
        let [y, x] = view.decomp.coords(t);
        TileCheckpoint {
            array: id,
            coords: [y as u16, x as u16],
            extent: buf.extent,
            depth: buf.depth,
            local_epoch: self.epochs.get(&id).map_or(0, |e| e.local),
            interior: buf.interior(),
        }
        .encode()
    }

    fn migrate(&mut self, from: usize, to: usize) -> Result<()> {
        let rank = self.store.rank;
        let tiles = self.store.tiles;
        let ids: Vec<ArrayId> = self.store.arrays.read().unwrap().keys().copied().collect();
        let mut expected = 0;
        for &id in &ids {
            let view = self.store.view(id)?;
            for (&t, buf) in &view.tiles {
                let dest = block_owner(t, tiles, to);
                if dest != rank {
                    let payload = self.checkpoint_bytes(id, &view, t, &buf.read().unwrap());
                    self.mesh.send(dest, &PeerMsg::Tile { tile: t as u32, payload })?;
                }
            }
            let mut arrays = self.store.arrays.write().unwrap();
            let entry = arrays.get_mut(&id).unwrap();
            entry.tiles.retain(|&t, _| block_owner(t, tiles, to) == rank);
            expected += (0..tiles)
                .filter(|&t| block_owner(t, tiles, to) == rank && block_owner(t, tiles, from) != rank)
                .count();
        }
        let deadline = Instant::now() + Duration::from_secs(120);
        while expected > 0 {
            let left = deadline.saturating_duration_since(Instant::now());
            match self.events.recv_timeout(left) {
                Ok(Event::Tile { tile, payload }) => {
                    self.install_tile(tile, &payload)?;
                    expected -= 1;
                }
                Ok(Event::Failed(e)) => return Err(e),
                Ok(Event::RoundDone { .. }) => return Err(Error::malformed("halo round during migration")),
                Err(_) => return Err(Error::RestartFailed("timed out waiting for migrated tiles".into())),
            }
        }
        self.store.map_workers.store(to, Ordering::SeqCst);
        self.reset_ghosts();
        Ok(())
    }

    fn install_tile(&mut self, tile: usize, payload: &[u8]) -> Result<()> {
        let ck = TileCheckpoint::decode(payload)?;
        let mut arrays = self.store.arrays.write().unwrap();
        let entry = arrays.get_mut(&ck.array).ok_or(Error::UnknownArray(ck.array))?;
        let [y, x] = entry.decomp.coords(tile);
        if ck.coords != [y as u16, x as u16] || ck.extent != entry.decomp.tile_extent {
            return Err(Error::malformed(format!("tile {tile} of {} does not match its checkpoint", ck.array)));
        }
        let mut buf = TileBuf::new(ck.extent);
        buf.ensure_depth(ck.depth)?;
        buf.set_interior(&ck.interior);
        entry.tiles.insert(tile, Arc::new(RwLock::new(buf)));
        Ok(())
    }

    fn checkpoint(&mut self) -> Result<Response> {
        let rank = self.store.rank;
        let ids: Vec<ArrayId> = self.store.arrays.read().unwrap().keys().copied().collect();
        let mut arrays = Vec::new();
        let mut stored = Vec::new();
        for id in ids {
            let view = self.store.view(id)?;
            let e = self.epochs.get(&id).copied().unwrap_or_default();
            arrays.push(ArrayMeta {
                id,
                shape: view.shape,
                depth: e.depth,
                local_epoch: e.local,
            });
            for (&t, buf) in &view.tiles {
                let bytes = self.checkpoint_bytes(id, &view, t, &buf.read().unwrap());
                let allocation = self.daemon(rank)?.store(&bytes)?;
                stored.push(StoredTile {
                    array: id,
                    tile: t as u32,
                    daemon: rank as u32,
                    allocation,
                    bytes: bytes.len() as u64,
                });
            }
        }
        Ok(Response::Checkpointed { arrays, tiles: stored })
    }

    fn restore(&mut self, sequence: u64) -> Result<()> {
        let manifest = CheckpointManifest::read(&self.scratch)?;
        if manifest.sequence != sequence || manifest.tiles != self.store.tiles {
            return Err(Error::RestartFailed(format!(
                "manifest {} for {} tiles does not match restore {} for {} tiles",
                manifest.sequence, manifest.tiles, sequence, self.store.tiles
            )));
        }
        self.store.map_workers.store(manifest.held_under, Ordering::SeqCst);
        for m in &manifest.arrays {
            let id = ArrayId(m.id);
            self.store.create(id, Shape::new(&m.shape)?, m.depth)?;
            self.epochs.insert(
                id,
                Epochs {
                    depth: m.depth,
                    local: m.local_epoch,
                    ghost: 0,
                },
            );
        }
        for entry in &manifest.entries {
            if self.store.owner(entry.tile) != self.store.rank {
                continue;
            }
            let payload = self.daemon(entry.daemon)?.retrieve(entry.allocation)?;
            if payload.len() as u64 != entry.bytes {
                return Err(Error::RestartFailed(format!(
                    "tile {} of a{} came back with {} bytes, expected {}",
                    entry.tile,
                    entry.array,
                    payload.len(),
                    entry.bytes
                )));
            }
            self.install_tile(entry.tile, &payload)?;
        }
        Ok(())
    }

    fn handle(&mut self, req: Request) -> Result<Response> {
        match req {
            Request::Setup(_) => Err(Error::malformed("worker already set up")),
            Request::Create { id, shape } => {
                self.store.create(id, shape, [0, 0])?;
                self.epochs.insert(id, Epochs::default());
                Ok(Response::Ok)
            }
            Request::Batch(dag) => {
                let report = Executor::new(self).run(&dag)?;
                Ok(Response::Batch(report))
            }
            Request::Fetch { id } => self.fetch(id),
            Request::Migrate { from_workers, to_workers } => {
                self.migrate(from_workers as usize, to_workers as usize)?;
                Ok(Response::Ok)
            }
            Request::Checkpoint => self.checkpoint(),
            Request::Restore { sequence } => {
                self.restore(sequence)?;
                Ok(Response::Ok)
            }
            Request::Shutdown => Ok(Response::Ok),
        }
    }
}

impl Drop for WorkerCtx {
    fn drop(&mut self) {
        let _ = self.cmds.send(CommCmd::Stop);
        if let Some(h) = self.comm.take() {
            let _ = h.join();
        }
    }
}

fn peer_reader(rank: usize, stream: TcpStream, tx: Sender<Inbound>) {
    let mut r = BufReader::with_capacity(1 << 16, stream);
    loop {
        match read_frame(&mut r) {
            Ok(Some(b)) => {
                if tx.send(Inbound::Msg(b)).is_err() {
                    return;
                }
            }
            Ok(None) | Err(_) => {
                let _ = tx.send(Inbound::Lost(rank));
                return;
            }
        }
    }
}

fn read_peer_hello(stream: &mut TcpStream) -> Result<usize> {
    let frame = read_frame(stream)?.ok_or_else(|| Error::malformed("peer closed before hello"))?;
    let mut r = Reader::new(&frame);
    let rank = r.u32()? as usize;
    r.finish()?;
    Ok(rank)
}

/// Connects the full mesh: one outgoing stream per peer for sending, one
/// reader thread per incoming stream.
fn build_mesh(setup: &Setup, listener: TcpListener, inbound: Sender<Inbound>) -> Result<Mesh> {
    let rank = setup.rank as usize;
    let n = setup.workers as usize;
    let acceptor = thread::spawn(move || -> Result<()> {
        for _ in 0..n.saturating_sub(1) {
            let (mut s, _) = listener.accept()?;
            s.set_nodelay(true)?;
            let from = read_peer_hello(&mut s)?;
            let tx = inbound.clone();
            thread::Builder::new()
                .name(format!("peer-in-{from}"))
                .spawn(move || peer_reader(from, s, tx))?;
        }
        Ok(())
    });
    let mut out = Vec::with_capacity(n);
    for (j, addr) in setup.peers.iter().enumerate() {
        if j == rank {
            out.push(None);
            continue;
        }
        let deadline = Instant::now() + Duration::from_secs(30);
        let mut s = loop {
            match TcpStream::connect(addr) {
                Ok(s) => break s,
                Err(e) if Instant::now() < deadline => {
                    debug!("connect to peer {j} at {addr}: {e}");
                    thread::sleep(Duration::from_millis(20));
                }
                Err(e) => return Err(e.into()),
            }
        };
        s.set_nodelay(true)?;
        let mut w = Writer::new();
        w.u32(rank as u32);
        write_frame(&mut s, w.as_slice())?;
        out.push(Some(Mutex::new(s)));
    }
    acceptor
        .join()
        .map_err(|_| Error::RestartFailed("mesh acceptor panicked".into()))??;
    Ok(Mesh { out })
}

fn send_response(stream: &mut TcpStream, resp: &Response) -> Result<()> {
    write_frame(stream, &resp.to_bytes())
}

fn recv_request(stream: &mut impl Read) -> Result<Option<Request>> {
    match read_frame(stream)? {
        Some(b) => Ok(Some(Request::from_bytes(&b)?)),
        None => Ok(None),
    }
}

/// Runs one worker until the coordinator sends `Shutdown` or disconnects.
pub fn run_worker(args: &WorkerArgs) -> Result<()> {
    let listener = TcpListener::bind("127.0.0.1:0")?;
    let peer_addr = listener.local_addr()?.to_string();
    let mut ctl = TcpStream::connect(&args.coordinator)?;
    ctl.set_nodelay(true)?;
    send_response(
        &mut ctl,
        &Response::Hello(Hello {
            rank: args.rank,
            generation: args.generation,
            peer_addr,
        }),
    )?;
    let mut reader = BufReader::new(ctl.try_clone()?);
    let setup = match recv_request(&mut reader)? {
        Some(Request::Setup(s)) => s,
        Some(_) => return Err(Error::malformed("expected setup")),
        None => return Ok(()),
    };
    if setup.rank != args.rank {
        return Err(Error::malformed(format!("setup for rank {} sent to {}", setup.rank, args.rank)));
    }
    let (in_tx, in_rx) = unbounded();
    let mesh = match build_mesh(&setup, listener, in_tx) {
        Ok(m) => Arc::new(m),
        Err(e) => {
            let _ = send_response(&mut ctl, &Response::from_error(&e));
            return Err(e);
        }
    };
    let store = Arc::new(Store {
        rank: args.rank as usize,
        tiles: setup.tiles as usize,
        map_workers: AtomicUsize::new(setup.map_workers as usize),
        arrays: RwLock::new(BTreeMap::new()),
        network_messages: AtomicU64::new(0),
        local_copies: AtomicU64::new(0),
    });
    let (cmd_tx, cmd_rx) = unbounded();
    let (ev_tx, ev_rx) = unbounded();
    let lane = CommLane {
        store: store.clone(),
        mesh: mesh.clone(),
        tracker: RoundTracker::new(),
        events: ev_tx,
    };
    let comm = thread::Builder::new()
        .name(format!("comm-{}", args.rank))
        .spawn(move || lane.run(cmd_rx, in_rx))?;
    let mut ctx = WorkerCtx {
        store,
        mesh,
        cmds: cmd_tx,
        events: ev_rx,
        epochs: BTreeMap::new(),
        jitter: setup.jitter.map(|s| s ^ (args.rank as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)),
        scratch: args.scratch.clone(),
        daemons: BTreeMap::new(),
        comm: Some(comm),
    };
    send_response(&mut ctl, &Response::Ok)?;
    debug!("worker {} gen {} ready", args.rank, args.generation);

    loop {
        let req = match recv_request(&mut reader) {
            Ok(Some(r)) => r,
            Ok(None) => return Ok(()),
            Err(e) => {
                warn!("worker {}: bad control frame: {e}", args.rank);
                return Err(e);
            }
        };
        let stop = matches!(req, Request::Shutdown);
        let resp = ctx.handle(req).unwrap_or_else(|e| Response::from_error(&e));
        send_response(&mut ctl, &resp)?;
        if stop {
            return Ok(());
        }
    }
}
