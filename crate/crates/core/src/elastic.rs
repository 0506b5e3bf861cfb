//! Memory daemon that keeps tile payloads alive across worker restarts,
//! and the checkpoint manifest written during a rescale.

use std::collections::HashMap;
use std::io::{BufReader, BufWriter, Write};
use std::os::unix::net::{UnixListener, UnixStream};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, ErrorCode, Result};
use crate::wire::{read_frame, write_frame, Reader, Writer};

pub type AllocationId = u64;

const OP_STORE: u8 = 1;
const OP_RETRIEVE: u8 = 2;
const OP_FREE: u8 = 3;
const OP_PING: u8 = 4;
const OP_STATS: u8 = 5;

#[derive(Debug, Default)]
struct Heap {
    next: AllocationId,
    blocks: HashMap<AllocationId, Vec<u8>>,
    bytes: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct DaemonStats {
    pub allocations: u64,
    pub bytes: u64,
}

/// Serves the daemon protocol on `path` until `stop` is set. Each
/// connection gets its own thread; the heap is shared.
pub fn serve_daemon(path: &Path, stop: Arc<AtomicBool>) -> Result<()> {
    let _ = std::fs::remove_file(path);
    let listener = UnixListener::bind(path)?;
    listener.set_nonblocking(true)?;
    let heap = Arc::new(Mutex::new(Heap {
        next: 1,
        ..Default::default()
    }));
    while !stop.load(Ordering::Relaxed) {
        match listener.accept() {
            Ok((stream, _)) => {
                stream.set_nonblocking(false)?;
                let heap = heap.clone();
                thread::spawn(move || {
                    if let Err(e) = serve_conn(stream, &heap) {
                        log::debug!("daemon connection ended: {e}");
                    }
                });
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                thread::sleep(Duration::from_millis(5));
            }
            Err(e) => return Err(e.into()),
        }
    }
    let _ = std::fs::remove_file(path);
    Ok(())
}

fn serve_conn(stream: UnixStream, heap: &Mutex<Heap>) -> Result<()> {
    let mut rd = BufReader::new(stream.try_clone()?);
    let mut wr = BufWriter::new(stream);
    while let Some(req) = read_frame(&mut rd)? {
        let reply = match handle(&req, heap) {
            Ok(w) => w,
            Err(e) => {
                let mut w = Writer::new();
                w.u8(1).u16(e.code() as u16).u64(match e {
                    Error::UnknownAllocation(id) => id,
                    _ => 0,
                });
                w.str(&e.to_string());
                w
            }
        };
        write_frame(&mut wr, reply.as_slice())?;
        wr.flush()?;
    }
    Ok(())
}

fn handle(req: &[u8], heap: &Mutex<Heap>) -> Result<Writer> {
    let mut r = Reader::new(req);
    let mut w = Writer::new();
    w.u8(0);
    match r.u8()? {
        OP_STORE => {
            let payload = r.take(r.remaining())?.to_vec();
            let mut h = heap.lock().unwrap();
            let id = h.next;
            h.next += 1;
            h.bytes += payload.len() as u64;
            h.blocks.insert(id, payload);
            w.u64(id);
        }
        OP_RETRIEVE => {
            let id = r.u64()?;
            let block = {
                let mut h = heap.lock().unwrap();
                let b = h.blocks.remove(&id).ok_or(Error::UnknownAllocation(id))?;
                h.bytes -= b.len() as u64;
                b
            };
            w.bytes(&block);
        }
        OP_FREE => {
            let id = r.u64()?;
            let mut h = heap.lock().unwrap();
            let b = h.blocks.remove(&id).ok_or(Error::UnknownAllocation(id))?;
            h.bytes -= b.len() as u64;
        }
        OP_PING => {}
        OP_STATS => {
            let h = heap.lock().unwrap();
            w.u64(h.blocks.len() as u64).u64(h.bytes);
        }
        op => return Err(Error::malformed(format!("unknown daemon op {op}"))),
    }
    Ok(w)
}

/// Connection to one memory daemon.
pub struct DaemonClient {
    path: PathBuf,
    rd: BufReader<UnixStream>,
    wr: BufWriter<UnixStream>,
}

impl DaemonClient {
    pub fn connect(path: &Path) -> Result<DaemonClient> {
        let unreachable = |e: std::io::Error| Error::DaemonUnreachable(format!("{}: {e}", path.display()));
        let stream = UnixStream::connect(path).map_err(unreachable)?;
        Ok(DaemonClient {
            path: path.to_path_buf(),
            rd: BufReader::new(stream.try_clone().map_err(unreachable)?),
            wr: BufWriter::with_capacity(1 << 16, stream),
        })
    }

    /// Retries until the daemon accepts connections or `timeout` passes.
    pub fn wait(path: &Path, timeout: Duration) -> Result<DaemonClient> {
        let start = Instant::now();
        loop {
            match DaemonClient::connect(path).and_then(|mut c| c.ping().map(|_| c)) {
                Ok(c) => return Ok(c),
                Err(e) if start.elapsed() > timeout => return Err(e),
                Err(_) => thread::sleep(Duration::from_millis(10)),
            }
        }
    }

    fn call(&mut self, op: u8, args: &[u8], body: &[u8]) -> Result<Vec<u8>> {
        let lost = |e: Error| match e {
            Error::Io(io) => Error::DaemonUnreachable(format!("{}: {io}", self.path.display())),
            other => other,
        };
        let len = 1 + args.len() + body.len();
        (|| -> Result<()> {
            self.wr.write_all(&(len as u32).to_le_bytes())?;
            self.wr.write_all(&[op])?;
            self.wr.write_all(args)?;
            self.wr.write_all(body)?;
            self.wr.flush()?;
            Ok(())
        })()
        .map_err(lost)?;
        let reply = read_frame(&mut self.rd)
            .map_err(lost)?
            .ok_or_else(|| Error::DaemonUnreachable(format!("{} closed", self.path.display())))?;
        let mut r = Reader::new(&reply);
        match r.u8()? {
            0 => Ok(reply[1..].to_vec()),
            _ => {
                let code = r.u16()?;
                let id = r.u64()?;
                let msg = r.str()?;
                let code = ErrorCode::from_u16(code);
                if code == ErrorCode::UnknownAllocation {
                    return Err(Error::UnknownAllocation(id));
                }
                Err(Error::Remote { code, message: msg })
            }
        }
    }

    pub fn store(&mut self, payload: &[u8]) -> Result<AllocationId> {
        let r = self.call(OP_STORE, &[], payload)?;
        Reader::new(&r).u64()
    }

    /// Returns the payload and frees it.
    pub fn retrieve(&mut self, id: AllocationId) -> Result<Vec<u8>> {
        self.call(OP_RETRIEVE, &id.to_le_bytes(), &[])
    }

    pub fn free(&mut self, id: AllocationId) -> Result<()> {
        self.call(OP_FREE, &id.to_le_bytes(), &[]).map(|_| ())
    }

    pub fn ping(&mut self) -> Result<()> {
        self.call(OP_PING, &[], &[]).map(|_| ())
    }

    pub fn stats(&mut self) -> Result<DaemonStats> {
        let r = self.call(OP_STATS, &[], &[])?;
        let mut rd = Reader::new(&r);
        Ok(DaemonStats {
            allocations: rd.u64()?,
            bytes: rd.u64()?,
        })
    }
}

pub fn daemon_socket(scratch: &Path, slot: usize) -> PathBuf {
    scratch.join(format!("daemon-{slot}.sock"))
}

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestArray {
    pub id: u32,
    pub shape: Vec<usize>,
    pub depth: [usize; 2],
    pub local_epoch: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestTile {
    pub array: u32,
    pub tile: usize,
    pub daemon: usize,
    pub allocation: AllocationId,
    pub bytes: u64,
}

/// Everything needed to rebuild worker state after a restart, apart from
/// the payloads held by the daemons. ASTs are not recorded: every batch
/// carries its own table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub version: u32,
    pub generation: u64,
    pub sequence: u64,
    pub tiles: usize,
    pub workers_before: usize,
    pub workers_after: usize,
    /// Worker count of the tile map the payloads were stored under.
    pub held_under: usize,
    pub arrays: Vec<ManifestArray>,
    pub entries: Vec<ManifestTile>,
}

impl CheckpointManifest {
    pub fn path(scratch: &Path) -> PathBuf {
        scratch.join("manifest.json")
    }

    pub fn write(&self, scratch: &Path) -> Result<PathBuf> {
        let path = Self::path(scratch);
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, serde_json::to_vec_pretty(self).map_err(|e| Error::malformed(e.to_string()))?)?;
        std::fs::rename(&tmp, &path)?;
        Ok(path)
    }

    pub fn read(scratch: &Path) -> Result<CheckpointManifest> {
        let bytes = std::fs::read(Self::path(scratch))?;
        let m: CheckpointManifest =
            serde_json::from_slice(&bytes).map_err(|e| Error::malformed(format!("manifest: {e}")))?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::malformed(format!("manifest version {}", m.version)));
        }
        Ok(m)
    }

    pub fn total_bytes(&self) -> u64 {
        self.entries.iter().map(|e| e.bytes).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn start() -> (tempfile::TempDir, PathBuf, Arc<AtomicBool>, thread::JoinHandle<Result<()>>) {
        let dir = tempfile::tempdir().unwrap();
        let path = daemon_socket(dir.path(), 0);
        let stop = Arc::new(AtomicBool::new(false));
        let (p, s) = (path.clone(), stop.clone());
        let h = thread::spawn(move || serve_daemon(&p, s));
        (dir, path, stop, h)
    }

    #[test]
    fn store_retrieve_free() {
        let (_dir, path, stop, h) = start();
        let mut c = DaemonClient::wait(&path, Duration::from_secs(5)).unwrap();
        let a = c.store(b"hello").unwrap();
        let b = c.store(b"").unwrap();
        assert_ne!(a, b);
        assert_eq!(c.stats().unwrap(), DaemonStats { allocations: 2, bytes: 5 });
        assert_eq!(c.retrieve(b).unwrap(), b"");
        assert_eq!(c.retrieve(a).unwrap(), b"hello");
        assert!(matches!(c.retrieve(a), Err(Error::UnknownAllocation(id)) if id == a));
        let d = c.store(&[7; 1000]).unwrap();
        c.free(d).unwrap();
        assert!(matches!(c.free(d), Err(Error::UnknownAllocation(_))));
        assert_eq!(c.stats().unwrap(), DaemonStats::default());
        stop.store(true, Ordering::Relaxed);
        h.join().unwrap().unwrap();
    }

    #[test]
    fn concurrent_clients() {
        let (_dir, path, stop, h) = start();
        let mut c = DaemonClient::wait(&path, Duration::from_secs(5)).unwrap();
        let ids: Vec<_> = (0..4u8).map(|i| c.store(&vec![i; 4096]).unwrap()).collect();
        let handles: Vec<_> = ids
            .iter()
            .enumerate()
            .map(|(i, &id)| {
                let p = path.clone();
                thread::spawn(move || {
                    let mut c = DaemonClient::connect(&p).unwrap();
                    assert_eq!(c.retrieve(id).unwrap(), vec![i as u8; 4096]);
                })
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
        assert_eq!(c.stats().unwrap().bytes, 0);
        stop.store(true, Ordering::Relaxed);
        h.join().unwrap().unwrap();
    }

    #[test]
    fn unreachable_daemon() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            DaemonClient::connect(&dir.path().join("none.sock")),
            Err(Error::DaemonUnreachable(_))
        ));
    }

    #[test]
    fn manifest_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let m = CheckpointManifest {
            version: MANIFEST_VERSION,
            generation: 2,
            sequence: 40,
            tiles: 4,
            workers_before: 4,
            workers_after: 2,
            held_under: 2,
            arrays: vec![ManifestArray {
                id: 0,
                shape: vec![8, 8],
                depth: [1, 1],
                local_epoch: 3,
            }],
            entries: vec![ManifestTile {
                array: 0,
                tile: 1,
                daemon: 0,
                allocation: 9,
                bytes: 160,
            }],
        };
        m.write(dir.path()).unwrap();
        assert_eq!(CheckpointManifest::read(dir.path()).unwrap(), m);
        assert_eq!(m.total_bytes(), 160);
    }
}
