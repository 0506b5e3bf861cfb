//! Client session: builds DAGs lazily, flushes them as batches once they
//! reach the threshold, and talks to the coordinator over the wire
//! protocol.

use std::io::BufReader;
use std::net::TcpStream;
use std::thread;

use crossbeam_channel::{unbounded, Receiver};

use crate::error::{Error, ErrorCode, Result};
use crate::ir::{fuse, ArrayId, Dag, Expr, Shape, ShapeMap, SliceSpec};
use crate::programs::Builder;
use crate::proto::{recv_reply, send_command, Command, Reply, StageTimings, Stats, ENDPOINT_ENV};

pub const DEFAULT_FLUSH_THRESHOLD: usize = 100;

pub struct Client {
    writer: TcpStream,
    replies: Receiver<Result<Reply>>,
    next_seq: u64,
    shapes: ShapeMap,
    pending: Dag,
    threshold: usize,
    fusion: bool,
    transcript: Option<Vec<Dag>>,
    /// First error reported for a command nobody waited on.
    error: Option<Error>,
}

impl Client {
    pub fn connect(addr: &str) -> Result<Client> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        let reader = stream.try_clone()?;
        let (tx, rx) = unbounded();
        thread::Builder::new().name("client-replies".into()).spawn(move || {
            let mut r = BufReader::with_capacity(1 << 16, reader);
            loop {
                let item = match recv_reply(&mut r) {
                    Ok(Some(reply)) => Ok(reply),
                    Ok(None) => Err(Error::Io(std::io::ErrorKind::UnexpectedEof.into())),
                    Err(e) => Err(e),
                };
                let end = item.is_err();
                if tx.send(item).is_err() || end {
                    return;
                }
            }
        })?;
        Ok(Client {
            writer: stream,
            replies: rx,
            next_seq: 1,
            shapes: ShapeMap::new(),
            pending: Dag::new(),
            threshold: DEFAULT_FLUSH_THRESHOLD,
            fusion: true,
            transcript: None,
            error: None,
        })
    }

    /// Connects to the address in `STENCILRT_ENDPOINT`.
    pub fn connect_env() -> Result<Client> {
        let addr = std::env::var(ENDPOINT_ENV)
            .map_err(|_| Error::Io(std::io::Error::other(format!("{ENDPOINT_ENV} is not set"))))?;
        Client::connect(&addr)
    }

    /// Pending node count at which a batch is sent.
    pub fn set_threshold(&mut self, nodes: usize) {
        self.threshold = nodes.max(1);
    }

    pub fn threshold(&self) -> usize {
        self.threshold
    }

    pub fn set_fusion(&mut self, on: bool) {
        self.fusion = on;
    }

    /// Keeps a copy of every flushed batch as built, before fusion.
    pub fn record_transcript(&mut self) {
        self.transcript.get_or_insert_with(Vec::new);
    }

    pub fn take_transcript(&mut self) -> Vec<Dag> {
        self.transcript.as_mut().map(std::mem::take).unwrap_or_default()
    }

    pub fn shape(&self, id: ArrayId) -> Option<Shape> {
        self.shapes.get(&id).copied()
    }

    pub fn pending_nodes(&self) -> usize {
        self.pending.len()
    }

    fn send(&mut self, cmd: &Command) -> Result<u64> {
        let seq = self.next_seq;
        self.next_seq += 1;
        send_command(&mut self.writer, seq, cmd)?;
        Ok(seq)
    }

    fn wait(&mut self, seq: u64) -> Result<Reply> {
        loop {
            let reply = self
                .replies
                .recv()
                .map_err(|_| Error::Io(std::io::ErrorKind::UnexpectedEof.into()))??;
            if reply.seq() == seq {
                return match self.error.take() {
                    Some(e) => Err(e),
                    None => reply.into_result(),
                };
            }
            if let Reply::Error { seq: other, code, message } = reply {
                let e = Error::Remote { code, message };
                if other == 0 {
                    return Err(e);
                }
                self.error.get_or_insert(e);
            }
        }
    }

    /// Sends the pending DAG, fused if enabled. Replies are not awaited.
    pub fn flush(&mut self) -> Result<()> {
        if self.pending.is_empty() {
            return Ok(());
        }
        let dag = std::mem::take(&mut self.pending);
        let sent = if self.fusion { fuse(&dag) } else { dag.clone() };
        if let Some(t) = self.transcript.as_mut() {
            t.push(dag);
        }
        self.send(&Command::SubmitBatch(sent))?;
        Ok(())
    }

    fn maybe_flush(&mut self) -> Result<()> {
        if self.pending.len() >= self.threshold {
            self.flush()?;
        }
        Ok(())
    }

    /// Flushes, then waits until the server has executed everything sent.
    pub fn sync(&mut self) -> Result<Stats> {
        self.flush()?;
        let seq = self.send(&Command::Sync)?;
        match self.wait(seq)? {
            Reply::SyncDone { stats, .. } => Ok(stats),
            other => Err(unexpected(&other)),
        }
    }

    pub fn fetch(&mut self, id: ArrayId, slice: &SliceSpec) -> Result<Vec<f64>> {
        self.flush()?;
        let seq = self.send(&Command::Fetch {
            id,
            slice: slice.clone(),
        })?;
        match self.wait(seq)? {
            Reply::FetchData { values, .. } => Ok(values),
            other => Err(unexpected(&other)),
        }
    }

    pub fn fetch_all(&mut self, id: ArrayId) -> Result<Vec<f64>> {
        let shape = self.shape(id).ok_or(Error::UnknownArray(id))?;
        let spec = SliceSpec::parse(if shape.rank() == 1 { ":" } else { ":, :" })?;
        self.fetch(id, &spec)
    }

    pub fn rescale(&mut self, workers: usize) -> Result<StageTimings> {
        if workers == 0 {
            return Err(Error::RescaleUnavailable("worker count must be at least 1".into()));
        }
        self.flush()?;
        let seq = self.send(&Command::Rescale {
            workers: workers as u32,
        })?;
        match self.wait(seq)? {
            Reply::RescaleDone { timings, .. } => Ok(timings),
            other => Err(unexpected(&other)),
        }
    }

    /// Stops the server and its workers.
    pub fn shutdown(mut self) -> Result<()> {
        self.flush()?;
        let seq = self.send(&Command::Shutdown)?;
        self.wait(seq).map(|_| ())
    }
}

fn unexpected(reply: &Reply) -> Error {
    Error::Remote {
        code: ErrorCode::Malformed,
        message: format!("unexpected reply {reply:?}"),
    }
}

impl Builder for Client {
    fn create(&mut self, shape: Shape) -> Result<ArrayId> {
        let id = ArrayId(self.shapes.len() as u32);
        self.send(&Command::CreateArray { id, shape })?;
        self.shapes.insert(id, shape);
        self.pending.add_create(id, shape);
        self.maybe_flush()?;
        Ok(id)
    }

    fn assign(&mut self, out: ArrayId, slice: &SliceSpec, expr: Expr) -> Result<()> {
        let st = self.pending.build_statement(out, slice, &expr, &self.shapes)?;
        self.pending.add_statement(st);
        self.maybe_flush()
    }
}
