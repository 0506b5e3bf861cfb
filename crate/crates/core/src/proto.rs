//! Client/server wire protocol. See `PROTOCOL.md` at the repository root
//! for the byte-level grammar.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, ErrorCode, Result};
use crate::ir::{ArrayId, Dag, Shape, SliceSpec};
use crate::wire::{read_frame, write_frame, Reader, Wire, Writer};

pub const PROTOCOL_VERSION: u16 = 1;
pub const ENDPOINT_ENV: &str = "STENCILRT_ENDPOINT";

#[derive(Debug, Clone, PartialEq)]
pub enum Command {
    CreateArray { id: ArrayId, shape: Shape },
    SubmitBatch(Dag),
    Fetch { id: ArrayId, slice: SliceSpec },
    Sync,
    Rescale { workers: u32 },
    Shutdown,
}

impl Command {
    pub fn kind(&self) -> u16 {
        match self {
            Command::CreateArray { .. } => 1,
            Command::SubmitBatch(_) => 2,
            Command::Fetch { .. } => 3,
            Command::Sync => 4,
            Command::Rescale { .. } => 5,
            Command::Shutdown => 6,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Command::CreateArray { .. } => "create",
            Command::SubmitBatch(_) => "submit",
            Command::Fetch { .. } => "fetch",
            Command::Sync => "sync",
            Command::Rescale { .. } => "rescale",
            Command::Shutdown => "shutdown",
        }
    }
}

/// Cumulative server counters since the job started.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stats {
    pub batches: u64,
    pub kernel_launches: u64,
    pub network_messages: u64,
    pub local_copies: u64,
    pub rounds: BTreeMap<u32, u64>,
}

impl Stats {
    pub fn rounds_for(&self, a: ArrayId) -> u64 {
        self.rounds.get(&a.0).copied().unwrap_or(0)
    }

    pub fn total_rounds(&self) -> u64 {
        self.rounds.values().sum()
    }

    /// Counter deltas `self - earlier`.
    pub fn since(&self, earlier: &Stats) -> Stats {
        let mut rounds = self.rounds.clone();
        for (a, n) in &earlier.rounds {
            let e = rounds.entry(*a).or_default();
            *e -= n;
        }
        rounds.retain(|_, n| *n > 0);
        Stats {
            batches: self.batches - earlier.batches,
            kernel_launches: self.kernel_launches - earlier.kernel_launches,
            network_messages: self.network_messages - earlier.network_messages,
            local_copies: self.local_copies - earlier.local_copies,
            rounds,
        }
    }
}

impl Wire for Stats {
    fn encode(&self, w: &mut Writer) {
        w.u64(self.batches)
            .u64(self.kernel_launches)
            .u64(self.network_messages)
            .u64(self.local_copies)
            .u32(self.rounds.len() as u32);
        for (a, n) in &self.rounds {
            w.u32(*a).u64(*n);
        }
    }

    fn decode(r: &mut Reader<'_>) -> Result<Self> {
        let batches = r.u64()?;
        let kernel_launches = r.u64()?;
        let network_messages = r.u64()?;
        let local_copies = r.u64()?;
        let n = r.count(12)?;
        let mut rounds = BTreeMap::new();
        for _ in 0..n {
            rounds.insert(r.u32()?, r.u64()?);
        }
        Ok(Stats {
            batches,
            kernel_launches,
            network_messages,
            local_copies,
            rounds,
        })
    }
}

/// Wall time of each rescale stage plus the bytes checkpointed.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub workers: u32,
    pub lb_ms: f64,
    pub checkpoint_ms: f64,
    pub restart_ms: f64,
    pub restore_ms: f64,
    pub bytes: u64,
}

impl Wire for StageTimings {
    fn encode(&self, w: &mut Writer) {
        w.u32(self.workers)
            .f64(self.lb_ms)
            .f64(self.checkpoint_ms)
            .f64(self.restart_ms)
            .f64(self.restore_ms)
            .u64(self.bytes);
    }

    fn decode(r: &mut Reader<'_>) -> Result<Self> {
        Ok(StageTimings {
            workers: r.u32()?,
            lb_ms: r.f64()?,
            checkpoint_ms: r.f64()?,
            restart_ms: r.f64()?,
            restore_ms: r.f64()?,
            bytes: r.u64()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Reply {
    Ack { seq: u64 },
    Error { seq: u64, code: ErrorCode, message: String },
    FetchData { seq: u64, rows: u32, cols: u32, values: Vec<f64> },
    SyncDone { seq: u64, stats: Stats },
    RescaleDone { seq: u64, timings: StageTimings },
}

impl Reply {
    pub fn kind(&self) -> u16 {
        match self {
            Reply::Ack { .. } => 0x81,
            Reply::Error { .. } => 0x82,
            Reply::FetchData { .. } => 0x83,
            Reply::SyncDone { .. } => 0x84,
            Reply::RescaleDone { .. } => 0x85,
        }
    }

    pub fn seq(&self) -> u64 {
        match self {
            Reply::Ack { seq }
            | Reply::Error { seq, .. }
            | Reply::FetchData { seq, .. }
            | Reply::SyncDone { seq, .. }
            | Reply::RescaleDone { seq, .. } => *seq,
        }
    }

    pub fn error(seq: u64, e: &Error) -> Reply {
        let message = match e {
            Error::Remote { message, .. } => message.clone(),
            other => other.to_string(),
        };
        Reply::Error {
            seq,
            code: e.code(),
            message,
        }
    }

    /// Turns an error reply into `Err`.
    pub fn into_result(self) -> Result<Reply> {
        match self {
            Reply::Error { code, message, .. } => Err(Error::Remote { code, message }),
            other => Ok(other),
        }
    }
}

fn frame(kind: u16, body: impl FnOnce(&mut Writer)) -> Vec<u8> {
    let mut w = Writer::new();
    w.u16(PROTOCOL_VERSION).u16(kind);
    body(&mut w);
    w.into_vec()
}

/// Splits a frame payload into kind and body, checking the version.
pub fn open_frame(payload: &[u8]) -> Result<(u16, Reader<'_>)> {
    let mut r = Reader::new(payload);
    let version = r.u16()?;
    if version != PROTOCOL_VERSION {
        return Err(Error::VersionMismatch {
            expected: PROTOCOL_VERSION,
            found: version,
        });
    }
    let kind = r.u16()?;
    Ok((kind, r))
}

pub fn encode_command(seq: u64, cmd: &Command) -> Vec<u8> {
    frame(cmd.kind(), |w| {
        w.u64(seq);
        match cmd {
            Command::CreateArray { id, shape } => {
                w.u32(id.0).put(shape);
            }
            Command::SubmitBatch(dag) => {
                w.put(dag);
            }
            Command::Fetch { id, slice } => {
                w.u32(id.0).put(slice);
            }
            Command::Rescale { workers } => {
                w.u32(*workers);
            }
            Command::Sync | Command::Shutdown => {}
        }
    })
}

pub fn decode_command(payload: &[u8]) -> Result<(u64, Command)> {
    let (kind, mut r) = open_frame(payload)?;
    let seq = r.u64()?;
    let cmd = match kind {
        1 => Command::CreateArray {
            id: ArrayId(r.u32()?),
            shape: r.get()?,
        },
        2 => Command::SubmitBatch(r.get()?),
        3 => Command::Fetch {
            id: ArrayId(r.u32()?),
            slice: r.get()?,
        },
        4 => Command::Sync,
        5 => Command::Rescale { workers: r.u32()? },
        6 => Command::Shutdown,
        k => return Err(Error::malformed(format!("unknown command kind {k}"))),
    };
    r.finish()?;
    Ok((seq, cmd))
}

pub fn encode_reply(reply: &Reply) -> Vec<u8> {
    frame(reply.kind(), |w| {
        w.u64(reply.seq());
        match reply {
            Reply::Ack { .. } => {}
            Reply::Error { code, message, .. } => {
                w.u16(*code as u16).str(message);
            }
            Reply::FetchData { rows, cols, values, .. } => {
                w.u32(*rows).u32(*cols).f64s(values);
            }
            Reply::SyncDone { stats, .. } => {
                w.put(stats);
            }
            Reply::RescaleDone { timings, .. } => {
                w.put(timings);
            }
        }
    })
}

pub fn decode_reply(payload: &[u8]) -> Result<Reply> {
    let (kind, mut r) = open_frame(payload)?;
    let seq = r.u64()?;
    let reply = match kind {
        0x81 => Reply::Ack { seq },
        0x82 => Reply::Error {
            seq,
            code: ErrorCode::from_u16(r.u16()?),
            message: r.str()?,
        },
        0x83 => {
            let rows = r.u32()?;
            let cols = r.u32()?;
            let n = (rows as usize)
                .checked_mul(cols as usize)
                .ok_or_else(|| Error::malformed("fetch size overflow"))?;
            Reply::FetchData {
                seq,
                rows,
                cols,
                values: r.f64s(n)?,
            }
        }
        0x84 => Reply::SyncDone { seq, stats: r.get()? },
        0x85 => Reply::RescaleDone {
            seq,
            timings: r.get()?,
        },
        k => return Err(Error::malformed(format!("unknown reply kind {k}"))),
    };
    r.finish()?;
    Ok(reply)
}

pub fn send_command(w: &mut impl Write, seq: u64, cmd: &Command) -> Result<()> {
    write_frame(w, &encode_command(seq, cmd))
}

pub fn send_reply(w: &mut impl Write, reply: &Reply) -> Result<()> {
    write_frame(w, &encode_reply(reply))
}

pub fn recv_reply(r: &mut impl Read) -> Result<Option<Reply>> {
    match read_frame(r)? {
        Some(p) => decode_reply(&p).map(Some),
        None => Ok(None),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::programs::{Laplace, LocalProgram};

    fn roundtrip(cmd: Command) {
        let bytes = encode_command(7, &cmd);
        let (seq, back) = decode_command(&bytes).unwrap();
        assert_eq!(seq, 7);
        assert_eq!(back, cmd);
    }

    #[test]
    fn commands_roundtrip() {
        let mut prog = LocalProgram::new();
        let mut lap = Laplace::setup(&mut prog, 8).unwrap();
        lap.step(&mut prog).unwrap();
        roundtrip(Command::CreateArray {
            id: ArrayId(3),
            shape: Shape::d1(64),
        });
        roundtrip(Command::SubmitBatch(prog.dag.clone()));
        roundtrip(Command::SubmitBatch(Dag::new()));
        roundtrip(Command::Fetch {
            id: ArrayId(1),
            slice: SliceSpec::parse("1:-1, 2").unwrap(),
        });
        roundtrip(Command::Sync);
        roundtrip(Command::Rescale { workers: 4 });
        roundtrip(Command::Shutdown);
    }

    #[test]
    fn replies_roundtrip() {
        let mut stats = Stats {
            batches: 3,
            ..Default::default()
        };
        stats.rounds.insert(0, 10);
        for r in [
            Reply::Ack { seq: 1 },
            Reply::Error {
                seq: 2,
                code: ErrorCode::UnknownArray,
                message: "unknown array a9".into(),
            },
            Reply::FetchData {
                seq: 3,
                rows: 1,
                cols: 2,
                values: vec![1.0, 2.0],
            },
            Reply::SyncDone { seq: 4, stats },
            Reply::RescaleDone {
                seq: 5,
                timings: StageTimings {
                    workers: 2,
                    lb_ms: 1.0,
                    checkpoint_ms: 2.0,
                    restart_ms: 3.0,
                    restore_ms: 4.0,
                    bytes: 99,
                },
            },
        ] {
            assert_eq!(decode_reply(&encode_reply(&r)).unwrap(), r);
        }
    }

    #[test]
    fn version_is_checked() {
        let mut bytes = encode_command(1, &Command::Sync);
        bytes[0] = 9;
        assert!(matches!(
            decode_command(&bytes),
            Err(Error::VersionMismatch { expected: 1, found: 9 })
        ));
    }

    #[test]
    fn truncations_are_rejected() {
        let mut prog = LocalProgram::new();
        Laplace::setup(&mut prog, 8).unwrap();
        let bytes = encode_command(1, &Command::SubmitBatch(prog.dag));
        for cut in 0..bytes.len() {
            assert!(decode_command(&bytes[..cut]).is_err(), "cut at {cut}");
        }
    }
}
