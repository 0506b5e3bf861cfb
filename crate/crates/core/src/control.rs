//! Messages between the coordinator and its workers, and between worker
//! peers. Framed with the same `u32` length prefix as the client protocol.

use std::collections::BTreeMap;

use crate::elastic::AllocationId;
use crate::error::{Error, ErrorCode, Result};
use crate::exchange::{HaloMessage, KIND_HALO};
use crate::ir::{ArrayId, Dag, Shape};
use crate::wire::{Reader, Wire, Writer};

#[derive(Debug, Clone, PartialEq)]
pub struct Hello {
    pub rank: u32,
    pub generation: u64,
    pub peer_addr: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Setup {
    pub rank: u32,
    pub workers: u32,
    pub tiles: u32,
    /// Worker count of the tile map currently in force.
    pub map_workers: u32,
    pub jitter: Option<u64>,
    pub peers: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArrayMeta {
    pub id: ArrayId,
    pub shape: Shape,
    pub depth: [usize; 2],
    pub local_epoch: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoredTile {
    pub array: ArrayId,
    pub tile: u32,
    /// Daemon slot holding the payload.
    pub daemon: u32,
    pub allocation: AllocationId,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Request {
    Setup(Setup),
    Create { id: ArrayId, shape: Shape },
    Batch(Dag),
    Fetch { id: ArrayId },
    Migrate { from_workers: u32, to_workers: u32 },
    Checkpoint,
    /// Rebuild state from the manifest in scratch; `sequence` must match it.
    Restore { sequence: u64 },
    Shutdown,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BatchReport {
    pub kernel_launches: u64,
    pub rounds: BTreeMap<u32, u64>,
    pub network_messages: u64,
    pub local_copies: u64,
    /// (node id, wall µs, rounds started by the node)
    pub nodes: Vec<(u32, u64, u32)>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Response {
    Hello(Hello),
    Ok,
    Err { code: ErrorCode, message: String },
    Batch(BatchReport),
    Tiles(Vec<(u32, Vec<f64>)>),
    Checkpointed { arrays: Vec<ArrayMeta>, tiles: Vec<StoredTile> },
}

impl Response {
    pub fn from_error(e: &Error) -> Response {
        let message = match e {
            Error::Remote { message, .. } => message.clone(),
            other => other.to_string(),
        };
        Response::Err {
            code: e.code(),
            message,
        }
    }

    pub fn into_result(self) -> Result<Response> {
        match self {
            Response::Err { code, message } => Err(Error::Remote { code, message }),
            r => Ok(r),
        }
    }
}

impl Wire for ArrayMeta {
    fn encode(&self, w: &mut Writer) {
        w.u32(self.id.0)
            .put(&self.shape)
            .u32(self.depth[0] as u32)
            .u32(self.depth[1] as u32)
            .u64(self.local_epoch);
    }

    fn decode(r: &mut Reader<'_>) -> Result<Self> {
        Ok(ArrayMeta {
            id: ArrayId(r.u32()?),
            shape: r.get()?,
            depth: [r.u32()? as usize, r.u32()? as usize],
            local_epoch: r.u64()?,
        })
    }
}

impl Wire for StoredTile {
    fn encode(&self, w: &mut Writer) {
        w.u32(self.array.0)
            .u32(self.tile)
            .u32(self.daemon)
            .u64(self.allocation)
            .u64(self.bytes);
    }

    fn decode(r: &mut Reader<'_>) -> Result<Self> {
        Ok(StoredTile {
            array: ArrayId(r.u32()?),
            tile: r.u32()?,
            daemon: r.u32()?,
            allocation: r.u64()?,
            bytes: r.u64()?,
        })
    }
}

fn put_list<T: Wire>(w: &mut Writer, items: &[T]) {
    w.u32(items.len() as u32);
    for i in items {
        w.put(i);
    }
}

fn get_list<T: Wire>(r: &mut Reader<'_>, min: usize) -> Result<Vec<T>> {
    let n = r.count(min)?;
    (0..n).map(|_| r.get()).collect()
}

impl Wire for Request {
    fn encode(&self, w: &mut Writer) {
        match self {
            Request::Setup(s) => {
                w.u8(1).u32(s.rank).u32(s.workers).u32(s.tiles).u32(s.map_workers);
                match s.jitter {
                    Some(seed) => w.u8(1).u64(seed),
                    None => w.u8(0),
                };
                w.u32(s.peers.len() as u32);
                for p in &s.peers {
                    w.str(p);
                }
            }
            Request::Create { id, shape } => {
                w.u8(2).u32(id.0).put(shape);
            }
            Request::Batch(dag) => {
                w.u8(3).put(dag);
            }
            Request::Fetch { id } => {
                w.u8(4).u32(id.0);
            }
            Request::Migrate {
                from_workers,
                to_workers,
            } => {
                w.u8(5).u32(*from_workers).u32(*to_workers);
            }
            Request::Checkpoint => {
                w.u8(6);
            }
            Request::Restore { sequence } => {
                w.u8(7).u64(*sequence);
            }
            Request::Shutdown => {
                w.u8(8);
            }
        }
    }

    fn decode(r: &mut Reader<'_>) -> Result<Self> {
        Ok(match r.u8()? {
            1 => {
                let rank = r.u32()?;
                let workers = r.u32()?;
                let tiles = r.u32()?;
                let map_workers = r.u32()?;
                let jitter = match r.u8()? {
                    0 => None,
                    _ => Some(r.u64()?),
                };
                let n = r.count(4)?;
                let peers = (0..n).map(|_| r.str()).collect::<Result<_>>()?;
                Request::Setup(Setup {
                    rank,
                    workers,
                    tiles,
                    map_workers,
                    jitter,
                    peers,
                })
            }
            2 => Request::Create {
                id: ArrayId(r.u32()?),
                shape: r.get()?,
            },
            3 => Request::Batch(r.get()?),
            4 => Request::Fetch { id: ArrayId(r.u32()?) },
            5 => Request::Migrate {
                from_workers: r.u32()?,
                to_workers: r.u32()?,
            },
            6 => Request::Checkpoint,
            7 => Request::Restore { sequence: r.u64()? },
            8 => Request::Shutdown,
            k => return Err(Error::malformed(format!("unknown control request {k}"))),
        })
    }
}

impl Wire for Response {
    fn encode(&self, w: &mut Writer) {
        match self {
            Response::Hello(h) => {
                w.u8(1).u32(h.rank).u64(h.generation).str(&h.peer_addr);
            }
            Response::Ok => {
                w.u8(2);
            }
            Response::Err { code, message } => {
                w.u8(3).u16(*code as u16).str(message);
            }
            Response::Batch(b) => {
                w.u8(4)
                    .u64(b.kernel_launches)
                    .u64(b.network_messages)
                    .u64(b.local_copies)
                    .u32(b.rounds.len() as u32);
                for (a, n) in &b.rounds {
                    w.u32(*a).u64(*n);
                }
                w.u32(b.nodes.len() as u32);
                for (id, us, rounds) in &b.nodes {
                    w.u32(*id).u64(*us).u32(*rounds);
                }
            }
            Response::Tiles(tiles) => {
                w.u8(5).u32(tiles.len() as u32);
                for (t, v) in tiles {
                    w.u32(*t).u32(v.len() as u32).f64s(v);
                }
            }
            Response::Checkpointed { arrays, tiles } => {
                w.u8(6);
                put_list(w, arrays);
                put_list(w, tiles);
            }
        }
    }

    fn decode(r: &mut Reader<'_>) -> Result<Self> {
        Ok(match r.u8()? {
            1 => Response::Hello(Hello {
                rank: r.u32()?,
                generation: r.u64()?,
                peer_addr: r.str()?,
            }),
            2 => Response::Ok,
            3 => Response::Err {
                code: ErrorCode::from_u16(r.u16()?),
                message: r.str()?,
            },
            4 => {
                let kernel_launches = r.u64()?;
                let network_messages = r.u64()?;
                let local_copies = r.u64()?;
                let n = r.count(12)?;
                let mut rounds = BTreeMap::new();
                for _ in 0..n {
                    rounds.insert(r.u32()?, r.u64()?);
                }
                let n = r.count(16)?;
                let nodes = (0..n)
                    .map(|_| Ok((r.u32()?, r.u64()?, r.u32()?)))
                    .collect::<Result<_>>()?;
                Response::Batch(BatchReport {
                    kernel_launches,
                    rounds,
                    network_messages,
                    local_copies,
                    nodes,
                })
            }
            5 => {
                let n = r.count(8)?;
                let tiles = (0..n)
                    .map(|_| {
                        let t = r.u32()?;
                        let len = r.u32()? as usize;
                        Ok((t, r.f64s(len)?))
                    })
                    .collect::<Result<_>>()?;
                Response::Tiles(tiles)
            }
            6 => Response::Checkpointed {
                arrays: get_list(r, 21)?,
                tiles: get_list(r, 28)?,
            },
            k => return Err(Error::malformed(format!("unknown control response {k}"))),
        })
    }
}

pub const KIND_TILE: u8 = 2;

/// Traffic on the worker-to-worker mesh.
#[derive(Debug, Clone, PartialEq)]
pub enum PeerMsg {
    Halo(HaloMessage),
    /// A tile moving to its new owner; the payload is a tile checkpoint.
    Tile { tile: u32, payload: Vec<u8> },
}

impl PeerMsg {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        match self {
            PeerMsg::Halo(h) => h.encode_into(&mut w),
            PeerMsg::Tile { tile, payload } => {
                w.u8(KIND_TILE).u32(*tile).blob(payload);
            }
        }
        w.into_vec()
    }

    pub fn decode(bytes: &[u8]) -> Result<PeerMsg> {
        let mut r = Reader::new(bytes);
        let msg = match r.u8()? {
            KIND_HALO => PeerMsg::Halo(HaloMessage::decode_body(&mut r)?),
            KIND_TILE => PeerMsg::Tile {
                tile: r.u32()?,
                payload: r.blob()?.to_vec(),
            },
            k => return Err(Error::malformed(format!("unknown peer message {k}"))),
        };
        r.finish()?;
        Ok(msg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exchange::Direction;

    #[test]
    fn requests_roundtrip() {
        for req in [
            Request::Setup(Setup {
                rank: 1,
                workers: 2,
                tiles: 8,
                map_workers: 2,
                jitter: Some(5),
                peers: vec!["127.0.0.1:1".into(), "127.0.0.1:2".into()],
            }),
            Request::Create {
                id: ArrayId(2),
                shape: Shape::d2(4, 4),
            },
            Request::Batch(Dag::new()),
            Request::Fetch { id: ArrayId(1) },
            Request::Migrate {
                from_workers: 4,
                to_workers: 2,
            },
            Request::Checkpoint,
            Request::Restore { sequence: 3 },
            Request::Shutdown,
        ] {
            assert_eq!(Request::from_bytes(&req.to_bytes()).unwrap(), req);
        }
    }

    #[test]
    fn responses_roundtrip() {
        let mut report = BatchReport {
            kernel_launches: 3,
            ..Default::default()
        };
        report.rounds.insert(1, 2);
        report.nodes.push((0, 15, 1));
        for resp in [
            Response::Hello(Hello {
                rank: 0,
                generation: 1,
                peer_addr: "x".into(),
            }),
            Response::Ok,
            Response::Err {
                code: ErrorCode::PeerLost,
                message: "gone".into(),
            },
            Response::Batch(report),
            Response::Tiles(vec![(0, vec![1.0, 2.0]), (3, vec![])]),
            Response::Checkpointed {
                arrays: vec![],
                tiles: vec![],
            },
        ] {
            assert_eq!(Response::from_bytes(&resp.to_bytes()).unwrap(), resp);
        }
    }

    #[test]
    fn peer_messages_roundtrip() {
        let halo = PeerMsg::Halo(HaloMessage {
            array: ArrayId(1),
            tile: [0, 1],
            direction: Direction::SW,
            epoch: 9,
            payload: vec![0.5],
        });
        assert_eq!(PeerMsg::decode(&halo.encode()).unwrap(), halo);
        let tile = PeerMsg::Tile {
            tile: 4,
            payload: vec![1, 2, 3],
        };
        assert_eq!(PeerMsg::decode(&tile.encode()).unwrap(), tile);
    }
}
