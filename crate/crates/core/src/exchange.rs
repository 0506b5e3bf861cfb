//! Halo exchange: strip geometry, the halo message, and per-array round
//! bookkeeping. The thread that drives rounds lives in the worker.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::grid::{Decomposition, TileBuf};
use crate::ir::ArrayId;
use crate::wire::{Reader, Writer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum Direction {
    N = 0,
    S = 1,
    W = 2,
    E = 3,
    NW = 4,
    NE = 5,
    SW = 6,
    SE = 7,
}

impl Direction {
    pub const ALL: [Direction; 8] = [
        Direction::N,
        Direction::S,
        Direction::W,
        Direction::E,
        Direction::NW,
        Direction::NE,
        Direction::SW,
        Direction::SE,
    ];

    /// `(dy, dx)` in tile-grid steps; north is toward row 0.
    pub fn delta(self) -> [isize; 2] {
        match self {
            Direction::N => [-1, 0],
            Direction::S => [1, 0],
            Direction::W => [0, -1],
            Direction::E => [0, 1],
            Direction::NW => [-1, -1],
            Direction::NE => [-1, 1],
            Direction::SW => [1, -1],
            Direction::SE => [1, 1],
        }
    }

    pub fn opposite(self) -> Direction {
        match self {
            Direction::N => Direction::S,
            Direction::S => Direction::N,
            Direction::W => Direction::E,
            Direction::E => Direction::W,
            Direction::NW => Direction::SE,
            Direction::NE => Direction::SW,
            Direction::SW => Direction::NE,
            Direction::SE => Direction::NW,
        }
    }

    pub fn from_code(c: u8) -> Result<Direction> {
        Direction::ALL
            .get(c as usize)
            .copied()
            .ok_or_else(|| Error::malformed(format!("bad direction {c}")))
    }
}

/// A strip is empty when it extends along an axis whose depth is zero.
pub fn strip_is_empty(dir: Direction, depth: [usize; 2]) -> bool {
    let d = dir.delta();
    (d[0] != 0 && depth[0] == 0) || (d[1] != 0 && depth[1] == 0)
}

fn span(delta: isize, extent: usize, depth: usize, ghost: bool) -> [isize; 2] {
    let (n, d) = (extent as isize, depth as isize);
    match (delta, ghost) {
        (0, _) => [0, n],
        (-1, false) => [0, d],
        (1, false) => [n - d, n],
        (-1, true) => [-d, 0],
        (_, true) => [n, n + d],
        _ => unreachable!(),
    }
}

/// Interior cells adjacent to `dir`, as local `(rows, cols)` ranges.
pub fn send_block(extent: [usize; 2], depth: [usize; 2], dir: Direction) -> ([isize; 2], [isize; 2]) {
    let d = dir.delta();
    (span(d[0], extent[0], depth[0], false), span(d[1], extent[1], depth[1], false))
}

/// Ghost cells on side `side`.
pub fn ghost_block(extent: [usize; 2], depth: [usize; 2], side: Direction) -> ([isize; 2], [isize; 2]) {
    let d = side.delta();
    (span(d[0], extent[0], depth[0], true), span(d[1], extent[1], depth[1], true))
}

/// Border strip of one tile bound for the neighbor at `direction`.
#[derive(Debug, Clone, PartialEq)]
pub struct HaloMessage {
    pub array: ArrayId,
    /// Sender tile.
    pub tile: [u16; 2],
    pub direction: Direction,
    pub epoch: u64,
    pub payload: Vec<f64>,
}

pub const KIND_HALO: u8 = 1;

impl HaloMessage {
    pub fn encode_into(&self, w: &mut Writer) {
        w.u8(KIND_HALO)
            .u32(self.array.0)
            .u16(self.tile[0])
            .u16(self.tile[1])
            .u8(self.direction as u8)
            .u64(self.epoch)
            .u32((self.payload.len() * 8) as u32)
            .f64s(&self.payload);
    }

    /// Decodes the fields after the kind byte.
    pub fn decode_body(r: &mut Reader<'_>) -> Result<HaloMessage> {
        let array = ArrayId(r.u32()?);
        let tile = [r.u16()?, r.u16()?];
        let direction = Direction::from_code(r.u8()?)?;
        let epoch = r.u64()?;
        let len = r.u32()? as usize;
        if len % 8 != 0 {
            return Err(Error::malformed(format!("halo payload of {len} bytes")));
        }
        let payload = r.f64s(len / 8)?;
        Ok(HaloMessage {
            array,
            tile,
            direction,
            epoch,
            payload,
        })
    }
}

pub fn tile_coords16(decomp: &Decomposition, tile: usize) -> [u16; 2] {
    let [y, x] = decomp.coords(tile);
    [y as u16, x as u16]
}

pub fn pack(
    buf: &TileBuf,
    decomp: &Decomposition,
    array: ArrayId,
    tile: usize,
    direction: Direction,
    epoch: u64,
) -> HaloMessage {
    let (ys, xs) = send_block(buf.extent, buf.depth, direction);
    HaloMessage {
        array,
        tile: tile_coords16(decomp, tile),
        direction,
        epoch,
        payload: buf.read_block(ys, xs),
    }
}

/// Tile index the message is addressed to.
pub fn destination(decomp: &Decomposition, msg: &HaloMessage) -> Option<usize> {
    let src = decomp.index([msg.tile[0] as usize, msg.tile[1] as usize]);
    decomp.neighbor(src, msg.direction.delta())
}

/// Writes the payload into the ghost strip facing the sender.
pub fn unpack(buf: &mut TileBuf, msg: &HaloMessage) -> Result<()> {
    let (ys, xs) = ghost_block(buf.extent, buf.depth, msg.direction.opposite());
    let want = ((ys[1] - ys[0]) * (xs[1] - xs[0])) as usize;
    if want != msg.payload.len() {
        return Err(Error::malformed(format!(
            "halo for {} carries {} values, strip holds {want}",
            msg.array,
            msg.payload.len()
        )));
    }
    buf.write_block(ys, xs, &msg.payload);
    Ok(())
}

/// Number of strips a tile receives per round.
pub fn expected_messages(decomp: &Decomposition, tile: usize, depth: [usize; 2]) -> usize {
    Direction::ALL
        .iter()
        .filter(|d| !strip_is_empty(**d, depth) && decomp.neighbor(tile, d.delta()).is_some())
        .count()
}

#[derive(Debug)]
struct Active {
    epoch: u64,
    expected: usize,
    received: usize,
}

/// Round state for every array on one worker. Messages for a round that
/// has not started locally are held until it does.
#[derive(Debug, Default)]
pub struct RoundTracker {
    active: BTreeMap<ArrayId, Active>,
    completed: BTreeMap<ArrayId, u64>,
    early: HashMap<(ArrayId, u64), Vec<HaloMessage>>,
}

#[derive(Debug, PartialEq)]
pub enum Accept {
    /// Apply the message to the current round.
    Apply,
    Buffered,
}

impl RoundTracker {
    pub fn new() -> RoundTracker {
        RoundTracker::default()
    }

    /// Starts a round and returns the messages that arrived early for it.
    pub fn start(&mut self, array: ArrayId, epoch: u64, expected: usize) -> Vec<HaloMessage> {
        debug_assert!(!self.active.contains_key(&array), "round already in flight");
        self.active.insert(
            array,
            Active {
                epoch,
                expected,
                received: 0,
            },
        );
        self.early.remove(&(array, epoch)).unwrap_or_default()
    }

    pub fn classify(&mut self, msg: HaloMessage) -> Result<(Accept, Option<HaloMessage>)> {
        if let Some(a) = self.active.get(&msg.array) {
            if a.epoch == msg.epoch {
                return Ok((Accept::Apply, Some(msg)));
            }
        }
        if let Some(&done) = self.completed.get(&msg.array) {
            if msg.epoch < done {
                return Err(Error::StaleMessage {
                    array: msg.array,
                    stamp: msg.epoch,
                    completed: done,
                });
            }
        }
        self.early.entry((msg.array, msg.epoch)).or_default().push(msg);
        Ok((Accept::Buffered, None))
    }

    /// Records one applied strip; returns the epoch if the round is now
    /// complete.
    pub fn record(&mut self, array: ArrayId) -> Option<u64> {
        let a = self.active.get_mut(&array)?;
        a.received += 1;
        self.finish_if_complete(array)
    }

    pub fn finish_if_complete(&mut self, array: ArrayId) -> Option<u64> {
        let a = self.active.get(&array)?;
        if a.received < a.expected {
            return None;
        }
        let epoch = a.epoch;
        self.active.remove(&array);
        self.completed.insert(array, epoch);
        Some(epoch)
    }

    /// Forgets completed-round history, after a ghost frame was rebuilt.
    pub fn reset(&mut self, array: ArrayId) {
        self.completed.remove(&array);
    }

    pub fn in_flight(&self) -> usize {
        self.active.len()
    }

    pub fn buffered(&self) -> usize {
        self.early.values().map(Vec::len).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::decompose;
    use crate::ir::Shape;
    use crate::wire::Reader;

    #[test]
    fn strip_sizes() {
        let ext = [8192, 8192];
        let (ys, xs) = send_block(ext, [1, 1], Direction::E);
        assert_eq!(((ys[1] - ys[0]) * (xs[1] - xs[0])), 8192);
        let (ys, xs) = send_block(ext, [1, 1], Direction::NE);
        assert_eq!((ys, xs), ([0, 1], [8191, 8192]));
        let (ys, xs) = ghost_block(ext, [1, 1], Direction::SW);
        assert_eq!((ys, xs), ([8192, 8193], [-1, 0]));
        assert!(strip_is_empty(Direction::N, [0, 1]));
        assert!(!strip_is_empty(Direction::E, [0, 1]));
    }

    #[test]
    fn neighbor_counts() {
        let d = decompose(Shape::d2(12, 12), 9, 1).unwrap();
        assert_eq!(expected_messages(&d, 4, [1, 1]), 8);
        let d = decompose(Shape::d2(8, 8), 4, 1).unwrap();
        assert_eq!(expected_messages(&d, 0, [1, 1]), 3);
        assert_eq!(expected_messages(&d, 0, [0, 1]), 1);
        let d = decompose(Shape::d2(8, 8), 1, 1).unwrap();
        assert_eq!(expected_messages(&d, 0, [1, 1]), 0);
    }

    #[test]
    fn pack_unpack_moves_the_border() {
        let d = decompose(Shape::d2(4, 8), 2, 1).unwrap();
        assert_eq!(d.grid, [1, 2]);
        let mut west = TileBuf::new([4, 4]);
        let mut east = TileBuf::new([4, 4]);
        west.ensure_depth([1, 1]).unwrap();
        east.ensure_depth([1, 1]).unwrap();
        west.set_interior(&(0..16).map(f64::from).collect::<Vec<_>>());
        let msg = pack(&west, &d, ArrayId(0), 0, Direction::E, 3);
        assert_eq!(msg.payload, vec![3.0, 7.0, 11.0, 15.0]);
        assert_eq!(destination(&d, &msg), Some(1));
        unpack(&mut east, &msg).unwrap();
        for y in 0..4 {
            assert_eq!(east.row(y, -1, 1)[0], (y * 4 + 3) as f64);
        }

        let mut w = Writer::new();
        msg.encode_into(&mut w);
        let bytes = w.into_vec();
        assert_eq!(bytes.len(), 1 + 4 + 4 + 1 + 8 + 4 + 32);
        let mut r = Reader::new(&bytes);
        assert_eq!(r.u8().unwrap(), KIND_HALO);
        assert_eq!(HaloMessage::decode_body(&mut r).unwrap(), msg);
    }

    #[test]
    fn wrong_sized_payload_is_rejected() {
        let mut t = TileBuf::new([4, 4]);
        t.ensure_depth([1, 1]).unwrap();
        let msg = HaloMessage {
            array: ArrayId(0),
            tile: [0, 0],
            direction: Direction::E,
            epoch: 1,
            payload: vec![0.0; 3],
        };
        assert!(unpack(&mut t, &msg).is_err());
    }

    fn msg(epoch: u64) -> HaloMessage {
        HaloMessage {
            array: ArrayId(1),
            tile: [0, 0],
            direction: Direction::S,
            epoch,
            payload: vec![],
        }
    }

    #[test]
    fn early_messages_wait_for_their_round() {
        let mut rt = RoundTracker::new();
        let (acc, _) = rt.classify(msg(2)).unwrap();
        assert_eq!(acc, Accept::Buffered);
        assert_eq!(rt.buffered(), 1);
        let early = rt.start(ArrayId(1), 2, 2);
        assert_eq!(early.len(), 1);
        assert_eq!(rt.record(ArrayId(1)), None);
        let (acc, m) = rt.classify(msg(2)).unwrap();
        assert_eq!(acc, Accept::Apply);
        assert!(m.is_some());
        assert_eq!(rt.record(ArrayId(1)), Some(2));
        assert!(matches!(
            rt.classify(msg(1)),
            Err(Error::StaleMessage { stamp: 1, completed: 2, .. })
        ));
        rt.reset(ArrayId(1));
        assert_eq!(rt.classify(msg(1)).unwrap().0, Accept::Buffered);
    }

    #[test]
    fn empty_round_completes_immediately() {
        let mut rt = RoundTracker::new();
        assert!(rt.start(ArrayId(0), 5, 0).is_empty());
        assert_eq!(rt.finish_if_complete(ArrayId(0)), Some(5));
        assert_eq!(rt.in_flight(), 0);
    }
}
