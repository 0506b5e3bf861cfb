//! Tiling of global arrays, per-tile storage with a ghost frame, and the
//! checkpoint form of a tile.

use crate::error::{Error, Result};
use crate::ir::{ArrayId, Region, Shape};
use crate::wire::{Reader, Writer};

/// Tile layout of one array. The tile count is fixed when the job starts
/// (`odf × initial workers`); only the tile→worker map changes later.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Decomposition {
    pub shape: Shape,
    pub grid: [usize; 2],
    pub tile_extent: [usize; 2],
}

/// Factor pair `(r, c)` of `tiles` with the smallest `|r - c|`, `r <= c`.
pub fn tile_grid(shape: &Shape, tiles: usize) -> [usize; 2] {
    if shape.rank() == 1 {
        return [1, tiles];
    }
    let mut best = [1, tiles];
    for r in 1..=tiles {
        if r * r > tiles {
            break;
        }
        if tiles % r == 0 {
            best = [r, tiles / r];
        }
    }
    best
}

pub fn decompose(shape: Shape, workers: usize, odf: usize) -> Result<Decomposition> {
    if workers == 0 || odf == 0 {
        return Err(Error::InvalidShape(format!(
            "workers and odf must be positive (got {workers}, {odf})"
        )));
    }
    decompose_tiles(shape, workers * odf)
}

pub fn decompose_tiles(shape: Shape, tiles: usize) -> Result<Decomposition> {
    let grid = tile_grid(&shape, tiles);
    let dims = shape.dims();
    for k in 0..2 {
        if dims[k] % grid[k] != 0 {
            return Err(Error::IndivisibleShape {
                extent: dims[k],
                tiles: grid[k],
            });
        }
    }
    Ok(Decomposition {
        shape,
        grid,
        tile_extent: [dims[0] / grid[0], dims[1] / grid[1]],
    })
}

/// Block mapping in row-major tile order; the first `tiles % workers`
/// workers own one extra tile.
pub fn block_owner(tile: usize, tiles: usize, workers: usize) -> usize {
    let base = tiles / workers;
    let extra = tiles % workers;
    let cut = extra * (base + 1);
    if tile < cut {
        tile / (base + 1)
    } else {
        extra + (tile - cut) / base.max(1)
    }
}

pub fn owned_tiles(worker: usize, tiles: usize, workers: usize) -> Vec<usize> {
    (0..tiles).filter(|&t| block_owner(t, tiles, workers) == worker).collect()
}

impl Decomposition {
    pub fn tile_count(&self) -> usize {
        self.grid[0] * self.grid[1]
    }

    pub fn coords(&self, tile: usize) -> [usize; 2] {
        [tile / self.grid[1], tile % self.grid[1]]
    }

    pub fn index(&self, coords: [usize; 2]) -> usize {
        coords[0] * self.grid[1] + coords[1]
    }

    /// Global region covered by a tile's interior.
    pub fn tile_region(&self, tile: usize) -> Region {
        let [ty, tx] = self.coords(tile);
        let [h, w] = self.tile_extent;
        Region::new([ty * h, tx * w], [(ty + 1) * h, (tx + 1) * w])
    }

    pub fn neighbor(&self, tile: usize, delta: [isize; 2]) -> Option<usize> {
        let [ty, tx] = self.coords(tile);
        let ny = ty as isize + delta[0];
        let nx = tx as isize + delta[1];
        if ny < 0 || nx < 0 || ny >= self.grid[0] as isize || nx >= self.grid[1] as isize {
            return None;
        }
        Some(self.index([ny as usize, nx as usize]))
    }

    pub fn owner(&self, tile: usize, workers: usize) -> usize {
        block_owner(tile, self.tile_count(), workers)
    }

    pub fn check_depth(&self, depth: [usize; 2]) -> Result<()> {
        for k in 0..2 {
            if depth[k] > 0 && depth[k] >= self.tile_extent[k] {
                return Err(Error::OffsetExceedsTileWidth {
                    depth,
                    tile: self.tile_extent,
                });
            }
        }
        Ok(())
    }
}

/// One array's tile: interior plus a ghost frame of `depth` cells per
/// side, row-major with stride `extent[1] + 2 * depth[1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TileBuf {
    pub extent: [usize; 2],
    pub depth: [usize; 2],
    data: Vec<f64>,
}

impl TileBuf {
    pub fn new(extent: [usize; 2]) -> TileBuf {
        TileBuf {
            extent,
            depth: [0, 0],
            data: vec![0.0; extent[0] * extent[1]],
        }
    }

    fn stride(&self) -> usize {
        self.extent[1] + 2 * self.depth[1]
    }

    /// Index of local `(y, x)`; negative or past-the-end values address
    /// the ghost frame.
    #[inline]
    pub fn index(&self, y: isize, x: isize) -> usize {
        let yy = (y + self.depth[0] as isize) as usize;
        let xx = (x + self.depth[1] as isize) as usize;
        yy * self.stride() + xx
    }

    #[inline]
    pub fn row(&self, y: isize, x: isize, len: usize) -> &[f64] {
        let i = self.index(y, x);
        &self.data[i..i + len]
    }

    #[inline]
    pub fn row_mut(&mut self, y: isize, x: isize, len: usize) -> &mut [f64] {
        let i = self.index(y, x);
        &mut self.data[i..i + len]
    }

    /// Grows the frame to `depth`, keeping the interior. Returns whether
    /// the frame changed.
    pub fn ensure_depth(&mut self, depth: [usize; 2]) -> Result<bool> {
        let depth = [self.depth[0].max(depth[0]), self.depth[1].max(depth[1])];
        for k in 0..2 {
            if depth[k] > 0 && depth[k] >= self.extent[k] {
                return Err(Error::OffsetExceedsTileWidth {
                    depth,
                    tile: self.extent,
                });
            }
        }
        if depth == self.depth {
            return Ok(false);
        }
        let interior = self.interior();
        self.depth = depth;
        self.data = vec![0.0; (self.extent[0] + 2 * depth[0]) * self.stride()];
        self.set_interior(&interior);
        Ok(true)
    }

    pub fn interior(&self) -> Vec<f64> {
        self.read_block([0, self.extent[0] as isize], [0, self.extent[1] as isize])
    }

    pub fn set_interior(&mut self, values: &[f64]) {
        let [h, w] = self.extent;
        assert_eq!(values.len(), h * w);
        self.write_block([0, h as isize], [0, w as isize], values);
    }

    /// Row-major copy of local rows `ys` × cols `xs` (half-open).
    pub fn read_block(&self, ys: [isize; 2], xs: [isize; 2]) -> Vec<f64> {
        let w = (xs[1] - xs[0]) as usize;
        let mut out = Vec::with_capacity(w * (ys[1] - ys[0]).max(0) as usize);
        for y in ys[0]..ys[1] {
            out.extend_from_slice(self.row(y, xs[0], w));
        }
        out
    }

    pub fn write_block(&mut self, ys: [isize; 2], xs: [isize; 2], values: &[f64]) {
        let w = (xs[1] - xs[0]) as usize;
        for (k, y) in (ys[0]..ys[1]).enumerate() {
            self.row_mut(y, xs[0], w).copy_from_slice(&values[k * w..(k + 1) * w]);
        }
    }

    pub fn interior_bytes(&self) -> usize {
        self.extent[0] * self.extent[1] * 8
    }
}

/// Serialized tile: header then the interior as little-endian f64.
#[derive(Debug, Clone, PartialEq)]
pub struct TileCheckpoint {
    pub array: ArrayId,
    pub coords: [u16; 2],
    pub extent: [usize; 2],
    pub depth: [usize; 2],
    pub local_epoch: u64,
    pub interior: Vec<f64>,
}

impl TileCheckpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::with_capacity(40 + self.interior.len() * 8);
        w.u32(self.array.0)
            .u16(self.coords[0])
            .u16(self.coords[1])
            .u32(self.extent[0] as u32)
            .u32(self.extent[1] as u32)
            .u32(self.depth[0] as u32)
            .u32(self.depth[1] as u32)
            .u64(self.local_epoch)
            .f64s(&self.interior);
        w.into_vec()
    }

    pub fn decode(bytes: &[u8]) -> Result<TileCheckpoint> {
        let mut r = Reader::new(bytes);
        let array = ArrayId(r.u32()?);
        let coords = [r.u16()?, r.u16()?];
        let extent = [r.u32()? as usize, r.u32()? as usize];
        let depth = [r.u32()? as usize, r.u32()? as usize];
        let local_epoch = r.u64()?;
        let n = extent[0]
            .checked_mul(extent[1])
            .ok_or_else(|| Error::malformed("tile extent overflow"))?;
        let interior = r.f64s(n)?;
        r.finish()?;
        Ok(TileCheckpoint {
            array,
            coords,
            extent,
            depth,
            local_epoch,
            interior,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_grids() {
        let d = decompose(Shape::d2(16384, 16384), 4, 1).unwrap();
        assert_eq!(d.grid, [2, 2]);
        assert_eq!(d.tile_extent, [8192, 8192]);
        let one = decompose(Shape::d2(10, 6), 1, 1).unwrap();
        assert_eq!(one.grid, [1, 1]);
        assert_eq!(one.neighbor(0, [0, 1]), None);
    }

    #[test]
    fn eight_tiles_prefer_two_by_four() {
        // pairs of 8: (1,8) diff 7, (2,4) diff 2
        let d = decompose(Shape::d2(64, 64), 2, 4).unwrap();
        assert_eq!(d.grid, [2, 4]);
        assert_eq!(d.tile_extent, [32, 16]);
    }

    #[test]
    fn rank_one_tiles_along_the_row() {
        let d = decompose(Shape::d1(64), 2, 2).unwrap();
        assert_eq!(d.grid, [1, 4]);
        assert_eq!(d.tile_extent, [1, 16]);
    }

    #[test]
    fn indivisible_shape_is_rejected() {
        assert!(matches!(
            decompose(Shape::d2(12, 10), 3, 1),
            Err(Error::IndivisibleShape { extent: 10, tiles: 3 })
        ));
        assert!(decompose(Shape::d2(9, 8), 4, 1).is_err());
    }

    #[test]
    fn block_map_gives_extras_to_low_ranks() {
        let owners: Vec<usize> = (0..8).map(|t| block_owner(t, 8, 3)).collect();
        assert_eq!(owners, vec![0, 0, 0, 1, 1, 1, 2, 2]);
        let owners: Vec<usize> = (0..4).map(|t| block_owner(t, 4, 8)).collect();
        assert_eq!(owners, vec![0, 1, 2, 3]);
        assert_eq!(owned_tiles(1, 16, 4), vec![4, 5, 6, 7]);
    }

    #[test]
    fn depth_growth_keeps_interior() {
        let mut t = TileBuf::new([4, 5]);
        let vals: Vec<f64> = (0..20).map(f64::from).collect();
        t.set_interior(&vals);
        assert!(t.ensure_depth([1, 1]).unwrap());
        assert!(!t.ensure_depth([1, 0]).unwrap());
        assert_eq!(t.interior(), vals);
        assert_eq!(t.row(-1, -1, 7), &[0.0; 7]);
        assert_eq!(t.row(0, 0, 5), &vals[..5]);
        assert!(matches!(
            TileBuf::new([2, 8]).ensure_depth([2, 2]),
            Err(Error::OffsetExceedsTileWidth { depth: [2, 2], tile: [2, 8] })
        ));
        assert!(!TileBuf::new([2, 8]).ensure_depth([0, 0]).unwrap());
    }

    #[test]
    fn checkpoint_roundtrip() {
        let c = TileCheckpoint {
            array: ArrayId(3),
            coords: [1, 2],
            extent: [2, 3],
            depth: [1, 1],
            local_epoch: 42,
            interior: vec![1.5, -0.0, f64::NAN, 4.0, 5.0, 6.0],
        };
        let bytes = c.encode();
        assert_eq!(bytes.len(), 32 + 48);
        let back = TileCheckpoint::decode(&bytes).unwrap();
        assert_eq!(back.interior[2].to_bits(), f64::NAN.to_bits());
        assert_eq!(back.encode(), bytes);
        assert!(TileCheckpoint::decode(&bytes[..bytes.len() - 1]).is_err());
    }
}
