//! Program representation: parameterized ASTs, statements, and the
//! dependency DAG exchanged between client and server.

mod ast;
mod dag;
mod expr;
mod fusion;

use std::collections::BTreeMap;
use std::fmt;

pub use ast::{AstExpr, AstId, AstTable, BinaryOp, StencilAst, UnaryOp};
pub use dag::{Dag, DagNode, DepKind, Edge, NodeId, NodeKind, Statement};
pub use expr::Expr;
pub use fusion::fuse;

use crate::error::{Error, Result};
use crate::wire::{Reader, Wire, Writer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ArrayId(pub u32);

impl fmt::Display for ArrayId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "a{}", self.0)
    }
}

pub type ShapeMap = BTreeMap<ArrayId, Shape>;

/// Global array shape. Rank-1 arrays are stored as a single row, so
/// `dims()` is always two-dimensional.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    rank: u8,
    dims: [usize; 2],
}

impl Shape {
    pub fn new(extents: &[usize]) -> Result<Shape> {
        if extents.iter().any(|&e| e == 0) {
            return Err(Error::InvalidShape(format!(
                "extents must be positive, got {extents:?}"
            )));
        }
        if extents.iter().any(|&e| e > u32::MAX as usize) {
            return Err(Error::InvalidShape(format!("extent too large: {extents:?}")));
        }
        match *extents {
            [n] => Ok(Shape { rank: 1, dims: [1, n] }),
            [r, c] => Ok(Shape { rank: 2, dims: [r, c] }),
            _ => Err(Error::InvalidShape(format!(
                "rank must be 1 or 2, got {}",
                extents.len()
            ))),
        }
    }

    pub fn d2(rows: usize, cols: usize) -> Shape {
        Shape::new(&[rows, cols]).expect("invalid 2-D shape")
    }

    pub fn d1(len: usize) -> Shape {
        Shape::new(&[len]).expect("invalid 1-D shape")
    }

    pub fn rank(&self) -> usize {
        self.rank as usize
    }

    pub fn dims(&self) -> [usize; 2] {
        self.dims
    }

    /// Extents as the user wrote them (length = rank).
    pub fn extents(&self) -> Vec<usize> {
        if self.rank == 1 {
            vec![self.dims[1]]
        } else {
            self.dims.to_vec()
        }
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn full_region(&self) -> Region {
        Region::new([0, 0], self.dims)
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.rank == 1 {
            write!(f, "({},)", self.dims[1])
        } else {
            write!(f, "({},{})", self.dims[0], self.dims[1])
        }
    }
}

impl Wire for Shape {
    fn encode(&self, w: &mut Writer) {
        w.u8(self.rank);
        for e in self.extents() {
            w.u32(e as u32);
        }
    }

    fn decode(r: &mut Reader<'_>) -> Result<Self> {
        let rank = r.u8()?;
        if !(1..=2).contains(&rank) {
            return Err(Error::malformed(format!("bad rank {rank}")));
        }
        let mut ext = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            ext.push(r.u32()? as usize);
        }
        Shape::new(&ext).map_err(|e| Error::malformed(e.to_string()))
    }
}

/// One dimension of a user-written slice, Python-style: missing bounds
/// default to the array edge and negative bounds count from the end.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct DimSlice {
    pub start: Option<i64>,
    pub stop: Option<i64>,
    pub step: i64,
}

impl DimSlice {
    pub fn full() -> Self {
        Self::range(None, None)
    }

    pub fn range(start: Option<i64>, stop: Option<i64>) -> Self {
        DimSlice {
            start,
            stop,
            step: 1,
        }
    }

    /// A single index `i`, kept as a length-1 dimension.
    pub fn index(i: i64) -> Self {
        let stop = if i == -1 { None } else { Some(i + 1) };
        DimSlice::range(Some(i), stop)
    }

    fn normalize(&self, extent: usize) -> Result<(usize, usize)> {
        if self.step != 1 {
            return Err(Error::StridedSlice(self.step));
        }
        let ext = extent as i64;
        let fix = |v: i64| if v < 0 { v + ext } else { v };
        let start = self.start.map(fix).unwrap_or(0);
        let stop = self.stop.map(fix).unwrap_or(ext);
        if start < 0 || stop > ext || start >= stop {
            return Err(Error::InvalidSlice(format!(
                "{self} is empty or out of bounds for extent {extent}"
            )));
        }
        Ok((start as usize, stop as usize))
    }
}

impl fmt::Display for DimSlice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(s) = self.start {
            write!(f, "{s}")?;
        }
        write!(f, ":")?;
        if let Some(s) = self.stop {
            write!(f, "{s}")?;
        }
        if self.step != 1 {
            write!(f, ":{}", self.step)?;
        }
        Ok(())
    }
}

/// A user-written slice over a rank-1 or rank-2 array.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SliceSpec {
    pub dims: Vec<DimSlice>,
}

impl SliceSpec {
    pub fn new(dims: Vec<DimSlice>) -> Self {
        SliceSpec { dims }
    }

    pub fn full(rank: usize) -> Self {
        SliceSpec {
            dims: vec![DimSlice::full(); rank],
        }
    }

    /// Parses numpy-style notation such as `"1:-1, :-2"` or `"0, :"`.
    pub fn parse(text: &str) -> Result<SliceSpec> {
        let bad = || Error::InvalidSlice(format!("cannot parse slice {text:?}"));
        let num = |s: &str| -> Result<Option<i64>> {
            let s = s.trim();
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse::<i64>().map(Some).map_err(|_| bad())
            }
        };
        let mut dims = Vec::new();
        for part in text.split(',') {
            let fields: Vec<&str> = part.split(':').collect();
            let d = match fields.as_slice() {
                [i] => DimSlice::index(num(i)?.ok_or_else(bad)?),
                [a, b] => DimSlice::range(num(a)?, num(b)?),
                [a, b, s] => DimSlice {
                    start: num(a)?,
                    stop: num(b)?,
                    step: num(s)?.unwrap_or(1),
                },
                _ => return Err(bad()),
            };
            dims.push(d);
        }
        Ok(SliceSpec { dims })
    }

    /// Resolves the slice against a concrete shape.
    pub fn normalize(&self, shape: &Shape) -> Result<Region> {
        if self.dims.len() != shape.rank() {
            return Err(Error::InvalidSlice(format!(
                "slice has {} dims but array has rank {}",
                self.dims.len(),
                shape.rank()
            )));
        }
        let dims = shape.dims();
        if shape.rank() == 1 {
            let (a, b) = self.dims[0].normalize(dims[1])?;
            Ok(Region::new([0, a], [1, b]))
        } else {
            let (a0, b0) = self.dims[0].normalize(dims[0])?;
            let (a1, b1) = self.dims[1].normalize(dims[1])?;
            Ok(Region::new([a0, a1], [b0, b1]))
        }
    }
}

impl fmt::Display for SliceSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for (i, d) in self.dims.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{d}")?;
        }
        write!(f, "]")
    }
}

/// A normalized, non-empty rectangular index range `[start, stop)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Region {
    pub start: [usize; 2],
    pub stop: [usize; 2],
}

impl Region {
    pub fn new(start: [usize; 2], stop: [usize; 2]) -> Region {
        Region { start, stop }
    }

    pub fn extent(&self) -> [usize; 2] {
        [
            self.stop[0].saturating_sub(self.start[0]),
            self.stop[1].saturating_sub(self.start[1]),
        ]
    }

    pub fn len(&self) -> usize {
        let e = self.extent();
        e[0] * e[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_valid_for(&self, shape: &Shape) -> bool {
        let d = shape.dims();
        (0..2).all(|k| self.start[k] < self.stop[k] && self.stop[k] <= d[k])
    }

    pub fn intersect(&self, other: &Region) -> Option<Region> {
        let start = [
            self.start[0].max(other.start[0]),
            self.start[1].max(other.start[1]),
        ];
        let stop = [
            self.stop[0].min(other.stop[0]),
            self.stop[1].min(other.stop[1]),
        ];
        if start[0] < stop[0] && start[1] < stop[1] {
            Some(Region { start, stop })
        } else {
            None
        }
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[{}:{},{}:{}]",
            self.start[0], self.stop[0], self.start[1], self.stop[1]
        )
    }
}

impl Wire for Region {
    fn encode(&self, w: &mut Writer) {
        w.u32(self.start[0] as u32)
            .u32(self.stop[0] as u32)
            .u32(self.start[1] as u32)
            .u32(self.stop[1] as u32);
    }

    fn decode(r: &mut Reader<'_>) -> Result<Self> {
        let a0 = r.u32()? as usize;
        let b0 = r.u32()? as usize;
        let a1 = r.u32()? as usize;
        let b1 = r.u32()? as usize;
        Ok(Region::new([a0, a1], [b0, b1]))
    }
}

impl Wire for SliceSpec {
    fn encode(&self, w: &mut Writer) {
        w.u8(self.dims.len() as u8);
        for d in &self.dims {
            let flags = d.start.is_some() as u8 | ((d.stop.is_some() as u8) << 1);
            w.u8(flags)
                .i64(d.start.unwrap_or(0))
                .i64(d.stop.unwrap_or(0))
                .i64(d.step);
        }
    }

    fn decode(r: &mut Reader<'_>) -> Result<Self> {
        let rank = r.u8()?;
        if !(1..=2).contains(&rank) {
            return Err(Error::malformed(format!("bad slice rank {rank}")));
        }
        let mut dims = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            let flags = r.u8()?;
            let start = r.i64()?;
            let stop = r.i64()?;
            let step = r.i64()?;
            dims.push(DimSlice {
                start: (flags & 1 != 0).then_some(start),
                stop: (flags & 2 != 0).then_some(stop),
                step,
            });
        }
        Ok(SliceSpec { dims })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn negative_bounds_normalize_from_the_end() {
        let s = SliceSpec::parse(":-2, 1:-1").unwrap();
        let r = s.normalize(&Shape::d2(64, 64)).unwrap();
        assert_eq!(r, Region::new([0, 1], [62, 63]));
    }

    #[test]
    fn index_keeps_a_unit_dimension() {
        let shape = Shape::d2(8, 8);
        let last = SliceSpec::parse("-1, :").unwrap().normalize(&shape).unwrap();
        assert_eq!(last, Region::new([7, 0], [8, 8]));
        let first_col = SliceSpec::parse(":, 0").unwrap().normalize(&shape).unwrap();
        assert_eq!(first_col.extent(), [8, 1]);
    }

    #[test]
    fn strided_and_empty_slices_are_rejected() {
        let shape = Shape::d2(8, 8);
        assert!(matches!(
            SliceSpec::parse("::2, :").unwrap().normalize(&shape),
            Err(Error::StridedSlice(2))
        ));
        assert!(matches!(
            SliceSpec::parse("3:3, :").unwrap().normalize(&shape),
            Err(Error::InvalidSlice(_))
        ));
        assert!(matches!(
            SliceSpec::parse("0:9, :").unwrap().normalize(&shape),
            Err(Error::InvalidSlice(_))
        ));
    }

    #[test]
    fn rank_one_shapes_are_single_rows() {
        let s = Shape::new(&[64]).unwrap();
        assert_eq!(s.dims(), [1, 64]);
        let r = SliceSpec::parse("2:").unwrap().normalize(&s).unwrap();
        assert_eq!(r, Region::new([0, 2], [1, 64]));
        assert!(Shape::new(&[0, 4]).is_err());
        assert!(Shape::new(&[2, 2, 2]).is_err());
    }
}
