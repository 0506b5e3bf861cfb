use std::collections::HashMap;
use std::fmt;

use sha2::{Digest, Sha256};

use super::Region;
use crate::error::{Error, Result};
use crate::wire::{Reader, Wire, Writer};

const MAX_AST_DEPTH: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum UnaryOp {
    Neg = 0,
    Abs = 1,
    Sqrt = 2,
}

impl UnaryOp {
    pub fn from_code(c: u8) -> Result<UnaryOp> {
        match c {
            0 => Ok(UnaryOp::Neg),
            1 => Ok(UnaryOp::Abs),
            2 => Ok(UnaryOp::Sqrt),
            _ => Err(Error::UnsupportedOp(c)),
        }
    }

    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            UnaryOp::Neg => -x,
            UnaryOp::Abs => x.abs(),
            UnaryOp::Sqrt => x.sqrt(),
        }
    }

    fn name(self) -> &'static str {
        match self {
            UnaryOp::Neg => "neg",
            UnaryOp::Abs => "abs",
            UnaryOp::Sqrt => "sqrt",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum BinaryOp {
    Add = 0,
    Sub = 1,
    Mul = 2,
    Div = 3,
}

impl BinaryOp {
    pub fn from_code(c: u8) -> Result<BinaryOp> {
        match c {
            0 => Ok(BinaryOp::Add),
            1 => Ok(BinaryOp::Sub),
            2 => Ok(BinaryOp::Mul),
            3 => Ok(BinaryOp::Div),
            _ => Err(Error::UnsupportedOp(c)),
        }
    }

    #[inline]
    pub fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            BinaryOp::Add => a + b,
            BinaryOp::Sub => a - b,
            BinaryOp::Mul => a * b,
            BinaryOp::Div => a / b,
        }
    }

    fn symbol(self) -> &'static str {
        match self {
            BinaryOp::Add => "+",
            BinaryOp::Sub => "-",
            BinaryOp::Mul => "*",
            BinaryOp::Div => "/",
        }
    }
}

/// Expression tree over formal array slots.
#[derive(Debug, Clone)]
pub enum AstExpr {
    Const(f64),
    Slot { slot: u32, region: Region },
    Unary(UnaryOp, Box<AstExpr>),
    Binary(BinaryOp, Box<AstExpr>, Box<AstExpr>),
}

// Constants compare by bit pattern so that equality agrees with the hash.
impl PartialEq for AstExpr {
    fn eq(&self, other: &Self) -> bool {
        use AstExpr::*;
        match (self, other) {
            (Const(a), Const(b)) => a.to_bits() == b.to_bits(),
            (Slot { slot: s1, region: r1 }, Slot { slot: s2, region: r2 }) => s1 == s2 && r1 == r2,
            (Unary(o1, c1), Unary(o2, c2)) => o1 == o2 && c1 == c2,
            (Binary(o1, l1, r1), Binary(o2, l2, r2)) => o1 == o2 && l1 == l2 && r1 == r2,
            _ => false,
        }
    }
}

impl AstExpr {
    pub fn visit_slots(&self, f: &mut impl FnMut(u32, &Region)) {
        match self {
            AstExpr::Const(_) => {}
            AstExpr::Slot { slot, region } => f(*slot, region),
            AstExpr::Unary(_, c) => c.visit_slots(f),
            AstExpr::Binary(_, l, r) => {
                l.visit_slots(f);
                r.visit_slots(f);
            }
        }
    }

    fn encode_into(&self, w: &mut Writer) {
        match self {
            AstExpr::Const(v) => {
                w.u8(0).f64(*v);
            }
            AstExpr::Slot { slot, region } => {
                w.u8(1).u32(*slot).put(region);
            }
            AstExpr::Unary(op, c) => {
                w.u8(2).u8(*op as u8);
                c.encode_into(w);
            }
            AstExpr::Binary(op, l, r) => {
                w.u8(3).u8(*op as u8);
                l.encode_into(w);
                r.encode_into(w);
            }
        }
    }

    fn decode_from(r: &mut Reader<'_>, depth: usize) -> Result<AstExpr> {
        if depth > MAX_AST_DEPTH {
            return Err(Error::malformed("expression nesting too deep"));
        }
        Ok(match r.u8()? {
            0 => AstExpr::Const(r.f64()?),
            1 => {
                let slot = r.u32()?;
                AstExpr::Slot {
                    slot,
                    region: r.get()?,
                }
            }
            2 => {
                let op = UnaryOp::from_code(r.u8()?)?;
                AstExpr::Unary(op, Box::new(Self::decode_from(r, depth + 1)?))
            }
            3 => {
                let op = BinaryOp::from_code(r.u8()?)?;
                let lhs = Self::decode_from(r, depth + 1)?;
                let rhs = Self::decode_from(r, depth + 1)?;
                AstExpr::Binary(op, Box::new(lhs), Box::new(rhs))
            }
            t => return Err(Error::malformed(format!("unknown expression tag {t}"))),
        })
    }

    /// Evaluates the tree for one output element; `load(slot, region)`
    /// returns the slot's value at that element.
    pub fn eval(&self, load: &mut impl FnMut(u32, &Region) -> f64) -> f64 {
        match self {
            AstExpr::Const(v) => *v,
            AstExpr::Slot { slot, region } => load(*slot, region),
            AstExpr::Unary(op, c) => op.apply(c.eval(load)),
            AstExpr::Binary(op, l, r) => {
                let a = l.eval(load);
                let b = r.eval(load);
                op.apply(a, b)
            }
        }
    }
}

impl fmt::Display for AstExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AstExpr::Const(v) => write!(f, "{v:?}"),
            AstExpr::Slot { slot, region } => write!(f, "s{slot}{region}"),
            AstExpr::Unary(op, c) => write!(f, "{}({c})", op.name()),
            AstExpr::Binary(op, l, r) => write!(f, "({l} {} {r})", op.symbol()),
        }
    }
}

/// A parameterized AST with its slot count and structural digest.
#[derive(Debug, Clone, PartialEq)]
pub struct StencilAst {
    root: AstExpr,
    arity: u32,
    hash: u64,
}

impl StencilAst {
    pub fn new(root: AstExpr) -> Result<StencilAst> {
        let arity = check_dense_slots(&root)?;
        let hash = structural_hash(&root, arity);
        Ok(StencilAst { root, arity, hash })
    }

    pub fn root(&self) -> &AstExpr {
        &self.root
    }

    pub fn arity(&self) -> usize {
        self.arity as usize
    }

    pub fn structural_hash(&self) -> u64 {
        self.hash
    }

    /// Recomputes the digest and slot numbering; used when an AST arrives
    /// over the wire.
    pub fn verify(&self) -> Result<()> {
        let arity = check_dense_slots(&self.root)
            .map_err(|e| Error::MalformedDag(format!("ast: {e}")))?;
        if arity != self.arity {
            return Err(Error::MalformedDag(format!(
                "ast arity {} but slots imply {arity}",
                self.arity
            )));
        }
        if structural_hash(&self.root, arity) != self.hash {
            return Err(Error::MalformedDag("ast hash mismatch".into()));
        }
        Ok(())
    }
}

fn check_dense_slots(root: &AstExpr) -> Result<u32> {
    let mut seen = Vec::<bool>::new();
    let mut too_large = false;
    root.visit_slots(&mut |s, _| {
        let s = s as usize;
        if s >= 1 << 16 {
            too_large = true;
            return;
        }
        if seen.len() <= s {
            seen.resize(s + 1, false);
        }
        seen[s] = true;
    });
    if too_large {
        return Err(Error::malformed("slot index too large"));
    }
    if let Some(gap) = seen.iter().position(|x| !x) {
        return Err(Error::malformed(format!("slot {gap} is never referenced")));
    }
    Ok(seen.len() as u32)
}

fn structural_hash(root: &AstExpr, arity: u32) -> u64 {
    let mut w = Writer::new();
    w.u32(arity);
    root.encode_into(&mut w);
    let digest = Sha256::digest(w.as_slice());
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

impl fmt::Display for StencilAst {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.root)
    }
}

impl Wire for StencilAst {
    fn encode(&self, w: &mut Writer) {
        w.u32(self.arity).u64(self.hash);
        self.root.encode_into(w);
    }

    fn decode(r: &mut Reader<'_>) -> Result<Self> {
        let arity = r.u32()?;
        let hash = r.u64()?;
        let root = AstExpr::decode_from(r, 0)?;
        Ok(StencilAst { root, arity, hash })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct AstId(pub u32);

impl fmt::Display for AstId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ast{}", self.0)
    }
}

/// ASTs deduplicated by structural hash.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AstTable {
    asts: Vec<StencilAst>,
    by_hash: HashMap<u64, AstId>,
}

impl AstTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, ast: StencilAst) -> AstId {
        if let Some(&id) = self.by_hash.get(&ast.hash) {
            if self.asts[id.0 as usize].root == ast.root {
                return id;
            }
        }
        let id = AstId(self.asts.len() as u32);
        self.by_hash.entry(ast.hash).or_insert(id);
        self.asts.push(ast);
        id
    }

    pub fn get(&self, id: AstId) -> Option<&StencilAst> {
        self.asts.get(id.0 as usize)
    }

    pub fn len(&self) -> usize {
        self.asts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.asts.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (AstId, &StencilAst)> {
        self.asts
            .iter()
            .enumerate()
            .map(|(i, a)| (AstId(i as u32), a))
    }
}

impl Wire for AstTable {
    fn encode(&self, w: &mut Writer) {
        w.u32(self.asts.len() as u32);
        for a in &self.asts {
            a.encode(w);
        }
    }

    fn decode(r: &mut Reader<'_>) -> Result<Self> {
        let n = r.count(13)?;
        let mut t = AstTable::new();
        for i in 0..n {
            let a = StencilAst::decode(r)?;
            t.by_hash.entry(a.hash).or_insert(AstId(i as u32));
            t.asts.push(a);
        }
        Ok(t)
    }
}
