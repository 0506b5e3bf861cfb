use std::ops::{Add, Div, Mul, Neg, Sub};

use super::{ArrayId, AstExpr, BinaryOp, ShapeMap, SliceSpec, StencilAst, UnaryOp};
use crate::error::{Error, Result};

/// Right-hand side written against concrete arrays. Converting it with
/// [`Expr::parameterize`] replaces arrays by formal slots, numbered by
/// first appearance, so statements that differ only in bindings share one
/// AST.
#[derive(Debug, Clone)]
pub enum Expr {
    Const(f64),
    Ref(ArrayId, SliceSpec),
    Unary(UnaryOp, Box<Expr>),
    Binary(BinaryOp, Box<Expr>, Box<Expr>),
}

impl Expr {
    pub fn slice(array: ArrayId, spec: SliceSpec) -> Expr {
        Expr::Ref(array, spec)
    }

    /// `Expr::at(a, "1:-1, :-2")`; panics on unparsable notation.
    pub fn at(array: ArrayId, spec: &str) -> Expr {
        Expr::Ref(array, SliceSpec::parse(spec).expect("bad slice notation"))
    }

    pub fn sqrt(self) -> Expr {
        Expr::Unary(UnaryOp::Sqrt, Box::new(self))
    }

    pub fn abs(self) -> Expr {
        Expr::Unary(UnaryOp::Abs, Box::new(self))
    }

    pub fn arrays(&self) -> Vec<ArrayId> {
        let mut out = Vec::new();
        self.collect_arrays(&mut out);
        out
    }

    fn collect_arrays(&self, out: &mut Vec<ArrayId>) {
        match self {
            Expr::Const(_) => {}
            Expr::Ref(a, _) => {
                if !out.contains(a) {
                    out.push(*a);
                }
            }
            Expr::Unary(_, c) => c.collect_arrays(out),
            Expr::Binary(_, l, r) => {
                l.collect_arrays(out);
                r.collect_arrays(out);
            }
        }
    }

    /// Builds the parameterized AST and the slot bindings, normalizing
    /// every slice against the bound array's shape.
    pub fn parameterize(&self, shapes: &ShapeMap) -> Result<(StencilAst, Vec<ArrayId>)> {
        let bindings = self.arrays();
        let root = self.lower(&bindings, shapes)?;
        Ok((StencilAst::new(root)?, bindings))
    }

    fn lower(&self, bindings: &[ArrayId], shapes: &ShapeMap) -> Result<AstExpr> {
        Ok(match self {
            Expr::Const(v) => AstExpr::Const(*v),
            Expr::Ref(a, spec) => {
                let shape = shapes.get(a).ok_or(Error::UnknownArray(*a))?;
                let slot = bindings.iter().position(|b| b == a).unwrap() as u32;
                AstExpr::Slot {
                    slot,
                    region: spec.normalize(shape)?,
                }
            }
            Expr::Unary(op, c) => AstExpr::Unary(*op, Box::new(c.lower(bindings, shapes)?)),
            Expr::Binary(op, l, r) => AstExpr::Binary(
                *op,
                Box::new(l.lower(bindings, shapes)?),
                Box::new(r.lower(bindings, shapes)?),
            ),
        })
    }
}

impl From<f64> for Expr {
    fn from(v: f64) -> Expr {
        Expr::Const(v)
    }
}

macro_rules! binop {
    ($trait:ident, $method:ident, $op:expr) => {
        impl<R: Into<Expr>> $trait<R> for Expr {
            type Output = Expr;
            fn $method(self, rhs: R) -> Expr {
                Expr::Binary($op, Box::new(self), Box::new(rhs.into()))
            }
        }

        impl $trait<Expr> for f64 {
            type Output = Expr;
            fn $method(self, rhs: Expr) -> Expr {
                Expr::Binary($op, Box::new(Expr::Const(self)), Box::new(rhs))
            }
        }
    };
}

binop!(Add, add, BinaryOp::Add);
binop!(Sub, sub, BinaryOp::Sub);
binop!(Mul, mul, BinaryOp::Mul);
binop!(Div, div, BinaryOp::Div);

impl Neg for Expr {
    type Output = Expr;
    fn neg(self) -> Expr {
        Expr::Unary(UnaryOp::Neg, Box::new(self))
    }
}
