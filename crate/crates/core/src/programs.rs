//! Bundled example programs, written against [`Builder`] so the same code
//! drives a local DAG, a remote session, and the oracle.

use crate::error::{Error, Result};
use crate::ir::{ArrayId, Dag, Expr, Shape, ShapeMap, SliceSpec};
use crate::oracle::CavityParams;

pub trait Builder {
    fn create(&mut self, shape: Shape) -> Result<ArrayId>;
    fn assign(&mut self, out: ArrayId, slice: &SliceSpec, expr: Expr) -> Result<()>;

    /// `assign` with slice notation such as `"1:-1, 1:-1"`.
    fn set(&mut self, out: ArrayId, slice: &str, expr: impl Into<Expr>) -> Result<()>
    where
        Self: Sized,
    {
        self.assign(out, &SliceSpec::parse(slice)?, expr.into())
    }
}

/// Builds a single DAG locally. Array ids are handed out densely from 0.
#[derive(Debug, Default, Clone)]
pub struct LocalProgram {
    pub shapes: ShapeMap,
    pub dag: Dag,
}

impl LocalProgram {
    pub fn new() -> LocalProgram {
        LocalProgram::default()
    }
}

impl Builder for LocalProgram {
    fn create(&mut self, shape: Shape) -> Result<ArrayId> {
        let id = ArrayId(self.shapes.len() as u32);
        self.shapes.insert(id, shape);
        self.dag.add_create(id, shape);
        Ok(id)
    }

    fn assign(&mut self, out: ArrayId, slice: &SliceSpec, expr: Expr) -> Result<()> {
        let st = self.dag.build_statement(out, slice, &expr, &self.shapes)?;
        self.dag.add_statement(st);
        Ok(())
    }
}

fn at(a: ArrayId, s: &str) -> Expr {
    Expr::at(a, s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Laplace {
    pub u1: ArrayId,
    pub u2: ArrayId,
}

impl Laplace {
    /// Creates both arrays and pins all four edges of each to 1.
    pub fn setup(b: &mut impl Builder, n: usize) -> Result<Laplace> {
        let u1 = b.create(Shape::new(&[n, n])?)?;
        let u2 = b.create(Shape::new(&[n, n])?)?;
        for u in [u1, u2] {
            for edge in ["0, :", "-1, :", ":, 0", ":, -1"] {
                b.set(u, edge, 1.0)?;
            }
        }
        Ok(Laplace { u1, u2 })
    }

    /// One relaxation sweep into `u2`, then the handles swap.
    pub fn step(&mut self, b: &mut impl Builder) -> Result<()> {
        let u1 = self.u1;
        let rhs = 0.25 * (at(u1, ":-2, 1:-1") + at(u1, "2:, 1:-1") + at(u1, "1:-1, :-2") + at(u1, "1:-1, 2:"));
        b.set(self.u2, "1:-1, 1:-1", rhs)?;
        std::mem::swap(&mut self.u1, &mut self.u2);
        Ok(())
    }
}

/// Lid-driven cavity flow, double-buffered so that no statement reads its
/// own output. `t` is scratch for the pressure boundary copies.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cavity {
    pub u: ArrayId,
    pub v: ArrayId,
    pub p: ArrayId,
    un: ArrayId,
    vn: ArrayId,
    pn: ArrayId,
    b: ArrayId,
    t: ArrayId,
    n: usize,
    prm: CavityParams,
}

impl Cavity {
    pub fn setup(bld: &mut impl Builder, n: usize, prm: CavityParams) -> Result<Cavity> {
        if n < 3 {
            return Err(Error::InvalidShape(format!("cavity needs n >= 3, got {n}")));
        }
        let shape = Shape::new(&[n, n])?;
        let mut ids = [ArrayId(0); 8];
        for id in ids.iter_mut() {
            *id = bld.create(shape)?;
        }
        let [u, v, p, un, vn, pn, b, t] = ids;
        Ok(Cavity { u, v, p, un, vn, pn, b, t, n, prm })
    }

    pub fn step(&self, bld: &mut impl Builder) -> Result<()> {
        let Cavity { u, v, p, un, vn, pn, b, t, n, prm } = *self;
        let CavityParams { nit, rho, nu, dt } = prm;
        let d = 2.0 / (n as f64 - 1.0);
        let (dx, dy) = (d, d);
        let (dx2, dy2) = (dx * dx, dy * dy);
        const C: &str = "1:-1, 1:-1";

        bld.set(un, ":, :", at(u, ":, :"))?;
        bld.set(vn, ":, :", at(v, ":, :"))?;

        let ux = || (at(un, "1:-1, 2:") - at(un, "1:-1, :-2")) / (2.0 * dx);
        let vy = || (at(vn, "2:, 1:-1") - at(vn, ":-2, 1:-1")) / (2.0 * dy);
        let uy = (at(un, "2:, 1:-1") - at(un, ":-2, 1:-1")) / (2.0 * dy);
        let vx = at(vn, "1:-1, 2:") - at(vn, "1:-1, :-2");
        let rhs_b = rho * ((1.0 / dt) * (ux() + vy()) - ux() * ux() - 2.0 * (uy * vx / (2.0 * dx)) - vy() * vy());
        bld.set(b, C, rhs_b)?;

        let denom = 2.0 * (dx2 + dy2);
        let c = dx2 * dy2 / denom;
        for _ in 0..nit {
            bld.set(pn, ":, :", at(p, ":, :"))?;
            let rhs_p = ((at(pn, "1:-1, 2:") + at(pn, "1:-1, :-2")) * dy2 + (at(pn, "2:, 1:-1") + at(pn, ":-2, 1:-1")) * dx2)
                / denom
                - c * at(b, C);
            bld.set(p, C, rhs_p)?;
            bld.set(t, ":, -1", at(p, ":, -2"))?;
            bld.set(p, ":, -1", at(t, ":, -1"))?;
            bld.set(t, "0, :", at(p, "1, :"))?;
            bld.set(p, "0, :", at(t, "0, :"))?;
            bld.set(t, ":, 0", at(p, ":, 1"))?;
            bld.set(p, ":, 0", at(t, ":, 0"))?;
            bld.set(p, "-1, :", 0.0)?;
        }

        let cu = dt / (2.0 * rho * dx);
        let cv = dt / (2.0 * rho * dy);
        let uc = || at(un, C);
        let vc = || at(vn, C);
        let rhs_u = uc() - uc() * dt / dx * (uc() - at(un, "1:-1, :-2")) - vc() * dt / dy * (uc() - at(un, ":-2, 1:-1"))
            - cu * (at(p, "1:-1, 2:") - at(p, "1:-1, :-2"))
            + nu * (dt / dx2 * (at(un, "1:-1, 2:") - 2.0 * uc() + at(un, "1:-1, :-2"))
                + dt / dy2 * (at(un, "2:, 1:-1") - 2.0 * uc() + at(un, ":-2, 1:-1")));
        let rhs_v = vc() - uc() * dt / dx * (vc() - at(vn, "1:-1, :-2")) - vc() * dt / dy * (vc() - at(vn, ":-2, 1:-1"))
            - cv * (at(p, "2:, 1:-1") - at(p, ":-2, 1:-1"))
            + nu * (dt / dx2 * (at(vn, "1:-1, 2:") - 2.0 * vc() + at(vn, "1:-1, :-2"))
                + dt / dy2 * (at(vn, "2:, 1:-1") - 2.0 * vc() + at(vn, ":-2, 1:-1")));
        bld.set(u, C, rhs_u)?;
        bld.set(v, C, rhs_v)?;

        bld.set(u, "0, :", 0.0)?;
        bld.set(u, ":, 0", 0.0)?;
        bld.set(u, ":, -1", 0.0)?;
        bld.set(u, "-1, :", 1.0)?;
        for edge in ["0, :", "-1, :", ":, 0", ":, -1"] {
            bld.set(v, edge, 0.0)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::fuse;
    use crate::oracle::{cavity_reference, laplace_reference, plan_execute, reference_execute, ArraySet};

    #[test]
    fn laplace_matches_independent_loop() {
        let mut prog = LocalProgram::new();
        let mut lap = Laplace::setup(&mut prog, 16).unwrap();
        for _ in 0..25 {
            lap.step(&mut prog).unwrap();
        }
        let mut arrays = ArraySet::new();
        reference_execute(&prog.dag, &mut arrays).unwrap();
        let want = laplace_reference(16, 25);
        assert_eq!(arrays.get(lap.u1).unwrap(), want.as_slice());
        let mut planned = ArraySet::new();
        plan_execute(&prog.dag, &mut planned).unwrap();
        assert_eq!(planned, arrays);
    }

    #[test]
    fn cavity_matches_independent_loop() {
        let prm = CavityParams { nit: 5, ..Default::default() };
        let mut prog = LocalProgram::new();
        let cav = Cavity::setup(&mut prog, 12, prm).unwrap();
        for _ in 0..4 {
            cav.step(&mut prog).unwrap();
        }
        let mut arrays = ArraySet::new();
        reference_execute(&fuse(&prog.dag), &mut arrays).unwrap();
        let (u, v, p) = cavity_reference(12, 4, prm);
        let bits = |x: &[f64]| x.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(arrays.get(cav.u).unwrap()), bits(&u));
        assert_eq!(bits(arrays.get(cav.v).unwrap()), bits(&v));
        assert_eq!(bits(arrays.get(cav.p).unwrap()), bits(&p));
        assert!(u.iter().any(|&x| x != 0.0 && x != 1.0));
    }

    #[test]
    fn cavity_velocity_updates_fuse() {
        let mut prog = LocalProgram::new();
        let cav = Cavity::setup(&mut prog, 8, CavityParams { nit: 1, ..Default::default() }).unwrap();
        cav.step(&mut prog).unwrap();
        let fused = fuse(&prog.dag);
        assert!(fused.nodes().iter().any(|n| n.statements().len() == 2
            && n.writes().contains(&cav.u)
            && n.writes().contains(&cav.v)));
    }
}
