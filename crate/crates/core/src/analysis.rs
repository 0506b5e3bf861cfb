//! Per-node analysis: index offsets between inputs and the output, ghost
//! depth inference, and compilation of a node into a flat instruction plan
//! evaluated once per output element.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use crate::ir::{ArrayId, AstExpr, BinaryOp, Dag, DagNode, NodeKind, Region, UnaryOp};

/// Offsets are `input.start - output.start` per dimension.
pub type Offset = [isize; 2];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KernelMeta {
    /// Kernel arguments: inputs in order of first use, then outputs.
    pub args: Vec<ArrayId>,
    pub max_abs_offset: Vec<[usize; 2]>,
    pub offsets: Vec<BTreeSet<Offset>>,
    pub written: BTreeSet<usize>,
    pub output_extent: [usize; 2],
}

impl KernelMeta {
    pub fn arg_index(&self, array: ArrayId) -> Option<usize> {
        self.args.iter().position(|&a| a == array)
    }

    /// Maximum offset at which this kernel reads `array`, `[0, 0]` if it
    /// does not read it.
    pub fn offset_of(&self, array: ArrayId) -> [usize; 2] {
        self.arg_index(array)
            .map(|i| self.max_abs_offset[i])
            .unwrap_or([0, 0])
    }

    pub fn needs_halo(&self, array: ArrayId) -> bool {
        self.offset_of(array) != [0, 0]
    }

    pub fn dump(&self) -> String {
        let mut s = format!(
            "extent=({},{})\n",
            self.output_extent[0], self.output_extent[1]
        );
        for (i, m) in self.max_abs_offset.iter().enumerate() {
            let tag = if self.written.contains(&i) {
                "written"
            } else if *m != [0, 0] {
                "ghost-candidate"
            } else {
                "aligned"
            };
            let _ = writeln!(s, "slot{i}: maxoff=({},{}) {tag}", m[0], m[1]);
        }
        s
    }
}

pub fn analyze(dag: &Dag, node: &DagNode) -> KernelMeta {
    let mut meta = KernelMeta {
        args: Vec::new(),
        max_abs_offset: Vec::new(),
        offsets: Vec::new(),
        written: BTreeSet::new(),
        output_extent: [0, 0],
    };
    fn arg(meta: &mut KernelMeta, a: ArrayId) -> usize {
        meta.arg_index(a).unwrap_or_else(|| {
            meta.args.push(a);
            meta.max_abs_offset.push([0, 0]);
            meta.offsets.push(BTreeSet::new());
            meta.args.len() - 1
        })
    }
    match &node.kind {
        NodeKind::Create { array, shape } => {
            let i = arg(&mut meta, *array);
            meta.written.insert(i);
            meta.output_extent = shape.dims();
        }
        NodeKind::Compute { statements } => {
            meta.output_extent = statements[0].output_region.extent();
            for st in statements {
                let out_start = st.output_region.start;
                dag.ast(st.ast).root().visit_slots(&mut |slot, region| {
                    let i = arg(&mut meta, st.inputs[slot as usize]);
                    let off = offset_between(region, out_start);
                    let m = &mut meta.max_abs_offset[i];
                    m[0] = m[0].max(off[0].unsigned_abs());
                    m[1] = m[1].max(off[1].unsigned_abs());
                    meta.offsets[i].insert(off);
                });
            }
            for st in statements {
                let i = arg(&mut meta, st.output);
                meta.written.insert(i);
            }
        }
    }
    meta
}

fn offset_between(input: &Region, out_start: [usize; 2]) -> Offset {
    [
        input.start[0] as isize - out_start[0] as isize,
        input.start[1] as isize - out_start[1] as isize,
    ]
}

/// Per-axis ghost depth an array needs: the largest offset any kernel
/// applies to it.
pub fn ghost_depth<'a>(array: ArrayId, metas: impl IntoIterator<Item = &'a KernelMeta>) -> [usize; 2] {
    metas.into_iter().fold([0, 0], |acc, m| {
        let o = m.offset_of(array);
        [acc[0].max(o[0]), acc[1].max(o[1])]
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Instr {
    /// Push `arg[p + offset]`.
    LoadRel { arg: u16, offset: Offset },
    LoadConst(f64),
    Unary(UnaryOp),
    Binary(BinaryOp),
    /// Pop and write to `arg[p]`.
    Store { arg: u16 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct StatementPlan {
    pub output: u16,
    pub region: Region,
    pub instrs: Vec<Instr>,
    pub max_stack: usize,
}

/// Instruction plan for one node. Statements of a fused node run in order,
/// each over its whole output region.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelPlan {
    pub args: Vec<ArrayId>,
    pub statements: Vec<StatementPlan>,
}

impl KernelPlan {
    pub fn instructions(&self) -> impl Iterator<Item = &Instr> {
        self.statements.iter().flat_map(|s| s.instrs.iter())
    }
}

pub fn compile_plan(dag: &Dag, node: &DagNode, meta: &KernelMeta) -> KernelPlan {
    let statements = node
        .statements()
        .iter()
        .map(|st| {
            let mut instrs = Vec::new();
            let mut depth = 0usize;
            let mut max_stack = 0usize;
            let out_start = st.output_region.start;
            emit(
                dag.ast(st.ast).root(),
                &mut |slot| meta.arg_index(st.inputs[slot as usize]).unwrap() as u16,
                out_start,
                &mut instrs,
                &mut depth,
                &mut max_stack,
            );
            let output = meta.arg_index(st.output).unwrap() as u16;
            instrs.push(Instr::Store { arg: output });
            StatementPlan {
                output,
                region: st.output_region,
                instrs,
                max_stack,
            }
        })
        .collect();
    KernelPlan {
        args: meta.args.clone(),
        statements,
    }
}

fn emit(
    e: &AstExpr,
    arg_of: &mut impl FnMut(u32) -> u16,
    out_start: [usize; 2],
    out: &mut Vec<Instr>,
    depth: &mut usize,
    max: &mut usize,
) {
    match e {
        AstExpr::Const(v) => {
            out.push(Instr::LoadConst(*v));
            *depth += 1;
        }
        AstExpr::Slot { slot, region } => {
            out.push(Instr::LoadRel {
                arg: arg_of(*slot),
                offset: offset_between(region, out_start),
            });
            *depth += 1;
        }
        AstExpr::Unary(op, c) => {
            emit(c, arg_of, out_start, out, depth, max);
            out.push(Instr::Unary(*op));
        }
        AstExpr::Binary(op, l, r) => {
            emit(l, arg_of, out_start, out, depth, max);
            emit(r, arg_of, out_start, out, depth, max);
            out.push(Instr::Binary(*op));
            *depth -= 1;
        }
    }
    *max = (*max).max(*depth);
}

/// Read access for plan evaluation in global coordinates.
pub trait RowSource {
    /// `len` contiguous values of argument `arg` starting at global `(y, x)`.
    fn row(&self, arg: usize, y: usize, x: usize, len: usize) -> &[f64];
}

/// Evaluates one statement over `region` (a sub-rectangle of its output
/// region) a row at a time, handing each finished row to `sink`. Every
/// element goes through exactly the instruction sequence of
/// [`eval_element`], so results are bitwise identical to it.
pub fn eval_statement(
    plan: &StatementPlan,
    region: Region,
    src: &impl RowSource,
    mut sink: impl FnMut(usize, usize, &[f64]),
) {
    let width = region.extent()[1];
    if width == 0 {
        return;
    }
    let mut stack: Vec<Vec<f64>> = vec![vec![0.0; width]; plan.max_stack.max(1)];
    let x0 = region.start[1];
    for y in region.start[0]..region.stop[0] {
        let mut sp = 0usize;
        for ins in &plan.instrs {
            match *ins {
                Instr::LoadRel { arg, offset } => {
                    let row = src.row(
                        arg as usize,
                        (y as isize + offset[0]) as usize,
                        (x0 as isize + offset[1]) as usize,
                        width,
                    );
                    stack[sp].copy_from_slice(row);
                    sp += 1;
                }
                Instr::LoadConst(v) => {
                    stack[sp].fill(v);
                    sp += 1;
                }
                Instr::Unary(op) => {
                    for v in stack[sp - 1].iter_mut() {
                        *v = op.apply(*v);
                    }
                }
                Instr::Binary(op) => {
                    let (lo, hi) = stack.split_at_mut(sp - 1);
                    let a = &mut lo[sp - 2];
                    let b = &hi[0];
                    match op {
                        BinaryOp::Add => a.iter_mut().zip(b).for_each(|(x, y)| *x += *y),
                        BinaryOp::Sub => a.iter_mut().zip(b).for_each(|(x, y)| *x -= *y),
                        BinaryOp::Mul => a.iter_mut().zip(b).for_each(|(x, y)| *x *= *y),
                        BinaryOp::Div => a.iter_mut().zip(b).for_each(|(x, y)| *x /= *y),
                    }
                    sp -= 1;
                }
                Instr::Store { .. } => {
                    sink(y, x0, &stack[sp - 1]);
                    sp -= 1;
                }
            }
        }
    }
}

/// Scalar reference interpreter for a single element `p = (y, x)`.
pub fn eval_element(plan: &StatementPlan, y: usize, x: usize, load: impl Fn(usize, usize, usize) -> f64) -> f64 {
    let mut stack = Vec::with_capacity(plan.max_stack);
    for ins in &plan.instrs {
        match *ins {
            Instr::LoadRel { arg, offset } => stack.push(load(
                arg as usize,
                (y as isize + offset[0]) as usize,
                (x as isize + offset[1]) as usize,
            )),
            Instr::LoadConst(v) => stack.push(v),
            Instr::Unary(op) => {
                let v = stack.pop().unwrap();
                stack.push(op.apply(v));
            }
            Instr::Binary(op) => {
                let b = stack.pop().unwrap();
                let a = stack.pop().unwrap();
                stack.push(op.apply(a, b));
            }
            Instr::Store { .. } => return stack.pop().unwrap(),
        }
    }
    unreachable!("plan without store")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{Expr, Shape, ShapeMap, SliceSpec};

    fn sh(n: usize, ids: &[u32]) -> ShapeMap {
        ids.iter().map(|&i| (ArrayId(i), Shape::d2(n, n))).collect()
    }

    fn single(out: u32, slice: &str, e: Expr, shapes: &ShapeMap) -> (Dag, KernelMeta) {
        let mut dag = Dag::new();
        let st = dag
            .build_statement(ArrayId(out), &SliceSpec::parse(slice).unwrap(), &e, shapes)
            .unwrap();
        dag.add_statement(st);
        let meta = analyze(&dag, &dag.nodes()[0]);
        (dag, meta)
    }

    fn jacobi(src: ArrayId) -> Expr {
        0.25 * (Expr::at(src, ":-2, 1:-1")
            + Expr::at(src, "2:, 1:-1")
            + Expr::at(src, "1:-1, :-2")
            + Expr::at(src, "1:-1, 2:"))
    }

    #[test]
    fn jacobi_offsets() {
        let (_, meta) = single(1, "1:-1, 1:-1", jacobi(ArrayId(0)), &sh(16384, &[0, 1]));
        assert_eq!(meta.args, vec![ArrayId(0), ArrayId(1)]);
        assert_eq!(meta.max_abs_offset[0], [1, 1]);
        let offs: Vec<Offset> = meta.offsets[0].iter().copied().collect();
        assert_eq!(offs, vec![[-1, 0], [0, -1], [0, 1], [1, 0]]);
        assert_eq!(meta.written, BTreeSet::from([1]));
        assert_eq!(
            meta.dump(),
            "extent=(16382,16382)\nslot0: maxoff=(1,1) ghost-candidate\nslot1: maxoff=(0,0) written\n"
        );
    }

    #[test]
    fn aligned_copy_needs_no_ghosts() {
        let (_, meta) = single(1, ":, :", Expr::at(ArrayId(0), ":, :"), &sh(8, &[0, 1]));
        assert_eq!(meta.max_abs_offset[0], [0, 0]);
        assert!(!meta.needs_halo(ArrayId(0)));
    }

    #[test]
    fn shifted_copy_offset() {
        // b[2:, :] = a[:-2, :]: input starts at row 0, output at row 2.
        let (_, meta) = single(1, "2:, :", Expr::at(ArrayId(0), ":-2, :"), &sh(8, &[0, 1]));
        assert_eq!(meta.offsets[0].iter().next(), Some(&[-2, 0]));
        assert_eq!(meta.max_abs_offset[0], [2, 0]);
    }

    #[test]
    fn ghost_depth_is_max_over_kernels() {
        let shapes = sh(16, &[0, 1, 2]);
        let (_, m1) = single(1, "1:-1, 1:-1", jacobi(ArrayId(0)), &shapes);
        let (_, m2) = single(2, "2:-2, 2:-2", Expr::at(ArrayId(0), ":-4, 2:-2") + Expr::at(ArrayId(0), "2:-2, 4:"), &shapes);
        assert_eq!(ghost_depth(ArrayId(0), [&m1]), [1, 1]);
        assert_eq!(ghost_depth(ArrayId(0), [&m1, &m2]), [2, 2]);
        assert_eq!(ghost_depth(ArrayId(1), [&m1, &m2]), [0, 0]);
    }

    #[test]
    fn const_plan() {
        let (dag, meta) = single(0, "0, :", Expr::Const(1.0), &sh(8, &[0]));
        let plan = compile_plan(&dag, &dag.nodes()[0], &meta);
        assert_eq!(
            plan.statements[0].instrs,
            vec![Instr::LoadConst(1.0), Instr::Store { arg: 0 }]
        );
    }

    #[test]
    fn jacobi_plan_shape() {
        let (dag, meta) = single(1, "1:-1, 1:-1", jacobi(ArrayId(0)), &sh(8, &[0, 1]));
        let plan = compile_plan(&dag, &dag.nodes()[0], &meta);
        let ins = &plan.statements[0].instrs;
        let count = |f: fn(&Instr) -> bool| ins.iter().filter(|i| f(i)).count();
        assert_eq!(count(|i| matches!(i, Instr::LoadRel { .. })), 4);
        assert_eq!(count(|i| matches!(i, Instr::Binary(BinaryOp::Add))), 3);
        assert_eq!(count(|i| matches!(i, Instr::Binary(BinaryOp::Mul))), 1);
        assert_eq!(count(|i| matches!(i, Instr::LoadConst(v) if *v == 0.25)), 1);
        assert_eq!(count(|i| matches!(i, Instr::Store { .. })), 1);
        assert_eq!(ins[0], Instr::LoadConst(0.25));
        assert_eq!(ins[1], Instr::LoadRel { arg: 0, offset: [-1, 0] });
    }
}
