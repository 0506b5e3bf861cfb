//! Ground truth for the distributed runtime. Nothing here touches tiles,
//! halos, or scheduling: programs run statement by statement on whole
//! arrays.

use std::collections::BTreeMap;

use crate::analysis::{analyze, compile_plan, eval_element, ghost_depth, KernelMeta};
use crate::error::{Error, Result};
use crate::ir::{ArrayId, Dag, NodeKind, Region, Shape, ShapeMap};

/// Whole-array state keyed by id, row-major.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ArraySet {
    pub shapes: ShapeMap,
    pub data: BTreeMap<ArrayId, Vec<f64>>,
}

impl ArraySet {
    pub fn new() -> ArraySet {
        ArraySet::default()
    }

    pub fn create(&mut self, id: ArrayId, shape: Shape) {
        self.shapes.insert(id, shape);
        self.data.insert(id, vec![0.0; shape.len()]);
    }

    pub fn get(&self, id: ArrayId) -> Option<&[f64]> {
        self.data.get(&id).map(|v| v.as_slice())
    }

    /// Row-major copy of `region`.
    pub fn slice(&self, id: ArrayId, region: &Region) -> Result<Vec<f64>> {
        let shape = self.shapes.get(&id).ok_or(Error::UnknownArray(id))?;
        let data = &self.data[&id];
        let cols = shape.dims()[1];
        let mut out = Vec::with_capacity(region.len());
        for y in region.start[0]..region.stop[0] {
            out.extend_from_slice(&data[y * cols + region.start[1]..y * cols + region.stop[1]]);
        }
        Ok(out)
    }
}

/// Runs `dag` by recursive tree evaluation, one output element at a time.
/// Creation nodes allocate zeroed arrays (an existing array is kept).
pub fn reference_execute(dag: &Dag, arrays: &mut ArraySet) -> Result<()> {
    for node in dag.nodes() {
        match &node.kind {
            NodeKind::Create { array, shape } => {
                if !arrays.shapes.contains_key(array) {
                    arrays.create(*array, *shape);
                }
            }
            NodeKind::Compute { statements } => {
                for st in statements {
                    let root = dag.ast(st.ast).root();
                    let out_region = st.output_region;
                    let [h, w] = out_region.extent();
                    let mut values = Vec::with_capacity(h * w);
                    {
                        let inputs = st
                            .inputs
                            .iter()
                            .map(|a| {
                                let cols = arrays.shapes.get(a).ok_or(Error::UnknownArray(*a))?.dims()[1];
                                Ok((arrays.data[a].as_slice(), cols))
                            })
                            .collect::<Result<Vec<_>>>()?;
                        for i in 0..h {
                            for j in 0..w {
                                values.push(root.eval(&mut |slot, r: &Region| {
                                    let (data, cols) = inputs[slot as usize];
                                    data[(r.start[0] + i) * cols + r.start[1] + j]
                                }));
                            }
                        }
                    }
                    let cols = arrays.shapes.get(&st.output).ok_or(Error::UnknownArray(st.output))?.dims()[1];
                    let out = arrays.data.get_mut(&st.output).unwrap();
                    for i in 0..h {
                        let base = (out_region.start[0] + i) * cols + out_region.start[1];
                        out[base..base + w].copy_from_slice(&values[i * w..(i + 1) * w]);
                    }
                }
            }
        }
    }
    Ok(())
}

/// Second evaluator: interprets the compiled plan per element over whole
/// arrays. Must agree bitwise with [`reference_execute`].
pub fn plan_execute(dag: &Dag, arrays: &mut ArraySet) -> Result<()> {
    for node in dag.nodes() {
        if let NodeKind::Create { array, shape } = &node.kind {
            if !arrays.shapes.contains_key(array) {
                arrays.create(*array, *shape);
            }
            continue;
        }
        let meta = analyze(dag, node);
        let plan = compile_plan(dag, node, &meta);
        for st in &plan.statements {
            let region = st.region;
            let out_id = plan.args[st.output as usize];
            let mut values = Vec::with_capacity(region.len());
            {
                let views = plan
                    .args
                    .iter()
                    .map(|a| {
                        let cols = arrays.shapes.get(a).ok_or(Error::UnknownArray(*a))?.dims()[1];
                        Ok((arrays.data[a].as_slice(), cols))
                    })
                    .collect::<Result<Vec<_>>>()?;
                for y in region.start[0]..region.stop[0] {
                    for x in region.start[1]..region.stop[1] {
                        values.push(eval_element(st, y, x, |arg, yy, xx| {
                            let (data, cols) = views[arg];
                            data[yy * cols + xx]
                        }));
                    }
                }
            }
            let cols = arrays.shapes[&out_id].dims()[1];
            let out = arrays.data.get_mut(&out_id).unwrap();
            let w = region.extent()[1];
            for (i, y) in (region.start[0]..region.stop[0]).enumerate() {
                let base = y * cols + region.start[1];
                out[base..base + w].copy_from_slice(&values[i * w..(i + 1) * w]);
            }
        }
    }
    Ok(())
}

/// Scalar model of the generation-epoch rule across a sequence of
/// batches. Per batch, ghost depths grow to the batch's maximum (growth
/// resets the ghost epoch); then nodes run in program order, and a node
/// needing a halo for an array whose ghost epoch lags its local epoch
/// costs one exchange round. Returns rounds per array.
pub fn epoch_simulate<'a>(batches: impl IntoIterator<Item = &'a Dag>) -> BTreeMap<ArrayId, u64> {
    #[derive(Default)]
    struct Epochs {
        depth: [usize; 2],
        local: u64,
        ghost: u64,
    }
    let mut state: BTreeMap<ArrayId, Epochs> = BTreeMap::new();
    let mut rounds: BTreeMap<ArrayId, u64> = BTreeMap::new();
    for dag in batches {
        let metas: Vec<KernelMeta> = dag.nodes().iter().map(|n| analyze(dag, n)).collect();
        for meta in &metas {
            for &a in &meta.args {
                let need = ghost_depth(a, &metas);
                let e = state.entry(a).or_default();
                let grown = [e.depth[0].max(need[0]), e.depth[1].max(need[1])];
                if grown != e.depth {
                    e.depth = grown;
                    e.ghost = 0;
                }
            }
        }
        for (node, meta) in dag.nodes().iter().zip(&metas) {
            if !node.is_compute() {
                continue;
            }
            for a in node.reads() {
                let e = state.get_mut(a).unwrap();
                if meta.needs_halo(*a) && e.ghost != e.local {
                    e.ghost = e.local;
                    *rounds.entry(*a).or_default() += 1;
                }
            }
            for a in node.writes() {
                state.get_mut(a).unwrap().local += 1;
            }
        }
    }
    rounds
}

/// Independent Laplace solver: boundaries held at 1, interior relaxed by
/// the four-point average, arrays swapped each iteration. Returns the
/// array last written (the one named `u1` after the final swap).
pub fn laplace_reference(n: usize, iters: usize) -> Vec<f64> {
    let mut u1 = vec![0.0; n * n];
    for k in 0..n {
        u1[k] = 1.0;
        u1[(n - 1) * n + k] = 1.0;
        u1[k * n] = 1.0;
        u1[k * n + n - 1] = 1.0;
    }
    let mut u2 = u1.clone();
    for _ in 0..iters {
        for i in 1..n - 1 {
            for j in 1..n - 1 {
                u2[i * n + j] = 0.25
                    * (u1[(i - 1) * n + j] + u1[(i + 1) * n + j] + u1[i * n + j - 1] + u1[i * n + j + 1]);
            }
        }
        std::mem::swap(&mut u1, &mut u2);
    }
    u1
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CavityParams {
    pub nit: usize,
    pub rho: f64,
    pub nu: f64,
    pub dt: f64,
}

impl Default for CavityParams {
    fn default() -> Self {
        CavityParams {
            nit: 50,
            rho: 1.0,
            nu: 0.1,
            dt: 0.001,
        }
    }
}

/// Final `(u, v, p)` of the lid-driven cavity on an `n`×`n` grid over
/// `[0, 2]²`, written as plain loops with the same operation order as the
/// array formulation.
pub fn cavity_reference(n: usize, iters: usize, prm: CavityParams) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let d = 2.0 / (n as f64 - 1.0);
    let (dx, dy) = (d, d);
    let CavityParams { nit, rho, nu, dt } = prm;
    let (dx2, dy2) = (dx * dx, dy * dy);
    let at = |i: usize, j: usize| i * n + j;
    let mut u = vec![0.0; n * n];
    let mut v = vec![0.0; n * n];
    let mut p = vec![0.0; n * n];
    let mut b = vec![0.0; n * n];
    for _ in 0..iters {
        let un = u.clone();
        let vn = v.clone();
        for i in 1..n - 1 {
            for j in 1..n - 1 {
                let ux = (un[at(i, j + 1)] - un[at(i, j - 1)]) / (2.0 * dx);
                let vy = (vn[at(i + 1, j)] - vn[at(i - 1, j)]) / (2.0 * dy);
                let uy = (un[at(i + 1, j)] - un[at(i - 1, j)]) / (2.0 * dy);
                let vx = vn[at(i, j + 1)] - vn[at(i, j - 1)];
                b[at(i, j)] = rho
                    * ((1.0 / dt) * (ux + vy) - ux * ux - 2.0 * (uy * vx / (2.0 * dx)) - vy * vy);
            }
        }
        for _ in 0..nit {
            let pn = p.clone();
            let denom = 2.0 * (dx2 + dy2);
            let c = dx2 * dy2 / denom;
            for i in 1..n - 1 {
                for j in 1..n - 1 {
                    p[at(i, j)] = ((pn[at(i, j + 1)] + pn[at(i, j - 1)]) * dy2
                        + (pn[at(i + 1, j)] + pn[at(i - 1, j)]) * dx2)
                        / denom
                        - c * b[at(i, j)];
                }
            }
            for i in 0..n {
                p[at(i, n - 1)] = p[at(i, n - 2)];
            }
            for j in 0..n {
                p[at(0, j)] = p[at(1, j)];
            }
            for i in 0..n {
                p[at(i, 0)] = p[at(i, 1)];
            }
            for j in 0..n {
                p[at(n - 1, j)] = 0.0;
            }
        }
        let cu = dt / (2.0 * rho * dx);
        let cv = dt / (2.0 * rho * dy);
        for i in 1..n - 1 {
            for j in 1..n - 1 {
                let c = un[at(i, j)];
                u[at(i, j)] = c
                    - c * dt / dx * (c - un[at(i, j - 1)])
                    - vn[at(i, j)] * dt / dy * (c - un[at(i - 1, j)])
                    - cu * (p[at(i, j + 1)] - p[at(i, j - 1)])
                    + nu * (dt / dx2 * (un[at(i, j + 1)] - 2.0 * c + un[at(i, j - 1)])
                        + dt / dy2 * (un[at(i + 1, j)] - 2.0 * c + un[at(i - 1, j)]));
                let c = vn[at(i, j)];
                v[at(i, j)] = c
                    - un[at(i, j)] * dt / dx * (c - vn[at(i, j - 1)])
                    - c * dt / dy * (c - vn[at(i - 1, j)])
                    - cv * (p[at(i + 1, j)] - p[at(i - 1, j)])
                    + nu * (dt / dx2 * (vn[at(i, j + 1)] - 2.0 * c + vn[at(i, j - 1)])
                        + dt / dy2 * (vn[at(i + 1, j)] - 2.0 * c + vn[at(i - 1, j)]));
            }
        }
        for j in 0..n {
            u[at(0, j)] = 0.0;
        }
        for i in 0..n {
            u[at(i, 0)] = 0.0;
            u[at(i, n - 1)] = 0.0;
        }
        for j in 0..n {
            u[at(n - 1, j)] = 1.0;
        }
        for k in 0..n {
            v[at(0, k)] = 0.0;
            v[at(n - 1, k)] = 0.0;
            v[at(k, 0)] = 0.0;
            v[at(k, n - 1)] = 0.0;
        }
    }
    (u, v, p)
}
