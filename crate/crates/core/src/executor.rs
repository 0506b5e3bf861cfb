//! Executes one batch on a worker. A node runs once its predecessors are
//! done and the ghost cells of every array it reads at an offset are
//! current; exchanges for different nodes overlap with computation.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::Ordering;
use std::sync::{RwLockReadGuard, RwLockWriteGuard};
use std::thread;
use std::time::{Duration, Instant};

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::analysis::{analyze, compile_plan, eval_statement, ghost_depth, KernelMeta, KernelPlan, RowSource};
use crate::control::BatchReport;
use crate::error::{Error, Result};
use crate::grid::TileBuf;
use crate::ir::{ArrayId, Dag};
use crate::worker::{ArrayTiles, CommCmd, Event, WorkerCtx};

/// Per-array epoch state, identical on every worker.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Epochs {
    pub depth: [usize; 2],
    /// Number of completed nodes that wrote the array.
    pub local: u64,
    /// Local epoch the ghost cells were last filled at.
    pub ghost: u64,
}

#[derive(Debug, Clone, PartialEq)]
enum State {
    Pending,
    /// Waiting for rounds on these arrays.
    Exchanging(BTreeSet<ArrayId>),
    Ready,
    Done,
}

pub(crate) struct Executor<'a> {
    ctx: &'a mut WorkerCtx,
    rng: Option<StdRng>,
}

struct TileSource<'g> {
    origin: [usize; 2],
    bufs: Vec<Option<RwLockReadGuard<'g, TileBuf>>>,
}

impl RowSource for TileSource<'_> {
    fn row(&self, arg: usize, y: usize, x: usize, len: usize) -> &[f64] {
        let buf = self.bufs[arg].as_ref().expect("argument not readable in this statement");
        buf.row(
            y as isize - self.origin[0] as isize,
            x as isize - self.origin[1] as isize,
            len,
        )
    }
}

impl<'a> Executor<'a> {
    pub fn new(ctx: &'a mut WorkerCtx) -> Executor<'a> {
        let rng = ctx.jitter.map(StdRng::seed_from_u64);
        Executor { ctx, rng }
    }

    /// Grows ghost frames to what this batch needs. Growth discards ghost
    /// contents, so the ghost epoch falls back to 0.
    fn grow_depths(&mut self, metas: &[KernelMeta]) -> Result<()> {
        let arrays: BTreeSet<ArrayId> = metas.iter().flat_map(|m| m.args.iter().copied()).collect();
        for a in arrays {
            let need = ghost_depth(a, metas);
            let e = self.ctx.epochs.get_mut(&a).ok_or(Error::UnknownArray(a))?;
            let grown = [e.depth[0].max(need[0]), e.depth[1].max(need[1])];
            if grown == e.depth {
                continue;
            }
            let view = self.ctx.store.view(a)?;
            view.decomp.check_depth(grown)?;
            for buf in view.tiles.values() {
                buf.write().unwrap().ensure_depth(grown)?;
            }
            e.depth = grown;
            e.ghost = 0;
            let _ = self.ctx.cmds.send(CommCmd::Reset(a));
        }
        Ok(())
    }

    pub fn run(mut self, dag: &Dag) -> Result<BatchReport> {
        let metas: Vec<KernelMeta> = dag.nodes().iter().map(|n| analyze(dag, n)).collect();
        self.grow_depths(&metas)?;
        let plans: Vec<Option<KernelPlan>> = dag
            .nodes()
            .iter()
            .zip(&metas)
            .map(|(n, m)| n.is_compute().then(|| compile_plan(dag, n, m)))
            .collect();

        let n = dag.len();
        let preds = dag.predecessors();
        let mut succs = vec![Vec::new(); n];
        let mut waiting: Vec<usize> = preds.iter().map(Vec::len).collect();
        for (i, p) in preds.iter().enumerate() {
            for &j in p {
                succs[j].push(i);
            }
        }
        let mut state = vec![State::Pending; n];
        let mut in_flight: BTreeMap<ArrayId, u64> = BTreeMap::new();
        let mut report = BatchReport::default();
        let mut node_rounds = vec![0u32; n];
        let mut node_us = vec![0u64; n];
        let mut unblocked: Vec<usize> = (0..n).filter(|&i| waiting[i] == 0).collect();
        let net0 = self.ctx.store.network_messages.load(Ordering::Relaxed);
        let local0 = self.ctx.store.local_copies.load(Ordering::Relaxed);
        let mut done = 0;

        while done < n {
            for i in unblocked.drain(..) {
                let node = &dag.nodes()[i];
                let mut need = BTreeSet::new();
                if node.is_compute() {
                    for &a in node.reads() {
                        if !metas[i].needs_halo(a) {
                            continue;
                        }
                        let e = self.ctx.epochs[&a];
                        if e.ghost == e.local {
                            continue;
                        }
                        match in_flight.get(&a) {
                            Some(&epoch) => debug_assert_eq!(epoch, e.local),
                            None => {
                                self.ctx
                                    .cmds
                                    .send(CommCmd::Start { array: a, epoch: e.local })
                                    .map_err(|_| Error::malformed("comm lane stopped"))?;
                                in_flight.insert(a, e.local);
                                *report.rounds.entry(a.0).or_default() += 1;
                                node_rounds[i] += 1;
                            }
                        }
                        need.insert(a);
                    }
                }
                state[i] = if need.is_empty() {
                    State::Ready
                } else {
                    State::Exchanging(need)
                };
            }

            let ready: Vec<usize> = (0..n).filter(|&i| state[i] == State::Ready).collect();
            if let Some(&first) = ready.first() {
                let i = match self.rng.as_mut() {
                    Some(rng) => {
                        let pick = ready[rng.random_range(0..ready.len())];
                        thread::sleep(Duration::from_micros(rng.random_range(0..200)));
                        pick
                    }
                    None => first,
                };
                let t0 = Instant::now();
                if let Some(plan) = &plans[i] {
                    self.run_node(plan, &metas[i])?;
                    report.kernel_launches += 1;
                    for a in dag.nodes()[i].writes() {
                        self.ctx.epochs.get_mut(a).unwrap().local += 1;
                    }
                }
                node_us[i] = t0.elapsed().as_micros() as u64;
                state[i] = State::Done;
                done += 1;
                for &s in &succs[i] {
                    waiting[s] -= 1;
                    if waiting[s] == 0 {
                        unblocked.push(s);
                    }
                }
                continue;
            }
            if in_flight.is_empty() {
                return Err(Error::MalformedDag("batch cannot make progress".into()));
            }
            match self.ctx.events.recv() {
                Ok(Event::RoundDone { array, epoch }) => {
                    if in_flight.remove(&array) != Some(epoch) {
                        return Err(Error::malformed(format!("unexpected round completion for {array}")));
                    }
                    self.ctx.epochs.get_mut(&array).unwrap().ghost = epoch;
                    for s in state.iter_mut() {
                        if let State::Exchanging(need) = s {
                            need.remove(&array);
                            if need.is_empty() {
                                *s = State::Ready;
                            }
                        }
                    }
                }
                Ok(Event::Failed(e)) => return Err(e),
                Ok(Event::Tile { .. }) => return Err(Error::malformed("tile migration during a batch")),
                Err(_) => return Err(Error::malformed("comm lane stopped")),
            }
        }

        report.network_messages = self.ctx.store.network_messages.load(Ordering::Relaxed) - net0;
        report.local_copies = self.ctx.store.local_copies.load(Ordering::Relaxed) - local0;
        report.nodes = (0..n)
            .filter(|&i| dag.nodes()[i].is_compute())
            .map(|i| (i as u32, node_us[i], node_rounds[i]))
            .collect();
        Ok(report)
    }

    fn run_node(&self, plan: &KernelPlan, meta: &KernelMeta) -> Result<()> {
        let views: Vec<ArrayTiles> = plan
            .args
            .iter()
            .map(|&a| self.ctx.store.view(a))
            .collect::<Result<_>>()?;
        for st in &plan.statements {
            let out = st.output as usize;
            for (&t, out_buf) in &views[out].tiles {
                let tile_region = views[out].decomp.tile_region(t);
                let Some(sub) = st.region.intersect(&tile_region) else {
                    continue;
                };
                let bufs = views
                    .iter()
                    .enumerate()
                    .map(|(k, v)| {
                        if meta.written.contains(&k) {
                            Ok(None)
                        } else {
                            let b = v.tiles.get(&t).ok_or_else(|| Error::malformed("argument tiles not co-located"))?;
                            Ok(Some(b.read().unwrap()))
                        }
                    })
                    .collect::<Result<Vec<_>>>()?;
                let src = TileSource {
                    origin: tile_region.start,
                    bufs,
                };
                let mut dst: RwLockWriteGuard<'_, TileBuf> = out_buf.write().unwrap();
                let origin = tile_region.start;
                eval_statement(st, sub, &src, |y, x0, vals| {
                    dst.row_mut(
                        y as isize - origin[0] as isize,
                        x0 as isize - origin[1] as isize,
                        vals.len(),
                    )
                    .copy_from_slice(vals);
                });
            }
        }
        Ok(())
    }
}
