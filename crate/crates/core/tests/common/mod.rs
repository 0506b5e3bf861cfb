#![allow(dead_code)]

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use stencil_core::ir::{ArrayId, DimSlice, Expr, Region, Shape, SliceSpec};
use stencil_core::launcher::{Job, JobConfig, Mode};
use stencil_core::programs::Builder;
use stencil_core::Result;

pub fn exe() -> Mode {
    Mode::Process {
        exe: env!("CARGO_BIN_EXE_stencilrt").into(),
    }
}

pub fn thread_job(workers: usize, odf: usize) -> Job {
    let mut cfg = JobConfig::new(workers, Mode::Thread);
    cfg.odf = odf;
    Job::launch(cfg).expect("launch")
}

pub fn spec_of(r: &Region) -> SliceSpec {
    SliceSpec::new(
        (0..2)
            .map(|k| DimSlice::range(Some(r.start[k] as i64), Some(r.stop[k] as i64)))
            .collect(),
    )
}

fn random_expr(rng: &mut StdRng, leaves: &[Expr], depth: usize) -> Expr {
    if depth == 0 || rng.random_bool(0.3) {
        return if rng.random_bool(0.8) {
            leaves[rng.random_range(0..leaves.len())].clone()
        } else {
            Expr::Const(rng.random_range(-4..=4) as f64 * 0.25)
        };
    }
    match rng.random_range(0..7) {
        0 => -random_expr(rng, leaves, depth - 1),
        1 => random_expr(rng, leaves, depth - 1).abs(),
        2 => random_expr(rng, leaves, depth - 1).abs().sqrt(),
        3 => random_expr(rng, leaves, depth - 1) + random_expr(rng, leaves, depth - 1),
        4 => random_expr(rng, leaves, depth - 1) - random_expr(rng, leaves, depth - 1),
        5 => random_expr(rng, leaves, depth - 1) * random_expr(rng, leaves, depth - 1),
        _ => random_expr(rng, leaves, depth - 1) / (random_expr(rng, leaves, depth - 1).abs() + 1.0),
    }
}

/// Builds a random program on one shape with edges in {16, 24, 32} (so
/// up to 16 tiles keep every tile at least 4 wide) and offsets of at most
/// 2. Returns the arrays created.
pub fn random_program(b: &mut impl Builder, seed: u64, statements: usize) -> Result<Vec<ArrayId>> {
    let mut rng = StdRng::seed_from_u64(seed);
    let edges = [16usize, 24, 32];
    let rows = edges[rng.random_range(0..3)];
    let cols = edges[rng.random_range(0..3)];
    let shape = Shape::d2(rows, cols);
    let n = rng.random_range(2..=4);
    let arrays: Vec<ArrayId> = (0..n).map(|_| b.create(shape)).collect::<Result<_>>()?;

    let rect = |rng: &mut StdRng, h: usize, w: usize| {
        let y = rng.random_range(0..=rows - h);
        let x = rng.random_range(0..=cols - w);
        Region::new([y, x], [y + h, x + w])
    };
    for &a in &arrays {
        for _ in 0..3 {
            let h = rng.random_range(1..=rows);
            let w = rng.random_range(1..=cols);
            let r = rect(&mut rng, h, w);
            b.assign(a, &spec_of(&r), Expr::Const(rng.random_range(-8..=8) as f64 * 0.5))?;
        }
    }

    let mut extent = [rows / 2, cols / 2];
    for _ in 0..statements {
        if rng.random_bool(0.6) {
            extent = [rng.random_range(1..=rows - 4), rng.random_range(1..=cols - 4)];
        }
        let [h, w] = extent;
        let out = arrays[rng.random_range(0..n)];
        let out_r = rect(&mut rng, h, w);
        let others: Vec<ArrayId> = arrays.iter().copied().filter(|&a| a != out).collect();
        let mut leaves = Vec::new();
        for _ in 0..rng.random_range(1..=3) {
            let a = others[rng.random_range(0..others.len())];
            let shift = |rng: &mut StdRng, start: usize, len: usize, ext: usize| -> usize {
                let lo = start.saturating_sub(2);
                let hi = (start + 2).min(ext - len);
                rng.random_range(lo..=hi)
            };
            let y = shift(&mut rng, out_r.start[0], h, rows);
            let x = shift(&mut rng, out_r.start[1], w, cols);
            leaves.push(Expr::slice(a, spec_of(&Region::new([y, x], [y + h, x + w]))));
        }
        let e = random_expr(&mut rng, &leaves, 3);
        b.assign(out, &spec_of(&out_r), e)?;
    }
    Ok(arrays)
}

/// Two fields updated from a shared source, `iters` times; every
/// iteration's pair of statements can fuse.
pub fn two_field_loop(b: &mut impl Builder, n: usize, iters: usize) -> Result<[ArrayId; 3]> {
    let s = b.create(Shape::d2(n, n))?;
    let u = b.create(Shape::d2(n, n))?;
    let v = b.create(Shape::d2(n, n))?;
    b.set(s, ":, :", 1.0)?;
    for _ in 0..iters {
        b.set(u, "1:-1, 1:-1", Expr::at(s, ":-2, 1:-1") * 0.5 + Expr::at(s, "2:, 1:-1"))?;
        b.set(v, "1:-1, 1:-1", Expr::at(s, "1:-1, :-2") - Expr::at(s, "1:-1, 2:") * 0.5)?;
        b.set(s, "1:-1, 1:-1", Expr::at(u, "1:-1, 1:-1") + Expr::at(v, "1:-1, 1:-1") * 0.25)?;
    }
    Ok([s, u, v])
}
