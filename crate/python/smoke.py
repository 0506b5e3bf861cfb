"""Smoke test for the stencilpy bindings.

Build first:  cargo build -p stencil-py && cp target/debug/libstencilpy.so python/stencilpy.so
Run:          python3 python/smoke.py   (or pytest python/smoke.py)
"""
import os
import sys

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import stencilpy as sp


def laplace(create, n, iters):
    u1 = create((n, n))
    u2 = create((n, n))
    for u in (u1, u2):
        u[0, :] = 1
        u[-1, :] = 1
        u[:, 0] = 1
        u[:, -1] = 1
    for _ in range(iters):
        u2[1:-1, 1:-1] = 0.25 * (u1[:-2, 1:-1] + u1[2:, 1:-1] + u1[1:-1, :-2] + u1[1:-1, 2:])
        u1, u2 = u2, u1
    return u1


def expect(exc, fn):
    try:
        fn()
    except exc:
        return
    raise AssertionError(f"{exc.__name__} not raised")


def test_script_matches_hand_built_dag():
    p = sp.Program()
    laplace(p.create_array, 16, 10)
    want = sp.laplace_program(16, 10)
    assert p.dag_bytes() == want.dag_bytes()
    assert p.dump() == want.dump()
    assert p.ast_count() == 2


def test_eager_errors():
    p = sp.Program()
    a = p.create_array((8, 8))
    b = p.create_array((8, 8))
    expect(sp.SelfDependencyError, lambda: a.__setitem__((slice(1, None), slice(None)), a[:-1, :]))
    expect(sp.ShapeMismatchError, lambda: a.__setitem__((slice(1, None), slice(None)), b[:, :]))
    expect(sp.StencilError, lambda: a.__setitem__((slice(None, None, 2), 0), 1.0))
    expect(sp.StencilError, lambda: p.create_array((0, 4)))


def test_session_runs_and_rescales():
    job = sp.launch(2, odf=2, max_workers=4)
    s = job.connect()
    try:
        n, iters = 16, 20
        u = laplace(s.create_array, n, iters)
        stats = s.sync()
        assert stats["batches"] >= 1
        t = s.rescale(4)
        assert t["workers"] == 4 and t["bytes"] > 0
        got = s.fetch(u)

        p = sp.Program()
        ref = laplace(p.create_array, n, iters)
        flat = sp.reference_execute(p)[ref.id]
        assert [x for row in got for x in row] == flat
        assert s.fetch(u, (0, slice(2, 5))) == [[1.0, 1.0, 1.0]]
        expect(sp.StencilError, lambda: s.rescale(0))
    finally:
        s.shutdown()
    job.wait()

if __name__ == "__main__":
    for name, fn in list(globals().items()):
        if name.startswith("test_"):
            fn()
            print(f"{name}: ok")
