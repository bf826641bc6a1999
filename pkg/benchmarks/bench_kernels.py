"""Time the numba kernels against their numpy twins.

    python benchmarks/bench_kernels.py [--repeat 5]

Each kernel is run once per backend to warm up (JIT compilation), then
timed ``--repeat`` times; the best time is reported along with the
maximum absolute difference between backends.
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from markedlgcp import _kernels as K
from markedlgcp.mesh import DomainPolygon, build_mesh


def _best(fn, repeat):
    fn()
    best = np.inf
    for _ in range(repeat):
        t = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t)
    return best, out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--points", type=int, default=20_000)
    ap.add_argument("--sources", type=int, default=2_000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    if not K.HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")

    rng = np.random.default_rng(args.seed)
    mesh = build_mesh(DomainPolygon.rectangle(0, 0, 50, 50), 1.5, 0.3)
    pts = rng.uniform(0, 50, size=(args.points, 2))
    src = rng.uniform(0, 50, size=(args.sources, 2))
    vals = rng.normal(size=args.sources)
    targets = np.stack(np.meshgrid(np.arange(0.5, 50), np.arange(0.5, 50)), -1).reshape(-1, 2)

    cases = {
        f"locate_points ({mesh.n_triangles} tris, {args.points} pts)":
            lambda: K.locate_points(mesh.nodes, mesh.triangles, pts)[1],
        f"nadaraya_watson ({len(targets)} cells, {args.sources} src)":
            lambda: K.nadaraya_watson(targets, src, vals, 2.0)[0],
        f"element_matrices ({mesh.n_triangles} tris)":
            lambda: K.element_matrices(mesh.nodes, mesh.triangles)[1],
    }
    print(f"{'kernel':<48} {'numpy s':>10} {'numba s':>10} {'speedup':>8} {'max diff':>10}")
    for name, fn in cases.items():
        K.set_backend("numpy")
        t_np, out_np = _best(fn, args.repeat)
        K.set_backend("numba")
        t_nb, out_nb = _best(fn, args.repeat)
        diff = float(np.max(np.abs(out_np - out_nb))) if out_np.size else 0.0
        print(f"{name:<48} {t_np:10.4f} {t_nb:10.4f} {t_np / t_nb:8.1f} {diff:10.2e}")


if __name__ == "__main__":
    main()
