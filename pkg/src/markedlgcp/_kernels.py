"""Hot inner loops, each with a numba kernel and a pure-numpy twin.

The numba path is used when numba imports cleanly and the environment
variable ``MARKEDLGCP_NUMBA`` is not set to ``0``. Both paths use the same
formulas and tie-breaking; sums may differ in the last bits where numpy
dispatches to BLAS.
"""
from __future__ import annotations

import os

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False

BARY_EPS = 1e-12

_USE_NUMBA = HAVE_NUMBA and os.environ.get("MARKEDLGCP_NUMBA", "1") != "0"


def backend() -> str:
    return "numba" if _USE_NUMBA else "numpy"


def set_backend(name: str) -> None:
    """Switch kernels between ``"numba"`` and ``"numpy"`` at runtime."""
    global _USE_NUMBA
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba is not installed")
    _USE_NUMBA = name == "numba"


# ---------------------------------------------------------------------------
# point location


def _bucket_index(nodes, triangles):
    """Uniform bucket grid over the mesh bounding box.

    Each bucket lists, in ascending order, the triangles whose bounding box
    overlaps it.
    """
    lo = nodes.min(axis=0)
    hi = nodes.max(axis=0)
    span = np.maximum(hi - lo, 1e-12)
    ntri = triangles.shape[0]
    h = max(np.sqrt(span[0] * span[1] / max(ntri, 1)) * 1.5, 1e-12)
    nx = int(span[0] / h) + 1
    ny = int(span[1] / h) + 1
    tri_xy = nodes[triangles]  # (T, 3, 2)
    tmin = tri_xy.min(axis=1)
    tmax = tri_xy.max(axis=1)
    i0 = np.clip(((tmin[:, 0] - lo[0]) / h).astype(np.int64), 0, nx - 1)
    i1 = np.clip(((tmax[:, 0] - lo[0]) / h).astype(np.int64), 0, nx - 1)
    j0 = np.clip(((tmin[:, 1] - lo[1]) / h).astype(np.int64), 0, ny - 1)
    j1 = np.clip(((tmax[:, 1] - lo[1]) / h).astype(np.int64), 0, ny - 1)
    wx = i1 - i0 + 1
    wy = j1 - j0 + 1
    counts = wx * wy
    tris = np.repeat(np.arange(ntri, dtype=np.int64), counts)
    first = np.repeat(np.cumsum(counts) - counts, counts)
    local = np.arange(tris.size, dtype=np.int64) - first
    wxr = wx[tris]
    cells = (j0[tris] + local // wxr) * nx + (i0[tris] + local % wxr)
    order = np.lexsort((tris, cells))
    cells = cells[order]
    tris = tris[order]
    start = np.searchsorted(cells, np.arange(nx * ny + 1))
    return start.astype(np.int64), tris, float(lo[0]), float(lo[1]), float(h), nx, ny


def _locate_numpy(nodes, triangles, points, chunk=4_000_000):
    n = points.shape[0]
    ntri = triangles.shape[0]
    tri_out = np.full(n, -1, dtype=np.int64)
    bary_out = np.zeros((n, 3))
    if n == 0 or ntri == 0:
        return tri_out, bary_out
    a = nodes[triangles[:, 0]]
    b = nodes[triangles[:, 1]]
    c = nodes[triangles[:, 2]]
    det = (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0])
    step = max(1, chunk // ntri)
    for s in range(0, n, step):
        px = points[s : s + step, 0:1]
        py = points[s : s + step, 1:2]
        la = ((b[:, 0] - px) * (c[:, 1] - py) - (b[:, 1] - py) * (c[:, 0] - px)) / det
        lb = ((c[:, 0] - px) * (a[:, 1] - py) - (c[:, 1] - py) * (a[:, 0] - px)) / det
        lc = 1.0 - la - lb
        inside = (la >= -BARY_EPS) & (lb >= -BARY_EPS) & (lc >= -BARY_EPS)
        hit = inside.any(axis=1)
        first = np.argmax(inside, axis=1)
        rows = np.nonzero(hit)[0]
        cols = first[rows]
        tri_out[s + rows] = cols
        bary_out[s + rows, 0] = la[rows, cols]
        bary_out[s + rows, 1] = lb[rows, cols]
        bary_out[s + rows, 2] = lc[rows, cols]
    return tri_out, bary_out


if HAVE_NUMBA:

    @njit(cache=True)
    def _locate_nb(nodes, triangles, points, start, cell_tris, x0, y0, h, nx, ny, eps):
        n = points.shape[0]
        tri_out = np.full(n, -1, dtype=np.int64)
        bary_out = np.zeros((n, 3))
        for i in range(n):
            px = points[i, 0]
            py = points[i, 1]
            fx = (px - x0) / h
            fy = (py - y0) / h
            # points just past the bounding box still get the eps test
            if fx < -1.0 or fy < -1.0 or fx >= nx + 1.0 or fy >= ny + 1.0:
                continue
            ci = min(max(int(fx), 0), nx - 1)
            cj = min(max(int(fy), 0), ny - 1)
            cell = cj * nx + ci
            for k in range(start[cell], start[cell + 1]):
                t = cell_tris[k]
                ax = nodes[triangles[t, 0], 0]
                ay = nodes[triangles[t, 0], 1]
                bx = nodes[triangles[t, 1], 0]
                by = nodes[triangles[t, 1], 1]
                cx = nodes[triangles[t, 2], 0]
                cy = nodes[triangles[t, 2], 1]
                det = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
                la = ((bx - px) * (cy - py) - (by - py) * (cx - px)) / det
                lb = ((cx - px) * (ay - py) - (cy - py) * (ax - px)) / det
                lc = 1.0 - la - lb
                if la >= -eps and lb >= -eps and lc >= -eps:
                    tri_out[i] = t
                    bary_out[i, 0] = la
                    bary_out[i, 1] = lb
                    bary_out[i, 2] = lc
                    break
        return tri_out, bary_out


def locate_points(nodes: np.ndarray, triangles: np.ndarray, points: np.ndarray):
    """Return (triangle index or -1, raw barycentric coordinates) per point.

    Ties on shared edges resolve to the lowest triangle index.
    """
    nodes = np.ascontiguousarray(nodes, dtype=np.float64)
    triangles = np.ascontiguousarray(triangles, dtype=np.int64)
    points = np.ascontiguousarray(np.atleast_2d(points), dtype=np.float64).reshape(-1, 2)
    if not _USE_NUMBA:
        return _locate_numpy(nodes, triangles, points)
    if points.shape[0] == 0 or triangles.shape[0] == 0:
        return np.full(points.shape[0], -1, np.int64), np.zeros((points.shape[0], 3))
    start, cell_tris, x0, y0, h, nx, ny = _bucket_index(nodes, triangles)
    return _locate_nb(nodes, triangles, points, start, cell_tris, x0, y0, h, nx, ny, BARY_EPS)


# ---------------------------------------------------------------------------
# Nadaraya-Watson smoothing with a Gaussian kernel


def _nw_numpy(targets, sources, values, bandwidth, chunk=4_000_000):
    m = targets.shape[0]
    n = sources.shape[0]
    out = np.empty(m)
    dmin = np.empty(m)
    step = max(1, chunk // max(n, 1))
    inv = 1.0 / (2.0 * bandwidth * bandwidth)
    for s in range(0, m, step):
        dx = targets[s : s + step, 0:1] - sources[:, 0]
        dy = targets[s : s + step, 1:2] - sources[:, 1]
        d2 = dx * dx + dy * dy
        m2 = d2.min(axis=1)
        w = np.exp(-(d2 - m2[:, None]) * inv)
        out[s : s + step] = (w @ values) / w.sum(axis=1)
        dmin[s : s + step] = np.sqrt(m2)
    return out, dmin


if HAVE_NUMBA:

    @njit(cache=True)
    def _nw_nb(targets, sources, values, bandwidth):
        m = targets.shape[0]
        n = sources.shape[0]
        out = np.empty(m)
        dmin = np.empty(m)
        inv = 1.0 / (2.0 * bandwidth * bandwidth)
        d2 = np.empty(n)
        for i in range(m):
            tx = targets[i, 0]
            ty = targets[i, 1]
            m2 = np.inf
            for j in range(n):
                dx = tx - sources[j, 0]
                dy = ty - sources[j, 1]
                d2[j] = dx * dx + dy * dy
                if d2[j] < m2:
                    m2 = d2[j]
            num = 0.0
            den = 0.0
            for j in range(n):
                w = np.exp(-(d2[j] - m2) * inv)
                num += w * values[j]
                den += w
            out[i] = num / den
            dmin[i] = np.sqrt(m2)
        return out, dmin


def nadaraya_watson(targets, sources, values, bandwidth: float):
    """Gaussian-kernel weighted average of ``values`` at each target.

    Weights are shifted by the nearest squared distance before
    exponentiation, so tiny bandwidths degrade to nearest-neighbour
    values instead of 0/0. Returns (estimates, distance to nearest source).
    """
    targets = np.ascontiguousarray(np.atleast_2d(targets), dtype=np.float64).reshape(-1, 2)
    sources = np.ascontiguousarray(np.atleast_2d(sources), dtype=np.float64).reshape(-1, 2)
    values = np.ascontiguousarray(values, dtype=np.float64).ravel()
    if _USE_NUMBA:
        return _nw_nb(targets, sources, values, float(bandwidth))
    return _nw_numpy(targets, sources, values, float(bandwidth))


# ---------------------------------------------------------------------------
# linear finite elements


def _element_numpy(nodes, triangles):
    p = nodes[triangles]  # (T, 3, 2)
    # edge vectors opposite each vertex
    e = np.stack([p[:, 2] - p[:, 1], p[:, 0] - p[:, 2], p[:, 1] - p[:, 0]], axis=1)
    signed = 0.5 * (e[:, 2, 0] * (-e[:, 1, 1]) - e[:, 2, 1] * (-e[:, 1, 0]))
    area = np.abs(signed)
    dots = np.einsum("tik,tjk->tij", e, e)
    with np.errstate(divide="ignore", invalid="ignore"):
        stiff = dots / (4.0 * area)[:, None, None]
    return signed, stiff


if HAVE_NUMBA:

    @njit(cache=True, error_model="numpy")
    def _element_nb(nodes, triangles):
        ntri = triangles.shape[0]
        signed = np.empty(ntri)
        stiff = np.empty((ntri, 3, 3))
        e = np.empty((3, 2))
        for t in range(ntri):
            i0 = triangles[t, 0]
            i1 = triangles[t, 1]
            i2 = triangles[t, 2]
            e[0, 0] = nodes[i2, 0] - nodes[i1, 0]
            e[0, 1] = nodes[i2, 1] - nodes[i1, 1]
            e[1, 0] = nodes[i0, 0] - nodes[i2, 0]
            e[1, 1] = nodes[i0, 1] - nodes[i2, 1]
            e[2, 0] = nodes[i1, 0] - nodes[i0, 0]
            e[2, 1] = nodes[i1, 1] - nodes[i0, 1]
            s = 0.5 * (e[2, 0] * (-e[1, 1]) - e[2, 1] * (-e[1, 0]))
            signed[t] = s
            a4 = 4.0 * abs(s)
            for i in range(3):
                for j in range(3):
                    stiff[t, i, j] = (e[i, 0] * e[j, 0] + e[i, 1] * e[j, 1]) / a4
        return signed, stiff


def element_matrices(nodes: np.ndarray, triangles: np.ndarray):
    """Signed areas and local P1 stiffness matrices for every triangle."""
    nodes = np.ascontiguousarray(nodes, dtype=np.float64)
    triangles = np.ascontiguousarray(triangles, dtype=np.int64)
    if _USE_NUMBA and triangles.shape[0]:
        return _element_nb(nodes, triangles)
    return _element_numpy(nodes, triangles)
