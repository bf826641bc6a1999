"""Triangulated computational domain, barycentric projection, quadrature
weights and linear finite-element matrices."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import shapely
import triangle as tr
from shapely.geometry import Polygon

from . import _kernels
from .errors import FemAssemblyError, InvalidDomainError

log = logging.getLogger(__name__)

MIN_ANGLE = 21.0


@dataclass(frozen=True)
class DomainPolygon:
    """Planar study region in projected km, optionally with holes."""

    vertices: np.ndarray
    holes: tuple = ()

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=float).reshape(-1, 2)
        if v.shape[0] >= 2 and np.allclose(v[0], v[-1]):
            v = v[:-1]
        object.__setattr__(self, "vertices", v)
        holes = tuple(np.asarray(h, dtype=float).reshape(-1, 2) for h in self.holes)
        object.__setattr__(self, "holes", holes)
        if v.shape[0] < 3:
            raise InvalidDomainError(f"domain needs at least 3 vertices, got {v.shape[0]}")
        geom = Polygon(v, [h for h in holes])
        if not geom.is_valid or geom.area <= 0.0:
            raise InvalidDomainError("domain ring is self-intersecting or has zero area")

    @property
    def geometry(self) -> Polygon:
        return Polygon(self.vertices, [h for h in self.holes])

    @property
    def area(self) -> float:
        return float(self.geometry.area)

    @property
    def bounds(self) -> tuple[float, float, float, float]:
        return tuple(self.geometry.bounds)

    def contains(self, points: np.ndarray) -> np.ndarray:
        """Closed containment test (boundary points count as inside)."""
        p = np.atleast_2d(np.asarray(points, dtype=float))
        return shapely.intersects_xy(self.geometry, p[:, 0], p[:, 1])

    @classmethod
    def rectangle(cls, x0: float, y0: float, x1: float, y1: float) -> "DomainPolygon":
        return cls(np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]], dtype=float))

    @classmethod
    def from_geometry(cls, geom) -> "DomainPolygon":
        if geom.geom_type == "MultiPolygon":
            geom = max(geom.geoms, key=lambda g: g.area)
        return cls(np.asarray(geom.exterior.coords), tuple(np.asarray(r.coords) for r in geom.interiors))

    def to_geojson(self) -> dict:
        rings = [self.vertices.tolist() + [self.vertices[0].tolist()]]
        rings += [h.tolist() + [h[0].tolist()] for h in self.holes]
        return {"type": "Polygon", "coordinates": rings}


def read_domain_geojson(path) -> DomainPolygon:
    """Read a GeoJSON Polygon (bare, Feature, or first feature of a collection)."""
    with open(path) as fh:
        obj = json.load(fh)
    if obj.get("type") == "FeatureCollection":
        obj = obj["features"][0]
    if obj.get("type") == "Feature":
        obj = obj["geometry"]
    if obj.get("type") != "Polygon":
        raise InvalidDomainError(f"{path}: expected a Polygon geometry, got {obj.get('type')}")
    rings = obj["coordinates"]
    if not rings:
        raise InvalidDomainError(f"{path}: empty polygon")
    return DomainPolygon(np.asarray(rings[0], dtype=float), tuple(np.asarray(r, dtype=float) for r in rings[1:]))


def write_domain_geojson(domain: DomainPolygon, path) -> None:
    with open(path, "w") as fh:
        json.dump(domain.to_geojson(), fh)


@dataclass(frozen=True)
class Mesh:
    nodes: np.ndarray
    triangles: np.ndarray
    boundary: np.ndarray = field(default=None)

    def __post_init__(self):
        nodes = np.ascontiguousarray(self.nodes, dtype=float).reshape(-1, 2)
        tris = np.ascontiguousarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if tris.size and (tris.min() < 0 or tris.max() >= nodes.shape[0]):
            raise InvalidDomainError("triangle index out of range")
        # orient counter-clockwise
        p = nodes[tris]
        signed = (p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1]) - (p[:, 1, 1] - p[:, 0, 1]) * (
            p[:, 2, 0] - p[:, 0, 0]
        )
        flip = signed < 0
        if flip.any():
            tris = tris.copy()
            tris[flip] = tris[flip][:, [0, 2, 1]]
        bnd = self.boundary
        if bnd is None:
            bnd = _boundary_nodes(tris, nodes.shape[0])
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "triangles", tris)
        object.__setattr__(self, "boundary", np.asarray(bnd, dtype=bool))

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def n_triangles(self) -> int:
        return self.triangles.shape[0]

    def edges(self) -> np.ndarray:
        e = np.concatenate([self.triangles[:, [0, 1]], self.triangles[:, [1, 2]], self.triangles[:, [2, 0]]])
        e.sort(axis=1)
        return np.unique(e, axis=0)

    def edge_lengths(self) -> np.ndarray:
        e = self.edges()
        return np.linalg.norm(self.nodes[e[:, 0]] - self.nodes[e[:, 1]], axis=1)

    def triangle_areas(self) -> np.ndarray:
        signed, _ = _kernels.element_matrices(self.nodes, self.triangles)
        return signed

    def covered_geometry(self):
        polys = shapely.polygons(self.nodes[self.triangles])
        return shapely.union_all(polys)

    def to_csv(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        with open(d / "nodes.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["id", "x", "y", "boundary"])
            for i, (x, y) in enumerate(self.nodes):
                w.writerow([i, repr(float(x)), repr(float(y)), int(self.boundary[i])])
        with open(d / "triangles.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["id", "n0", "n1", "n2"])
            for i, t in enumerate(self.triangles):
                w.writerow([i, int(t[0]), int(t[1]), int(t[2])])

    @classmethod
    def from_csv(cls, directory) -> "Mesh":
        d = Path(directory)
        nodes = _read_rows(d / "nodes.csv")
        tris = _read_rows(d / "triangles.csv")
        order = np.argsort([int(r["id"]) for r in nodes])
        xy = np.array([[float(nodes[i]["x"]), float(nodes[i]["y"])] for i in order])
        bnd = np.array([int(nodes[i]["boundary"]) for i in order], dtype=bool)
        torder = np.argsort([int(r["id"]) for r in tris])
        t = np.array([[int(tris[i]["n0"]), int(tris[i]["n1"]), int(tris[i]["n2"])] for i in torder])
        return cls(xy, t.reshape(-1, 3), bnd)


def _read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(line for line in fh if not line.startswith("#")))


def _boundary_nodes(tris, n):
    e = np.concatenate([tris[:, [0, 1]], tris[:, [1, 2]], tris[:, [2, 0]]])
    e.sort(axis=1)
    uniq, counts = np.unique(e, axis=0, return_counts=True)
    flags = np.zeros(n, dtype=bool)
    flags[uniq[counts == 1].ravel()] = True
    return flags


def _resample_ring(ring: np.ndarray, max_edge: float, cutoff: float) -> np.ndarray:
    """Drop vertices closer than ``cutoff`` and split long sides."""
    kept = [ring[0]]
    for p in ring[1:]:
        if np.linalg.norm(p - kept[-1]) >= cutoff:
            kept.append(p)
    while len(kept) > 3 and np.linalg.norm(kept[-1] - kept[0]) < cutoff:
        kept.pop()
    kept = np.asarray(kept)
    out = []
    for i in range(len(kept)):
        a = kept[i]
        b = kept[(i + 1) % len(kept)]
        k = max(1, int(np.ceil(np.linalg.norm(b - a) / max_edge - 1e-9)))
        for j in range(k):
            out.append(a + (b - a) * (j / k))
    return np.asarray(out)


def build_mesh(domain: DomainPolygon, max_edge: float, cutoff: float, min_angle: float = MIN_ANGLE) -> Mesh:
    """Constrained Delaunay refinement of ``domain``.

    Triangle's area bound is used first; triangles that still carry an edge
    longer than ``max_edge`` are split by repeated per-triangle area
    refinement until none remain.
    """
    if not isinstance(domain, DomainPolygon):
        domain = DomainPolygon(np.asarray(domain))
    if not (max_edge > cutoff > 0):
        raise ValueError(f"need max_edge > cutoff > 0, got max_edge={max_edge}, cutoff={cutoff}")
    rings = [_resample_ring(domain.vertices, max_edge, cutoff)]
    rings += [_resample_ring(h, max_edge, cutoff) for h in domain.holes]
    verts = []
    segs = []
    offset = 0
    for r in rings:
        n = len(r)
        verts.append(r)
        idx = np.arange(n) + offset
        segs.append(np.column_stack([idx, np.roll(idx, -1)]))
        offset += n
    pslg = {
        "vertices": np.vstack(verts),
        "segments": np.vstack(segs).astype(np.int32),
        "segment_markers": np.ones(offset, dtype=np.int32),
    }
    if domain.holes:
        pslg["holes"] = np.array([Polygon(h).representative_point().coords[0] for h in domain.holes])
    area = np.sqrt(3.0) / 4.0 * max_edge**2
    out = tr.triangulate(pslg, f"pq{min_angle:g}a{area:.17g}")
    for _ in range(30):
        nodes = out["vertices"]
        tris = out["triangles"]
        p = nodes[tris]
        longest = np.max(
            np.linalg.norm(p - np.roll(p, 1, axis=1), axis=2),
            axis=1,
        )
        bad = longest > max_edge * (1 + 1e-9)
        if not bad.any():
            break
        t_area = 0.5 * np.abs(
            (p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1]) - (p[:, 1, 1] - p[:, 0, 1]) * (p[:, 2, 0] - p[:, 0, 0])
        )
        limits = np.where(bad, 0.5 * t_area, -1.0)
        refine = {
            "vertices": nodes,
            "triangles": tris,
            "segments": out["segments"],
            "segment_markers": out.get("segment_markers", np.ones(len(out["segments"]), np.int32)),
            "vertex_markers": out["vertex_markers"],
            "triangle_max_area": limits,
        }
        if "holes" in out:
            refine["holes"] = out["holes"]
        out = tr.triangulate(refine, f"rpq{min_angle:g}a")
    else:
        log.warning("mesh refinement stopped with edges longer than max_edge")
    nodes = np.asarray(out["vertices"], dtype=float)
    tris = np.asarray(out["triangles"], dtype=np.int64)
    used = np.zeros(len(nodes), dtype=bool)
    used[tris.ravel()] = True
    if not used.all():
        remap = -np.ones(len(nodes), dtype=np.int64)
        remap[used] = np.arange(used.sum())
        nodes = nodes[used]
        tris = remap[tris]
    return Mesh(nodes, tris)


@dataclass(frozen=True)
class Projector:
    """Barycentric interpolation matrix (rows: locations, columns: nodes)."""

    A: sp.csr_matrix
    inside: np.ndarray

    @property
    def n_outside(self) -> int:
        return int((~self.inside).sum())

    def __matmul__(self, other):
        return self.A @ other


def barycentric_projector(mesh: Mesh, locations) -> Projector:
    locs = np.asarray(locations, dtype=float).reshape(-1, 2)
    tri, bary = _kernels.locate_points(mesh.nodes, mesh.triangles, locs)
    inside = tri >= 0
    bary = np.clip(bary, 0.0, None)
    bary[inside] /= bary[inside].sum(axis=1, keepdims=True)
    rows = np.repeat(np.nonzero(inside)[0], 3)
    cols = mesh.triangles[tri[inside]].ravel()
    vals = bary[inside].ravel()
    A = sp.csr_matrix((vals, (rows, cols)), shape=(locs.shape[0], mesh.n_nodes))
    A.eliminate_zeros()
    A.sort_indices()
    return Projector(A, inside)


def dual_weights(mesh: Mesh, domain) -> np.ndarray:
    """Areas of the barycentric dual cells of each node clipped to ``domain``.

    ``domain`` may be a DomainPolygon or any shapely areal geometry (e.g. an
    observation window with held-out regions removed).
    """
    geom = domain.geometry if isinstance(domain, DomainPolygon) else domain
    p = mesh.nodes[mesh.triangles]  # (T, 3, 2)
    area = np.abs(mesh.triangle_areas())
    weights = np.zeros(mesh.n_nodes)
    tri_polys = shapely.polygons(p)
    shapely.prepare(geom)
    inside = shapely.contains(geom, tri_polys)
    for k in range(3):
        np.add.at(weights, mesh.triangles[inside, k], area[inside] / 3.0)
    partial = np.nonzero(~inside)[0]
    if partial.size:
        q = p[partial]
        centroid = q.mean(axis=1)
        for k in range(3):
            a = q[:, k]
            m1 = 0.5 * (a + q[:, (k + 1) % 3])
            m2 = 0.5 * (a + q[:, (k + 2) % 3])
            cells = shapely.polygons(np.stack([a, m1, centroid, m2], axis=1))
            clipped = shapely.area(shapely.intersection(cells, geom))
            np.add.at(weights, mesh.triangles[partial, k], clipped)
    return weights


@dataclass(frozen=True)
class FemMatrices:
    C: np.ndarray  # lumped mass diagonal, km^2
    G: sp.csr_matrix

    @property
    def C_matrix(self) -> sp.dia_matrix:
        return sp.diags(self.C)


def fem_matrices(mesh: Mesh) -> FemMatrices:
    signed, local = _kernels.element_matrices(mesh.nodes, mesh.triangles)
    area = np.abs(signed)
    scale = np.sqrt(np.max(area)) if area.size else 1.0
    bad = np.nonzero(area <= 1e-14 * max(scale, 1e-300) ** 2)[0]
    if bad.size:
        t = int(bad[0])
        raise FemAssemblyError(t, f"triangle {t} has zero area (nodes {mesh.triangles[t].tolist()})")
    C = np.zeros(mesh.n_nodes)
    for k in range(3):
        np.add.at(C, mesh.triangles[:, k], area / 3.0)
    rows = np.repeat(mesh.triangles, 3, axis=1).ravel()
    cols = np.tile(mesh.triangles, (1, 3)).ravel()
    G = sp.csr_matrix((local.ravel(), (rows, cols)), shape=(mesh.n_nodes, mesh.n_nodes))
    G = 0.5 * (G + G.T)
    G.sort_indices()
    return FemMatrices(C, G.tocsr())
