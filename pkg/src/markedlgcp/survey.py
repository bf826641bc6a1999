"""Synthetic populations, two-stage systematic sampling and direct estimates.

A population is a set of residential buildings drawn from a log-Gaussian
Cox process, each holding one or more dwellings with people classified as
employed, unemployed or inactive. Strata are unions of counties; the
primary sampling units ("areas") are the 1 km grid cells of a stratum and
the secondary units are dwellings.

Within a stratum the dwelling frame is sorted by the Morton key of its
cell, then by the Morton key of the building, building id and dwelling id,
so every area and every building occupies a contiguous run of the frame.
Areas are chosen by systematic sampling along that frame with interval
K_h, dwellings inside a chosen area by systematic sampling with interval
K_jh = A_jh / n_jh.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import shapely
from shapely.geometry import box, mapping, shape

from . import _kernels
from .errors import DesignError, InvalidDomainError
from .mesh import DomainPolygon, barycentric_projector, build_mesh, fem_matrices
from .model import MarkedSample
from .spde import InterpretableParams, precision, sample_gmrf, to_spde
from .surface import PixelGrid, Surface

log = logging.getLogger(__name__)

EMPLOYMENT_STATES = ("employed", "unemployed", "inactive")


# ---------------------------------------------------------------------------
# regions


@dataclass(frozen=True)
class Region:
    id: str
    geometry: object  # shapely polygon
    parent: str | None = None

    @property
    def area(self) -> float:
        return float(self.geometry.area)


def grid_regions(bounds, nx: int, ny: int, prefix: str = "R", parents=None) -> list[Region]:
    """Split a rectangle into nx * ny equal rectangles, numbered row-major from the lower left."""
    x0, y0, x1, y1 = bounds
    dx = (x1 - x0) / nx
    dy = (y1 - y0) / ny
    out = []
    for j in range(ny):
        for i in range(nx):
            k = j * nx + i
            parent = None if parents is None else parents(i, j)
            out.append(Region(f"{prefix}{k:03d}", box(x0 + i * dx, y0 + j * dy, x0 + (i + 1) * dx, y0 + (j + 1) * dy), parent))
    return out


def assign_regions(regions, xy) -> np.ndarray:
    """Index of the first region containing each point, -1 if none."""
    xy = np.asarray(xy, dtype=float).reshape(-1, 2)
    out = np.full(len(xy), -1, dtype=np.int64)
    for k, r in enumerate(regions):
        hit = (out < 0) & shapely.intersects_xy(r.geometry, xy[:, 0], xy[:, 1])
        out[hit] = k
    return out


def write_regions_geojson(path, regions) -> None:
    feats = []
    for r in regions:
        props = {"id": r.id}
        if r.parent is not None:
            props["parent"] = r.parent
        feats.append({"type": "Feature", "properties": props, "geometry": mapping(r.geometry)})
    with open(path, "w") as fh:
        json.dump({"type": "FeatureCollection", "features": feats}, fh)


def read_regions_geojson(path) -> list[Region]:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("type") != "FeatureCollection":
        raise InvalidDomainError(f"{path}: expected a FeatureCollection")
    out = []
    for f in doc["features"]:
        props = f.get("properties") or {}
        if "id" not in props:
            raise InvalidDomainError(f"{path}: feature without an id property")
        geom = shape(f["geometry"])
        if not geom.is_valid or geom.area <= 0:
            raise InvalidDomainError(f"{path}: region {props['id']} has an invalid geometry")
        out.append(Region(str(props["id"]), geom, props.get("parent")))
    return out


# ---------------------------------------------------------------------------
# population


@dataclass
class PopulationConfig:
    """Truth and layout of a rectangular synthetic world (lengths in km).

    log lambda1*(s) = alpha1 + log D(s) + W1(s) gives building density per
    km^2, with log D a sum of Gaussian bumps. Each person in building b is
    unemployed at rate exp(alpha2 + b_edu edu_b + b_age age_b + b_iefp
    iefp_b + field term), so the building's expected unemployed count is
    that rate times its number of people.
    """

    width: float = 10.0
    height: float = 10.0
    counties: tuple = (2, 2)
    counties_per_stratum: tuple = (1, 1)
    cell: float = 1.0
    alpha1: float = 3.0
    density_bumps: tuple = ()  # (x, y, amplitude on log scale, scale km)
    field_mode: str = "none"  # none | shared | scaled | independent
    sigma1: float = 1.0
    rho1: float = 3.0
    sigma2: float = 1.0
    rho2: float = 3.0
    alpha3: float = 1.0
    alpha2: float = -2.5
    mark_effects: dict = field(default_factory=lambda: {"edu": 0.0, "age": 0.0, "iefp": 0.0})
    dwellings_extra: float = 1.0  # dwellings per building = 1 + Poisson(.)
    people_extra: float = 1.5  # people per dwelling = 1 + Poisson(.)
    edu_probs: tuple = (0.45, 0.35, 0.20)
    edu_fidelity: float = 0.8
    age_range: tuple = (30.0, 60.0)
    age_sd: float = 10.0
    iefp_range: tuple = (0.04, 0.10)
    inactive_share: float = 0.35
    sim_max_edge: float = 0.5

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0 or self.cell <= 0:
            raise InvalidDomainError("domain and cell sizes must be positive")
        if self.field_mode not in ("none", "shared", "scaled", "independent"):
            raise ValueError(f"unknown field mode {self.field_mode!r}")
        if min(self.dwellings_extra, self.people_extra) < 0:
            raise ValueError("negative Poisson rates in the population config")
        p = np.asarray(self.edu_probs, dtype=float)
        if p.shape != (3,) or np.any(p < 0) or abs(p.sum() - 1) > 1e-9:
            raise ValueError("edu_probs must be three nonnegative shares summing to 1")
        if not 0 <= self.inactive_share <= 1 or not 0 <= self.edu_fidelity <= 1:
            raise ValueError("shares must lie in [0, 1]")
        cx, cy = self.counties
        sx, sy = self.counties_per_stratum
        if cx % sx or cy % sy:
            raise ValueError("county grid must divide evenly into strata")
        for k in ("sigma1", "rho1", "sigma2", "rho2"):
            if getattr(self, k) <= 0:
                raise ValueError(f"{k} must be positive")
        self.counties = tuple(int(v) for v in self.counties)
        self.counties_per_stratum = tuple(int(v) for v in self.counties_per_stratum)
        self.density_bumps = tuple(tuple(float(v) for v in b) for b in self.density_bumps)
        self.mark_effects = {k: float(self.mark_effects.get(k, 0.0)) for k in ("edu", "age", "iefp")}

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = [list(x) if isinstance(x, tuple) else x for x in v]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PopulationConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        for k in ("counties", "counties_per_stratum", "edu_probs", "age_range", "iefp_range"):
            if k in known:
                known[k] = tuple(known[k])
        if "density_bumps" in known:
            known["density_bumps"] = tuple(tuple(b) for b in known["density_bumps"])
        return cls(**known)

    @property
    def bounds(self) -> tuple:
        return (0.0, 0.0, float(self.width), float(self.height))

    def log_density(self, xy) -> np.ndarray:
        xy = np.asarray(xy, dtype=float).reshape(-1, 2)
        out = np.zeros(len(xy))
        for x, y, amp, scale in self.density_bumps:
            d2 = (xy[:, 0] - x) ** 2 + (xy[:, 1] - y) ** 2
            out += amp * np.exp(-0.5 * d2 / scale**2)
        return out

    def iefp(self, xy) -> np.ndarray:
        """Registered-unemployment share: a linear west-east gradient."""
        lo, hi = self.iefp_range
        return lo + (hi - lo) * np.clip(np.asarray(xy)[:, 0] / self.width, 0, 1)


BUILDING_COLUMNS = (
    "id", "x", "y", "stratum", "county", "cell", "n_dwellings", "people", "unemployed",
    "edu", "age", "iefp", "log_lambda1", "log_lambda2",
)
DWELLING_COLUMNS = (
    "building_id", "dwelling_id", "people", "unemployed", "employed", "inactive", "edu1", "edu2", "edu3", "age_sum",
)
_INT_COLS = {"id", "stratum", "county", "cell", "n_dwellings", "people", "unemployed", "edu",
             "building_id", "dwelling_id", "employed", "inactive", "edu1", "edu2", "edu3"}


def _table_to_csv(path, columns, data: dict, header=None):
    with open(path, "w", newline="") as fh:
        if header:
            fh.write(header.rstrip("\n") + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        cols = [data[c] for c in columns]
        for row in zip(*cols):
            w.writerow([int(v) if c in _INT_COLS else repr(float(v)) for c, v in zip(columns, row)])


def _table_from_csv(path, columns) -> dict:
    with open(path, newline="") as fh:
        reader = csv.reader(line for line in fh if not line.startswith("#"))
        head = tuple(next(reader))
        if head != tuple(columns):
            raise ValueError(f"{path}: expected columns {','.join(columns)}, got {','.join(head)}")
        rows = list(reader)
    out = {}
    for k, c in enumerate(columns):
        if c in _INT_COLS:
            out[c] = np.array([int(r[k]) for r in rows], dtype=np.int64)
        else:
            out[c] = np.array([float(r[k]) for r in rows])
    return out


@dataclass
class Population:
    config: PopulationConfig
    domain: DomainPolygon
    strata: list
    counties: list
    grid: PixelGrid
    buildings: dict  # BUILDING_COLUMNS -> arrays
    dwellings: dict  # DWELLING_COLUMNS -> arrays, sorted by (building_id, dwelling_id)
    offset1: Surface  # log density on the 1 km grid

    @property
    def n_buildings(self) -> int:
        return len(self.buildings["id"])

    @property
    def n_dwellings(self) -> int:
        return len(self.dwellings["building_id"])

    @property
    def locations(self) -> np.ndarray:
        return np.column_stack([self.buildings["x"], self.buildings["y"]])

    def dwelling_building_index(self) -> np.ndarray:
        """Row in ``buildings`` of every dwelling."""
        return np.searchsorted(self.buildings["id"], self.dwellings["building_id"])

    def region_totals(self, regions=None, which: str = "county") -> np.ndarray:
        """True unemployed totals per region."""
        if regions is None:
            idx = self.buildings[which]
            n = len(self.counties if which == "county" else self.strata)
        else:
            idx = assign_regions(regions, self.locations)
            n = len(regions)
        ok = idx >= 0
        return np.bincount(idx[ok], weights=self.buildings["unemployed"][ok], minlength=n)

    def write(self, outdir, header: str | None = None) -> None:
        import os

        os.makedirs(outdir, exist_ok=True)
        _table_to_csv(os.path.join(outdir, "population.csv"), BUILDING_COLUMNS, self.buildings, header)
        _table_to_csv(os.path.join(outdir, "dwellings.csv"), DWELLING_COLUMNS, self.dwellings, header)
        write_regions_geojson(os.path.join(outdir, "strata.geojson"), self.strata)
        write_regions_geojson(os.path.join(outdir, "regions.geojson"), self.counties)
        with open(os.path.join(outdir, "domain.geojson"), "w") as fh:
            json.dump(self.domain.to_geojson(), fh)
        self.offset1.to_csv(os.path.join(outdir, "surface_offset1.csv"), header)
        with open(os.path.join(outdir, "population.json"), "w") as fh:
            json.dump({"config": self.config.to_dict(), "grid": asdict(self.grid)}, fh, indent=2)

    @classmethod
    def read(cls, outdir) -> "Population":
        import os

        with open(os.path.join(outdir, "population.json")) as fh:
            meta = json.load(fh)
        cfg = PopulationConfig.from_dict(meta["config"])
        grid = PixelGrid(**meta["grid"])
        b = _table_from_csv(os.path.join(outdir, "population.csv"), BUILDING_COLUMNS)
        d = _table_from_csv(os.path.join(outdir, "dwellings.csv"), DWELLING_COLUMNS)
        strata = read_regions_geojson(os.path.join(outdir, "strata.geojson"))
        counties = read_regions_geojson(os.path.join(outdir, "regions.geojson"))
        off = Surface.from_csv(os.path.join(outdir, "surface_offset1.csv"), "offset1")
        return cls(cfg, DomainPolygon.rectangle(*cfg.bounds), strata, counties, grid, b, d, off)


def _world_layout(cfg: PopulationConfig):
    cx, cy = cfg.counties
    sx, sy = cfg.counties_per_stratum
    nsx = cx // sx
    strata = grid_regions(cfg.bounds, nsx, cy // sy, prefix="S")
    counties = grid_regions(cfg.bounds, cx, cy, prefix="C", parents=lambda i, j: f"S{(j // sy) * nsx + i // sx:03d}")
    return strata, counties


def _simulate_fields(cfg: PopulationConfig, rng):
    """Truth fields at the nodes of a fine simulation mesh."""
    dom = DomainPolygon.rectangle(*cfg.bounds)
    mesh = build_mesh(dom, cfg.sim_max_edge, 0.2 * cfg.sim_max_edge)
    fem = fem_matrices(mesh)
    n = mesh.n_nodes
    w1 = np.zeros(n)
    w2 = np.zeros(n)
    if cfg.field_mode != "none":
        Q1 = precision(to_spde(InterpretableParams(cfg.sigma1, cfg.rho1)), fem)
        w1 = sample_gmrf(Q1, 1, rng)[0]
        if cfg.field_mode == "shared":
            w2 = w1
        elif cfg.field_mode == "scaled":
            w2 = cfg.alpha3 * w1
        else:
            Q2 = precision(to_spde(InterpretableParams(cfg.sigma2, cfg.rho2)), fem)
            w2 = sample_gmrf(Q2, 1, rng)[0]
    return mesh, w1, w2


def generate_population(cfg: PopulationConfig, seed) -> Population:
    """Draw a synthetic world; identical seeds give identical populations."""
    rng = np.random.default_rng(seed)
    strata, counties = _world_layout(cfg)
    domain = DomainPolygon.rectangle(*cfg.bounds)
    mesh, w1, w2 = _simulate_fields(cfg, rng)

    # buildings by thinning a dominating homogeneous process; the log
    # intensity is linear on each triangle, so its maximum is at a node
    eta_nodes = cfg.alpha1 + cfg.log_density(mesh.nodes) + w1
    eta_max = float(eta_nodes.max())
    x0, y0, x1, y1 = cfg.bounds
    lam_max = math.exp(eta_max)
    n_cand = rng.poisson(lam_max * (x1 - x0) * (y1 - y0))
    cand = np.column_stack([rng.uniform(x0, x1, n_cand), rng.uniform(y0, y1, n_cand)])
    proj = barycentric_projector(mesh, cand)
    eta = proj.A @ eta_nodes
    keep = proj.inside & (rng.random(n_cand) < np.exp(eta - eta_max))
    xy = cand[keep]
    eta1 = eta[keep]
    w2b = (proj.A @ w2)[keep]
    nb = len(xy)
    if nb == 0:
        raise DesignError("the configured intensity produced no buildings")

    stratum = assign_regions(strata, xy)
    county = assign_regions(counties, xy)
    grid = PixelGrid.covering(cfg.bounds, cfg.cell)
    cell = grid.cell_index(xy, clamp=True)

    # building attributes
    n_dw = 1 + rng.poisson(cfg.dwellings_extra, nb)
    edu_b = 1 + rng.choice(3, size=nb, p=np.asarray(cfg.edu_probs))
    age_b = rng.uniform(*cfg.age_range, nb)
    iefp_b = cfg.iefp(xy)
    eff = cfg.mark_effects
    log_rate = cfg.alpha2 + eff["edu"] * edu_b + eff["age"] * age_b + eff["iefp"] * iefp_b + w2b

    # dwellings, grouped by building
    bidx = np.repeat(np.arange(nb), n_dw)
    did = np.arange(bidx.size) - np.repeat(np.cumsum(n_dw) - n_dw, n_dw)
    people = 1 + rng.poisson(cfg.people_extra, bidx.size)
    unemployed = np.minimum(rng.poisson(np.exp(log_rate[bidx]) * people), people)
    rest = people - unemployed
    inactive = rng.binomial(rest, cfg.inactive_share)
    employed = rest - inactive
    probs = np.full((nb, 3), (1.0 - cfg.edu_fidelity) / 3.0)
    probs[np.arange(nb), edu_b - 1] += cfg.edu_fidelity
    edu_counts = rng.multinomial(people, probs[bidx])
    age_sum = people * age_b[bidx] + np.sqrt(people) * cfg.age_sd * rng.standard_normal(bidx.size)

    people_b = np.bincount(bidx, weights=people, minlength=nb).astype(np.int64)
    unemp_b = np.bincount(bidx, weights=unemployed, minlength=nb).astype(np.int64)
    ids = np.arange(1, nb + 1, dtype=np.int64)
    buildings = {
        "id": ids, "x": xy[:, 0], "y": xy[:, 1], "stratum": stratum, "county": county, "cell": cell,
        "n_dwellings": n_dw.astype(np.int64), "people": people_b, "unemployed": unemp_b, "edu": edu_b.astype(np.int64),
        "age": age_b, "iefp": iefp_b, "log_lambda1": eta1, "log_lambda2": log_rate + np.log(people_b),
    }
    dwellings = {
        "building_id": ids[bidx], "dwelling_id": did.astype(np.int64) + 1, "people": people.astype(np.int64),
        "unemployed": unemployed.astype(np.int64), "employed": employed.astype(np.int64),
        "inactive": inactive.astype(np.int64), "edu1": edu_counts[:, 0], "edu2": edu_counts[:, 1],
        "edu3": edu_counts[:, 2], "age_sum": age_sum,
    }
    offset1 = Surface(grid, cfg.log_density(grid.centers()), np.ones(grid.size, bool), float("nan"), "offset1")
    log.info("generated %d buildings, %d dwellings", nb, bidx.size)
    return Population(cfg, domain, strata, counties, grid, buildings, dwellings, offset1)


# ---------------------------------------------------------------------------
# sampling design


def _part1by1(v):
    v = v.astype(np.uint64) & np.uint64(0xFFFFFFFF)
    v = (v | (v << np.uint64(16))) & np.uint64(0x0000FFFF0000FFFF)
    v = (v | (v << np.uint64(8))) & np.uint64(0x00FF00FF00FF00FF)
    v = (v | (v << np.uint64(4))) & np.uint64(0x0F0F0F0F0F0F0F0F)
    v = (v | (v << np.uint64(2))) & np.uint64(0x3333333333333333)
    v = (v | (v << np.uint64(1))) & np.uint64(0x5555555555555555)
    return v


def morton_key(ix, iy) -> np.ndarray:
    """Z-order key of nonnegative integer coordinates (< 2**32 each)."""
    ix = np.asarray(ix)
    iy = np.asarray(iy)
    if np.any(ix < 0) or np.any(iy < 0):
        raise ValueError("Morton coordinates must be nonnegative")
    return _part1by1(ix) | (_part1by1(iy) << np.uint64(1))


@dataclass(frozen=True)
class StratumDesign:
    stratum: str
    s_h: int  # areas to select
    n_jh: int  # dwellings per selected area (census if the area is smaller)
    n_h: int | None = None  # dwellings to select in the stratum (literal interval rule)

    def __post_init__(self):
        if self.s_h < 1 or self.n_jh < 1:
            raise DesignError(f"stratum {self.stratum}: s_h and n_jh must be at least 1")
        if self.n_h is not None and self.n_h < 1:
            raise DesignError(f"stratum {self.stratum}: n_h must be at least 1")


@dataclass(frozen=True)
class DesignSpec:
    """Per-stratum sample sizes. ``k_rule`` picks the first-stage interval:
    ``"literal"`` uses K_h = A_h / n_h when n_h is given (else A_h / s_h),
    ``"areas"`` always uses K_h = A_h / s_h."""

    strata: tuple
    k_rule: str = "literal"

    def __post_init__(self):
        if self.k_rule not in ("literal", "areas"):
            raise DesignError(f"unknown interval rule {self.k_rule!r}")
        ids = [s.stratum for s in self.strata]
        if len(set(ids)) != len(ids):
            raise DesignError("duplicate strata in design")

    def for_stratum(self, sid: str) -> StratumDesign:
        for s in self.strata:
            if s.stratum == sid:
                return s
        raise DesignError(f"stratum {sid} missing from the design")

    def to_dict(self) -> dict:
        return {"k_rule": self.k_rule, "strata": [asdict(s) for s in self.strata]}

    @classmethod
    def from_dict(cls, d) -> "DesignSpec":
        return cls(tuple(StratumDesign(**s) for s in d["strata"]), d.get("k_rule", "literal"))

    def write(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    @classmethod
    def read(cls, path) -> "DesignSpec":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def proportional_design(pop: Population, fraction: float, n_jh: int, k_rule: str = "areas") -> DesignSpec:
    """s_h proportional to the stratum's dwelling count, giving p_ijh close to ``fraction``."""
    if not 0 < fraction <= 1:
        raise DesignError("sampling fraction must lie in (0, 1]")
    bstr = pop.buildings["stratum"][pop.dwelling_building_index()]
    A = np.bincount(bstr, minlength=len(pop.strata))
    out = []
    for k, r in enumerate(pop.strata):
        if A[k] == 0:
            continue
        s = max(1, int(round(fraction * A[k] / n_jh)))
        out.append(StratumDesign(r.id, s, int(n_jh)))
    return DesignSpec(tuple(out), k_rule)


@dataclass
class SamplingFrame:
    """Dwellings in selection order, with the contiguous run of every area."""

    order: np.ndarray  # dwelling rows in frame order
    stratum_ids: list
    stratum_slices: list  # slice into ``order`` per stratum
    area_start: list  # per stratum: start of each area, relative to the stratum slice
    area_size: list  # per stratum: A_jh
    area_cell: list  # per stratum: cell id of each area


def build_frame(pop: Population) -> SamplingFrame:
    b = pop.buildings
    drow = pop.dwelling_building_index()
    cell = b["cell"][drow]
    cx = cell % pop.grid.nx
    cy = cell // pop.grid.nx
    span = max(pop.grid.nx, pop.grid.ny) * pop.grid.cell
    q = (1 << 20) / span
    bx = np.floor((b["x"] - pop.grid.x0) * q).astype(np.int64).clip(0, (1 << 20) - 1)
    by = np.floor((b["y"] - pop.grid.y0) * q).astype(np.int64).clip(0, (1 << 20) - 1)
    bkey = morton_key(bx, by)[drow]
    ckey = morton_key(cx, cy)
    strat = b["stratum"][drow]
    order = np.lexsort((pop.dwellings["dwelling_id"], pop.dwellings["building_id"], bkey, cell, ckey, strat))
    s_sorted = strat[order]
    slices, starts, sizes, cells, ids = [], [], [], [], []
    for k, r in enumerate(pop.strata):
        lo = int(np.searchsorted(s_sorted, k, "left"))
        hi = int(np.searchsorted(s_sorted, k, "right"))
        c = cell[order[lo:hi]]
        if c.size:
            brk = np.concatenate([[0], np.nonzero(np.diff(c))[0] + 1])
            size = np.diff(np.concatenate([brk, [c.size]]))
        else:
            brk = np.zeros(0, np.int64)
            size = np.zeros(0, np.int64)
        ids.append(r.id)
        slices.append(slice(lo, hi))
        starts.append(brk.astype(np.int64))
        sizes.append(size.astype(np.int64))
        cells.append(c[brk] if c.size else np.zeros(0, np.int64))
    return SamplingFrame(order, ids, slices, starts, sizes, cells)


def _uniform_start(K, rng, size=None):
    """u ~ U(0, K]; the k-th systematic position is ceil(u + k K)."""
    return np.asarray(K) * (1.0 - rng.random(size))


def stratum_interval(A_h: int, sd: StratumDesign, k_rule: str = "literal") -> float:
    if k_rule == "literal" and sd.n_h is not None:
        return max(A_h / sd.n_h, 1.0)
    return max(A_h / sd.s_h, 1.0)


@dataclass
class AreaSelection:
    index: np.ndarray  # positions of selected areas in the frame
    p: np.ndarray  # p_jh of the selected areas
    K: float
    start: int  # first selected frame position (1-based)


def area_inclusion_probability(A_jh, K) -> np.ndarray:
    """p_jh = A_jh / K_h for areas smaller than the interval, 1 otherwise."""
    A_jh = np.asarray(A_jh, dtype=float)
    return np.where(A_jh < K, A_jh / K, 1.0)


def select_areas(area_sizes, s_h: int, rng, K: float | None = None) -> AreaSelection:
    """Systematic selection of areas along a frame of contiguous dwelling runs.

    With total A_h dwellings and interval K_h (default A_h / s_h), positions
    ceil(u + k K_h), u ~ U(0, K_h], hit dwellings; the areas holding them are
    selected, each with probability min(1, A_jh / K_h).
    """
    sizes = np.asarray(area_sizes, dtype=np.int64)
    A_h = int(sizes.sum())
    if sizes.size == 0 or A_h == 0:
        raise DesignError("empty stratum")
    if K is None:
        if s_h < 1:
            raise DesignError("s_h must be at least 1")
        K = max(A_h / s_h, 1.0)
    u = float(_uniform_start(K, rng))
    pos = np.ceil(u + K * np.arange(int(math.floor((A_h - u) / K)) + 1)).astype(np.int64)
    pos = pos[(pos >= 1) & (pos <= A_h)]
    ends = np.cumsum(sizes)
    idx = np.unique(np.searchsorted(ends, pos, side="left"))
    return AreaSelection(idx, area_inclusion_probability(sizes[idx], K), float(K), int(pos[0]) if pos.size else 0)


def select_dwellings(A_jh: int, n_jh: int, rng):
    """Systematic selection of n_jh of A_jh dwellings.

    Returns (0-based positions, p_{i|jh}, K_jh, first position).
    """
    if n_jh < 1:
        raise DesignError("n_jh must be at least 1")
    if n_jh > A_jh:
        raise DesignError(f"cannot select {n_jh} of {A_jh} dwellings")
    K = A_jh / n_jh
    u = float(_uniform_start(K, rng))
    pos = np.minimum(np.ceil(u + K * np.arange(n_jh)).astype(np.int64), A_jh)
    return pos - 1, n_jh / A_jh, K, int(pos[0])


@dataclass
class DesignDraw:
    K_h: dict
    start_h: dict
    area_stratum: np.ndarray
    area_cell: np.ndarray
    area_size: np.ndarray  # A_jh
    area_p: np.ndarray  # p_jh
    area_n: np.ndarray  # n_jh actually taken
    dwellings: np.ndarray  # selected dwelling rows
    p_area: np.ndarray  # per selected dwelling
    p_dwel: np.ndarray  # per selected dwelling

    @property
    def p_ijh(self) -> np.ndarray:
        return self.p_area * self.p_dwel


def draw_design(pop: Population, design: DesignSpec, rng, frame: SamplingFrame | None = None) -> DesignDraw:
    frame = frame or build_frame(pop)
    K_h, start_h = {}, {}
    a_str, a_cell, a_size, a_p, a_n, sel, p_a, p_d = [], [], [], [], [], [], [], []
    for k, sid in enumerate(frame.stratum_ids):
        sizes = frame.area_size[k]
        if sizes.size == 0:
            continue
        sd = design.for_stratum(sid)
        K = stratum_interval(int(sizes.sum()), sd, design.k_rule)
        asel = select_areas(sizes, sd.s_h, rng, K=K)
        K_h[sid] = K
        start_h[sid] = asel.start
        A = sizes[asel.index]
        n = np.minimum(sd.n_jh, A)
        # second stage, vectorised over the selected areas
        Kj = A / n
        u = _uniform_start(Kj, rng, A.size)
        kk = np.arange(int(n.max()))
        pos = np.minimum(np.ceil(u[:, None] + kk[None, :] * Kj[:, None]), A[:, None]).astype(np.int64)
        take = kk[None, :] < n[:, None]
        rows = (frame.stratum_slices[k].start + frame.area_start[k][asel.index])[:, None] + pos - 1
        sel.append(frame.order[rows[take]])
        p_a.append(np.broadcast_to(asel.p[:, None], take.shape)[take])
        p_d.append(np.broadcast_to((n / A)[:, None], take.shape)[take])
        a_str.append(np.full(A.size, k))
        a_cell.append(frame.area_cell[k][asel.index])
        a_size.append(A)
        a_p.append(asel.p)
        a_n.append(n)
    cat = lambda xs, dt=float: np.concatenate(xs) if xs else np.zeros(0, dt)
    return DesignDraw(K_h, start_h, cat(a_str, np.int64), cat(a_cell, np.int64), cat(a_size, np.int64), cat(a_p),
                      cat(a_n, np.int64), cat(sel, np.int64), cat(p_a), cat(p_d))


def _median_from_counts(c1, c2, c3) -> np.ndarray:
    n = c1 + c2 + c3
    def at(i):
        return np.where(i < c1, 1.0, np.where(i < c1 + c2, 2.0, 3.0))
    return 0.5 * (at((n - 1) // 2) + at(n // 2))


def aggregate_sample(pop: Population, draw: DesignDraw) -> MarkedSample:
    """One row per building with at least one selected dwelling."""
    d = pop.dwellings
    rows = np.sort(draw.dwellings)
    order = np.argsort(draw.dwellings, kind="stable")
    p_area = draw.p_area[order]
    p_dwel = draw.p_dwel[order]
    bid = d["building_id"][rows]
    ub, first = np.unique(bid, return_index=True)
    grp = np.searchsorted(ub, bid)
    m = ub.size
    s = lambda v: np.bincount(grp, weights=v, minlength=m)
    people = s(d["people"][rows])
    c1, c2, c3 = (s(d[f"edu{j}"][rows]).astype(np.int64) for j in (1, 2, 3))
    brow = np.searchsorted(pop.buildings["id"], ub)
    if not (np.allclose(s(p_area) / np.bincount(grp, minlength=m), p_area[first])
            and np.allclose(s(p_dwel) / np.bincount(grp, minlength=m), p_dwel[first])):
        raise DesignError("dwellings of one building carry different inclusion probabilities")
    return MarkedSample(
        ids=ub,
        x=pop.buildings["x"][brow],
        y=pop.buildings["y"][brow],
        mark=s(d["unemployed"][rows]).astype(np.int64),
        nind=people,
        edu=_median_from_counts(c1, c2, c3),
        age=s(d["age_sum"][rows]) / people,
        iefp=pop.buildings["iefp"][brow],
        offset2=np.log(people),
        p_area=p_area[first],
        p_dwel=p_dwel[first],
    )


def run_survey(pop: Population, design: DesignSpec, seed, frame: SamplingFrame | None = None,
               return_draw: bool = False):
    """Two-stage selection followed by per-building aggregation."""
    rng = np.random.default_rng(seed)
    draw = draw_design(pop, design, rng, frame)
    sample = aggregate_sample(pop, draw)
    return (sample, draw) if return_draw else sample


# ---------------------------------------------------------------------------
# direct estimation


@dataclass(frozen=True)
class DirectEstimate:
    total: float
    variance: float
    n: int
    empty: bool
    approximate: bool = True  # with-replacement variance

    @property
    def sd(self) -> float:
        return math.sqrt(self.variance)


def ht_estimate(sample: MarkedSample, region=None, mask=None) -> DirectEstimate:
    """Horvitz-Thompson total of the marks over buildings in ``region``.

    The variance uses the with-replacement form sum (1 - p) / p^2 y^2
    because systematic designs leave many joint inclusion probabilities at 0.
    """
    p = sample.p_ijh
    if np.any(~(p > 0)):
        raise DesignError("zero inclusion probability in the sample")
    if mask is None:
        if region is None:
            mask = np.ones(len(sample), bool)
        else:
            geom = getattr(region, "geometry", region)
            mask = shapely.intersects_xy(geom, sample.x, sample.y)
    y = sample.mark[mask].astype(float)
    pm = p[mask]
    if y.size == 0:
        return DirectEstimate(0.0, 0.0, 0, True)
    total = float(np.sum(y / pm))
    var = float(np.sum((1.0 - pm) / pm**2 * y**2))
    return DirectEstimate(total, var, int(y.size), False)


# ---------------------------------------------------------------------------
# kernel surfaces


def kernel_smooth(locations, values, bandwidth: float, grid: PixelGrid, name: str = "") -> Surface:
    """Gaussian-kernel Nadaraya-Watson surface at the grid cell centres.

    Cells farther than 6 bandwidths from every point take the global mean
    and are flagged invalid.
    """
    locations = np.asarray(locations, dtype=float).reshape(-1, 2)
    values = np.asarray(values, dtype=float).ravel()
    if len(locations) == 0 or len(locations) != len(values):
        raise ValueError("kernel smoothing needs matching, nonempty locations and values")
    if not bandwidth > 0:
        raise ValueError("bandwidth must be positive")
    est, dmin = _kernels.nadaraya_watson(grid.centers(), locations, values, bandwidth)
    valid = dmin <= 6.0 * bandwidth
    est = np.where(valid, est, float(values.mean()))
    return Surface(grid, est, valid, float(bandwidth), name)


SURFACE_NAMES = ("nind", "edu", "age", "iefp", "offset2", "p", "p_area", "p_dwel")


def sample_surfaces(sample: MarkedSample, grid: PixelGrid, bandwidth: float) -> dict:
    """Covariate, offset and inclusion-probability surfaces from a sample.

    ``offset2`` is the log of the smoothed people count (not the smoothed
    log). ``p_dwel`` is p / p_area so the two factors multiply back to the
    smoothed combined probability.
    """
    loc = sample.locations
    out = {}
    for name in ("nind", "edu", "age", "iefp"):
        out[name] = kernel_smooth(loc, getattr(sample, name), bandwidth, grid, name)
    out["offset2"] = out["nind"].map(np.log, "offset2")
    out["p"] = kernel_smooth(loc, sample.p_ijh, bandwidth, grid, "p")
    out["p_area"] = kernel_smooth(loc, sample.p_area, bandwidth, grid, "p_area")
    p_dwel = np.clip(out["p"].values / out["p_area"].values, 1e-12, 1.0)
    out["p_dwel"] = Surface(grid, p_dwel, out["p"].valid & out["p_area"].valid, bandwidth, "p_dwel")
    return out
