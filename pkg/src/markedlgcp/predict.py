"""Pixel intensities, thinning correction and regional predictive totals.

The total of marks in a region A is a compound sum over the buildings in
A. Conditional on the intensities, with lambda1* and lambda2* constant on
each pixel I_j, its mean and variance are

    m = sum_j |I_j| lambda1* lambda2*
    v = sum_j |I_j| (lambda1* lambda2* + lambda1* lambda2*^2)

(Poisson number of buildings, Poisson marks). Averaging over posterior
draws gives the predictive mean, and the predictive variance splits into
the variance of m across draws plus the mean of v.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import shapely

from .errors import SurfaceError
from .inference import FitResult, HyperGrid, fit
from .mesh import DomainPolygon, barycentric_projector, build_mesh, dual_weights
from .model import MARK_COVARIATES, LatentVariant, MarkedSample, build_joint_model
from .spde import PcPrior
from .surface import PixelGrid, Surface

log = logging.getLogger(__name__)


@dataclass
class PixelField:
    grid: PixelGrid
    cells: np.ndarray  # flat grid indices of the pixels used
    centers: np.ndarray  # (P, 2)
    area: np.ndarray  # (P,) km^2
    lam1: np.ndarray  # (draws, P)
    lam2: np.ndarray  # (draws, P)
    p_area: np.ndarray | None = None
    p_dwel: np.ndarray | None = None

    @property
    def n_draws(self) -> int:
        return self.lam1.shape[0]

    @property
    def n_pixels(self) -> int:
        return self.lam1.shape[1]

    @property
    def corrected(self) -> bool:
        return self.p_area is not None

    def product(self) -> np.ndarray:
        """Per-draw multiplicative intensity lambda1 * lambda2."""
        return self.lam1 * self.lam2


def _surface_at(surfaces: dict, name: str, grid: PixelGrid, cells, centers) -> np.ndarray:
    if name not in surfaces:
        raise SurfaceError(f"missing surface {name!r}")
    s = surfaces[name]
    v = s.values[cells] if s.grid == grid else s.at(centers)
    bad = ~np.isfinite(v)
    if bad.any():
        raise SurfaceError(f"surface {name!r} has no value at pixel {int(cells[np.argmax(bad)])}")
    return v


def pixel_intensities(draws, model, grid: PixelGrid, surfaces: dict, domain=None) -> PixelField:
    """lambda1 and lambda2 at pixel centres for every posterior draw.

    ``surfaces`` maps names to Surfaces: ``offset1`` (optional, else 0),
    ``offset2`` and one per mark covariate in the model.
    """
    if model.marks is None:
        raise SurfaceError("prediction needs a model with marks")
    if domain is None:
        cells = np.arange(grid.size)
    else:
        cells = np.nonzero(grid.mask(domain))[0]
    if cells.size == 0:
        raise SurfaceError("no pixel centre falls inside the domain")
    centers = grid.centers()[cells]
    proj = barycentric_projector(model.mesh, centers)
    if proj.n_outside:
        bad = int(cells[np.argmin(proj.inside)])
        raise SurfaceError(f"pixel {bad} lies outside the mesh")
    A = proj.A

    def at(name):
        return _surface_at(surfaces, name, grid, cells, centers)

    def stack(names):
        return np.column_stack([at(c) for c in names]) if names else np.zeros((cells.size, 0))

    off1 = at("offset1") if "offset1" in surfaces else np.zeros(cells.size)
    off2 = at("offset2")
    Z2 = stack(model.marks.names)
    Z1 = stack(model.z1_names)

    X = draws.latent
    N = model.n_nodes
    names = model.fixed_names
    fx = lambda n: X[:, model.fixed_index(n)]
    eta1 = fx("alpha1")[:, None] + off1[None, :]
    if Z1.shape[1]:
        eta1 = eta1 + X[:, [model.fixed_index(n) for n in model.z1_names]] @ Z1.T
    eta2 = fx("alpha2")[:, None] + off2[None, :]
    if Z2.shape[1]:
        theta = X[:, [model.fixed_index(n) for n in names[names.index("alpha2") + 1 :]]]
        eta2 = eta2 + theta @ Z2.T
    v = model.variant
    if v is not LatentVariant.NO_FIELD:
        W = (A @ X[:, :N].T).T
        eta1 = eta1 + W
        if v is LatentVariant.SHARED_W:
            eta2 = eta2 + W
        elif v is LatentVariant.SCALED_W:
            a3 = draws.hyper[:, list(draws.hyper_names).index("alpha3")]
            eta2 = eta2 + a3[:, None] * W
        else:
            eta2 = eta2 + (A @ X[:, N : 2 * N].T).T
    area = np.full(cells.size, grid.cell_area)
    return PixelField(grid, cells, centers, area, np.exp(eta1), np.exp(eta2))


def thinning_correct(field: PixelField, p_area, p_dwel) -> PixelField:
    """Undo the survey thinning: lambda1 / p_area and lambda2 / p_dwel per pixel.

    ``p_area`` and ``p_dwel`` are Surfaces or scalars.
    """
    def values(p, name):
        if isinstance(p, Surface):
            v = p.values[field.cells] if p.grid == field.grid else p.at(field.centers)
        else:
            v = np.full(field.n_pixels, float(p))
        bad = ~((v > 0) & (v <= 1))
        if bad.any():
            j = int(np.argmax(bad))
            raise SurfaceError(f"{name} = {v[j]} outside (0, 1] at pixel {int(field.cells[j])}")
        return v

    pa = values(p_area, "p_area")
    pd = values(p_dwel, "p_dwel")
    return PixelField(field.grid, field.cells, field.centers, field.area, field.lam1 / pa, field.lam2 / pd, pa, pd)


@dataclass
class AreaEstimate:
    region_id: str
    mean: float
    var_between: float
    var_within: float
    lo95: float
    hi95: float
    pred_lo95: float = float("nan")
    pred_hi95: float = float("nan")
    n_pixels: int = 0
    empty: bool = False
    direct_total: float = float("nan")
    direct_sd: float = float("nan")

    def __post_init__(self):
        self.var_total = self.var_between + self.var_within

    @property
    def sd_between(self) -> float:
        return math.sqrt(self.var_between)

    @property
    def sd_total(self) -> float:
        return math.sqrt(self.var_total)

    @property
    def cv(self) -> float:
        if self.mean > 0:
            return self.sd_total / self.mean
        return 0.0 if self.var_total == 0 else float("inf")


def _region_mask(field: PixelField, region) -> np.ndarray:
    if region is None:
        return np.ones(field.n_pixels, bool)
    if isinstance(region, np.ndarray) and region.dtype == bool:
        return region
    geom = getattr(region, "geometry", region)
    return shapely.intersects_xy(geom, field.centers[:, 0], field.centers[:, 1])


@dataclass
class _Moments:
    q: np.ndarray  # (draws, P) |I| l1 l2
    r: np.ndarray  # (draws, P) |I| l1 l2^2
    sims: np.ndarray | None  # (draws, P) simulated compound totals


def _moments(field: PixelField, seed=None) -> _Moments:
    prod = field.lam1 * field.lam2
    q = field.area * prod
    r = field.area * prod * field.lam2
    sims = None
    if seed is not None:
        rng = np.random.default_rng(seed)
        n = rng.poisson(field.area * field.lam1)
        sims = rng.poisson(n * field.lam2).astype(float)
    return _Moments(q, r, sims)


def _estimate(mom: _Moments, mask, region_id) -> AreaEstimate:
    if not mask.any():
        return AreaEstimate(str(region_id), 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0, True)
    m = mom.q[:, mask].sum(axis=1)
    v = mom.q[:, mask].sum(axis=1) + mom.r[:, mask].sum(axis=1)
    lo, hi = np.quantile(m, [0.025, 0.975])
    plo = phi = float("nan")
    if mom.sims is not None:
        plo, phi = np.quantile(mom.sims[:, mask].sum(axis=1), [0.025, 0.975])
    return AreaEstimate(str(region_id), float(m.mean()), float(np.var(m)), float(v.mean()), float(lo), float(hi),
                        float(plo), float(phi), int(mask.sum()), False)


def area_moments(field: PixelField, region=None, region_id="A", seed=None) -> AreaEstimate:
    """Predictive mean and variance of the regional mark total.

    ``region`` is a shapely geometry, an object with ``.geometry``, a pixel
    mask, or None for every pixel. Pixels belong to a region when their
    centre does. With ``seed`` the predictive interval is also computed by
    simulating buildings and marks per pixel and draw.
    """
    return _estimate(_moments(field, seed), _region_mask(field, region), region_id)


def region_estimates(field: PixelField, regions, seed=None) -> list[AreaEstimate]:
    """``area_moments`` for many regions sharing one set of predictive simulations."""
    mom = _moments(field, seed)
    return [_estimate(mom, _region_mask(field, r), getattr(r, "id", k)) for k, r in enumerate(regions)]


# ---------------------------------------------------------------------------
# comparison with direct estimates


@dataclass
class ComparisonRow:
    region_id: str
    mean: float
    sd_between: float
    sd_total: float
    cv: float
    lo95: float
    hi95: float
    direct_total: float
    direct_sd: float
    available: bool

    @property
    def difference(self) -> float:
        return self.mean - self.direct_total if self.available else float("nan")

    @property
    def sd_ratio(self) -> float:
        """direct sd over the between-draw sd of the model mean."""
        if not self.available:
            return float("nan")
        if self.sd_between == 0:
            return float("inf") if self.direct_sd > 0 else 1.0
        return self.direct_sd / self.sd_between

    @property
    def sd_ratio_total(self) -> float:
        if not self.available or self.sd_total == 0:
            return float("nan")
        return self.direct_sd / self.sd_total

    @property
    def direct_cv(self) -> float:
        if not self.available or self.direct_total <= 0:
            return float("nan")
        return self.direct_sd / self.direct_total

    @property
    def covered(self) -> bool | None:
        if not self.available:
            return None
        return bool(self.lo95 <= self.direct_total <= self.hi95)


def compare_direct(estimates, direct: dict) -> list[ComparisonRow]:
    """Pair model estimates with direct (total, sd) values keyed by region id.

    Regions without a direct value (missing key, None, or an empty direct
    estimate) are kept with ``available`` False.
    """
    ids = {e.region_id for e in estimates}
    extra = [k for k in direct if str(k) not in ids]
    if extra:
        raise KeyError(f"direct estimates for unknown regions {extra}")
    rows = []
    for e in estimates:
        d = direct.get(e.region_id)
        if d is not None and hasattr(d, "total"):
            d = None if getattr(d, "empty", False) else (d.total, d.sd)
        ok = d is not None
        t, s = (float(d[0]), float(d[1])) if ok else (float("nan"), float("nan"))
        rows.append(ComparisonRow(e.region_id, e.mean, e.sd_between, e.sd_total, e.cv, e.lo95, e.hi95, t, s, ok))
    return rows


@dataclass
class Residual:
    region_id: str
    observed: float
    fitted: float
    residual: float
    infinite: bool


def pearson_residuals(estimates, observed: dict) -> list[Residual]:
    out = []
    for e in estimates:
        if e.region_id not in observed:
            raise KeyError(f"no observed count for region {e.region_id}")
        y = float(observed[e.region_id])
        diff = y - e.mean
        if e.var_total > 0:
            out.append(Residual(e.region_id, y, e.mean, diff / math.sqrt(e.var_total), False))
        elif diff == 0:
            out.append(Residual(e.region_id, y, e.mean, 0.0, False))
        else:
            out.append(Residual(e.region_id, y, e.mean, math.copysign(math.inf, diff), True))
    return out


ESTIMATE_COLUMNS = ("region_id", "mean", "sd_between", "sd_total", "cv", "lo95", "hi95",
                    "direct_total", "direct_sd", "sd_ratio", "covered")


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float) and math.isnan(v):
        return ""
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def write_estimates_csv(path, rows, header: str | None = None) -> None:
    """rows: ComparisonRow or AreaEstimate."""
    with open(path, "w", newline="") as fh:
        if header:
            fh.write(header.rstrip("\n") + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ESTIMATE_COLUMNS)
        for r in rows:
            if isinstance(r, AreaEstimate):
                r = compare_direct([r], {})[0]
            w.writerow([r.region_id] + [_fmt(getattr(r, c)) for c in ESTIMATE_COLUMNS[1:]])


def read_estimates_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(line for line in fh if not line.startswith("#")))


def write_intensity_grid(path, field: PixelField, header: str | None = None) -> None:
    """Per-pixel posterior mean and sd of log lambda1, log lambda2 and lambda1*lambda2."""
    l1 = np.log(field.lam1)
    l2 = np.log(field.lam2)
    prod = field.lam1 * field.lam2
    cols = [l1.mean(0), l1.std(0), l2.mean(0), l2.std(0), prod.mean(0), prod.std(0)]
    with open(path, "w", newline="") as fh:
        if header:
            fh.write(header.rstrip("\n") + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cell_x", "cell_y", "log_lambda1_mean", "log_lambda1_sd", "log_lambda2_mean", "log_lambda2_sd",
                    "intensity_mean", "intensity_sd"])
        for j in range(field.n_pixels):
            w.writerow([repr(float(field.centers[j, 0])), repr(float(field.centers[j, 1]))] + [repr(float(c[j])) for c in cols])


# ---------------------------------------------------------------------------
# fitting a sample end to end


@dataclass
class FitSpec:
    """Everything needed to go from a sample to posterior draws."""

    variant: str = "independent"
    covariates: tuple = MARK_COVARIATES
    max_edge: float = 2.5
    cutoff: float = 0.5
    priors: tuple = (PcPrior(),)
    v0: float = 1000.0
    bandwidth: float = 2.0
    cell: float = 1.0
    n_draws: int = 1000
    grid: HyperGrid = field(default_factory=HyperGrid)


@dataclass
class PipelineFit:
    result: FitResult
    mesh: object
    surfaces: dict
    grid: PixelGrid


def fit_sample(sample: MarkedSample, domain: DomainPolygon, spec: FitSpec, seed, offset1: Surface | None = None,
               window=None, mesh=None) -> PipelineFit:
    """Mesh, kernel surfaces, joint model and posterior draws for one sample.

    ``window`` restricts the point-process integration (e.g. the domain
    minus held-out regions); the mesh always covers the whole domain.
    """
    from .survey import sample_surfaces

    mesh = mesh or build_mesh(domain, spec.max_edge, spec.cutoff)
    window = domain if window is None else window
    grid = PixelGrid.covering(domain.bounds, spec.cell)
    surfaces = sample_surfaces(sample, grid, spec.bandwidth)
    if offset1 is not None:
        surfaces["offset1"] = offset1
    model = build_joint_model(
        mesh, sample, spec.variant, offset1_surface=offset1, covariates=spec.covariates,
        priors=spec.priors, v0=spec.v0, weights=dual_weights(mesh, window),
    )
    return PipelineFit(fit(model, spec.grid, spec.n_draws, seed), mesh, surfaces, grid)


def predict_regions(pf: PipelineFit, domain, regions, seed=None, correct: bool = True):
    """(corrected PixelField, AreaEstimates) for ``regions``."""
    field_ = pixel_intensities(pf.result.draws, pf.result.model, pf.grid, pf.surfaces, domain)
    if correct:
        field_ = thinning_correct(field_, pf.surfaces["p_area"], pf.surfaces["p_dwel"])
    return field_, region_estimates(field_, regions, seed)


# ---------------------------------------------------------------------------
# hold-out validation


@dataclass
class HoldoutRow:
    region_id: str
    truth: float
    mean: float
    pred_lo95: float
    pred_hi95: float
    held_out: bool

    @property
    def covered(self) -> bool:
        return bool(self.pred_lo95 <= self.truth <= self.pred_hi95)


@dataclass
class HoldoutReport:
    held_out: list
    rows: list
    full_rows: list | None = None  # same regions predicted from the full sample

    @property
    def coverage(self) -> float:
        rows = [r for r in self.rows if r.held_out] if self.held_out else self.rows
        return float(np.mean([r.covered for r in rows])) if rows else float("nan")

    @property
    def n_covered(self) -> int:
        return int(sum(r.covered for r in self.rows if r.held_out))


def holdout_validate(pop, design, spec: FitSpec, k: int = 26, seed=0, paired: bool = False) -> HoldoutReport:
    """Drop every sampled building in k random counties, refit, and check the
    95% predictive intervals against the counties' true totals."""
    from .survey import run_survey

    regions = pop.counties
    if k > len(regions):
        raise ValueError(f"cannot hold out {k} of {len(regions)} regions")
    if k < 0:
        raise ValueError("k must be nonnegative")
    ss = np.random.SeedSequence(seed)
    s_survey, s_pick, s_fit, s_pred = (int(c.generate_state(1)[0]) for c in ss.spawn(4))
    sample = run_survey(pop, design, s_survey)
    pick = np.sort(np.random.default_rng(s_pick).choice(len(regions), size=k, replace=False))
    held = [regions[i].id for i in pick]
    truth = pop.region_totals()

    def run(train, window):
        pf = fit_sample(train, pop.domain, spec, s_fit, pop.offset1, window=window)
        _, est = predict_regions(pf, pop.domain, regions, s_pred)
        return [HoldoutRow(r.id, float(truth[i]), e.mean, e.pred_lo95, e.pred_hi95, r.id in held)
                for i, (r, e) in enumerate(zip(regions, est))]

    if k:
        gone = shapely.union_all([regions[i].geometry for i in pick])
        inside = shapely.intersects_xy(gone, sample.x, sample.y)
        train = sample.subset(~inside)
        window = pop.domain.geometry.difference(gone)
    else:
        train, window = sample, None
    rows = run(train, window)
    full = run(sample, None) if paired and k else (rows if paired else None)
    return HoldoutReport(held, rows, full)
