"""Joint marked log-Gaussian Cox process model.

Points enter through the quadrature pseudo-likelihood: every mesh node is a
zero-count row with exposure equal to its dual-cell area and every observed
building is a unit-count row with zero exposure. Marks are Poisson counts at
the observed buildings only. The latent Gaussian vector stacks the SPDE
field(s) and the fixed effects.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import scipy.sparse as sp
from scipy.special import gammaln

from .errors import ModelDataError
from .mesh import DomainPolygon, FemMatrices, Mesh, barycentric_projector, dual_weights, fem_matrices
from .spde import InterpretableParams, PcPrior, SparseCholesky, pc_log_prior, precision_matrix, to_spde
from .surface import Surface

log = logging.getLogger(__name__)

SAMPLE_COLUMNS = ("id", "x", "y", "mark", "nind", "edu", "age", "iefp", "offset2", "p_area", "p_dwel")
MARK_COVARIATES = ("nind", "edu", "age", "iefp")
FIXED_EFFECT_VARIANCE = 1000.0


class LatentVariant(str, Enum):
    """How the spatial field(s) enter the point and mark predictors."""

    NO_FIELD = "none"
    SHARED_W = "shared"
    SCALED_W = "scaled"
    INDEPENDENT_W1_W2 = "independent"

    @property
    def n_fields(self) -> int:
        return {"none": 0, "shared": 1, "scaled": 1, "independent": 2}[self.value]


@dataclass
class MarkedSample:
    ids: np.ndarray
    x: np.ndarray
    y: np.ndarray
    mark: np.ndarray
    nind: np.ndarray
    edu: np.ndarray
    age: np.ndarray
    iefp: np.ndarray
    offset2: np.ndarray
    p_area: np.ndarray
    p_dwel: np.ndarray

    def __post_init__(self):
        n = len(self.ids)
        for name in SAMPLE_COLUMNS:
            attr = "ids" if name == "id" else name
            arr = np.asarray(getattr(self, attr), dtype=np.int64 if name in ("id", "mark") else float)
            if arr.shape != (n,):
                raise ModelDataError(f"column {name} has length {arr.size}, expected {n}")
            setattr(self, attr, arr)
        if np.any(self.mark < 0):
            raise ModelDataError("marks must be nonnegative")
        for name in ("p_area", "p_dwel"):
            p = getattr(self, name)
            if np.any(~((p > 0) & (p <= 1))):
                raise ModelDataError(f"{name} must lie in (0, 1]")

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def locations(self) -> np.ndarray:
        return np.column_stack([self.x, self.y])

    @property
    def p_ijh(self) -> np.ndarray:
        return self.p_area * self.p_dwel

    def covariate_matrix(self, names) -> np.ndarray:
        if not names:
            return np.zeros((len(self), 0))
        return np.column_stack([getattr(self, n) for n in names])

    def subset(self, keep) -> "MarkedSample":
        keep = np.asarray(keep)
        return MarkedSample(**{("ids" if c == "id" else c): getattr(self, "ids" if c == "id" else c)[keep] for c in SAMPLE_COLUMNS})

    def to_csv(self, path, header: str | None = None) -> None:
        with open(path, "w", newline="") as fh:
            if header:
                fh.write(header.rstrip("\n") + "\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(SAMPLE_COLUMNS)
            for i in range(len(self)):
                w.writerow(
                    [int(self.ids[i]), repr(float(self.x[i])), repr(float(self.y[i])), int(self.mark[i])]
                    + [repr(float(getattr(self, c)[i])) for c in SAMPLE_COLUMNS[4:]]
                )

    @classmethod
    def from_csv(cls, path) -> "MarkedSample":
        with open(path, newline="") as fh:
            reader = csv.DictReader(line for line in fh if not line.startswith("#"))
            cols = tuple(reader.fieldnames or ())
            if cols != SAMPLE_COLUMNS:
                raise ModelDataError(f"{path}: expected columns {','.join(SAMPLE_COLUMNS)}, got {','.join(cols)}")
            rows = list(reader)
        data = {}
        for c in SAMPLE_COLUMNS:
            key = "ids" if c == "id" else c
            if c in ("id", "mark"):
                data[key] = np.array([int(r[c]) for r in rows], dtype=np.int64)
            else:
                data[key] = np.array([float(r[c]) if r[c] != "" else np.nan for r in rows])
        return cls(**data)


@dataclass
class PointPseudoData:
    locations: np.ndarray
    counts: np.ndarray
    exposure: np.ndarray
    offset1: np.ndarray
    A: sp.csr_matrix
    n_nodes: int
    n_dropped: int = 0
    kept: np.ndarray | None = None  # mask over the input sample

    def __len__(self) -> int:
        return self.counts.size


@dataclass
class MarkData:
    ids: np.ndarray
    y: np.ndarray
    Z: np.ndarray
    names: tuple
    offset2: np.ndarray
    A: sp.csr_matrix

    def __len__(self) -> int:
        return self.y.size


def _surface_values(surface, locations):
    if surface is None:
        return np.zeros(len(locations))
    if isinstance(surface, Surface):
        return surface.at(locations)
    if callable(surface):
        return np.asarray(surface(locations), dtype=float)
    return np.full(len(locations), float(surface))


def assemble_point_pseudodata(mesh: Mesh, weights: np.ndarray, sample: MarkedSample, offset1_surface=None) -> PointPseudoData:
    """N mesh-node rows (count 0, exposure = dual weight) followed by one
    unit-count, zero-exposure row per observed building inside the mesh."""
    if len(sample) == 0:
        raise ModelDataError("empty sample")
    weights = np.asarray(weights, dtype=float)
    if weights.shape != (mesh.n_nodes,):
        raise ModelDataError("quadrature weights do not match mesh nodes")
    proj = barycentric_projector(mesh, sample.locations)
    kept = proj.inside
    if proj.n_outside:
        log.warning("dropped %d observed locations outside the mesh", proj.n_outside)
    obs_A = proj.A[np.nonzero(kept)[0]]
    locs = np.vstack([mesh.nodes, sample.locations[kept]])
    n_obs = int(kept.sum())
    A = sp.vstack([sp.identity(mesh.n_nodes, format="csr"), obs_A]).tocsr()
    counts = np.concatenate([np.zeros(mesh.n_nodes), np.ones(n_obs)])
    exposure = np.concatenate([weights, np.zeros(n_obs)])
    return PointPseudoData(
        locations=locs,
        counts=counts,
        exposure=exposure,
        offset1=_surface_values(offset1_surface, locs),
        A=A,
        n_nodes=mesh.n_nodes,
        n_dropped=int(proj.n_outside),
        kept=kept,
    )


def assemble_mark_data(sample: MarkedSample, covariates=MARK_COVARIATES, mesh: Mesh | None = None, keep=None) -> MarkData:
    """One Poisson row per observed building; covariates are the building's own values."""
    if len(sample) == 0:
        raise ModelDataError("empty sample")
    covariates = tuple(covariates)
    unknown = [c for c in covariates if c not in MARK_COVARIATES]
    if unknown:
        raise ModelDataError(f"unknown mark covariates {unknown}")
    if keep is None:
        keep = np.ones(len(sample), bool)
    sub = sample.subset(keep)
    Z = sub.covariate_matrix(covariates)
    bad = ~np.isfinite(Z).all(axis=1) | ~np.isfinite(sub.offset2)
    if bad.any():
        raise ModelDataError(f"missing covariates for buildings {sub.ids[bad].tolist()}")
    if mesh is not None:
        A = barycentric_projector(mesh, sub.locations).A
    else:
        A = sp.csr_matrix((len(sub), 0))
    return MarkData(sub.ids, sub.mark.astype(float), Z, covariates, sub.offset2, A)


@dataclass
class JointModel:
    """Assembled joint model; immutable once built.

    Latent vector layout: field blocks (N each), then the point fixed
    effects (alpha1, z1 effects), then the mark fixed effects (alpha2,
    z2 effects).
    """

    mesh: Mesh
    fem: FemMatrices
    points: PointPseudoData
    marks: MarkData | None
    variant: LatentVariant
    priors: tuple
    v0: float = FIXED_EFFECT_VARIANCE
    Z1: np.ndarray | None = None
    z1_names: tuple = ()
    alpha3_variance: float = FIXED_EFFECT_VARIANCE
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.variant = LatentVariant(self.variant)
        if self.v0 <= 0:
            raise ModelDataError("fixed-effect prior variance must be positive")
        if self.points is None and self.marks is None:
            raise ModelDataError("model needs point rows, mark rows, or both")
        n_pts = 0 if self.points is None else len(self.points)
        if self.Z1 is None:
            self.Z1 = np.zeros((n_pts, 0))
        if self.Z1.shape[0] != n_pts:
            raise ModelDataError("point design rows do not match pseudo-data rows")
        if self.marks is not None and self.marks.Z.shape[0] != len(self.marks):
            raise ModelDataError("mark design rows do not match mark rows")
        if len(self.priors) != self.variant.n_fields:
            if len(self.priors) == 1:
                self.priors = tuple(self.priors) * self.variant.n_fields
            else:
                raise ModelDataError(f"need {self.variant.n_fields} field priors, got {len(self.priors)}")
        self._build_design()

    # -- layout ---------------------------------------------------------
    @property
    def n_nodes(self) -> int:
        return self.mesh.n_nodes

    @property
    def n_fields(self) -> int:
        return self.variant.n_fields

    @property
    def field_names(self) -> tuple:
        return {0: (), 1: ("w",), 2: ("w1", "w2")}[self.n_fields]

    @property
    def fixed_names(self) -> tuple:
        names = () if self.points is None else ("alpha1",) + tuple(self.z1_names)
        if self.marks is not None:
            names += ("alpha2",) + tuple(self.marks.names)
        return names

    @property
    def n_fixed(self) -> int:
        return len(self.fixed_names)

    @property
    def dim(self) -> int:
        return self.n_fields * self.n_nodes + self.n_fixed

    def field_slice(self, k: int) -> slice:
        return slice(k * self.n_nodes, (k + 1) * self.n_nodes)

    def fixed_index(self, name: str) -> int:
        return self.n_fields * self.n_nodes + self.fixed_names.index(name)

    @property
    def hyper_names(self) -> tuple:
        if self.variant is LatentVariant.NO_FIELD:
            return ()
        if self.variant is LatentVariant.INDEPENDENT_W1_W2:
            return ("log_rho1", "log_sigma1", "log_rho2", "log_sigma2")
        names = ("log_rho", "log_sigma")
        if self.variant is LatentVariant.SCALED_W:
            names += ("alpha3",)
        return names

    @property
    def n_point_rows(self) -> int:
        return 0 if self.points is None else len(self.points)

    @property
    def n_rows(self) -> int:
        return self.n_point_rows + (0 if self.marks is None else len(self.marks))

    def split_independent(self):
        """Exact factorisation of an independent-fields model.

        With independent fields the point rows see only (w1, alpha1, z1)
        and the mark rows only (w2, alpha2, z2), and the prior is block
        diagonal, so the posterior factorises. Returns
        ``[(submodel, latent_index, hyper_index), ...]`` mapping each
        submodel's latent and hyperparameter vectors into this model's.
        """
        if self.variant is not LatentVariant.INDEPENDENT_W1_W2 or self.marks is None or self.points is None:
            raise ModelDataError("only independent-fields models with marks can be split")
        N = self.n_nodes
        q1 = self.Z1.shape[1]
        nfix1 = 1 + q1
        base = 2 * N
        pts = JointModel(self.mesh, self.fem, self.points, None, LatentVariant.SHARED_W, (self.priors[0],),
                         v0=self.v0, Z1=self.Z1, z1_names=self.z1_names)
        mk = JointModel(self.mesh, self.fem, None, self.marks, LatentVariant.SHARED_W, (self.priors[1],), v0=self.v0)
        idx_pts = np.concatenate([np.arange(N), base + np.arange(nfix1)])
        idx_mk = np.concatenate([N + np.arange(N), base + nfix1 + np.arange(mk.n_fixed)])
        return [(pts, idx_pts, np.array([0, 1])), (mk, idx_mk, np.array([2, 3]))]

    # -- design ---------------------------------------------------------
    def _build_design(self):
        N = self.n_nodes
        nf = self.n_fields
        P = self.n_point_rows
        q1 = self.Z1.shape[1]
        rows, off, y, e, const = [], [], [], [], []
        if self.points is not None:
            blocks = []
            if nf >= 1:
                blocks.append(self.points.A)
            if nf == 2:
                blocks.append(sp.csr_matrix((P, N)))
            fixed = np.zeros((P, self.n_fixed))
            fixed[:, 0] = 1.0
            fixed[:, 1 : 1 + q1] = self.Z1
            blocks.append(sp.csr_matrix(fixed))
            rows.append(sp.hstack(blocks).tocsr())
            off.append(self.points.offset1)
            y.append(self.points.counts)
            e.append(self.points.exposure)
            const.append(np.zeros(P))
        scaled = None
        if self.marks is not None:
            M = len(self.marks)
            Am = self.marks.A
            if nf >= 1 and Am.shape[1] != N:
                raise ModelDataError("mark projector does not match the mesh")
            fixed = np.zeros((M, self.n_fixed))
            j = 0 if self.points is None else 1 + q1
            fixed[:, j] = 1.0
            fixed[:, j + 1 :] = self.marks.Z
            zero = sp.csr_matrix((M, N))
            v = self.variant
            if v is LatentVariant.NO_FIELD:
                field_blocks = []
            elif v is LatentVariant.SHARED_W:
                field_blocks = [Am]
            elif v is LatentVariant.SCALED_W:
                field_blocks = [zero]
                scaled = sp.vstack(
                    [sp.csr_matrix((P, self.dim)), sp.hstack([Am, sp.csr_matrix((M, self.n_fixed))])]
                ).tocsr()
            else:
                field_blocks = [zero, Am]
            rows.append(sp.hstack(field_blocks + [sp.csr_matrix(fixed)]).tocsr())
            off.append(self.marks.offset2)
            y.append(self.marks.y)
            e.append(np.ones(M))
            const.append(-gammaln(self.marks.y + 1.0))
        self._B = sp.vstack(rows).tocsr()
        self._B_scaled = scaled
        self.offset = np.concatenate(off)
        self.y = np.concatenate(y)
        self.exposure = np.concatenate(e)
        self.const = np.concatenate(const)

    def design(self, hyper) -> sp.csr_matrix:
        if self._B_scaled is None:
            return self._B
        a3 = self.hyper_dict(hyper)["alpha3"]
        return (self._B + a3 * self._B_scaled).tocsr()

    # -- hyperparameters ------------------------------------------------
    def hyper_dict(self, hyper) -> dict:
        vals = getattr(hyper, "values", hyper)
        vals = np.atleast_1d(np.asarray(vals, dtype=float))
        if vals.size != len(self.hyper_names):
            raise ModelDataError(f"expected {len(self.hyper_names)} hyperparameters, got {vals.size}")
        return dict(zip(self.hyper_names, vals))

    def field_params(self, hyper) -> list[InterpretableParams]:
        h = self.hyper_dict(hyper)
        if self.n_fields == 0:
            return []
        if self.n_fields == 1:
            return [InterpretableParams(math.exp(h["log_sigma"]), math.exp(h["log_rho"]))]
        return [
            InterpretableParams(math.exp(h["log_sigma1"]), math.exp(h["log_rho1"])),
            InterpretableParams(math.exp(h["log_sigma2"]), math.exp(h["log_rho2"])),
        ]

    def log_hyper_prior(self, hyper) -> float:
        """PC prior per field on (log rho, log sigma) incl. the log-scale Jacobian."""
        total = 0.0
        for p, prior in zip(self.field_params(hyper), self.priors):
            total += pc_log_prior(p, prior) + math.log(p.rho) + math.log(p.sigma)
        if self.variant is LatentVariant.SCALED_W:
            a3 = self.hyper_dict(hyper)["alpha3"]
            total += -0.5 * a3 * a3 / self.alpha3_variance - 0.5 * math.log(2 * math.pi * self.alpha3_variance)
        return total

    def hyper_init(self) -> np.ndarray:
        span = np.ptp(self.mesh.nodes, axis=0)
        rho = 0.25 * float(np.hypot(*span))
        vals = []
        for name in self.hyper_names:
            if name.startswith("log_rho"):
                vals.append(math.log(rho))
            elif name.startswith("log_sigma"):
                vals.append(0.0)
            else:
                vals.append(0.5)
        return np.array(vals)

    def hyper_bounds(self) -> np.ndarray:
        span = float(np.hypot(*np.ptp(self.mesh.nodes, axis=0)))
        edge = float(np.mean(self.mesh.edge_lengths()))
        out = []
        for name in self.hyper_names:
            if name.startswith("log_rho"):
                out.append((math.log(edge), math.log(20.0 * span)))
            elif name.startswith("log_sigma"):
                out.append((math.log(1e-2), math.log(20.0)))
            else:
                out.append((-10.0, 10.0))
        return np.array(out).reshape(-1, 2)

    # -- prior ----------------------------------------------------------
    def prior_precision(self, hyper):
        """Block-diagonal latent prior precision and its log-determinant."""
        blocks = []
        logdet = 0.0
        for p in self.field_params(hyper):
            key = ("Q", p.sigma, p.rho)
            hit = self._cache.get(key)
            if hit is None:
                Q = precision_matrix(to_spde(p), self.fem)
                hit = (Q, SparseCholesky(Q).logdet)
                if len(self._cache) > 256:
                    self._cache.clear()
                self._cache[key] = hit
            blocks.append(hit[0])
            logdet += hit[1]
        nfix = self.n_fixed
        blocks.append(sp.identity(nfix, format="csc") / self.v0)
        logdet += -nfix * math.log(self.v0)
        return sp.block_diag(blocks, format="csc"), logdet

    # -- likelihood -----------------------------------------------------
    def linear_predictor(self, latent, hyper) -> np.ndarray:
        return self.design(hyper) @ np.asarray(latent, dtype=float) + self.offset

    def pointwise_loglik(self, latent, hyper) -> np.ndarray:
        eta = self.linear_predictor(latent, hyper)
        _check_finite(eta)
        return self.y * eta - self.exposure * np.exp(eta) + self.const

    def eta_terms(self, eta):
        """(value, d/d eta, -d2/d eta2) of the summed row log-likelihood."""
        _check_finite(eta)
        mu = self.exposure * np.exp(eta)
        value = float(np.sum(self.y * eta - mu + self.const))
        return value, self.y - mu, mu


def _check_finite(eta):
    bad = ~np.isfinite(eta) | (eta > 700)
    if bad.any():
        i = int(np.nonzero(bad)[0][0])
        raise ModelDataError(f"non-finite linear predictor at row {i} (eta={eta[i]})")


def joint_loglik(model, latent, hyper) -> float:
    eta = model.linear_predictor(latent, hyper)
    return model.eta_terms(eta)[0]


def loglik_grad_hess(model, latent, hyper):
    """Log-likelihood, its gradient and its negative Hessian in the latent vector."""
    B = model.design(hyper)
    eta = B @ np.asarray(latent, dtype=float) + model.offset
    value, d1, w = model.eta_terms(eta)
    grad = B.T @ d1
    neg_hess = (B.T @ sp.diags(w) @ B).tocsc()
    return value, grad, neg_hess


def build_joint_model(
    mesh: Mesh,
    sample: MarkedSample,
    variant=LatentVariant.INDEPENDENT_W1_W2,
    *,
    domain=None,
    offset1_surface=None,
    covariates=MARK_COVARIATES,
    priors=(PcPrior(),),
    include_marks: bool = True,
    v0: float = FIXED_EFFECT_VARIANCE,
    fem: FemMatrices | None = None,
    weights: np.ndarray | None = None,
) -> JointModel:
    """Mesh + sample -> JointModel. ``domain`` is the integration window
    (DomainPolygon or shapely geometry); defaults to the area the mesh covers."""
    fem = fem if fem is not None else fem_matrices(mesh)
    if weights is None:
        weights = fem.C if domain is None else dual_weights(mesh, domain)
    pts = assemble_point_pseudodata(mesh, weights, sample, offset1_surface)
    marks = assemble_mark_data(sample, covariates, mesh, keep=pts.kept) if include_marks else None
    return JointModel(mesh, fem, pts, marks, LatentVariant(variant), tuple(priors), v0=v0)


def domain_area(domain) -> float:
    return domain.area if isinstance(domain, DomainPolygon) else float(domain.area)
