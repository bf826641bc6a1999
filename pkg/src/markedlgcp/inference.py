"""Nested Laplace approximation over a hyperparameter grid.

For each hyperparameter value the latent Gaussian vector is approximated by
a Gaussian centred at the conditional mode (found by damped Newton) with
the negative Hessian as precision. The Laplace approximation of the
marginal likelihood is evaluated on a regular grid around the posterior
mode of the hyperparameters, and the normalised grid weights define a
discrete mixture from which joint posterior draws are taken.

Models are duck-typed: anything with ``dim``, ``offset``, ``hyper_names``,
``design(h)``, ``eta_terms(eta)``, ``prior_precision(h)``,
``log_hyper_prior(h)``, ``hyper_init()``, ``hyper_bounds()`` and
``pointwise_loglik(x, h)`` works.
"""
from __future__ import annotations

import itertools
import json
import logging
import math
import struct
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.special import logsumexp

from .errors import ModelDataError, NonConvergenceError, NumericalDegeneracyError
from .spde import SparseCholesky

log = logging.getLogger(__name__)

DRAWS_MAGIC = b"CXMKDRAW"
DRAWS_VERSION = 1
_HEADER = struct.Struct("<8sHHI")


@dataclass(frozen=True)
class HyperParams:
    names: tuple
    values: np.ndarray

    def __post_init__(self):
        v = np.atleast_1d(np.asarray(self.values, dtype=float)).copy()
        if v.size != len(self.names):
            raise ValueError("names and values differ in length")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def as_dict(self) -> dict:
        return dict(zip(self.names, self.values.tolist()))

    def interpretable(self) -> dict:
        """log-scale entries exponentiated, e.g. ``log_rho`` -> ``rho``."""
        out = {}
        for k, v in self.as_dict().items():
            if k.startswith("log_"):
                out[k[4:]] = math.exp(v)
            else:
                out[k] = v
        return out


@dataclass
class GaussianApprox:
    hyper: np.ndarray
    mode: np.ndarray
    precision: sp.csc_matrix
    logdet: float  # log |precision|
    loglik: float  # at the mode
    converged: bool
    iterations: int
    grad_norm: float
    _factor: SparseCholesky | None = field(default=None, repr=False)

    @property
    def factor(self) -> SparseCholesky:
        if self._factor is None:
            self._factor = SparseCholesky(self.precision)
        return self._factor

    def marginal_sd(self, index) -> np.ndarray:
        """Marginal posterior sd of selected latent entries (direct solves)."""
        index = np.atleast_1d(index)
        E = np.zeros((self.mode.size, index.size))
        E[index, np.arange(index.size)] = 1.0
        return np.sqrt(np.einsum("ij,ij->j", E, self.factor.solve(E)))


@dataclass(frozen=True)
class HyperGrid:
    """Grid exploration settings.

    ``step`` fixes the spacing per axis (scalar or per-axis); when None the
    spacing is taken from the curvature at the mode so that the grid spans
    about three posterior standard deviations either way.
    """

    step: float | tuple | None = None
    half_width: int = 3
    coarse_step: float = 0.5
    min_step: float = 0.05
    max_step: float = 1.5
    center: tuple | None = None
    max_ascent: int = 60
    factorize: bool = True


@dataclass
class HyperPosterior:
    names: tuple
    points: np.ndarray  # (K, d)
    log_post: np.ndarray  # (K,)
    weights: np.ndarray  # (K,), sums to 1
    approx: list | None = None  # GaussianApprox per point, None for failed points
    steps: np.ndarray | None = None
    center: np.ndarray | None = None
    parts: list | None = None  # factorised: [(HyperPosterior, latent_index, hyper_index)]
    n_failed: int = 0

    def __len__(self) -> int:
        return len(self.weights)

    def mean(self) -> np.ndarray:
        return self.weights @ self.points if len(self.names) else np.zeros(0)

    def sd(self) -> np.ndarray:
        if not len(self.names):
            return np.zeros(0)
        m = self.mean()
        return np.sqrt(self.weights @ (self.points - m) ** 2)

    def mode(self) -> np.ndarray:
        return self.points[int(np.argmax(self.log_post))]

    def summary(self) -> dict:
        """Posterior mean/sd of each hyperparameter and of its natural-scale value."""
        out = {}
        for j, name in enumerate(self.names):
            col = self.points[:, j]
            out[name] = _weighted_summary(col, self.weights)
            if name.startswith("log_"):
                out[name[4:]] = _weighted_summary(np.exp(col), self.weights)
        return out


@dataclass
class PosteriorDraws:
    latent: np.ndarray  # (n, dim)
    hyper: np.ndarray  # (n, d)
    hyper_names: tuple
    config: np.ndarray  # grid index of each draw
    seed: int | None = None

    def __len__(self) -> int:
        return self.latent.shape[0]


@dataclass(frozen=True)
class ModelScore:
    dic: float
    p_dic: float
    waic: float
    p_waic: float

    def as_dict(self) -> dict:
        return {"dic": self.dic, "p_dic": self.p_dic, "waic": self.waic, "p_waic": self.p_waic}


def _weighted_summary(x, w) -> dict:
    m = float(w @ x)
    sd = float(np.sqrt(max(w @ (x - m) ** 2, 0.0)))
    order = np.argsort(x)
    cw = np.cumsum(w[order])
    lo = float(x[order][min(np.searchsorted(cw, 0.025), x.size - 1)])
    hi = float(x[order][min(np.searchsorted(cw, 0.975), x.size - 1)])
    return {"mean": m, "sd": sd, "q025": lo, "q975": hi}


# ---------------------------------------------------------------------------
# inner optimisation


def _objective(model, B, Qp, x):
    eta = B @ x + model.offset
    if not np.all(np.isfinite(eta)) or np.max(eta, initial=-np.inf) > 700:
        return -np.inf
    value, _, _ = model.eta_terms(eta)
    return value - 0.5 * float(x @ (Qp @ x))


def inner_mode(model, hyper, init=None, max_iter: int = 100, tol: float = 1e-6, max_halvings: int = 30) -> GaussianApprox:
    """Mode and curvature of log p(y | x) + log p(x | hyper) by damped Newton.

    Raises NonConvergenceError (with the last iterate) if the gradient test
    is not met within ``max_iter`` steps or a line search stalls.
    """
    h = np.atleast_1d(np.asarray(getattr(hyper, "values", hyper), dtype=float))
    B = model.design(h)
    Qp, _ = model.prior_precision(h)
    x = np.zeros(model.dim) if init is None else np.array(init, dtype=float)
    if x.shape != (model.dim,):
        raise ModelDataError(f"initial latent vector has shape {x.shape}, expected ({model.dim},)")
    f = _objective(model, B, Qp, x)
    if not np.isfinite(f):
        x = np.zeros(model.dim)
        f = _objective(model, B, Qp, x)
        if not np.isfinite(f):
            raise ModelDataError("linear predictor is not finite at the zero latent vector")
    gnorm = np.inf
    for it in range(max_iter + 1):
        eta = B @ x + model.offset
        value, d1, w = model.eta_terms(eta)
        g = B.T @ d1 - Qp @ x
        gnorm = float(np.linalg.norm(g))
        H = (Qp + B.T @ sp.diags(w) @ B).tocsc()
        if gnorm < tol * (1.0 + float(np.linalg.norm(x))):
            factor = SparseCholesky(H)
            return GaussianApprox(h, x, H, factor.logdet, value, True, it, gnorm, factor)
        if it == max_iter:
            break
        dx = SparseCholesky(H).solve(g)
        t = 1.0
        for _ in range(max_halvings + 1):
            xn = x + t * dx
            fn = _objective(model, B, Qp, xn)
            if fn >= f - 1e-10 * (1.0 + abs(f)):
                break
            t *= 0.5
        else:
            raise NonConvergenceError(
                f"line search stalled at iteration {it} (|g|={gnorm:.3e})", last_iterate=x, hyper=h
            )
        x, f = xn, fn
    raise NonConvergenceError(f"Newton did not converge in {max_iter} iterations (|g|={gnorm:.3e})", last_iterate=x, hyper=h)


def laplace(model, hyper, init=None, **kw) -> tuple[float, GaussianApprox]:
    """Unnormalised log posterior of the hyperparameters and the Gaussian approximation."""
    h = np.atleast_1d(np.asarray(getattr(hyper, "values", hyper), dtype=float))
    ga = inner_mode(model, h, init=init, **kw)
    Qp, logdet_prior = model.prior_precision(h)
    quad = float(ga.mode @ (Qp @ ga.mode))
    lp = ga.loglik - 0.5 * quad + 0.5 * logdet_prior - 0.5 * ga.logdet + model.log_hyper_prior(h)
    return lp, ga


def log_marginal_hyper(model, hyper, init=None, **kw) -> float:
    return laplace(model, hyper, init=init, **kw)[0]


# ---------------------------------------------------------------------------
# grid exploration


class _Evaluator:
    """Memoised Laplace evaluations with warm starts from the nearest solved point."""

    def __init__(self, model, scale):
        self.model = model
        self.scale = np.asarray(scale, dtype=float)
        self.cache: dict = {}
        self.pts: list = []
        self.modes: list = []

    def __call__(self, h):
        h = np.asarray(h, dtype=float)
        key = tuple(np.round(h, 10))
        if key in self.cache:
            return self.cache[key]
        init = None
        if self.pts:
            d = np.sum(((np.asarray(self.pts) - h) / self.scale) ** 2, axis=1)
            init = self.modes[int(np.argmin(d))]
        try:
            lp, ga = laplace(self.model, h, init=init)
        except (NonConvergenceError, NumericalDegeneracyError, ModelDataError) as exc:
            log.warning("hyperparameter point %s failed: %s", np.round(h, 4).tolist(), exc)
            lp, ga = -np.inf, None
        if ga is not None:
            self.pts.append(h)
            self.modes.append(ga.mode)
        self.cache[key] = (lp, ga)
        return lp, ga


def _ascent(ev, start, bounds, step, max_iter):
    cur = np.clip(np.asarray(start, dtype=float), bounds[:, 0], bounds[:, 1])
    f_cur = ev(cur)[0]
    if not np.isfinite(f_cur):
        raise NonConvergenceError("inner optimisation failed at the starting hyperparameters", hyper=cur)
    for _ in range(max_iter):
        moved = False
        for j in range(cur.size):
            for sgn in (1.0, -1.0):
                while True:
                    cand = cur.copy()
                    cand[j] = np.clip(cand[j] + sgn * step, bounds[j, 0], bounds[j, 1])
                    if cand[j] == cur[j]:
                        break
                    f = ev(cand)[0]
                    if f > f_cur + 1e-9:
                        cur, f_cur, moved = cand, f, True
                    else:
                        break
        if not moved:
            break
    return cur, f_cur


def _fd_derivatives(ev, x, f0, bounds, h):
    """Central-difference gradient and Hessian of the log posterior."""
    d = x.size
    g = np.zeros(d)
    H = np.zeros((d, d))
    E = np.eye(d) * h
    fp = [ev(x + E[j])[0] for j in range(d)]
    fm = [ev(x - E[j])[0] for j in range(d)]
    for j in range(d):
        g[j] = (fp[j] - fm[j]) / (2 * h)
        H[j, j] = (fp[j] + fm[j] - 2 * f0) / h**2
    for i in range(d):
        for j in range(i + 1, d):
            fpp = ev(x + E[i] + E[j])[0]
            fpm = ev(x + E[i] - E[j])[0]
            fmp = ev(x - E[i] + E[j])[0]
            fmm = ev(x - E[i] - E[j])[0]
            H[i, j] = H[j, i] = (fpp - fpm - fmp + fmm) / (4 * h * h)
    return g, H


def _newton_refine(ev, x, f0, bounds, h, max_iter=10):
    """Polish the grid centre with finite-difference Newton steps.

    Returns (centre, log posterior, covariance = -H^-1 or None when the
    Hessian is not negative definite).
    """
    x = x.copy()
    cov = None
    for _ in range(max_iter):
        g, H = _fd_derivatives(ev, x, f0, bounds, h)
        if not (np.all(np.isfinite(g)) and np.all(np.isfinite(H))):
            return x, f0, None
        try:
            L = np.linalg.cholesky(-H)
            cov = np.linalg.inv(-H)
        except np.linalg.LinAlgError:
            return x, f0, None
        step = np.linalg.solve(L.T, np.linalg.solve(L, g))
        n = np.max(np.abs(step))
        if n > 4 * h:
            step *= 4 * h / n
        if n < 1e-3:
            break
        moved = False
        t = 1.0
        for _ in range(5):
            cand = np.clip(x + t * step, bounds[:, 0], bounds[:, 1])
            fc = ev(cand)[0]
            if fc > f0:
                x, f0, moved = cand, fc, True
                break
            t *= 0.5
        if not moved:
            break
    return x, f0, cov


def _explore_single(model, grid: HyperGrid) -> HyperPosterior:
    names = tuple(model.hyper_names)
    d = len(names)
    if d == 0:
        lp, ga = laplace(model, np.zeros(0))
        return HyperPosterior(names, np.zeros((1, 0)), np.array([lp]), np.ones(1), [ga], np.zeros(0), np.zeros(0))
    bounds = np.asarray(model.hyper_bounds(), dtype=float).reshape(d, 2)
    ev = _Evaluator(model, np.full(d, grid.coarse_step))
    start = model.hyper_init() if grid.center is None else np.asarray(grid.center, dtype=float)
    center, f0 = _ascent(ev, start, bounds, grid.coarse_step, grid.max_ascent)

    hw = int(grid.half_width)
    if grid.step is not None:
        steps = np.broadcast_to(np.asarray(grid.step, dtype=float), (d,)).copy()
    else:
        center, f0, cov = _newton_refine(ev, center, f0, bounds, 0.5 * grid.coarse_step)
        if cov is None:
            sd = np.full(d, grid.max_step * hw / 3.0)
        else:
            sd = np.sqrt(np.diag(cov))
        steps = np.clip(3.0 * sd / hw, grid.min_step, grid.max_step)
    offsets = np.array(list(itertools.product(range(-hw, hw + 1), repeat=d)), dtype=float)
    pts = center + offsets * steps
    inside = np.all((pts >= bounds[:, 0] - 1e-12) & (pts <= bounds[:, 1] + 1e-12), axis=1)
    pts = pts[inside]
    # evaluate outward from the centre so warm starts stay local
    order = np.argsort(np.sum((offsets[inside]) ** 2, axis=1), kind="stable")
    lps = np.full(len(pts), -np.inf)
    approx: list = [None] * len(pts)
    ev.scale = steps
    for k in order:
        lps[k], approx[k] = ev(pts[k])
    ok = np.isfinite(lps)
    if not ok.any():
        raise NonConvergenceError("inner optimisation failed at every grid point", hyper=center)
    n_failed = int((~ok).sum())
    if n_failed:
        log.warning("%d of %d grid points failed and were dropped", n_failed, len(pts))
    pts, lps = pts[ok], lps[ok]
    approx = [a for a, good in zip(approx, ok) if good]
    w = np.exp(lps - logsumexp(lps))
    w /= w.sum()
    edge = np.abs(offsets[inside][ok]).max(axis=1) == hw
    if edge.any() and w[edge].sum() > 0.05:
        log.warning("%.1f%% of the grid weight sits on the boundary; consider a wider grid", 100 * w[edge].sum())
    return HyperPosterior(names, pts, lps, w, approx, steps, center, None, n_failed)


def explore_hyper(model, grid: HyperGrid | None = None) -> HyperPosterior:
    """Grid approximation of the hyperparameter posterior.

    Independent-fields models are split into their two exact factors and
    explored separately; the joint grid is their outer product.
    """
    grid = grid or HyperGrid()
    split = getattr(model, "split_independent", None)
    if grid.factorize and split is not None:
        try:
            parts = split()
        except ModelDataError:
            parts = None
        if parts:
            sub_grid = HyperGrid(
                grid.step, grid.half_width, grid.coarse_step, grid.min_step, grid.max_step, None, grid.max_ascent, False
            )
            posts = []
            for sub, lat_idx, hyp_idx in parts:
                if grid.center is not None:
                    sub_grid = HyperGrid(
                        grid.step, grid.half_width, grid.coarse_step, grid.min_step, grid.max_step,
                        tuple(np.asarray(grid.center, dtype=float)[hyp_idx]), grid.max_ascent, False,
                    )
                posts.append((_explore_single(sub, sub_grid), lat_idx, hyp_idx))
            return _outer(model, posts)
    return _explore_single(model, grid)


def _outer(model, posts) -> HyperPosterior:
    names = tuple(model.hyper_names)
    idx = np.array(list(itertools.product(*[range(len(p)) for p, _, _ in posts])))
    d = len(names)
    pts = np.empty((len(idx), d))
    lps = np.zeros(len(idx))
    w = np.ones(len(idx))
    for c, (p, _, hyp_idx) in enumerate(posts):
        pts[:, hyp_idx] = p.points[idx[:, c]]
        lps += p.log_post[idx[:, c]]
        w *= p.weights[idx[:, c]]
    steps = np.empty(d)
    center = np.empty(d)
    for p, _, hyp_idx in posts:
        steps[hyp_idx] = p.steps
        center[hyp_idx] = p.center
    return HyperPosterior(names, pts, lps, w / w.sum(), None, steps, center, posts, sum(p.n_failed for p, _, _ in posts))


# ---------------------------------------------------------------------------
# sampling


def sample_posterior(model, hp: HyperPosterior, n: int = 1000, seed=0) -> PosteriorDraws:
    """Joint draws: a grid point by weight, then the latent vector from its Gaussian."""
    if n < 1:
        raise ValueError("need at least one draw")
    if hp.parts:
        seeds = np.random.SeedSequence(seed).spawn(len(hp.parts))
        latent = np.empty((n, model.dim))
        hyper = np.empty((n, len(hp.names)))
        configs = []
        for (p, lat_idx, hyp_idx), s in zip(hp.parts, seeds):
            sub = _sample_single(p, n, np.random.default_rng(s), lat_idx.size)
            latent[:, lat_idx] = sub.latent
            hyper[:, hyp_idx] = sub.hyper
            configs.append(sub.config)
        sizes = [len(p) for p, _, _ in hp.parts]
        config = np.ravel_multi_index(tuple(configs), sizes)
        return PosteriorDraws(latent, hyper, hp.names, config, seed)
    out = _sample_single(hp, n, np.random.default_rng(seed), model.dim)
    out.seed = seed
    return out


def _sample_single(hp: HyperPosterior, n, rng, dim) -> PosteriorDraws:
    config = rng.choice(len(hp), size=n, p=hp.weights)
    latent = np.empty((n, dim))
    for k in np.unique(config):
        rows = np.nonzero(config == k)[0]
        ga = hp.approx[k]
        z = rng.standard_normal((dim, rows.size))
        latent[rows] = (ga.mode[:, None] + ga.factor.solve_Lt(z)).T
    return PosteriorDraws(latent, hp.points[config].copy(), hp.names, config)


# ---------------------------------------------------------------------------
# model scores


def pointwise_loglik_draws(model, draws: PosteriorDraws) -> np.ndarray:
    """(draws, rows) matrix of per-row log-likelihoods."""
    out = np.empty((len(draws), model.n_rows if hasattr(model, "n_rows") else model.offset.size))
    keys, inv = np.unique(np.round(draws.hyper, 12), axis=0, return_inverse=True)
    inv = np.asarray(inv).ravel()
    for k in range(len(keys)):
        rows = np.nonzero(inv == k)[0]
        h = draws.hyper[rows[0]]
        for r in rows:
            out[r] = model.pointwise_loglik(draws.latent[r], h)
    return out


def dic_from_deviances(deviances, deviance_at_mean: float) -> tuple[float, float]:
    """(DIC, p_D) from per-draw deviances and the deviance at the posterior mean."""
    dbar = float(np.mean(deviances))
    p_d = dbar - float(deviance_at_mean)
    return dbar + p_d, p_d


def waic_from_lpd(lpd: np.ndarray) -> tuple[float, float]:
    """(WAIC, p_waic) from a (draws, rows) matrix of log predictive densities."""
    lpd = np.atleast_2d(np.asarray(lpd, dtype=float))
    S = lpd.shape[0]
    lppd = float(np.sum(logsumexp(lpd, axis=0) - math.log(S)))
    p_waic = float(np.sum(np.var(lpd, axis=0, ddof=1))) if S > 1 else 0.0
    return -2.0 * (lppd - p_waic), p_waic


def dic(model, draws: PosteriorDraws, hp: HyperPosterior | None = None, lpd=None) -> tuple[float, float]:
    if lpd is None:
        lpd = pointwise_loglik_draws(model, draws)
    dev = -2.0 * lpd.sum(axis=1)
    h_bar = hp.mean() if hp is not None else draws.hyper.mean(axis=0)
    x_bar = draws.latent.mean(axis=0)
    dev_bar = -2.0 * float(np.sum(model.pointwise_loglik(x_bar, h_bar)))
    return dic_from_deviances(dev, dev_bar)


def waic(model, draws: PosteriorDraws, lpd=None) -> tuple[float, float]:
    if lpd is None:
        lpd = pointwise_loglik_draws(model, draws)
    return waic_from_lpd(lpd)


def score_model(model, draws: PosteriorDraws, hp: HyperPosterior | None = None) -> ModelScore:
    lpd = pointwise_loglik_draws(model, draws)
    d, pd = dic(model, draws, hp, lpd)
    w, pw = waic(model, draws, lpd)
    return ModelScore(d, pd, w, pw)


# ---------------------------------------------------------------------------
# fitting convenience and persistence


@dataclass
class FitResult:
    model: object
    hyper: HyperPosterior
    draws: PosteriorDraws

    def fixed_summary(self) -> dict:
        names = self.model.fixed_names
        out = {}
        for name in names:
            col = self.draws.latent[:, self.model.fixed_index(name)]
            q = np.quantile(col, [0.025, 0.5, 0.975])
            out[name] = {"mean": float(col.mean()), "sd": float(col.std(ddof=1)) if col.size > 1 else 0.0,
                         "q025": float(q[0]), "q50": float(q[1]), "q975": float(q[2])}
        return out


def fit(model, grid: HyperGrid | None = None, n_draws: int = 1000, seed=0) -> FitResult:
    hp = explore_hyper(model, grid)
    return FitResult(model, hp, sample_posterior(model, hp, n_draws, seed))


def _grid_diagnostics(hp: HyperPosterior) -> list:
    if hp.parts:
        return [{"hyper_index": hi.tolist(), "points": _grid_diagnostics(p)} for p, _, hi in hp.parts]
    rows = []
    for pt, lp, w, ga in zip(hp.points, hp.log_post, hp.weights, hp.approx):
        rows.append({"hyper": pt.tolist(), "log_post": float(lp), "weight": float(w),
                     "converged": bool(ga.converged), "iterations": int(ga.iterations), "grad_norm": float(ga.grad_norm)})
    return rows


def write_fit_json(path, result: FitResult, meta: dict | None = None, score: ModelScore | None = None) -> None:
    model = result.model
    doc = {
        "_meta": dict(meta or {}),
        "variant": getattr(getattr(model, "variant", None), "value", None),
        "latent_dim": int(model.dim),
        "hyper_names": list(result.hyper.names),
        "hyperparameters": result.hyper.summary(),
        "fixed_effects": result.fixed_summary(),
        "grid": {
            "center": None if result.hyper.center is None else result.hyper.center.tolist(),
            "steps": None if result.hyper.steps is None else result.hyper.steps.tolist(),
            "n_points": len(result.hyper),
            "n_failed": result.hyper.n_failed,
            "diagnostics": _grid_diagnostics(result.hyper),
        },
        "n_draws": len(result.draws),
        "seed": result.draws.seed,
    }
    if score is not None:
        doc["score"] = score.as_dict()
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, default=_json_default)


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o).__name__)


def write_draws(path, draws: PosteriorDraws) -> None:
    """Binary draws: header (magic, version, n_draws, dim) then f64 rows of [latent, hyper]."""
    n, dim = draws.latent.shape
    if n > 0xFFFF:
        raise ValueError("at most 65535 draws fit the header")
    block = np.hstack([draws.latent, draws.hyper]).astype("<f8")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(DRAWS_MAGIC, DRAWS_VERSION, n, dim))
        fh.write(block.tobytes())


def read_draws(path, hyper_names: tuple) -> PosteriorDraws:
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        if len(head) != _HEADER.size:
            raise ValueError(f"{path}: truncated header")
        magic, version, n, dim = _HEADER.unpack(head)
        if magic != DRAWS_MAGIC or version != DRAWS_VERSION:
            raise ValueError(f"{path}: not a draws file (magic {magic!r}, version {version})")
        d = len(hyper_names)
        data = np.frombuffer(fh.read(), dtype="<f8")
    if data.size != n * (dim + d):
        raise ValueError(f"{path}: expected {n * (dim + d)} values, found {data.size}")
    data = data.reshape(n, dim + d)
    return PosteriorDraws(data[:, :dim].copy(), data[:, dim:].copy(), tuple(hyper_names), np.zeros(n, np.int64))
