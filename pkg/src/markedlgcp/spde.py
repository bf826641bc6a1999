"""Matérn (nu = 1) Gaussian Markov random fields on a triangulation.

Parameter transforms between the SPDE pair (tau, kappa) and the
interpretable pair (sigma, rho), sparse precision assembly, the joint
penalised-complexity prior on (rho, sigma), and sampling through a sparse
Cholesky factor.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as sla

from .errors import NumericalDegeneracyError
from .mesh import FemMatrices

SQRT8 = math.sqrt(8.0)


@dataclass(frozen=True)
class SpdeParams:
    tau: float
    kappa: float

    def __post_init__(self):
        for name in ("tau", "kappa"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be positive and finite, got {v}")


@dataclass(frozen=True)
class InterpretableParams:
    sigma: float
    rho: float

    def __post_init__(self):
        for name in ("sigma", "rho"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be positive and finite, got {v}")


def to_spde(p: InterpretableParams) -> SpdeParams:
    kappa = SQRT8 / p.rho
    tau = 1.0 / (2.0 * p.sigma * kappa * math.sqrt(math.pi))
    return SpdeParams(tau, kappa)


def from_spde(p: SpdeParams) -> InterpretableParams:
    sigma = math.sqrt(1.0 / (4.0 * math.pi * p.kappa**2 * p.tau**2))
    return InterpretableParams(sigma, SQRT8 / p.kappa)


@dataclass(frozen=True)
class PcPrior:
    """Joint PC prior with P(rho < rho0) = alpha_rho and P(sigma > sigma0) = alpha_sigma."""

    rho0: float = 400.0
    alpha_rho: float = 0.5
    sigma0: float = 1.0
    alpha_sigma: float = 0.5

    def __post_init__(self):
        if not (0 < self.alpha_rho < 1 and 0 < self.alpha_sigma < 1):
            raise ValueError("tail probabilities must lie in (0, 1)")
        if not (self.rho0 > 0 and self.sigma0 > 0):
            raise ValueError("rho0 and sigma0 must be positive")

    @property
    def R(self) -> float:
        return -math.log(self.alpha_rho) * self.rho0

    @property
    def S(self) -> float:
        return -math.log(self.alpha_sigma) / self.sigma0


def pc_log_prior(p: InterpretableParams, prior: PcPrior) -> float:
    """log of R S rho^-2 exp(-R/rho - S sigma)."""
    rho, sigma = p.rho, p.sigma
    if rho <= 0 or sigma <= 0:
        raise ValueError("rho and sigma must be positive")
    R, S = prior.R, prior.S
    return math.log(R) + math.log(S) - 2.0 * math.log(rho) - R / rho - S * sigma


class SparseCholesky:
    """LDL' factorisation of a sparse SPD matrix via SuperLU in symmetric mode.

    The fill-reducing ordering (minimum degree on A'+A) is deterministic.
    With diagonal pivoting only, ``Pr A Pc = L U`` with ``Pr = Pc'`` and
    ``U = D L'``, so ``A = P L D L' P'``.
    """

    def __init__(self, A):
        A = sp.csc_matrix(A)
        self.n = A.shape[0]
        if self.n == 0:
            self._lu = None
            self.logdet = 0.0
            self.min_pivot = float("inf")
            return
        try:
            lu = sla.splu(
                A,
                permc_spec="MMD_AT_PLUS_A",
                diag_pivot_thresh=0.0,
                options=dict(SymmetricMode=True),
            )
        except RuntimeError as exc:  # exactly singular
            raise NumericalDegeneracyError(f"sparse factorisation failed: {exc}", 0.0) from exc
        d = lu.U.diagonal()
        self.min_pivot = float(d.min())
        if not np.all(np.isfinite(d)) or self.min_pivot <= 0:
            raise NumericalDegeneracyError(
                f"matrix is not positive definite (min pivot {self.min_pivot:.3e})", self.min_pivot
            )
        if not np.array_equal(lu.perm_r, lu.perm_c):
            raise NumericalDegeneracyError("row pivoting occurred; matrix not numerically SPD", self.min_pivot)
        self._lu = lu
        self._perm = lu.perm_c
        self._sqrt_d = np.sqrt(d)
        self._Lt = None
        self.logdet = float(np.sum(np.log(d)))

    def solve(self, b: np.ndarray) -> np.ndarray:
        if self.n == 0:
            return np.zeros_like(b, dtype=float)
        return self._lu.solve(np.asarray(b, dtype=float))

    def solve_Lt(self, z: np.ndarray) -> np.ndarray:
        """Return x with Cov(x) = A^-1 when z is standard normal (columns = draws)."""
        if self.n == 0:
            return np.zeros_like(z, dtype=float)
        if self._Lt is None:
            Lc = self._lu.L @ sp.diags(self._sqrt_d)
            self._Lt = sp.csr_matrix(Lc.T)
        y = sla.spsolve_triangular(self._Lt, z, lower=False)
        return y[self._perm]


def cholesky(A) -> SparseCholesky:
    return SparseCholesky(A)


class SparsePrecision:
    """Symmetric positive definite precision over mesh nodes, factorised lazily."""

    def __init__(self, Q):
        self.Q = sp.csc_matrix(Q)
        self._factor = None

    @property
    def shape(self):
        return self.Q.shape

    @property
    def factor(self) -> SparseCholesky:
        if self._factor is None:
            self._factor = SparseCholesky(self.Q)
        return self._factor

    @property
    def logdet(self) -> float:
        return self.factor.logdet

    def toarray(self) -> np.ndarray:
        return self.Q.toarray()

    def to_coo_csv(self, path) -> None:
        coo = self.Q.tocoo()
        with open(path, "w") as fh:
            fh.write("row,col,value\n")
            for i, j, v in zip(coo.row, coo.col, coo.data):
                fh.write(f"{i},{j},{v!r}\n")


def precision_matrix(p: SpdeParams, fem: FemMatrices) -> sp.csc_matrix:
    """tau^2 (kappa^4 C + 2 kappa^2 G + G C^-1 G) with lumped C."""
    k2 = p.kappa**2
    C = sp.diags(fem.C)
    Cinv = sp.diags(1.0 / fem.C)
    G = fem.G
    Q = (k2 * k2) * C + (2.0 * k2) * G + G @ Cinv @ G
    Q = (p.tau**2) * Q
    Q = 0.5 * (Q + Q.T)
    return sp.csc_matrix(Q)


def precision(p: SpdeParams, fem: FemMatrices, check: bool = True) -> SparsePrecision:
    out = SparsePrecision(precision_matrix(p, fem))
    if check:
        out.factor  # raises NumericalDegeneracyError with the min pivot
    return out


def sample_gmrf(Q, n: int, seed) -> np.ndarray:
    """Draw ``n`` zero-mean samples with precision ``Q``; shape (n, nodes)."""
    if isinstance(Q, SparsePrecision):
        factor = Q.factor
        dim = Q.shape[0]
    else:
        factor = SparseCholesky(Q)
        dim = Q.shape[0]
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((dim, n))
    return factor.solve_Lt(z).T.copy()
