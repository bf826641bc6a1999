import numpy as np
import pytest
import scipy.sparse as sp

from markedlgcp import inference
from markedlgcp.mesh import DomainPolygon, build_mesh
from markedlgcp.model import MarkedSample, loglik_grad_hess

# shared with test_acceptance: number of converged inner fits whose gradient was checked
GRAD_CHECKS = {"fits": 0, "worst": 0.0}
ACCEPTANCE_LINES: dict = {}


def make_sample(xy, mark=None, rng=None, p_area=1.0, p_dwel=1.0):
    rng = rng or np.random.default_rng(0)
    n = len(xy)
    xy = np.asarray(xy, dtype=float).reshape(-1, 2)
    if mark is None:
        mark = rng.poisson(1.0, n)
    return MarkedSample(
        ids=np.arange(n),
        x=xy[:, 0],
        y=xy[:, 1],
        mark=mark,
        nind=rng.integers(1, 5, n).astype(float),
        edu=rng.integers(1, 4, n).astype(float),
        age=rng.uniform(20, 60, n),
        iefp=rng.uniform(0, 0.2, n),
        offset2=np.zeros(n),
        p_area=np.full(n, p_area),
        p_dwel=np.full(n, p_dwel),
    )


class GaussianToy:
    """Gaussian rows y ~ N(B x + offset, s^2) with a fixed Gaussian prior.

    Implements the slice of the model interface used by the inference
    engine, so the Laplace step is exact and has closed-form oracles.
    """

    def __init__(self, B, y, s, Q, offset=None):
        self.B = sp.csr_matrix(B)
        self.y = np.asarray(y, float)
        self.s = float(s)
        self.Q = sp.csc_matrix(Q)
        self.offset = np.zeros(self.y.size) if offset is None else np.asarray(offset, float)
        self.hyper_names = ()

    @property
    def dim(self):
        return self.B.shape[1]

    @property
    def n_rows(self):
        return self.y.size

    def design(self, hyper):
        return self.B

    def prior_precision(self, hyper):
        return self.Q, float(np.linalg.slogdet(self.Q.toarray())[1])

    def log_hyper_prior(self, hyper):
        return 0.0

    def eta_terms(self, eta):
        r = self.y - eta
        s2 = self.s**2
        value = float(-0.5 * np.sum(r * r) / s2 - 0.5 * r.size * np.log(2 * np.pi * s2))
        return value, r / s2, np.full(r.size, 1.0 / s2)

    def pointwise_loglik(self, latent, hyper):
        r = self.y - (self.B @ latent + self.offset)
        s2 = self.s**2
        return -0.5 * r * r / s2 - 0.5 * np.log(2 * np.pi * s2)


@pytest.fixture(scope="session")
def square10():
    return DomainPolygon.rectangle(0, 0, 10, 10)


@pytest.fixture(scope="session")
def mesh10(square10):
    return build_mesh(square10, 1.5, 0.3)


@pytest.fixture
def sample10():
    rng = np.random.default_rng(1)
    return make_sample(rng.uniform(0, 10, (60, 2)), rng=rng)


def simulate_lgcp(domain, alpha, rng, sigma=None, rho=None, sim_max_edge=None):
    """Points of an LGCP with log intensity alpha + W on ``domain`` by thinning.

    W is a Matern GMRF on a fine simulation mesh (or absent when sigma is
    None). Returns (points, simulated node values of W or an empty array).
    """
    from markedlgcp.mesh import barycentric_projector, fem_matrices
    from markedlgcp.spde import InterpretableParams, precision, sample_gmrf, to_spde

    x0, y0, x1, y1 = domain.bounds
    if sigma is None:
        n = rng.poisson(np.exp(alpha) * domain.area)
        pts = np.column_stack([rng.uniform(x0, x1, n), rng.uniform(y0, y1, n)])
        return pts[domain.contains(pts)], np.zeros(0)
    mesh = build_mesh(domain, sim_max_edge, 0.3 * sim_max_edge)
    Q = precision(to_spde(InterpretableParams(sigma, rho)), fem_matrices(mesh))
    w = sample_gmrf(Q, 1, int(rng.integers(2**31)))[0]
    top = alpha + w.max()
    n = rng.poisson(np.exp(top) * (x1 - x0) * (y1 - y0))
    cand = np.column_stack([rng.uniform(x0, x1, n), rng.uniform(y0, y1, n)])
    P = barycentric_projector(mesh, cand)
    eta = alpha + P.A @ w
    keep = P.inside & (rng.uniform(size=n) < np.exp(eta - top))
    return cand[keep], w


@pytest.fixture(autouse=True, scope="session")
def gradient_contract():
    """Recheck the stationarity of every converged inner fit the suite produces.

    The gradient of log p(y | x) + log p(x | h) at the returned mode is
    recomputed from the model, independently of the Newton loop, and must
    satisfy |g| < 1e-6 (1 + |x|).
    """
    original = inference.inner_mode

    def checked(model, hyper, *args, **kw):
        ga = original(model, hyper, *args, **kw)
        if ga.converged:
            x = ga.mode
            _, g_lik, _ = loglik_grad_hess(model, x, ga.hyper)
            Qp, _ = model.prior_precision(ga.hyper)
            g = g_lik - Qp @ x
            ratio = float(np.linalg.norm(g)) / (1.0 + float(np.linalg.norm(x)))
            GRAD_CHECKS["fits"] += 1
            GRAD_CHECKS["worst"] = max(GRAD_CHECKS["worst"], ratio)
            assert ratio < 1e-6, f"inner mode not stationary: |g|/(1+|x|) = {ratio:.3e}"
        return ga

    inference.inner_mode = checked
    yield GRAD_CHECKS
    inference.inner_mode = original


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
