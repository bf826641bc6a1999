import math

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from markedlgcp.errors import NumericalDegeneracyError
from markedlgcp.mesh import Mesh, fem_matrices
from markedlgcp.spde import (
    InterpretableParams,
    PcPrior,
    SparseCholesky,
    SpdeParams,
    from_spde,
    pc_log_prior,
    precision,
    precision_matrix,
    sample_gmrf,
    to_spde,
)


def grid_mesh(nx=4, ny=3, h=0.5):
    xs, ys = np.meshgrid(np.arange(nx) * h, np.arange(ny) * h)
    nodes = np.column_stack([xs.ravel(), ys.ravel()])
    tris = []
    for j in range(ny - 1):
        for i in range(nx - 1):
            a = j * nx + i
            tris += [[a, a + 1, a + nx + 1], [a, a + nx + 1, a + nx]]
    return Mesh(nodes, np.array(tris))


@pytest.fixture(scope="module")
def fem12():
    return fem_matrices(grid_mesh())


def test_to_spde_unit_kappa():
    p = to_spde(InterpretableParams(1.0, math.sqrt(8)))
    assert p.kappa == pytest.approx(1.0, abs=1e-12)
    assert p.tau == pytest.approx(1 / (2 * math.sqrt(math.pi)), abs=1e-12)
    assert p.tau == pytest.approx(0.282095, abs=1e-6)


def test_range_for_kappa_two():
    assert from_spde(SpdeParams(1.0, 2.0)).rho == pytest.approx(math.sqrt(2), abs=1e-12)


def test_from_spde_examples():
    assert from_spde(SpdeParams(1.0, 1.0)).sigma == pytest.approx(0.2820948, abs=1e-7)
    back = from_spde(SpdeParams(1 / (2 * math.sqrt(math.pi)), 1.0))
    assert back.sigma == pytest.approx(1.0, abs=1e-12)
    assert back.rho == pytest.approx(2.828427, abs=1e-6)


def test_roundtrip_spde():
    p = to_spde(from_spde(SpdeParams(0.7, 3.1)))
    assert p.tau == pytest.approx(0.7, abs=1e-12)
    assert p.kappa == pytest.approx(3.1, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.floats(1e-3, 1e3), st.floats(1e-3, 1e3))
def test_roundtrip_interpretable(sigma, rho):
    q = from_spde(to_spde(InterpretableParams(sigma, rho)))
    assert q.sigma == pytest.approx(sigma, rel=1e-10)
    assert q.rho == pytest.approx(rho, rel=1e-10)


def test_nonpositive_params_rejected():
    with pytest.raises(ValueError):
        SpdeParams(0.0, 1.0)
    with pytest.raises(ValueError):
        InterpretableParams(1.0, -1.0)


def test_precision_matches_dense_oracle(fem12):
    p = SpdeParams(0.8, 1.7)
    C = np.diag(fem12.C)
    G = fem12.G.toarray()
    dense = p.tau**2 * (p.kappa**4 * C + 2 * p.kappa**2 * G + G @ np.linalg.inv(C) @ G)
    Q = precision_matrix(p, fem12).toarray()
    assert np.abs(Q - dense).max() < 1e-10


def test_precision_scaling_and_symmetry(fem12):
    Q1 = precision_matrix(SpdeParams(0.5, 2.0), fem12)
    Q2 = precision_matrix(SpdeParams(1.0, 2.0), fem12)
    assert abs(Q2 - 4 * Q1).max() < 1e-12
    assert abs(Q1 - Q1.T).max() < 1e-12


def test_cholesky_logdet_and_solve(fem12):
    Q = precision_matrix(SpdeParams(0.8, 1.7), fem12)
    f = SparseCholesky(Q)
    assert f.logdet == pytest.approx(np.linalg.slogdet(Q.toarray())[1], abs=1e-10)
    b = np.arange(Q.shape[0], dtype=float)
    np.testing.assert_allclose(Q @ f.solve(b), b, atol=1e-10)


def test_indefinite_matrix_raises():
    A = sp.csc_matrix(np.array([[1.0, 2.0], [2.0, 1.0]]))
    with pytest.raises(NumericalDegeneracyError):
        SparseCholesky(A)


def test_pc_prior_constants():
    prior = PcPrior(400.0, 0.5, 1.0, 0.5)
    assert prior.R == pytest.approx(277.2589, abs=1e-4)
    assert prior.S == pytest.approx(0.6931472, abs=1e-7)
    lp = pc_log_prior(InterpretableParams(1.0, 400.0), prior)
    assert math.exp(lp) == pytest.approx(3.0028e-4, rel=1e-4)
    assert lp == pytest.approx(-8.1108, abs=1e-4)


def test_pc_prior_integrates_to_one():
    prior = PcPrior(2.0, 0.3, 1.5, 0.1)

    # integrate over log rho and log sigma to tame the heavy rho tail
    def f(ls, lr):
        r, s = math.exp(lr), math.exp(ls)
        return math.exp(pc_log_prior(InterpretableParams(s, r), prior)) * r * s

    val, _ = integrate.dblquad(f, -8, 14, -14, 4, epsabs=1e-10)
    assert val == pytest.approx(1.0, abs=1e-4)


def test_pc_prior_decreasing_in_sigma():
    prior = PcPrior()
    sig = np.linspace(0.01, 5, 40)
    vals = [pc_log_prior(InterpretableParams(s, 10.0), prior) for s in sig]
    assert np.all(np.diff(vals) < 0)


def test_gmrf_moments_match_dense_inverse(fem12):
    Q = precision(SpdeParams(0.8, 1.7), fem12)
    cov = np.linalg.inv(Q.toarray())
    x = sample_gmrf(Q, 50_000, 3)
    assert x.shape == (50_000, 12)
    sd = np.sqrt(np.diag(cov))
    assert np.abs(x[:10_000].mean(axis=0)).max() < 4 / math.sqrt(10_000) * sd.max()
    emp = np.cov(x.T)
    np.testing.assert_allclose(np.diag(emp), np.diag(cov), rtol=0.05)


def test_gmrf_same_seed_identical(fem12):
    Q = precision(SpdeParams(0.8, 1.7), fem12)
    np.testing.assert_array_equal(sample_gmrf(Q, 5, 11), sample_gmrf(Q, 5, 11))
    assert not np.array_equal(sample_gmrf(Q, 5, 11), sample_gmrf(Q, 5, 12))
