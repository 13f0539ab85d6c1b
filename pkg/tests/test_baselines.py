import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mcunmix.baselines import (RankCollapseError, fcls_solve, make_guidance, simplex_volume,
                               sivm_extract)
from mcunmix.hsi import HsiCube, validate_constraints
from mcunmix.metrics import rmse


def planted(rng, P, R, n_interior):
    V = rng.uniform(0.05, 1.0, size=(P, R))
    W = rng.dirichlet(np.ones(R), size=n_interior).T
    # strictly interior: pull away from the faces
    W = 0.9 * W + 0.1 / R
    X = np.hstack([V, V @ W])
    perm = rng.permutation(X.shape[1])
    return X[:, perm], set(int(np.flatnonzero(perm == r)[0]) for r in range(R))


def qr_volume(X, subset):
    """Simplex volume (times k!) as the product of |R_ii| from a QR of the edges."""
    v = X[:, list(subset)]
    r = np.linalg.qr(v[:, 1:] - v[:, :1], mode="r")
    return float(np.prod(np.abs(np.diag(r))))


def best_subset(X, R):
    N = X.shape[1]
    return max(itertools.combinations(range(N), R), key=lambda s: qr_volume(X, s))


@pytest.mark.parametrize("P,R,n_int", [(4, 3, 50), (5, 4, 26)])
def test_sivm_recovers_planted_vertices(P, R, n_int):
    rng = np.random.default_rng(P * 10 + R)
    X, vertices = planted(rng, P, R, n_int)
    assert X.shape[1] <= 60
    oracle = set(best_subset(X, R))
    assert oracle == vertices
    res = sivm_extract(X, R)
    assert set(res.indices) == oracle
    np.testing.assert_array_equal(res.endmembers.E, X[:, list(res.indices)])


def test_simplex_volume_matches_qr_oracle():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(6, 4))
    assert simplex_volume(X) == pytest.approx(qr_volume(X, range(4)), rel=1e-12)
    # unit right triangle: edge vectors e1, e2
    assert simplex_volume(np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])) == pytest.approx(1.0)


def test_sivm_all_pixels_when_N_equals_R():
    X = np.random.default_rng(1).uniform(size=(6, 4))
    assert sorted(sivm_extract(X, 4).indices) == [0, 1, 2, 3]


def test_sivm_duplicate_vertex_lowest_index():
    rng = np.random.default_rng(2)
    V = rng.uniform(0.1, 1.0, size=(5, 3))
    X = np.hstack([V, V[:, :1], 0.3 * V[:, :1] + 0.7 * V[:, 1:2]])
    res = sivm_extract(X, 3)
    assert 3 not in res.indices
    assert sorted(res.indices) == [0, 1, 2]


def test_sivm_indices_distinct_and_copies():
    rng = np.random.default_rng(3)
    X = rng.uniform(size=(8, 40))
    res = sivm_extract(HsiCube.from_flat(X, 5, 8), 5)
    assert len(set(res.indices)) == 5
    np.testing.assert_array_equal(res.endmembers.E, X[:, list(res.indices)])


def test_sivm_rank_collapse_names_iteration():
    X = np.outer(np.array([1.0, 2.0, 3.0]), np.linspace(0.1, 1.0, 10))
    with pytest.raises(RankCollapseError, match="iteration 2"):
        sivm_extract(X, 3)


def test_sivm_argument_checks():
    X = np.ones((3, 2))
    with pytest.raises(ValueError):
        sivm_extract(X, 1)
    with pytest.raises(ValueError):
        sivm_extract(X, 3)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_sivm_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    X = rng.uniform(size=(6, 25))
    perm = rng.permutation(25)
    a = sivm_extract(X, 4)
    b = sivm_extract(X[:, perm], 4)
    assert {tuple(X[:, i]) for i in a.indices} == {tuple(X[:, perm[i]]) for i in b.indices}


# ---------------------------------------------------------------- FCLS

def test_fcls_recovers_planted_abundances():
    rng = np.random.default_rng(4)
    E = rng.uniform(0.05, 1.0, size=(20, 4))
    A = rng.dirichlet(np.ones(4), size=100).T
    est = fcls_solve(E @ A, E)
    assert np.abs(est.A - A).max() < 1e-6


def test_fcls_single_endmember():
    rng = np.random.default_rng(5)
    est = fcls_solve(rng.uniform(size=(6, 9)), rng.uniform(0.1, 1.0, size=(6, 1)))
    np.testing.assert_array_equal(est.A, np.ones((1, 9)))


def test_fcls_vertex_pixels():
    rng = np.random.default_rng(6)
    E = rng.uniform(0.05, 1.0, size=(10, 3))
    est = fcls_solve(E, E)
    np.testing.assert_allclose(est.A, np.eye(3), atol=1e-6, rtol=0)


def test_fcls_constraints_hold_on_noise():
    rng = np.random.default_rng(7)
    est = fcls_solve(rng.uniform(size=(12, 50)), rng.uniform(0.05, 1.0, size=(12, 4)))
    assert est.A.min() >= 0.0
    assert np.abs(est.A.sum(axis=0) - 1).max() < 1e-6


def project_simplex(v):
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1
    k = np.flatnonzero(u - css / np.arange(1, v.size + 1) > 0)[-1]
    return np.maximum(v - css[k] / (k + 1), 0.0)


def test_fcls_beats_projected_least_squares():
    rng = np.random.default_rng(8)
    E = rng.uniform(0.05, 1.0, size=(15, 4))
    Y = E @ rng.dirichlet(np.ones(4), size=100).T + 0.05 * rng.normal(size=(15, 100))
    est = fcls_solve(Y, E).A
    ls = np.linalg.lstsq(E, Y, rcond=None)[0]
    for n in range(100):
        proj = project_simplex(ls[:, n])
        r_fcls = np.linalg.norm(Y[:, n] - E @ est[:, n])
        r_proj = np.linalg.norm(Y[:, n] - E @ proj)
        assert r_fcls <= r_proj + 1e-6


def test_fcls_pixel_order_irrelevant():
    rng = np.random.default_rng(9)
    E = rng.uniform(0.05, 1.0, size=(8, 3))
    Y = rng.uniform(size=(8, 30))
    perm = rng.permutation(30)
    np.testing.assert_array_equal(fcls_solve(Y, E).A[:, perm], fcls_solve(Y[:, perm], E).A)


def test_fcls_rank_deficient_lists_columns():
    E = np.array([[1.0, 2.0, 0.3], [2.0, 4.0, 0.1], [0.5, 1.0, 0.9]])
    with pytest.raises(np.linalg.LinAlgError, match=r"\[0, 1\]"):
        fcls_solve(np.ones((3, 2)), E)


def test_fcls_rejects_bad_delta_and_shapes():
    E = np.eye(3)
    with pytest.raises(ValueError):
        fcls_solve(np.ones((3, 2)), E, delta=0.0)
    with pytest.raises(ValueError):
        fcls_solve(np.ones((4, 2)), E)


# ---------------------------------------------------------------- guidance

def test_guidance_valid_and_deterministic():
    rng = np.random.default_rng(10)
    E = rng.uniform(0.05, 1.0, size=(16, 3))
    A = rng.dirichlet(np.ones(3), size=64).T
    Y = HsiCube.from_flat(E @ A + 0.01 * rng.normal(size=(16, 64)), 8, 8)
    g1, g2 = make_guidance(Y, 3), make_guidance(Y, 3)
    assert validate_constraints(g1.E, g1.A, 1e-6) == []
    np.testing.assert_array_equal(g1.A, g2.A)
    assert np.isfinite(rmse(A, g1.A))


def test_guidance_clips_negative_noisy_endmembers(caplog):
    rng = np.random.default_rng(11)
    E = rng.uniform(0.0, 0.05, size=(10, 3))
    A = rng.dirichlet(np.ones(3), size=49).T
    Y = HsiCube.from_flat(E @ A + 0.05 * rng.normal(size=(10, 49)), 7, 7)
    assert sivm_extract(Y, 3).endmembers.E.min() < 0
    g = make_guidance(Y, 3)
    assert g.E.min() >= 0.0 and "clipped" in caplog.text
    assert validate_constraints(g.E, g.A, 1e-6) == []
