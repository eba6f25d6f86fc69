import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from knolab.analysis import (AnalysisError, SingularGramError, birkhoff_average, build_hankel, characteristic_polynomial,
                             companion_matrix, companion_spectrum, convergence_study, fit_koopman_lsq, gram_matrix,
                             hausdorff_distance, principal_minor_sums, rotation_orbit, write_convergence_csv)
from knolab.pde import gen_linear_trajectories, rotation_matrix
from knolab.systems import SYSTEMS


# -- Hankel ---------------------------------------------------------------

def test_constant_series():
    h = build_hankel(np.full(10, 2.5), 3)
    assert np.all(h.entries == 2.5) and h.entries.shape == (3, 8)


def test_index_law_example():
    h = build_hankel([1, 2, 3, 4, 5], 2, 4)
    assert h.entries.tolist() == [[1, 2, 3, 4], [2, 3, 4, 5]]
    assert h.column(1).tolist() == [1, 2]


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2 ** 31 - 1), m=st.integers(1, 6), n=st.integers(1, 10), d=st.integers(1, 3))
def test_index_formula_oracle(seed, m, n, d):
    s = np.random.default_rng(seed).standard_normal((m + n - 1, d))
    h = build_hankel(s, m, n).entries
    for i in range(m):
        for j in range(n):
            assert np.array_equal(h[i * d:(i + 1) * d, j], s[i + j])


def test_hankel_too_short():
    with pytest.raises(AnalysisError):
        build_hankel(np.arange(4.0), 3, 3)


# -- least squares fit ----------------------------------------------------

def _two_by_two():
    v = np.array([[1.0, 1.0], [0.0, 2.0]])
    return v @ np.diag([0.9, 0.5]) @ np.linalg.inv(v)


def test_identity_dynamics():
    h = np.tile(np.array([[1.0], [2.0]]), (1, 6))
    est = fit_koopman_lsq(h)
    np.testing.assert_allclose(est.matrix @ h[:, :1], h[:, :1], atol=1e-14)
    assert est.residual == pytest.approx(0.0, abs=1e-14) and est.rank_deficient


def test_recovers_generating_matrix():
    a = _two_by_two()
    x = gen_linear_trajectories(a, n=50, x0=np.array([1.0, -0.7]))
    est = fit_koopman_lsq(build_hankel(x, 1))
    np.testing.assert_allclose(est.matrix, a, atol=1e-10)
    # pseudo-inverse oracle on the stacked snapshot matrices
    np.testing.assert_allclose(est.matrix, x[1:].T @ np.linalg.pinv(x[:-1].T), atol=1e-10)


def test_noisy_matches_normal_equations():
    x = gen_linear_trajectories(_two_by_two(), n=80, noise=0.05, seed=3)
    est = fit_koopman_lsq(build_hankel(x, 1))
    xk, yk = x[:-1].T, x[1:].T
    normal = np.linalg.solve(xk @ xk.T, xk @ yk.T).T
    np.testing.assert_allclose(est.matrix, normal, atol=1e-10)
    assert est.residual >= 0


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2 ** 31 - 1), m=st.integers(1, 3))
def test_galerkin_orthogonality(seed, m):
    s = np.random.default_rng(seed).standard_normal((40, 2))
    h = build_hankel(s, m).entries
    p = fit_koopman_lsq(h).matrix
    resid = h[:, 1:] - p @ h[:, :-1]
    assert np.abs(resid @ h[:, :-1].T).max() < 1e-10


# -- companion spectrum ---------------------------------------------------

def test_scalar_geometric():
    rep = companion_spectrum(0.7 ** np.arange(20), 1)
    assert rep.eigenvalues[0] == pytest.approx(0.7, abs=1e-12)


def test_damped_rotation_m200():
    sys_ = SYSTEMS["damped-rotation"]
    for m in (200, 400):
        rep = companion_spectrum(sys_.series(m + 2), 2, m=m, reference=sys_.reference)
        assert rep.spectral_distance < 1e-8


def test_companion_sparsity_exact():
    rep = companion_spectrum(SYSTEMS["rotation"].series(40), 3, m=30)
    c = rep.companion
    mask = np.zeros_like(c, dtype=bool)
    mask[np.arange(1, 3), np.arange(2)] = True
    assert np.all(c[mask] == 1.0)
    mask[:, -1] = True
    assert np.all(c[~mask] == 0.0)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2 ** 31 - 1), r=st.integers(1, 6))
def test_polynomial_roots_match_eigensolver(seed, r):
    comp = companion_matrix(np.random.default_rng(seed).uniform(-1, 1, r))
    roots = np.roots(characteristic_polynomial(comp)) if r > 1 else -characteristic_polynomial(comp)[1:]
    assert hausdorff_distance(roots, np.linalg.eigvals(comp)) < 1e-6


def test_principal_minors_small_case():
    a = np.array([[1.0, 2.0, 0.0], [3.0, 4.0, 1.0], [0.0, 1.0, 5.0]])
    np.testing.assert_allclose(principal_minor_sums(a), [10.0, (4 - 6) + 5 + (20 - 1), np.linalg.det(a)])


def test_gram_is_scaled_inner_products():
    h = build_hankel(np.random.default_rng(4).standard_normal(30), 5, 6)
    cols = h.entries[:, :3]
    np.testing.assert_allclose(gram_matrix(h, 3), cols.T @ cols / 5)


def test_singular_gram_reports_condition():
    with pytest.raises(SingularGramError) as err:
        companion_spectrum(np.ones(30), 2, m=20)
    assert err.value.condition_number > 1e12


def test_large_r_uses_dense_solver():
    s = np.random.default_rng(5).standard_normal(100)
    assert companion_spectrum(s, 8, m=80).method == "dense-eigensolver"


# -- convergence ----------------------------------------------------------

def test_exact_periodic_system():
    a = rotation_matrix(0.3)
    ref = np.exp(np.array([1j, -1j]) * 0.3)
    rows = convergence_study(lambda n: gen_linear_trajectories(a, n=n, x0=np.array([1.0, 0.0])), [2, 3, 8, 32], 2,
                             ref)
    assert all(row["distance"] < 1e-10 for row in rows)


def test_single_row_table(tmp_path):
    sys_ = SYSTEMS["rotation"]
    rows = convergence_study(sys_.series, [16], sys_.r, sys_.reference)
    assert len(rows) == 1
    write_convergence_csv(rows, tmp_path / "c.csv")
    with open(tmp_path / "c.csv") as fh:
        got = list(csv.DictReader(fh))
    assert float(got[0]["distance"]) == rows[0]["distance"]


def test_monotone_within_band():
    sys_ = SYSTEMS["rotation"]
    rows = convergence_study(sys_.series, [2, 8, 32, 128], sys_.r, sys_.reference)
    d = [row["distance"] for row in rows]
    assert all(b <= 1.1 * a for a, b in zip(d, d[1:]))
    assert d[-1] <= d[0]


def test_damped_rotation_closed_at_every_m():
    # full-state observable closes the Krylov basis exactly, so only roundoff remains
    sys_ = SYSTEMS["damped-rotation"]
    rows = convergence_study(sys_.series, [2, 8, 32, 128], sys_.r, sys_.reference)
    assert all(row["distance"] < 1e-10 for row in rows)


# -- ergodic averages -----------------------------------------------------

def test_birkhoff_average_rotation():
    orbit = rotation_orbit(0.1, (np.sqrt(5) - 1) / 2, 10 ** 6)
    avg = birkhoff_average(lambda t: np.cos(2 * np.pi * t) ** 2, orbit)
    assert abs(avg - 0.5) < 1e-3
