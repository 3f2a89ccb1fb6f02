import numpy as np
import pytest

from safespca.oracle import brute_force_card, jacobi_eigh, max_eigenvalue, xi_scan_psi

from conftest import random_psd


def test_jacobi_matches_characteristic_polynomial(rng):
    for n in range(2, 9):
        A = random_psd(rng, n)
        w, V = jacobi_eigh(A)
        roots = np.sort(np.roots(np.poly(A)).real)
        np.testing.assert_allclose(w, roots, rtol=1e-7, atol=1e-9)
        np.testing.assert_allclose(A @ V, V * w, atol=1e-10)


def test_max_eigenvalue_closed_forms():
    assert max_eigenvalue([[4.0]]) == 4.0
    assert max_eigenvalue([[2.0, 1.5], [1.5, 2.0]]) == pytest.approx(3.5)


def test_brute_force_diagonal():
    sol = brute_force_card(np.diag([3.0, 1.0]), 0.5)
    assert sol.psi == pytest.approx(2.5)
    assert sol.support == (0,)


def test_brute_force_two_by_two_pinned():
    # max{2-1, 2-1, 3.5-2}: the full support wins
    sol = brute_force_card(np.array([[2.0, 1.5], [1.5, 2.0]]), 1.0)
    assert sol.psi == pytest.approx(1.5)
    assert sol.support == (0, 1)
    np.testing.assert_allclose(np.abs(sol.x), [2 ** -0.5] * 2)


def test_brute_force_lambda_zero_is_pca(rng):
    S = random_psd(rng, 6)
    sol = brute_force_card(S, 0.0)
    assert sol.psi == pytest.approx(np.linalg.eigvalsh(S)[-1], rel=1e-10)
    assert sol.support == tuple(range(6))


def test_brute_force_guard():
    with pytest.raises(ValueError):
        brute_force_card(np.eye(21), 0.1)


def test_brute_force_monotone_in_lambda(rng):
    S = random_psd(rng, 7)
    lams = np.linspace(0.0, np.diag(S).max() * 1.2, 25)
    sols = [brute_force_card(S, lam) for lam in lams]
    psis = [s.psi for s in sols]
    sizes = [len(s.support) for s in sols]
    assert all(a >= b - 1e-12 for a, b in zip(psis, psis[1:]))
    assert all(a >= b for a, b in zip(sizes, sizes[1:]))


def test_brute_force_never_picks_eliminated_feature(rng):
    for _ in range(50):
        n = rng.integers(2, 8)
        S = random_psd(rng, n, m=3)
        lam = rng.uniform(0, np.diag(S).max())
        sol = brute_force_card(S, lam)
        assert all(S[i, i] > lam for i in sol.support)


def test_xi_scan_identity_basis():
    A = np.eye(2)
    assert xi_scan_psi(A, 0.0) == pytest.approx(1.0)
    assert xi_scan_psi(A, 0.6) == pytest.approx(0.4)


def test_xi_scan_matches_brute_force(rng):
    A = rng.standard_normal((2, 5))
    psi = brute_force_card(A.T @ A, 0.3).psi
    assert xi_scan_psi(A, 0.3, grid_points=10_000) == pytest.approx(psi, abs=1e-4)


def test_xi_scan_is_lower_bound(rng):
    for _ in range(20):
        A = rng.standard_normal((2, 4))
        lam = rng.uniform(0, np.diag(A.T @ A).max())
        psi = brute_force_card(A.T @ A, lam).psi
        assert xi_scan_psi(A, lam, grid_points=720) <= psi + 1e-12


def test_xi_scan_rejects_bad_shapes():
    with pytest.raises(ValueError):
        xi_scan_psi(np.ones((3, 4)), 0.1)
    with pytest.raises(ValueError):
        xi_scan_psi(np.ones((2, 4)), 0.1, grid_points=100)
