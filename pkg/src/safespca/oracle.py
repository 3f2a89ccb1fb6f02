"""Brute-force references for small instances.

Nothing here calls into the solver or LAPACK: eigenvalues come from a
self-contained cyclic Jacobi routine so the oracle stays independent of the
code paths it is used to check.
"""
from dataclasses import dataclass
from itertools import combinations

import numpy as np
from numba import njit

MAX_BRUTE_FORCE_ORDER = 20


@dataclass(frozen=True)
class CardSolution:
    """Optimum of the cardinality-penalized problem max x'Sx - lam*card(x)."""

    psi: float
    support: tuple
    x: np.ndarray


@njit(cache=True)
def _jacobi_eigh(A, tol, max_sweeps):
    n = A.shape[0]
    a = A.copy()
    v = np.eye(n)
    for _ in range(max_sweeps):
        off = 0.0
        for p in range(n):
            for q in range(p + 1, n):
                off += a[p, q] * a[p, q]
        scale = 0.0
        for p in range(n):
            scale += a[p, p] * a[p, p]
        if off <= tol * tol * (scale + off) or off == 0.0:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if theta >= 0.0:
                    t = 1.0 / (theta + np.sqrt(1.0 + theta * theta))
                else:
                    t = -1.0 / (-theta + np.sqrt(1.0 + theta * theta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = t * c
                for k in range(n):
                    akp = a[k, p]
                    akq = a[k, q]
                    a[k, p] = c * akp - s * akq
                    a[k, q] = s * akp + c * akq
                for k in range(n):
                    apk = a[p, k]
                    aqk = a[q, k]
                    a[p, k] = c * apk - s * aqk
                    a[q, k] = s * apk + c * aqk
                for k in range(n):
                    vkp = v[k, p]
                    vkq = v[k, q]
                    v[k, p] = c * vkp - s * vkq
                    v[k, q] = s * vkp + c * vkq
    w = np.empty(n)
    for i in range(n):
        w[i] = a[i, i]
    return w, v


def jacobi_eigh(A, tol=1e-15, max_sweeps=100):
    """Eigen-decomposition of a small symmetric matrix by cyclic Jacobi.

    Returns ``(w, V)`` with eigenvalues ascending and eigenvectors in the
    columns of ``V``.
    """
    A = np.ascontiguousarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("jacobi_eigh expects a square matrix")
    if A.shape[0] == 0:
        return np.empty(0), np.empty((0, 0))
    w, V = _jacobi_eigh(0.5 * (A + A.T), tol, max_sweeps)
    order = np.argsort(w, kind="stable")
    return w[order], V[:, order]


def max_eigenvalue(A):
    """Largest eigenvalue; closed form for orders 1 and 2, Jacobi otherwise."""
    A = np.asarray(A, dtype=np.float64)
    n = A.shape[0]
    if n == 1:
        return float(A[0, 0])
    if n == 2:
        a, b, d = A[0, 0], 0.5 * (A[0, 1] + A[1, 0]), A[1, 1]
        return float(0.5 * (a + d) + np.hypot(0.5 * (a - d), b))
    return float(jacobi_eigh(A)[0][-1])


def brute_force_card(sigma, lam, rel_tie=1e-12):
    """Exact solution of max_{|x|=1} x'Sx - lam*card(x) by enumerating supports.

    Ties (within ``rel_tie``) go to the smaller support, then to the
    lexicographically smaller one. Support indices are 0-based positions.
    """
    S = np.asarray(getattr(sigma, "values", sigma), dtype=np.float64)
    n = S.shape[0]
    if n > MAX_BRUTE_FORCE_ORDER:
        raise ValueError(f"brute force limited to order {MAX_BRUTE_FORCE_ORDER}, got {n}")
    if n < 1:
        raise ValueError("empty matrix")
    best_val = -np.inf
    best_support = None
    for size in range(1, n + 1):
        for support in combinations(range(n), size):
            idx = np.array(support)
            val = max_eigenvalue(S[np.ix_(idx, idx)]) - lam * size
            # enumeration order already encodes the tie-break
            if best_support is None or val > best_val + rel_tie * (1.0 + abs(best_val)):
                best_val = val
                best_support = support
    idx = np.array(best_support)
    w, V = jacobi_eigh(S[np.ix_(idx, idx)])
    x = np.zeros(n)
    vec = V[:, -1]
    x[idx] = vec / np.linalg.norm(vec)
    return CardSolution(psi=float(best_val), support=best_support, x=x)


def xi_scan_psi(A, lam, grid_points=10_000):
    """Grid maximization of sum_i ((a_i' xi)^2 - lam)_+ over unit xi in R^2.

    ``A`` is the 2 x n data matrix whose columns are the a_i. Since xi and -xi
    give the same value, half the circle is scanned.
    """
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != 2:
        raise ValueError(f"xi_scan_psi needs a 2 x n matrix, got shape {A.shape}")
    if grid_points < 360:
        raise ValueError("grid_points must be at least 360")
    theta = np.linspace(0.0, np.pi, grid_points, endpoint=False)
    xi = np.stack([np.cos(theta), np.sin(theta)])
    proj = A.T @ xi
    vals = np.maximum(proj * proj - lam, 0.0).sum(axis=0)
    return float(vals.max())
