"""Block coordinate ascent for the l1-penalized sparse PCA relaxation.

The solver works on the log-det penalized problem

    max_X  Tr(S X) - lam ||X||_1 - (Tr X)^2 / 2 + beta log det X,   X > 0,

whose solution, rescaled to unit trace, solves

    max_Z  Tr(S Z) - lam ||Z||_1   s.t.  Z >= 0, Tr Z = 1

to within epsilon when beta = epsilon / n. Each step re-optimizes one
row/column of X through its dual: a box-constrained QP in u solved by
coordinate descent, then a scalar convex problem in tau whose stationarity
condition is the cubic tau^3 + c tau^2 - beta tau - R^2 = 0.
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
import csv
import math
import time
import warnings

import numpy as np
from numba import njit

from safespca.covariance import CovarianceMatrix
from safespca.errors import InfeasibleError, NotPositiveDefiniteError, NumericalError

ASCENT_SLACK = 1e-9
SLOW_CD_PASSES = 10
KKT_TOL = 1e-6

_TAU_OK, _TAU_NO_BRACKET = 0, 1
_ROW_OK, _ROW_TAU_FAILED, _ROW_NOT_FINITE = 0, 1, 2


@dataclass(frozen=True)
class SolverConfig:
    lam: float = 0.0
    epsilon: float = 1e-4
    max_sweeps: int = 20
    sweep_tol: float = 1e-6
    qp_tol: float = 1e-8
    qp_max_passes: int = 100
    tau_tol: float = 1e-12
    support_threshold: float = 1e-3

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.max_sweeps < 1:
            raise ValueError("max_sweeps must be at least 1")
        for name in ("sweep_tol", "qp_tol", "tau_tol", "support_threshold"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.qp_max_passes < 1:
            raise ValueError("qp_max_passes must be at least 1")

    def with_lambda(self, lam):
        return replace(self, lam=float(lam))


@dataclass
class SolverState:
    """Iterate of the penalized problem plus bookkeeping.

    ``objective_trace[k]`` is the penalized objective after ``k`` sweeps
    (entry 0 is the starting point X = I). ``warm_u[j]`` caches the box-QP
    solution for column j; its j-th entry is unused and kept at zero.
    """

    X: np.ndarray
    lam: float
    beta: float
    warm_u: np.ndarray
    objective_trace: list = field(default_factory=list)
    sweep_seconds: list = field(default_factory=list)
    sweeps_done: int = 0
    row_updates: int = 0
    qp_passes: int = 0

    @classmethod
    def initial(cls, sigma, lam, beta):
        S = _values(sigma)
        n = S.shape[0]
        U = S - np.clip(S, -lam, lam)
        np.fill_diagonal(U, 0.0)
        return cls(X=np.eye(n), lam=float(lam), beta=float(beta), warm_u=np.ascontiguousarray(U))


@dataclass(frozen=True)
class SparseComponent:
    """A sparse loading vector read off the relaxation's solution.

    ``support`` holds original feature ids; ``weights`` is unit-norm with its
    largest-magnitude entry positive.
    """

    support: tuple
    weights: tuple
    explained_variance: float
    cardinality: int
    lambda_used: float
    phi_estimate: float
    degenerate: bool = False
    sweeps: int = 0
    reduced_n: int = 0

    def to_dict(self):
        d = asdict(self)
        d["support"] = list(self.support)
        d["weights"] = list(self.weights)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["support"] = tuple(int(i) for i in d["support"])
        d["weights"] = tuple(float(w) for w in d["weights"])
        return cls(**d)


def _values(sigma):
    return np.ascontiguousarray(getattr(sigma, "values", sigma), dtype=np.float64)


# --------------------------------------------------------------------------
# kernels


@njit(cache=True, nogil=True)
def eta_update(y1, g, s1, lam):
    """Minimize y1*eta^2 + 2*g*eta over |eta - s1| <= lam (y1 >= 0)."""
    lo = s1 - lam
    hi = s1 + lam
    if y1 > 0.0:
        eta = -g / y1
        if eta < lo:
            return lo
        if eta > hi:
            return hi
        return eta
    if g > 0.0:
        return lo
    return hi


@njit(cache=True, nogil=True)
def _matvec_skip(M, skip, u, r):
    n = M.shape[0]
    for i in range(n):
        r[i] = 0.0
    for k in range(n):
        if k == skip:
            continue
        uk = u[k]
        if uk != 0.0:
            for i in range(n):
                r[i] += M[k, i] * uk
    if skip >= 0:
        r[skip] = 0.0


@njit(cache=True, nogil=True)
def _cd_passes(M, skip, s, lam, u, r, thresh, max_passes):
    # cyclic coordinate descent; r = Yu is kept up to date incrementally
    n = M.shape[0]
    passes = 0
    for _ in range(max_passes):
        passes += 1
        dmax = 0.0
        for i in range(n):
            if i == skip:
                continue
            yi = M[i, i]
            g = r[i] - yi * u[i]
            if yi == 0.0 and g == 0.0:
                continue  # flat in this coordinate: any feasible value is optimal
            eta = eta_update(yi, g, s[i], lam)
            d = eta - u[i]
            if d != 0.0:
                u[i] = eta
                for k in range(n):
                    r[k] += M[i, k] * d
                if abs(d) > dmax:
                    dmax = abs(d)
        if dmax <= thresh:
            return passes, True
    return passes, False


@njit(cache=True, nogil=True)
def _quad(M, skip, u, r):
    _matvec_skip(M, skip, u, r)
    q = 0.0
    for i in range(M.shape[0]):
        if i != skip:
            q += u[i] * r[i]
    return q


@njit(cache=True, nogil=True)
def _kkt_violation(skip, s, lam, u, r):
    # optimality of the box QP relative to max|Yu|: r = Yu must vanish on free
    # coordinates and point into the box at active bounds
    n = u.shape[0]
    scale = 0.0
    worst = 0.0
    margin = 1e-12 * (1.0 + lam)
    for i in range(n):
        if i == skip:
            continue
        if abs(r[i]) > scale:
            scale = abs(r[i])
        gap = u[i] - s[i]
        if gap <= -lam + margin:
            v = -r[i]
        elif gap >= lam - margin:
            v = r[i]
        else:
            v = abs(r[i])
        if v > worst:
            worst = v
    if scale == 0.0:
        return 0.0
    return worst / scale


@njit(cache=True, nogil=True)
def _active_set(M, skip, s, lam, u, r):
    # primal active-set method from the feasible point u: Newton step on the
    # free coordinates, ratio test against the box, release bounds whose
    # multiplier has the wrong sign. u'Yu never increases; r = Yu on exit.
    n = M.shape[0]
    margin = 1e-12 * (1.0 + lam)
    # state: 0 free, -1 at lower bound, +1 at upper bound
    state = np.zeros(n, dtype=np.int64)
    for i in range(n):
        if i == skip:
            continue
        gap = u[i] - s[i]
        if gap <= -lam + margin:
            state[i] = -1
            u[i] = s[i] - lam
        elif gap >= lam - margin:
            state[i] = 1
            u[i] = s[i] + lam
    free = np.empty(n, dtype=np.int64)
    for _ in range(4 * n + 10):
        _matvec_skip(M, skip, u, r)
        nf = 0
        for i in range(n):
            if i != skip and state[i] == 0:
                free[nf] = i
                nf += 1
        scale = 0.0
        rfree = 0.0
        for i in range(n):
            if i != skip:
                scale = max(scale, abs(r[i]))
                if state[i] == 0:
                    rfree = max(rfree, abs(r[i]))
        step_taken = False
        if nf > 0 and rfree > 0.1 * KKT_TOL * scale:
            A = np.empty((nf, nf))
            g = np.empty(nf)
            for a in range(nf):
                g[a] = -r[free[a]]
                for c in range(nf):
                    A[a, c] = M[free[a], free[c]]
            try:
                p = np.linalg.solve(A, g)
            except Exception:
                return False
            pmax = 0.0
            for a in range(nf):
                pmax = max(pmax, abs(p[a]))
            if pmax > 0.0:
                q0 = 0.0
                for i in range(n):
                    if i != skip:
                        q0 += u[i] * r[i]
                # try the Newton point projected on the box: fixes many bounds at once
                keep = u.copy()
                for a in range(nf):
                    i = free[a]
                    u[i] = min(max(u[i] + p[a], s[i] - lam), s[i] + lam)
                if _quad(M, skip, u, r) < q0:
                    for a in range(nf):
                        i = free[a]
                        if u[i] <= s[i] - lam:
                            state[i] = -1
                        elif u[i] >= s[i] + lam:
                            state[i] = 1
                    continue
                u[:] = keep
                # otherwise the largest feasible step along p
                alpha = 1.0
                block = -1
                for a in range(nf):
                    i = free[a]
                    if p[a] > 0.0:
                        t = (s[i] + lam - u[i]) / p[a]
                    elif p[a] < 0.0:
                        t = (s[i] - lam - u[i]) / p[a]
                    else:
                        continue
                    if t < alpha:
                        alpha = t
                        block = a
                if alpha < 0.0:
                    alpha = 0.0
                for a in range(nf):
                    u[free[a]] += alpha * p[a]
                if block >= 0:
                    i = free[block]
                    if p[block] > 0.0:
                        state[i] = 1
                        u[i] = s[i] + lam
                    else:
                        state[i] = -1
                        u[i] = s[i] - lam
                step_taken = True
        if step_taken:
            continue
        # stationary on the free set: release every bound whose multiplier has
        # the wrong sign (the gradient 2r_i must be >= 0 at a lower bound, <= 0 at an upper)
        released = False
        for i in range(n):
            if i == skip or state[i] == 0:
                continue
            v = -r[i] if state[i] == -1 else r[i]
            if v > 0.1 * KKT_TOL * scale:
                state[i] = 0
                released = True
        if not released:
            return True
    _matvec_skip(M, skip, u, r)
    return False


@njit(cache=True, nogil=True)
def _box_qp_kernel(M, skip, s, lam, u, tol, max_passes):
    # min u'Yu over |u - s|_inf <= lam, Y = M without row/col `skip`; u updated in place
    n = M.shape[0]
    r = np.empty(n)
    _matvec_skip(M, skip, u, r)
    smax = 0.0
    for i in range(n):
        if i != skip and abs(s[i]) > smax:
            smax = abs(s[i])
    thresh = tol * (1.0 + smax)
    passes, done = _cd_passes(M, skip, s, lam, u, r, thresh, max_passes)
    # on an ill-conditioned Y the step-size stop fires far from the optimum;
    # the row update needs Yu itself to be accurate, so check optimality on
    # that scale and finish on the free set when it fails
    rounds = 0
    while rounds < 3 and (not done or passes > SLOW_CD_PASSES
                          or _kkt_violation(skip, s, lam, u, r) > KKT_TOL):
        rounds += 1
        keep = u.copy()
        before = _quad(M, skip, u, r)
        _active_set(M, skip, s, lam, u, r)
        if not _quad(M, skip, u, r) <= before:
            u[:] = keep
            _matvec_skip(M, skip, u, r)
        extra, done = _cd_passes(M, skip, s, lam, u, r, thresh, 10)
        passes += extra
        if done and _kkt_violation(skip, s, lam, u, r) <= KKT_TOL:
            break
    # fresh product: the incremental one drifts
    R2 = _quad(M, skip, u, r)
    if R2 < 0.0:
        R2 = 0.0
    return R2, passes, r


@njit(cache=True, nogil=True)
def _cubic(t, c, beta, R2):
    return ((t + c) * t - beta) * t - R2


@njit(cache=True, nogil=True)
def _tau_kernel(R2, c, beta):
    # positive root of t^3 + c t^2 - beta t - R2; negative below it, positive above
    lo = beta / (abs(c) + math.sqrt(R2) + 1.0)
    k = 0
    while _cubic(lo, c, beta, R2) >= 0.0:
        lo *= 0.5
        k += 1
        if k > 200:
            return lo, _TAU_NO_BRACKET
    hi = max(1.0, -c)
    k = 0
    while _cubic(hi, c, beta, R2) <= 0.0:
        lo = hi
        hi *= 2.0
        k += 1
        if k > 200:
            return hi, _TAU_NO_BRACKET
    # Newton safeguarded by bisection
    t = hi
    for _ in range(300):
        f = _cubic(t, c, beta, R2)
        if f == 0.0:
            return t, _TAU_OK
        if f < 0.0:
            lo = t
        else:
            hi = t
        d = (3.0 * t + 2.0 * c) * t - beta
        tn = 0.5 * (lo + hi)
        if d > 0.0:
            cand = t - f / d
            if lo < cand < hi:
                tn = cand
        if abs(tn - t) <= 2.2e-16 * tn or hi - lo <= 4.4e-16 * hi:
            return tn, _TAU_OK
        t = tn
    return t, _TAU_OK


@njit(cache=True, nogil=True)
def _row_update_kernel(X, S, j, lam, beta, U, qp_tol, qp_max_passes):
    n = X.shape[0]
    u = U[j]
    R2, passes, r = _box_qp_kernel(X, j, S[j], lam, u, qp_tol, qp_max_passes)
    t = 0.0
    for i in range(n):
        if i != j:
            t += X[i, i]
    c = S[j, j] - lam - t
    tau, status = _tau_kernel(R2, c, beta)
    if status != _TAU_OK:
        return _ROW_TAU_FAILED, passes
    # equals c + tau at the root, without the cancellation when c ~ -tau
    x = (beta * tau + R2) / (tau * tau)
    if not (np.isfinite(x) and x > 0.0 and np.isfinite(tau)):
        return _ROW_NOT_FINITE, passes
    for i in range(n):
        if i != j:
            yi = r[i] / tau
            X[j, i] = yi
            X[i, j] = yi
    X[j, j] = x
    return _ROW_OK, passes


@njit(cache=True, nogil=True)
def _sweep_kernel(X, S, lam, beta, U, qp_tol, qp_max_passes):
    total = 0
    for j in range(X.shape[0]):
        status, passes = _row_update_kernel(X, S, j, lam, beta, U, qp_tol, qp_max_passes)
        total += passes
        if status != _ROW_OK:
            return status, j, total
    return _ROW_OK, -1, total


# --------------------------------------------------------------------------
# public operations


def box_qp(Y, s, lam, warm=None, config=None):
    """Coordinate descent for  min u'Yu  s.t.  ||u - s||_inf <= lam.

    Returns ``(u, R2)`` with ``R2 = u'Yu``. Starts from ``warm`` when given,
    otherwise from the feasible point of smallest norm.
    """
    config = config or SolverConfig()
    Y = _values(Y)
    s = np.asarray(s, dtype=np.float64)
    if Y.ndim != 2 or Y.shape[0] != Y.shape[1] or Y.shape[0] != s.size:
        raise ValueError(f"dimension mismatch: Y {Y.shape}, s {s.shape}")
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    if warm is None:
        u = s - np.clip(s, -lam, lam)
    else:
        u = np.clip(np.array(warm, dtype=np.float64), s - lam, s + lam)
    R2, _, _ = _box_qp_kernel(Y, -1, s, float(lam), u, config.qp_tol, config.qp_max_passes)
    return u, R2


def tau_solve(R2, c, beta, config=None):
    """Minimizer over tau > 0 of R2/tau - beta*log(tau) + (c + tau)^2 / 2."""
    config = config or SolverConfig()
    if R2 < 0 or beta <= 0:
        raise ValueError("tau_solve needs R2 >= 0 and beta > 0")
    tau, status = _tau_kernel(float(R2), float(c), float(beta))
    if status != _TAU_OK:
        raise NumericalError(f"tau stage: no sign change (R2={R2}, c={c}, beta={beta})")
    resid = abs(_cubic(tau, c, beta, R2))
    if resid > config.tau_tol * max(1.0, abs(c) ** 3, R2):
        raise NumericalError(f"tau stage: residual {resid:.3g} above tolerance")
    return tau


def objective(X, sigma, lam, beta):
    """Penalized objective Tr(SX) - lam||X||_1 - (Tr X)^2/2 + beta log det X."""
    X = np.asarray(X, dtype=np.float64)
    S = _values(sigma)
    try:
        L = np.linalg.cholesky(X)
    except np.linalg.LinAlgError:
        raise NotPositiveDefiniteError("X is not positive definite") from None
    logdet = 2.0 * float(np.sum(np.log(np.diag(L))))
    tr = float(np.trace(X))
    value = float(np.sum(S * X)) - lam * float(np.sum(np.abs(X))) - 0.5 * tr * tr
    if beta:
        value += beta * logdet
    return value


def row_update(state, sigma, j, config=None):
    """Exactly re-optimize row/column ``j`` of ``state.X`` (in place)."""
    config = config or SolverConfig(lam=state.lam)
    S = _values(sigma)
    n = state.X.shape[0]
    if not 0 <= j < n:
        raise IndexError(f"column {j} outside [0, {n})")
    status, passes = _row_update_kernel(state.X, S, j, state.lam, state.beta, state.warm_u,
                                        config.qp_tol, config.qp_max_passes)
    state.qp_passes += passes
    state.row_updates += 1
    _check_row_status(status, state.sweeps_done, j)
    return state


def _check_row_status(status, sweep, col):
    if status == _ROW_TAU_FAILED:
        raise NumericalError(f"tau stage failed at sweep {sweep}, column {col}")
    if status == _ROW_NOT_FINITE:
        raise NotPositiveDefiniteError(
            f"row update lost positive definiteness at sweep {sweep}, column {col}")


def recover_Z(X):
    """Unit-trace rescaling Z = X / Tr X."""
    X = np.asarray(X, dtype=np.float64)
    tr = float(np.trace(X))
    if not tr > 0:
        raise ValueError("Tr X must be positive")
    return X / tr


def solve(sigma, config, on_sweep=None):
    """Run block coordinate ascent; return ``(state, Z, phi)``.

    ``sigma`` is normalized to unit maximal diagonal internally and
    beta = epsilon / n is set on that scale. The returned state is expressed
    in the original units. ``phi = Tr(S Z) - lam ||Z||_1``.
    ``on_sweep(sweep, objective, X)`` sees each sweep's iterate on the
    normalized scale; it must not modify X.
    """
    S = _values(sigma)
    n = S.shape[0]
    lam = float(config.lam)
    d = np.diag(S)
    if lam >= d.min():
        raise InfeasibleError(
            f"lambda={lam:g} is not below the smallest variance {d.min():g}; run screening first"
        )
    alpha = float(d.max())
    Sn = np.ascontiguousarray(S / alpha)
    lam_n = lam / alpha
    beta_n = config.epsilon / n
    st = SolverState.initial(Sn, lam_n, beta_n)
    st.objective_trace.append(objective(st.X, Sn, lam_n, beta_n))
    for sweep in range(1, config.max_sweeps + 1):
        t0 = time.perf_counter()
        status, col, passes = _sweep_kernel(st.X, Sn, lam_n, beta_n, st.warm_u,
                                            config.qp_tol, config.qp_max_passes)
        st.sweep_seconds.append(time.perf_counter() - t0)
        st.qp_passes += passes
        _check_row_status(status, sweep, col)
        st.row_updates += n
        st.sweeps_done = sweep
        try:
            f = objective(st.X, Sn, lam_n, beta_n)
        except NotPositiveDefiniteError:
            raise NotPositiveDefiniteError(
                f"X lost positive definiteness during sweep {sweep}") from None
        prev = st.objective_trace[-1]
        st.objective_trace.append(f)
        if on_sweep is not None:
            on_sweep(sweep, f, st.X)
        if f < prev - ASCENT_SLACK * (1.0 + abs(f)):
            warnings.warn(f"objective decreased at sweep {sweep}: {prev!r} -> {f!r}",
                          RuntimeWarning, stacklevel=2)
        if abs(f - prev) <= config.sweep_tol * abs(f):
            break

    # back to original units: X scales with alpha, objective with alpha^2
    shift = beta_n * n * math.log(alpha)
    st.objective_trace = [alpha * alpha * (f + shift) for f in st.objective_trace]
    st.X = st.X * alpha
    st.warm_u = st.warm_u * alpha
    st.lam = lam
    st.beta = beta_n * alpha * alpha
    Z = recover_Z(st.X)
    phi = float(np.sum(S * Z)) - lam * float(np.sum(np.abs(Z)))
    return st, Z, phi


def extract_component(Z, sigma, support_threshold=1e-3, lambda_used=0.0):
    """Sparse loading vector from the leading eigenvector of Z.

    Entries below ``support_threshold`` times the largest magnitude are
    dropped and the rest renormalized. When the top eigenvalue of Z is
    repeated, the vector is taken as the projection of sqrt(diag Z) onto the
    top eigenspace and the component is flagged ``degenerate``.
    """
    Z = np.asarray(Z, dtype=np.float64)
    if not isinstance(sigma, CovarianceMatrix):
        sigma = CovarianceMatrix(sigma)
    S = sigma.values
    Zs = 0.5 * (Z + Z.T)
    w, V = np.linalg.eigh(Zs)
    top = w[-1]
    tied = w >= top - 1e-9 * max(abs(top), 1e-300)
    degenerate = bool(Z.shape[0] > 1 and tied.sum() > 1)
    if degenerate:
        P = V[:, tied]
        v = P @ (P.T @ np.sqrt(np.maximum(np.diag(Zs), 0.0)))
        if np.linalg.norm(v) == 0:
            v = P[:, 0]
    else:
        v = V[:, -1]
    v = v / np.linalg.norm(v)
    mag = np.abs(v)
    pos = np.flatnonzero(mag > support_threshold * mag.max())
    weights = v[pos] / np.linalg.norm(v[pos])
    if weights[int(np.argmax(np.abs(weights)))] < 0:
        weights = -weights
    explained = float(weights @ S[np.ix_(pos, pos)] @ weights)
    phi = float(np.sum(S * Z)) - lambda_used * float(np.sum(np.abs(Z)))
    return SparseComponent(
        support=tuple(int(i) for i in sigma.feature_ids[pos]),
        weights=tuple(float(x) for x in weights),
        explained_variance=max(explained, 0.0),
        cardinality=int(pos.size),
        lambda_used=float(lambda_used),
        phi_estimate=phi,
        degenerate=degenerate,
    )


def solve_screened(sigma, config):
    """Screen on the diagonal at ``config.lam``, solve, extract a component."""
    if not isinstance(sigma, CovarianceMatrix):
        sigma = CovarianceMatrix(sigma)
    d = sigma.diag
    order = np.lexsort((sigma.feature_ids, -d))
    keep = order[d[order] > config.lam]
    if keep.size == 0:
        raise InfeasibleError(
            f"lambda eliminates all features (lambda={config.lam:g}, max variance={d.max():g})")
    reduced = sigma.restrict(keep)
    state, Z, phi = solve(reduced, config)
    comp = extract_component(Z, reduced, config.support_threshold, config.lam)
    comp = replace(comp, sweeps=state.sweeps_done, reduced_n=int(keep.size))
    return comp, state


def search_lambda(sigma, target_cardinality, config=None, slack=2, max_solves=30,
                  grid_size=8, lam_floor=0.0, threads=1):
    """Find lambda whose screened solution has about ``target_cardinality`` loadings.

    A descending logarithmic grid over (lam_floor, max S_ii) is scanned until
    the cardinality reaches the target band, then the bracket is bisected in
    log-lambda. Returns ``(component, lambda)``: the first solution within
    ``slack`` of the target, otherwise the closest one seen in ``max_solves``
    solves. ``threads > 1`` evaluates grid points concurrently without
    changing the result.
    """
    if target_cardinality < 1:
        raise ValueError("target cardinality must be at least 1")
    config = config or SolverConfig()
    if not isinstance(sigma, CovarianceMatrix):
        sigma = CovarianceMatrix(sigma)
    dmax = float(sigma.diag.max())
    hi_lam = dmax * (1.0 - 1e-3)
    lo_lam = max(lam_floor, dmax * 1e-4)
    if lo_lam >= hi_lam:
        lo_lam = hi_lam * 0.5
    grid = np.geomspace(hi_lam, lo_lam, grid_size) if grid_size > 1 else np.array([hi_lam])

    cache = {}

    def evaluate(lam):
        lam = float(lam)
        if lam not in cache:
            cache[lam] = solve_screened(sigma, config.with_lambda(lam))[0]
        return cache[lam]

    seen = []
    pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None

    diag = sigma.diag

    def prefetch(i):
        # solve the next few grid points together; the scan below reads them
        # in order, so the outcome does not depend on the thread count. Points
        # whose screened problem is much larger than grid[i]'s are left out:
        # the scan may never reach them and they dominate the cost.
        room = max_solves - len(seen)
        size = max(int(np.count_nonzero(diag > grid[i])), 1)
        batch = []
        for x in grid[i:i + min(threads, room)]:
            if np.count_nonzero(diag > x) > 1.5 * size:
                break
            if float(x) not in cache:
                batch.append(float(x))
        if len(batch) > 1:
            for lam, comp in zip(batch, pool.map(evaluate, batch)):
                cache[lam] = comp

    def consider(lam):
        comp = evaluate(lam)
        seen.append(comp)
        return comp

    def closest():
        # earliest among the nearest cardinalities
        return min(seen, key=lambda c: abs(c.cardinality - target_cardinality))

    above = None  # lambda with cardinality below target
    below = None  # lambda with cardinality above target
    try:
        for i, lam in enumerate(grid):
            if len(seen) >= max_solves:
                break
            if pool is not None and float(lam) not in cache:
                prefetch(i)
            comp = consider(lam)
            if abs(comp.cardinality - target_cardinality) <= slack:
                return comp, comp.lambda_used
            if comp.cardinality > target_cardinality:
                below = float(lam)
                break
            above = float(lam)
    finally:
        if pool is not None:
            pool.shutdown()
    if below is None:
        best = closest()
        return best, best.lambda_used
    if above is None:
        above = dmax
    while len(seen) < max_solves and above / below - 1.0 > 1e-9:
        mid = math.sqrt(above * below)
        comp = consider(mid)
        if abs(comp.cardinality - target_cardinality) <= slack:
            return comp, comp.lambda_used
        if comp.cardinality > target_cardinality:
            below = mid
        else:
            above = mid
    best = closest()
    return best, best.lambda_used


def write_trace_csv(path, state, timing=False):
    """Convergence trace: one row per sweep (row 0 is the starting point).

    ``wall_seconds`` is cumulative; written as 0 unless ``timing`` so that
    repeated runs produce identical files.
    """
    n = state.X.shape[0]
    elapsed = np.concatenate([[0.0], np.cumsum(state.sweep_seconds)])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sweep", "cumulative_row_updates", "objective", "wall_seconds"])
        for k, f in enumerate(state.objective_trace):
            secs = repr(float(elapsed[k])) if timing else "0"
            w.writerow([k, k * n, repr(float(f)), secs])
