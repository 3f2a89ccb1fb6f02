"""Dense covariance matrices: corpus Gram accumulation, synthetic models,
the leading eigenpair, and the plain-text matrix file format."""
from dataclasses import dataclass, field
from concurrent.futures import ThreadPoolExecutor
import math

import numpy as np
import scipy.sparse as sp

from safespca.errors import FormatError, InfeasibleError

DEFAULT_MAX_ORDER = 20_000


@dataclass(frozen=True, eq=False)
class CovarianceMatrix:
    """Symmetric PSD matrix plus the map from row index to original feature id.

    ``values`` is symmetrized and made read-only on construction.
    ``sample_count`` is the number of documents behind an empirical matrix,
    0 for synthetic ones.
    """

    values: np.ndarray
    feature_ids: np.ndarray = None
    sample_count: int = 0

    def __post_init__(self):
        A = np.array(self.values, dtype=np.float64, copy=True)
        if A.ndim != 2 or A.shape[0] != A.shape[1] or A.shape[0] < 1:
            raise ValueError(f"covariance must be a non-empty square matrix, got {A.shape}")
        A = 0.5 * (A + A.T)
        if np.any(np.diag(A) < 0):
            raise ValueError("covariance has a negative diagonal entry")
        A.setflags(write=False)
        object.__setattr__(self, "values", A)
        ids = self.feature_ids
        ids = np.arange(A.shape[0]) if ids is None else np.asarray(ids, dtype=np.int64).copy()
        if ids.shape != (A.shape[0],):
            raise ValueError("feature_ids length does not match matrix order")
        if np.unique(ids).size != ids.size:
            raise ValueError("feature_ids must be distinct")
        ids.setflags(write=False)
        object.__setattr__(self, "feature_ids", ids)

    @property
    def order(self):
        return self.values.shape[0]

    @property
    def diag(self):
        return np.diag(self.values)

    def restrict(self, positions):
        """Principal submatrix on the given row positions (order preserved)."""
        idx = np.asarray(positions, dtype=np.int64)
        return CovarianceMatrix(
            self.values[np.ix_(idx, idx)], self.feature_ids[idx], self.sample_count
        )

    def positions_of(self, feature_ids):
        lookup = {int(f): i for i, f in enumerate(self.feature_ids)}
        try:
            return np.array([lookup[int(f)] for f in feature_ids], dtype=np.int64)
        except KeyError as exc:
            raise KeyError(f"feature id {exc.args[0]} not in this matrix") from None

    def scaled(self, alpha):
        return CovarianceMatrix(alpha * self.values, self.feature_ids, self.sample_count)


# --------------------------------------------------------------------------
# Gram accumulation over a streamed corpus


class GramAccumulator:
    """Partial (count, column sums, Gram) over a shard of documents.

    With raw counts every entry is an integer, so sums are kept in int64 and
    merging shards in any order is exact.
    """

    def __init__(self, kept, num_words, transform=None):
        self.kept = np.asarray(kept, dtype=np.int64)
        self.transform = transform
        k = self.kept.size
        dtype = np.float64 if transform is not None else np.int64
        self.docs = 0
        self.sums = np.zeros(k, dtype=dtype)
        self.gram = np.zeros((k, k), dtype=dtype)
        self._lut = np.full(num_words + 1, -1, dtype=np.int64)
        self._lut[self.kept] = np.arange(k)

    def add_chunk(self, chunk):
        pos = self._lut[chunk.word_ids]
        mask = pos >= 0
        self.docs += chunk.num_docs
        if not mask.any():
            return
        rows = chunk.doc_index[mask]
        vals = chunk.counts[mask]
        if self.transform is not None:
            vals = np.asarray(self.transform(vals.astype(np.float64)), dtype=np.float64)
        C = sp.csr_matrix((vals, (rows, pos[mask])), shape=(chunk.num_docs, self.kept.size))
        self.sums += np.asarray(C.sum(axis=0)).ravel().astype(self.sums.dtype)
        # one outer product per document, batched as C'C
        self.gram += (C.T @ C).toarray().astype(self.gram.dtype)

    def merge(self, other):
        if not np.array_equal(self.kept, other.kept):
            raise ValueError("cannot merge accumulators over different feature sets")
        self.docs += other.docs
        self.sums += other.sums
        self.gram += other.gram
        return self

    def finalize(self, m):
        """Centered (1/m) covariance over ``m`` documents."""
        if self.gram.dtype == np.int64 and m * max(int(self.gram.max(initial=0)), 1) < 2**62:
            S = self.sums
            num = m * self.gram - np.outer(S, S)
            return num.astype(np.float64) / float(m) ** 2
        mu = self.sums.astype(np.float64) / m
        return self.gram.astype(np.float64) / m - np.outer(mu, mu)


def gram_accumulate(corpus, kept, stats, threads=1, transform=None,
                    max_order=DEFAULT_MAX_ORDER):
    """Reduced covariance of the kept features, in one streaming pass.

    ``kept`` holds original (1-based) word ids; the result's rows follow that
    order. ``stats`` must come from the same corpus: its means are checked
    against the sums seen in this pass.
    """
    kept = np.asarray(list(kept), dtype=np.int64)
    if kept.size == 0:
        raise InfeasibleError("empty reduced problem")
    if kept.size > max_order:
        raise InfeasibleError(
            f"reduced problem of order {kept.size} exceeds the dense cap {max_order}"
        )
    if np.unique(kept).size != kept.size:
        raise ValueError("kept feature ids must be distinct")
    bad = kept[(kept < 1) | (kept > corpus.num_words)]
    if bad.size:
        raise KeyError(f"feature id {int(bad[0])} not in corpus (W={corpus.num_words})")

    shards = corpus.shards(threads) if threads > 1 else [(None, None)]

    def run(bounds):
        acc = GramAccumulator(kept, corpus.num_words, transform)
        for chunk in corpus.iter_chunks(*bounds):
            acc.add_chunk(chunk)
        return acc

    if len(shards) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, shards))
    else:
        parts = [run(shards[0])]
    acc = parts[0]
    for part in parts[1:]:
        acc.merge(part)

    m = corpus.num_docs
    if transform is None and stats is not None:
        pos = stats.positions_of(kept)
        mu = acc.sums / m
        if not np.allclose(mu, stats.mean[pos], rtol=1e-12, atol=0.0):
            raise ValueError("stats were computed over a different corpus")
    return CovarianceMatrix(acc.finalize(m), kept, m)


# --------------------------------------------------------------------------
# Synthetic models


@dataclass
class SpikedModelSpec:
    """Parameters of the spiked model  S = u u' + V V'/m.

    ``m=None`` drops the noise term (the infinite-sample limit).
    """

    n: int
    m: int = None
    support_fraction: float = 0.1
    noise_seed: int = 0

    @property
    def cardinality(self):
        return int(math.floor(self.support_fraction * self.n + 0.5))

    @property
    def true_support(self):
        return self._draw()[0]

    def _draw(self):
        k = self.cardinality
        if self.n < 2:
            raise ValueError("spiked model needs n >= 2")
        if self.m is not None and self.m < 1:
            raise ValueError("spiked model needs m >= 1")
        if not 0 < self.support_fraction <= 1 or k < 1:
            raise ValueError(
                f"support_fraction * n = {self.support_fraction * self.n} gives an empty support"
            )
        rng = np.random.default_rng(self.noise_seed)
        support = np.sort(rng.choice(self.n, size=k, replace=False))
        return support, rng


def spiked_model(spec):
    """Covariance with a planted sparse leading eigenvector.

    ``u`` has equal positive entries 1/sqrt(k) on ``spec.true_support``.
    """
    support, rng = spec._draw()
    u = np.zeros(spec.n)
    u[support] = 1.0 / math.sqrt(support.size)
    values = np.outer(u, u)
    if spec.m is not None:
        V = rng.standard_normal((spec.n, spec.m))
        values = values + V @ V.T / spec.m
    return CovarianceMatrix(values, sample_count=spec.m or 0)


def gaussian_model(n, m, seed=0):
    """S = F'F with F an m x n standard Gaussian matrix (rank <= m)."""
    if n < 1 or m < 1:
        raise ValueError("gaussian model needs n >= 1 and m >= 1")
    F = np.random.default_rng(seed).standard_normal((m, n))
    return CovarianceMatrix(F.T @ F, sample_count=m)


# --------------------------------------------------------------------------
# Leading eigenpair


def leading_eigenvector(sigma, tol=1e-10, max_iter=200_000, seed=0):
    """Largest eigenvalue and unit eigenvector of a symmetric PSD matrix.

    Plain power iteration from a fixed pseudo-random start. Stops when
    ``||S v - theta v|| <= tol * theta``. The sign is fixed so that the
    largest-magnitude entry is positive. ``S = 0`` returns ``(0, e_1)``.
    """
    S = np.asarray(getattr(sigma, "values", sigma), dtype=np.float64)
    n = S.shape[0]
    e1 = np.zeros(n)
    e1[0] = 1.0
    if not np.any(S):
        return 0.0, e1
    v = np.random.default_rng(seed).standard_normal(n)
    v /= np.linalg.norm(v)
    theta = 0.0
    for _ in range(max_iter):
        w = S @ v
        theta = float(v @ w)
        if theta <= 0.0:
            # start orthogonal to the range; restart deterministically
            v = np.abs(v) + 1.0 / math.sqrt(n)
            v /= np.linalg.norm(v)
            continue
        if np.linalg.norm(w - theta * v) <= tol * theta:
            break
        v = w / np.linalg.norm(w)
    else:
        raise ArithmeticError(f"power iteration did not reach tol={tol} in {max_iter} steps")
    i = int(np.argmax(np.abs(v)))
    if v[i] < 0:
        v = -v
    return theta, v


# --------------------------------------------------------------------------
# Matrix text format: first line is n, then n rows of n numbers.


def read_matrix(path, sym_tol=1e-8):
    with open(path) as fh:
        lines = [ln for ln in fh]
    rows = [(i + 1, ln.split()) for i, ln in enumerate(lines) if ln.strip()]
    if not rows:
        raise FormatError("empty matrix file", path, 1)
    lineno, head = rows[0]
    try:
        (n,) = map(int, head)
    except ValueError:
        raise FormatError(f"expected the matrix order, got {' '.join(head)!r}", path, lineno)
    if n < 1:
        raise FormatError("matrix order must be positive", path, lineno)
    if len(rows) - 1 != n:
        raise FormatError(f"expected {n} rows, found {len(rows) - 1}", path)
    A = np.empty((n, n))
    for r, (lineno, fields) in enumerate(rows[1:]):
        if len(fields) != n:
            raise FormatError(f"expected {n} entries, found {len(fields)}", path, lineno)
        try:
            A[r] = [float(x) for x in fields]
        except ValueError as exc:
            raise FormatError(str(exc), path, lineno)
    if not np.all(np.isfinite(A)):
        raise FormatError("matrix has non-finite entries", path)
    asym = np.max(np.abs(A - A.T))
    if asym > sym_tol * max(1.0, np.max(np.abs(A))):
        raise FormatError(f"matrix is not symmetric (max asymmetry {asym:.3g})", path)
    if np.any(np.diag(A) < 0):
        raise FormatError("matrix has a negative diagonal entry", path)
    return CovarianceMatrix(A, feature_ids=np.arange(1, n + 1))


def write_matrix(path, sigma):
    A = np.asarray(getattr(sigma, "values", sigma))
    with open(path, "w") as fh:
        fh.write(f"{A.shape[0]}\n")
        for row in A:
            fh.write(" ".join(repr(float(x)) for x in row) + "\n")
