"""Per-feature variances and safe feature elimination.

A feature whose variance is at most lambda cannot carry weight in any
optimal support of the cardinality-penalized problem, so it can be removed
before solving. Computing the variances is a single O(nnz) streaming pass.
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
import os

import numpy as np

from safespca.corpus import check_triple_total
from safespca.errors import FormatError, InfeasibleError

STATS_MAGIC = "SAFESPCA-STATS"
STATS_VERSION = 1


@dataclass(frozen=True, eq=False)
class FeatureStats:
    """Streaming moments of every feature over ``num_docs`` documents.

    Arrays are aligned with ``ids`` (original, 1-based word ids).
    ``sorted_order`` lists the ids by descending variance, ties by ascending id.
    """

    ids: np.ndarray
    num_docs: int
    mean: np.ndarray
    variance: np.ndarray
    sorted_order: np.ndarray = None

    def __post_init__(self):
        ids = np.asarray(self.ids, dtype=np.int64)
        var = np.asarray(self.variance, dtype=np.float64)
        if np.any(var < 0):
            raise ValueError("negative variance")
        if ids.size > 1 and np.any(np.diff(ids) <= 0):
            perm = np.argsort(ids, kind="stable")
            if np.any(np.diff(ids[perm]) == 0):
                raise ValueError("feature ids must be distinct")
            ids, var = ids[perm], var[perm]
            object.__setattr__(self, "mean", np.asarray(self.mean)[perm])
        if self.sorted_order is None:
            order = np.lexsort((ids, -var))
            object.__setattr__(self, "sorted_order", ids[order])
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "variance", var)
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=np.float64))

    @classmethod
    def from_variances(cls, variances, ids=None, num_docs=0):
        var = np.asarray(variances, dtype=np.float64)
        ids = np.arange(1, var.size + 1) if ids is None else ids
        return cls(ids, num_docs, np.zeros_like(var), var)

    @property
    def num_features(self):
        return self.ids.size

    def positions_of(self, feature_ids):
        feature_ids = np.asarray(feature_ids, dtype=np.int64)
        pos = np.searchsorted(self.ids, feature_ids)
        pos = np.minimum(pos, self.ids.size - 1)
        if self.ids.size == 0 or np.any(self.ids[pos] != feature_ids):
            missing = feature_ids[self.ids[pos] != feature_ids]
            raise KeyError(f"feature id {int(missing[0])} not in stats")
        return pos

    def variance_of(self, feature_ids):
        return self.variance[self.positions_of(feature_ids)]

    def sorted_variances(self):
        return self.variance_of(self.sorted_order)

    def drop(self, feature_ids):
        """Stats restricted to the features not listed (used for deflation)."""
        keep = ~np.isin(self.ids, np.asarray(list(feature_ids), dtype=np.int64))
        return FeatureStats(self.ids[keep], self.num_docs, self.mean[keep], self.variance[keep])


@dataclass(frozen=True)
class ScreeningResult:
    lam: float
    kept: tuple
    original_n: int

    @property
    def reduced_n(self):
        return len(self.kept)


class MomentAccumulator:
    """Partial column sums and sums of squares over a shard of documents."""

    def __init__(self, num_words, transform=None):
        self.transform = transform
        self.docs = 0
        self.triples = 0
        self.sums = np.zeros(num_words + 1)
        self.sumsq = np.zeros(num_words + 1)

    def add_chunk(self, chunk):
        vals = chunk.counts.astype(np.float64)
        if self.transform is not None:
            vals = np.asarray(self.transform(vals), dtype=np.float64)
        n = self.sums.size
        # integer counts: float64 sums are exact below 2**53
        self.sums += np.bincount(chunk.word_ids, weights=vals, minlength=n)
        self.sumsq += np.bincount(chunk.word_ids, weights=vals * vals, minlength=n)
        self.docs += chunk.num_docs
        self.triples += chunk.nnz

    def merge(self, other):
        self.docs += other.docs
        self.triples += other.triples
        self.sums += other.sums
        self.sumsq += other.sumsq
        return self

    def finalize(self, m):
        S, Q = self.sums[1:], self.sumsq[1:]
        ids = np.arange(1, S.size + 1)
        exact = (self.transform is None and Q.max(initial=0) < 2**53
                 and m * Q.max(initial=0) < 2**62 and S.max(initial=0) ** 2 < 2**62)
        if exact:
            Si, Qi = S.astype(np.int64), Q.astype(np.int64)
            var = (m * Qi - Si * Si).astype(np.float64) / float(m) ** 2
        else:
            mu = S / m
            var = np.maximum(Q / m - mu * mu, 0.0)
        return FeatureStats(ids, m, S / m, var)


def compute_variances(corpus, threads=1, cache_dir=None, transform=None,
                      write_triples_to=None):
    """Mean and (1/m)-variance of every word over all D documents.

    Absent (doc, word) pairs count as zero. With ``cache_dir`` the result is
    stored under the corpus content hash and reused on later calls.
    ``write_triples_to`` names a binary triple cache written during the same
    pass (sequential mode only).
    """
    cache_path = None
    if cache_dir is not None and transform is None:
        os.makedirs(cache_dir, exist_ok=True)
        cache_path = os.path.join(cache_dir, f"{corpus.hash}.stats")
        if os.path.exists(cache_path):
            try:
                stats = read_stats(cache_path, expected_hash=corpus.hash)
            except FormatError:
                stats = None
            if stats is not None and stats.num_features == corpus.num_words:
                return stats

    def run(bounds):
        acc = MomentAccumulator(corpus.num_words, transform)
        for chunk in corpus.iter_chunks(*bounds):
            acc.add_chunk(chunk)
        return acc

    if write_triples_to is not None and threads <= 1 and corpus.binary_path is None:
        acc = MomentAccumulator(corpus.num_words, transform)
        for chunk in corpus.iter_chunks_teeing(write_triples_to):
            acc.add_chunk(chunk)
    else:
        shards = corpus.shards(threads) if threads > 1 else [(None, None)]
        if len(shards) > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                parts = list(pool.map(run, shards))
        else:
            parts = [run(shards[0])]
        acc = parts[0]
        for part in parts[1:]:
            acc.merge(part)
        check_triple_total(corpus, acc.triples)

    stats = acc.finalize(corpus.num_docs)
    if cache_path is not None:
        write_stats(cache_path, stats, corpus.hash)
    return stats


def screen(stats, lam):
    """Keep the features whose variance is strictly above ``lam``.

    Features with variance exactly ``lam`` are removed too, which leaves
    ``lam < min variance`` on the survivors. ``kept`` is in descending
    variance order.
    """
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    order = stats.sorted_order
    var = stats.variance_of(order)
    k = int(np.count_nonzero(var > lam))
    if k == 0:
        vmax = float(var[0]) if var.size else 0.0
        raise InfeasibleError(
            f"lambda eliminates all features (lambda={lam:g}, max variance={vmax:g})"
        )
    return ScreeningResult(float(lam), tuple(int(i) for i in order[:k]), stats.num_features)


def lambda_for_size(stats, target_n):
    """Smallest lambda whose screen keeps at most ``target_n`` features.

    This is the (target_n + 1)-th largest variance, or 0 when target_n = n.
    Ties at the threshold are eliminated together.
    """
    n = stats.num_features
    if not 1 <= target_n <= n:
        raise ValueError(f"target size must lie in [1, {n}], got {target_n}")
    if target_n == n:
        return 0.0
    return float(stats.sorted_variances()[target_n])


# --------------------------------------------------------------------------
# Stats cache: a columnar text file. Floats are written with repr() so a
# round trip is exact.
#
#   SAFESPCA-STATS 1
#   n <num_features>
#   m <num_docs>
#   hash <corpus content hash, hex>
#   id mean variance
#   <id> <mean> <variance>          (one line per feature, ascending id)


def write_stats(path, stats, corpus_hash):
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        fh.write(f"{STATS_MAGIC} {STATS_VERSION}\n")
        fh.write(f"n {stats.num_features}\nm {stats.num_docs}\nhash {corpus_hash}\n")
        fh.write("id mean variance\n")
        for i, mu, var in zip(stats.ids, stats.mean, stats.variance):
            fh.write(f"{int(i)} {float(mu)!r} {float(var)!r}\n")
    os.replace(tmp, path)


def read_stats(path, expected_hash=None):
    with open(path) as fh:
        head = [fh.readline().split() for _ in range(5)]
        try:
            magic, version = head[0]
            if magic != STATS_MAGIC or int(version) != STATS_VERSION:
                raise ValueError
            n = int(head[1][1])
            m = int(head[2][1])
            corpus_hash = head[3][1]
            if head[4] != ["id", "mean", "variance"]:
                raise ValueError
        except (ValueError, IndexError):
            raise FormatError("bad stats cache header", path)
        if expected_hash is not None and corpus_hash != expected_hash:
            raise FormatError("stats cache belongs to a different corpus", path)
        ids = np.empty(n, dtype=np.int64)
        mean = np.empty(n)
        var = np.empty(n)
        for k in range(n):
            parts = fh.readline().split()
            try:
                ids[k], mean[k], var[k] = int(parts[0]), float(parts[1]), float(parts[2])
            except (ValueError, IndexError):
                raise FormatError("bad stats record", path, 6 + k)
        if fh.readline().strip():
            raise FormatError("trailing data after stats records", path)
    return FeatureStats(ids, m, mean, var)
