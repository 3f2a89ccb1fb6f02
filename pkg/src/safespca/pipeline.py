"""Several sparse components from a corpus: screen, solve, deflate, repeat.

Each round searches lambda for the target cardinality on the features still
active, accepts the component and deletes its support from the dictionary.
The Gram matrix is accumulated once, over a pool of top-variance features,
and every lambda the search may try is kept above the variance of the best
feature outside the pool, so screening never needs a feature that was not
accumulated.
"""
from dataclasses import asdict, dataclass, field
import json
import time
import warnings

import numpy as np

from safespca.covariance import gram_accumulate
from safespca.errors import InfeasibleError
from safespca.solver import SolverConfig, search_lambda

REPORT_VERSION = 1


@dataclass(frozen=True)
class ComponentRecord:
    rank: int
    support: tuple
    tokens: tuple
    weights: tuple
    explained_variance: float
    cardinality: int
    lambda_used: float
    phi_estimate: float
    sweeps: int
    reduced_n: int
    degenerate: bool
    wall_seconds: float = 0.0

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["support"] = tuple(int(i) for i in d["support"])
        d["tokens"] = tuple(str(t) for t in d["tokens"])
        d["weights"] = tuple(float(w) for w in d["weights"])
        return cls(**d)


@dataclass(frozen=True)
class RoundSummary:
    """Screening size of one round: active dictionary and features kept."""

    original_n: int
    reduced_n: int


@dataclass
class PipelineReport:
    num_docs: int
    num_words: int
    k: int
    cardinality: int
    pool_size: int
    components: list = field(default_factory=list)
    rounds: list = field(default_factory=list)
    warnings: list = field(default_factory=list)

    def to_dict(self):
        d = asdict(self)
        d["version"] = REPORT_VERSION
        for c in d["components"]:
            c["support"] = list(c["support"])
            c["tokens"] = list(c["tokens"])
            c["weights"] = list(c["weights"])
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if d.pop("version", REPORT_VERSION) != REPORT_VERSION:
            raise ValueError("unsupported report version")
        d["components"] = [ComponentRecord.from_dict(c) for c in d["components"]]
        d["rounds"] = [RoundSummary(**r) for r in d["rounds"]]
        d["warnings"] = list(d["warnings"])
        return cls(**d)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))

    def to_text(self):
        """Aligned table, one row per component."""
        head = ["#", "lambda", "card", "expl.var", "sweeps", "n_hat", "words"]
        rows = [head]
        for c in self.components:
            rows.append([
                str(c.rank),
                f"{c.lambda_used:.6g}",
                str(c.cardinality),
                f"{c.explained_variance:.6g}",
                str(c.sweeps),
                str(c.reduced_n),
                " ".join(c.tokens),
            ])
        widths = [max(len(r[i]) for r in rows) for i in range(len(head) - 1)]
        lines = []
        for r in rows:
            cells = [r[i].rjust(widths[i]) for i in range(len(widths))]
            lines.append("  ".join(cells + [r[-1]]).rstrip())
        for w in self.warnings:
            lines.append(f"warning: {w}")
        return "\n".join(lines) + "\n"


def gram_pool(corpus, stats, pool_size, threads=1):
    """Covariance over the ``pool_size`` top-variance features.

    Returns ``(sigma, floor)``: ``floor`` is the largest variance left out of
    the pool (0 if none), so any screen at lambda >= floor keeps only pooled
    features.
    """
    order = stats.sorted_order
    pool_size = min(int(pool_size), order.size)
    if pool_size < 1:
        raise InfeasibleError("empty feature pool")
    var = stats.variance_of(order)
    floor = float(var[pool_size]) if pool_size < order.size else 0.0
    # features tied with the floor are screened out together with it
    kept = order[:pool_size][var[:pool_size] > floor]
    if kept.size == 0:
        raise InfeasibleError("every pooled feature ties with the first excluded one")
    sigma = gram_accumulate(corpus, kept, stats, threads=threads)
    return sigma, floor


def extract_components(corpus, stats, k, cardinality, config=None, vocab=None,
                       pool_size=500, slack=0, threads=1, timing=False):
    """Up to ``k`` components with disjoint supports; see module docstring."""
    if k < 1 or cardinality < 1:
        raise ValueError("k and cardinality must be at least 1")
    config = config or SolverConfig()
    sigma, floor = gram_pool(corpus, stats, pool_size, threads=threads)
    report = PipelineReport(corpus.num_docs, corpus.num_words, k, cardinality, sigma.order)
    active = np.ones(sigma.order, dtype=bool)
    removed = 0
    for rank in range(1, k + 1):
        positions = np.flatnonzero(active)
        if positions.size == 0 or sigma.diag[positions].max() <= floor:
            msg = f"dictionary exhausted after {rank - 1} of {k} components"
            warnings.warn(msg, RuntimeWarning, stacklevel=2)
            report.warnings.append(msg)
            break
        sub = sigma.restrict(positions)
        t0 = time.perf_counter()
        comp, lam = search_lambda(sub, cardinality, config, slack=slack, lam_floor=floor,
                                  threads=threads)
        elapsed = time.perf_counter() - t0 if timing else 0.0
        tokens = tuple(vocab.token(i) if vocab is not None else str(i) for i in comp.support)
        report.components.append(ComponentRecord(
            rank=rank,
            support=comp.support,
            tokens=tokens,
            weights=comp.weights,
            explained_variance=comp.explained_variance,
            cardinality=comp.cardinality,
            lambda_used=lam,
            phi_estimate=comp.phi_estimate,
            sweeps=comp.sweeps,
            reduced_n=comp.reduced_n,
            degenerate=comp.degenerate,
            wall_seconds=elapsed,
        ))
        report.rounds.append(RoundSummary(corpus.num_words - removed, comp.reduced_n))
        # deflate by support removal
        active[sigma.positions_of(comp.support)] = False
        removed += comp.cardinality
    return report
