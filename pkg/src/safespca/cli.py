"""Command-line entry point.

    safespca stats DOCWORD                 sorted variances (CSV) plus stats cache
    safespca components DOCWORD --vocab V  sparse components with disjoint supports
    safespca solve MATRIX --lambda L       one component of a dense matrix + trace
    safespca synth --model spiked ...      synthetic covariance matrix files

Exit codes: 0 success, 2 bad input file, 3 numerical failure, 4 infeasible
configuration.
"""
import argparse
import csv
import json
import logging
import os
import sys
import warnings

from safespca.corpus import load_vocab, parse_docword, write_planted_topic_corpus
from safespca.covariance import SpikedModelSpec, gaussian_model, read_matrix, spiked_model, write_matrix
from safespca.errors import FormatError, InfeasibleError, NumericalError
from safespca.pipeline import extract_components
from safespca.screening import compute_variances
from safespca.solver import SolverConfig, search_lambda, solve_screened, write_trace_csv

log = logging.getLogger("safespca")

CACHE_ENV = "SAFESPCA_CACHE_DIR"
EXIT_FORMAT, EXIT_NUMERICAL, EXIT_INFEASIBLE = 2, 3, 4


def _solver_flags(p):
    g = p.add_argument_group("solver")
    g.add_argument("--epsilon", type=float, default=1e-4,
                   help="suboptimality target on the unit-diagonal scale (default 1e-4)")
    g.add_argument("--max-sweeps", type=int, default=20)
    g.add_argument("--sweep-tol", type=float, default=1e-6)
    g.add_argument("--threads", type=int, default=1, help="worker cap; results do not depend on it")
    g.add_argument("--timing", action="store_true",
                   help="record wall-clock times (outputs are then no longer byte-identical)")


def _config(args, lam=0.0):
    return SolverConfig(lam=lam, epsilon=args.epsilon, max_sweeps=args.max_sweeps,
                        sweep_tol=args.sweep_tol)


def _cache_dir(args):
    return args.cache_dir or os.environ.get(CACHE_ENV) or None


def _open_corpus(args):
    corpus = parse_docword(args.docword)
    cache = _cache_dir(args)
    triples = None
    if cache is not None:
        os.makedirs(cache, exist_ok=True)
        triples = os.path.join(cache, f"{corpus.hash}.triples")
        if corpus.attach_triple_cache(triples):
            log.info("using triple cache %s", triples)
            triples = None
    return corpus, cache, triples


def _write(path, text):
    with open(path, "w") as fh:
        fh.write(text)


def cmd_stats(args):
    corpus, cache, triples = _open_corpus(args)
    stats = compute_variances(corpus, threads=args.threads, cache_dir=cache,
                              write_triples_to=triples)
    out = args.out or "variances.csv"
    order = stats.sorted_order
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rank", "feature_id", "variance"])
        for rank, (i, v) in enumerate(zip(order, stats.variance_of(order)), start=1):
            w.writerow([rank, int(i), repr(float(v))])
    log.info("wrote %s (%d features, %d documents)", out, stats.num_features, stats.num_docs)
    return 0


def cmd_components(args):
    corpus, cache, triples = _open_corpus(args)
    vocab = load_vocab(args.vocab, corpus.num_words) if args.vocab else None
    stats = compute_variances(corpus, threads=args.threads, cache_dir=cache,
                              write_triples_to=triples)
    if triples is not None and os.path.exists(triples):
        corpus.attach_triple_cache(triples)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", RuntimeWarning)
        report = extract_components(corpus, stats, args.k, args.cardinality, _config(args),
                                    vocab=vocab, pool_size=args.pool, slack=args.slack,
                                    threads=args.threads, timing=args.timing)
    for w in caught:
        log.warning("%s", w.message)
    prefix = args.out or "components"
    _write(prefix + ".json", report.to_json())
    table = report.to_text()
    _write(prefix + ".txt", table)
    sys.stdout.write(table)
    return 0


def cmd_solve(args):
    sigma = read_matrix(args.matrix)
    if args.lam is None and args.cardinality is None:
        raise InfeasibleError("give --lambda or --cardinality")
    if args.lam is not None:
        comp, state = solve_screened(sigma, _config(args, args.lam))
    else:
        comp, lam = search_lambda(sigma, args.cardinality, _config(args), slack=args.slack,
                                  threads=args.threads)
        comp, state = solve_screened(sigma, _config(args, lam))
    prefix = args.out or "solution"
    record = comp.to_dict()
    record["objective"] = state.objective_trace[-1]
    _write(prefix + ".json", json.dumps(record, indent=2, sort_keys=True) + "\n")
    write_trace_csv(prefix + ".trace.csv", state, timing=args.timing)
    sys.stdout.write(f"support {list(comp.support)}  phi {comp.phi_estimate:.6g}  "
                     f"sweeps {comp.sweeps}\n")
    return 0


def cmd_synth(args):
    out = args.out or f"{args.model}.txt"
    if args.model == "spiked":
        spec = SpikedModelSpec(n=args.n, m=args.m, support_fraction=args.support_fraction,
                               noise_seed=args.seed)
        sigma = spiked_model(spec)
        meta = {"model": "spiked", "n": args.n, "m": args.m, "seed": args.seed,
                "support_fraction": args.support_fraction,
                "true_support": [int(i) + 1 for i in spec.true_support]}
    elif args.model == "gaussian":
        if args.m is None:
            raise InfeasibleError("the gaussian model needs --m")
        sigma = gaussian_model(args.n, args.m, seed=args.seed)
        meta = {"model": "gaussian", "n": args.n, "m": args.m, "seed": args.seed}
    else:  # topics
        groups = write_planted_topic_corpus(out, out + ".vocab", n_words=args.n,
                                            n_docs=args.m or 10_000, seed=args.seed)
        meta = {"model": "topics", "n": args.n, "m": args.m or 10_000, "seed": args.seed,
                "planted_groups": groups}
        _write(out + ".meta.json", json.dumps(meta, indent=2, sort_keys=True) + "\n")
        return 0
    write_matrix(out, sigma)
    _write(out + ".meta.json", json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="safespca", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("stats", help="per-word variances of a docword corpus")
    s.add_argument("docword")
    s.add_argument("--cache-dir", help=f"stats/triple cache directory (default ${CACHE_ENV})")
    s.add_argument("--threads", type=int, default=1)
    s.add_argument("--out", help="CSV path (default variances.csv)")
    s.set_defaults(func=cmd_stats)

    c = sub.add_parser("components", help="top sparse components of a docword corpus")
    c.add_argument("docword")
    c.add_argument("--vocab")
    c.add_argument("--k", type=int, default=5)
    c.add_argument("--cardinality", type=int, default=5)
    c.add_argument("--slack", type=int, default=0,
                   help="accepted distance of the cardinality from the target (default 0)")
    c.add_argument("--pool", type=int, default=500,
                   help="top-variance features whose covariance is accumulated (default 500)")
    c.add_argument("--cache-dir")
    c.add_argument("--out", help="output prefix for .json and .txt (default components)")
    _solver_flags(c)
    c.set_defaults(func=cmd_components)

    v = sub.add_parser("solve", help="one sparse component of a dense matrix file")
    v.add_argument("matrix")
    v.add_argument("--lambda", dest="lam", type=float)
    v.add_argument("--cardinality", type=int)
    v.add_argument("--slack", type=int, default=2)
    v.add_argument("--out", help="output prefix for .json and .trace.csv (default solution)")
    _solver_flags(v)
    v.set_defaults(func=cmd_solve)

    y = sub.add_parser("synth", help="write a synthetic covariance matrix or corpus")
    y.add_argument("--model", choices=["spiked", "gaussian", "topics"], default="spiked")
    y.add_argument("--n", type=int, required=True)
    y.add_argument("--m", type=int)
    y.add_argument("--support-fraction", type=float, default=0.1)
    y.add_argument("--seed", type=int, default=0)
    y.add_argument("--out")
    y.set_defaults(func=cmd_synth)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except FormatError as exc:
        log.error("%s", exc)
        return EXIT_FORMAT
    except NumericalError as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERICAL
    except (InfeasibleError, ValueError) as exc:
        log.error("%s", exc)
        return EXIT_INFEASIBLE


if __name__ == "__main__":
    sys.exit(main())
