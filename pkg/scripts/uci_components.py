"""Sparse components of a full UCI bag-of-words corpus (NYTimes or PubMed).

Download docword.<name>.txt(.gz) and vocab.<name>.txt from the UCI Machine
Learning Repository "Bag of Words" data set and decompress the docword file,
then run

    python3 scripts/uci_components.py DATA_DIR nytimes --k 5 --cardinality 5

Variances and the binary triple cache are kept in DATA_DIR/cache, so a second
run skips the text parse. Word lists depend on preprocessing (raw counts,
mean-centred covariance here) and may differ from lists produced with other
transforms.
"""
import argparse
import os
import sys
import time

from safespca.cli import main as cli_main


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    p.add_argument("data_dir")
    p.add_argument("name", choices=["nytimes", "pubmed"])
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--cardinality", type=int, default=5)
    p.add_argument("--pool", type=int, default=1000)
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    args = p.parse_args(argv)

    docword = os.path.join(args.data_dir, f"docword.{args.name}.txt")
    vocab = os.path.join(args.data_dir, f"vocab.{args.name}.txt")
    for path in (docword, vocab):
        if not os.path.exists(path):
            sys.exit(f"missing {path}; see the module docstring for the download")
    t0 = time.perf_counter()
    code = cli_main([
        "-v", "components", docword, "--vocab", vocab,
        "--k", str(args.k), "--cardinality", str(args.cardinality),
        "--pool", str(args.pool), "--threads", str(args.threads), "--timing",
        "--cache-dir", os.path.join(args.data_dir, "cache"),
        "--out", os.path.join(args.data_dir, f"components.{args.name}"),
    ])
    print(f"total {time.perf_counter() - t0:.1f}s", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
