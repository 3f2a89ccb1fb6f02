import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from safespca.cli import main
from safespca.corpus import parse_docword, write_planted_topic_corpus
from safespca.covariance import leading_eigenvector, read_matrix
from safespca.pipeline import ComponentRecord, PipelineReport, RoundSummary, extract_components
from safespca.screening import compute_variances


def test_stats_csv_and_warm_cache(fixture_corpus, tmp_path):
    docword, _ = fixture_corpus
    out = tmp_path / "var.csv"
    cache = tmp_path / "cache"
    assert main(["stats", str(docword), "--cache-dir", str(cache), "--out", str(out)]) == 0
    rows = list(csv.reader(open(out)))
    assert rows[0] == ["rank", "feature_id", "variance"]
    assert len(rows) == 5
    var = [float(r[2]) for r in rows[1:]]
    assert var == sorted(var, reverse=True)
    assert [int(r[1]) for r in rows[1:]] == [2, 1, 3, 4]
    first = out.read_bytes()
    stats_file = next(cache.glob("*.stats"))
    stamp = stats_file.stat().st_mtime_ns
    assert main(["stats", str(docword), "--cache-dir", str(cache), "--out", str(out)]) == 0
    assert stats_file.stat().st_mtime_ns == stamp
    assert out.read_bytes() == first


def test_cache_dir_from_environment(fixture_corpus, tmp_path, monkeypatch):
    monkeypatch.setenv("SAFESPCA_CACHE_DIR", str(tmp_path / "envcache"))
    assert main(["stats", str(fixture_corpus[0]), "--out", str(tmp_path / "v.csv")]) == 0
    assert list((tmp_path / "envcache").glob("*.stats"))


def test_stats_format_error_exit_code(tmp_path):
    bad = tmp_path / "bad.txt"
    bad.write_text("3\n4\n5\n1 9 1\n")
    assert main(["stats", str(bad), "--out", str(tmp_path / "v.csv")]) == 2


def write_matrix_text(path, rows):
    path.write_text(f"{len(rows)}\n" + "".join(" ".join(map(str, r)) + "\n" for r in rows))
    return path


def test_solve_diagonal(tmp_path):
    m = write_matrix_text(tmp_path / "m.txt", [[3, 0], [0, 1]])
    prefix = tmp_path / "sol"
    assert main(["solve", str(m), "--lambda", "0.5", "--out", str(prefix)]) == 0
    record = json.loads((tmp_path / "sol.json").read_text())
    assert record["support"] == [1]
    assert record["phi_estimate"] == pytest.approx(2.5, abs=1e-3)
    trace = list(csv.reader(open(tmp_path / "sol.trace.csv")))
    assert trace[0] == ["sweep", "cumulative_row_updates", "objective", "wall_seconds"]
    obj = [float(r[2]) for r in trace[1:]]
    assert all(b >= a - 1e-9 * (1 + abs(b)) for a, b in zip(obj, obj[1:]))


def test_solve_lambda_zero_matches_power_iteration(tmp_path, rng):
    F = rng.standard_normal((8, 6))
    S = F.T @ F / 8
    m = write_matrix_text(tmp_path / "m.txt", [[repr(float(x)) for x in row] for row in S])
    assert main(["solve", str(m), "--lambda", "0", "--epsilon", "1e-6",
                 "--out", str(tmp_path / "sol")]) == 0
    record = json.loads((tmp_path / "sol.json").read_text())
    assert sorted(record["support"]) == [1, 2, 3, 4, 5, 6]
    assert record["phi_estimate"] == pytest.approx(leading_eigenvector(S)[0], rel=1e-3)


def test_solve_by_cardinality(tmp_path):
    m = write_matrix_text(tmp_path / "m.txt", [[5, 0, 0], [0, 4, 0], [0, 0, 1]])
    assert main(["solve", str(m), "--cardinality", "1", "--slack", "0",
                 "--out", str(tmp_path / "sol")]) == 0
    assert json.loads((tmp_path / "sol.json").read_text())["support"] == [1]


@pytest.mark.parametrize("rows,lam,code", [
    ([[1, 0.5], [0, 1]], "0.1", 2),
    ([[3, 0], [0, 1]], "3", 4),
])
def test_solve_exit_codes(tmp_path, rows, lam, code):
    m = write_matrix_text(tmp_path / "m.txt", rows)
    assert main(["solve", str(m), "--lambda", lam, "--out", str(tmp_path / "s")]) == code


def test_solve_requires_lambda_or_cardinality(tmp_path):
    m = write_matrix_text(tmp_path / "m.txt", [[1]])
    assert main(["solve", str(m), "--out", str(tmp_path / "s")]) == 4


def test_synth_spiked_and_gaussian(tmp_path):
    out = tmp_path / "sp.txt"
    assert main(["synth", "--model", "spiked", "--n", "10", "--seed", "3", "--out", str(out)]) == 0
    meta = json.loads((tmp_path / "sp.txt.meta.json").read_text())
    assert len(meta["true_support"]) == 1
    first = out.read_bytes()
    assert main(["synth", "--model", "spiked", "--n", "10", "--seed", "3", "--out", str(out)]) == 0
    assert out.read_bytes() == first

    g = tmp_path / "g.txt"
    assert main(["synth", "--model", "gaussian", "--n", "5", "--m", "3", "--out", str(g)]) == 0
    w = np.linalg.eigvalsh(read_matrix(g).values)
    assert w.min() >= -1e-9 * w.max()
    assert np.sum(w > 1e-9 * w.max()) <= 3
    assert main(["synth", "--model", "gaussian", "--n", "0", "--m", "3", "--out", str(g)]) == 4


@pytest.fixture(scope="module")
def small_topics(tmp_path_factory):
    d = tmp_path_factory.mktemp("topics")
    groups = write_planted_topic_corpus(d / "docword.txt", d / "vocab.txt", n_words=300,
                                        n_docs=3000, n_topics=3, topic_size=4, seed=11)
    return d, groups


def test_components_command(small_topics, tmp_path):
    d, groups = small_topics
    prefix = tmp_path / "comp"
    args = ["components", str(d / "docword.txt"), "--vocab", str(d / "vocab.txt"),
            "--k", "3", "--cardinality", "4", "--out", str(prefix)]
    assert main(args) == 0
    report = PipelineReport.from_json((tmp_path / "comp.json").read_text())
    assert sorted(tuple(sorted(c.support)) for c in report.components) == sorted(map(tuple, groups))
    assert all(tok.startswith("topic") for c in report.components for tok in c.tokens)
    table = (tmp_path / "comp.txt").read_text()
    assert table.splitlines()[0].split()[:3] == ["#", "lambda", "card"]
    first = (tmp_path / "comp.json").read_bytes()
    assert main(args + ["--threads", "3"]) == 0
    assert (tmp_path / "comp.json").read_bytes() == first


def test_components_dictionary_exhausted(small_topics, tmp_path):
    d, _ = small_topics
    corpus = parse_docword(d / "docword.txt")
    stats = compute_variances(corpus)
    with pytest.warns(RuntimeWarning, match="dictionary exhausted"):
        report = extract_components(corpus, stats, k=5, cardinality=4, pool_size=5)
    assert [c.cardinality for c in report.components] == [4, 1]
    assert report.warnings
    supports = [set(c.support) for c in report.components]
    assert all(not (a & b) for i, a in enumerate(supports) for b in supports[i + 1:])


def test_report_json_round_trip():
    rec = ComponentRecord(1, (3, 7), ("a", "b"), (0.6, 0.8), 1.25, 2, 0.1, 1.1, 5, 40, False)
    report = PipelineReport(100, 50, 2, 2, 40, [rec], [RoundSummary(50, 40)], ["note"])
    assert PipelineReport.from_json(report.to_json()) == report
    assert report.to_json() == PipelineReport.from_json(report.to_json()).to_json()


def test_console_script_runs(tmp_path):
    out = tmp_path / "sp.txt"
    res = subprocess.run([sys.executable, "-m", "safespca.cli", "synth", "--n", "10",
                          "--out", str(out)], capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
    assert out.exists()


def test_components_single_round_is_strongest_group(small_topics, tmp_path):
    d, groups = small_topics
    prefix = tmp_path / "one"
    assert main(["components", str(d / "docword.txt"), "--k", "1", "--cardinality", "4",
                 "--out", str(prefix)]) == 0
    report = PipelineReport.from_json((tmp_path / "one.json").read_text())
    assert [sorted(c.support) for c in report.components] == [groups[0]]


@pytest.mark.xfail(strict=True, reason="ascent needs 12-20 sweeps here, not 5; see the notes")
def test_spiked_trace_plateaus_within_five_sweeps(tmp_path):
    matrix = tmp_path / "sp.txt"
    assert main(["synth", "--model", "spiked", "--n", "200", "--m", "1000", "--seed", "0",
                 "--out", str(matrix)]) == 0
    assert main(["solve", str(matrix), "--cardinality", "20", "--slack", "4",
                 "--out", str(tmp_path / "sol")]) == 0
    obj = [float(r[2]) for r in list(csv.reader(open(tmp_path / "sol.trace.csv")))[1:]]
    # plateau: sweep 5 already within 1% of the final value
    assert abs(obj[-1] - obj[5]) <= 1e-2 * abs(obj[-1])
