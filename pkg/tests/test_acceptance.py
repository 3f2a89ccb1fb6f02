"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line (see the ``acceptance`` fixture in
conftest.py) before asserting, so the summary lists every criterion even
when some fail. Every solve made by this module goes through a wrapper that
checks monotone ascent and positive definiteness after each sweep; the last
test reports on all of them.
"""
import json
import time
import warnings

import numpy as np
import pytest

import safespca.solver as solver_mod
from safespca.cli import main
from safespca.corpus import write_planted_topic_corpus
from safespca.covariance import CovarianceMatrix, SpikedModelSpec, leading_eigenvector, spiked_model
from safespca.oracle import brute_force_card, xi_scan_psi
from safespca.pipeline import PipelineReport
from safespca.screening import FeatureStats, screen
from safespca.solver import SolverConfig, extract_component, search_lambda, solve_screened

pytestmark = pytest.mark.acceptance

EPS = 1e-4
ASCENT_SLACK = 1e-9
# criteria that compare against an exact optimum stop on sweep_tol alone;
# close top eigenvalues slow the ascent far past the default sweep cap
LONG_RUN = 500

SOLVE_LOG = []
_tag = ["other"]
_real_solve = solver_mod.solve


def _checked_solve(sigma, config, on_sweep=None):
    pd_ok = [True]

    def hook(sweep, f, X):
        try:
            np.linalg.cholesky(X)
        except np.linalg.LinAlgError:
            pd_ok[0] = False
        if on_sweep is not None:
            on_sweep(sweep, f, X)

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        state, Z, phi = _real_solve(sigma, config, on_sweep=hook)
    tr = np.asarray(state.objective_trace)
    monotone = bool(np.all(np.diff(tr) >= -ASCENT_SLACK * (1.0 + np.abs(tr[1:]))))
    converged = state.sweeps_done < config.max_sweeps or (
        abs(tr[-1] - tr[-2]) <= config.sweep_tol * abs(tr[-1]))
    SOLVE_LOG.append(dict(tag=_tag[0], monotone=monotone, pd=pd_ok[0],
                          sweeps=state.sweeps_done, converged=bool(converged)))
    return state, Z, phi


@pytest.fixture(scope="module", autouse=True)
def _instrument_solver():
    mp = pytest.MonkeyPatch()
    mp.setattr(solver_mod, "solve", _checked_solve)
    yield
    mp.undo()


def _tagged(tag):
    _tag[0] = tag


def _wishart(rng, n, m):
    F = rng.standard_normal((m, n))
    return F.T @ F / m


def test_relaxation_dominates_cardinality_problem(acceptance):
    _tagged("relaxation")
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    bound_ok = support_ok = 0
    worst = np.inf
    total = 200
    for _ in range(total):
        n = int(rng.integers(2, 9))
        m = int(rng.integers(1, 2 * n + 1))
        S = _wishart(rng, n, m)
        lam = float(rng.uniform(0.0, np.diag(S).min()))
        state, Z, phi = solver_mod.solve(S, SolverConfig(lam=lam, epsilon=EPS, max_sweeps=LONG_RUN))
        exact = brute_force_card(S, lam)
        slack = 10 * EPS * np.diag(S).max()
        worst = min(worst, (phi - exact.psi) / np.diag(S).max())
        bound_ok += phi >= exact.psi - slack
        comp = extract_component(Z, S, lambda_used=lam)
        support_ok += tuple(sorted(comp.support)) == tuple(exact.support)
    elapsed = time.perf_counter() - t0
    ok = bound_ok == total and support_ok >= 0.95 * total and elapsed < 60
    acceptance(1, "relaxation value vs exact cardinality optimum", "PASS" if ok else "FAIL",
               f"bound {bound_ok}/{total}, worst (phi-psi)/max diag {worst:.2e}, "
               f"support match {support_ok}/{total} (need {int(0.95 * total)}), {elapsed:.1f}s")
    assert bound_ok == total
    assert support_ok >= 0.95 * total
    assert elapsed < 60


def test_zero_penalty_recovers_leading_eigenvalue(acceptance):
    _tagged("pca")
    rng = np.random.default_rng(77)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(50):
        n = int(rng.integers(2, 51))
        m = int(rng.integers(n, 2 * n + 1))
        S = _wishart(rng, n, m)
        _, _, phi = solver_mod.solve(S, SolverConfig(lam=0.0, epsilon=1e-6, max_sweeps=LONG_RUN))
        top = leading_eigenvector(S)[0]
        worst = max(worst, abs(phi - top) / top)
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-3 and elapsed < 30
    acceptance(2, "lambda=0 matches the leading eigenvalue", "PASS" if ok else "FAIL",
               f"worst relative error {worst:.2e} (tol 1e-3), {elapsed:.1f}s")
    assert worst <= 1e-3
    assert elapsed < 30


def test_two_dimensional_scan_matches_exact_value(acceptance):
    rng = np.random.default_rng(31)
    worst = 0.0
    for _ in range(50):
        n = int(rng.integers(2, 9))
        A = rng.standard_normal((2, n))
        lam = float(rng.uniform(0.0, np.max(np.sum(A * A, axis=0))))
        psi = brute_force_card(A.T @ A, lam).psi
        worst = max(worst, abs(xi_scan_psi(A, lam) - psi) / (1.0 + abs(psi)))
    ok = worst <= 1e-4
    acceptance(3, "unit-circle scan equals exact optimum for m=2", "PASS" if ok else "FAIL",
               f"worst |scan - psi|/(1+psi) {worst:.2e} (tol 1e-4)")
    assert ok


def test_screened_features_never_matter(acceptance):
    rng = np.random.default_rng(404)
    hits = mismatches = eliminated = 0
    for _ in range(200):
        n = int(rng.integers(2, 9))
        m = int(rng.integers(1, 2 * n + 1))
        scale = np.sqrt(rng.uniform(0.2, 3.0, size=n))
        S = _wishart(rng, n, m) * np.outer(scale, scale)
        d = np.diag(S)
        lam = float(rng.uniform(0.0, d.max()))
        full = brute_force_card(S, lam)
        dropped = set(np.flatnonzero(d <= lam).tolist())
        eliminated += len(dropped)
        hits += bool(dropped & set(full.support))
        kept = np.sort(screen(FeatureStats.from_variances(d, ids=np.arange(n)), lam).kept)
        reduced = brute_force_card(S[np.ix_(kept, kept)], lam)
        mismatches += reduced.psi != full.psi
    ok = hits == 0 and mismatches == 0
    acceptance(4, "features with variance <= lambda never enter the optimum",
               "PASS" if ok else "FAIL",
               f"{hits} supports hit an eliminated feature, {mismatches} psi mismatches, "
               f"{eliminated} features eliminated over 200 instances")
    assert ok


def test_spiked_model_support_recovery(acceptance):
    _tagged("spiked")
    t0 = time.perf_counter()
    recovered = []
    for seed in range(20):
        spec = SpikedModelSpec(n=100, m=500, support_fraction=0.1, noise_seed=seed)
        comp, _ = search_lambda(spiked_model(spec), 10, SolverConfig(), slack=1)
        recovered.append(len(set(comp.support) & set(spec.true_support.tolist())))
    elapsed = time.perf_counter() - t0
    good = sum(r >= 9 for r in recovered)
    runs = [s for s in SOLVE_LOG if s["tag"] == "spiked"]
    within = sum(s["converged"] and s["sweeps"] <= 10 for s in runs)
    sweeps = np.array([s["sweeps"] for s in runs])
    ok = good >= 18 and within == len(runs) and elapsed < 300
    acceptance(6, "planted sparse spike is recovered", "PASS" if ok else "FAIL",
               f"seeds with >=9/10 true indices {good}/20 (need 18); solves converged within "
               f"10 sweeps {within}/{len(runs)}, sweeps median {np.median(sweeps):.0f} "
               f"max {sweeps.max()}; {elapsed:.1f}s")
    assert good >= 18
    assert elapsed < 300
    assert within == len(runs)


def test_sweep_cost_scales_cubically(acceptance):
    _tagged("scaling")
    medians = {}
    for n in (128, 256):
        sigma = spiked_model(SpikedModelSpec(n=n, m=500, support_fraction=0.1, noise_seed=7))
        # lambda at a fixed fraction of the top variance keeps the solution
        # sparse but nontrivial at both sizes
        cfg = SolverConfig(lam=0.04 * float(sigma.diag.max()), max_sweeps=5, sweep_tol=1e-15)
        secs = []
        for _ in range(3):
            _, state = solve_screened(sigma, cfg)
            secs += state.sweep_seconds
        medians[n] = float(np.median(secs))
    ratio = medians[256] / medians[128]
    ok = 4 <= ratio <= 16
    acceptance(7, "per-sweep time ratio n=256 / n=128", "PASS" if ok else "FAIL",
               f"ratio {ratio:.2f} (band [4, 16]; medians {medians[128]:.3g}s, "
               f"{medians[256]:.3g}s)")
    assert ok


@pytest.fixture(scope="module")
def planted_corpus(tmp_path_factory):
    d = tmp_path_factory.mktemp("planted")
    groups = write_planted_topic_corpus(d / "docword.txt", d / "vocab.txt", seed=0)
    return d, groups


def _components_args(d, prefix, threads):
    return ["components", str(d / "docword.txt"), "--vocab", str(d / "vocab.txt"),
            "--k", "5", "--cardinality", "5", "--threads", str(threads), "--out", str(prefix)]


def test_planted_topics_from_corpus(planted_corpus, tmp_path, acceptance, capsys):
    _tagged("corpus")
    d, groups = planted_corpus
    t0 = time.perf_counter()
    code = main(_components_args(d, tmp_path / "comp", 1))
    elapsed = time.perf_counter() - t0
    capsys.readouterr()
    report = PipelineReport.from_json((tmp_path / "comp.json").read_text())
    found = sorted(tuple(sorted(c.support)) for c in report.components)
    flat = [i for c in report.components for i in c.support]
    ok = (code == 0 and found == sorted(map(tuple, groups))
          and len(flat) == len(set(flat)) and elapsed < 120)
    acceptance(8, "components command finds the planted word groups", "PASS" if ok else "FAIL",
               f"{sum(g in found for g in map(tuple, groups))}/5 groups exact, "
               f"disjoint {len(flat) == len(set(flat))}, {elapsed:.1f}s")
    assert code == 0
    assert found == sorted(map(tuple, groups))
    assert len(flat) == len(set(flat))
    assert elapsed < 120


def test_outputs_are_deterministic(planted_corpus, tmp_path, acceptance, capsys):
    _tagged("determinism")
    d, _ = planted_corpus
    checks = {}

    def run(args):
        assert main(args) == 0
        capsys.readouterr()

    # corpus pipeline: JSON and table across thread counts and repeats
    outs = []
    for i, threads in enumerate((1, 3, 1)):
        prefix = tmp_path / f"comp{i}"
        run(_components_args(d, prefix, threads))
        outs.append(((tmp_path / f"comp{i}.json").read_bytes(),
                     (tmp_path / f"comp{i}.txt").read_bytes()))
    checks["components"] = outs[0] == outs[1] == outs[2]

    outs = []
    for i, threads in enumerate((1, 4)):
        out = tmp_path / f"var{i}.csv"
        run(["stats", str(d / "docword.txt"), "--threads", str(threads), "--out", str(out)])
        outs.append(out.read_bytes())
    checks["stats"] = outs[0] == outs[1]

    outs = []
    for i in range(2):
        out = tmp_path / f"spiked{i}.txt"
        run(["synth", "--model", "spiked", "--n", "60", "--m", "200", "--seed", "5",
             "--out", str(out)])
        outs.append(out.read_bytes())
    checks["synth"] = outs[0] == outs[1]

    outs = []
    for i, threads in enumerate((1, 3)):
        prefix = tmp_path / f"sol{i}"
        run(["solve", str(tmp_path / "spiked0.txt"), "--cardinality", "6",
             "--threads", str(threads), "--out", str(prefix)])
        outs.append(((tmp_path / f"sol{i}.json").read_bytes(),
                     (tmp_path / f"sol{i}.trace.csv").read_bytes()))
    checks["solve"] = outs[0] == outs[1]

    # in-process solves repeat bit for bit
    rng = np.random.default_rng(2024)
    S = _wishart(rng, 8, 5)
    cfg = SolverConfig(lam=0.5 * float(np.diag(S).min()))
    a = solver_mod.solve(S, cfg)
    b = solver_mod.solve(S, cfg)
    checks["solve api"] = (np.array_equal(a[0].X, b[0].X)
                           and a[0].objective_trace == b[0].objective_trace)
    sigma = spiked_model(SpikedModelSpec(n=100, m=500, noise_seed=3))
    c1 = search_lambda(sigma, 10, SolverConfig(), slack=1, threads=1)
    c3 = search_lambda(sigma, 10, SolverConfig(), slack=1, threads=3)
    checks["search threads"] = json.dumps(c1[0].to_dict()) == json.dumps(c3[0].to_dict())

    ok = all(checks.values())
    acceptance(10, "identical outputs across repeats and thread counts",
               "PASS" if ok else "FAIL",
               ", ".join(f"{k} {'same' if v else 'DIFFERENT'}" for k, v in checks.items()))
    assert ok


def test_full_scale_corpora_not_reproduced(acceptance):
    acceptance(9, "full-size UCI corpora (word lists, timings)", "SKIP",
               "needs the 1 GB / 7.8 GB downloads; see scripts/uci_components.py")
    pytest.skip("full-size corpora are not available offline")


def test_every_solve_ascends_and_stays_positive_definite(acceptance):
    _tagged("ascent")
    # a dedicated batch on top of every solve made above
    rng = np.random.default_rng(5)
    for _ in range(40):
        n = int(rng.integers(2, 30))
        S = _wishart(rng, n, int(rng.integers(1, 2 * n + 1)))
        lam = float(rng.uniform(0.0, np.diag(S).min()))
        solver_mod.solve(CovarianceMatrix(S), SolverConfig(lam=lam))
    bad_trace = sum(not s["monotone"] for s in SOLVE_LOG)
    bad_pd = sum(not s["pd"] for s in SOLVE_LOG)
    ok = bad_trace == 0 and bad_pd == 0
    acceptance(5, "objective never decreases, X stays positive definite",
               "PASS" if ok else "FAIL",
               f"{len(SOLVE_LOG)} solves, {bad_trace} non-monotone traces, "
               f"{bad_pd} failed factorizations")
    assert ok
