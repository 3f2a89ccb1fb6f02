import numpy as np
import pytest

FIXTURE_DOCWORD = "3\n4\n5\n1 2 3\n1 4 1\n2 1 2\n3 2 1\n3 3 2\n"
FIXTURE_VOCAB = "apple\nbanana\ncherry\ndate\n"


@pytest.fixture
def fixture_corpus(tmp_path):
    docword = tmp_path / "docword.fixture.txt"
    docword.write_text(FIXTURE_DOCWORD)
    vocab = tmp_path / "vocab.fixture.txt"
    vocab.write_text(FIXTURE_VOCAB)
    return docword, vocab


def random_psd(rng, n, m=None):
    m = m or n + 2
    F = rng.standard_normal((m, n))
    return F.T @ F / m


def write_corpus(path, D, W, dense):
    """Write a dense D x W count matrix as a docword file."""
    d, w = np.nonzero(dense)
    with open(path, "w") as fh:
        fh.write(f"{D}\n{W}\n{d.size}\n")
        for a, b in zip(d, w):
            fh.write(f"{a + 1} {b + 1} {dense[a, b]}\n")
    return path


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# acceptance results, printed as one PASS/FAIL line per criterion at the end
ACCEPTANCE = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[ACCEPTANCE] = {}


@pytest.fixture
def acceptance(request):
    results = request.config.stash[ACCEPTANCE]

    def record(number, title, status, detail):
        results[number] = (title, status, detail)
        print(f"criterion {number:>2} {status}: {title} ({detail})")

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(ACCEPTANCE, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        title, status, detail = results[number]
        terminalreporter.write_line(f"criterion {number:>2} {status}: {title} ({detail})")
