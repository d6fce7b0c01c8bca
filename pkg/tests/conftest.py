import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from perceptual_se.corpus import CorpusSpec, generate_corpus  # noqa: E402

ACCEPTANCE_RESULTS = {}
ACCEPTANCE_REPORT = []     # free-form lines printed after the pass/fail table


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """A small generated corpus shared by the unit tests (read-only)."""
    root = tmp_path_factory.mktemp("tiny_corpus")
    generate_corpus(CorpusSpec(seed=5, n_train=12, n_dev=4, n_test=4, n_unseen=4,
                               min_seconds=0.6, max_seconds=1.2), root)
    return root


def pytest_configure(config):
    for n in range(1, 11):
        config.addinivalue_line("markers", f"criterion_{n}: acceptance criterion {n}")
    config.addinivalue_line("markers", "slow: trains models end to end on the full corpus")


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    for key in report.keywords:
        if key.startswith("criterion_"):
            n = int(key.split("_")[1])
            prev = ACCEPTANCE_RESULTS.get(n, "passed")
            ACCEPTANCE_RESULTS[n] = report.outcome if prev == "passed" else prev


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_RESULTS):
        outcome = ACCEPTANCE_RESULTS[n]
        status = {"passed": "PASS", "failed": "FAIL"}.get(outcome, outcome.upper())
        terminalreporter.write_line(f"criterion {n:2d}: {status}")
    for line in ACCEPTANCE_REPORT:
        terminalreporter.write_line(line)
