import time

import numpy as np
import pytest

from darkselect.synth import SyntheticSpec, generate_corpus

ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(lines):
        terminalreporter.write_line(line)


@pytest.fixture
def acceptance_log(request):
    """Record one pass/fail line per acceptance criterion."""
    log = request.config.stash[ACCEPTANCE]

    def record(number, title, ok, elapsed, limit_s, detail):
        passed = bool(ok) and elapsed < limit_s
        line = f"[{'PASS' if passed else 'FAIL'}] {number:2d}. {title}: {detail} ({elapsed:.2f}s, limit {limit_s:g}s)"
        log.append((number, line))
        print(line)
        return passed

    return record


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """A 30-speaker synthetic corpus shared by pipeline and CLI tests."""
    out = tmp_path_factory.mktemp("small_corpus")
    generate_corpus(SyntheticSpec(n_speakers=30, seed=7), out)
    return out


@pytest.fixture(scope="session")
def full_corpus(tmp_path_factory):
    """The 200-speaker, 30% mixed-quality corpus; returns (path, seconds)."""
    out = tmp_path_factory.mktemp("full_corpus")
    t0 = time.perf_counter()
    generate_corpus(SyntheticSpec(n_speakers=200, mixed_fraction=0.3, seed=0), out)
    return out, time.perf_counter() - t0
