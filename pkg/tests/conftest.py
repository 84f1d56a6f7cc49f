import numpy as np
import pytest

from neurobit import data_io


@pytest.fixture(scope="session")
def synthetic8():
    """8 subjects, 5 trials per state (20 trials each), seed 7."""
    return data_io.generate_synthetic_dataset(8, 5, seed=7)


@pytest.fixture(scope="session")
def synthetic3():
    return data_io.generate_synthetic_dataset(3, 5, seed=11)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance criteria report one line each at the end of the session
_ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture
def acceptance(request):
    log = request.config.stash.setdefault(_ACCEPTANCE, {})

    def record(n: int, ok, detail: str):
        status = "SKIP" if ok is None else "PASS" if ok else "FAIL"
        log[n] = f"criterion {n:>2}: {status}  {detail}"
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    log = config.stash.get(_ACCEPTANCE, {})
    if not log:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(log):
        terminalreporter.write_line(log[n])
