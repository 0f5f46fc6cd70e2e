import warnings

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from stoprec.sparse import SparseMatrix

warnings.filterwarnings("ignore", message="The TBB threading layer")

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def random_sparse(rng, n, m=None, density=0.1):
    m = n if m is None else m
    dense = np.where(rng.random((n, m)) < density, rng.uniform(-1, 1, (n, m)), 0.0)
    return SparseMatrix.from_dense(dense), dense


@pytest.fixture
def small_2x2():
    return SparseMatrix.from_dense(np.array([[2.0, 1.0], [0.0, 3.0]]))


# acceptance verdicts, filled by test_acceptance.py: criterion -> (passed, detail)
ACCEPTANCE: dict[int, tuple[bool, str]] = {}
ACCEPTANCE_COUNT = 10


def pytest_terminal_summary(terminalreporter):
    ran = any("test_acceptance.py" in r.nodeid for key in ("passed", "failed", "error") for r in terminalreporter.stats.get(key, []))
    if not ran:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, ACCEPTANCE_COUNT + 1):
        ok, detail = ACCEPTANCE.get(n, (False, "not evaluated"))
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
