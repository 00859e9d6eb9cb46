import time
from collections import defaultdict

import numpy as np
import pytest

from monoph.discrete_ops import SystemMatrices
from monoph.monotone import BoxSet
from monoph.ocp import CostSpec, OcpSpec
from monoph.timegrid import TimeGrid

A_EX = np.array([[0.0, -1.0], [1.0, 0.0]])
B_EX = np.array([[0.0], [1.0]])
X0_EX = np.array([-0.5, -3.0])
ALPHA_EX = 1.5


def example_spec(N=200, t_f=1.0, box=None, x0=X0_EX, f=None):
    return OcpSpec(SystemMatrices(A_EX, B_EX), TimeGrid(t_f, N), x0, CostSpec(ALPHA_EX), f, box)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def spec_u():
    return example_spec()


@pytest.fixture(scope="session")
def spec_c():
    return example_spec(box=BoxSet.symmetric(1.0, 1))


@pytest.fixture(scope="session")
def small_spec_u():
    return example_spec(N=20)


@pytest.fixture(scope="session")
def small_spec_c():
    return example_spec(N=20, box=BoxSet.symmetric(1.0, 1))


# ---------------------------------------------------------------------------
# acceptance reporting: one line per criterion in the terminal summary

_CRITERIA = defaultdict(list)


class CriterionRecorder:
    def __init__(self, number, part, limit_s):
        self.number, self.part, self.limit_s = number, part, limit_s
        self.checks = []
        self.finished = False
        self.start = time.perf_counter()

    def check(self, label, ok, detail=""):
        self.checks.append((label, bool(ok), detail))
        return bool(ok)

    def finish(self):
        self.finished = True
        elapsed = time.perf_counter() - self.start
        if self.limit_s is not None:
            self.check(f"runtime <= {self.limit_s:g}s", elapsed <= self.limit_s, f"{elapsed:.1f}s")
        _CRITERIA[self.number].extend(self.checks)
        return all(ok for _, ok, _ in self.checks)


@pytest.fixture
def criterion(request):
    """``criterion(number, part, limit_s)`` returns a recorder whose checks
    are summarised per criterion at the end of the session."""
    made = []

    def factory(number, part="", limit_s=None):
        rec = CriterionRecorder(number, part, limit_s)
        made.append(rec)
        return rec

    yield factory
    for rec in made:
        if not rec.finished:
            rec.check("completed", False, "test raised before finishing")
            rec.finish()


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        checks = _CRITERIA[number]
        ok = all(c[1] for c in checks)
        parts = "; ".join(f"{label}: {'pass' if good else 'FAIL'}" + (f" ({detail})" if detail else "")
                          for label, good, detail in checks)
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'} | {parts}")
