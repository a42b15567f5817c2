from __future__ import annotations

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from twistkam.genfun import make_family  # noqa: E402

SPECS = {
    "quad1": {"family": "integrable_quadratic", "M": [[1.0]]},
    "quad2": {"family": "integrable_quadratic", "M": [[1.0, 0.0], [0.0, 2.0]]},
    "convex1": {"family": "integrable_convex", "M": [[1.0]], "fourier": [[[1], 0.02, 0.01]]},
    "standard": {"family": "standard", "K": 1.0},
    "coupled": {"family": "coupled_standard", "K": 0.5, "eps": 0.1},
    "custom2": {"family": "custom_fourier", "M": [[1.5, 0.2], [0.2, 1.0]],
                "fourier": [[[1, 0, 0, 1], 0.01, 0.0], [[0, 1, 1, 0], 0.0, 0.015]]},
}


@pytest.fixture(scope="session")
def fam():
    cache = {}

    def get(name):
        if name not in cache:
            cache[name] = make_family(SPECS[name])
        return cache[name]

    return get


@pytest.fixture(scope="session")
def quad1(fam):
    return fam("quad1")


@pytest.fixture(scope="session")
def quad2(fam):
    return fam("quad2")


@pytest.fixture(scope="session")
def standard(fam):
    return fam("standard")


@pytest.fixture(scope="session")
def coupled(fam):
    return fam("coupled")


# ---------------------------------------------------------------------------
# one pass/fail line per acceptance criterion

_ACCEPTANCE: dict = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_c" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        detail = "; ".join(str(v) for k, v in report.user_properties if k == "measured")
        _ACCEPTANCE[report.nodeid] = (report.outcome, detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for nodeid in sorted(_ACCEPTANCE):
        outcome, detail = _ACCEPTANCE[nodeid]
        name = nodeid.split("::")[-1]
        label = "C" + str(int(name[6:8]))
        flag = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"{label:<4}{flag}  {name[9:]}: {detail}")
