from __future__ import annotations

import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).resolve().parent))

from linesdr import LocationSet, formation_from_locations  # noqa: E402
from linesdr.bench import gen_graph  # noqa: E402

settings.register_profile("default", max_examples=30, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", max_examples=100, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

DATA = Path(__file__).resolve().parent / "data"
DOCS = Path(__file__).resolve().parents[1] / "docs"


@pytest.fixture(autouse=True)
def restore_package_logger():
    # the CLI installs its own stderr handler; undo it so caplog works in later tests
    lg = logging.getLogger("linesdr")
    state = (lg.handlers[:], lg.level, lg.propagate)
    yield
    lg.handlers[:], lg.level, lg.propagate = state


@pytest.fixture(scope="session")
def frozen() -> dict:
    return json.loads((DATA / "frozen.json").read_text())


@pytest.fixture(scope="session")
def schemas() -> dict:
    return {p.name.removesuffix(".schema.json"): json.loads(p.read_text()) for p in DOCS.glob("*.schema.json")}


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(12345)


def noiseless_instance(n: int, seed: int, theta: float = 0.5, d: int = 3):
    """Random rigid graph with exact lines through Gaussian locations."""
    edges = gen_graph(n, theta=theta, seed=seed, d=d)
    truth = LocationSet(np.random.default_rng(seed).standard_normal((n, d)))
    return formation_from_locations(truth, edges).graph, truth


@pytest.fixture(scope="session")
def noiseless10():
    return noiseless_instance(10, seed=3)


@pytest.fixture(scope="session")
def fig3_graphs() -> dict:
    """Small example graphs, nodes relabelled 1..5 -> 0..4.

    ``a``: two triangles sharing a vertex. ``b``: a triangle. ``c``: the
    7-edge graph whose 3D certificate lists edges 12, 13, 14, 23, 34, 35, 45.
    ``d``: the 4-cycle (its doubled edge set is a 3D certificate).
    """
    return {
        "a": (5, [(0, 1), (0, 2), (1, 2), (2, 3), (2, 4), (3, 4)]),
        "b": (3, [(0, 1), (0, 2), (1, 2)]),
        "c": (5, [(0, 1), (0, 2), (0, 3), (1, 2), (2, 3), (2, 4), (3, 4)]),
        "d": (4, [(0, 1), (1, 2), (2, 3), (0, 3)]),
    }


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def acceptance_report():
    """Collects one verdict line per acceptance criterion; printed in the terminal summary."""
    def record(k: int, ok: bool, detail: str) -> None:
        line = f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line, flush=True)
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
