import copy
import json

import numpy as np
import pytest

from adnsim.network import bundled_path, cigre12, load_grid


@pytest.fixture(scope="session")
def grid():
    return cigre12()


@pytest.fixture(scope="session")
def grid_doc():
    with open(bundled_path("cigre12.json"), encoding="utf-8") as fh:
        return json.load(fh)


@pytest.fixture
def doc_copy(grid_doc):
    return copy.deepcopy(grid_doc)


def two_bus_doc(x_pu=0.1, r_pu=0.0, load=(0.0, 0.0), s_base=100.0, v_kv=20.0):
    """Slack bus A and load bus B joined by one line, impedances given in system pu."""
    zb = v_kv**2 / s_base
    return {
        "bases": {"s_mva": s_base, "v_hv_kv": v_kv, "v_mv_kv": v_kv},
        "buses": ["A", "B"],
        "branches": [{"id": "AB", "from": "A", "to": "B", "r_ohm": r_pu * zb, "x_ohm": x_pu * zb}],
        "loads": [{"bus": "B", "p_mw": load[0] * s_base, "q_mvar": load[1] * s_base}],
        "slack": "A",
    }


@pytest.fixture
def two_bus():
    return lambda **kw: load_grid(two_bus_doc(**kw))


def rng(seed=0):
    return np.random.default_rng(seed)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
