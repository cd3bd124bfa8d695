import json

import numpy as np
import pytest

from tscomm import roadnet
from tscomm.roadnet import FlowPlan


def grid_doc(rows=1, cols=1, length=100.0, rate=(0.0, 0.0), seed=0, lanes=3, time_span=1800):
    plan = FlowPlan(time_span_s=time_span, rate_vph=rate)
    return json.loads(roadnet.generate_grid(rows, cols, lane_plan=lanes, lengths_m=length, flow_plan=plan, seed=seed, min_length_m=min(length, 100.0)))


def with_flows(doc, flows, time_span=None):
    doc = dict(doc)
    doc["flows"] = flows
    if time_span is not None:
        doc["meta"] = dict(doc["meta"], time_span_s=time_span)
    return roadnet.parse_scenario(doc)


def flow(roads, t=0, count=1, interval=0):
    return {"roads": list(roads), "entry_time_s": t, "count": count, "interval_s": interval}


def two_virtual_doc(length=100.0):
    """Two virtual intersections joined by a road in each direction."""
    return {
        "format": 1,
        "meta": {"seed": 0, "time_span_s": 100},
        "intersections": [
            {"id": "A", "kind": "virtual", "point": [0, 0]},
            {"id": "B", "kind": "virtual", "point": [1, 0]},
        ],
        "roads": [
            {"id": "AB", "from": "A", "to": "B", "length_m": length, "lanes": [{}]},
            {"id": "BA", "from": "B", "to": "A", "length_m": length, "lanes": [{}]},
        ],
        "phases": {},
        "flows": [],
    }


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def packed(agents, rng, phases=None, received=True, scale=3.0):
    """Random observation batch over ``agents``."""
    from tscomm.features import make_batch

    counts = [rng.uniform(0, scale, size=a.n_movements) for a in agents]
    if phases is None:
        phases = [int(rng.integers(a.n_phases)) for a in agents]
    recv = [rng.uniform(0, 1, size=a.n_movements) for a in agents] if received else None
    return make_batch(agents, counts, phases, recv)


@pytest.fixture(scope="session")
def grid_agents():
    from tscomm.env import build_agents

    return build_agents(roadnet.parse_scenario(roadnet.generate_grid(2, 2, lane_plan=(3, 6), seed=2)).net)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for k in sorted(results):
            terminalreporter.write_line(results[k])
