import json

import pytest
from hypothesis import given, settings, strategies as st

from conftest import flow, grid_doc, two_virtual_doc, with_flows
from tscomm import roadnet
from tscomm.errors import (
    DanglingReference, InvalidPlan, InvalidTopology, MalformedDocument, UnknownIntersection,
    UnsupportedGeometry,
)
from tscomm.roadnet import Kind, Turn


def t_junction_doc():
    """Real intersection X with arms to the north, east and south."""
    pts = {"X": (0, 0), "N": (0, 1), "E": (1, 0), "S": (0, -1)}
    xs = [{"id": k, "kind": "real" if k == "X" else "virtual", "point": list(p)} for k, p in pts.items()]
    lanes_in = {"N": ["L", "S"], "S": ["S", "R"], "E": ["L", "R"]}
    roads = []
    for v, turns in lanes_in.items():
        roads.append({"id": f"{v}X", "from": v, "to": "X", "length_m": 100, "lanes": [{"turn": t} for t in turns]})
        roads.append({"id": f"X{v}", "from": "X", "to": v, "length_m": 100, "lanes": [{}]})
    return {"format": 1, "meta": {"seed": 0}, "intersections": xs, "roads": roads, "phases": {}, "flows": []}


def test_one_by_one_grid_counts():
    net = roadnet.parse_scenario(grid_doc(1, 1)).net
    kinds = [x.kind for x in net.intersections]
    assert kinds.count(Kind.REAL) == 1 and kinds.count(Kind.VIRTUAL) == 4
    assert len(net.roads) == 8


def test_two_by_two_grid_counts_and_interior_neighbors():
    net = roadnet.parse_scenario(grid_doc(2, 2)).net
    assert len(net.real_intersections) == 4
    assert sum(x.kind is Kind.VIRTUAL for x in net.intersections) == 8
    for x in net.real_intersections:
        assert len(roadnet.neighbors(net, x)) == 4


def test_four_arm_has_twelve_movements_and_eight_phases():
    net = roadnet.parse_scenario(grid_doc(1, 1)).net
    x = net.real_intersections[0]
    assert len(net.movements_at[x]) == 12
    phases = roadnet.canonical_phases(net, x)
    assert len(phases) == 8
    rights = {m for m in net.movements_at[x] if net.movements[m].turn is Turn.RIGHT}
    assert len(rights) == 4
    for p in phases:
        assert rights <= p.permitted
        assert len(p.permitted - rights) == 2
        assert p.permitted <= set(net.movements_at[x])


def test_canonical_phase_contents():
    net = roadnet.parse_scenario(grid_doc(1, 1)).net
    x = net.real_intersections[0]
    name = {r.id: r.name for r in net.roads}

    def sides(p):
        out = set()
        for m in p.permitted:
            mv = net.movements[m]
            if mv.turn is not Turn.RIGHT:
                out.add((name[mv.upstream_road].split("__")[0][-3:], mv.turn.tag))
        return out

    phases = roadnet.canonical_phases(net, x)
    assert sides(phases[0]) == {("N_0", "S"), ("S_0", "S")}
    assert sides(phases[1]) == {("N_0", "L"), ("S_0", "L")}
    assert sides(phases[2]) == {("W_0", "S"), ("E_0", "S")}
    assert sides(phases[3]) == {("W_0", "L"), ("E_0", "L")}
    assert sides(phases[4]) == {("N_0", "S"), ("N_0", "L")}
    assert sides(phases[7]) == {("W_0", "S"), ("W_0", "L")}


def test_three_arm_needs_explicit_phases():
    with pytest.raises(UnsupportedGeometry):
        roadnet.parse_scenario(t_junction_doc())


def test_three_arm_with_explicit_phases():
    doc = t_junction_doc()
    doc["phases"] = {"X": [[["NX", "XS"], ["SX", "XN"]], [["NX", "XE"]], [["EX", "XS"]]]}
    net = roadnet.parse_scenario(doc).net
    x = net.real_intersections[0]
    assert len(net.movements_at[x]) == 6
    with pytest.raises(UnsupportedGeometry):
        roadnet.canonical_phases(net, x)
    assert len(net.phases[x]) == 3
    rights = {m for m in net.movements_at[x] if net.movements[m].turn is Turn.RIGHT}
    assert all(rights <= p.permitted for p in net.phases[x])


def test_route_without_movement_is_rejected():
    doc = grid_doc(1, 1)
    with pytest.raises(InvalidTopology):
        with_flows(doc, [flow(["R_V_N_0__I_0_0", "R_I_0_0__V_N_0"])])  # U-turn


def test_route_must_start_and_end_at_virtual():
    doc = grid_doc(1, 1)
    with pytest.raises(InvalidTopology):
        with_flows(doc, [flow(["R_I_0_0__V_S_0", "R_V_S_0__I_0_0"])])


@pytest.mark.parametrize(
    "mutate, err",
    [
        (lambda d: d.pop("format"), MalformedDocument),
        (lambda d: d["meta"].pop("seed"), MalformedDocument),
        (lambda d: d["intersections"].append(dict(d["intersections"][0])), InvalidTopology),
        (lambda d: d["roads"][0].update(to="nowhere"), DanglingReference),
        (lambda d: d["roads"][0]["lanes"][0].update(turn="LS"), InvalidTopology),
        (lambda d: d["roads"][0].update(lanes=[]), InvalidTopology),
        (lambda d: d["roads"][0].update(length_m=0), InvalidTopology),
        (lambda d: d["flows"].append({"roads": ["zzz"], "entry_time_s": 0}), DanglingReference),
    ],
)
def test_parse_errors(mutate, err):
    doc = grid_doc(1, 1)
    mutate(doc)
    with pytest.raises(err):
        roadnet.parse_scenario(doc)


def test_malformed_json():
    with pytest.raises(MalformedDocument):
        roadnet.parse_scenario("{not json")


def test_real_with_two_incoming_roads_rejected():
    doc = t_junction_doc()
    doc["roads"] = [r for r in doc["roads"] if r["id"] not in ("EX", "XE")]
    doc["intersections"] = [x for x in doc["intersections"] if x["id"] != "E"]
    with pytest.raises(InvalidTopology):
        roadnet.parse_scenario(doc)


def test_virtual_with_two_incoming_rejected():
    doc = two_virtual_doc()
    doc["roads"].append({"id": "AB2", "from": "A", "to": "B", "length_m": 50, "lanes": [{}]})
    with pytest.raises(InvalidTopology):
        roadnet.parse_scenario(doc)


def test_neighbors():
    net = roadnet.parse_scenario(two_virtual_doc()).net
    assert roadnet.neighbors(net, 0) == {1}
    with pytest.raises(UnknownIntersection):
        roadnet.neighbors(net, 99)


def test_lane_plan_too_small():
    with pytest.raises(InvalidPlan):
        roadnet.generate_grid(1, 1, lane_plan=2)


def test_default_generator_rejects_roads_crossable_within_one_interval():
    with pytest.raises(InvalidPlan):
        roadnet.generate_grid(1, 1, lengths_m=99.0)
    from tscomm.microsim import SimConfig, free_flow_ticks

    cfg = SimConfig()
    net = roadnet.parse_scenario(roadnet.generate_grid(2, 2, lengths_m=(100, 612), seed=1)).net
    assert all(free_flow_ticks(r.length_m, cfg.v_free_mps) >= cfg.action_interval_s for r in net.roads)


def test_generation_is_deterministic():
    a = roadnet.generate_grid(2, 2, lane_plan=(3, 7), lengths_m=(62, 612), min_length_m=62, seed=5)
    b = roadnet.generate_grid(2, 2, lane_plan=(3, 7), lengths_m=(62, 612), min_length_m=62, seed=5)
    assert a == b
    assert a != roadnet.generate_grid(2, 2, lane_plan=(3, 7), lengths_m=(62, 612), min_length_m=62, seed=6)


@settings(max_examples=25, deadline=None)
@given(
    rows=st.integers(1, 3),
    cols=st.integers(1, 3),
    lanes=st.sampled_from([3, (3, 7)]),
    seed=st.integers(0, 10_000),
)
def test_grid_invariants_and_round_trip(rows, cols, lanes, seed):
    sc = roadnet.parse_scenario(roadnet.generate_grid(rows, cols, lane_plan=lanes, lengths_m=(62, 612), min_length_m=62, seed=seed))
    net = sc.net
    assert len(net.real_intersections) == rows * cols
    # every lane on a road into a real intersection belongs to exactly one movement
    owners = {}
    for m in net.movements:
        assert net.roads[m.upstream_road].to == m.via == net.roads[m.downstream_road].from_
        for lane in m.in_lanes:
            assert lane not in owners
            owners[lane] = m.id
    for lane in net.lanes:
        into_real = net.intersections[net.roads[lane.road].to].kind is Kind.REAL
        assert (lane.id in owners) == into_real
    for x in net.real_intersections:
        assert len(net.movements_at[x]) == 12
        assert len(net.phases[x]) == 8
        for y in roadnet.neighbors(net, x):
            assert x in roadnet.neighbors(net, y)
    for f in sc.flows:
        roadnet.validate_route(net, f)
    again = roadnet.parse_scenario(roadnet.dump_scenario(net, sc.flows, sc.meta))
    assert again.net == net
    assert again.flows == sc.flows


def test_dump_is_stable_json():
    sc = roadnet.parse_scenario(grid_doc(1, 1))
    text = roadnet.dump_scenario(sc.net, sc.flows, sc.meta)
    assert json.loads(text)["format"] == 1
    assert roadnet.dump_scenario(roadnet.parse_scenario(text).net, sc.flows, sc.meta) == text
