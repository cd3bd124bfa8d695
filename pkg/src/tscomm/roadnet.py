"""Road network model, scenario documents and the synthetic grid generator.

A scenario document is UTF-8 JSON::

    {
      "format": 1,
      "meta": {"seed": 0, "time_span_s": 1800},
      "intersections": [{"id": "I_0_0", "kind": "real", "point": [0, 0]}, ...],
      "roads": [{"id": "R1", "from": "V_N_0", "to": "I_0_0", "length_m": 300,
                 "lanes": [{"turn": "L"}, {"turn": "S"}, {"turn": "R"}]}, ...],
      "phases": {"I_0_0": [[["R1", "R7"], ["R3", "R5"]], ...]},
      "flows": [{"roads": ["R1", "R7"], "entry_time_s": 0, "count": 10,
                 "interval_s": 6}]
    }

Movements are derived from the per-lane ``turn`` tags together with the
intersection coordinates in ``point``.  ``phases`` is optional for 4-arm
intersections (the canonical 8-phase table is used) and required otherwise.
Right turns are added to every phase.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from functools import cached_property
from typing import Any, Sequence

import numpy as np

from .errors import (
    DanglingReference,
    InvalidPlan,
    InvalidTopology,
    MalformedDocument,
    UnknownIntersection,
    UnsupportedGeometry,
)

FORMAT_VERSION = 1


class Turn(IntEnum):
    LEFT = 0
    STRAIGHT = 1
    RIGHT = 2

    @property
    def tag(self) -> str:
        return "LSR"[self]

    @classmethod
    def from_tag(cls, tag: str) -> "Turn":
        return cls("LSR".index(tag))


class Kind(Enum):
    REAL = "real"
    VIRTUAL = "virtual"


@dataclass(frozen=True)
class Lane:
    id: int
    road: int
    index: int
    turn: Turn | None


@dataclass(frozen=True)
class Road:
    id: int
    name: str
    from_: int
    to: int
    length_m: float
    lanes: tuple[int, ...]


@dataclass(frozen=True)
class Intersection:
    id: int
    name: str
    kind: Kind
    point: tuple[float, float]
    incoming_roads: tuple[int, ...]
    outgoing_roads: tuple[int, ...]


@dataclass(frozen=True)
class TrafficMovement:
    id: int
    upstream_road: int
    via: int
    downstream_road: int
    turn: Turn
    in_lanes: tuple[int, ...]
    out_lanes: tuple[int, ...]


@dataclass(frozen=True)
class Phase:
    id: int
    intersection: int
    permitted: frozenset[int]


@dataclass(frozen=True)
class RouteSpec:
    """``count`` vehicles released every ``interval_s`` from ``entry_time_s``."""

    roads: tuple[int, ...]
    entry_time_s: float
    count: int = 1
    interval_s: float = 0.0


@dataclass(frozen=True)
class RoadNetwork:
    intersections: tuple[Intersection, ...]
    roads: tuple[Road, ...]
    lanes: tuple[Lane, ...]
    movements: tuple[TrafficMovement, ...]
    phases: tuple[tuple[Phase, ...], ...]  # indexed by intersection id

    @cached_property
    def intersection_by_name(self) -> dict[str, int]:
        return {x.name: x.id for x in self.intersections}

    @cached_property
    def road_by_name(self) -> dict[str, int]:
        return {r.name: r.id for r in self.roads}

    @cached_property
    def real_intersections(self) -> tuple[int, ...]:
        return tuple(x.id for x in self.intersections if x.kind is Kind.REAL)

    @cached_property
    def movements_at(self) -> tuple[tuple[int, ...], ...]:
        out: list[list[int]] = [[] for _ in self.intersections]
        for m in self.movements:
            out[m.via].append(m.id)
        return tuple(tuple(ms) for ms in out)

    @cached_property
    def movement_between(self) -> dict[tuple[int, int], int]:
        return {(m.upstream_road, m.downstream_road): m.id for m in self.movements}

    @cached_property
    def lane_movement(self) -> tuple[int | None, ...]:
        owner: list[int | None] = [None] * len(self.lanes)
        for m in self.movements:
            for lane in m.in_lanes:
                owner[lane] = m.id
        return tuple(owner)

    def road_between(self, a: int, b: int) -> int | None:
        for r in self.intersections[a].outgoing_roads:
            if self.roads[r].to == b:
                return r
        return None

    def is_exit_road(self, road: int) -> bool:
        return self.intersections[self.roads[road].to].kind is Kind.VIRTUAL


@dataclass(frozen=True)
class Scenario:
    net: RoadNetwork
    flows: tuple[RouteSpec, ...]
    meta: dict = field(default_factory=dict, compare=False)

    @property
    def seed(self) -> int:
        return int(self.meta.get("seed", 0))

    @property
    def time_span_s(self) -> int:
        return int(self.meta.get("time_span_s", 3600))


# ---------------------------------------------------------------- geometry

def _classify_turn(p_from, p_via, p_to) -> Turn:
    hx, hy = p_via[0] - p_from[0], p_via[1] - p_from[1]
    ox, oy = p_to[0] - p_via[0], p_to[1] - p_via[1]
    theta = math.atan2(hx * oy - hy * ox, hx * ox + hy * oy)
    if abs(theta) <= math.pi / 4:
        return Turn.STRAIGHT
    return Turn.LEFT if theta > 0 else Turn.RIGHT


def _approach_side(p_from, p_via) -> str:
    """Compass side of ``p_via`` that traffic arrives from."""
    dx, dy = p_from[0] - p_via[0], p_from[1] - p_via[1]
    if abs(dx) >= abs(dy):
        return "E" if dx > 0 else "W"
    return "N" if dy > 0 else "S"


# ------------------------------------------------------------------ phases

_CANONICAL = (
    (("N", Turn.STRAIGHT), ("S", Turn.STRAIGHT)),
    (("N", Turn.LEFT), ("S", Turn.LEFT)),
    (("E", Turn.STRAIGHT), ("W", Turn.STRAIGHT)),
    (("E", Turn.LEFT), ("W", Turn.LEFT)),
    (("N", Turn.STRAIGHT), ("N", Turn.LEFT)),
    (("S", Turn.STRAIGHT), ("S", Turn.LEFT)),
    (("E", Turn.STRAIGHT), ("E", Turn.LEFT)),
    (("W", Turn.STRAIGHT), ("W", Turn.LEFT)),
)


def _canonical(intersections, roads, movements, i: int) -> tuple[Phase, ...]:
    x = intersections[i]
    if x.kind is not Kind.REAL or len(x.incoming_roads) != 4:
        raise UnsupportedGeometry(
            f"intersection {x.name!r}: canonical phases need a 4-arm intersection"
        )
    table: dict[tuple[str, Turn], int] = {}
    rights = []
    for m in movements:
        if m.via != i:
            continue
        side = _approach_side(intersections[roads[m.upstream_road].from_].point, x.point)
        if (side, m.turn) in table:
            raise UnsupportedGeometry(f"intersection {x.name!r}: two approaches from {side}")
        table[(side, m.turn)] = m.id
        if m.turn is Turn.RIGHT:
            rights.append(m.id)
    if len(table) != 12:
        raise UnsupportedGeometry(
            f"intersection {x.name!r}: canonical phases need all 12 movements, found {len(table)}"
        )
    return tuple(
        Phase(k, i, frozenset([table[a], table[b], *rights])) for k, (a, b) in enumerate(_CANONICAL)
    )


def canonical_phases(net: RoadNetwork, intersection: int) -> list[Phase]:
    """The eight standard phases of a 4-arm intersection, right turns always permitted."""
    return list(_canonical(net.intersections, net.roads, net.movements, intersection))


def neighbors(net: RoadNetwork, i: int) -> set[int]:
    if not 0 <= i < len(net.intersections):
        raise UnknownIntersection(i)
    x = net.intersections[i]
    return {net.roads[r].from_ for r in x.incoming_roads} | {net.roads[r].to for r in x.outgoing_roads}


# ----------------------------------------------------------------- parsing

def _require(obj: dict, key: str, where: str):
    if not isinstance(obj, dict) or key not in obj:
        raise MalformedDocument(f"{where}: missing key {key!r}")
    return obj[key]


def _as_number(value, where: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise MalformedDocument(f"{where}: expected a number, got {value!r}")
    return float(value)


def parse_scenario(text: str | bytes | dict) -> Scenario:
    """Parse and validate a scenario document."""
    if isinstance(text, dict):
        doc = text
    else:
        try:
            doc = json.loads(text)
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            raise MalformedDocument(f"not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise MalformedDocument("document root must be an object")
    if doc.get("format") != FORMAT_VERSION:
        raise MalformedDocument(f"unsupported or missing format {doc.get('format')!r}")
    meta = _require(doc, "meta", "document")
    if not isinstance(meta, dict) or not isinstance(meta.get("seed"), int):
        raise MalformedDocument("meta.seed must be an integer")

    # intersections
    raw_x = _require(doc, "intersections", "document")
    if not isinstance(raw_x, list):
        raise MalformedDocument("intersections must be a list")
    x_index: dict[str, int] = {}
    x_fields = []
    for k, item in enumerate(raw_x):
        name = _require(item, "id", f"intersections[{k}]")
        if not isinstance(name, str):
            raise MalformedDocument(f"intersections[{k}].id must be a string")
        if name in x_index:
            raise InvalidTopology(f"duplicate intersection id {name!r}")
        try:
            kind = Kind(_require(item, "kind", f"intersection {name!r}"))
        except ValueError as exc:
            raise MalformedDocument(f"intersection {name!r}: bad kind") from exc
        point = _require(item, "point", f"intersection {name!r}")
        if not isinstance(point, list) or len(point) != 2:
            raise MalformedDocument(f"intersection {name!r}: point must be [x, y]")
        pt = (_as_number(point[0], name), _as_number(point[1], name))
        x_index[name] = k
        x_fields.append((name, kind, pt))

    # roads and lanes
    raw_r = _require(doc, "roads", "document")
    if not isinstance(raw_r, list):
        raise MalformedDocument("roads must be a list")
    r_index: dict[str, int] = {}
    road_rows = []
    lanes: list[Lane] = []
    seen_pairs: dict[tuple[int, int], str] = {}
    for k, item in enumerate(raw_r):
        name = _require(item, "id", f"roads[{k}]")
        if not isinstance(name, str):
            raise MalformedDocument(f"roads[{k}].id must be a string")
        if name in r_index:
            raise InvalidTopology(f"duplicate road id {name!r}")
        ends = []
        for key in ("from", "to"):
            ref = _require(item, key, f"road {name!r}")
            if ref not in x_index:
                raise DanglingReference(f"road {name!r}: unknown intersection {ref!r}")
            ends.append(x_index[ref])
        a, b = ends
        if a == b:
            raise InvalidTopology(f"road {name!r}: starts and ends at the same intersection")
        if (a, b) in seen_pairs:
            raise InvalidTopology(f"road {name!r}: duplicates road {seen_pairs[(a, b)]!r}")
        seen_pairs[(a, b)] = name
        length = _as_number(_require(item, "length_m", f"road {name!r}"), f"road {name!r}")
        if not length > 0:
            raise InvalidTopology(f"road {name!r}: length must be positive")
        raw_lanes = _require(item, "lanes", f"road {name!r}")
        if not isinstance(raw_lanes, list) or not raw_lanes:
            raise InvalidTopology(f"road {name!r}: needs at least one lane")
        lane_ids = []
        for j, lane in enumerate(raw_lanes):
            if not isinstance(lane, dict):
                raise MalformedDocument(f"road {name!r} lane {j}: must be an object")
            tag = lane.get("turn")
            if tag is None:
                turn = None
            elif isinstance(tag, str) and len(tag) == 1 and tag in "LSR":
                turn = Turn.from_tag(tag)
            else:
                raise InvalidTopology(f"road {name!r} lane {j}: turn must be exactly one of L, S, R")
            lane_ids.append(len(lanes))
            lanes.append(Lane(len(lanes), k, j, turn))
        r_index[name] = k
        road_rows.append((name, a, b, length, tuple(lane_ids)))
    roads = tuple(Road(k, n, a, b, ln, ls) for k, (n, a, b, ln, ls) in enumerate(road_rows))

    incoming: list[list[int]] = [[] for _ in x_fields]
    outgoing: list[list[int]] = [[] for _ in x_fields]
    for r in roads:
        outgoing[r.from_].append(r.id)
        incoming[r.to].append(r.id)
    intersections = tuple(
        Intersection(k, n, kind, pt, tuple(incoming[k]), tuple(outgoing[k]))
        for k, (n, kind, pt) in enumerate(x_fields)
    )
    for x in intersections:
        n_in = len(x.incoming_roads)
        if x.kind is Kind.VIRTUAL and n_in != 1:
            raise InvalidTopology(f"virtual intersection {x.name!r} must have exactly one incoming road")
        if x.kind is Kind.REAL and n_in < 3:
            raise InvalidTopology(f"real intersection {x.name!r} needs at least 3 incoming roads")

    # movements from turn tags
    movements: list[TrafficMovement] = []
    for x in intersections:
        if x.kind is not Kind.REAL:
            continue
        for r_in in x.incoming_roads:
            road = roads[r_in]
            exits: dict[Turn, list[int]] = {}
            for r_out in x.outgoing_roads:
                dest = roads[r_out].to
                if dest == road.from_:
                    continue  # U-turns are not derived
                t = _classify_turn(intersections[road.from_].point, x.point, intersections[dest].point)
                exits.setdefault(t, []).append(r_out)
            by_turn: dict[Turn, list[int]] = {}
            for lane_id in road.lanes:
                lane = lanes[lane_id]
                if lane.turn is None:
                    raise InvalidTopology(f"road {road.name!r} lane {lane.index}: missing turn tag")
                by_turn.setdefault(lane.turn, []).append(lane_id)
            for t in sorted(by_turn):
                targets = exits.get(t, [])
                if not targets:
                    raise InvalidTopology(
                        f"road {road.name!r}: lanes tagged {t.tag} but {x.name!r} has no such exit"
                    )
                if len(targets) > 1:
                    raise InvalidTopology(
                        f"road {road.name!r}: turn {t.tag} at {x.name!r} is ambiguous"
                    )
                r_out = targets[0]
                movements.append(TrafficMovement(
                    len(movements), r_in, x.id, r_out, t, tuple(by_turn[t]), roads[r_out].lanes,
                ))
    movements_t = tuple(movements)
    pair_to_mv = {(m.upstream_road, m.downstream_road): m for m in movements_t}

    # phase tables
    raw_p = doc.get("phases", {})
    if not isinstance(raw_p, dict):
        raise MalformedDocument("phases must be an object keyed by intersection id")
    for name in raw_p:
        if name not in x_index:
            raise DanglingReference(f"phases: unknown intersection {name!r}")
        if intersections[x_index[name]].kind is not Kind.REAL:
            raise InvalidTopology(f"phases: {name!r} is virtual and has no signal")
    phases: list[tuple[Phase, ...]] = []
    for x in intersections:
        if x.kind is not Kind.REAL:
            phases.append(())
            continue
        if x.name not in raw_p:
            phases.append(_canonical(intersections, roads, movements_t, x.id))
            continue
        table = raw_p[x.name]
        if not isinstance(table, list) or not table:
            raise InvalidTopology(f"intersection {x.name!r}: phase table must be a nonempty list")
        rights = {m.id for m in movements_t if m.via == x.id and m.turn is Turn.RIGHT}
        built = []
        for k, entry in enumerate(table):
            if not isinstance(entry, list):
                raise MalformedDocument(f"phase {k} of {x.name!r} must be a list of [in, out] pairs")
            permitted = set(rights)
            for pair in entry:
                if not (isinstance(pair, list) and len(pair) == 2):
                    raise MalformedDocument(f"phase {k} of {x.name!r}: bad movement {pair!r}")
                for ref in pair:
                    if ref not in r_index:
                        raise DanglingReference(f"phase {k} of {x.name!r}: unknown road {ref!r}")
                mv = pair_to_mv.get((r_index[pair[0]], r_index[pair[1]]))
                if mv is None or mv.via != x.id:
                    raise InvalidTopology(f"phase {k} of {x.name!r}: {pair!r} is not a movement here")
                permitted.add(mv.id)
            if not permitted:
                raise InvalidTopology(f"phase {k} of {x.name!r} permits nothing")
            built.append(Phase(k, x.id, frozenset(permitted)))
        phases.append(tuple(built))

    net = RoadNetwork(intersections, roads, tuple(lanes), movements_t, tuple(phases))

    # flows
    raw_f = _require(doc, "flows", "document")
    if not isinstance(raw_f, list):
        raise MalformedDocument("flows must be a list")
    flows = []
    for k, item in enumerate(raw_f):
        where = f"flows[{k}]"
        names = _require(item, "roads", where)
        if not isinstance(names, list) or not names:
            raise MalformedDocument(f"{where}: roads must be a nonempty list")
        route = []
        for ref in names:
            if ref not in r_index:
                raise DanglingReference(f"{where}: unknown road {ref!r}")
            route.append(r_index[ref])
        entry = _as_number(_require(item, "entry_time_s", where), where)
        count = item.get("count", 1)
        interval = _as_number(item.get("interval_s", 0), where)
        if not isinstance(count, int) or isinstance(count, bool) or count < 1:
            raise MalformedDocument(f"{where}: count must be a positive integer")
        if entry < 0 or interval < 0:
            raise MalformedDocument(f"{where}: times must be nonnegative")
        spec = RouteSpec(tuple(route), entry, count, interval)
        validate_route(net, spec, where)
        flows.append(spec)

    return Scenario(net, tuple(flows), dict(meta))


def validate_route(net: RoadNetwork, route: RouteSpec, where: str = "route") -> None:
    roads = route.roads
    if net.intersections[net.roads[roads[0]].from_].kind is not Kind.VIRTUAL:
        raise InvalidTopology(f"{where}: must start at a virtual intersection")
    if net.intersections[net.roads[roads[-1]].to].kind is not Kind.VIRTUAL:
        raise InvalidTopology(f"{where}: must end at a virtual intersection")
    for a, b in zip(roads, roads[1:]):
        if (a, b) not in net.movement_between:
            raise InvalidTopology(
                f"{where}: no movement from {net.roads[a].name!r} to {net.roads[b].name!r}"
            )


def load_scenario(path) -> Scenario:
    with open(path, "rb") as fh:
        return parse_scenario(fh.read())


# ---------------------------------------------------------------- printing

def _num(v: float):
    return int(v) if float(v).is_integer() else float(v)


def scenario_to_dict(net: RoadNetwork, flows: Sequence[RouteSpec] = (), meta: dict | None = None) -> dict:
    meta = dict(meta or {})
    meta.setdefault("seed", 0)
    rn = net.roads
    doc: dict[str, Any] = {
        "format": FORMAT_VERSION,
        "meta": meta,
        "intersections": [
            {"id": x.name, "kind": x.kind.value, "point": [_num(x.point[0]), _num(x.point[1])]}
            for x in net.intersections
        ],
        "roads": [
            {
                "id": r.name,
                "from": net.intersections[r.from_].name,
                "to": net.intersections[r.to].name,
                "length_m": _num(r.length_m),
                "lanes": [
                    {} if net.lanes[l].turn is None else {"turn": net.lanes[l].turn.tag}
                    for l in r.lanes
                ],
            }
            for r in rn
        ],
        "phases": {
            net.intersections[i].name: [
                [
                    [rn[net.movements[m].upstream_road].name, rn[net.movements[m].downstream_road].name]
                    for m in sorted(p.permitted)
                ]
                for p in net.phases[i]
            ]
            for i in net.real_intersections
        },
        "flows": [
            {
                "roads": [rn[r].name for r in f.roads],
                "entry_time_s": _num(f.entry_time_s),
                "count": f.count,
                "interval_s": _num(f.interval_s),
            }
            for f in flows
        ],
    }
    return doc


def dump_scenario(net: RoadNetwork, flows: Sequence[RouteSpec] = (), meta: dict | None = None) -> str:
    return json.dumps(scenario_to_dict(net, flows, meta), indent=1, sort_keys=True) + "\n"


# --------------------------------------------------------------- generator

@dataclass
class FlowPlan:
    """Demand for :func:`generate_grid`.

    Every entry road gets a rate drawn uniformly from ``rate_vph`` (vehicles
    per hour), split over ``routes_per_entry`` random routes.
    """

    time_span_s: int = 1800
    rate_vph: tuple[float, float] = (150.0, 450.0)
    turn_probs: tuple[float, float, float] = (0.2, 0.6, 0.2)  # L, S, R
    routes_per_entry: int = 3


def _lane_turns(n: int) -> list[str]:
    if n < 3:
        raise InvalidPlan(f"{n} lanes cannot serve left, straight and right movements")
    n_left = 2 if n >= 6 else 1
    return ["L"] * n_left + ["S"] * (n - n_left - 1) + ["R"]


def _draw(rng: np.random.Generator, spec, integer: bool):
    if isinstance(spec, (int, float)):
        return spec
    lo, hi = spec
    if integer:
        return int(rng.integers(int(lo), int(hi) + 1))
    return float(round(rng.uniform(lo, hi)))


def generate_grid(
    rows: int,
    cols: int,
    lane_plan: int | tuple[int, int] = 3,
    lengths_m: float | tuple[float, float] = 300.0,
    flow_plan: FlowPlan | None = None,
    seed: int = 0,
    min_length_m: float = 100.0,
) -> str:
    """Build a ``rows`` x ``cols`` grid of 4-arm intersections ringed by virtual ones.

    ``lane_plan`` and ``lengths_m`` are either constants or inclusive
    ``(lo, hi)`` ranges drawn per bidirectional road pair.  Both directions of
    a pair share their lane count.  ``min_length_m`` guards the assumption that
    no vehicle crosses a whole road inside one action interval.
    """
    if rows < 1 or cols < 1:
        raise InvalidPlan("rows and cols must be >= 1")
    plan = flow_plan or FlowPlan()
    rng = np.random.default_rng(seed)

    points: dict[str, tuple[int, int]] = {}
    kinds: dict[str, str] = {}
    for r in range(rows):
        for c in range(cols):
            points[f"I_{r}_{c}"] = (c, -r)
            kinds[f"I_{r}_{c}"] = "real"
    for c in range(cols):
        points[f"V_N_{c}"], kinds[f"V_N_{c}"] = (c, 1), "virtual"
        points[f"V_S_{c}"], kinds[f"V_S_{c}"] = (c, -rows), "virtual"
    for r in range(rows):
        points[f"V_W_{r}"], kinds[f"V_W_{r}"] = (-1, -r), "virtual"
        points[f"V_E_{r}"], kinds[f"V_E_{r}"] = (cols, -r), "virtual"

    pairs: list[tuple[str, str]] = []
    for r in range(rows):
        for c in range(cols):
            here = f"I_{r}_{c}"
            if c + 1 < cols:
                pairs.append((here, f"I_{r}_{c + 1}"))
            if r + 1 < rows:
                pairs.append((here, f"I_{r + 1}_{c}"))
    for c in range(cols):
        pairs.append((f"V_N_{c}", f"I_0_{c}"))
        pairs.append((f"I_{rows - 1}_{c}", f"V_S_{c}"))
    for r in range(rows):
        pairs.append((f"V_W_{r}", f"I_{r}_0"))
        pairs.append((f"I_{r}_{cols - 1}", f"V_E_{r}"))

    roads = []
    for a, b in pairs:
        n_lanes = _draw(rng, lane_plan, integer=True)
        length = _draw(rng, lengths_m, integer=False)
        if length < min_length_m:
            raise InvalidPlan(f"road length {length} m below the {min_length_m} m minimum")
        turns = _lane_turns(n_lanes)
        for u, v in ((a, b), (b, a)):
            roads.append({
                "id": f"R_{u}__{v}",
                "from": u,
                "to": v,
                "length_m": _num(length),
                "lanes": [{"turn": t} for t in turns],
            })

    names = list(points)
    doc = {
        "format": FORMAT_VERSION,
        "meta": {"seed": int(seed), "time_span_s": int(plan.time_span_s), "grid": [rows, cols]},
        "intersections": [{"id": n, "kind": kinds[n], "point": list(points[n])} for n in names],
        "roads": roads,
        "phases": {},
        "flows": [],
    }
    scenario = parse_scenario(doc)  # validates and derives movements
    net = scenario.net

    out_moves: dict[int, dict[Turn, int]] = {}
    for m in net.movements:
        out_moves.setdefault(m.upstream_road, {})[m.turn] = m.downstream_road
    probs = np.asarray(plan.turn_probs, dtype=float)

    flows = []
    entries = [r for r in net.roads if net.intersections[r.from_].kind is Kind.VIRTUAL]
    for road in entries:
        rate = _draw(rng, plan.rate_vph, integer=False)
        total = int(round(rate * plan.time_span_s / 3600.0))
        per_route = np.full(plan.routes_per_entry, total // plan.routes_per_entry)
        per_route[: total % plan.routes_per_entry] += 1
        for count in per_route:
            route = _sample_route(net, road.id, out_moves, probs, rng)
            if count <= 0:
                continue
            interval = max(1, int(round(plan.time_span_s / count)))
            offset = int(rng.integers(0, interval))
            count = min(int(count), max(1, (plan.time_span_s - offset + interval - 1) // interval))
            flows.append({
                "roads": [net.roads[r].name for r in route],
                "entry_time_s": offset,
                "count": int(count),
                "interval_s": interval,
            })
    doc["flows"] = flows
    return json.dumps(doc, indent=1, sort_keys=True) + "\n"


def _sample_route(net, first_road, out_moves, probs, rng, max_tries: int = 100) -> list[int]:
    for _ in range(max_tries):
        route = [first_road]
        visited = {net.roads[first_road].from_}
        ok = True
        while not net.is_exit_road(route[-1]):
            here = net.roads[route[-1]].to
            if here in visited:
                ok = False
                break
            visited.add(here)
            options = out_moves[route[-1]]
            turns = sorted(options)
            p = probs[[int(t) for t in turns]]
            t = turns[int(rng.choice(len(turns), p=p / p.sum()))]
            route.append(options[t])
        if ok:
            return route
    raise InvalidPlan("could not sample a loop-free route")
