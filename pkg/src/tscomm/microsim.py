"""Deterministic queue-based traffic dynamics on a 1 s tick.

Each lane holds two segments: vehicles running at free-flow speed toward the
stop line, and a FIFO queue at the stop line.  A queued head vehicle crosses
the intersection when its movement is green, the lane's saturation headway
has elapsed and its destination lane has room.  Vehicles whose entry lane is
full wait in a pending pool outside the network.

One call to :func:`tick` runs, in order:

1. release scheduled vehicles into the pending pool and inject those that fit
   into the movement-matching lane with the most free room;
2. move running vehicles whose timer expired into their lane queue (or out of
   the network on a road that ends at a virtual intersection);
3. discharge queue heads of permitted movements at intersections that are not
   in all-red;
4. count a wait second for every queued or pending vehicle not discharged;
5. advance the clock.

Trace records are ``tick,vehicle,event,lane`` with events ``enter``,
``queue``, ``discharge`` and ``complete``.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import NotActionBoundary, PhaseNotAtIntersection, UnknownEntity
from .roadnet import Kind, RoadNetwork, RouteSpec

NEVER = -(10**9)


@dataclass(frozen=True)
class SimConfig:
    v_free_mps: float = 10.0
    headway_s: int = 2
    vehicle_length_m: float = 7.0
    all_red_s: int = 5
    action_interval_s: int = 10
    entry_jitter_s: int = 0  # scheduled entries shifted by U{0..jitter}, seeded


class Vehicle:
    __slots__ = (
        "id", "route", "cursor", "lane", "due", "queued", "entry_time_s", "entered_at_s",
        "completed_at_s", "wait_ticks", "expected_free_travel_s",
    )

    def __init__(self, vid: int, route: tuple[int, ...], entry_time_s: float, expected: float):
        self.id = vid
        self.route = route
        self.cursor = 0
        self.lane: int | None = None  # None while pending
        self.due = 0  # tick at whose step 2 the running segment ends
        self.queued = False
        self.entry_time_s = entry_time_s
        self.entered_at_s = entry_time_s  # travel clock starts at scheduled entry
        self.completed_at_s: float | None = None
        self.wait_ticks = 0
        self.expected_free_travel_s = expected

    def remaining_ticks(self, clock: int) -> int:
        return 0 if self.queued else self.due - clock + 1


@dataclass(frozen=True)
class SignalCommand:
    intersection: int
    phase: int


@dataclass
class SimState:
    net: RoadNetwork
    config: SimConfig
    clock_s: int
    vehicles: list[Vehicle]
    schedule: deque  # vehicle ids ordered by entry time, not yet released
    pending: list[int]  # released but waiting for room on their first road
    running: list[deque]  # per lane
    queues: list[deque]  # per lane
    active_phase: list[int]  # per intersection, -1 for virtual
    next_phase: list[int]
    all_red_remaining_s: list[int]
    last_discharge_tick: list[int]  # per lane
    arrivals_window: np.ndarray  # per lane entries since last snapshot
    rng: np.random.Generator
    injected_total: int = 0
    completed: list[int] = field(default_factory=list)
    trace: list | None = None
    # static lookups
    free_ticks: tuple[int, ...] = ()
    capacity: tuple[int, ...] = ()
    exit_road: tuple[bool, ...] = ()
    phase_lanes: tuple[tuple[tuple[int, ...], ...], ...] = ()  # [intersection][phase] -> lanes

    @property
    def in_system(self) -> int:
        return self.injected_total - len(self.completed)

    def occupancy(self, lane: int) -> int:
        return len(self.running[lane]) + len(self.queues[lane])


def free_flow_ticks(length_m: float, v_free: float) -> int:
    return max(1, math.ceil(length_m / v_free - 1e-9))


def new_state(
    net: RoadNetwork,
    flows: tuple[RouteSpec, ...] | list[RouteSpec],
    config: SimConfig | None = None,
    seed: int = 0,
    trace: bool = False,
) -> SimState:
    config = config or SimConfig()
    rng = np.random.default_rng(seed)
    rows = []
    for k, f in enumerate(flows):
        for j in range(f.count):
            rows.append((f.entry_time_s + j * f.interval_s, k, j, f.roads))
    rows.sort(key=lambda t: (t[0], t[1], t[2]))
    if config.entry_jitter_s > 0 and rows:
        shift = rng.integers(0, config.entry_jitter_s + 1, size=len(rows))
        rows = sorted(
            ((t + int(s), k, j, r) for (t, k, j, r), s in zip(rows, shift)),
            key=lambda t: (t[0], t[1], t[2]),
        )
    vehicles = []
    for vid, (t, _, _, route) in enumerate(rows):
        expected = sum(net.roads[r].length_m for r in route) / config.v_free_mps
        vehicles.append(Vehicle(vid, route, float(t), expected))
    n_lanes = len(net.lanes)
    n_x = len(net.intersections)
    real = [x.kind is Kind.REAL for x in net.intersections]
    return SimState(
        net=net,
        config=config,
        clock_s=0,
        vehicles=vehicles,
        schedule=deque(range(len(vehicles))),
        pending=[],
        running=[deque() for _ in range(n_lanes)],
        queues=[deque() for _ in range(n_lanes)],
        active_phase=[0 if real[i] else -1 for i in range(n_x)],
        next_phase=[0 if real[i] else -1 for i in range(n_x)],
        all_red_remaining_s=[0] * n_x,
        last_discharge_tick=[NEVER] * n_lanes,
        arrivals_window=np.zeros(n_lanes, dtype=np.int64),
        rng=rng,
        trace=[] if trace else None,
        free_ticks=tuple(free_flow_ticks(r.length_m, config.v_free_mps) for r in net.roads),
        capacity=tuple(
            max(1, int(net.roads[l.road].length_m // config.vehicle_length_m)) for l in net.lanes
        ),
        exit_road=tuple(net.is_exit_road(r.id) for r in net.roads),
        phase_lanes=tuple(
            tuple(
                tuple(l for m in sorted(p.permitted) for l in net.movements[m].in_lanes)
                for p in net.phases[i]
            )
            for i in range(n_x)
        ),
    )


def set_phase(state: SimState, cmd: SignalCommand) -> SimState:
    """Request a phase; a change inserts the all-red interval first."""
    i = cmd.intersection
    net = state.net
    if not 0 <= i < len(net.intersections) or not 0 <= cmd.phase < len(net.phases[i]):
        raise PhaseNotAtIntersection(f"phase {cmd.phase} is not defined at intersection {i}")
    if state.clock_s % state.config.action_interval_s != 0:
        raise NotActionBoundary(f"clock {state.clock_s} is not a multiple of the action interval")
    if cmd.phase == state.next_phase[i]:
        return state
    state.next_phase[i] = cmd.phase
    if state.config.all_red_s > 0:
        state.all_red_remaining_s[i] = state.config.all_red_s
    else:
        state.active_phase[i] = cmd.phase
    return state


def _candidate_lanes(net: RoadNetwork, route: tuple[int, ...], cursor: int) -> tuple[int, ...]:
    """Lanes of ``route[cursor]`` that serve the vehicle's next movement."""
    road = route[cursor]
    if cursor + 1 >= len(route):
        return net.roads[road].lanes
    return net.movements[net.movement_between[(road, route[cursor + 1])]].in_lanes


def _pick_lane(state: SimState, lanes: tuple[int, ...]) -> int | None:
    best, best_free = None, 0
    for lane in lanes:
        free = state.capacity[lane] - len(state.running[lane]) - len(state.queues[lane])
        if free > best_free:
            best, best_free = lane, free
    return best


def _log(state: SimState, vid: int, event: str, lane: int | None) -> None:
    if state.trace is not None:
        state.trace.append((state.clock_s, vid, event, -1 if lane is None else lane))


def tick(state: SimState) -> SimState:
    net = state.net
    clock = state.clock_s
    vehicles = state.vehicles
    running, queues = state.running, state.queues

    # 1. release and inject
    schedule = state.schedule
    while schedule and vehicles[schedule[0]].entry_time_s <= clock:
        state.pending.append(schedule.popleft())
        state.injected_total += 1
    if state.pending:
        still = []
        for vid in state.pending:
            v = vehicles[vid]
            lane = _pick_lane(state, _candidate_lanes(net, v.route, 0))
            if lane is None:
                still.append(vid)
                continue
            v.lane = lane
            v.due = clock + state.free_ticks[v.route[0]] - 1
            running[lane].append(vid)
            state.arrivals_window[lane] += 1
            _log(state, vid, "enter", lane)
        state.pending = still

    # 2. running -> queue / completion
    for lane in range(len(running)):
        seg = running[lane]
        while seg and vehicles[seg[0]].due <= clock:
            vid = seg.popleft()
            v = vehicles[vid]
            if state.exit_road[v.route[v.cursor]]:
                v.completed_at_s = float(clock + 1)
                v.lane = None
                state.completed.append(vid)
                _log(state, vid, "complete", lane)
            else:
                v.queued = True
                queues[lane].append(vid)
                _log(state, vid, "queue", lane)

    # 3. discharge
    headway = state.config.headway_s
    for i in net.real_intersections:
        if state.all_red_remaining_s[i] > 0:
            state.all_red_remaining_s[i] -= 1
            if state.all_red_remaining_s[i] == 0:
                state.active_phase[i] = state.next_phase[i]
            continue
        for lane in state.phase_lanes[i][state.active_phase[i]]:
            q = queues[lane]
            if not q or clock - state.last_discharge_tick[lane] < headway:
                continue
            v = vehicles[q[0]]
            nxt = v.cursor + 1
            dest = _pick_lane(state, _candidate_lanes(net, v.route, nxt))
            if dest is None:
                continue  # spillback: downstream lane full
            q.popleft()
            v.queued = False
            v.cursor = nxt
            v.lane = dest
            v.due = clock + state.free_ticks[v.route[nxt]]
            running[dest].append(v.id)
            state.arrivals_window[dest] += 1
            state.last_discharge_tick[lane] = clock
            _log(state, v.id, "discharge", dest)

    # 4. wait accounting
    for q in queues:
        for vid in q:
            vehicles[vid].wait_ticks += 1
    for vid in state.pending:
        vehicles[vid].wait_ticks += 1

    # 5. clock
    state.clock_s = clock + 1
    return state


def lane_vehicle_count(state: SimState, lane: int) -> int:
    if not 0 <= lane < len(state.net.lanes):
        raise UnknownEntity(f"lane {lane}")
    return len(state.running[lane]) + len(state.queues[lane])


def movement_mean_count(state: SimState, movement: int) -> float:
    if not 0 <= movement < len(state.net.movements):
        raise UnknownEntity(f"movement {movement}")
    lanes = state.net.movements[movement].in_lanes
    return sum(len(state.running[l]) + len(state.queues[l]) for l in lanes) / len(lanes)


def lane_counts(state: SimState) -> np.ndarray:
    return np.fromiter(
        (len(r) + len(q) for r, q in zip(state.running, state.queues)),
        dtype=float,
        count=len(state.running),
    )


def snapshot_arrivals(state: SimState, reset: bool = True) -> np.ndarray:
    """Vehicles that entered each movement's in-lanes since the last snapshot."""
    window = state.arrivals_window
    out = np.array(
        [int(window[list(m.in_lanes)].sum()) for m in state.net.movements], dtype=np.int64
    )
    if reset:
        window[:] = 0
    return out


def format_trace(state: SimState) -> str:
    lines = ["tick,vehicle,event,lane"]
    lines += [f"{t},{v},{e},{l}" for t, v, e, l in state.trace or ()]
    return "\n".join(lines) + "\n"
