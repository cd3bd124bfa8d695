"""Baseline controllers, episode metrics and the evaluation runner.

Controllers share one small interface: ``reset(env)`` at episode start and
``act(env, observations) -> list of phase ids`` at every action boundary.
The decision rules themselves are pure functions so they can be checked
against independent recomputation.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from . import microsim
from .env import AgentSpec, Observation, TrafficEnv
from .errors import InvalidCycle
from .microsim import SimState
from .roadnet import Scenario, Turn

METRIC_COLUMNS = ("controller", "comm", "seed", "travel_time", "delay", "wait_time", "throughput")


class Controller(Protocol):
    name: str

    def reset(self, env: TrafficEnv) -> None: ...

    def act(self, env: TrafficEnv, observations: list[Observation]) -> list[int]: ...


# ----------------------------------------------------------------- metrics

@dataclass(frozen=True)
class EpisodeMetrics:
    travel_time: float
    delay: float
    wait_time: float
    throughput: int
    injected: int
    in_system: int


def vehicle_records(state: SimState, horizon_s: int) -> list[tuple[float, float, float, bool]]:
    """(travel, delay, wait, completed) for every vehicle released before the horizon.

    A vehicle still in the network (or still waiting to enter) at the horizon
    is charged the time from its entry up to the horizon.
    """
    out = []
    for v in state.vehicles:
        if v.entry_time_s >= state.clock_s:
            continue  # never released
        done = v.completed_at_s is not None
        end = v.completed_at_s if done else float(horizon_s)
        travel = end - v.entered_at_s
        delay = max(0.0, travel - v.expected_free_travel_s)
        out.append((travel, delay, float(v.wait_ticks), done))
    return out


def episode_metrics(state: SimState, horizon_s: int) -> EpisodeMetrics:
    recs = vehicle_records(state, horizon_s)
    if not recs:
        return EpisodeMetrics(0.0, 0.0, 0.0, 0, state.injected_total, state.in_system)
    arr = np.array([r[:3] for r in recs])
    return EpisodeMetrics(
        travel_time=float(arr[:, 0].mean()),
        delay=float(arr[:, 1].mean()),
        wait_time=float(arr[:, 2].mean()),
        throughput=len(state.completed),
        injected=state.injected_total,
        in_system=state.in_system,
    )


def check_identities(state: SimState, horizon_s: int) -> list[str]:
    """Violated metric identities, empty when all hold."""
    bad = []
    if len(state.completed) + state.in_system != state.injected_total:
        bad.append("throughput + in_system != injected")
    for travel, delay, wait, _ in vehicle_records(state, horizon_s):
        if delay < 0:
            bad.append("negative delay")
        if wait > travel:
            bad.append("wait exceeds travel")
        if delay > travel:
            bad.append("delay exceeds travel")
    return sorted(set(bad))


@dataclass
class MetricReport:
    controller: str
    comm: str
    episodes: list[EpisodeMetrics]
    seeds: list[int]

    def _stat(self, attr: str, fn) -> float:
        vals = [getattr(e, attr) for e in self.episodes]
        return float(fn(vals)) if vals else 0.0

    @property
    def avg_travel_time_s(self) -> float:
        return self._stat("travel_time", np.mean)

    @property
    def avg_delay_s(self) -> float:
        return self._stat("delay", np.mean)

    @property
    def avg_wait_time_s(self) -> float:
        return self._stat("wait_time", np.mean)

    @property
    def throughput(self) -> float:
        return self._stat("throughput", np.mean)

    def std(self) -> dict[str, float]:
        # shifted by the first value so identical episodes give exactly 0
        return {
            a: self._stat(a, lambda v: np.std(np.asarray(v, dtype=float) - v[0]))
            for a in ("travel_time", "delay", "wait_time", "throughput")
        }

    def rows(self) -> list[dict]:
        return [
            {
                "controller": self.controller,
                "comm": self.comm,
                "seed": s,
                "travel_time": repr(e.travel_time),
                "delay": repr(e.delay),
                "wait_time": repr(e.wait_time),
                "throughput": e.throughput,
            }
            for s, e in zip(self.seeds, self.episodes)
        ]

    def to_csv(self) -> str:
        return rows_to_csv(self.rows())


def rows_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=METRIC_COLUMNS, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


# ------------------------------------------------------------- controllers

TIE_TOL = 1e-9


def _first_best(scores: np.ndarray) -> int:
    """Lowest index whose score is within rounding of the maximum."""
    return int(np.flatnonzero(scores >= scores.max() - TIE_TOL)[0])


def _non_right(agent: AgentSpec) -> np.ndarray:
    return (agent.turns != int(Turn.RIGHT)).astype(float)


class FixedTimeController:
    """Cycles a fixed list of (phase, duration_s) at every intersection."""

    name = "fixed"

    def __init__(self, cycle: Sequence[tuple[int, int]] | None = None, green_s: int = 30):
        self.cycle = None if cycle is None else [(int(p), int(d)) for p, d in cycle]
        self.green_s = green_s
        self._plans: list[list[int]] = []
        self._step = 0

    def reset(self, env: TrafficEnv) -> None:
        dt = env.sim_config.action_interval_s
        self._plans = []
        for a in env.agents:
            cycle = self.cycle if self.cycle is not None else [(p, self.green_s) for p in range(a.n_phases)]
            self._plans.append(expand_cycle(cycle, dt, a.n_phases))
        self._step = 0

    def act(self, env: TrafficEnv, observations: list[Observation]) -> list[int]:
        out = [plan[self._step % len(plan)] for plan in self._plans]
        self._step += 1
        return out


def expand_cycle(cycle: Sequence[tuple[int, int]], interval_s: int, n_phases: int) -> list[int]:
    """One phase id per action step over a full cycle."""
    if not cycle:
        raise InvalidCycle("empty cycle")
    steps = []
    for p, d in cycle:
        if not 0 <= p < n_phases:
            raise InvalidCycle(f"phase {p} outside 0..{n_phases - 1}")
        if d <= 0 or d % interval_s:
            raise InvalidCycle(f"duration {d} s is not a positive multiple of {interval_s} s")
        steps += [p] * (d // interval_s)
    return steps


def sotl_decision(
    counts: np.ndarray,
    permissions: np.ndarray,
    non_right: np.ndarray,
    current: int,
    elapsed_s: int,
    theta_keep: float,
    max_green_s: int,
) -> int:
    """Self-organizing rule on permitted non-right demand per phase.

    At max-green expiry the busiest other phase wins, ties broken in cyclic
    order after the current phase.  Otherwise the current phase is kept while
    its demand reaches ``theta_keep``, and below that it yields only to a
    strictly busier phase (lowest index among the busiest).
    """
    demand = (permissions * non_right) @ counts
    n = len(demand)
    if elapsed_s >= max_green_s and n > 1:
        order = [(current + k) % n for k in range(1, n)]
        top = max(demand[p] for p in order)
        return next(p for p in order if demand[p] >= top - TIE_TOL)
    if demand[current] >= theta_keep - TIE_TOL:
        return current
    best = _first_best(demand)
    return best if demand[best] > demand[current] + TIE_TOL else current


class SOTLController:
    name = "sotl"

    def __init__(self, theta_keep: float = 2.0, max_green_s: int = 60):
        self.theta_keep = theta_keep
        self.max_green_s = max_green_s
        self._elapsed: list[int] = []

    def reset(self, env: TrafficEnv) -> None:
        self._elapsed = [0] * env.n_agents

    def act(self, env: TrafficEnv, observations: list[Observation]) -> list[int]:
        dt = env.sim_config.action_interval_s
        out = []
        for k, (a, o) in enumerate(zip(env.agents, observations)):
            cur = o.phase_index
            p = sotl_decision(
                o.movement_counts, a.permissions, _non_right(a), cur,
                self._elapsed[k], self.theta_keep, self.max_green_s,
            )
            self._elapsed[k] = self._elapsed[k] + dt if p == cur else dt
            out.append(p)
        return out


def movement_pressures(
    state: SimState, movements: Sequence[int], counts: np.ndarray | None = None
) -> np.ndarray:
    """Mean in-lane count minus mean out-lane count (out is 0 on exit roads).

    ``counts`` overrides the per-lane vehicle counts read from ``state``.
    """
    net = state.net
    counts = microsim.lane_counts(state) if counts is None else counts
    out = np.zeros(len(movements))
    for j, m in enumerate(movements):
        mv = net.movements[m]
        up = counts[list(mv.in_lanes)].mean()
        down = 0.0 if net.is_exit_road(mv.downstream_road) else counts[list(mv.out_lanes)].mean()
        out[j] = up - down
    return out


def max_pressure_decision(pressures: np.ndarray, permissions: np.ndarray, non_right: np.ndarray) -> int:
    return _first_best((permissions * non_right) @ pressures)


class MaxPressureController:
    name = "maxpressure"

    def reset(self, env: TrafficEnv) -> None:
        pass

    def act(self, env: TrafficEnv, observations: list[Observation]) -> list[int]:
        return [
            max_pressure_decision(movement_pressures(env.state, a.movements), a.permissions, _non_right(a))
            for a in env.agents
        ]


# -------------------------------------------------------------- evaluation

@dataclass
class EpisodeRun:
    metrics: EpisodeMetrics
    actions: list[list[int]] = field(default_factory=list)
    identity_violations: list[str] = field(default_factory=list)


def run_episode(
    env: TrafficEnv, controller: Controller, seed: int | None = None, record_actions: bool = False
) -> EpisodeRun:
    obs = env.reset(seed)
    controller.reset(env)
    actions = []
    while not env.done:
        a = controller.act(env, obs)
        if record_actions:
            actions.append(list(a))
        obs = env.step(a).observations
    return EpisodeRun(
        episode_metrics(env.state, env.horizon_s),
        actions,
        check_identities(env.state, env.horizon_s),
    )


def evaluate(
    controller: Controller,
    scenario: Scenario,
    episodes: int = 10,
    seed: int = 0,
    comm: str = "none",
    env: TrafficEnv | None = None,
) -> MetricReport:
    """Run ``episodes`` seeded greedy episodes and collect per-episode metrics."""
    env = env or TrafficEnv(scenario)
    runs, seeds = [], []
    for k in range(episodes):
        s = seed + k
        runs.append(run_episode(env, controller, s).metrics)
        seeds.append(s)
    return MetricReport(getattr(controller, "name", type(controller).__name__), comm, runs, seeds)


def make_baseline(name: str, **kwargs) -> Controller:
    if name == "fixed":
        return FixedTimeController(**kwargs)
    if name == "sotl":
        return SOTLController(**kwargs)
    if name == "maxpressure":
        return MaxPressureController()
    raise ValueError(f"unknown baseline {name!r}")


def improvement(base: float, other: float) -> float:
    """Relative reduction of ``other`` against ``base`` (0.1 means 10% lower)."""
    return 0.0 if base == 0 or math.isnan(base) else (base - other) / base
