"""Multi-agent environment over the simulator.

One agent per real intersection.  Every ``step`` applies one phase per agent,
advances the action interval and returns per-agent rewards (minus the mean
lane-normalized vehicle count over the agent's movements), the joint reward,
and the recorded permissions and arrivals that train the communication model.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import microsim
from .errors import EpisodeFinished, InvalidAction, ShapeMismatch
from .microsim import SignalCommand, SimConfig
from .roadnet import Kind, RoadNetwork, Scenario


@dataclass(frozen=True)
class AgentSpec:
    """Static per-intersection structure shared by observations and models.

    ``slots`` are the outgoing prediction targets: one per movement of a real
    downstream intersection whose upstream road leaves this intersection.
    ``slot_incidence[s, j]`` is the lane ratio with which local movement ``j``
    feeds slot ``s`` (zero when it does not).
    """

    index: int
    intersection: int
    movements: tuple[int, ...]
    turns: np.ndarray  # (m,) int
    in_lanes: np.ndarray  # (m,) lane counts
    permissions: np.ndarray  # (phases, m) 0/1
    slots: tuple[tuple[int, int], ...]  # (downstream agent, its local movement)
    slot_incidence: np.ndarray  # (slots, m)
    upstream_slot: tuple[tuple[int, int] | None, ...]  # per local movement

    @property
    def n_movements(self) -> int:
        return len(self.movements)

    @property
    def n_phases(self) -> int:
        return self.permissions.shape[0]


@dataclass(frozen=True)
class Observation:
    agent: int
    movement_counts: np.ndarray
    current_phase: np.ndarray  # one-hot over the phase table
    turn_tags: np.ndarray
    received_predictions: np.ndarray

    @property
    def phase_index(self) -> int:
        return int(np.argmax(self.current_phase))


@dataclass
class StepResult:
    rewards: np.ndarray
    joint_reward: float
    observations: list[Observation]
    done: bool
    arrivals: list[np.ndarray]  # raw entries per incoming movement, per agent
    permissions: list[np.ndarray]  # executed-phase permission bits, per agent
    slot_arrivals: list[np.ndarray]  # lane-normalized entries per outgoing slot, per agent


def build_agents(net: RoadNetwork) -> list[AgentSpec]:
    real = net.real_intersections
    agent_of = {x: k for k, x in enumerate(real)}
    local = {}
    for k, x in enumerate(real):
        for j, m in enumerate(net.movements_at[x]):
            local[m] = (k, j)

    slot_lists: list[list[tuple[int, int]]] = []
    for x in real:
        slots = []
        for r in net.intersections[x].outgoing_roads:
            down = net.roads[r].to
            if net.intersections[down].kind is not Kind.REAL:
                continue
            for m in net.movements_at[down]:
                if net.movements[m].upstream_road == r:
                    slots.append(local[m])
        slot_lists.append(slots)
    slot_index = {s: (k, n) for k, slots in enumerate(slot_lists) for n, s in enumerate(slots)}

    agents = []
    for k, x in enumerate(real):
        mvs = net.movements_at[x]
        mv = [net.movements[m] for m in mvs]
        perms = np.array(
            [[1.0 if m in p.permitted else 0.0 for m in mvs] for p in net.phases[x]]
        )
        slots = slot_lists[k]
        inc = np.zeros((len(slots), len(mvs)))
        for s, (dk, dj) in enumerate(slots):
            target = net.movements[net.movements_at[real[dk]][dj]]
            for j, m in enumerate(mv):
                if m.downstream_road == target.upstream_road:
                    inc[s, j] = len(m.in_lanes) / len(target.in_lanes)
        upstream = []
        for j in range(len(mvs)):
            src = net.roads[mv[j].upstream_road].from_
            upstream.append(slot_index[(k, j)] if src in agent_of else None)
        agents.append(AgentSpec(
            index=k,
            intersection=x,
            movements=tuple(mvs),
            turns=np.array([int(m.turn) for m in mv], dtype=np.int64),
            in_lanes=np.array([len(m.in_lanes) for m in mv], dtype=float),
            permissions=perms,
            slots=tuple(slots),
            slot_incidence=inc,
            upstream_slot=tuple(upstream),
        ))
    return agents


class TrafficEnv:
    """Decentralized signal-control environment for one scenario."""

    def __init__(
        self,
        scenario: Scenario,
        sim_config: SimConfig | None = None,
        horizon_s: int | None = None,
        trace: bool = False,
    ):
        self.scenario = scenario
        self.net = scenario.net
        self.sim_config = sim_config or SimConfig()
        self.horizon_s = int(horizon_s if horizon_s is not None else scenario.time_span_s)
        self.trace = trace
        self.agents = build_agents(self.net)
        self.state: microsim.SimState | None = None
        self.done = True

        n_mv = len(self.net.movements)
        flat, offsets = [], []
        for m in self.net.movements:
            offsets.append(len(flat))
            flat.extend(m.in_lanes)
        self._mv_lanes = np.array(flat, dtype=np.int64)
        self._mv_offsets = np.array(offsets, dtype=np.int64)
        self._mv_nlanes = np.array([len(m.in_lanes) for m in self.net.movements], dtype=float)
        self._agent_mv = [np.array(a.movements, dtype=np.int64) for a in self.agents]
        assert n_mv == len(self._mv_offsets)

    @property
    def n_agents(self) -> int:
        return len(self.agents)

    @property
    def n_steps(self) -> int:
        return self.horizon_s // self.sim_config.action_interval_s

    # ------------------------------------------------------------- episode

    def reset(self, seed: int | None = None) -> list[Observation]:
        seed = self.scenario.seed if seed is None else seed
        self.state = microsim.new_state(
            self.net, self.scenario.flows, self.sim_config, seed=seed, trace=self.trace
        )
        self.done = self.horizon_s <= 0
        return self.observe()

    def movement_means(self) -> np.ndarray:
        counts = microsim.lane_counts(self.state)
        if len(self._mv_lanes) == 0:
            return np.zeros(0)
        return np.add.reduceat(counts[self._mv_lanes], self._mv_offsets) / self._mv_nlanes

    def observe(self) -> list[Observation]:
        means = self.movement_means()
        obs = []
        for a, mv in zip(self.agents, self._agent_mv):
            phase = np.zeros(a.n_phases)
            phase[self.state.next_phase[a.intersection]] = 1.0
            obs.append(Observation(a.index, means[mv], phase, a.turns, np.zeros(a.n_movements)))
        return obs

    def step(self, actions: Sequence[int]) -> StepResult:
        if self.state is None or self.done:
            raise EpisodeFinished("call reset() before stepping")
        if len(actions) != self.n_agents:
            raise InvalidAction(f"expected {self.n_agents} actions, got {len(actions)}")
        state = self.state
        for a, act in zip(self.agents, actions):
            if not (isinstance(act, (int, np.integer)) and 0 <= act < a.n_phases):
                raise InvalidAction(f"agent {a.index}: phase {act!r} out of range")
            microsim.set_phase(state, SignalCommand(a.intersection, int(act)))
        state.arrivals_window[:] = 0
        for _ in range(self.sim_config.action_interval_s):
            microsim.tick(state)
        arrivals_all = microsim.snapshot_arrivals(state)

        obs = self.observe()
        rewards = np.array([-float(o.movement_counts.mean()) if len(o.movement_counts) else 0.0 for o in obs])
        self.done = state.clock_s >= self.horizon_s
        arrivals = [arrivals_all[mv] for mv in self._agent_mv]
        perms = [a.permissions[int(act)].copy() for a, act in zip(self.agents, actions)]
        return StepResult(
            rewards=rewards,
            joint_reward=float(rewards.sum()),
            observations=obs,
            done=self.done,
            arrivals=arrivals,
            permissions=perms,
            slot_arrivals=self.slot_targets(arrivals),
        )

    # ------------------------------------------------------- communication

    def slot_targets(self, arrivals: list[np.ndarray]) -> list[np.ndarray]:
        """Per-lane arrivals at every agent's outgoing slots."""
        out = []
        for a in self.agents:
            vals = [
                arrivals[dk][dj] / self.agents[dk].in_lanes[dj] for dk, dj in a.slots
            ]
            out.append(np.array(vals, dtype=float))
        return out

    def attach_predictions(
        self, observations: list[Observation], predictions: Sequence[np.ndarray]
    ) -> list[Observation]:
        """Route each agent's outgoing-slot predictions onto its neighbors' inputs."""
        if len(predictions) != self.n_agents:
            raise ShapeMismatch(f"need predictions for {self.n_agents} agents, got {len(predictions)}")
        for a, p in zip(self.agents, predictions):
            if np.shape(p) != (len(a.slots),):
                raise ShapeMismatch(f"agent {a.index}: expected {len(a.slots)} slot predictions")
        out = []
        for o, a in zip(observations, self.agents):
            recv = np.zeros(a.n_movements)
            for j, src in enumerate(a.upstream_slot):
                if src is not None:
                    recv[j] = predictions[src[0]][src[1]]
            out.append(replace(o, received_predictions=recv))
        return out
