"""Learned controller: UniLight Q-values, optionally fed by UniComm predictions."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from . import unicomm, unilight
from .env import AgentSpec, Observation, TrafficEnv
from .features import batch_from_observations
from .tensor import ParamStore

COMM_MODES = ("none", "unicomm")


@dataclass
class ModelSpec:
    comm: str = "unicomm"
    phase_encoding: str = "bit"
    max_phases: int = 8
    hidden: int = unilight.HIDDEN

    def __post_init__(self):
        if self.comm not in COMM_MODES:
            raise ValueError(f"unknown comm mode {self.comm!r}")
        unilight.phase_code_dims(self.phase_encoding, self.max_phases)

    def to_meta(self) -> dict:
        return {
            "comm": self.comm,
            "phase_encoding": self.phase_encoding,
            "max_phases": self.max_phases,
            "hidden": self.hidden,
        }

    @classmethod
    def from_meta(cls, meta: dict) -> "ModelSpec":
        return cls(
            comm=meta.get("comm", "unicomm"),
            phase_encoding=meta.get("phase_encoding", "bit"),
            max_phases=int(meta.get("max_phases", 8)),
            hidden=int(meta.get("hidden", unilight.HIDDEN)),
        )


def init_model(spec: ModelSpec, rng: np.random.Generator) -> ParamStore:
    store = ParamStore()
    unilight.init_params(store, rng, spec.hidden, phase_encoding=spec.phase_encoding, max_phases=spec.max_phases)
    if spec.comm == "unicomm":
        unicomm.init_params(store, rng, spec.hidden)
    return store


def communicate(
    store: ParamStore, spec: ModelSpec, env: TrafficEnv, observations: list[Observation]
) -> list[Observation]:
    """Attach neighbor arrival predictions; zeros when communication is off."""
    if spec.comm == "none":
        return [
            o if not o.received_predictions.any()
            else replace(o, received_predictions=np.zeros_like(o.received_predictions))
            for o in observations
        ]
    with T.no_grad():
        batch = batch_from_observations(env.agents, observations)
        out = unicomm.forward(store, batch)
    return env.attach_predictions(observations, batch.split_slots(out.arrivals.data))


def agent_q_values(
    store: ParamStore, spec: ModelSpec, agents: list[AgentSpec], observations: list[Observation]
) -> list[np.ndarray]:
    with T.no_grad():
        batch = batch_from_observations(agents, observations)
        q = unilight.q_values(store, batch, spec.phase_encoding, spec.max_phases)
    return batch.split_phases(q.data)


@dataclass
class LearnedPolicy:
    """Greedy (or epsilon-greedy) controller over a parameter store."""

    store: ParamStore
    spec: ModelSpec = field(default_factory=ModelSpec)
    epsilon: float = 0.0
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))
    name: str = "unilight"

    def reset(self, env: TrafficEnv) -> None:
        pass

    def act(self, env: TrafficEnv, observations: list[Observation]) -> list[int]:
        attached = communicate(self.store, self.spec, env, observations)
        qs = agent_q_values(self.store, self.spec, env.agents, attached)
        return [unilight.select_action(q, self.epsilon, self.rng) for q in qs]

    @classmethod
    def from_checkpoint(cls, path) -> "LearnedPolicy":
        store, meta = ParamStore.load(path)
        return cls(store, ModelSpec.from_meta(meta))
