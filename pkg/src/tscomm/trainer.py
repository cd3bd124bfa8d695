"""Shared-parameter double-dueling DQN with n-step returns.

Every real intersection is an agent; all agents read and write one parameter
store.  Each environment step the communication model (when enabled) turns
the current observations into arrival predictions for the neighbors, the
Q-network picks epsilon-greedy phases, and per-agent n-step transitions go to
a replay buffer.  Once the buffer is full, every environment step is followed
by one gradient step on the TD loss plus the two communication losses.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from collections import deque
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import harness
from . import tensor as T
from . import unicomm, unilight
from .env import AgentSpec, Observation, TrafficEnv
from .errors import BufferNotFull
from .features import make_batch
from .policy import LearnedPolicy, ModelSpec, agent_q_values, communicate, init_model
from .roadnet import Scenario
from .tensor import ParamStore

log = logging.getLogger(__name__)

PHASE_TARGETS = ("replay", "current")
LOG_COLUMNS = (
    "frame", "epsilon", "td_loss", "phase_loss", "volume_loss",
    "eval_travel_time", "eval_delay", "eval_wait_time", "eval_throughput", "train_steps",
)


@dataclass
class TrainConfig:
    total_frames: int = 240_000
    batch_size: int = 30
    buffer_size: int = 8000
    target_sync_every: int = 5
    eps_start: float = 0.9
    eps_end: float = 0.02
    eps_fraction: float = 0.3
    gamma: float = 0.8
    n_step: int = 5
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    huber_delta: float = 1.0
    lambda_td: float = 1.0
    lambda_p: float = 1.0
    lambda_v: float = 1.0
    grad_clip: float = 10.0
    seed: int = 0
    comm: str = "unicomm"
    phase_target: str = "replay"
    phase_encoding: str = "bit"
    log_every: int = 500
    eval_every: int = 0  # 0 disables periodic evaluation
    eval_episodes: int = 1

    def __post_init__(self):
        ints = ("batch_size", "buffer_size", "target_sync_every", "n_step")
        for name in ints:
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.total_frames < 0:
            raise ValueError("total_frames must be nonnegative")
        if not 0.0 <= self.eps_end <= self.eps_start <= 1.0:
            raise ValueError("need 0 <= eps_end <= eps_start <= 1")
        if not 0.0 < self.gamma <= 1.0 or self.lr <= 0:
            raise ValueError("gamma must be in (0, 1] and lr positive")
        if self.phase_target not in PHASE_TARGETS:
            raise ValueError(f"phase_target must be one of {PHASE_TARGETS}")
        if self.batch_size > self.buffer_size:
            raise ValueError("batch_size exceeds buffer_size")
        ModelSpec(self.comm, self.phase_encoding)

    @property
    def model_spec(self) -> ModelSpec:
        return ModelSpec(self.comm, self.phase_encoding)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown training options: {sorted(extra)}")
        return cls(**d)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        doc = json.loads(Path(path).read_text())
        return cls.from_dict(doc.get("train", {}))


def epsilon_at(frame: int, config: TrainConfig) -> float:
    ramp = config.eps_fraction * config.total_frames
    if ramp <= 0 or frame >= ramp:
        return config.eps_end
    return config.eps_start + (config.eps_end - config.eps_start) * frame / ramp


# ----------------------------------------------------------------- replay

@dataclass(frozen=True)
class Transition:
    agent: int
    counts: np.ndarray
    phase: int
    received: np.ndarray
    action: int
    reward: float  # n-step discounted return
    next_counts: np.ndarray
    next_phase: int
    next_received: np.ndarray
    done: bool
    permissions: np.ndarray  # executed phase, per movement
    slot_arrivals: np.ndarray  # per outgoing slot, per lane


class ReplayBuffer:
    """Fixed-capacity ring buffer; the oldest entry is overwritten first."""

    def __init__(self, capacity: int, rng: np.random.Generator):
        self.capacity = capacity
        self.items: list[Transition] = []
        self.cursor = 0
        self.rng = rng

    def __len__(self) -> int:
        return len(self.items)

    @property
    def full(self) -> bool:
        return len(self.items) == self.capacity

    def add(self, t: Transition) -> None:
        if len(self.items) < self.capacity:
            self.items.append(t)
        else:
            self.items[self.cursor] = t
        self.cursor = (self.cursor + 1) % self.capacity

    def sample(self, k: int) -> list[Transition]:
        idx = self.rng.choice(len(self.items), size=k, replace=False)
        return [self.items[i] for i in idx]


def n_step_return(rewards, gamma: float) -> float:
    total = 0.0
    for r in reversed(list(rewards)):
        total = r + gamma * total
    return total


class NStepAccumulator:
    """Per-agent sliding window turning one-step records into n-step transitions."""

    def __init__(self, n_agents: int, n: int, gamma: float):
        self.n = n
        self.gamma = gamma
        self.windows = [deque() for _ in range(n_agents)]

    def push(self, agent: int, obs: Observation, action: int, reward: float, perm, slots) -> None:
        self.windows[agent].append((obs, action, reward, perm, slots))

    def _emit(self, agent: int, next_obs: Observation, done: bool) -> Transition:
        w = self.windows[agent]
        obs, action, _, perm, slots = w[0]
        ret = n_step_return([e[2] for e in w], self.gamma)
        w.popleft()
        return Transition(
            agent, obs.movement_counts, obs.phase_index, obs.received_predictions, action, ret,
            next_obs.movement_counts, next_obs.phase_index, next_obs.received_predictions, done,
            perm, slots,
        )

    def ready(self, observations: list[Observation]) -> list[Transition]:
        """Transitions whose window is complete, bootstrapped on ``observations``."""
        out = []
        for k, w in enumerate(self.windows):
            if len(w) == self.n:
                out.append(self._emit(k, observations[k], False))
        return out

    def flush(self, observations: list[Observation]) -> list[Transition]:
        """Episode end: emit every remaining window, truncated and terminal."""
        out = []
        for k, w in enumerate(self.windows):
            while w:
                out.append(self._emit(k, observations[k], True))
        return out


# --------------------------------------------------------------- learning

@dataclass
class LossReport:
    td: float
    phase: float
    volume: float


def _batch(agents: list[AgentSpec], ts: list[Transition], nxt: bool):
    specs = [agents[t.agent] for t in ts]
    if nxt:
        return make_batch(specs, [t.next_counts for t in ts], [t.next_phase for t in ts], [t.next_received for t in ts])
    return make_batch(specs, [t.counts for t in ts], [t.phase for t in ts], [t.received for t in ts])


def td_target(
    batch_next,
    rewards: np.ndarray,
    dones: np.ndarray,
    online: ParamStore,
    target: ParamStore,
    gamma_n: float,
    spec: ModelSpec,
) -> np.ndarray:
    """Double-Q target: online network picks the action, target network values it."""
    with T.no_grad():
        q_on = unilight.q_values(online, batch_next, spec.phase_encoding, spec.max_phases).data
        q_tg = unilight.q_values(target, batch_next, spec.phase_encoding, spec.max_phases).data
    best = np.array([unilight.greedy(q) for q in batch_next.split_phases(q_on)], dtype=np.int64)
    boot = q_tg[batch_next.phase_offsets[:-1] + best]
    return rewards + (1.0 - dones) * gamma_n * boot


class Learner:
    """Online and target stores plus the gradient step."""

    def __init__(self, agents: list[AgentSpec], config: TrainConfig, store: ParamStore | None = None):
        self.agents = agents
        self.config = config
        self.spec = config.model_spec
        self.online = store if store is not None else init_model(self.spec, np.random.default_rng(config.seed))
        self.target = self.online.copy()
        self.train_steps = 0
        use_comm = self.spec.comm == "unicomm" and (config.lambda_p or config.lambda_v)
        self.names = [
            n for n in self.online.names()
            if n.startswith(unilight.PREFIX + ".") or (use_comm and n.startswith(unicomm.PREFIX + "."))
        ]

    def sync_target(self) -> None:
        self.target.load_arrays(self.online.snapshot())

    def loss(self, ts: list[Transition]):
        cfg = self.config
        bz = _batch(self.agents, ts, False)
        bn = _batch(self.agents, ts, True)
        rewards = np.array([t.reward for t in ts])
        dones = np.array([float(t.done) for t in ts])
        y = td_target(bn, rewards, dones, self.online, self.target, cfg.gamma**cfg.n_step, self.spec)

        q = unilight.q_values(self.online, bz, self.spec.phase_encoding, self.spec.max_phases)
        idx = bz.phase_offsets[:-1] + np.array([t.action for t in ts], dtype=np.int64)
        td = T.huber(T.take(q, idx), y, cfg.huber_delta)
        total = T.scale(td, cfg.lambda_td)
        lp = lv = None
        if self.spec.comm == "unicomm":
            g_rec = np.concatenate([t.permissions for t in ts])
            l_rec = np.concatenate([t.slot_arrivals for t in ts])
            phase_target = None
            if cfg.phase_target == "current":
                acts = [unilight.greedy(qi) for qi in bz.split_phases(q.data)]
                phase_target = np.concatenate(
                    [self.agents[t.agent].permissions[a] for t, a in zip(ts, acts)]
                )
            out = unicomm.forward(self.online, bz, g_rec, l_rec, phase_target)
            lp, lv = out.phase_loss, out.volume_loss
            if cfg.lambda_p:
                total = total + T.scale(lp, cfg.lambda_p)
            if cfg.lambda_v:
                total = total + T.scale(lv, cfg.lambda_v)
        report = LossReport(
            td.item(),
            float("nan") if lp is None else lp.item(),
            float("nan") if lv is None else lv.item(),
        )
        return total, report

    def train_step(self, buffer: ReplayBuffer) -> LossReport:
        if not buffer.full:
            raise BufferNotFull(f"buffer holds {len(buffer)} of {buffer.capacity}")
        cfg = self.config
        ts = buffer.sample(cfg.batch_size)
        total, report = self.loss(ts)
        self.online.zero_grad()
        total.backward()
        self.online.clip_grad_norm(cfg.grad_clip)
        T.adam_step(self.online, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps, self.names)
        self.train_steps += 1
        if self.train_steps % cfg.target_sync_every == 0:
            self.sync_target()
        return report


# ---------------------------------------------------------------- driving

@dataclass
class TrainResult:
    store: ParamStore
    log_csv: str
    meta: dict
    final_losses: LossReport | None


def _fmt(x) -> str:
    if isinstance(x, float):
        return "" if np.isnan(x) else repr(x)
    return str(x)


def run_training(scenario: Scenario, config: TrainConfig, env: TrafficEnv | None = None) -> TrainResult:
    """Train on ``scenario`` for ``config.total_frames`` joint environment steps."""
    env = env or TrafficEnv(scenario)
    seeds = np.random.SeedSequence(config.seed).spawn(3)
    act_rng = np.random.default_rng(seeds[0])
    learner = Learner(env.agents, config)
    buffer = ReplayBuffer(config.buffer_size, np.random.default_rng(seeds[1]))
    acc = NStepAccumulator(env.n_agents, config.n_step, config.gamma)
    spec = learner.spec

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(LOG_COLUMNS)
    window: list[LossReport] = []
    last: LossReport | None = None

    def write_row(frame: int, ev: harness.EpisodeMetrics | None) -> None:
        means = [
            float(np.nanmean([getattr(r, k) for r in window])) if window and not all(
                np.isnan(getattr(r, k)) for r in window) else float("nan")
            for k in ("td", "phase", "volume")
        ]
        evs = [float("nan")] * 3 + [""] if ev is None else [ev.travel_time, ev.delay, ev.wait_time, ev.throughput]
        writer.writerow([frame, _fmt(epsilon_at(frame, config)), *map(_fmt, means), *map(_fmt, evs), learner.train_steps])
        window.clear()

    obs = env.reset()
    frame = 0
    while frame < config.total_frames:
        attached = communicate(learner.online, spec, env, obs)
        for t in acc.ready(attached):
            buffer.add(t)
        eps = epsilon_at(frame, config)
        qs = agent_q_values(learner.online, spec, env.agents, attached)
        actions = [unilight.select_action(q, eps, act_rng) for q in qs]
        res = env.step(actions)
        for k in range(env.n_agents):
            acc.push(k, attached[k], actions[k], float(res.rewards[k]), res.permissions[k], res.slot_arrivals[k])
        frame += 1
        if res.done:
            for t in acc.flush(res.observations):
                buffer.add(t)
            obs = env.reset()
        else:
            obs = res.observations
        if buffer.full:
            last = learner.train_step(buffer)
            window.append(last)

        ev = None
        if config.eval_every and frame % config.eval_every == 0:
            ev = _evaluate_once(scenario, learner.online, spec, config.eval_episodes)
        if frame % config.log_every == 0 or ev is not None:
            write_row(frame, ev)
            log.info("frame %d eps %.3f train_steps %d", frame, eps, learner.train_steps)

    meta = {"model": spec.to_meta(), "train": asdict(config), "frames": frame, **spec.to_meta()}
    return TrainResult(learner.online, buf.getvalue(), meta, last)


def _evaluate_once(scenario: Scenario, store: ParamStore, spec: ModelSpec, episodes: int) -> harness.EpisodeMetrics:
    env = TrafficEnv(scenario)
    rep = harness.evaluate(LearnedPolicy(store, spec), scenario, episodes, env=env)
    e = rep.episodes
    return harness.EpisodeMetrics(
        rep.avg_travel_time_s, rep.avg_delay_s, rep.avg_wait_time_s,
        int(round(rep.throughput)), e[0].injected, e[0].in_system,
    )


def save_result(result: TrainResult, checkpoint: Path, log_path: Path | None = None) -> None:
    result.store.save(checkpoint, result.meta)
    if log_path is not None:
        Path(log_path).write_text(result.log_csv)
