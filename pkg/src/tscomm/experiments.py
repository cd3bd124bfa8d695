"""Desk-scale study protocols shared by the CLI and the acceptance suite.

Both studies train on one small synthetic grid with several seeds and compare
medians, since single runs of the learner are noisy.
"""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass, field, replace

from . import harness, roadnet
from .env import TrafficEnv
from .policy import LearnedPolicy
from .roadnet import Scenario
from .trainer import TrainConfig, TrainResult, run_training

DESK_FRAMES = 20_000
DESK_SEEDS = (0, 1, 2)


def desk_scenario(seed: int = 7) -> Scenario:
    """2 x 2 grid, 3 lanes per approach, 300 m roads, 150-450 veh/h per entry."""
    return roadnet.parse_scenario(roadnet.generate_grid(2, 2, seed=seed))


def desk_config(**overrides) -> TrainConfig:
    return TrainConfig(**{"total_frames": DESK_FRAMES, "log_every": 250, **overrides})


@dataclass
class RunOutcome:
    seed: int
    result: TrainResult
    report: harness.MetricReport
    violations: list[str]
    seconds: float = 0.0

    @property
    def travel_time(self) -> float:
        return self.report.avg_travel_time_s

    def final_phase_loss(self, last_rows: int = 4) -> float:
        """Mean logged phase loss over the last ``last_rows`` log rows."""
        rows = [r.split(",") for r in self.result.log_csv.strip().splitlines()[1:]]
        vals = [float(r[3]) for r in rows if r[3]][-last_rows:]
        return sum(vals) / len(vals) if vals else float("nan")


def train_and_evaluate(scenario: Scenario, config: TrainConfig, episodes: int = 1) -> RunOutcome:
    start = time.perf_counter()
    result = run_training(scenario, config)
    policy = LearnedPolicy(result.store, config.model_spec)
    env = TrafficEnv(scenario)
    violations: list[str] = []
    runs, seeds = [], []
    for k in range(episodes):
        run = harness.run_episode(env, policy, config.seed + k)
        runs.append(run.metrics)
        seeds.append(config.seed + k)
        violations += run.identity_violations
    report = harness.MetricReport("unilight", config.comm, runs, seeds)
    return RunOutcome(config.seed, result, report, sorted(set(violations)), time.perf_counter() - start)


@dataclass
class Study:
    outcomes: dict[str, list[RunOutcome]] = field(default_factory=dict)
    baselines: dict[str, harness.MetricReport] = field(default_factory=dict)
    baseline_violations: list[str] = field(default_factory=list)
    baseline_seconds: float = 0.0

    def median_travel(self, key: str) -> float:
        if key in self.baselines:
            return self.baselines[key].avg_travel_time_s
        return statistics.median(o.travel_time for o in self.outcomes[key])

    def median_phase_loss(self, key: str) -> float:
        return statistics.median(o.final_phase_loss() for o in self.outcomes[key])

    def seconds(self, keys=None) -> float:
        keys = self.outcomes if keys is None else keys
        return sum(o.seconds for k in keys for o in self.outcomes[k])

    def violations(self) -> list[str]:
        bad = list(self.baseline_violations)
        for runs in self.outcomes.values():
            for o in runs:
                bad += o.violations
        return sorted(set(bad))

    def rows(self) -> list[dict]:
        out = []
        for rep in self.baselines.values():
            out += rep.rows()
        for runs in self.outcomes.values():
            for o in runs:
                out += [dict(r, seed=o.seed) for r in o.report.rows()]
        return out


def phase_target_study(
    scenario: Scenario, base: TrainConfig, seeds=DESK_SEEDS, reuse: Study | None = None
) -> Study:
    """Final phase-prediction loss with replay-recorded vs current-action targets.

    A replay-target UniComm run already present in ``reuse`` is not retrained.
    """
    study = Study()
    for target in ("replay", "current"):
        if reuse is not None and target == "replay" and "unicomm" in reuse.outcomes:
            study.outcomes[target] = reuse.outcomes["unicomm"]
            continue
        study.outcomes[target] = [
            train_and_evaluate(scenario, replace(base, comm="unicomm", phase_target=target, seed=s))
            for s in seeds
        ]
    return study


def comm_study(
    scenario: Scenario,
    base: TrainConfig,
    seeds=DESK_SEEDS,
    baselines=("fixed", "sotl", "maxpressure"),
) -> Study:
    """UniLight with and without UniComm against the rule-based baselines."""
    study = Study()
    env = TrafficEnv(scenario)
    start = time.perf_counter()
    for name in baselines:
        ctrl = harness.make_baseline(name)
        run = harness.run_episode(env, ctrl, base.seed)
        study.baselines[name] = harness.MetricReport(name, "none", [run.metrics], [base.seed])
        study.baseline_violations += run.identity_violations
    study.baseline_seconds = time.perf_counter() - start
    for comm in ("none", "unicomm"):
        study.outcomes[comm] = [
            train_and_evaluate(scenario, replace(base, comm=comm, phase_target="replay", seed=s))
            for s in seeds
        ]
    return study
