"""Command line: scenario generation, training, evaluation, comparison, traces."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import experiments, harness, microsim, roadnet
from .env import TrafficEnv
from .policy import LearnedPolicy
from .trainer import TrainConfig, run_training, save_result

CONTROLLERS = ("fixed", "sotl", "maxpressure", "unilight")


def _write(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _train_config(args) -> TrainConfig:
    cfg = TrainConfig.from_file(args.config) if args.config else TrainConfig()
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if getattr(args, "comm", None):
        over["comm"] = args.comm
    if getattr(args, "phase_target", None):
        over["phase_target"] = args.phase_target
    if getattr(args, "frames", None) is not None:
        over["total_frames"] = args.frames
    return replace(cfg, **over)


def _controller(args):
    if args.controller == "unilight":
        if not args.checkpoint:
            raise SystemExit("--controller unilight needs --checkpoint")
        return LearnedPolicy.from_checkpoint(args.checkpoint)
    return harness.make_baseline(args.controller)


def cmd_gen(args) -> int:
    plan = roadnet.FlowPlan(time_span_s=args.time_span, rate_vph=(args.rate_lo, args.rate_hi))
    text = roadnet.generate_grid(
        args.rows, args.cols, lane_plan=args.lanes, lengths_m=args.length,
        flow_plan=plan, seed=args.seed or 0,
    )
    _write(text, args.out)
    return 0


def cmd_train(args) -> int:
    scenario = roadnet.load_scenario(args.scenario)
    cfg = _train_config(args)
    result = run_training(scenario, cfg)
    out = Path(args.out or "model.ckpt")
    save_result(result, out, args.log or out.with_suffix(".csv"))
    return 0


def cmd_eval(args) -> int:
    scenario = roadnet.load_scenario(args.scenario)
    ctrl = _controller(args)
    comm = ctrl.spec.comm if isinstance(ctrl, LearnedPolicy) else "none"
    rep = harness.evaluate(ctrl, scenario, args.episodes, args.seed or 0, comm=comm)
    _write(rep.to_csv(), args.out)
    s = rep.std()
    logging.info(
        "%s travel %.2f+-%.2f delay %.2f wait %.2f throughput %.1f",
        rep.controller, rep.avg_travel_time_s, s["travel_time"], rep.avg_delay_s,
        rep.avg_wait_time_s, rep.throughput,
    )
    return 0


def cmd_compare(args) -> int:
    scenario = roadnet.load_scenario(args.scenario) if args.scenario else experiments.desk_scenario()
    base = _train_config(args) if args.config else experiments.desk_config()
    if args.frames is not None:
        base = replace(base, total_frames=args.frames)
    seeds = tuple(range(args.seed or 0, (args.seed or 0) + args.seeds))
    study = experiments.comm_study(scenario, base, seeds)
    _write(harness.rows_to_csv(study.rows()), args.out)
    for key in ("fixed", "sotl", "maxpressure", "none", "unicomm"):
        logging.info("%-12s median travel %.2f", key, study.median_travel(key))
    return 0


def cmd_trace(args) -> int:
    scenario = roadnet.load_scenario(args.scenario)
    env = TrafficEnv(scenario, trace=True, horizon_s=args.horizon)
    ctrl = _controller(args)
    harness.run_episode(env, ctrl, args.seed)
    _write(microsim.format_trace(env.state), args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tscomm", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, scenario=True):
        if scenario:
            sp.add_argument("--scenario", required=True)
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", default=None)

    g = sub.add_parser("gen", help="generate a grid scenario")
    common(g, scenario=False)
    g.add_argument("--rows", type=int, default=2)
    g.add_argument("--cols", type=int, default=2)
    g.add_argument("--lanes", type=int, default=3)
    g.add_argument("--length", type=float, default=300.0)
    g.add_argument("--rate-lo", type=float, default=150.0)
    g.add_argument("--rate-hi", type=float, default=450.0)
    g.add_argument("--time-span", type=int, default=1800)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train UniLight (optionally with UniComm)")
    common(t)
    t.add_argument("--config", default=None, help="JSON document with a 'train' section")
    t.add_argument("--comm", choices=("none", "unicomm"), default=None)
    t.add_argument("--phase-target", choices=("replay", "current"), default=None)
    t.add_argument("--frames", type=int, default=None)
    t.add_argument("--log", default=None, help="training log CSV (default: next to checkpoint)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a baseline or a checkpoint")
    common(e)
    e.add_argument("--controller", choices=CONTROLLERS, default="fixed")
    e.add_argument("--checkpoint", default=None)
    e.add_argument("--episodes", type=int, default=10)
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("compare", help="baselines vs UniLight with and without UniComm")
    c.add_argument("--scenario", default=None, help="defaults to the built-in 2x2 grid")
    c.add_argument("--seed", type=int, default=None)
    c.add_argument("--out", default=None)
    c.add_argument("--config", default=None)
    c.add_argument("--frames", type=int, default=None)
    c.add_argument("--seeds", type=int, default=3)
    c.set_defaults(func=cmd_compare)

    r = sub.add_parser("trace", help="dump per-tick vehicle events")
    common(r)
    r.add_argument("--controller", choices=CONTROLLERS, default="fixed")
    r.add_argument("--checkpoint", default=None)
    r.add_argument("--horizon", type=int, default=None)
    r.set_defaults(func=cmd_trace)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.command == "eval":
        logging.getLogger().setLevel(logging.INFO)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
