"""Command-line entry point: ``unpredctl {solve,rollout,attack,experiment,diff}``.

Exit codes: 0 success, 2 invalid configuration, 3 solver degeneracy,
4 over-constrained input bound.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from .adversary import AttackerConfig, attack_run, write_report_csv
from .dp import backward_solve, value_function
from .errors import (
    CapacityError,
    OverConstrainedError,
    ParameterError,
    ShapeError,
    SolverDegeneracyError,
)
from .experiments import (
    PRESETS,
    ExperimentConfig,
    constrained_policy,
    diff_policies,
    dump_policy,
    run_experiment,
    schedule_from_document,
    write_diff_csv,
)
from .rollout import MEASUREMENT, RandomSource, propagate_moments, rollout, write_trajectories_csv
from .system import B_CONVENTIONS, scalar_benchmark, scenario_from_dict, validate

SEED_ENV = "UNPRED_SEED"

log = logging.getLogger("unpredctl")


class ConfigError(Exception):
    pass


def _load_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None


def resolve_seed(cli_seed, config_seed=None) -> int:
    """``--seed`` beats ``$UNPRED_SEED`` beats the config file, default 0."""
    if cli_seed is not None:
        return int(cli_seed)
    env = os.environ.get(SEED_ENV)
    if env not in (None, ""):
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"{SEED_ENV}={env!r} is not an integer") from None
    return int(config_seed) if config_seed is not None else 0


def _scenario(args):
    if args.config:
        scn = scenario_from_dict(_load_json(args.config))
    else:
        scn = scalar_benchmark(
            x0=args.x0,
            T=args.T,
            N=args.N,
            lambda1=args.lambda1,
            lambda2=args.lambda2,
            lambda3=args.lambda3,
            b_convention=args.b_convention,
            input_bound=args.input_bound,
        )
    if args.tau is not None:
        scn = scn.replace(tau=args.tau)
    report = validate(scn)
    if not report.ok:
        raise ConfigError(f"invalid scenario: {report}")
    return scn


def _policy(scn, schedule, args):
    if scn.input_bound is None:
        return schedule
    return constrained_policy(scn, schedule, args.constrained_mode)


def cmd_solve(args):
    scn = _scenario(args)
    schedule = backward_solve(scn)
    _, breakdown = propagate_moments(scn, schedule)
    out = {
        "value_x0": value_function(schedule, scn.x0, 0),
        "expected_cost": breakdown.as_dict(),
        "sigma2": schedule.sigma2_seq.tolist(),
    }
    cpol = None
    if scn.input_bound is not None and args.constrained_mode == "enumerate":
        cpol = constrained_policy(scn, schedule, "enumerate")
        out["constrained"] = {
            "feasible": cpol.feasible,
            "modes": cpol.assignment.modes.tolist(),
            "expected_cost": propagate_moments(scn, cpol)[1].as_dict(),
        }
    if args.dump_policy:
        dump_policy(args.dump_policy, schedule, cpol)
    json.dump(out, sys.stdout, indent=2)
    sys.stdout.write("\n")


def _rollouts(args):
    scn = _scenario(args)
    schedule = backward_solve(scn)
    policy = _policy(scn, schedule, args)
    source = RandomSource(resolve_seed(args.seed))
    trajs = [rollout(scn, policy, source.stream(r)) for r in range(args.runs)]
    if args.dump_policy:
        dump_policy(args.dump_policy, schedule, policy if policy is not schedule else None)
    return scn, source, trajs


def cmd_rollout(args):
    _, _, trajs = _rollouts(args)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "trajectories.csv")
    write_trajectories_csv(path, trajs)
    print(path)


def cmd_attack(args):
    scn, source, trajs = _rollouts(args)
    cfg = AttackerConfig(obs_noise_var=args.obs_noise)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "predictions.csv")
    reports = []
    for r, tr in enumerate(trajs):
        rep = attack_run(tr, cfg, scn.system, source.stream(r, MEASUREMENT))
        write_report_csv(path, rep, run=r, mode="w" if r == 0 else "a")
        reports.append(rep)
    summary = {
        "avg_error": float(np.mean([r.avg_error for r in reports])),
        "max_error": float(np.mean([r.max_error for r in reports])),
        "avg_sq_error": float(np.mean([r.avg_sq_error for r in reports])),
        "seeds": {"master_seed": source.master_seed, "runs": len(reports)},
    }
    with open(os.path.join(args.out, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2)
    json.dump(summary, sys.stdout, indent=2)
    sys.stdout.write("\n")


def cmd_experiment(args):
    d = _load_json(args.config) if args.config else {}
    if args.preset:
        d["preset"] = args.preset
    d["master_seed"] = resolve_seed(args.seed, d.get("master_seed"))
    if args.runs is not None:
        d["runs"] = args.runs
    if args.out:
        d["output_dir"] = args.out
    if args.b_convention_set:
        d["b_convention"] = args.b_convention
    if args.tau is not None:
        d["tau"] = args.tau
    if args.constrained_mode_set:
        d["constrained_mode"] = args.constrained_mode
    config = ExperimentConfig.from_dict(d)
    for f in run_experiment(config):
        print(f)


def _schedule_from_path(path):
    doc = _load_json(path)
    if isinstance(doc, dict) and "steps" in doc:
        return schedule_from_document(doc)
    scn = scenario_from_dict(doc)
    report = validate(scn)
    if not report.ok:
        raise ConfigError(f"invalid scenario in {path}: {report}")
    return backward_solve(scn)


def cmd_diff(args):
    a, b = _schedule_from_path(args.a), _schedule_from_path(args.b)
    rows = diff_policies(a, b, threshold=args.threshold)
    if args.out:
        with open(args.out, "w", newline="") as fh:
            write_diff_csv(fh, rows)
    else:
        write_diff_csv(sys.stdout, rows)


class _Flag(argparse.Action):
    """Store a value and remember that it was given explicitly."""

    def __call__(self, parser, ns, values, option_string=None):
        setattr(ns, self.dest, values)
        setattr(ns, self.dest + "_set", True)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="unpredctl", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def scenario_opts(sp):
        sp.add_argument("--config", help="scenario JSON; default is the scalar benchmark")
        sp.add_argument("--b-convention", choices=B_CONVENTIONS, default="dt", action=_Flag)
        sp.add_argument("--tau", type=float)
        sp.add_argument("--x0", type=float, default=20.0)
        sp.add_argument("--T", type=float, default=10.0)
        sp.add_argument("--N", type=int, default=50)
        sp.add_argument("--lambda1", type=float, default=5.0)
        sp.add_argument("--lambda2", type=float, default=1.0)
        sp.add_argument("--lambda3", type=float, default=0.5)
        sp.add_argument("--input-bound", type=float)
        sp.add_argument(
            "--constrained-mode", choices=("enumerate", "online"), default="enumerate", action=_Flag
        )
        sp.add_argument("--dump-policy", metavar="PATH")

    def run_opts(sp, runs=1):
        sp.add_argument("--seed", type=int)
        sp.add_argument("--runs", type=int, default=runs)
        sp.add_argument("--out", default="out")

    sp = sub.add_parser("solve", help="solve and print expected cost")
    scenario_opts(sp)
    sp.set_defaults(func=cmd_solve)

    sp = sub.add_parser("rollout", help="simulate seeded closed-loop runs")
    scenario_opts(sp)
    run_opts(sp)
    sp.set_defaults(func=cmd_rollout)

    sp = sub.add_parser("attack", help="rollouts scored by the Kalman-filter attacker")
    scenario_opts(sp)
    run_opts(sp)
    sp.add_argument("--obs-noise", type=float, default=0.5)
    sp.set_defaults(func=cmd_attack)

    sp = sub.add_parser("experiment", help="run a preset sweep")
    sp.add_argument("preset", nargs="?", choices=PRESETS)
    sp.add_argument("--config", help="experiment config JSON")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--runs", type=int)
    sp.add_argument("--out")
    sp.add_argument("--b-convention", choices=B_CONVENTIONS, default="dt", action=_Flag)
    sp.add_argument("--tau", type=float)
    sp.add_argument(
        "--constrained-mode", choices=("enumerate", "online"), default="enumerate", action=_Flag
    )
    sp.set_defaults(func=cmd_experiment)

    sp = sub.add_parser("diff", help="per-step differences of two policies")
    sp.add_argument("a", help="scenario JSON or dumped policy JSON")
    sp.add_argument("b")
    sp.add_argument("--threshold", type=float, default=1e-12)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_diff)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    for name in ("b_convention", "constrained_mode"):
        if not hasattr(args, name + "_set"):
            setattr(args, name + "_set", False)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        args.func(args)
    except (ConfigError, ParameterError, ShapeError, CapacityError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except SolverDegeneracyError as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return 3
    except OverConstrainedError as exc:
        print(f"over-constrained: {exc}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
