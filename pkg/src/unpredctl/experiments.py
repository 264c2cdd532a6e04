"""Preset experiment sweeps, policy diffs and policy (de)serialization."""

from __future__ import annotations

import csv
import itertools
import json
import os
from dataclasses import dataclass, field
from typing import Any, Optional

import numpy as np

from .adversary import AttackerConfig, attack_run
from .constrained import (
    ConstrainedPolicy,
    OnlineClampPolicy,
    conservative_bounds,
    enumerate_feasible,
)
from .dp import PolicySchedule, ValueCoefficients, backward_solve, value_function
from .errors import ParameterError, ShapeError
from .rollout import (
    MEASUREMENT,
    RandomSource,
    monte_carlo_cost,
    propagate_moments,
    rollout,
    write_trajectories_csv,
)
from .system import Scenario, scalar_benchmark, scenario_from_dict, scenario_to_dict, validate

PRESETS = ("fig1", "fig2", "fig3_table1", "fig4", "custom")
CONSTRAINED_MODES = ("enumerate", "online")


@dataclass
class ExperimentConfig:
    preset: str = "custom"
    scenario: Optional[dict] = None
    sweep: list = field(default_factory=list)  # [(path, [values...]), ...]
    runs: int = 200
    master_seed: int = 0
    attacker: AttackerConfig = field(default_factory=AttackerConfig)
    output_dir: str = "out"
    b_convention: str = "dt"
    tau: Optional[float] = None
    constrained_mode: str = "enumerate"

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ParameterError(f"unknown preset {self.preset!r}; choose from {PRESETS}")
        if self.constrained_mode not in CONSTRAINED_MODES:
            raise ParameterError(f"constrained_mode must be one of {CONSTRAINED_MODES}")
        if int(self.runs) < 2:
            raise ParameterError("runs must be at least 2")
        self.runs = int(self.runs)
        self.master_seed = int(self.master_seed)
        self.sweep = [(str(p), list(v)) for p, v in self.sweep]
        if isinstance(self.attacker, dict):
            self.attacker = AttackerConfig.from_dict(self.attacker)
        if self.preset == "custom" and self.scenario is None:
            raise ParameterError("the custom preset needs a scenario")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise ParameterError(f"unknown experiment config keys: {sorted(extra)}")
        kw = dict(d)
        if "sweep" in kw:
            kw["sweep"] = [
                (s["path"], s["values"]) if isinstance(s, dict) else tuple(s) for s in kw["sweep"]
            ]
        return cls(**kw)

    def as_dict(self) -> dict:
        return {
            "preset": self.preset,
            "scenario": self.scenario,
            "sweep": [{"path": p, "values": v} for p, v in self.sweep],
            "runs": self.runs,
            "master_seed": self.master_seed,
            "attacker": self.attacker.as_dict(),
            "output_dir": self.output_dir,
            "b_convention": self.b_convention,
            "tau": self.tau,
            "constrained_mode": self.constrained_mode,
        }


def preset_plan(config: ExperimentConfig):
    """Base scenario and sweep for a preset (explicit config sweep wins)."""
    bc = config.b_convention
    p = config.preset
    if p == "fig1":
        base, sweep = scalar_benchmark(lambda1=5, lambda2=1, lambda3=0.5, b_convention=bc), [
            ("lambda1", [5, 15])
        ]
    elif p == "fig2":
        base, sweep = scalar_benchmark(lambda1=5, lambda2=1, lambda3=0.5, b_convention=bc), [
            ("lambda3", [0.2, 0.5, 1])
        ]
    elif p == "fig3_table1":
        base, sweep = scalar_benchmark(lambda1=1, lambda2=1, lambda3=0.0, b_convention=bc), [
            ("lambda3", [0, 0.2, 0.5, 1])
        ]
    elif p == "fig4":
        base = scalar_benchmark(
            N=15, lambda1=5, lambda2=1, lambda3=0.5, b_convention=bc, input_bound=4.0
        )
        sweep = []
    else:
        base, sweep = scenario_from_dict(config.scenario), []
    if config.sweep:
        sweep = config.sweep
    if config.tau is not None:
        base = base.replace(tau=config.tau)
    return base, sweep


def apply_override(scenario: Scenario, path: str, value) -> Scenario:
    d = scenario_to_dict(scenario)
    key = "lambda3_seq" if path == "lambda3" else path
    if key not in d and key not in ("input_bound",):
        raise ParameterError(f"unknown sweep parameter {path!r}")
    if key == "lambda3_seq" and not d.get("constant"):
        value = [value] * scenario.N if np.ndim(value) == 0 else value
    d[key] = value
    return scenario_from_dict(d)


def _label(point):
    if not point:
        return "base"
    return "_".join(f"{p}={v}" for p, v in point).replace("/", "-")


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _quantiles(a):
    q = np.quantile(np.asarray(a, dtype=float), [0.025, 0.975])
    return float(q[0]), float(q[1])


def _run_variant(scenario, policy, variant, label, config, out, files, schedule=None):
    source = RandomSource(config.master_seed)
    runs = config.runs
    sysm = scenario.system
    trajs = [rollout(scenario, policy, source.stream(r)) for r in range(runs)]
    name = f"{label}_{variant}"

    path = os.path.join(out, f"trajectories_{name}.csv")
    write_trajectories_csv(path, trajs)
    files.append(path)

    reports = []
    if scenario.N >= 2:
        reports = [
            attack_run(tr, config.attacker, sysm, source.stream(r, MEASUREMENT))
            for r, tr in enumerate(trajs)
        ]
        path = os.path.join(out, f"attack_{name}.csv")
        _write_csv(
            path,
            ["run", "avg_error", "max_error", "avg_sq_error"],
            [[r, rep.avg_error, rep.max_error, rep.avg_sq_error] for r, rep in enumerate(reports)],
        )
        files.append(path)

    linear = not isinstance(policy, OnlineClampPolicy)
    moments, breakdown = propagate_moments(scenario, policy) if linear else (None, None)
    mc_mean, mc_se = monte_carlo_cost(scenario, policy, runs, source)

    states = np.stack([t.states for t in trajs])
    inputs = np.stack([t.inputs for t in trajs])
    means = np.stack([t.means for t in trajs])
    n, m = scenario.n, scenario.m
    header = ["k"] + [f"mean_x{i}" for i in range(n)]
    if linear:
        header += [f"exact_mean_x{i}" for i in range(n)] + [f"exact_var_x{i}" for i in range(n)]
    header += [f"sigma2_{i}" for i in range(m)] + [f"mean_mu{i}" for i in range(m)]
    header += [f"max_abs_u{i}" for i in range(m)]
    rows = []
    for k in range(scenario.N + 1):
        row = [k, *states[:, k].mean(axis=0).tolist()]
        if linear:
            row += moments[k].mean.tolist() + np.diag(moments[k].cov).tolist()
        if k < scenario.N:
            row += policy.sigma2_seq[k].tolist() + means[:, k].mean(axis=0).tolist()
            row += np.abs(inputs[:, k]).max(axis=0).tolist()
        else:
            row += [""] * (3 * m)
        rows.append(row)
    path = os.path.join(out, f"summary_{name}.csv")
    _write_csv(path, header, rows)
    files.append(path)

    record: dict[str, Any] = {"label": label, "variant": variant}
    if breakdown is not None:
        record.update(breakdown.as_dict())
    if schedule is not None and variant == "unconstrained":
        record["value_x0"] = value_function(schedule, scenario.x0, 0)
    record.update(mc_mean=mc_mean, mc_se=mc_se)
    if reports:
        avg = [r.avg_error for r in reports]
        mx = [r.max_error for r in reports]
        record.update(
            avg_error_mean=float(np.mean(avg)),
            avg_error_q025=_quantiles(avg)[0],
            avg_error_q975=_quantiles(avg)[1],
            max_error_mean=float(np.mean(mx)),
            max_error_q025=_quantiles(mx)[0],
            max_error_q975=_quantiles(mx)[1],
            avg_sq_error_mean=float(np.mean([r.avg_sq_error for r in reports])),
        )
    record["max_abs_u"] = float(np.abs(inputs).max())
    if scenario.input_bound is not None:
        record["bound_violations"] = int(np.sum(np.abs(inputs) > scenario.input_bound))
    return record


def run_experiment(config: ExperimentConfig) -> list[str]:
    """Run every sweep point of ``config`` and return the written file paths."""
    out = config.output_dir
    os.makedirs(out, exist_ok=True)
    base, sweep = preset_plan(config)
    files: list[str] = []
    records = []
    names = [p for p, _ in sweep]
    for values in itertools.product(*[v for _, v in sweep]):
        point = list(zip(names, values))
        scenario = base
        for p, v in point:
            scenario = apply_override(scenario, p, v)
        report = validate(scenario)
        if not report.ok:
            raise ParameterError(f"invalid scenario at {_label(point)}: {report}")
        label = _label(point)
        schedule = backward_solve(scenario)
        path = os.path.join(out, f"policy_{label}.json")
        dump_policy(path, schedule)
        files.append(path)
        point_records = [
            _run_variant(scenario, schedule, "unconstrained", label, config, out, files, schedule)
        ]
        if scenario.input_bound is not None:
            cpol = constrained_policy(scenario, schedule, config.constrained_mode)
            if isinstance(cpol, ConstrainedPolicy):
                path = os.path.join(out, f"policy_{label}_constrained.json")
                dump_policy(path, schedule, cpol)
                files.append(path)
            point_records.append(
                _run_variant(scenario, cpol, "constrained", label, config, out, files, schedule)
            )
        for r in point_records:
            r.update(dict(point))
        records += point_records

    keys: list[str] = []
    for r in records:
        keys += [k for k in r if k not in keys]
    path = os.path.join(out, "summary.csv")
    _write_csv(path, keys, [[r.get(k, "") for k in keys] for r in records])
    files.append(path)

    if config.preset == "fig3_table1":
        path = os.path.join(out, "table_prediction_errors.csv")
        cols = [
            "lambda3",
            "avg_error_mean",
            "avg_error_q025",
            "avg_error_q975",
            "max_error_mean",
            "max_error_q025",
            "max_error_q975",
        ]
        _write_csv(path, cols, [[r.get(c, "") for c in cols] for r in records])
        files.append(path)

    manifest = os.path.join(out, "manifest.json")
    files.append(manifest)
    with open(manifest, "w") as fh:
        json.dump(
            {
                "config": config.as_dict(),
                "seeds": {
                    "master_seed": config.master_seed,
                    "runs": config.runs,
                    "stream_rule": "run r: perturbations (master_seed, r, 0), "
                    "attacker noise (master_seed, r, 1)",
                },
                "files": [os.path.basename(f) for f in files],
            },
            fh,
            indent=2,
        )
    return files


def constrained_policy(scenario: Scenario, schedule: PolicySchedule, mode: str = "enumerate"):
    if mode == "enumerate":
        return enumerate_feasible(scenario, schedule)
    bounds = conservative_bounds(schedule, scenario.input_bound, scenario.tau)
    return OnlineClampPolicy(schedule, bounds)


def diff_policies(a: PolicySchedule, b: PolicySchedule, threshold: float = 1e-12) -> list[dict]:
    """Per-step max-abs differences of G, M, P and sigma2 between two schedules."""
    if a.G_seq.shape != b.G_seq.shape:
        raise ShapeError(f"schedule shapes differ: {a.G_seq.shape} vs {b.G_seq.shape}")
    rows = []
    for k in range(a.N):
        dG = float(np.abs(a.G_seq[k] - b.G_seq[k]).max())
        dM = float(np.abs(a.M_seq[k] - b.M_seq[k]).max())
        dP = float(np.abs(a.P_seq[k] - b.P_seq[k]).max())
        s2a, s2b = a.sigma2_seq[k], b.sigma2_seq[k]
        ds2 = float(np.abs(s2a - s2b).max())
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(s2a > 0, s2b / s2a, np.nan)
        rows.append(
            {
                "k": k,
                "dG": dG,
                "dM": dM,
                "dP": dP,
                "dsigma2": ds2,
                "sigma2_a": s2a.tolist(),
                "sigma2_b": s2b.tolist(),
                "sigma2_ratio": ratio.tolist(),
                "flagged": max(dG, dM, dP, ds2) > threshold,
            }
        )
    return rows


def write_diff_csv(path_or_fh, rows):
    m = len(rows[0]["sigma2_a"])
    sfx = [""] if m == 1 else [str(i) for i in range(m)]
    header = ["k", "dG", "dM", "dP", "dsigma2"]
    header += [f"sigma2_a{s}" for s in sfx] + [f"sigma2_b{s}" for s in sfx]
    header += [f"sigma2_ratio{s}" for s in sfx] + ["flagged"]
    w = csv.writer(path_or_fh)
    w.writerow(header)
    for r in rows:
        w.writerow(
            [r["k"], r["dG"], r["dM"], r["dP"], r["dsigma2"]]
            + r["sigma2_a"]
            + r["sigma2_b"]
            + r["sigma2_ratio"]
            + [int(r["flagged"])]
        )


def policy_document(schedule: PolicySchedule, cpol: Optional[ConstrainedPolicy] = None) -> dict:
    if cpol is None:
        return {"kind": "schedule", "steps": schedule.to_records()}
    return {"kind": "constrained", "feasible": cpol.feasible, "steps": cpol.to_records(schedule)}


def dump_policy(path, schedule, cpol=None):
    with open(path, "w") as fh:
        json.dump(policy_document(schedule, cpol), fh, indent=1)


def schedule_from_document(doc: dict) -> PolicySchedule:
    """Rebuild the schedule part of a dumped policy (diagnostics are dropped)."""
    steps = doc["steps"]
    body = steps[:-1]
    arr = lambda key: np.array([s[key] for s in body], dtype=float)  # noqa: E731
    values = [ValueCoefficients(np.array(s["J1"]), np.array(s["J2"]), s["J3"]) for s in steps]
    return PolicySchedule(arr("G"), arr("M"), arr("P"), arr("sigma2"), tuple(values), ())
