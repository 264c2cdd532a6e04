"""Seeded closed-loop simulation and expected-cost evaluation.

A policy is any object with ``sigma2_seq`` (N, m) and ``means(X, k)``
mapping stacked states (R, n) to stacked control means (R, m). Linear
policies also expose ``gains(k) -> (G, M)``, which exact moment
propagation needs.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ParameterError, ShapeError
from .system import Scenario, Trajectory, observe, step

PERTURBATION = 0
MEASUREMENT = 1


@dataclass(frozen=True)
class RandomSource:
    """Counter-based streams keyed by ``(master_seed, run, purpose)``.

    Each run gets its own Philox stream, so results do not depend on the
    order or the number of workers the runs are spread over.
    """

    master_seed: int = 0

    def stream(self, run: int, purpose: int = PERTURBATION) -> np.random.Generator:
        ss = np.random.SeedSequence(int(self.master_seed), spawn_key=(int(run), int(purpose)))
        return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True, eq=False)
class MomentState:
    mean: np.ndarray
    cov: np.ndarray


@dataclass(frozen=True)
class CostBreakdown:
    terminal: float
    running: float
    utility: float

    @property
    def total(self) -> float:
        return self.terminal + self.running + self.utility

    def as_dict(self):
        return {
            "terminal": self.terminal,
            "running": self.running,
            "utility": self.utility,
            "total": self.total,
        }


def _half_width(sigma2):
    sigma2 = np.asarray(sigma2, dtype=float)
    if np.any(sigma2 < 0) or np.any(np.isnan(sigma2)):
        raise ParameterError("perturbation variances must be nonnegative")
    return np.sqrt(3.0 * sigma2)


def sample_perturbation(sigma2, rng: np.random.Generator) -> np.ndarray:
    """Independent zero-mean uniform draws with per-channel variance ``sigma2``."""
    h = _half_width(np.atleast_1d(sigma2))
    return rng.uniform(-1.0, 1.0, size=h.shape) * h


def uniform_perturbations(sigma2_seq, rng: np.random.Generator) -> np.ndarray:
    """A whole (N, m) perturbation block; same draws as N sequential samples."""
    h = _half_width(sigma2_seq)
    return rng.uniform(-1.0, 1.0, size=h.shape) * h


def zero_perturbations(sigma2_seq, rng=None) -> np.ndarray:
    return np.zeros(np.shape(sigma2_seq))


Sampler = Callable[[np.ndarray, np.random.Generator], np.ndarray]


def _check_policy(scenario, policy):
    if policy.N != scenario.N:
        raise ShapeError(f"policy horizon {policy.N} != scenario horizon {scenario.N}")


def rollout(
    scenario: Scenario,
    policy,
    rng: np.random.Generator | None = None,
    *,
    sampler: Sampler = uniform_perturbations,
) -> Trajectory:
    _check_policy(scenario, policy)
    sysm = scenario.system
    N = scenario.N
    sigma2 = np.asarray(policy.sigma2_seq, dtype=float)
    deltas = np.asarray(sampler(sigma2, rng), dtype=float)
    if deltas.shape != sigma2.shape:
        raise ShapeError(f"sampler returned shape {deltas.shape}, expected {sigma2.shape}")

    x = np.array(scenario.x0, dtype=float)
    states, outputs = [x], [observe(sysm, x)]
    means, inputs = [], []
    for k in range(N):
        mu = policy.means(x[None, :], k)[0]
        u = mu + deltas[k]
        x = step(sysm, x, u, k)
        means.append(mu)
        inputs.append(u)
        states.append(x)
        outputs.append(observe(sysm, x))
    return Trajectory(
        states=np.array(states),
        inputs=np.array(inputs),
        means=np.array(means),
        perturbations=deltas,
        outputs=np.array(outputs),
        sigma2=sigma2,
    )


def utility_term(lambda3_seq, sigma2_seq) -> float:
    """Sum of lambda3_k / sigma2_{k,i}; zero-weight steps contribute nothing."""
    l3 = np.asarray(lambda3_seq, dtype=float)[:, None]
    s2 = np.asarray(sigma2_seq, dtype=float)
    l3 = np.broadcast_to(l3, s2.shape)
    if np.any((s2 == 0) & (l3 > 0)):
        return float("inf")
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(l3 > 0, l3 / s2, 0.0)
    return float(terms.sum())


def propagate_moments(scenario: Scenario, policy):
    """Exact state mean/covariance recursion and expected cost of a linear policy."""
    _check_policy(scenario, policy)
    sysm, cost = scenario.system, scenario.cost
    m = np.array(scenario.x0, dtype=float)
    S = np.zeros((scenario.n, scenario.n))
    moments = [MomentState(m, S)]
    running = 0.0
    for k in range(scenario.N):
        G, M = policy.gains(k)
        A, B = sysm.A_seq[k], sysm.B_seq[k]
        Q, R = cost.Q_seq[k], cost.R_seq[k]
        Sig = np.diag(policy.sigma2_seq[k])
        mu = -G @ m + M
        running += m @ Q @ m + np.trace(Q @ S) + mu @ R @ mu + np.trace(R @ (G @ S @ G.T + Sig))
        Acl = A - B @ G
        m = Acl @ m + B @ M
        S = Acl @ S @ Acl.T + B @ Sig @ B.T
        S = 0.5 * (S + S.T)
        moments.append(MomentState(m, S))
    d = m - cost.x_target
    terminal = cost.lambda1 * float(d @ cost.H @ d + np.trace(cost.H @ S))
    return moments, CostBreakdown(
        terminal=terminal,
        running=cost.lambda2 * float(running),
        utility=utility_term(cost.lambda3_seq, policy.sigma2_seq),
    )


def realized_costs(
    scenario: Scenario,
    policy,
    runs: int,
    source: RandomSource,
    *,
    sampler: Sampler = uniform_perturbations,
    first_run: int = 0,
) -> np.ndarray:
    """Terminal + running cost of each of ``runs`` rollouts, batched over runs.

    Run ``r`` uses stream ``(master_seed, first_run + r)``, the same
    perturbations :func:`rollout` draws for that stream.
    """
    _check_policy(scenario, policy)
    sysm, cost = scenario.system, scenario.cost
    sigma2 = np.asarray(policy.sigma2_seq, dtype=float)
    D = np.stack([sampler(sigma2, source.stream(first_run + r)) for r in range(runs)])
    X = np.tile(np.asarray(scenario.x0, dtype=float), (runs, 1))
    run_cost = np.zeros(runs)
    for k in range(scenario.N):
        U = policy.means(X, k) + D[:, k]
        run_cost += np.einsum("ri,ij,rj->r", X, cost.Q_seq[k], X)
        run_cost += np.einsum("ri,ij,rj->r", U, cost.R_seq[k], U)
        X = X @ sysm.A_seq[k].T + U @ sysm.B_seq[k].T
    dev = X - cost.x_target
    terminal = np.einsum("ri,ij,rj->r", dev, cost.H, dev)
    return cost.lambda1 * terminal + cost.lambda2 * run_cost


def monte_carlo_cost(scenario: Scenario, policy, runs: int, source=0, **kw):
    """Mean realized total cost and its standard error.

    The utility term is deterministic given the variance schedule and is
    added exactly rather than estimated.
    """
    if runs < 2:
        raise ParameterError("monte_carlo_cost needs at least 2 runs")
    if not isinstance(source, RandomSource):
        source = RandomSource(int(source))
    c = realized_costs(scenario, policy, runs, source, **kw)
    util = utility_term(scenario.cost.lambda3_seq, policy.sigma2_seq)
    if np.all(c == c[0]):
        return float(c[0]) + util, 0.0
    se = float(c.std(ddof=1) / np.sqrt(runs))
    return float(c.mean()) + util, se


def write_trajectories_csv(path, trajectories) -> None:
    """Long-format CSV of several runs (``run`` column first)."""
    trajectories = list(trajectories)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(trajectories[0].header(run=True))
        for r, tr in enumerate(trajectories):
            w.writerows(tr.rows(run=r))
