"""Box input constraints by clamping the unconstrained control mean.

The perturbation support ``[-dbar, dbar]`` with ``dbar = sqrt(3 sigma2)``
is subtracted (scaled by ``tau``) from the input bound to get a box
``[-mu_bar, mu_bar]`` for the mean. Each step and channel then falls in
one of three branches: the unconstrained law is inside the box, or the
mean saturates low or high. Two ways to pick branches are offered:

* offline: :func:`enumerate_feasible` searches branch assignments from
  ``x0`` with the noiseless mean recursion and returns fixed clamped
  parameters;
* online: :class:`OnlineClampPolicy` clamps with the measured state.
"""

from __future__ import annotations

import enum
import itertools
import logging
from dataclasses import dataclass, field

import numpy as np

from .dp import PolicySchedule, backward_solve
from .errors import CapacityError, OverConstrainedError, ParameterError, ShapeError
from .system import Scenario, TimeVaryingLinearSystem

log = logging.getLogger(__name__)

DEFAULT_MAX_PRODUCT = 16


class Mode(enum.IntEnum):
    INTERIOR = 0
    SAT_LOW = 1
    SAT_HIGH = 2


# search order: interior first, it is by far the most common branch
MODE_ORDER = (Mode.INTERIOR, Mode.SAT_LOW, Mode.SAT_HIGH)


@dataclass(frozen=True, eq=False)
class MeanBounds:
    mu_bar_seq: np.ndarray  # (N, m)
    delta_bar_seq: np.ndarray  # (N, m)


@dataclass(frozen=True, eq=False)
class BranchAssignment:
    modes: np.ndarray  # (N, m) of Mode values

    def __post_init__(self):
        modes = np.array(self.modes, dtype=np.int8)
        if modes.ndim != 2:
            raise ShapeError(f"modes must be an (N, m) array, got shape {modes.shape}")
        modes.setflags(write=False)
        object.__setattr__(self, "modes", modes)

    def __eq__(self, other):
        return isinstance(other, BranchAssignment) and np.array_equal(self.modes, other.modes)

    def names(self, k):
        return [Mode(v).name for v in self.modes[k]]


@dataclass(frozen=True, eq=False)
class ConstrainedPolicy:
    Gt_seq: np.ndarray
    Mt_seq: np.ndarray
    sigma2_seq: np.ndarray
    bounds: MeanBounds
    assignment: BranchAssignment
    feasible: bool
    diagnostics: str = ""
    n_found: int = field(default=1)

    @property
    def N(self) -> int:
        return self.Gt_seq.shape[0]

    def gains(self, k):
        return self.Gt_seq[k], self.Mt_seq[k]

    def means(self, X, k):
        # projection is a no-op on the noiseless path the assignment was
        # verified on; under perturbations it keeps |u| <= u_bar when tau=1
        mb = self.bounds.mu_bar_seq[k]
        return np.clip(-X @ self.Gt_seq[k].T + self.Mt_seq[k], -mb, mb)

    def to_records(self, schedule: PolicySchedule) -> list[dict]:
        recs = schedule.to_records()
        for k in range(self.N):
            recs[k].update(
                Gt=self.Gt_seq[k].tolist(),
                Mt=self.Mt_seq[k].tolist(),
                mode=self.assignment.names(k),
                mu_bar=self.bounds.mu_bar_seq[k].tolist(),
            )
        return recs


@dataclass(frozen=True, eq=False)
class OnlineClampPolicy:
    """Clamp the unconstrained mean with the state observed at run time."""

    schedule: PolicySchedule
    bounds: MeanBounds

    @property
    def N(self) -> int:
        return self.schedule.N

    @property
    def sigma2_seq(self):
        return self.schedule.sigma2_seq

    def gains(self, k):
        raise TypeError("online clamping is state dependent and has no fixed linear gains")

    def means(self, X, k):
        mb = self.bounds.mu_bar_seq[k]
        return np.clip(self.schedule.means(X, k), -mb, mb)


def conservative_bounds(schedule, u_bar, tau: float = 1.0) -> MeanBounds:
    """Mean box ``mu_bar = u_bar - tau * sqrt(3 sigma2)`` for every step.

    ``schedule`` may be a PolicySchedule or a raw (N, m) variance array.
    """
    sigma2 = np.asarray(getattr(schedule, "sigma2_seq", schedule), dtype=float)
    u_bar = np.atleast_1d(np.asarray(u_bar, dtype=float))
    if sigma2.ndim == 1:
        sigma2 = sigma2[:, None]
    if u_bar.shape != (sigma2.shape[1],):
        raise ShapeError(f"u_bar has shape {u_bar.shape}, expected ({sigma2.shape[1]},)")
    if not np.all(u_bar > 0):
        raise ParameterError("u_bar must be strictly positive")
    if not 0.0 <= tau <= 1.0:
        raise ParameterError(f"tau must lie in [0, 1], got {tau}")
    delta_bar = np.sqrt(3.0 * sigma2)
    mu_bar = u_bar - tau * delta_bar
    bad = np.argwhere(mu_bar < 0)
    if bad.size:
        k, i = (int(v) for v in bad[0])
        raise OverConstrainedError(k, i, float(mu_bar[k, i]))
    delta_bar.setflags(write=False)
    mu_bar.setflags(write=False)
    return MeanBounds(mu_bar, delta_bar)


def clamp_step(G, M, x, mu_bar):
    """Clamp one step's parameters so that ``-Gt x + Mt`` lies in the box.

    Returns ``(Gt, Mt, modes)``; rows whose unconstrained mean lies inside
    ``[-mu_bar, mu_bar]`` keep ``(G_i, M_i)``, the others become
    ``(0, -+mu_bar_i)``.
    """
    G = np.atleast_2d(np.asarray(G, dtype=float))
    M = np.atleast_1d(np.asarray(M, dtype=float))
    x = np.atleast_1d(np.asarray(x, dtype=float))
    mu_bar = np.atleast_1d(np.asarray(mu_bar, dtype=float))
    mu = -G @ x + M
    low = mu < -mu_bar
    high = mu > mu_bar
    interior = ~(low | high)
    Gt = np.where(interior[:, None], G, 0.0)
    Mt = np.where(interior, M, np.where(low, -mu_bar, mu_bar))
    modes = np.where(interior, Mode.INTERIOR, np.where(low, Mode.SAT_LOW, Mode.SAT_HIGH))
    return Gt, Mt, modes.astype(np.int8)


def _mode_consistent(modes, mu_unclamped, mu_bar, atol=0.0):
    ok_int = np.abs(mu_unclamped) <= mu_bar + atol
    ok_low = mu_unclamped < -mu_bar + atol
    ok_high = mu_unclamped > mu_bar - atol
    return bool(
        np.all(
            np.where(
                modes == Mode.INTERIOR, ok_int, np.where(modes == Mode.SAT_LOW, ok_low, ok_high)
            )
        )
    )


def params_for_assignment(schedule: PolicySchedule, bounds: MeanBounds, assignment):
    """Clamped ``(Gt_seq, Mt_seq)`` implied by a branch assignment."""
    modes = assignment.modes if isinstance(assignment, BranchAssignment) else np.asarray(assignment)
    interior = modes == Mode.INTERIOR
    Gt = np.where(interior[:, :, None], schedule.G_seq, 0.0)
    mb = bounds.mu_bar_seq
    Mt = np.where(interior, schedule.M_seq, np.where(modes == Mode.SAT_LOW, -mb, mb))
    return Gt, Mt


def feasibility_terms(system: TimeVaryingLinearSystem, Gt_seq, Mt_seq):
    """Coefficients ``(E, F)`` with noiseless mean ``mu_k = E_k x0 + F_k``.

    ``E_k = -Gt_k Phi_k`` and ``F_k = -Gt_k f_k + Mt_k`` where ``Phi_k``
    and ``f_k`` accumulate the closed-loop map ``x_k = Phi_k x0 + f_k``.
    """
    N, n = system.N, system.n
    m = system.m
    E = np.empty((N, m, n))
    F = np.empty((N, m))
    Phi = np.eye(n)
    f = np.zeros(n)
    for k in range(N):
        A, B = system.A_seq[k], system.B_seq[k]
        Gt, Mt = Gt_seq[k], Mt_seq[k]
        E[k] = -Gt @ Phi
        F[k] = -Gt @ f + Mt
        Acl = A - B @ Gt
        Phi = Acl @ Phi
        f = Acl @ f + B @ Mt
    return E, F


def feasibility_check(
    assignment: BranchAssignment,
    Gt_seq,
    Mt_seq,
    x0,
    bounds: MeanBounds,
    system: TimeVaryingLinearSystem,
    schedule: PolicySchedule | None = None,
    atol: float = 1e-9,
) -> bool:
    """True iff every ``-mu_bar_k <= E_k x0 + F_k <= mu_bar_k`` holds.

    When ``schedule`` is given the unconstrained mean along the same
    noiseless path must also agree with each step's branch.
    """
    x0 = np.asarray(x0, dtype=float)
    E, F = feasibility_terms(system, Gt_seq, Mt_seq)
    mu = np.einsum("kmn,n->km", E, x0) + F
    mb = bounds.mu_bar_seq
    if np.any(mu < -mb - atol) or np.any(mu > mb + atol):
        return False
    if schedule is None:
        return True
    x = x0
    for k in range(system.N):
        mu_un = -schedule.G_seq[k] @ x + schedule.M_seq[k]
        if not _mode_consistent(assignment.modes[k], mu_un, mb[k], atol):
            return False
        x = system.A_seq[k] @ x + system.B_seq[k] @ mu[k]
    return True


def enumerate_feasible(
    scenario: Scenario,
    schedule: PolicySchedule | None = None,
    *,
    max_product: int = DEFAULT_MAX_PRODUCT,
    exhaustive: bool = False,
    self_consistent: bool = True,
) -> ConstrainedPolicy:
    """Depth-first search over branch assignments from ``scenario.x0``.

    Prefixes are pruned as soon as the mean leaves its box or (with
    ``self_consistent``) a branch disagrees with the unconstrained mean on
    the noiseless path. The first complete assignment wins; with
    ``exhaustive`` the search continues and extra hits are logged.
    """
    if scenario.input_bound is None:
        raise ParameterError("scenario has no input_bound")
    N, m = scenario.N, scenario.m
    if N * m > max_product:
        raise CapacityError(
            f"branch enumeration over N*m={N * m} exceeds the guard {max_product}; "
            "use the online clamp policy or raise max_product"
        )
    if schedule is None:
        schedule = backward_solve(scenario)
    bounds = conservative_bounds(schedule, scenario.input_bound, scenario.tau)
    sysm = scenario.system
    mb = bounds.mu_bar_seq
    combos = list(itertools.product(MODE_ORDER, repeat=m))

    modes = np.zeros((N, m), dtype=np.int8)
    found = []
    deepest = [0]

    def dfs(k, x):
        if k == N:
            found.append(modes.copy())
            return not exhaustive
        deepest[0] = max(deepest[0], k)
        G, M = schedule.G_seq[k], schedule.M_seq[k]
        mu_un = -G @ x + M
        for combo in combos:
            cm = np.array(combo, dtype=np.int8)
            if self_consistent and not _mode_consistent(cm, mu_un, mb[k]):
                continue
            interior = cm == Mode.INTERIOR
            mu = np.where(interior, mu_un, np.where(cm == Mode.SAT_LOW, -mb[k], mb[k]))
            if np.any(np.abs(mu) > mb[k]):
                continue
            modes[k] = cm
            x_next = sysm.A_seq[k] @ x + sysm.B_seq[k] @ mu
            if dfs(k + 1, x_next):
                return True
        return False

    dfs(0, np.asarray(scenario.x0, dtype=float))

    if not found:
        assignment = BranchAssignment(np.zeros((N, m), dtype=np.int8))
        Gt, Mt = params_for_assignment(schedule, bounds, assignment)
        return ConstrainedPolicy(
            Gt,
            Mt,
            schedule.sigma2_seq,
            bounds,
            assignment,
            feasible=False,
            diagnostics=f"no feasible assignment; deepest viable prefix has {deepest[0]} steps",
            n_found=0,
        )
    if len(found) > 1:
        log.info("%d feasible branch assignments found; keeping the first", len(found))
        for extra in found[1:]:
            log.info("additional feasible assignment: %s", extra.tolist())
    assignment = BranchAssignment(found[0])
    Gt, Mt = params_for_assignment(schedule, bounds, assignment)
    return ConstrainedPolicy(
        Gt, Mt, schedule.sigma2_seq, bounds, assignment, feasible=True, n_found=len(found)
    )


def online_clamp_assignment(scenario: Scenario, schedule: PolicySchedule, bounds: MeanBounds):
    """Noiseless clamp-as-you-go pass; returns ``(assignment, means, states)``."""
    sysm = scenario.system
    N, m = scenario.N, scenario.m
    x = np.asarray(scenario.x0, dtype=float)
    modes = np.empty((N, m), dtype=np.int8)
    means = np.empty((N, m))
    states = [x]
    for k in range(N):
        Gt, Mt, md = clamp_step(schedule.G_seq[k], schedule.M_seq[k], x, bounds.mu_bar_seq[k])
        mu = -Gt @ x + Mt
        modes[k], means[k] = md, mu
        x = sysm.A_seq[k] @ x + sysm.B_seq[k] @ mu
        states.append(x)
    return BranchAssignment(modes), means, np.array(states)
