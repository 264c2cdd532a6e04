"""Backward dynamic-programming solver for the unconstrained problem.

The optimal cost-to-go is quadratic,

    V_k(x) = x' J1_k x - J2_k x + J3_k,

with ``J2_k`` a row vector (stored as a flat length-n array). Stepping
back from the terminal weight gives the control-mean law
``mu_k = -G_k x_k + M_k`` and the per-channel perturbation variances
``sigma2_{k,i} = sqrt(lambda3_k / P_{k,ii})``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .errors import HorizonError, ShapeError, SolverDegeneracyError
from .system import Scenario


@dataclass(frozen=True, eq=False)
class ValueCoefficients:
    J1: np.ndarray
    J2: np.ndarray
    J3: float

    def __call__(self, x) -> float:
        x = np.asarray(x, dtype=float)
        return float(x @ self.J1 @ x - self.J2 @ x + self.J3)


@dataclass(frozen=True, eq=False)
class StepAux:
    """Diagnostics of one backward step.

    ``KA = A' J1_{k+1} B`` and ``Kc = J2_{k+1} B`` build the linear
    coefficient of the mean, ``K_k(x) = 2 x' KA - Kc``.
    """

    W: np.ndarray
    Z: np.ndarray
    KA: np.ndarray
    Kc: np.ndarray

    def K(self, x):
        return 2.0 * np.asarray(x, dtype=float) @ self.KA - self.Kc


@dataclass(frozen=True, eq=False)
class PolicySchedule:
    G_seq: np.ndarray  # (N, m, n)
    M_seq: np.ndarray  # (N, m)
    P_seq: np.ndarray  # (N, m, m)
    sigma2_seq: np.ndarray  # (N, m)
    value_seq: tuple  # N+1 ValueCoefficients
    aux_seq: tuple  # N StepAux

    @property
    def N(self) -> int:
        return self.G_seq.shape[0]

    def gains(self, k):
        return self.G_seq[k], self.M_seq[k]

    def means(self, X, k):
        """Batched control mean for states stacked as rows of ``X``."""
        return -X @ self.G_seq[k].T + self.M_seq[k]

    def to_records(self) -> list[dict]:
        recs = []
        for k in range(self.N):
            v = self.value_seq[k]
            recs.append(
                {
                    "k": k,
                    "G": self.G_seq[k].tolist(),
                    "M": self.M_seq[k].tolist(),
                    "P": self.P_seq[k].tolist(),
                    "sigma2": self.sigma2_seq[k].tolist(),
                    "J1": v.J1.tolist(),
                    "J2": v.J2.tolist(),
                    "J3": v.J3,
                }
            )
        v = self.value_seq[self.N]
        recs.append({"k": self.N, "J1": v.J1.tolist(), "J2": v.J2.tolist(), "J3": v.J3})
        return recs


def _check_solver_shapes(s: Scenario):
    N, n, m = s.N, s.n, s.m
    c = s.cost
    expected = {
        "A_seq": (s.system.A_seq.shape, (N, n, n)),
        "B_seq": (s.system.B_seq.shape, (N, n, m)),
        "H": (c.H.shape, (n, n)),
        "Q_seq": (c.Q_seq.shape, (N, n, n)),
        "R_seq": (c.R_seq.shape, (N, m, m)),
        "lambda3_seq": (c.lambda3_seq.shape, (N,)),
        "x_target": (c.x_target.shape, (n,)),
    }
    for name, (got, want) in expected.items():
        if got != want:
            raise ShapeError(f"{name} has shape {got}, expected {want}")


def backward_solve(scenario: Scenario) -> PolicySchedule:
    """Run the backward recursion and return the optimal schedule.

    Raises SolverDegeneracyError if some P_k fails its Cholesky test.
    """
    _check_solver_shapes(scenario)
    sysm, cost = scenario.system, scenario.cost
    N, n, m = scenario.N, scenario.n, scenario.m
    l1, l2 = cost.lambda1, cost.lambda2
    xt = cost.x_target

    G_seq = np.empty((N, m, n))
    M_seq = np.empty((N, m))
    P_seq = np.empty((N, m, m))
    s2_seq = np.empty((N, m))
    values = [None] * (N + 1)
    aux = [None] * N

    J1 = l1 * cost.H
    J1 = 0.5 * (J1 + J1.T)
    J2 = 2.0 * l1 * (xt @ cost.H)
    # constant keeps V_N equal to the full terminal cost l1 (x-xt)'H(x-xt)
    J3 = float(l1 * (xt @ cost.H @ xt))
    values[N] = ValueCoefficients(J1, J2, J3)

    for k in range(N - 1, -1, -1):
        A, B = sysm.A_seq[k], sysm.B_seq[k]
        l3 = float(cost.lambda3_seq[k])
        J1B = J1 @ B
        P = l2 * cost.R_seq[k] + B.T @ J1B
        P = 0.5 * (P + P.T)
        if not np.all(np.isfinite(P)):
            raise SolverDegeneracyError(k, "non-finite entries")
        try:
            chol = cho_factor(P, check_finite=False)
        except LinAlgError as exc:
            raise SolverDegeneracyError(k, str(exc)) from None

        G = cho_solve(chol, J1B.T @ A, check_finite=False)
        J2B = J2 @ B
        M = 0.5 * cho_solve(chol, J2B, check_finite=False)
        d = np.diag(P)
        s2 = np.sqrt(l3 / d)

        KA = A.T @ J1B
        W = l2 * cost.Q_seq[k] + A.T @ J1 @ A
        Z = J2 @ A
        J1 = W - KA @ G
        J1 = 0.5 * (J1 + J1.T)
        J2 = Z - J2B @ G
        # exact minimum of mu'P mu + K mu contributes -1/4 K P^-1 K'; its
        # constant part is -1/4 (J2B) P^-1 (J2B)' = -1/2 J2B M
        J3 = -0.5 * float(J2B @ M) + 2.0 * float(np.sum(np.sqrt(l3 * d))) + J3

        G_seq[k], M_seq[k], P_seq[k], s2_seq[k] = G, M, P, s2
        values[k] = ValueCoefficients(J1, J2, J3)
        aux[k] = StepAux(W, Z, KA, J2B)

    for arr in (G_seq, M_seq, P_seq, s2_seq):
        arr.setflags(write=False)
    return PolicySchedule(G_seq, M_seq, P_seq, s2_seq, tuple(values), tuple(aux))


def value_function(schedule: PolicySchedule, x, k: int) -> float:
    """Optimal expected cost-to-go from state ``x`` at step ``k``."""
    if not 0 <= k <= schedule.N:
        raise HorizonError(f"step index {k} outside [0, {schedule.N}]")
    x = np.asarray(x, dtype=float)
    n = schedule.G_seq.shape[2]
    if x.shape != (n,):
        raise ShapeError(f"expected x of shape ({n},), got {x.shape}")
    return schedule.value_seq[k](x)


def control_mean(schedule: PolicySchedule, x, k: int) -> np.ndarray:
    if not 0 <= k < schedule.N:
        raise HorizonError(f"step index {k} outside [0, {schedule.N})")
    x = np.asarray(x, dtype=float)
    n = schedule.G_seq.shape[2]
    if x.shape != (n,):
        raise ShapeError(f"expected x of shape ({n},), got {x.shape}")
    return -schedule.G_seq[k] @ x + schedule.M_seq[k]
