"""Plant, cost and scenario containers for linear time-varying systems.

All containers are frozen dataclasses holding read-only numpy arrays, so a
scenario can be shared between solvers and rollouts without copying.
Matrix sequences are stored stacked along a leading step axis:
``A_seq`` has shape ``(N, n, n)``, ``B_seq`` ``(N, n, m)`` and so on.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Any, Optional

import numpy as np

from .errors import HorizonError, ParameterError, ShapeError

PSD_TOL = 1e-10

B_CONVENTIONS = ("dt", "one")


def _frozen(a, ndim=None, name="array"):
    try:
        arr = np.array(a, dtype=float)
    except (ValueError, TypeError) as exc:
        raise ShapeError(f"{name}: cannot build a numeric array ({exc})") from None
    if ndim is not None and arr.ndim != ndim:
        raise ShapeError(f"{name}: expected {ndim}-d array, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class TimeVaryingLinearSystem:
    """x_{k+1} = A_k x_k + B_k u_k with block-identity output y_k = C x_k."""

    A_seq: np.ndarray
    B_seq: np.ndarray
    q: int = 1

    def __post_init__(self):
        object.__setattr__(self, "A_seq", _frozen(self.A_seq, 3, "A_seq"))
        object.__setattr__(self, "B_seq", _frozen(self.B_seq, 3, "B_seq"))
        object.__setattr__(self, "q", int(self.q))

    @classmethod
    def constant(cls, A, B, N, q=1):
        A = np.atleast_2d(np.asarray(A, dtype=float))
        B = np.atleast_2d(np.asarray(B, dtype=float))
        return cls(np.repeat(A[None], N, axis=0), np.repeat(B[None], N, axis=0), q)

    @property
    def N(self) -> int:
        return self.A_seq.shape[0]

    @property
    def n(self) -> int:
        return self.A_seq.shape[1]

    @property
    def m(self) -> int:
        return self.B_seq.shape[2]

    @property
    def C(self) -> np.ndarray:
        return np.eye(self.q, self.n)


@dataclass(frozen=True, eq=False)
class CostSpec:
    """Weights of the terminal, running and unpredictability terms."""

    H: np.ndarray
    Q_seq: np.ndarray
    R_seq: np.ndarray
    lambda1: float
    lambda2: float
    lambda3_seq: np.ndarray
    x_target: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "H", _frozen(self.H, 2, "H"))
        object.__setattr__(self, "Q_seq", _frozen(self.Q_seq, 3, "Q_seq"))
        object.__setattr__(self, "R_seq", _frozen(self.R_seq, 3, "R_seq"))
        object.__setattr__(self, "lambda1", float(self.lambda1))
        object.__setattr__(self, "lambda2", float(self.lambda2))
        object.__setattr__(self, "lambda3_seq", _frozen(self.lambda3_seq, 1, "lambda3_seq"))
        object.__setattr__(self, "x_target", _frozen(self.x_target, 1, "x_target"))


@dataclass(frozen=True, eq=False)
class Scenario:
    system: TimeVaryingLinearSystem
    cost: CostSpec
    x0: np.ndarray
    T: float = 1.0
    input_bound: Optional[np.ndarray] = None
    tau: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "x0", _frozen(self.x0, 1, "x0"))
        object.__setattr__(self, "T", float(self.T))
        object.__setattr__(self, "tau", float(self.tau))
        if self.input_bound is not None:
            object.__setattr__(
                self, "input_bound", _frozen(np.atleast_1d(self.input_bound), 1, "input_bound")
            )

    @property
    def N(self) -> int:
        return self.system.N

    @property
    def n(self) -> int:
        return self.system.n

    @property
    def m(self) -> int:
        return self.system.m

    @property
    def dt(self) -> float:
        return self.T / self.N

    def replace(self, **changes) -> "Scenario":
        return dataclasses.replace(self, **changes)

    def with_cost(self, **changes) -> "Scenario":
        return dataclasses.replace(self, cost=dataclasses.replace(self.cost, **changes))


@dataclass(frozen=True, eq=False)
class Trajectory:
    """One realized closed-loop run.

    ``sigma2`` carries the variance schedule the perturbations were drawn
    with; the attacker needs it for its process-noise model.
    """

    states: np.ndarray
    inputs: np.ndarray
    means: np.ndarray
    perturbations: np.ndarray
    outputs: np.ndarray
    sigma2: np.ndarray = field(default=None)

    @property
    def N(self) -> int:
        return self.inputs.shape[0]

    def rows(self, run=None):
        """Yield CSV rows ``k, x.., y.., mu.., delta.., u..`` (inputs blank at k=N)."""
        m = self.inputs.shape[1]
        for k in range(self.N + 1):
            row = [] if run is None else [run]
            row.append(k)
            row.extend(self.states[k].tolist())
            row.extend(self.outputs[k].tolist())
            if k < self.N:
                row.extend(self.means[k].tolist())
                row.extend(self.perturbations[k].tolist())
                row.extend(self.inputs[k].tolist())
            else:
                row.extend([""] * (3 * m))
            yield row

    def header(self, run=False):
        n, q, m = self.states.shape[1], self.outputs.shape[1], self.inputs.shape[1]
        cols = ["run"] if run else []
        cols.append("k")
        cols += [f"x{i}" for i in range(n)]
        cols += [f"y{i}" for i in range(q)]
        cols += [f"mu{i}" for i in range(m)]
        cols += [f"delta{i}" for i in range(m)]
        cols += [f"u{i}" for i in range(m)]
        return cols


def _check_index(system, k, upper=None):
    upper = system.N if upper is None else upper
    if not 0 <= k < upper:
        raise HorizonError(f"step index {k} outside [0, {upper})")


def step(system: TimeVaryingLinearSystem, x, u, k: int) -> np.ndarray:
    """Advance one step: ``A_k x + B_k u``."""
    _check_index(system, k)
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if x.shape != (system.n,) or u.shape != (system.m,):
        raise ShapeError(
            f"expected x of shape ({system.n},) and u of shape ({system.m},), "
            f"got {x.shape} and {u.shape}"
        )
    return system.A_seq[k] @ x + system.B_seq[k] @ u


def observe(system: TimeVaryingLinearSystem, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape != (system.n,):
        raise ShapeError(f"expected x of shape ({system.n},), got {x.shape}")
    return x[: system.q].copy()


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple = ()

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self):
        return self.ok

    def __str__(self):
        return "ok" if self.ok else "; ".join(self.violations)


def _min_sym_eig(M):
    return float(np.linalg.eigvalsh(0.5 * (M + M.T)).min())


def validate(scenario: Scenario) -> ValidationReport:
    """Collect every violated invariant of ``scenario``; never raises."""
    v = []
    sysm, cost = scenario.system, scenario.cost
    N, n, m, q = sysm.N, sysm.n, sysm.m, sysm.q

    if N < 1:
        v.append("N must be at least 1")
    if sysm.A_seq.shape != (N, n, n):
        v.append(f"A_seq has shape {sysm.A_seq.shape}, expected ({N}, {n}, {n})")
    if sysm.B_seq.shape[:2] != (N, n):
        v.append(f"B_seq has shape {sysm.B_seq.shape}, expected ({N}, {n}, m)")
    if m < 1:
        v.append("m must be at least 1")
    if not 1 <= q <= n:
        v.append(f"q={q} must satisfy 1 <= q <= n={n}")

    shapes_ok = True
    if cost.H.shape != (n, n):
        v.append(f"H has shape {cost.H.shape}, expected ({n}, {n})")
        shapes_ok = False
    if cost.Q_seq.shape != (N, n, n):
        v.append(f"Q_seq has shape {cost.Q_seq.shape}, expected ({N}, {n}, {n})")
        shapes_ok = False
    if cost.R_seq.shape != (N, m, m):
        v.append(f"R_seq has shape {cost.R_seq.shape}, expected ({N}, {m}, {m})")
        shapes_ok = False
    if cost.lambda3_seq.shape != (N,):
        v.append(f"lambda3_seq has length {cost.lambda3_seq.shape[0]}, expected {N}")
    if cost.x_target.shape != (n,):
        v.append(f"x_target has shape {cost.x_target.shape}, expected ({n},)")
    if scenario.x0.shape != (n,):
        v.append(f"x0 has shape {scenario.x0.shape}, expected ({n},)")

    for name, arr in (("A_seq", sysm.A_seq), ("B_seq", sysm.B_seq), ("x0", scenario.x0)):
        if not np.all(np.isfinite(arr)):
            v.append(f"{name} contains non-finite entries")

    if shapes_ok:
        if _min_sym_eig(cost.H) < -PSD_TOL:
            v.append("H not positive semidefinite")
        for k in range(N):
            if _min_sym_eig(cost.Q_seq[k]) < -PSD_TOL:
                v.append(f"Q_{k} not positive semidefinite")
            if _min_sym_eig(cost.R_seq[k]) <= PSD_TOL:
                v.append(f"R_{k} not positive definite")

    if not cost.lambda1 > 0:
        v.append("lambda1 must be positive")
    if not cost.lambda2 > 0:
        v.append("lambda2 must be positive")
    for k, l3 in enumerate(cost.lambda3_seq):
        if not l3 >= 0:
            v.append(f"lambda3_{k} must be nonnegative")

    if not scenario.T > 0:
        v.append("T must be positive")
    if not 0.0 <= scenario.tau <= 1.0:
        v.append("tau must lie in [0, 1]")
    if scenario.input_bound is not None:
        ub = scenario.input_bound
        if ub.shape != (m,):
            v.append(f"input_bound has shape {ub.shape}, expected ({m},)")
        elif not np.all(ub > 0):
            v.append("input_bound must be strictly positive")
    return ValidationReport(tuple(v))


def scalar_benchmark(
    x0: float = 20.0,
    T: float = 10.0,
    N: int = 50,
    lambda1: float = 5.0,
    lambda2: float = 1.0,
    lambda3: float = 0.5,
    b_convention: str = "dt",
    input_bound: Optional[float] = None,
    tau: float = 1.0,
) -> Scenario:
    """SISO plant x_{k+1} = x_k + (x_k + u_k) dt with dt = T/N.

    ``b_convention="dt"`` takes B = dt straight from the difference
    equation; ``"one"`` uses B = 1. H = 1, Q = 0, R = dt, target 0.
    """
    if not isinstance(N, (int, np.integer)) or N < 1:
        raise ParameterError(f"N must be a positive integer, got {N!r}")
    if not T > 0:
        raise ParameterError(f"T must be positive, got {T!r}")
    if b_convention not in B_CONVENTIONS:
        raise ParameterError(f"b_convention must be one of {B_CONVENTIONS}")
    dt = T / N
    b = dt if b_convention == "dt" else 1.0
    system = TimeVaryingLinearSystem.constant([[1.0 + dt]], [[b]], N, q=1)
    cost = CostSpec(
        H=np.eye(1),
        Q_seq=np.zeros((N, 1, 1)),
        R_seq=np.full((N, 1, 1), dt),
        lambda1=lambda1,
        lambda2=lambda2,
        lambda3_seq=np.full(N, float(lambda3)),
        x_target=np.zeros(1),
    )
    ub = None if input_bound is None else np.atleast_1d(float(input_bound))
    return Scenario(system, cost, np.array([float(x0)]), T=T, input_bound=ub, tau=tau)


# -- serialization -----------------------------------------------------------

_SEQ_KEYS = {"A_seq": 2, "B_seq": 2, "Q_seq": 2, "R_seq": 2, "lambda3_seq": 0}


def _expand_seq(value, N, item_ndim, key):
    flagged = isinstance(value, dict)
    if flagged:
        value = value["value"]
    arr = np.array(value, dtype=float)
    if arr.ndim == item_ndim:
        return np.repeat(arr[None], N, axis=0)
    if flagged:
        raise ShapeError(f"{key}: flagged constant but given a full sequence")
    if arr.ndim == item_ndim + 1:
        if arr.shape[0] != N:
            raise ShapeError(f"{key}: {arr.shape[0]} entries for horizon N={N}")
        return arr
    raise ShapeError(f"{key}: unexpected nesting depth {arr.ndim}")


def scenario_from_dict(d: dict[str, Any]) -> Scenario:
    """Build a scenario from its JSON-compatible dict form.

    Any ``*_seq`` entry given at single-item depth is repeated over the
    horizon, as is one wrapped as ``{"constant": true, "value": ...}``.
    A top-level ``"constant": true`` marks files written that way.
    """
    try:
        N = int(d["N"])
        seqs = {k: _expand_seq(d[k], N, nd, k) for k, nd in _SEQ_KEYS.items()}
        n = seqs["A_seq"].shape[1]
        q = int(d.get("q", n))
        if "C" in d:
            C = np.array(d["C"], dtype=float)
            if C.shape != (q, n) or not np.array_equal(C, np.eye(q, n)):
                raise ShapeError("C must be the block [I_q | 0]")
        system = TimeVaryingLinearSystem(seqs["A_seq"], seqs["B_seq"], q)
        for key, expect in (("n", system.n), ("m", system.m)):
            if key in d and int(d[key]) != expect:
                raise ShapeError(f"{key}={d[key]} disagrees with matrices ({expect})")
        cost = CostSpec(
            H=np.atleast_2d(np.array(d["H"], dtype=float)),
            Q_seq=seqs["Q_seq"],
            R_seq=seqs["R_seq"],
            lambda1=d["lambda1"],
            lambda2=d["lambda2"],
            lambda3_seq=seqs["lambda3_seq"],
            x_target=np.atleast_1d(np.array(d["x_target"], dtype=float)),
        )
        ub = d.get("input_bound")
        return Scenario(
            system,
            cost,
            np.atleast_1d(np.array(d["x0"], dtype=float)),
            T=float(d.get("T", N)),
            input_bound=None if ub is None else np.atleast_1d(np.array(ub, dtype=float)),
            tau=float(d.get("tau", 1.0)),
        )
    except KeyError as exc:
        raise ParameterError(f"scenario is missing key {exc.args[0]!r}") from None


def _all_equal(seq):
    return bool(np.all(seq == seq[0]))


def scenario_to_dict(s: Scenario) -> dict[str, Any]:
    sysm, cost = s.system, s.cost
    seqs = {
        "A_seq": sysm.A_seq,
        "B_seq": sysm.B_seq,
        "Q_seq": cost.Q_seq,
        "R_seq": cost.R_seq,
        "lambda3_seq": cost.lambda3_seq,
    }
    constant = all(_all_equal(v) for v in seqs.values())
    d: dict[str, Any] = {"n": s.n, "m": s.m, "q": sysm.q, "N": s.N, "T": s.T}
    if constant:
        d["constant"] = True
    for k, v in seqs.items():
        d[k] = (v[0] if constant else v).tolist()
    d.update(
        H=cost.H.tolist(),
        lambda1=cost.lambda1,
        lambda2=cost.lambda2,
        x0=s.x0.tolist(),
        x_target=cost.x_target.tolist(),
        tau=s.tau,
    )
    if s.input_bound is not None:
        d["input_bound"] = s.input_bound.tolist()
    return d
