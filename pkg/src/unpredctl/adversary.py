"""One-step-ahead Kalman-filter attacker.

The attacker sees the plant outputs through additive Gaussian noise, runs
a standard Kalman filter on the known model and predicts
``y_hat_{k+1|k} = C (A_k x_hat_{k|k} + B_k u_hat_{k|k})``. The plant itself
stays noiseless; measurement noise exists only in the attacker's channel.
"""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .errors import FilterDegeneracyError, ParameterError
from .system import TimeVaryingLinearSystem, Trajectory

DEFAULT_OBS_NOISE = 0.5


class ProcessNoise(str, enum.Enum):
    KNOWS_SIGMA = "knows_sigma"
    FIXED = "fixed"
    ZERO = "zero"


class InputEstimate(str, enum.Enum):
    KNOWS_MEAN = "knows_mean"
    ZERO_INPUT = "zero_input"


@dataclass(frozen=True, eq=False)
class AttackerConfig:
    """Attacker model. ``None`` fields take the documented defaults.

    obs_noise_var: q x q covariance (a scalar means ``v * I``), default 0.5 I.
    process_cov: used only with ``ProcessNoise.FIXED``.
    init_mean: default lifts the first noisy measurement, ``C' y_0``.
    init_cov: default identity.
    """

    obs_noise_var: object = DEFAULT_OBS_NOISE
    process_noise: ProcessNoise = ProcessNoise.KNOWS_SIGMA
    input_estimate: InputEstimate = InputEstimate.KNOWS_MEAN
    process_cov: Optional[np.ndarray] = None
    init_mean: Optional[np.ndarray] = None
    init_cov: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "process_noise", ProcessNoise(self.process_noise))
        object.__setattr__(self, "input_estimate", InputEstimate(self.input_estimate))
        if self.process_noise is ProcessNoise.FIXED and self.process_cov is None:
            raise ParameterError("process_cov is required with fixed process noise")

    def obs_cov(self, q: int) -> np.ndarray:
        v = np.asarray(self.obs_noise_var, dtype=float)
        return v * np.eye(q) if v.ndim == 0 else np.atleast_2d(v)

    @classmethod
    def from_dict(cls, d: dict) -> "AttackerConfig":
        kw = dict(d)
        for key in ("process_cov", "init_mean", "init_cov"):
            if kw.get(key) is not None:
                kw[key] = np.asarray(kw[key], dtype=float)
        return cls(**kw)

    def as_dict(self) -> dict:
        def enc(v):
            return None if v is None else np.asarray(v).tolist()

        return {
            "obs_noise_var": enc(self.obs_noise_var),
            "process_noise": self.process_noise.value,
            "input_estimate": self.input_estimate.value,
            "process_cov": enc(self.process_cov),
            "init_mean": enc(self.init_mean),
            "init_cov": enc(self.init_cov),
        }


@dataclass(frozen=True, eq=False)
class PredictionRecord:
    k: int
    y_true_next: np.ndarray
    y_hat_next: np.ndarray
    error: np.ndarray
    error_sq: float
    posterior_cov: np.ndarray


@dataclass(frozen=True, eq=False)
class PredictionReport:
    per_step: tuple
    avg_error: float
    max_error: float
    avg_sq_error: float

    def summary(self) -> dict:
        return {
            "avg_error": self.avg_error,
            "max_error": self.max_error,
            "avg_sq_error": self.avg_sq_error,
        }


def _check_psd(M, what):
    if not np.all(np.isfinite(M)):
        raise FilterDegeneracyError(f"{what} has non-finite entries")
    w = np.linalg.eigvalsh(0.5 * (M + M.T))
    if w.min() < -1e-9 * max(1.0, abs(w).max()):
        raise FilterDegeneracyError(f"{what} is not positive semidefinite")


def kf_update(mean, cov, y_meas, C, obs_cov):
    """Measurement update; returns the posterior ``(mean, cov)``."""
    S = C @ cov @ C.T + obs_cov
    _check_psd(S, "innovation covariance")
    PCt = cov @ C.T
    try:
        K = cho_solve(cho_factor(S, check_finite=False), PCt.T, check_finite=False).T
    except LinAlgError:
        # S is PSD but singular: only exactly known directions, pinv is exact there
        K = PCt @ np.linalg.pinv(S)
    mean = mean + K @ (y_meas - C @ mean)
    IKC = np.eye(cov.shape[0]) - K @ C
    cov = IKC @ cov @ IKC.T + K @ obs_cov @ K.T
    return mean, 0.5 * (cov + cov.T)


def input_estimate(config: AttackerConfig, mean_input, m: int) -> np.ndarray:
    if config.input_estimate is InputEstimate.KNOWS_MEAN:
        return np.asarray(mean_input, dtype=float)
    return np.zeros(m)


def process_cov(config: AttackerConfig, system: TimeVaryingLinearSystem, k: int, sigma2_k):
    n = system.n
    if config.process_noise is ProcessNoise.KNOWS_SIGMA:
        B = system.B_seq[k]
        return B @ np.diag(np.asarray(sigma2_k, dtype=float)) @ B.T
    if config.process_noise is ProcessNoise.FIXED:
        return np.asarray(config.process_cov, dtype=float)
    return np.zeros((n, n))


def kf_predict(mean, cov, system: TimeVaryingLinearSystem, k: int, u_hat, proc_cov):
    """Time update to the prior of step ``k+1``."""
    A, B = system.A_seq[k], system.B_seq[k]
    mean = A @ mean + B @ u_hat
    cov = A @ cov @ A.T + proc_cov
    return mean, 0.5 * (cov + cov.T)


def kf_step(state, y_meas, config: AttackerConfig, system, k, mean_input, sigma2_k):
    """Measurement then time update.

    ``state`` is the prior ``(x_hat_{k|k-1}, P_{k|k-1})``. Returns
    ``(posterior, next_prior)``, each a ``(mean, cov)`` pair.
    """
    C = system.C
    post = kf_update(state[0], state[1], np.asarray(y_meas, float), C, config.obs_cov(system.q))
    u_hat = input_estimate(config, mean_input, system.m)
    prior = kf_predict(*post, system, k, u_hat, process_cov(config, system, k, sigma2_k))
    return post, prior


def predict_output(post_mean, system: TimeVaryingLinearSystem, k: int, u_hat) -> np.ndarray:
    """``C (A_k x_hat_{k|k} + B_k u_hat_{k|k})``."""
    x_next = system.A_seq[k] @ post_mean + system.B_seq[k] @ np.asarray(u_hat, float)
    return x_next[: system.q]


def _gaussian(rng, cov, size):
    w, V = np.linalg.eigh(0.5 * (cov + cov.T))
    L = V * np.sqrt(np.clip(w, 0.0, None))
    return rng.standard_normal((size, cov.shape[0])) @ L.T


def attack_run(
    trajectory: Trajectory,
    config: AttackerConfig,
    system: TimeVaryingLinearSystem,
    rng: np.random.Generator,
) -> PredictionReport:
    """Filter noisy outputs and score predictions for k = 0 .. N-2."""
    N = trajectory.N
    if N < 2:
        raise ParameterError("attack_run needs a horizon of at least 2 steps")
    q, n, m = system.q, system.n, system.m
    C = system.C
    R_obs = config.obs_cov(q)
    y_true = trajectory.outputs
    y_meas = y_true + _gaussian(rng, R_obs, N + 1)
    sigma2 = trajectory.sigma2 if trajectory.sigma2 is not None else np.zeros((N, m))

    mean = C.T @ y_meas[0] if config.init_mean is None else np.asarray(config.init_mean, float)
    cov = np.eye(n) if config.init_cov is None else np.asarray(config.init_cov, float)

    records = []
    for k in range(N - 1):
        mean, cov = kf_update(mean, cov, y_meas[k], C, R_obs)
        u_hat = input_estimate(config, trajectory.means[k], m)
        y_hat = predict_output(mean, system, k, u_hat)
        err = y_true[k + 1] - y_hat
        records.append(PredictionRecord(k, y_true[k + 1], y_hat, err, float(err @ err), cov))
        mean, cov = kf_predict(mean, cov, system, k, u_hat, process_cov(config, system, k, sigma2[k]))

    norms = np.array([np.sqrt(r.error_sq) for r in records])
    return PredictionReport(
        per_step=tuple(records),
        avg_error=float(norms.mean()),
        max_error=float(norms.max()),
        avg_sq_error=float(np.mean(norms**2)),
    )


def write_report_csv(path, report: PredictionReport, run: Optional[int] = None, mode="w"):
    """Per-step prediction CSV: ``k, y_true.., y_hat.., err.., err_sq``."""
    q = report.per_step[0].error.shape[0]
    with open(path, mode, newline="") as fh:
        w = csv.writer(fh)
        if mode == "w":
            head = ["run"] if run is not None else []
            if q == 1:
                head += ["k", "y_true", "y_hat", "err", "err_sq"]
            else:
                head += ["k"] + [f"y_true{i}" for i in range(q)]
                head += [f"y_hat{i}" for i in range(q)] + [f"err{i}" for i in range(q)]
                head += ["err_sq"]
            w.writerow(head)
        for r in report.per_step:
            row = [] if run is None else [run]
            row += [r.k + 1, *r.y_true_next.tolist(), *r.y_hat_next.tolist(), *r.error.tolist()]
            row.append(r.error_sq)
            w.writerow(row)
