"""Synthetic lognormal observations of total convective activity.

The observed quantity is A + a_bar at every grid point.  Noise is a mean-one
multiplicative lognormal factor, which preserves positivity and is unbiased;
log_sigma is calibrated so the additive observation-error variance matches a
target value (0.0063 in the standard configuration) against the truth
climatology.  The filters receive the matched-variance diagonal Gaussian
approximation R = noise_variance * I.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import ModelParams, ModelState


class CalibrationError(ValueError):
    """Requested observation-error variance is unattainable in the bracket."""


@dataclass(frozen=True)
class ObservationModel:
    noise_variance: float
    interval_steps: int
    log_sigma: float

    def __post_init__(self):
        if self.noise_variance <= 0.0:
            raise ValueError("noise_variance must be > 0")
        if self.interval_steps < 1:
            raise ValueError("interval_steps must be >= 1")
        if self.log_sigma < 0.0:
            raise ValueError("log_sigma must be >= 0")


@dataclass(frozen=True)
class Observation:
    values: np.ndarray
    time: float


def observe(
    truth: ModelState,
    params: ModelParams,
    obs_model: ObservationModel,
    noise: np.ndarray,
) -> Observation:
    """Noisy observation of total activity A + a_bar at every grid point.

    values[j] = (A[j] + a_bar) * exp(log_sigma * xi[j] - log_sigma^2 / 2);
    the -sigma^2/2 shift makes the multiplicative factor mean one.
    """
    activity = truth.a_field + params.a_bar
    noise = np.asarray(noise, dtype=float)
    if noise.shape != activity.shape:
        raise ValueError("noise must have length n_grid")
    sigma = obs_model.log_sigma
    factor = np.exp(sigma * noise - 0.5 * sigma**2)
    return Observation(values=activity * factor, time=truth.time)


def expected_error_variance(climatology: np.ndarray, log_sigma: float) -> float:
    """Exact observation-error variance of the mean-one multiplicative model
    averaged over a climatology sample of positive activity values."""
    clim = np.asarray(climatology, dtype=float)
    return float(np.mean(clim**2) * (np.exp(log_sigma**2) - 1.0))


def calibrate_log_sigma(
    climatology: np.ndarray,
    target_variance: float,
    lo: float = 1e-4,
    hi: float = 2.0,
    rel_tol: float = 1e-2,
) -> float:
    """Bisection for the log-space spread whose error variance hits the target.

    The objective is the exact noise expectation conditioned on the climatology
    sample; tests check it against an independent Monte-Carlo oracle.
    """
    clim = np.asarray(climatology, dtype=float)
    if clim.size == 0 or np.any(clim <= 0.0):
        raise ValueError("climatology must be nonempty and positive")
    if target_variance <= 0.0:
        raise CalibrationError("target_variance must be > 0")
    f_lo = expected_error_variance(clim, lo) - target_variance
    f_hi = expected_error_variance(clim, hi) - target_variance
    if f_lo > 0.0 or f_hi < 0.0:
        raise CalibrationError(
            f"target variance {target_variance:.3e} unattainable for "
            f"log_sigma in [{lo}, {hi}]"
        )
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        val = expected_error_variance(clim, mid) - target_variance
        if val > 0.0:
            hi = mid
        else:
            lo = mid
        if abs(val) <= rel_tol * target_variance and (hi - lo) < 1e-12:
            break
    return 0.5 * (lo + hi)


def observation_operator(state_vector: np.ndarray, params: ModelParams) -> np.ndarray:
    """Map a stacked (K, R, Q, A) vector to the observed field A + a_bar."""
    n = params.n_grid
    vec = np.asarray(state_vector, dtype=float)
    if vec.shape != (4 * n,):
        raise ValueError(f"expected stacked state of length {4 * n}")
    return vec[3 * n :] + params.a_bar


def observation_matrix(params: ModelParams) -> np.ndarray:
    """Linear part of the observation operator (selection of the A block)."""
    n = params.n_grid
    mat = np.zeros((n, 4 * n))
    mat[:, 3 * n :] = np.eye(n)
    return mat
