"""Skill scores and physics diagnostics.

RMSE is normalized by the (population) standard deviation of the truth field
at each time; Corr is the Pearson pattern correlation over grid points.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class DegenerateFieldError(ValueError):
    """A field with zero spread cannot be scored."""


@dataclass(frozen=True)
class SkillSeries:
    times: np.ndarray
    rmse: np.ndarray
    corr: np.ndarray

    def __post_init__(self):
        if not (self.times.shape == self.rmse.shape == self.corr.shape):
            raise ValueError("times, rmse and corr must have equal lengths")


def rmse_at(truth_field: np.ndarray, est_field: np.ndarray) -> float:
    truth = np.asarray(truth_field, dtype=float)
    est = np.asarray(est_field, dtype=float)
    if truth.shape != est.shape or truth.size < 2:
        raise ValueError("fields must share a length of at least 2")
    sigma = truth.std()
    if sigma == 0.0:
        raise DegenerateFieldError("truth field has zero standard deviation")
    return float(np.sqrt(np.mean((truth - est) ** 2)) / sigma)


def corr_at(truth_field: np.ndarray, est_field: np.ndarray) -> float:
    truth = np.asarray(truth_field, dtype=float)
    est = np.asarray(est_field, dtype=float)
    if truth.shape != est.shape or truth.size < 2:
        raise ValueError("fields must share a length of at least 2")
    st, se = truth.std(), est.std()
    if st == 0.0 or se == 0.0:
        raise DegenerateFieldError("zero standard deviation in a scored field")
    cov = np.mean((truth - truth.mean()) * (est - est.mean()))
    return float(cov / (st * se))


def skill_series(
    times: np.ndarray, truth_fields: np.ndarray, est_fields: np.ndarray
) -> SkillSeries:
    """Scores per time over (T, n_grid) truth/estimate arrays."""
    rmse = np.array([rmse_at(t, e) for t, e in zip(truth_fields, est_fields)])
    corr = np.array([corr_at(t, e) for t, e in zip(truth_fields, est_fields)])
    return SkillSeries(times=np.asarray(times, dtype=float), rmse=rmse, corr=corr)


def energy_occupancy(energies: np.ndarray, band: tuple[float, float]) -> float:
    """Fraction of entries inside [band_min, band_max]; energies may be any
    shape covering (member, time) pairs."""
    e = np.asarray(energies, dtype=float)
    if e.size == 0:
        raise ValueError("energies must be nonempty")
    lo, hi = band
    return float(np.mean((e >= lo) & (e <= hi)))
