"""Unconstrained ensemble filters: perturbed-observation EnKF and serial EAKF,
both with Gaspari-Cohn covariance localization on the periodic grid.

State vectors stack the four fields as (K, R, Q, A) blocks.  The observation
is total convective activity at every grid point; a subset of observed grid
indices can be passed for diagnostic experiments.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import ModelParams, ModelState, state_from_vector, step

# ridge added to the innovation matrix before inversion
INNOVATION_RIDGE = 1e-12


class FilterDivergence(RuntimeError):
    """An analysis update produced a non-finite state."""


@dataclass
class Ensemble:
    """N model states sharing a common time."""

    members: list[ModelState]
    time: float

    def __post_init__(self):
        if len(self.members) < 1:
            raise ValueError("ensemble needs at least one member")
        sizes = {m.k_field.size for m in self.members}
        if len(sizes) != 1:
            raise ValueError("members must share the grid size")

    @property
    def size(self) -> int:
        return len(self.members)

    @property
    def n_grid(self) -> int:
        return self.members[0].k_field.size

    def as_matrix(self) -> np.ndarray:
        """(N, 4 * n_grid) matrix of stacked member vectors."""
        return np.array([m.stacked() for m in self.members])

    @classmethod
    def from_matrix(cls, mat: np.ndarray, n_grid: int, time: float) -> "Ensemble":
        members = [state_from_vector(row, n_grid, time) for row in mat]
        return cls(members=members, time=time)


@dataclass(frozen=True)
class EnsembleStats:
    mean: np.ndarray
    covariance: np.ndarray
    localized_covariance: np.ndarray


@dataclass(frozen=True)
class LocalizationSpec:
    """Gaspari-Cohn half-width in grid-distance units; support radius 2*cutoff."""

    cutoff: float

    def __post_init__(self):
        if self.cutoff <= 0.0:
            raise ValueError("cutoff must be > 0")


def gaspari_cohn(distance: float, cutoff: float) -> float:
    """Fifth-order piecewise-rational compactly supported taper.

    Unit value at distance 0, zero at distance >= 2 * cutoff.
    """
    r = abs(distance) / cutoff
    if r >= 2.0:
        return 0.0
    if r <= 1.0:
        return ((((-0.25 * r + 0.5) * r + 0.625) * r - 5.0 / 3.0) * r**2) + 1.0
    return (
        ((((r / 12.0 - 0.5) * r + 0.625) * r + 5.0 / 3.0) * r - 5.0) * r
        + 4.0
        - 2.0 / (3.0 * r)
    )


def periodic_grid_distance(i: int, j: int, n_grid: int) -> int:
    """Shorter arc between grid indices on the periodic belt."""
    d = abs(i - j) % n_grid
    return min(d, n_grid - d)


def taper_matrix(n_grid: int, loc: LocalizationSpec) -> np.ndarray:
    """n_grid x n_grid Gaspari-Cohn weights for periodic grid distances."""
    idx = np.arange(n_grid)
    dist = np.abs(idx[:, None] - idx[None, :])
    dist = np.minimum(dist, n_grid - dist)
    flat = np.array([gaspari_cohn(d, loc.cutoff) for d in range(n_grid)])
    return flat[dist]


def full_taper(n_grid: int, loc: LocalizationSpec) -> np.ndarray:
    """Spatial taper tiled over the four variable blocks (same taper for all
    variable pairs)."""
    return np.tile(taper_matrix(n_grid, loc), (4, 4))


def ensemble_stats(ensemble: Ensemble, loc: LocalizationSpec | None = None) -> EnsembleStats:
    """Sample mean and covariance with 1/(N-1) normalization, plus the
    Schur-tapered covariance when a localization spec is given."""
    if ensemble.size < 2:
        raise ValueError("need at least two members for sample statistics")
    mat = ensemble.as_matrix()
    mean = mat.mean(axis=0)
    anom = mat - mean
    cov = anom.T @ anom / (ensemble.size - 1)
    if loc is None:
        cov_loc = cov
    else:
        cov_loc = cov * full_taper(ensemble.n_grid, loc)
    return EnsembleStats(mean=mean, covariance=cov, localized_covariance=cov_loc)


def forecast(
    ensemble: Ensemble,
    params: ModelParams,
    steps: int,
    rngs: list[np.random.Generator],
) -> Ensemble:
    """Advance each member independently with its own noise stream."""
    if steps < 0:
        raise ValueError("steps must be >= 0")
    if len(rngs) != ensemble.size:
        raise ValueError("need one RNG stream per member")
    members = []
    for member, rng in zip(ensemble.members, rngs):
        st = member
        for _ in range(steps):
            st = step(st, params, rng.standard_normal(params.n_grid))
        members.append(st if steps > 0 else member.copy())
    return Ensemble(members=members, time=ensemble.time + steps * params.dt)


def _check_finite(mat: np.ndarray, time: float):
    if not np.isfinite(mat).all():
        member, flat = np.argwhere(~np.isfinite(mat))[0]
        raise FilterDivergence(
            f"non-finite analysis at t={time:.4f}, member {member}, "
            f"state index {flat}"
        )


def enkf_gain(
    stats: EnsembleStats, params: ModelParams, obs_variance: float, obs_indices: np.ndarray
) -> np.ndarray:
    """Kalman gain P_loc H^T (H P_loc H^T + R)^-1 for the A-block observation."""
    n = params.n_grid
    cols = 3 * n + obs_indices
    p_ho = stats.localized_covariance[:, cols]
    p_oo = stats.localized_covariance[np.ix_(cols, cols)]
    innov = p_oo + obs_variance * np.eye(obs_indices.size)
    innov[np.diag_indices_from(innov)] += INNOVATION_RIDGE
    return np.linalg.solve(innov.T, p_ho.T).T


def enkf_analysis(
    ensemble: Ensemble,
    obs_values: np.ndarray,
    obs_variance: float,
    loc: LocalizationSpec,
    params: ModelParams,
    rng: np.random.Generator,
    obs_indices: np.ndarray | None = None,
    perturbations: np.ndarray | None = None,
) -> Ensemble:
    """Perturbed-observation EnKF update.

    Each member is moved by the shared localized gain applied to its own
    perturbed innovation.  Perturbations may be supplied explicitly to share
    draws across filter variants; otherwise they are drawn from rng with
    standard deviation sqrt(obs_variance).
    """
    n = params.n_grid
    if obs_indices is None:
        obs_indices = np.arange(n)
    obs_indices = np.asarray(obs_indices, dtype=int)
    stats = ensemble_stats(ensemble, loc)
    gain = enkf_gain(stats, params, obs_variance, obs_indices)
    mat = ensemble.as_matrix()
    if perturbations is None:
        perturbations = np.sqrt(obs_variance) * rng.standard_normal(
            (ensemble.size, obs_indices.size)
        )
    predicted = mat[:, 3 * n + obs_indices] + params.a_bar
    innovations = obs_values[obs_indices] + perturbations - predicted
    out = mat + innovations @ gain.T
    _check_finite(out, ensemble.time)
    return Ensemble.from_matrix(out, n, ensemble.time)


def eakf_analysis(
    ensemble: Ensemble,
    obs_values: np.ndarray,
    obs_variance: float,
    loc: LocalizationSpec,
    params: ModelParams,
    obs_indices: np.ndarray | None = None,
) -> Ensemble:
    """Deterministic ensemble adjustment update, observations processed
    serially in grid-index order.

    For each scalar observation the observation-space ensemble is shifted and
    contracted to match the Kalman posterior mean and variance exactly, and the
    increments are regressed onto the state with Gaspari-Cohn tapering.
    """
    n = params.n_grid
    if obs_indices is None:
        obs_indices = np.arange(n)
    mat = ensemble.as_matrix()
    nens = ensemble.size
    if nens < 2:
        raise ValueError("EAKF needs at least two members")
    gc_by_dist = np.array([gaspari_cohn(d, loc.cutoff) for d in range(n)])
    idx = np.arange(n)
    for j in obs_indices:
        y = mat[:, 3 * n + j] + params.a_bar
        y_mean = y.mean()
        y_var = y.var(ddof=1)
        if y_var <= 0.0:
            continue  # zero prior spread: gain vanishes
        post_var = 1.0 / (1.0 / y_var + 1.0 / obs_variance)
        post_mean = post_var * (y_mean / y_var + obs_values[j] / obs_variance)
        y_new = np.sqrt(post_var / y_var) * (y - y_mean) + post_mean
        obs_inc = y_new - y
        y_anom = y - y_mean
        state_anom = mat - mat.mean(axis=0)
        regress = (state_anom.T @ y_anom) / ((nens - 1) * y_var)
        dist = np.abs(idx - j)
        taper = gc_by_dist[np.minimum(dist, n - dist)]
        regress *= np.tile(taper, 4)
        mat += np.outer(obs_inc, regress)
    _check_finite(mat, ensemble.time)
    return Ensemble.from_matrix(mat, n, ensemble.time)
