"""Ensemble-of-agents emulator of the constrained filter.

One stochastic policy per ensemble member is trained on (feature, analysis)
pairs extracted from a constrained-filter run: the action predicts the next
analysis state at a grid point from the member's recent history, the
localized observed-activity neighborhood at the target time, and the target
time and location.  Training is primal-dual: the regression loss carries a
multiplier-weighted energy-band penalty, and the multiplier follows the
inverse-deviation update with decay.  Activity positivity is a hard bound on
the action space, never a post-hoc repair of trained estimates.

Inference rolls each agent forward autoregressively on its own predictions
and aggregates the agents into ensemble mean and spread.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from . import network
from .filters import gaspari_cohn
from .model import ModelParams, anomaly_floor, grid_mean_energy, grid_mean_energy_gradient

# deviation floor before inversion, and the scalar band reference (half the
# default band width) entering the inverse-form violation
DEVIATION_FLOOR = 1e-8
BAND_REFERENCE = 0.0325

VARIABLES = ("K", "R", "Z", "A")


class NormalizerError(RuntimeError):
    """Feature normalization requested before fitting."""


# ---------------------------------------------------------------------------
# features


@dataclass(frozen=True)
class FeatureSpec:
    """Layout of the per-grid-point feature vector: current (K, R, Z, A),
    Gaspari-Cohn-weighted observed-activity neighborhood, two backward
    tendencies per variable, target time, and grid index."""

    neighborhood_offsets: tuple[int, ...]
    neighborhood_weights: tuple[float, ...]

    @classmethod
    def for_localization(cls, cutoff: float) -> "FeatureSpec":
        reach = int(np.ceil(2.0 * cutoff)) - 1
        offsets = tuple(range(-reach, reach + 1))
        weights = tuple(gaspari_cohn(abs(o), cutoff) for o in offsets)
        return cls(neighborhood_offsets=offsets, neighborhood_weights=weights)

    @property
    def length(self) -> int:
        return 4 + len(self.neighborhood_offsets) + 8 + 2


def fields_to_kzra(state_vec: np.ndarray, n_grid: int, q_tilde: float) -> np.ndarray:
    """(n_grid, 4) array of (K, R, Z, A) from a stacked (K, R, Q, A) vector,
    with Z = Q - q_tilde (K + R)."""
    k = state_vec[:n_grid]
    r = state_vec[n_grid : 2 * n_grid]
    q = state_vec[2 * n_grid : 3 * n_grid]
    a = state_vec[3 * n_grid :]
    z = q - q_tilde * (k + r)
    return np.column_stack([k, r, z, a])


def kzra_to_state_vector(fields: np.ndarray, q_tilde: float) -> np.ndarray:
    """Inverse of fields_to_kzra: stacked (K, R, Q, A) with Q reconstructed."""
    k, r, z, a = fields.T
    q = z + q_tilde * (k + r)
    return np.concatenate([k, r, q, a])


def assemble_features(
    history: tuple[np.ndarray, np.ndarray, np.ndarray],
    obs_values: np.ndarray,
    target_time: float,
    assim_interval: float,
    spec: FeatureSpec,
) -> np.ndarray:
    """Raw (n_grid, feature) matrix for one member and one target time.

    history holds the member's (K, R, Z, A) field arrays, shape (n_grid, 4),
    at the three analysis times preceding the target; obs_values is the
    observed activity at the target time.
    """
    h0, h1, h2 = history
    n = h2.shape[0]
    offsets = np.asarray(spec.neighborhood_offsets)
    weights = np.asarray(spec.neighborhood_weights)
    idx = (np.arange(n)[:, None] + offsets[None, :]) % n
    neighborhood = obs_values[idx] * weights[None, :]
    tend1 = (h2 - h1) / assim_interval
    tend2 = (h1 - h0) / assim_interval
    time_col = np.full((n, 1), target_time)
    grid_col = np.arange(n, dtype=float)[:, None]
    return np.hstack([h2, neighborhood, tend1, tend2, time_col, grid_col])


@dataclass
class Normalizer:
    """Per-feature and per-target-variable affine min-max maps onto [-1, 1]."""

    feat_min: np.ndarray | None = None
    feat_max: np.ndarray | None = None
    target_min: np.ndarray | None = None
    target_max: np.ndarray | None = None

    @property
    def fitted(self) -> bool:
        return self.feat_min is not None

    def fit(self, features: np.ndarray, targets: np.ndarray) -> "Normalizer":
        self.feat_min = features.min(axis=0)
        self.feat_max = features.max(axis=0)
        self.target_min = targets.min(axis=0)
        self.target_max = targets.max(axis=0)
        return self

    @staticmethod
    def _fwd(x, lo, hi):
        span = hi - lo
        safe = np.where(span > 0, span, 1.0)
        out = 2.0 * (x - lo) / safe - 1.0
        return np.where(span > 0, out, 0.0)

    @staticmethod
    def _inv(y, lo, hi):
        return (y + 1.0) * (hi - lo) / 2.0 + lo

    def _require_fitted(self):
        if not self.fitted:
            raise NormalizerError("normalizer has not been fitted")

    def transform_features(self, raw: np.ndarray, clip_warn: bool = False) -> np.ndarray:
        self._require_fitted()
        out = self._fwd(raw, self.feat_min, self.feat_max)
        if clip_warn and np.any(np.abs(out) > 1.5):
            warnings.warn(
                "feature outside the +-1.5 normalization range; clipping",
                RuntimeWarning,
                stacklevel=2,
            )
            out = np.clip(out, -1.5, 1.5)
        return out

    def transform_targets(self, raw: np.ndarray) -> np.ndarray:
        self._require_fitted()
        return self._fwd(raw, self.target_min, self.target_max)

    def inverse_targets(self, normed: np.ndarray) -> np.ndarray:
        self._require_fitted()
        return self._inv(normed, self.target_min, self.target_max)

    def target_scale(self) -> np.ndarray:
        """d physical / d normalized for the four target variables."""
        self._require_fitted()
        return (self.target_max - self.target_min) / 2.0


def build_features(
    history: tuple[np.ndarray, np.ndarray, np.ndarray],
    obs_values: np.ndarray,
    grid_index: int,
    normalizer: Normalizer,
    target_time: float,
    assim_interval: float,
    spec: FeatureSpec,
) -> np.ndarray:
    """Normalized feature vector for one grid point (one agent input)."""
    raw = assemble_features(history, obs_values, target_time, assim_interval, spec)
    return normalizer.transform_features(raw[grid_index])


# ---------------------------------------------------------------------------
# action space


@dataclass(frozen=True)
class ActionBounds:
    """Per-output clamp range in normalized action units; the activity
    dimension's lower bound encodes the physical floor so positivity holds by
    construction of the action map."""

    lower: np.ndarray
    upper: np.ndarray
    a_floor: float
    a_bar: float

    def __post_init__(self):
        if not np.all(self.lower < self.upper):
            raise ValueError("lower bounds must lie below upper bounds")

    @classmethod
    def from_normalizer(
        cls, normalizer: Normalizer, a_floor: float, a_bar: float, halo: float = 1.5
    ) -> "ActionBounds":
        lower = np.full(4, -halo)
        upper = np.full(4, halo)
        floor_anom = anomaly_floor(a_floor, a_bar)
        lo_a, hi_a = normalizer.target_min[3], normalizer.target_max[3]
        if hi_a > lo_a:
            lower[3] = max(lower[3], 2.0 * (floor_anom - lo_a) / (hi_a - lo_a) - 1.0)
        return cls(lower=lower, upper=upper, a_floor=a_floor, a_bar=a_bar)


def clamp_action(raw: np.ndarray, bounds: ActionBounds) -> np.ndarray:
    """Elementwise clip onto the action box; idempotent."""
    return np.clip(raw, bounds.lower, bounds.upper)


def denormalize_action(
    normed: np.ndarray, normalizer: Normalizer, bounds: ActionBounds
) -> np.ndarray:
    """Physical (K, R, Z, A) from a clamped normalized action, with the
    activity floor enforced exactly."""
    phys = normalizer.inverse_targets(normed)
    floor_anom = anomaly_floor(bounds.a_floor, bounds.a_bar)
    if phys.ndim == 1:
        phys[3] = max(phys[3], floor_anom)
    else:
        phys[..., 3] = np.maximum(phys[..., 3], floor_anom)
    return phys


# ---------------------------------------------------------------------------
# dual machinery


@dataclass(frozen=True)
class DualState:
    lam: float = 1.0
    alpha_lam: float = 0.01
    beta: float = 0.001
    epsilon_band: tuple[float, float] = (0.015, 0.08)

    def __post_init__(self):
        if self.lam < 0.0:
            raise ValueError("multiplier must be nonnegative")


def band_distance(energy: float, band: tuple[float, float]) -> float:
    """Distance of the grid-mean energy to the admissible band (0 inside)."""
    lo, hi = band
    return max(0.0, energy - hi) + max(0.0, lo - energy)


def constraint_violation(
    fields: np.ndarray, params: ModelParams, dual: DualState
) -> tuple[float, np.ndarray]:
    """Inverse-form violation of the energy band for one predicted field.

    fields is (n_grid, 4) in (K, R, Z, A).  Returns zeta = 1/deviation -
    1/reference (positive when the band is satisfied) and the gradient of the
    band distance with respect to the fields, chained through the moisture
    reconstruction Q = Z + q_tilde (K + R).
    """
    vec = kzra_to_state_vector(fields, params.q_tilde)
    e = grid_mean_energy(vec, params)
    dist = band_distance(e, dual.epsilon_band)
    deviation = dist + DEVIATION_FLOOR
    zeta = 1.0 / deviation - 1.0 / BAND_REFERENCE
    lo, hi = dual.epsilon_band
    slope = (1.0 if e > hi else 0.0) - (1.0 if e < lo else 0.0)
    if slope == 0.0:
        grad = np.zeros_like(fields)
    else:
        g = grid_mean_energy_gradient(vec, params)
        n = params.n_grid
        gk, gr, gq, ga = g[:n], g[n : 2 * n], g[2 * n : 3 * n], g[3 * n :]
        grad = slope * np.column_stack(
            [gk + params.q_tilde * gq, gr + params.q_tilde * gq, gq, ga]
        )
    return zeta, grad


def dual_update(dual: DualState, zeta: float) -> DualState:
    """Multiplier recursion lam <- max(0, lam - alpha * zeta - beta * lam)."""
    new_lam = max(0.0, dual.lam - dual.alpha_lam * zeta - dual.beta * dual.lam)
    return replace(dual, lam=new_lam)


def penalized_reward(mse: float, dual: DualState, zeta: float) -> float:
    """Reward with the multiplier-weighted violation subtracted; zeta uses
    the inverse form, so only its negative part (a genuine deep violation)
    penalizes."""
    return -mse - dual.lam * max(0.0, -zeta)


# ---------------------------------------------------------------------------
# datasets


@dataclass
class MemberDataset:
    """Training pairs for one member: raw features and raw (K, R, Z, A)
    analysis targets per target time and grid point."""

    member: int
    times: np.ndarray            # (T,) target times
    features: np.ndarray         # (T, n_grid, feature_dim)
    targets: np.ndarray          # (T, n_grid, 4)

    def __post_init__(self):
        if self.times.shape[0] != self.features.shape[0] or self.times.shape[0] != self.targets.shape[0]:
            raise ValueError("times, features and targets must align")


def dataset_from_analyses(
    member: int,
    analysis_states: list[np.ndarray],
    analysis_times: list[float],
    obs_values_by_time: list[np.ndarray],
    params: ModelParams,
    spec: FeatureSpec,
) -> MemberDataset:
    """Training pairs from one member's analysis trajectory.

    analysis_states are stacked (K, R, Q, A) vectors at consecutive
    assimilation times; obs_values_by_time aligns with analysis_times.  Each
    record uses three consecutive analyses as history, the observation at the
    next assimilation time, and that next analysis as the target.
    """
    if len(analysis_states) < 4:
        raise ValueError("need at least four consecutive analysis times")
    n = params.n_grid
    interval = analysis_times[1] - analysis_times[0]
    fields = [fields_to_kzra(v, n, params.q_tilde) for v in analysis_states]
    feats, targs, times = [], [], []
    for k in range(2, len(analysis_states) - 1):
        raw = assemble_features(
            (fields[k - 2], fields[k - 1], fields[k]),
            obs_values_by_time[k + 1],
            analysis_times[k + 1],
            interval,
            spec,
        )
        feats.append(raw)
        targs.append(fields[k + 1])
        times.append(analysis_times[k + 1])
    return MemberDataset(
        member=member,
        times=np.asarray(times),
        features=np.asarray(feats),
        targets=np.asarray(targs),
    )


def fit_normalizer(datasets: list[MemberDataset]) -> Normalizer:
    feats = np.concatenate([d.features.reshape(-1, d.features.shape[-1]) for d in datasets])
    targs = np.concatenate([d.targets.reshape(-1, 4) for d in datasets])
    return Normalizer().fit(feats, targs)


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 40
    batch_times: int = 8
    learning_rate: float = 1e-3
    lr_decay_epochs: float = 60.0  # halves roughly every this many epochs
    feature_noise: float = 0.0  # train-time jitter on state-history features
    tendency_noise_factor: float = 2.0  # tendency columns amplify rollout error
    amplitude_noise: float = 0.0  # per-slice scaling jitter of the anchor state
    predict_increment: bool = True  # policy outputs a correction to persistence
    rollout_epochs: int = 0  # extra epochs trained on the agent's own rollout
    hidden: tuple[int, ...] = (64, 64)
    spread_weight: float = 0.1
    lambda_init: float = 1.0
    alpha_lambda: float = 0.01
    beta: float = 0.001
    energy_band: tuple[float, float] = (0.015, 0.08)
    enforce_constraints: bool = True
    seed: int = 0


@dataclass
class TrainedAgent:
    member: int
    params: network.PolicyParams
    dual: DualState
    predict_increment: bool = True
    lambda_trace: list[float] = field(default_factory=list)
    loss_trace: list[float] = field(default_factory=list)


def _batch_penalty(
    pred_norm: np.ndarray,
    n_grid: int,
    params: ModelParams,
    dual: DualState,
    normalizer: Normalizer,
    bounds: ActionBounds,
):
    """Band-distance penalty, its gradient in normalized action units, and
    the averaged inverse-form zeta over the slices of one minibatch.

    The energy is evaluated on the realizable actions (clamped onto the
    action box, activity floored), which keeps it inside the log domain; the
    gradient is zero through clamped components."""
    n_slices = pred_norm.shape[0] // n_grid
    scale = normalizer.target_scale()
    clamped = clamp_action(pred_norm, bounds)
    free = (pred_norm > bounds.lower) & (pred_norm < bounds.upper)
    total_dist = 0.0
    total_zeta = 0.0
    grad = np.zeros_like(pred_norm)
    for s in range(n_slices):
        rows = slice(s * n_grid, (s + 1) * n_grid)
        fields = denormalize_action(clamped[rows], normalizer, bounds)
        zeta, dist_grad = constraint_violation(fields, params, dual)
        total_zeta += zeta
        total_dist += band_distance(
            grid_mean_energy(kzra_to_state_vector(fields, params.q_tilde), params),
            dual.epsilon_band,
        )
        grad[rows] = dist_grad * scale[None, :] * free[rows]
    return (
        total_dist / n_slices,
        grad / n_slices,
        total_zeta / n_slices,
    )


def _rollout_features(
    agent: TrainedAgent,
    dataset: MemberDataset,
    normalizer: Normalizer,
    bounds: ActionBounds,
    spec: FeatureSpec,
    interval: float,
) -> np.ndarray:
    """Features the agent would see rolling autoregressively over its own
    training window (teacher trajectory replaced by the agent's predictions).

    The observed-activity sequence and the initial three-state history are
    reconstructed from the dataset rows: the neighborhood's center column is
    the raw observation, and the backward tendencies recover the two earlier
    states."""
    n_grid = dataset.features.shape[1]
    nb = dataset.features.shape[2] - 14
    center = 4 + nb // 2
    obs_seq = dataset.features[:, :, center]
    h2 = dataset.features[0, :, :4].copy()
    tend1 = dataset.features[0, :, 4 + nb : 8 + nb]
    tend2 = dataset.features[0, :, 8 + nb : 12 + nb]
    h1 = h2 - tend1 * interval
    h0 = h1 - tend2 * interval
    history = [h0, h1, h2]
    out = np.empty_like(dataset.features)
    for t in range(dataset.times.shape[0]):
        raw = assemble_features(
            tuple(history), obs_seq[t], float(dataset.times[t]), interval, spec
        )
        out[t] = raw
        x = np.clip(normalizer.transform_features(raw), -1.5, 1.5)
        pred, _ = network.forward(agent.params, x)
        if agent.predict_increment:
            pred = pred + normalizer.transform_targets(raw[:, :4])
        pred = clamp_action(pred, bounds)
        fields = denormalize_action(pred, normalizer, bounds)
        history = [history[1], history[2], fields]
    return out


def train_agent(
    dataset: MemberDataset,
    normalizer: Normalizer,
    bounds: ActionBounds,
    params: ModelParams,
    config: TrainConfig,
    start: TrainedAgent | None = None,
    epoch_offset: int = 0,
    feature_spec: FeatureSpec | None = None,
) -> TrainedAgent:
    """Primal-dual training of one agent on its member's records.

    Per minibatch: a primal step on MSE + lam * band-distance, a spread update
    from the Gaussian likelihood, then the dual update from the inverse-form
    violation of the post-step predictions.  Epoch-level randomness is keyed
    by (seed, member, epoch).

    After the standard epochs, rollout_epochs further epochs train on a
    half-and-half mix of teacher records and records whose features come from
    the agent's own autoregressive rollout (regenerated each epoch), so the
    policy learns to correct back onto the reference trajectory from its own
    drifted states; requires feature_spec.
    """
    n_grid = dataset.features.shape[1]
    feat_dim = dataset.features.shape[2]
    spec = network.NetworkSpec(input_dim=feat_dim, output_dim=4, hidden=config.hidden)
    if start is None:
        init_rng = np.random.default_rng(
            np.random.SeedSequence(entropy=config.seed, spawn_key=(6, dataset.member))
        )
        agent_params = network.init_params(spec, init_rng)
        dual = DualState(
            lam=config.lambda_init if config.enforce_constraints else 0.0,
            alpha_lam=config.alpha_lambda,
            beta=config.beta,
            epsilon_band=config.energy_band,
        )
        agent = TrainedAgent(
            member=dataset.member, params=agent_params, dual=dual,
            predict_increment=config.predict_increment,
        )
    else:
        agent = start
    opt_state = network.OptimizerState.for_params(agent.params)

    n_neighborhood = feat_dim - 14
    noise_template = np.zeros(feat_dim)
    if not config.predict_increment:
        noise_template[:4] = config.feature_noise
    noise_template[4 + n_neighborhood : 12 + n_neighborhood] = (
        config.tendency_noise_factor * config.feature_noise
    )
    x_all = normalizer.transform_features(
        dataset.features.reshape(-1, feat_dim)
    ).reshape(dataset.features.shape)
    y_all = normalizer.transform_targets(dataset.targets.reshape(-1, 4)).reshape(
        dataset.targets.shape
    )
    # persistence anchor: the current (K, R, Z, A) features in target units
    cur_all = normalizer.transform_targets(
        dataset.features[:, :, :4].reshape(-1, 4)
    ).reshape(dataset.targets.shape)
    # feature-unit equivalent of a target-unit anchor perturbation
    feat_scale4 = (normalizer.feat_max[:4] - normalizer.feat_min[:4]) / 2.0
    feat_scale4 = np.where(feat_scale4 > 0, feat_scale4, 1.0)
    anchor_to_feature = normalizer.target_scale() / feat_scale4
    n_times = dataset.times.shape[0]

    interval = (
        float(dataset.times[1] - dataset.times[0]) if n_times > 1 else 1.0
    )
    total_epochs = config.epochs + config.rollout_epochs
    if config.rollout_epochs > 0 and feature_spec is None:
        raise ValueError("rollout training needs the feature spec")
    x_pool, y_pool, cur_pool = x_all, y_all, cur_all
    pool_times = n_times
    for epoch in range(total_epochs):
        rng = np.random.default_rng(
            np.random.SeedSequence(
                entropy=config.seed,
                spawn_key=(7, dataset.member, epoch_offset + epoch),
            )
        )
        if epoch >= config.epochs:
            # refresh the rollout under the current policy and mix it with
            # the teacher records
            roll_raw = _rollout_features(
                agent, dataset, normalizer, bounds, feature_spec, interval
            )
            roll_x = np.clip(
                normalizer.transform_features(
                    roll_raw.reshape(-1, feat_dim)
                ).reshape(roll_raw.shape),
                -1.5,
                1.5,
            )
            roll_cur = normalizer.transform_targets(
                roll_raw[:, :, :4].reshape(-1, 4)
            ).reshape(dataset.targets.shape)
            roll_y = normalizer.transform_targets(
                dataset.targets.reshape(-1, 4)
            ).reshape(dataset.targets.shape)
            x_pool = np.concatenate([x_all, roll_x])
            y_pool = np.concatenate([y_all, roll_y])
            cur_pool = np.concatenate([cur_all, roll_cur])
            pool_times = 2 * n_times
        order = rng.permutation(pool_times)
        lr = config.learning_rate / (
            1.0 + (epoch_offset + epoch) / config.lr_decay_epochs
        )
        epoch_losses = []
        for lo in range(0, pool_times, config.batch_times):
            sel = order[lo : lo + config.batch_times]
            x = x_pool[sel].reshape(-1, feat_dim)
            y = y_pool[sel].reshape(-1, 4)
            cur = cur_pool[sel].reshape(-1, 4)
            if config.feature_noise > 0.0 or config.amplitude_noise > 0.0:
                # perturb the current-state anchor and keep the regression
                # target absolute, so the policy learns the correction from a
                # drifted state back onto the reference.  The amplitude term
                # scales whole time slices (the unstable common mode of an
                # autoregressive rollout); the white term adds pointwise
                # jitter; tendency columns get independent jitter since they
                # amplify rollout error.  Observed values, time and location
                # stay clean because they are exact at rollout.
                x = x + noise_template * rng.standard_normal(x.shape)
                if agent.predict_increment:
                    delta = config.feature_noise * rng.standard_normal(cur.shape)
                    if config.amplitude_noise > 0.0:
                        n_slices = cur.shape[0] // n_grid
                        gamma = config.amplitude_noise * rng.standard_normal(n_slices)
                        delta = delta + np.repeat(gamma, n_grid)[:, None] * cur
                    cur = cur + delta
                    x = x.copy()
                    x[:, :4] += delta * anchor_to_feature
            if agent.predict_increment:
                y = y - cur
            if config.enforce_constraints:
                pred, _ = network.forward(agent.params, x)
                if agent.predict_increment:
                    pred = pred + cur
                dist, dist_grad, _ = _batch_penalty(
                    pred, n_grid, params, agent.dual, normalizer, bounds
                )
                loss, grads = network.loss_and_gradient(
                    agent.params, x, y,
                    penalty_weight=agent.dual.lam,
                    penalty_value=dist,
                    penalty_grad=dist_grad,
                )
            else:
                loss, grads = network.loss_and_gradient(agent.params, x, y)
            _, spread_grad = network.spread_nll_and_gradient(agent.params, x, y)
            agent.params = network.optimizer_step(
                agent.params, grads, opt_state, lr,
                spread_grad=config.spread_weight * spread_grad,
            )
            if config.enforce_constraints:
                post_pred, _ = network.forward(agent.params, x)
                if agent.predict_increment:
                    post_pred = post_pred + cur
                _, _, zeta = _batch_penalty(
                    post_pred, n_grid, params, agent.dual, normalizer, bounds
                )
                agent.dual = dual_update(agent.dual, zeta)
            epoch_losses.append(loss)
        agent.lambda_trace.append(agent.dual.lam)
        agent.loss_trace.append(float(np.mean(epoch_losses)))
    return agent


def train_agents(
    datasets: list[MemberDataset],
    normalizer: Normalizer,
    bounds: ActionBounds,
    params: ModelParams,
    config: TrainConfig,
    feature_spec: FeatureSpec | None = None,
) -> list[TrainedAgent]:
    return [
        train_agent(ds, normalizer, bounds, params, config, feature_spec=feature_spec)
        for ds in datasets
    ]


# ---------------------------------------------------------------------------
# inference


@dataclass
class InferenceResult:
    times: np.ndarray             # (T,)
    mean: np.ndarray              # (T, n_grid, 4) ensemble mean, (K, R, Z, A)
    lower: np.ndarray             # mean - 2 sigma
    upper: np.ndarray             # mean + 2 sigma
    member_fields: np.ndarray     # (T, N, n_grid, 4)
    member_energies: np.ndarray   # (T, N) grid-mean band energies
    step_seconds: list[float] = field(default_factory=list)


def infer(
    agents: list[TrainedAgent],
    initial_histories: list[tuple[np.ndarray, np.ndarray, np.ndarray]],
    obs_series: list[np.ndarray],
    obs_times: list[float],
    normalizer: Normalizer,
    bounds: ActionBounds,
    params: ModelParams,
    spec: FeatureSpec,
    assim_interval: float,
) -> InferenceResult:
    """Autoregressive rollout of all agents along the observation stream.

    Each agent starts from its member's last three analysis fields and then
    consumes its own predictions; the emitted field at each time is the
    clamped, denormalized policy mean.  Ensemble spread combines the
    cross-agent variance of the means with each agent's Gaussian spread.
    """
    if len(agents) != len(initial_histories):
        raise ValueError("need one initial history per agent")
    n = params.n_grid
    histories = [list(h) for h in initial_histories]
    n_agents = len(agents)
    times_out, means, lowers, uppers = [], [], [], []
    member_fields = np.zeros((len(obs_series), n_agents, n, 4))
    member_energies = np.zeros((len(obs_series), n_agents))
    spread_phys = np.array(
        [np.exp(a.params.log_spread) * normalizer.target_scale() for a in agents]
    )
    step_seconds = []
    for t_idx, (obs_values, t_target) in enumerate(zip(obs_series, obs_times)):
        t0 = time.perf_counter()
        fields_now = np.zeros((n_agents, n, 4))
        for i, agent in enumerate(agents):
            raw = assemble_features(
                tuple(histories[i]), obs_values, t_target, assim_interval, spec
            )
            x = normalizer.transform_features(raw, clip_warn=True)
            pred, _ = network.forward(agent.params, x)
            if agent.predict_increment:
                pred = pred + normalizer.transform_targets(raw[:, :4])
            pred = clamp_action(pred, bounds)
            fields_now[i] = denormalize_action(pred, normalizer, bounds)
            histories[i] = [histories[i][1], histories[i][2], fields_now[i]]
        step_seconds.append(time.perf_counter() - t0)
        member_fields[t_idx] = fields_now
        for i in range(n_agents):
            member_energies[t_idx, i] = grid_mean_energy(
                kzra_to_state_vector(fields_now[i], params.q_tilde), params
            )
        mean = fields_now.mean(axis=0)
        var_across = fields_now.var(axis=0)
        total_sigma = np.sqrt(var_across + np.mean(spread_phys**2, axis=0)[None, :])
        times_out.append(t_target)
        means.append(mean)
        lowers.append(mean - 2.0 * total_sigma)
        uppers.append(mean + 2.0 * total_sigma)
    return InferenceResult(
        times=np.asarray(times_out),
        mean=np.asarray(means),
        lower=np.asarray(lowers),
        upper=np.asarray(uppers),
        member_fields=member_fields,
        member_energies=member_energies,
        step_seconds=step_seconds,
    )


# ---------------------------------------------------------------------------
# tabular oracle for the constraint-augmented backup


@dataclass(frozen=True)
class TabularMDP:
    rewards: np.ndarray          # (S, A)
    transitions: np.ndarray      # (S, A, S), rows sum to one
    deviations: np.ndarray       # (S, A) positive energy deviations
    epsilon: float

    def __post_init__(self):
        sums = self.transitions.sum(axis=2)
        if not np.allclose(sums, 1.0, atol=1e-10):
            raise ValueError("transition rows must sum to one")
        if np.any(self.deviations <= 0.0):
            raise ValueError("deviations must be positive")


def constrained_bellman(
    mdp: TabularMDP, lam: float, gamma: float, values: np.ndarray
) -> np.ndarray:
    """One application of the penalty-augmented backup by full enumeration."""
    penalty = lam * (1.0 / mdp.deviations - 1.0 / mdp.epsilon)
    q = mdp.rewards - penalty + gamma * (mdp.transitions @ values)
    return q.max(axis=1)


def tabular_bellman_oracle(
    mdp: TabularMDP, lam: float, gamma: float, v1: np.ndarray, v2: np.ndarray
):
    """Backups of two value tables plus their sup-norm contraction ratio
    (0 when the tables coincide)."""
    if not 0.0 < gamma < 1.0:
        raise ValueError("gamma must lie in (0, 1)")
    t1 = constrained_bellman(mdp, lam, gamma, v1)
    t2 = constrained_bellman(mdp, lam, gamma, v2)
    denom = float(np.max(np.abs(v1 - v2)))
    ratio = 0.0 if denom == 0.0 else float(np.max(np.abs(t1 - t2))) / denom
    return t1, t2, ratio


# ---------------------------------------------------------------------------
# KKT diagnostics


@dataclass(frozen=True)
class KKTReport:
    stationarity: float
    feasibility_gap: float
    multiplier: float
    slackness: float


def kkt_residuals(
    agent: TrainedAgent,
    dataset: MemberDataset,
    normalizer: Normalizer,
    bounds: ActionBounds,
    params: ModelParams,
    max_times: int | None = None,
) -> KKTReport:
    """Four KKT diagnostics of the trained policy on a dataset slice.

    feasibility_gap = 1/reference - mean(1/deviation) over the slice's
    predicted fields, nonpositive when the band constraint holds deeply;
    slackness is the multiplier-gap product by definition.
    """
    n_grid = dataset.features.shape[1]
    feat_dim = dataset.features.shape[2]
    sel = slice(None) if max_times is None else slice(0, max_times)
    x = normalizer.transform_features(
        dataset.features[sel].reshape(-1, feat_dim)
    )
    y = normalizer.transform_targets(dataset.targets[sel].reshape(-1, 4))
    cur = normalizer.transform_targets(dataset.features[sel][:, :, :4].reshape(-1, 4))
    if agent.predict_increment:
        y = y - cur
    pred, _ = network.forward(agent.params, x)
    abs_pred = pred + cur if agent.predict_increment else pred
    dist, dist_grad, zeta = _batch_penalty(
        abs_pred, n_grid, params, agent.dual, normalizer, bounds
    )
    _, grads = network.loss_and_gradient(
        agent.params, x, y,
        penalty_weight=agent.dual.lam,
        penalty_value=dist,
        penalty_grad=dist_grad,
    )
    grad_w, grad_b = grads
    stationarity = float(
        np.sqrt(sum(float(np.sum(g**2)) for g in grad_w + grad_b))
    )
    gap = -zeta  # zeta = 1/deviation - 1/reference averaged over slices
    return KKTReport(
        stationarity=stationarity,
        feasibility_gap=gap,
        multiplier=agent.dual.lam,
        slackness=agent.dual.lam * gap,
    )
