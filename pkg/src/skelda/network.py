"""Small feed-forward policy networks with a diagonal-Gaussian output head.

Forward pass, reverse-mode gradients, and an adaptive moment optimizer are
implemented directly on numpy arrays; parameters are plain value objects so
each agent can train on its own worker without shared state.  The spread head
is state independent (one log standard deviation per output dimension) and is
trained from the Gaussian log likelihood separately from the mean-squared
loss, so loss_and_gradient stays a pure regression objective plus whatever
penalty term the caller supplies.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class TrainingError(RuntimeError):
    """Non-finite loss encountered during training."""


@dataclass(frozen=True)
class NetworkSpec:
    input_dim: int
    output_dim: int
    hidden: tuple[int, ...] = (64, 64)

    def __post_init__(self):
        if self.input_dim < 1 or self.output_dim < 1:
            raise ValueError("dimensions must be >= 1")
        if len(self.hidden) == 0 or any(h < 1 for h in self.hidden):
            raise ValueError("hidden must be a nonempty tuple of widths >= 1")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))


@dataclass
class PolicyParams:
    """Layer weights/biases plus the per-output log spread."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    log_spread: np.ndarray

    def copy(self) -> "PolicyParams":
        return PolicyParams(
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.log_spread.copy(),
        )

    def flat(self) -> np.ndarray:
        parts = [a.ravel() for a in self.weights + self.biases] + [self.log_spread]
        return np.concatenate(parts)


def init_params(spec: NetworkSpec, rng: np.random.Generator) -> PolicyParams:
    """Glorot-uniform weights, zero biases, log spread at -1."""
    dims = [spec.input_dim, *spec.hidden, spec.output_dim]
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return PolicyParams(weights, biases, np.full(spec.output_dim, -1.0))


def forward(params: PolicyParams, features: np.ndarray):
    """Mean head and spread for a single feature vector or a batch.

    Returns (mean, spread) with spread = exp(log_spread), shared across the
    batch.  Pure function of its inputs.
    """
    x = np.asarray(features, dtype=float)
    squeeze = x.ndim == 1
    h = x[None, :] if squeeze else x
    if h.shape[1] != params.weights[0].shape[1]:
        raise ValueError(
            f"feature dim {h.shape[1]} does not match input dim "
            f"{params.weights[0].shape[1]}"
        )
    for w, b in zip(params.weights[:-1], params.biases[:-1]):
        h = np.tanh(h @ w.T + b)
    out = h @ params.weights[-1].T + params.biases[-1]
    mean = out[0] if squeeze else out
    return mean, np.exp(params.log_spread)


def _forward_cached(params: PolicyParams, x: np.ndarray):
    activations = [x]
    h = x
    for w, b in zip(params.weights[:-1], params.biases[:-1]):
        h = np.tanh(h @ w.T + b)
        activations.append(h)
    out = h @ params.weights[-1].T + params.biases[-1]
    return out, activations


def _backprop(params: PolicyParams, activations, d_out):
    """Gradients of a scalar loss given d loss / d output for the batch."""
    grad_w = [np.zeros_like(w) for w in params.weights]
    grad_b = [np.zeros_like(b) for b in params.biases]
    delta = d_out
    for layer in range(len(params.weights) - 1, -1, -1):
        grad_w[layer] = delta.T @ activations[layer]
        grad_b[layer] = delta.sum(axis=0)
        if layer > 0:
            back = delta @ params.weights[layer]
            delta = back * (1.0 - activations[layer] ** 2)
    return grad_w, grad_b


def loss_and_gradient(
    params: PolicyParams,
    features: np.ndarray,
    targets: np.ndarray,
    penalty_weight: float = 0.0,
    penalty_value: float = 0.0,
    penalty_grad: np.ndarray | None = None,
):
    """Mean-squared error plus an optional caller-supplied penalty term.

    The loss is mean((output - target)^2) over all batch elements and output
    dimensions, plus penalty_weight * penalty_value whose gradient with
    respect to the network outputs (penalty_grad, batch-shaped) is propagated
    through the network.  Returns (loss, (grad_weights, grad_biases)); the
    log-spread head receives no gradient here (see spread_nll_and_gradient).
    """
    x = np.atleast_2d(np.asarray(features, dtype=float))
    y = np.atleast_2d(np.asarray(targets, dtype=float))
    if x.shape[0] == 0:
        raise ValueError("batch must be nonempty")
    out, activations = _forward_cached(params, x)
    err = out - y
    loss = float(np.mean(err**2))
    d_out = 2.0 * err / err.size
    if penalty_weight != 0.0:
        loss = loss + penalty_weight * penalty_value
        if penalty_grad is not None:
            d_out = d_out + penalty_weight * np.atleast_2d(penalty_grad)
    if not np.isfinite(loss):
        bad = int(np.argmax(~np.isfinite((err**2).sum(axis=1))))
        raise TrainingError(f"non-finite loss at batch index {bad}")
    grad_w, grad_b = _backprop(params, activations, d_out)
    return loss, (grad_w, grad_b)


def spread_nll_and_gradient(params: PolicyParams, features: np.ndarray, targets: np.ndarray):
    """Gaussian negative log likelihood of the targets under (mean, spread),
    reduced to its log-spread gradient (the mean head is trained by the MSE)."""
    x = np.atleast_2d(np.asarray(features, dtype=float))
    y = np.atleast_2d(np.asarray(targets, dtype=float))
    out, _ = _forward_cached(params, x)
    var = np.exp(2.0 * params.log_spread)
    sq = (out - y) ** 2
    nll = float(np.mean(params.log_spread + 0.5 * sq / var))
    grad = np.mean(1.0 - sq / var, axis=0) / y.shape[1]
    return nll, grad


@dataclass
class OptimizerState:
    """Per-parameter first/second moment estimates with bias correction."""

    m_w: list[np.ndarray]
    v_w: list[np.ndarray]
    m_b: list[np.ndarray]
    v_b: list[np.ndarray]
    m_s: np.ndarray
    v_s: np.ndarray
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: PolicyParams) -> "OptimizerState":
        return cls(
            m_w=[np.zeros_like(w) for w in params.weights],
            v_w=[np.zeros_like(w) for w in params.weights],
            m_b=[np.zeros_like(b) for b in params.biases],
            v_b=[np.zeros_like(b) for b in params.biases],
            m_s=np.zeros_like(params.log_spread),
            v_s=np.zeros_like(params.log_spread),
        )


def _adam(value, grad, m, v, state: OptimizerState, lr: float):
    m *= state.beta1
    m += (1.0 - state.beta1) * grad
    v *= state.beta2
    v += (1.0 - state.beta2) * grad**2
    t = state.step_count
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    return value - lr * m_hat / (np.sqrt(v_hat) + state.eps)


def optimizer_step(
    params: PolicyParams,
    grads,
    state: OptimizerState,
    learning_rate: float,
    spread_grad: np.ndarray | None = None,
) -> PolicyParams:
    """One adaptive update of all parameters; mutates state, returns new params."""
    grad_w, grad_b = grads
    state.step_count += 1
    new_w = [
        _adam(w, g, m, v, state, learning_rate)
        for w, g, m, v in zip(params.weights, grad_w, state.m_w, state.v_w)
    ]
    new_b = [
        _adam(b, g, m, v, state, learning_rate)
        for b, g, m, v in zip(params.biases, grad_b, state.m_b, state.v_b)
    ]
    if spread_grad is not None:
        new_s = _adam(params.log_spread, spread_grad, state.m_s, state.v_s, state, learning_rate)
    else:
        # moments still decay so optimizer behavior is step-count consistent
        state.m_s *= state.beta1
        state.v_s *= state.beta2
        new_s = params.log_spread.copy()
    return PolicyParams(new_w, new_b, new_s)
