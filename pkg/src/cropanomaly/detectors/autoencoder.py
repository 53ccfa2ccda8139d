"""Dense autoencoder trained with Adam; the anomaly score is the per-row
reconstruction error."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from ._common import ScoreVector, as_array

__all__ = ["AeParams", "TrainingError", "fit_score_autoencoder", "forward", "init_weights", "loss_and_grads"]

HIDDEN_SIZES = (64, 32, 32, 64)


class TrainingError(RuntimeError):
    pass


@dataclass
class AeParams:
    hidden: tuple = HIDDEN_SIZES
    activity_reg: float = 1e-3
    epochs: int = 100
    batch_size: int = 32
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-7
    seed: int = 0

    def validate(self) -> None:
        if tuple(self.hidden) != HIDDEN_SIZES:
            raise ValueError(f"hidden layer sizes are fixed to {HIDDEN_SIZES}")
        if self.activity_reg < 0:
            raise ValueError("activity regularization must be >= 0")
        if self.epochs < 1 or self.batch_size < 1 or not self.learning_rate > 0:
            raise ValueError("epochs, batch size and learning rate must be positive")


def init_weights(n_in: int, hidden=HIDDEN_SIZES, rng: np.random.Generator | None = None) -> list[np.ndarray]:
    """Glorot-uniform weights and zero biases, as ``[W1, b1, W2, b2, ...]``."""
    rng = rng or np.random.default_rng(0)
    sizes = [n_in, *hidden, n_in]
    params = []
    for a, b in zip(sizes[:-1], sizes[1:]):
        limit = np.sqrt(6.0 / (a + b))
        params.append(rng.uniform(-limit, limit, size=(a, b)))
        params.append(np.zeros(b))
    return params


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def forward(params: list[np.ndarray], x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    """Reconstruction and the hidden-layer activations."""
    h = x
    hidden = []
    n_layers = len(params) // 2
    for layer in range(n_layers):
        z = h @ params[2 * layer] + params[2 * layer + 1]
        if layer < n_layers - 1:
            h = np.maximum(z, 0.0)
            hidden.append(h)
        else:
            h = _sigmoid(z)
    return h, hidden


def loss_and_grads(params: list[np.ndarray], x: np.ndarray, activity_reg: float = 1e-3):
    """Loss ``mean((y - x)^2) + reg * sum_layers mean(h^2)`` and its gradient."""
    y, hidden = forward(params, x)
    n_layers = len(params) // 2
    diff = y - x
    loss = float(np.mean(diff**2)) + activity_reg * sum(float(np.mean(h**2)) for h in hidden)
    grads: list[np.ndarray] = [None] * len(params)
    dz = (2.0 / diff.size) * diff * y * (1.0 - y)
    for layer in range(n_layers - 1, -1, -1):
        h_in = x if layer == 0 else hidden[layer - 1]
        grads[2 * layer] = h_in.T @ dz
        grads[2 * layer + 1] = dz.sum(axis=0)
        if layer == 0:
            break
        dh = dz @ params[2 * layer].T + activity_reg * (2.0 / h_in.size) * h_in
        dz = dh * (h_in > 0)
    return loss, grads


@dataclass
class _Adam:
    lr: float
    beta1: float
    beta2: float
    eps: float
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    t: int = 0

    def step(self, params, grads):
        if not self.m:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def train(x: np.ndarray, params: AeParams) -> list[np.ndarray]:
    rng = np.random.default_rng(params.seed)
    weights = init_weights(x.shape[1], params.hidden, rng)
    opt = _Adam(params.learning_rate, params.beta1, params.beta2, params.eps)
    n = x.shape[0]
    for epoch in range(params.epochs):
        perm = rng.permutation(n)
        for b, start in enumerate(range(0, n, params.batch_size)):
            batch = x[perm[start : start + params.batch_size]]
            loss, grads = loss_and_grads(weights, batch, params.activity_reg)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite autoencoder loss at epoch {epoch}, batch {b}")
            opt.step(weights, grads)
    return weights


def fit_score_autoencoder(matrix, params: AeParams | None = None) -> ScoreVector:
    params = params or AeParams()
    params.validate()
    x, ids = as_array(matrix, require_normalized=True, algorithm="autoencoder")
    x = np.ascontiguousarray(x, dtype=np.float64)
    # single-threaded BLAS keeps the floating-point reduction order fixed
    with threadpool_limits(limits=1):
        weights = train(x, params)
        recon, _ = forward(weights, x)
    scores = np.mean((recon - x) ** 2, axis=1)
    recorded = asdict(params)
    recorded["hidden"] = list(params.hidden)
    return ScoreVector(ids, scores, "autoencoder", recorded, params.seed)
