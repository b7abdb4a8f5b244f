"""Desk-scale differentiable models and synthetic datasets.

Every model keeps its parameters as an ordered mapping of named layers.
Weights are 2-D (rows = outputs); biases are separate 1-D layers so the
compressors can send them uncompressed.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import EmptyDatasetError, NumericError, ShapeError

logger = logging.getLogger(__name__)

KINDS = ("least-squares", "logistic", "lasso", "mlp")
CLASSIFICATION = ("logistic", "mlp")


@dataclass
class Dataset:
    features: np.ndarray  # (n, d)
    labels: np.ndarray  # (n,) or (n, c)
    seed: int = 0

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.float64)
        if self.features.ndim != 2:
            raise ShapeError("features must be a 2-D array")
        if len(self.features) != len(self.labels):
            raise ShapeError(f"{len(self.features)} feature rows but {len(self.labels)} labels")
        if not (np.all(np.isfinite(self.features)) and np.all(np.isfinite(self.labels))):
            raise NumericError("dataset contains non-finite entries")

    def __len__(self) -> int:
        return len(self.features)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.features[idx], self.labels[idx], self.seed)


@dataclass
class Model:
    kind: str
    layers: dict[str, np.ndarray]
    lam: float = 0.0
    hidden_width: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}; expected one of {KINDS}")
        if sum(v.size for v in self.layers.values()) == 0:
            raise ShapeError("model has no parameters")
        if self.kind == "mlp" and list(self.layers) != ["W1", "b1", "W2", "b2"]:
            raise ShapeError("an mlp has exactly the layers W1, b1, W2, b2")

    def copy(self) -> "Model":
        return Model(self.kind, {k: v.copy() for k, v in self.layers.items()}, self.lam, self.hidden_width)

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: v.shape for k, v in self.layers.items()}

    def num_params(self) -> int:
        return sum(v.size for v in self.layers.values())

    def flat(self) -> np.ndarray:
        return flatten(self.layers)

    def with_flat(self, vec: np.ndarray) -> "Model":
        out = self.copy()
        out.layers = unflatten(vec, self.shapes())
        return out


def flatten(layers: dict[str, np.ndarray]) -> np.ndarray:
    return np.concatenate([np.ravel(v) for v in layers.values()])


def unflatten(vec: np.ndarray, shapes: dict[str, tuple[int, ...]]) -> dict[str, np.ndarray]:
    out, pos = {}, 0
    for name, shape in shapes.items():
        size = int(np.prod(shape))
        out[name] = np.array(vec[pos : pos + size], dtype=np.float64).reshape(shape)
        pos += size
    if pos != len(vec):
        raise ShapeError(f"vector of length {len(vec)} does not match {pos} parameters")
    return out


def init_model(
    kind: str,
    dim: int,
    seed: int = 0,
    hidden_width: int = 16,
    outputs: int = 1,
    lam: float = 0.0,
) -> Model:
    rng = np.random.default_rng([seed, 0x30D])
    if kind == "least-squares":
        layers = {"W": np.zeros((outputs, dim))}
    elif kind == "logistic":
        layers = {"W": np.zeros((1, dim)), "b": np.zeros(1)}
    elif kind == "lasso":
        layers = {"w": np.zeros(dim)}
    elif kind == "mlp":
        layers = {
            "W1": rng.standard_normal((hidden_width, dim)) / np.sqrt(dim),
            "b1": np.zeros(hidden_width),
            "W2": rng.standard_normal((outputs, hidden_width)) / np.sqrt(hidden_width),
            "b2": np.zeros(outputs),
        }
    else:
        raise ValueError(f"unknown model kind {kind!r}; expected one of {KINDS}")
    return Model(kind, layers, lam=lam, hidden_width=hidden_width if kind == "mlp" else 0)


# -- datasets ---------------------------------------------------------------


def gen_two_gaussian(mu, sigma: float, n: int, seed: int = 0) -> Dataset:
    """Balanced two-class data with x ~ N(y * mu, sigma^2 I), y in {-1, +1}.

    Labels alternate starting from -1, so exactly ``n // 2`` points are positive.
    """
    mu = np.asarray(mu, dtype=np.float64)
    if n <= 0:
        raise EmptyDatasetError("cannot generate an empty dataset")
    if not np.any(mu):
        raise ValueError("mu must be nonzero")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    rng = np.random.default_rng([seed, 0x7A6])
    labels = np.where(np.arange(n) % 2 == 1, 1.0, -1.0)
    features = labels[:, None] * mu[None, :] + sigma * rng.standard_normal((n, len(mu)))
    return Dataset(features, labels, seed)


def gen_least_squares(dim: int, n: int, noise: float, seed: int = 0, outputs: int = 1):
    """Linear regression data ``y = X w* + noise * eps``.

    Returns ``(dataset, w_true)`` with ``w_true`` shaped ``(outputs, dim)``.
    Labels are 1-D when ``outputs == 1``.
    """
    if n <= 0:
        raise EmptyDatasetError("cannot generate an empty dataset")
    rng = np.random.default_rng([seed, 0x15E])
    x = rng.standard_normal((n, dim))
    w_true = rng.standard_normal((outputs, dim)) / np.sqrt(dim)
    y = x @ w_true.T + noise * rng.standard_normal((n, outputs))
    if outputs == 1:
        y = y[:, 0]
    logger.info("least-squares data: cond(X^T X) = %.3g", np.linalg.cond(x.T @ x))
    return Dataset(x, y, seed), w_true


def solve_normal_equations(features: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Least-squares fit via the normal equations, returned as ``(outputs, dim)``."""
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    y2 = y[:, None] if y.ndim == 1 else y
    return np.linalg.solve(x.T @ x, x.T @ y2).T


def shard_indices(n: int, workers: int) -> list[np.ndarray]:
    """Contiguous equal shards by index; the remainder goes to the last worker."""
    size = n // workers
    bounds = [i * size for i in range(workers)] + [n]
    return [np.arange(bounds[i], bounds[i + 1]) for i in range(workers)]


# -- losses and gradients ---------------------------------------------------


def _class_targets(labels: np.ndarray, classes: int) -> np.ndarray:
    if np.all(np.isin(labels, (-1.0, 1.0))):
        idx = (labels > 0).astype(int)
    else:
        idx = labels.astype(int)
    if idx.min() < 0 or idx.max() >= classes:
        raise ValueError(f"labels out of range for {classes} classes")
    return idx


def _logistic(z: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean log(1 + exp(-y z)) and its derivative in z (already divided by n)."""
    m = -y * z
    loss = float(np.mean(np.logaddexp(0.0, m)))
    # sigmoid(m) computed stably
    sig = np.exp(-np.logaddexp(0.0, -m))
    return loss, -y * sig / len(z)


def _softmax_ce(logits: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.sum(np.exp(shifted), axis=1))
    n = len(targets)
    loss = float(np.mean(logz - shifted[np.arange(n), targets]))
    probs = np.exp(shifted - logz[:, None])
    probs[np.arange(n), targets] -= 1.0
    return loss, probs / n


def _check(name: str, arr) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {name}")


def loss_and_grad(model: Model, x: np.ndarray, y: np.ndarray) -> tuple[float, dict[str, np.ndarray]]:
    """Mean loss over the batch and the mean per-example gradient per layer."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = len(x)
    if n == 0:
        raise EmptyDatasetError("loss over an empty batch")
    p = model.layers
    if model.kind == "least-squares":
        pred = x @ p["W"].T
        resid = pred - (y[:, None] if y.ndim == 1 else y)
        loss = 0.5 * float(np.mean(np.sum(resid**2, axis=1)))
        grads = {"W": resid.T @ x / n}
    elif model.kind == "lasso":
        resid = x @ p["w"] - y
        loss = 0.5 * float(np.mean(resid**2)) + model.lam * float(np.sum(np.abs(p["w"])))
        grads = {"w": x.T @ resid / n + model.lam * np.sign(p["w"])}
    elif model.kind == "logistic":
        z = x @ p["W"][0] + p["b"][0]
        loss, dz = _logistic(z, y)
        grads = {"W": (dz @ x)[None, :], "b": np.array([dz.sum()])}
    else:
        pre = x @ p["W1"].T + p["b1"]
        _check("W1", pre)
        h = np.tanh(pre)
        out = h @ p["W2"].T + p["b2"]
        _check("W2", out)
        if out.shape[1] == 1:
            loss, dz = _logistic(out[:, 0], y)
            dout = dz[:, None]
        else:
            loss, dout = _softmax_ce(out, _class_targets(y, out.shape[1]))
        dh = (dout @ p["W2"]) * (1.0 - h**2)
        grads = {"W1": dh.T @ x, "b1": dh.sum(axis=0), "W2": dout.T @ h, "b2": dout.sum(axis=0)}
    if not np.isfinite(loss):
        raise NumericError(f"non-finite loss for {model.kind} model")
    for name, g in grads.items():
        _check(name, g)
    return loss, grads


def loss_only(model: Model, x: np.ndarray, y: np.ndarray) -> float:
    return loss_and_grad(model, x, y)[0]


def lasso_example_grads(w: np.ndarray, x: np.ndarray, y: np.ndarray, lam: float) -> np.ndarray:
    """Per-example LASSO gradients ``x (x^T w) - x y + lam * sign(w)`` as rows."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    resid = x @ w - np.asarray(y, dtype=np.float64)
    return x * resid[:, None] + lam * np.sign(w)[None, :]


def central_difference(
    f: Callable[[dict[str, np.ndarray]], float], layers: dict[str, np.ndarray], eps: float = 1e-5
) -> dict[str, np.ndarray]:
    """Central finite-difference gradient of a scalar function of named layers."""
    if not 1e-8 <= eps <= 1e-3:
        raise ValueError("eps must lie in [1e-8, 1e-3]")
    work = {k: np.array(v, dtype=np.float64) for k, v in layers.items()}
    grads = {}
    for name, arr in work.items():
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = f(work)
            flat[i] = orig - eps
            down = f(work)
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * eps)
        grads[name] = g
    return grads


def finite_diff_grad(model: Model, x: np.ndarray, y: np.ndarray, eps: float = 1e-5) -> dict[str, np.ndarray]:
    def f(layers):
        return loss_only(Model(model.kind, layers, model.lam, model.hidden_width), x, y)

    return central_difference(f, model.layers, eps)


def predict(model: Model, x: np.ndarray) -> np.ndarray:
    p = model.layers
    if model.kind == "least-squares":
        return x @ p["W"].T
    if model.kind == "lasso":
        return x @ p["w"]
    if model.kind == "logistic":
        return x @ p["W"][0] + p["b"][0]
    return np.tanh(x @ p["W1"].T + p["b1"]) @ p["W2"].T + p["b2"]


def evaluate(model: Model, data: Dataset) -> float:
    """Accuracy in [0, 1] for classifiers, mean squared error for regressors."""
    out = predict(model, data.features)
    y = data.labels
    if model.kind == "least-squares" or model.kind == "lasso":
        target = y[:, None] if (out.ndim == 2 and y.ndim == 1) else y
        return float(np.mean((out - target) ** 2))
    if out.ndim == 1 or out.shape[1] == 1:
        guess = np.where(np.ravel(out) > 0, 1.0, -1.0)
        truth = np.where(y > 0, 1.0, -1.0) if np.all(np.isin(y, (-1.0, 1.0))) else y
        return float(np.mean(guess == truth))
    return float(np.mean(np.argmax(out, axis=1) == _class_targets(y, out.shape[1])))

