"""Differentiable desk-scale tasks: noisy quadratic, logistic regression, two-layer MLP.

Every task exposes ``loss(x, idx=None)``, ``gradient(x, idx=None)`` and the
fused ``loss_and_gradient(x, idx=None)``, where ``idx`` selects a mini-batch of
sample indices (``None`` means all samples).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..core import RngStream

FAMILIES = ("quadratic", "logistic", "mlp")


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass(frozen=True)
class TaskSpec:
    """Description of a task; :func:`build_task` turns it into data and a model.

    ``dim`` is the parameter count for ``quadratic``/``logistic`` and the input
    feature count for ``mlp``. ``noise`` is the per-sample offset scale of the
    quadratic and the within-class spread of the Gaussian mixture.
    """

    family: str = "logistic"
    dim: int = 100
    num_samples: int = 9600
    noise: float = 1.0
    separation: float = 1.0
    hidden: int = 8
    curvature: tuple | None = None
    center_scale: float = 1.0
    loss_scale: float = 1.0
    data_seed: int | None = None
    images_path: str | None = None
    labels_path: str | None = None
    positive_labels: tuple = (1,)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"family must be one of {FAMILIES}, got {self.family!r}")
        if self.dim < 1:
            raise ValueError("dim must be >= 1")
        if self.num_samples < 1:
            raise ValueError("num_samples must be >= 1")
        if self.loss_scale <= 0:
            raise ValueError("loss_scale must be positive")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")
        if self.curvature is not None:
            if len(self.curvature) != self.dim or min(self.curvature) < 0:
                raise ValueError("curvature needs dim non-negative entries")
        if (self.images_path is None) != (self.labels_path is None):
            raise ValueError("images_path and labels_path must be given together")


class QuadraticTask:
    """``f(x) = mean_d 0.5 sum_n L_n (x_n - a_n - xi_dn)^2`` with exact ``f*`` and ``L``.

    With zero noise every mini-batch gradient equals ``L * (x - a)``.
    """

    def __init__(self, curvature, center, offsets, loss_scale: float = 1.0):
        self.curvature = np.asarray(curvature, dtype=np.float64)
        self.center = np.asarray(center, dtype=np.float64)
        self.offsets = np.asarray(offsets, dtype=np.float64)
        self.scale = float(loss_scale)
        self.dim = self.curvature.size
        self.num_samples = self.offsets.shape[0]

    @property
    def optimum(self) -> np.ndarray:
        return self.center + self.offsets.mean(axis=0)

    @property
    def f_star(self) -> float:
        return self.scale * 0.5 * float(np.sum(self.curvature * self.offsets.var(axis=0)))

    @property
    def smoothness(self) -> np.ndarray:
        return self.scale * self.curvature

    def initial_point(self, rng: RngStream) -> np.ndarray:
        return np.zeros(self.dim)

    def _offsets(self, idx):
        return self.offsets if idx is None else self.offsets[idx]

    def loss(self, x, idx=None) -> float:
        r = x - self.center - self._offsets(idx)
        return self.scale * 0.5 * float(np.mean(r * r @ self.curvature))

    def gradient(self, x, idx=None) -> np.ndarray:
        mean_offset = self._offsets(idx).mean(axis=0)
        return self.scale * self.curvature * (x - self.center - mean_offset)

    def loss_and_gradient(self, x, idx=None):
        return self.loss(x, idx), self.gradient(x, idx)


class LogisticTask:
    """Binary logistic regression without bias; labels in {0, 1}."""

    f_star = 0.0

    def __init__(self, features, labels, loss_scale: float = 1.0):
        self.features = np.asarray(features, dtype=np.float64)
        self.labels = np.asarray(labels, dtype=np.float64)
        self.scale = float(loss_scale)
        self.num_samples, self.dim = self.features.shape

    @property
    def smoothness(self) -> np.ndarray:
        """Conservative coordinate-wise constants ``lambda_max(X^T X / S) / 4``."""
        gram = self.features.T @ self.features / self.num_samples
        lam = float(np.linalg.eigvalsh(gram)[-1])
        return np.full(self.dim, self.scale * lam / 4.0)

    def initial_point(self, rng: RngStream) -> np.ndarray:
        return np.zeros(self.dim)

    def _batch(self, idx):
        if idx is None:
            return self.features, self.labels
        return self.features[idx], self.labels[idx]

    def loss(self, x, idx=None) -> float:
        X, y = self._batch(idx)
        z = X @ x
        return self.scale * float(np.mean(np.logaddexp(0.0, z) - y * z))

    def gradient(self, x, idx=None) -> np.ndarray:
        X, y = self._batch(idx)
        resid = _sigmoid(X @ x) - y
        return self.scale * (X.T @ resid) / X.shape[0]

    def loss_and_gradient(self, x, idx=None):
        X, y = self._batch(idx)
        z = X @ x
        loss = self.scale * float(np.mean(np.logaddexp(0.0, z) - y * z))
        return loss, self.scale * (X.T @ (_sigmoid(z) - y)) / X.shape[0]


class MLPTask:
    """Two-layer tanh network with a sigmoid output, parameters flattened into one vector.

    Layout: ``W1 (h, d)``, ``b1 (h,)``, ``w2 (h,)``, ``b2 (1,)``.
    """

    f_star = 0.0
    smoothness = None

    def __init__(self, features, labels, hidden: int, loss_scale: float = 1.0):
        self.features = np.asarray(features, dtype=np.float64)
        self.labels = np.asarray(labels, dtype=np.float64)
        self.hidden = int(hidden)
        self.scale = float(loss_scale)
        self.num_samples, self.inputs = self.features.shape
        self.dim = self.hidden * self.inputs + 2 * self.hidden + 1

    def unflatten(self, x):
        h, d = self.hidden, self.inputs
        W1 = x[: h * d].reshape(h, d)
        b1 = x[h * d: h * d + h]
        w2 = x[h * d + h: h * d + 2 * h]
        b2 = x[-1]
        return W1, b1, w2, b2

    def initial_point(self, rng: RngStream) -> np.ndarray:
        gen = rng.child(purpose="mlp-init").generator()
        h, d = self.hidden, self.inputs
        W1 = gen.normal(scale=1.0 / np.sqrt(d), size=(h, d))
        w2 = gen.normal(scale=1.0 / np.sqrt(h), size=h)
        return np.concatenate([W1.ravel(), np.zeros(h), w2, [0.0]])

    def _batch(self, idx):
        if idx is None:
            return self.features, self.labels
        return self.features[idx], self.labels[idx]

    def loss(self, x, idx=None) -> float:
        X, y = self._batch(idx)
        W1, b1, w2, b2 = self.unflatten(x)
        z = np.tanh(X @ W1.T + b1) @ w2 + b2
        return self.scale * float(np.mean(np.logaddexp(0.0, z) - y * z))

    def gradient(self, x, idx=None) -> np.ndarray:
        X, y = self._batch(idx)
        W1, b1, w2, b2 = self.unflatten(x)
        act = np.tanh(X @ W1.T + b1)
        dz = (_sigmoid(act @ w2 + b2) - y) / X.shape[0]
        dpre = np.outer(dz, w2) * (1.0 - act * act)
        grads = [(dpre.T @ X).ravel(), dpre.sum(axis=0), act.T @ dz, [dz.sum()]]
        return self.scale * np.concatenate(grads)

    def loss_and_gradient(self, x, idx=None):
        return self.loss(x, idx), self.gradient(x, idx)


def gaussian_mixture(num_samples: int, dim: int, separation: float, noise: float, rng: RngStream):
    """Two equiprobable classes at ``+/- mu`` with ``|mu| = separation`` and isotropic noise."""
    gen = rng.child(purpose="mixture").generator()
    direction = gen.normal(size=dim)
    mu = separation * direction / np.linalg.norm(direction)
    labels = (gen.random(num_samples) < 0.5).astype(np.float64)
    features = (2.0 * labels - 1.0)[:, None] * mu + noise * gen.normal(size=(num_samples, dim))
    return features, labels


def _load_labelled(spec: TaskSpec):
    from .data import load_idx_pair

    images, labels = load_idx_pair(spec.images_path, spec.labels_path)
    return images, np.isin(labels, spec.positive_labels).astype(np.float64)


def build_task(spec: TaskSpec, seed: int):
    """Generate the data for ``spec``; ``data_seed`` overrides ``seed`` when set."""
    data_seed = seed if spec.data_seed is None else spec.data_seed
    rng = RngStream(data_seed, purpose="task-data")
    if spec.family == "quadratic":
        gen = rng.child(purpose="quadratic").generator()
        if spec.curvature is None:
            curvature = gen.uniform(0.5, 2.0, size=spec.dim)
        else:
            curvature = np.asarray(spec.curvature, dtype=np.float64)
        center = spec.center_scale * gen.normal(size=spec.dim)
        offsets = spec.noise * gen.normal(size=(spec.num_samples, spec.dim))
        return QuadraticTask(curvature, center, offsets, spec.loss_scale)

    if spec.images_path is not None:
        features, labels = _load_labelled(spec)
    else:
        features, labels = gaussian_mixture(spec.num_samples, spec.dim, spec.separation, spec.noise, rng)
    if spec.family == "logistic":
        return LogisticTask(features, labels, spec.loss_scale)
    return MLPTask(features, labels, spec.hidden, spec.loss_scale)
