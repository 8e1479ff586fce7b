"""Gaussian-process surrogate over one-hot material assignments, and expected improvement."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.special import ndtr

_SQRT5 = math.sqrt(5.0)


@dataclass(frozen=True)
class OneHotCodec:
    num_objects: int
    num_materials: int

    @property
    def length(self) -> int:
        return self.num_objects * self.num_materials

    def encode(self, indices: Sequence[int]) -> np.ndarray:
        idx = np.asarray(indices, dtype=int).reshape(-1)
        if idx.size != self.num_objects:
            raise ValueError(f"expected {self.num_objects} material indices, got {idx.size}")
        if idx.size and (idx.min() < 0 or idx.max() >= self.num_materials):
            raise ValueError(f"material index out of range [0, {self.num_materials})")
        out = np.zeros(self.length)
        out[np.arange(idx.size) * self.num_materials + idx] = 1.0
        return out

    def encode_many(self, rows) -> np.ndarray:
        rows = np.asarray(rows, dtype=int).reshape(-1, self.num_objects)
        if rows.size and (rows.min() < 0 or rows.max() >= self.num_materials):
            raise ValueError(f"material index out of range [0, {self.num_materials})")
        out = np.zeros((len(rows), self.length))
        cols = np.arange(self.num_objects) * self.num_materials + rows
        out[np.arange(len(rows))[:, None], cols] = 1.0
        return out

    def decode(self, vector) -> tuple[int, ...]:
        v = np.asarray(vector, dtype=float).reshape(self.num_objects, self.num_materials)
        if not np.all(v.sum(axis=1) == 1.0):
            raise ValueError("every block must hold exactly one 1")
        return tuple(int(k) for k in v.argmax(axis=1))


@dataclass(frozen=True)
class Kernel:
    variance: float = 1.0
    length_scale: float = 1.0
    family: str = "matern52"   # "matern52" | "rbf"

    def __post_init__(self):
        if self.family not in ("matern52", "rbf"):
            raise ValueError(f"unknown kernel family {self.family!r}")
        if self.variance <= 0 or self.length_scale <= 0:
            raise ValueError("kernel variance and length scale must be positive")

    def __call__(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        a = np.atleast_2d(a)
        b = np.atleast_2d(b)
        sq = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
        sq = np.maximum(sq, 0.0)
        if self.family == "rbf":
            return self.variance * np.exp(-sq / (2.0 * self.length_scale ** 2))
        r = np.sqrt(sq) / self.length_scale
        return self.variance * (1.0 + _SQRT5 * r + 5.0 / 3.0 * r * r) * np.exp(-_SQRT5 * r)


def default_kernel(num_objects: int, num_materials: int, family: str = "matern52") -> Kernel:
    return Kernel(1.0, math.sqrt(num_objects * num_materials) / 2.0, family)


@dataclass(frozen=True)
class GpModel:
    """Zero-mean GP with fixed hyperparameters; ``fit`` returns a new model."""

    kernel: Kernel
    noise_variance: float = 1e-6
    train_x: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    train_y: np.ndarray = field(default_factory=lambda: np.zeros(0))
    _chol: tuple | None = None
    _alpha: np.ndarray | None = None

    def __post_init__(self):
        if self.noise_variance < 0:
            raise ValueError("noise variance must be nonnegative")

    @property
    def dim(self) -> int | None:
        return self.train_x.shape[1] if len(self.train_x) else None

    def fit(self, x, y) -> "GpModel":
        """Extend the training set with one point (or a batch) and refactor."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        y = np.atleast_1d(np.asarray(y, dtype=float))
        if len(x) != len(y):
            raise ValueError("x and y lengths differ")
        if self.dim is not None and x.shape[1] != self.dim:
            raise ValueError(f"dimension mismatch: {x.shape[1]} vs {self.dim}")
        X = np.vstack([self.train_x, x]) if len(self.train_x) else x
        Y = np.concatenate([self.train_y, y])
        return GpModel.from_data(self.kernel, X, Y, self.noise_variance)

    @classmethod
    def from_data(cls, kernel: Kernel, X, Y, noise_variance: float = 1e-6) -> "GpModel":
        X = np.atleast_2d(np.asarray(X, dtype=float))
        Y = np.asarray(Y, dtype=float).reshape(-1)
        if not len(Y):
            return cls(kernel, noise_variance)
        K = kernel(X, X) + noise_variance * np.eye(len(X))
        jitter = 0.0
        for _ in range(8):
            try:
                chol = cho_factor(K + jitter * np.eye(len(X)), lower=True)
                break
            except np.linalg.LinAlgError:
                jitter = 1e-10 if jitter == 0.0 else jitter * 10.0
        else:
            raise np.linalg.LinAlgError("kernel matrix is not positive definite even with jitter")
        return cls(kernel, noise_variance, X, Y, chol, cho_solve(chol, Y))

    def predict(self, x) -> tuple[np.ndarray, np.ndarray]:
        """Posterior mean and standard deviation at each row of ``x``."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        prior = np.full(len(x), self.kernel.variance)
        if not len(self.train_y):
            return np.zeros(len(x)), np.sqrt(prior)
        if x.shape[1] != self.dim:
            raise ValueError(f"dimension mismatch: {x.shape[1]} vs {self.dim}")
        ks = self.kernel(x, self.train_x)
        mean = ks @ self._alpha
        v = cho_solve(self._chol, ks.T)
        var = prior - np.einsum("ij,ji->i", ks, v)
        var = np.where(var < 1e-12, np.maximum(var, 0.0), var)
        return mean, np.sqrt(np.maximum(var, 0.0))


def expected_improvement(mean, std, f_best: float, epsilon: float = 0.01) -> np.ndarray:
    """EI for maximization: (mu - f+ - eps) Phi(Z) + sigma phi(Z); zero where sigma is zero."""
    mean = np.asarray(mean, dtype=float)
    std = np.asarray(std, dtype=float)
    pos = std > 0
    imp = mean - f_best - epsilon
    z = np.where(pos, imp / np.where(pos, std, 1.0), 0.0)
    pdf = np.exp(-0.5 * z * z) / math.sqrt(2 * math.pi)
    ei = imp * ndtr(z) + std * pdf
    return np.where(pos, np.maximum(ei, 0.0), 0.0)


def model_expected_improvement(model: GpModel, x, f_best: float, epsilon: float = 0.01) -> np.ndarray:
    mu, sd = model.predict(x)
    return expected_improvement(mu, sd, f_best, epsilon)
