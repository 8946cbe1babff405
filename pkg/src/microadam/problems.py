"""Test objectives with analytic gradients, optional gradient noise, and a finite-difference check."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np


@dataclass
class Objective:
    """A differentiable loss on R^dim.

    ``noise`` is the total gradient variance sigma^2: stochastic gradients add
    isotropic Gaussian noise with per-coordinate std ``sigma / sqrt(dim)``.
    ``sampler`` overrides the noise model when the objective has its own
    stochastic gradient (minibatches).
    """

    name: str
    dim: int
    value: Callable[[np.ndarray], float]
    grad: Callable[[np.ndarray], np.ndarray]
    start: np.ndarray
    optimum: np.ndarray | None = None
    noise: float = 0.0
    sampler: Callable[[np.ndarray, np.random.Generator], np.ndarray] | None = None
    f_star: float | None = None
    info: dict = field(default_factory=dict)

    def stochastic_grad(self, theta, rng: np.random.Generator | None) -> np.ndarray:
        if self.sampler is not None:
            return self.sampler(theta, rng)
        g = self.grad(theta)
        if self.noise > 0.0:
            if rng is None:
                raise ValueError(f"{self.name}: noisy gradients need a random generator")
            g = g + rng.normal(scale=np.sqrt(self.noise / self.dim), size=self.dim)
        return g

    def with_noise(self, sigma2: float) -> Objective:
        if sigma2 < 0:
            raise ValueError("noise variance must be nonnegative")
        return Objective(
            self.name, self.dim, self.value, self.grad, self.start, self.optimum,
            sigma2, self.sampler, self.f_star, dict(self.info),
        )


def rosenbrock() -> Objective:
    def value(p):
        x, y = p
        return float((1 - x) ** 2 + 100 * (y - x * x) ** 2)

    def grad(p):
        x, y = p
        return np.array([-2 * (1 - x) - 400 * x * (y - x * x), 200 * (y - x * x)])

    return Objective(
        "rosenbrock", 2, value, grad,
        start=np.array([-0.5, 1.0]), optimum=np.array([1.0, 1.0]), f_star=0.0,
    )


def quadratic(a, b=None, start=None) -> Objective:
    """f(theta) = 0.5 * sum a_i (theta_i - b_i)^2; PL with mu = min a, smooth with L = max a."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 1 or np.any(a <= 0):
        raise ValueError("curvatures must be a positive vector")
    b = np.zeros_like(a) if b is None else np.asarray(b, dtype=np.float64)
    if b.shape != a.shape:
        raise ValueError("shift must match curvature shape")

    def value(t):
        r = np.asarray(t) - b
        return float(0.5 * np.sum(a * r * r))

    def grad(t):
        return a * (np.asarray(t) - b)

    start = np.zeros_like(a) if start is None else np.asarray(start, dtype=np.float64)
    return Objective(
        "quadratic", a.size, value, grad, start=start, optimum=b.copy(), f_star=0.0,
        info={"mu": float(a.min()), "L": float(a.max())},
    )


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def logistic_regression(
    n: int = 256, dim: int = 8, separation: float = 1.0, seed: int = 0, batch: int | None = None
) -> Objective:
    """Mean log-loss on two Gaussian classes.

    Feature rows are scaled to unit norm, so every per-sample gradient (and
    hence every minibatch gradient) has norm at most 1.
    """
    if n < dim:
        raise ValueError("need at least as many samples as dimensions")
    rng = np.random.default_rng(seed)
    y = (np.arange(n) % 2).astype(np.float64)
    centers = np.zeros(dim)
    centers[0] = separation
    X = rng.normal(size=(n, dim)) + np.where(y[:, None] > 0, centers, -centers)
    X /= np.maximum(np.linalg.norm(X, axis=1, keepdims=True), 1.0)

    def loss_on(w, Xs, ys):
        z = Xs @ w
        # log(1 + e^z) - y z, computed stably
        return float(np.mean(np.logaddexp(0.0, z) - ys * z))

    def grad_on(w, Xs, ys):
        return Xs.T @ (_sigmoid(Xs @ w) - ys) / len(ys)

    def value(w):
        return loss_on(np.asarray(w), X, y)

    def grad(w):
        return grad_on(np.asarray(w), X, y)

    sampler = None
    if batch is not None:
        if not 1 <= batch <= n:
            raise ValueError("batch size out of range")

        def sampler(w, rng_):
            idx = rng_.choice(n, size=batch, replace=False)
            return grad_on(np.asarray(w), X[idx], y[idx])

    def batch_grad(w, idx):
        return grad_on(np.asarray(w), X[idx], y[idx])

    return Objective(
        "logistic", dim, value, grad, start=np.zeros(dim), sampler=sampler,
        info={"G": 1.0, "X": X, "y": y, "batch_grad": batch_grad},
    )


def finite_diff_grad(obj: Objective, theta, h: float = 1e-5) -> np.ndarray:
    """Central differences ``(f(theta + h e_i) - f(theta - h e_i)) / 2h``."""
    if h <= 0:
        raise ValueError("step h must be positive")
    theta = np.asarray(theta, dtype=np.float64)
    out = np.empty_like(theta)
    for i in range(theta.size):
        step = np.zeros_like(theta)
        step[i] = h
        out[i] = (obj.value(theta + step) - obj.value(theta - step)) / (2 * h)
    return out


def _default_quadratic(dim: int = 2, **_):
    if dim == 2:
        return quadratic([1.0, 100.0], [1.0, 1.0])
    return quadratic(np.linspace(1.0, 10.0, dim), np.ones(dim))


def _zero(dim: int = 2, **_):
    return Objective(
        "zero", dim, lambda t: 0.0, lambda t: np.zeros(dim), start=np.ones(dim), f_star=0.0
    )


PROBLEMS: dict[str, Callable[..., Objective]] = {
    "rosenbrock": lambda **_: rosenbrock(),
    "quadratic": _default_quadratic,
    "logistic": lambda dim=8, seed=0, batch=None, **_: logistic_regression(
        dim=dim, seed=seed, batch=batch
    ),
    "zero": _zero,
}


def get_problem(name: str, **kwargs) -> Objective:
    try:
        factory = PROBLEMS[name]
    except KeyError:
        raise KeyError(f"unknown problem {name!r}; choose from {sorted(PROBLEMS)}") from None
    return factory(**kwargs)
