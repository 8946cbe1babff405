"""Optimizer step engines and a deterministic trajectory runner.

Engines:

* ``adam`` -- bias-corrected Adam, update ``m_hat / (eps + sqrt(v_hat))``.
* ``amsgrad`` -- raw moments with a running max of ``v``, update ``m / sqrt(vhat + eps)``.
* ``topk_adam`` -- Adam fed the Top-K of each gradient, discarding the rest.
* ``topk_ef_adam`` -- Adam fed Top-K of gradient plus a dense error feedback.
* ``microadam`` -- Top-K into a sliding window, quantized error feedback,
  moments rebuilt from the window every step.
* ``microadam_analytical`` -- AMSGrad on ``C(g + e)`` with ``e <- Q(e + g - C(g + e))``.
* ``microadamw`` -- the analytical form without the max, plus decoupled weight decay.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .compress import (
    BlockLayout,
    SparseSelection,
    contraction_factor,
    density_count,
    topk_blockwise,
    topk_global,
    zero_selected,
)
from .problems import Objective
from .quantize import (
    QuantizedErrorBuffer,
    dequantize,
    quant_params,
    quantize_nearest,
    quantize_stochastic,
)
from .window import GradientWindow

DIVERGENCE_LIMIT = 1e8


class DivergenceError(RuntimeError):
    def __init__(self, message: str, trajectory: Trajectory):
        super().__init__(message)
        self.trajectory = trajectory


@dataclass
class HyperParams:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    window: int = 10
    density: float = 0.01
    k: int | None = None
    bits: int | None = 4  # None keeps the error feedback at full precision
    block: int | None = None  # None selects Top-K globally
    bucket: int = 64
    rounding: str = "nearest"

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("betas must lie in (0, 1)")
        if self.eps <= 0 or self.lr <= 0:
            raise ValueError("eps and lr must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight decay must be nonnegative")
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if self.rounding not in ("nearest", "stochastic"):
            raise ValueError(f"unknown rounding mode {self.rounding!r}")

    def topk_count(self, d: int) -> int:
        if self.k is not None:
            if not 1 <= self.k <= d:
                raise ValueError(f"k={self.k} out of range [1, {d}]")
            return self.k
        return density_count(self.density, d)

    def selector(self, d: int):
        """Top-K routine for dimension ``d`` and the number of entries it keeps."""
        if self.block is None:
            k = self.topk_count(d)
            return (lambda x: topk_global(x, k)), k
        layout = BlockLayout(min(self.block, d), d, self.topk_count(d) / d if self.k else self.density)
        return (lambda x: topk_blockwise(x, layout)), layout.total_k


@dataclass
class StepReport:
    grad_norm: float
    error_norm: float = 0.0
    empirical_q: float = 0.0
    update_nnz: int = 0
    loss: float = math.nan
    vhat_max: float = 0.0
    compressed: np.ndarray | None = field(default=None, repr=False)


def _check_grad(grad, d):
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != (d,):
        raise ValueError(f"gradient shape {grad.shape} does not match parameters ({d},)")
    if not np.all(np.isfinite(grad)):
        raise ValueError("non-finite gradient")
    return grad


def _q_of(a: np.ndarray, sel: SparseSelection) -> float:
    return contraction_factor(a, sel) if np.any(a) else 0.0


# -- dense baselines ----------------------------------------------------------


@dataclass
class AdamState:
    params: np.ndarray
    m: np.ndarray = None
    v: np.ndarray = None
    step: int = 0

    def __post_init__(self):
        self.params = np.array(self.params, dtype=np.float64)
        if self.m is None:
            self.m = np.zeros_like(self.params)
            self.v = np.zeros_like(self.params)


def adam_step(state: AdamState, grad, hp: HyperParams, lr: float | None = None) -> StepReport:
    grad = _check_grad(grad, state.params.size)
    lr = hp.lr if lr is None else lr
    state.step += 1
    state.m = hp.beta1 * state.m + (1 - hp.beta1) * grad
    state.v = hp.beta2 * state.v + (1 - hp.beta2) * grad * grad
    m_hat = state.m / (1 - hp.beta1**state.step)
    v_hat = state.v / (1 - hp.beta2**state.step)
    old = state.params
    state.params = old - lr * m_hat / (hp.eps + np.sqrt(v_hat))
    return StepReport(
        float(np.linalg.norm(grad)), update_nnz=int(np.count_nonzero(state.params != old)),
        compressed=grad,
    )


def topk_adam_step(state: AdamState, grad, hp: HyperParams, k: int | None = None,
                   lr: float | None = None) -> StepReport:
    """Adam on the Top-K of the raw gradient; the discarded part is lost."""
    grad = _check_grad(grad, state.params.size)
    k = hp.topk_count(grad.size) if k is None else k
    sel = topk_global(grad, k)
    rep = adam_step(state, sel.embed(), hp, lr)
    rep.grad_norm = float(np.linalg.norm(grad))
    rep.empirical_q = _q_of(grad, sel)
    return rep


@dataclass
class TopKEFState(AdamState):
    error: np.ndarray = None

    def __post_init__(self):
        super().__post_init__()
        if self.error is None:
            self.error = np.zeros_like(self.params)


def topk_ef_adam_step(state: TopKEFState, grad, hp: HyperParams, k: int | None = None,
                      lr: float | None = None) -> StepReport:
    """Adam on Top-K of gradient plus accumulated error, error kept dense."""
    grad = _check_grad(grad, state.params.size)
    k = hp.topk_count(grad.size) if k is None else k
    a = grad + state.error
    sel = topk_global(a, k)
    state.error = zero_selected(a, sel)
    rep = adam_step(state, sel.embed(), hp, lr)
    rep.grad_norm = float(np.linalg.norm(grad))
    rep.error_norm = float(np.linalg.norm(state.error))
    rep.empirical_q = _q_of(a, sel)
    return rep


# -- compressors for the analytical engines -----------------------------------


class Identity:
    """Lossless compressor (q = 0 as a contraction, omega = 0 as a quantizer)."""

    def __call__(self, x):
        return np.array(x, dtype=np.float64)

    def q(self, d):
        return 0.0

    def omega(self, d):
        return 0.0


class TopK:
    def __init__(self, k: int):
        self.k = k

    def __call__(self, x):
        return topk_global(x, self.k).embed()

    def q(self, d):
        return math.sqrt(1.0 - self.k / d)


class BucketQuantizer:
    """Quantize-then-dequantize per bucket, with full-precision bucket ranges."""

    def __init__(self, bits: int = 4, bucket: int = 64, rounding: str = "stochastic",
                 rng: np.random.Generator | None = None):
        if rounding == "stochastic" and rng is None:
            raise ValueError("stochastic rounding needs a random generator")
        self.bits, self.bucket, self.rounding, self.rng = bits, bucket, rounding, rng

    def __call__(self, x):
        x = np.asarray(x, dtype=np.float64)
        out = np.empty_like(x)
        for lo in range(0, x.size, self.bucket):
            chunk = x[lo:lo + self.bucket]
            p = quant_params(chunk, self.bits)
            if self.rounding == "stochastic":
                codes = quantize_stochastic(chunk, p, self.rng)
            else:
                codes = quantize_nearest(chunk, p)
            out[lo:lo + self.bucket] = dequantize(codes, p)
        return out

    def omega(self, d):
        n = min(self.bucket, d)
        if n < 3:
            return 0.0  # every entry of a 1- or 2-entry bucket is an endpoint
        return math.sqrt(2.0) * math.sqrt(n - 2) / (2**self.bits - 1)


def check_compressors(C, Q, d: int) -> float | None:
    """Warn when the known factors give (1 + omega) q >= 1; return that product."""
    q = C.q(d) if hasattr(C, "q") else None
    omega = Q.omega(d) if hasattr(Q, "omega") else None
    if q is None or omega is None:
        return None
    qw = (1 + omega) * q
    if qw >= 1:
        warnings.warn(
            f"(1+omega)*q = {qw:.4g} >= 1: compression discards too much for the error to stay bounded",
            RuntimeWarning, stacklevel=2,
        )
    return qw


# -- analytical MicroAdam / AMSGrad / MicroAdamW -------------------------------


@dataclass
class AnalyticalState:
    params: np.ndarray
    m: np.ndarray = None
    v: np.ndarray = None
    vhat: np.ndarray = None
    error: np.ndarray = None
    step: int = 0

    def __post_init__(self):
        self.params = np.array(self.params, dtype=np.float64)
        for name in ("m", "v", "vhat", "error"):
            if getattr(self, name) is None:
                setattr(self, name, np.zeros_like(self.params))


def _amsgrad_update(state: AnalyticalState, gt, hp, lr, use_max: bool, decay: bool):
    state.step += 1
    state.m = hp.beta1 * state.m + (1 - hp.beta1) * gt
    state.v = hp.beta2 * state.v + (1 - hp.beta2) * gt * gt
    state.vhat = np.maximum(state.vhat, state.v) if use_max else state.v
    old = state.params
    base = (1 - lr * hp.weight_decay) * old if decay else old
    state.params = base - lr * state.m / np.sqrt(state.vhat + hp.eps)
    return int(np.count_nonzero(state.params != old))


def amsgrad_step(state: AnalyticalState, grad, hp: HyperParams, lr: float | None = None) -> StepReport:
    grad = _check_grad(grad, state.params.size)
    lr = hp.lr if lr is None else lr
    nnz = _amsgrad_update(state, grad, hp, lr, use_max=True, decay=False)
    return StepReport(float(np.linalg.norm(grad)), update_nnz=nnz,
                      vhat_max=float(state.vhat.max()), compressed=grad)


def microadam_analytical_step(state: AnalyticalState, grad, hp: HyperParams, C, Q,
                              lr: float | None = None, use_max: bool = True,
                              decay: bool = False) -> StepReport:
    grad = _check_grad(grad, state.params.size)
    lr = hp.lr if lr is None else lr
    a = grad + state.error
    gt = C(a)
    residual = a - gt
    state.error = Q(residual)
    norm_a = np.linalg.norm(a)
    nnz = _amsgrad_update(state, gt, hp, lr, use_max=use_max, decay=decay)
    return StepReport(
        float(np.linalg.norm(grad)),
        error_norm=float(np.linalg.norm(state.error)),
        empirical_q=float(np.linalg.norm(residual) / norm_a) if norm_a > 0 else 0.0,
        update_nnz=nnz,
        vhat_max=float(state.vhat.max()),
        compressed=gt,
    )


def microadamw_step(state: AnalyticalState, grad, hp: HyperParams, C, Q,
                    lr: float | None = None) -> StepReport:
    """Analytical step on the raw second moment with decay ``(1 - lr * weight_decay)``."""
    return microadam_analytical_step(state, grad, hp, C, Q, lr=lr, use_max=False, decay=True)


# -- practical MicroAdam --------------------------------------------------------


class DenseErrorBuffer:
    """Full-precision stand-in for :class:`QuantizedErrorBuffer` (lossless error feedback)."""

    def __init__(self, dim: int):
        self.dim = dim
        self.value = np.zeros(dim)

    def store(self, x, rounding="nearest", rng=None):
        self.value = np.array(x, dtype=np.float64)

    def load(self):
        return self.value.copy()

    @property
    def nbytes(self):
        return self.value.nbytes


@dataclass
class MicroAdamState:
    params: np.ndarray
    window: GradientWindow
    error: QuantizedErrorBuffer | DenseErrorBuffer
    step: int = 0
    rng: np.random.Generator | None = None

    @classmethod
    def create(cls, params, hp: HyperParams, rng: np.random.Generator | None = None):
        params = np.array(params, dtype=np.float64)
        d = params.size
        _, k = hp.selector(d)
        if hp.bits is None:
            error = DenseErrorBuffer(d)
        else:
            error = QuantizedErrorBuffer(d, bits=hp.bits, bucket_size=hp.bucket)
        return cls(params, GradientWindow(d, hp.window, k), error, 0, rng)


def microadam_step(state: MicroAdamState, grad, hp: HyperParams, lr: float | None = None) -> StepReport:
    d = state.params.size
    grad = _check_grad(grad, d)
    lr = hp.lr if lr is None else lr
    select, k = hp.selector(d)
    if k != state.window.row_width or state.window.capacity != hp.window:
        raise ValueError("window shape does not match the hyperparameters")

    a = grad + state.error.load()
    sel = select(a)
    q = _q_of(a, sel)
    a = zero_selected(a, sel)
    state.error.store(a, hp.rounding, state.rng)
    state.window.push(sel)
    state.step += 1
    m_hat = state.window.adam_stats(hp.beta1)
    v_hat = state.window.adam_stats(hp.beta2, square=True)
    old = state.params
    state.params = old - lr * m_hat / (hp.eps + np.sqrt(v_hat))
    return StepReport(
        float(np.linalg.norm(grad)),
        error_norm=float(np.linalg.norm(state.error.load())),
        empirical_q=q,
        update_nnz=int(np.count_nonzero(state.params != old)),
        vhat_max=float(v_hat.max()),
        compressed=sel.embed(),
    )


# -- uniform engine interface and runner ---------------------------------------

OPTIMIZERS = (
    "adam", "amsgrad", "topk_adam", "topk_ef_adam",
    "microadam", "microadam_analytical", "microadamw",
)
SCHEDULES = ("constant", "sqrt", "log")


class Engine:
    """Binds one optimizer's state and step function behind ``step(grad, lr)``."""

    def __init__(self, name: str, theta0, hp: HyperParams, rng: np.random.Generator | None = None,
                 C=None, Q=None):
        if name not in OPTIMIZERS:
            raise KeyError(f"unknown optimizer {name!r}; choose from {list(OPTIMIZERS)}")
        self.name, self.hp = name, hp
        d = np.asarray(theta0).size
        if name in ("adam", "topk_adam"):
            self.state = AdamState(theta0)
        elif name == "topk_ef_adam":
            self.state = TopKEFState(theta0)
        elif name == "amsgrad":
            self.state = AnalyticalState(theta0)
        elif name == "microadam":
            self.state = MicroAdamState.create(theta0, hp, rng)
        else:
            self.state = AnalyticalState(theta0)
            self.C = C if C is not None else TopK(hp.topk_count(d))
            if Q is None:
                Q = Identity() if hp.bits is None else BucketQuantizer(
                    hp.bits, hp.bucket, "stochastic", rng
                )
            self.Q = Q
            check_compressors(self.C, self.Q, d)

    @property
    def params(self) -> np.ndarray:
        return self.state.params

    def step(self, grad, lr: float) -> StepReport:
        n, s, hp = self.name, self.state, self.hp
        if n == "adam":
            return adam_step(s, grad, hp, lr)
        if n == "amsgrad":
            return amsgrad_step(s, grad, hp, lr)
        if n == "topk_adam":
            return topk_adam_step(s, grad, hp, lr=lr)
        if n == "topk_ef_adam":
            return topk_ef_adam_step(s, grad, hp, lr=lr)
        if n == "microadam":
            return microadam_step(s, grad, hp, lr)
        if n == "microadam_analytical":
            return microadam_analytical_step(s, grad, hp, self.C, self.Q, lr)
        return microadamw_step(s, grad, hp, self.C, self.Q, lr)


def learning_rate(schedule: str, lr: float, T: int) -> float:
    """Constant step size for a run of T steps."""
    if schedule == "constant":
        return lr
    if schedule == "sqrt":
        return lr / math.sqrt(T)
    if schedule == "log":
        return lr * math.log(max(T, 2)) / T
    raise KeyError(f"unknown schedule {schedule!r}; choose from {list(SCHEDULES)}")


@dataclass
class Trajectory:
    optimizer: str
    problem: str
    iterates: list = field(default_factory=list)
    losses: list = field(default_factory=list)
    grad_norms: list = field(default_factory=list)
    reports: list = field(default_factory=list)
    diverged: bool = False
    state: object = field(default=None, repr=False)

    @property
    def steps(self) -> int:
        return len(self.reports)

    @property
    def final(self) -> np.ndarray:
        return self.iterates[-1]

    def path_length(self) -> float:
        pts = np.asarray(self.iterates)
        return float(np.sum(np.linalg.norm(np.diff(pts, axis=0), axis=1)))


def clip_norm(g: np.ndarray, G: float) -> np.ndarray:
    n = np.linalg.norm(g)
    return g * (G / n) if n > G else g


def run(optimizer: str, problem: Objective, steps: int, hp: HyperParams | None = None,
        schedule: str = "constant", seed: int = 0, clip: float | None = None,
        theta0=None, C=None, Q=None) -> Trajectory:
    """Run ``steps`` iterations and record every iterate.

    ``iterates[t]``, ``losses[t]`` and ``grad_norms[t]`` describe theta_{t+1}
    (index 0 is the start point). ``grad_norms`` use the clean gradient.
    Gradient noise and stochastic rounding draw from independent streams
    derived from ``seed``.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    hp = hp or HyperParams()
    grad_ss, quant_ss = np.random.SeedSequence(seed).spawn(2)
    grad_rng = np.random.default_rng(grad_ss)
    quant_rng = np.random.default_rng(quant_ss)
    theta0 = problem.start if theta0 is None else theta0
    engine = Engine(optimizer, theta0, hp, quant_rng, C=C, Q=Q)
    lr = learning_rate(schedule, hp.lr, steps)

    traj = Trajectory(optimizer, problem.name)
    theta = engine.params.copy()
    traj.iterates.append(theta)
    traj.losses.append(problem.value(theta))
    traj.grad_norms.append(float(np.linalg.norm(problem.grad(theta))))
    for t in range(1, steps + 1):
        g = problem.stochastic_grad(engine.params, grad_rng)
        if clip is not None:
            g = clip_norm(g, clip)
        rep = engine.step(g, lr)
        theta = engine.params.copy()
        if not np.all(np.isfinite(theta)) or np.linalg.norm(theta) > DIVERGENCE_LIMIT:
            traj.diverged = True
            raise DivergenceError(
                f"{optimizer} diverged on {problem.name} at step {t}: |theta| exceeded {DIVERGENCE_LIMIT:g}",
                traj,
            )
        rep.loss = problem.value(theta)
        rep.compressed = None
        traj.iterates.append(theta)
        traj.losses.append(rep.loss)
        traj.grad_norms.append(float(np.linalg.norm(problem.grad(theta))))
        traj.reports.append(rep)
    traj.state = engine.state
    return traj
