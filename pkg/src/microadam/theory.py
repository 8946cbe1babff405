"""Compression constants, convergence-bound evaluators and optimizer-state memory model."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize_scalar

GIB = 2**30


class ContractionConditionError(ValueError):
    """Raised when the combined compression factor (1 + omega) * q is not below 1."""


@dataclass(frozen=True)
class CompressionParams:
    q: float
    omega: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.q < 1.0:
            raise ValueError(f"q={self.q} must lie in [0, 1)")
        if self.omega < 0.0:
            raise ValueError(f"omega={self.omega} must be nonnegative")
        if self.q_omega >= 1.0:
            raise ContractionConditionError(
                f"q_omega = (1+omega)*q = {self.q_omega:.6g} >= 1; "
                "convergence requires (1+omega)*q < 1"
            )

    @property
    def q_omega(self) -> float:
        return (1.0 + self.omega) * self.q


@dataclass(frozen=True)
class ProblemConstants:
    G: float
    sigma2: float
    L: float
    eps: float
    beta1: float
    f_gap: float
    dim: int
    mu: float = 0.0


def topk_q(k: int, d: int) -> float:
    """Contraction factor sqrt(1 - k/d) of Top-K (also of rank-k projection of a d x d matrix)."""
    if not 1 <= k <= d:
        raise ValueError(f"k={k} out of range [1, {d}]")
    return math.sqrt(1.0 - k / d)


def quantizer_omega(bits: int, n: int, lo: float, hi: float) -> float:
    """Per-vector error factor of randomized-rounding quantization of an n-vector with range [lo, hi]."""
    if n < 3:
        raise ValueError("bound needs at least 3 coordinates")
    if lo > hi:
        raise ValueError("lo must not exceed hi")
    if lo == 0.0 and hi == 0.0:
        raise ValueError("range (0, 0) leaves the factor undefined")
    return math.sqrt(n - 2) / (2**bits - 1) * (hi - lo) / math.hypot(hi, lo)


def quantizer_omega_worst(bits: int, n: int) -> float:
    """Largest per-vector factor over all ranges lo <= hi, found numerically.

    The ratio only depends on the direction of (lo, hi), so the search runs
    over the angle of that direction in the half-plane lo <= hi.
    """
    if n < 3:
        raise ValueError("bound needs at least 3 coordinates")

    def neg_ratio(phi):
        lo, hi = math.cos(phi), math.sin(phi)
        return -(hi - lo) / math.hypot(hi, lo)

    grid = np.linspace(math.pi / 4, 5 * math.pi / 4, 721)
    best = grid[np.argmin([neg_ratio(p) for p in grid])]
    step = grid[1] - grid[0]
    res = minimize_scalar(
        neg_ratio, bounds=(best - step, best + step), method="bounded",
        options={"xatol": 1e-12},
    )
    return math.sqrt(n - 2) / (2**bits - 1) * -res.fun


def c_constants(cp: CompressionParams, G: float, eps: float, beta1: float) -> tuple[float, float, float]:
    qw = cp.q_omega
    qw2 = qw * qw
    C2 = cp.omega * cp.q * (1.0 + 2.0 * qw / (1.0 - qw2))
    C0 = math.sqrt(4.0 * (1.0 + qw2) ** 3 / (1.0 - qw2) ** 2 * G * G + eps)
    C1 = beta1 / (1.0 - beta1) * (1.0 + C2) + 2.0 * qw / (1.0 - qw2)
    return C0, C1, C2


def max_step_size(pc: ProblemConstants, cp: CompressionParams) -> float:
    """Largest step size eps / (4 L C0) the fixed-step bounds allow."""
    C0, _, _ = c_constants(cp, pc.G, pc.eps, pc.beta1)
    return pc.eps / (4.0 * pc.L * C0)


def _check_eta(pc, cp, eta):
    if eta <= 0:
        raise ValueError("step size must be positive")
    cap = max_step_size(pc, cp)
    if eta > cap:
        raise ValueError(f"step size {eta:.6g} exceeds eps/(4 L C0) = {cap:.6g}")


def nonconvex_bound(pc: ProblemConstants, cp: CompressionParams, eta: float, T: int) -> float:
    """Fixed-step bound on the average squared gradient norm over T steps."""
    _check_eta(pc, cp, eta)
    C0, C1, C2 = c_constants(cp, pc.G, pc.eps, pc.beta1)
    G2, L, e, d = pc.G**2, pc.L, pc.eps, pc.dim
    terms = (
        pc.f_gap / (T * eta)
        + eta * L * pc.sigma2 / e
        + eta * L * C2**2 * G2 / e
        + eta**2 * L**2 * C0 * C1**2 * G2 / e**2
        + (1 + C1) * G2 * d / (T * math.sqrt(e))
        + eta * (1 + 2 * C1) * C1 * L * G2 * d / (T * e)
    )
    return 2.0 * C0 * terms


def pl_bound(pc: ProblemConstants, cp: CompressionParams, eta: float, T: int) -> float:
    """Fixed-step bound on f(theta_{T+1}) - f* under the PL condition."""
    _check_eta(pc, cp, eta)
    if pc.mu <= 0:
        raise ValueError("PL bound needs mu > 0")
    C0, C1, C2 = c_constants(cp, pc.G, pc.eps, pc.beta1)
    G2, L, e, d, mu = pc.G**2, pc.L, pc.eps, pc.dim, pc.mu
    contraction = (1.0 - eta * mu / C0) ** T * pc.f_gap
    linear = (L * C0 * pc.sigma2 + L * C0 * (C1 + C2**2) * G2) / (mu * e) + (
        (1 + C1) * G2 * d + C1 * G2
    ) / math.sqrt(e)
    quad = (
        3 * L**2 * C0 * C1**2 * G2 / (2 * mu * e**1.5)
        + (1 + 2 * C1) * C1 * L * G2 * d / e
        + L * C1**2 * G2 / (2 * e)
    )
    return contraction + eta * linear + eta**2 * quad


def ef_bound(cp: CompressionParams, G: float) -> float:
    """Upper bound on the squared error-feedback norm."""
    qw2 = cp.q_omega**2
    return 4.0 * qw2 / (1.0 - qw2) ** 2 * G * G


def vhat_bound(cp: CompressionParams, G: float) -> float:
    """Upper bound on every coordinate of the AMSGrad second moment."""
    qw2 = cp.q_omega**2
    return 4.0 * (1.0 + qw2) ** 3 / (1.0 - qw2) ** 2 * G * G


@dataclass(frozen=True)
class MemorySpec:
    d: int
    m: int = 10
    k: int | None = None
    layer_row_sums: int | None = None
    rank1_bytes: int = 0

    def __post_init__(self):
        if self.d < 1 or self.m < 0:
            raise ValueError("d must be positive and m nonnegative")
        if self.k is not None and not 0 < self.k <= self.d:
            raise ValueError("k must be in (0, d]")

    @property
    def density_k(self) -> int:
        return math.ceil(self.d / 100) if self.k is None else self.k


@dataclass(frozen=True)
class MemoryRow:
    name: str
    nbytes: float

    @property
    def gib(self) -> float:
        return self.nbytes / GIB


def adamw_bytes(d: int, bytes_per_state: int) -> int:
    return 2 * bytes_per_state * d


def microadam_bytes(d: int, m: int, k: int) -> float:
    """4-bit error feedback plus an m x k window of int16 indices and bf16 values."""
    return 0.5 * d + 4 * m * k


def galore_bytes(layer_row_sums: int, rank: int, bits: int, rank1_bytes: int) -> int:
    """Projection matrices in bf16 plus both Adam states at 8 or 16 bits."""
    per = {8: 4, 16: 6}
    if bits not in per:
        raise ValueError("GaLore footprint defined for 8 or 16 bit states")
    return per[bits] * rank * layer_row_sums + 2 * rank1_bytes


def memory_footprints(
    spec: MemorySpec, galore_ranks=(256, 1024), galore_bits=(8, 16)
) -> list[MemoryRow]:
    rows = [
        MemoryRow("AdamW-32bit", adamw_bytes(spec.d, 4)),
        MemoryRow("AdamW-16bit", adamw_bytes(spec.d, 2)),
        MemoryRow("AdamW-8bit", adamw_bytes(spec.d, 1)),
        MemoryRow(f"MicroAdam(m={spec.m})", microadam_bytes(spec.d, spec.m, spec.density_k)),
    ]
    if spec.layer_row_sums:
        for bits in galore_bits:
            for r in galore_ranks:
                rows.append(
                    MemoryRow(
                        f"GaLore-AdamW-{bits}bit(r={r})",
                        galore_bytes(spec.layer_row_sums, r, bits, spec.rank1_bytes),
                    )
                )
    return rows


def solve_mmax(d: float, k: float) -> float:
    """Window size at which MicroAdam state matches AdamW-8bit: 0.5d + 4mk = 2d."""
    if k <= 0:
        raise ValueError("k must be positive")
    return 1.5 * d / (4 * k)


MODELS = {
    "llama2-7b": MemorySpec(
        d=6_738_415_616, m=10, layer_row_sums=1_423_872, rank1_bytes=266_240
    ),
}
