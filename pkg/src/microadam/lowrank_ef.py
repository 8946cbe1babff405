"""Error feedback under low-rank gradient projection, on a single quadratic layer.

The layer loss is ``0.5 * ||W - W_target||_F^2``. Each step forms the
accumulator ``a = g + e``, projects it onto a rank-``r`` learning subspace
``U`` (recomputed from the SVD of ``a`` every ``t_sub`` steps, or kept fixed),
runs Adam on the ``r x cols`` coordinates ``U^T a``, and keeps the discarded
part ``e = a - U U^T a`` densely. Because ``e`` is built from the components
orthogonal to ``U``, it stays orthogonal to the subspace until ``U`` changes,
and keeps growing while the unused gradient directions persist.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .compress import lowrank_project, subspace_from_accumulator


@dataclass
class LowRankEFTrace:
    shape: tuple[int, int]
    rank: int
    t_sub: int | None
    error_norm: list = field(default_factory=list)
    grad_norm: list = field(default_factory=list)
    proj_error_norm: list = field(default_factory=list)
    loss: list = field(default_factory=list)
    refresh_steps: list = field(default_factory=list)

    def rows(self):
        for t, row in enumerate(zip(self.loss, self.grad_norm, self.error_norm, self.proj_error_norm), 1):
            yield (t, *row)


def run_lowrank_ef(shape=(32, 32), rank: int = 4, t_sub: int | None = 200, steps: int = 1000,
                   seed: int = 0, lr: float = 1e-2, beta1: float = 0.9, beta2: float = 0.999,
                   eps: float = 1e-8) -> LowRankEFTrace:
    """Run the projected-Adam-with-error-feedback loop; ``t_sub=None`` fixes the first subspace.

    Entry ``t`` (0-based) of each logged list describes the state after step
    ``t + 1``: ``error_norm`` is ``||e_{t+2}||``, ``proj_error_norm`` is the norm
    of that error projected on the subspace used in the step.
    """
    rows, cols = shape
    if not 1 <= rank <= min(rows, cols):
        raise ValueError(f"rank={rank} out of range [1, {min(rows, cols)}]")
    if t_sub is not None and t_sub < 1:
        raise ValueError("t_sub must be positive or None")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    rng = np.random.default_rng(seed)
    target = rng.normal(size=shape)
    W = np.zeros(shape)
    e = np.zeros(shape)
    m = np.zeros((rank, cols))
    v = np.zeros((rank, cols))
    basis = None
    trace = LowRankEFTrace(tuple(shape), rank, t_sub)
    for t in range(1, steps + 1):
        g = W - target
        a = g + e
        if basis is None or (t_sub is not None and (t - 1) % t_sub == 0):
            basis = subspace_from_accumulator(a, rank)
            if basis.rank != m.shape[0]:
                # a rank-deficient accumulator gives fewer directions; restart the moments
                m = np.zeros((basis.rank, cols))
                v = np.zeros((basis.rank, cols))
            trace.refresh_steps.append(t)
        U = basis.basis
        low = U.T @ a
        if basis.rank == rows:
            e = np.zeros(shape)  # a full-rank subspace loses nothing
        else:
            e = a - U @ low
        m = beta1 * m + (1 - beta1) * low
        v = beta2 * v + (1 - beta2) * low * low
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        W = W - lr * (U @ (m_hat / (eps + np.sqrt(v_hat))))
        trace.loss.append(0.5 * float(np.sum((W - target) ** 2)))
        trace.grad_norm.append(float(np.linalg.norm(g)))
        trace.error_norm.append(float(np.linalg.norm(e)))
        trace.proj_error_norm.append(float(np.linalg.norm(lowrank_project(e, basis))))
    return trace


def nondecreasing_fraction(trace: LowRankEFTrace) -> float:
    """Fraction of consecutive step pairs inside one subspace window where ||e|| does not drop."""
    refresh = set(trace.refresh_steps)
    ok = total = 0
    for t in range(2, len(trace.error_norm) + 1):
        if t in refresh:
            continue
        total += 1
        ok += trace.error_norm[t - 1] >= trace.error_norm[t - 2]
    return ok / total if total else 1.0
