"""Contractive compressors: Top-K (global and blockwise) and low-rank projection."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

MAX_BLOCK_SIZE = 32767
DEFAULT_BLOCK_SIZE = 4096


@dataclass(frozen=True)
class SparseSelection:
    """Indices and values of the coordinates kept by Top-K.

    ``indices`` are sorted ascending and ``values`` are exact copies of the
    source entries at those positions.
    """

    indices: np.ndarray
    values: np.ndarray
    dim: int

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        val = np.asarray(self.values, dtype=np.float64)
        if idx.ndim != 1 or val.shape != idx.shape:
            raise ValueError("indices and values must be 1-D and of equal length")
        if idx.size > self.dim:
            raise ValueError(f"selection of {idx.size} entries exceeds dim {self.dim}")
        if idx.size and (idx[0] < 0 or idx[-1] >= self.dim or np.any(np.diff(idx) <= 0)):
            raise ValueError("indices must be strictly increasing and inside [0, dim)")
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "values", val)

    @property
    def k(self) -> int:
        return int(self.indices.size)

    def embed(self) -> np.ndarray:
        """Dense vector with the selected values and zeros elsewhere."""
        out = np.zeros(self.dim)
        out[self.indices] = self.values
        return out


@dataclass(frozen=True)
class BlockLayout:
    """Partition of a length-``dim`` vector into contiguous blocks of ``block_size``.

    Each block keeps ``ceil(density * block_length)`` entries (at least one),
    so the short trailing block gets its own count.
    """

    block_size: int
    dim: int
    density: float

    def __post_init__(self):
        if not 1 <= self.block_size <= MAX_BLOCK_SIZE:
            raise ValueError(
                f"block_size must be in [1, {MAX_BLOCK_SIZE}] so relative indices fit 15 bits"
            )
        if self.dim < 1:
            raise ValueError("dim must be positive")
        if not 0.0 < self.density <= 1.0:
            raise ValueError("density must be in (0, 1]")

    @property
    def num_blocks(self) -> int:
        return -(-self.dim // self.block_size)

    def block_bounds(self, b: int) -> tuple[int, int]:
        start = b * self.block_size
        return start, min(start + self.block_size, self.dim)

    def k_for(self, length: int) -> int:
        return density_count(self.density, length)

    @property
    def per_block_k(self) -> int:
        """Count kept in a full-length block."""
        return self.k_for(min(self.block_size, self.dim))

    @property
    def total_k(self) -> int:
        return sum(self.k_for(hi - lo) for lo, hi in map(self.block_bounds, range(self.num_blocks)))


@dataclass(frozen=True)
class SubspaceBasis:
    basis: np.ndarray
    rank_deficient: bool = False

    @property
    def rank(self) -> int:
        return int(self.basis.shape[1])

    @property
    def ambient_dim(self) -> int:
        return int(self.basis.shape[0])


def density_count(density: float, n: int) -> int:
    """Number of entries kept out of ``n`` at the given density (ceil, >= 1)."""
    # 1e-9 absorbs products like 0.07 * 100 = 7.000000000000001
    return max(1, min(n, math.ceil(density * n - 1e-9)))


def _check_vector(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError(f"expected a 1-D vector, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("input contains non-finite values")
    return x


def _topk_positions(absx: np.ndarray, k: int) -> np.ndarray:
    # stable sort on -|x| keeps the lowest index first among equal magnitudes
    order = np.argsort(-absx, kind="stable")[:k]
    return np.sort(order)


def topk_global(x, k: int) -> SparseSelection:
    """Keep the ``k`` largest-magnitude entries of ``x``; ties go to the lowest index."""
    x = _check_vector(x)
    if not 1 <= k <= x.size:
        raise ValueError(f"k={k} out of range [1, {x.size}]")
    idx = _topk_positions(np.abs(x), k)
    return SparseSelection(idx, x[idx].copy(), x.size)


def topk_blockwise(x, layout: BlockLayout) -> SparseSelection:
    """Top-K applied independently inside each block of ``layout``.

    Selection happens on block-relative positions, which are then shifted
    back to global coordinates.
    """
    x = _check_vector(x)
    if x.size != layout.dim:
        raise ValueError(f"layout dim {layout.dim} does not match vector length {x.size}")
    parts = []
    for b in range(layout.num_blocks):
        lo, hi = layout.block_bounds(b)
        rel = _topk_positions(np.abs(x[lo:hi]), layout.k_for(hi - lo))
        parts.append(lo + rel)
    idx = np.concatenate(parts)
    return SparseSelection(idx, x[idx].copy(), x.size)


def zero_selected(x, sel: SparseSelection) -> np.ndarray:
    """Copy of ``x`` with the selected coordinates set to zero (the Top-K residual)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (sel.dim,):
        raise ValueError(f"selection dim {sel.dim} does not match vector shape {x.shape}")
    out = x.copy()
    out[sel.indices] = 0.0
    return out


def contraction_factor(x, sel: SparseSelection) -> float:
    """Empirical ||x - embed(sel)|| / ||x||."""
    x = np.asarray(x, dtype=np.float64)
    norm = np.linalg.norm(x)
    if norm == 0.0:
        raise ValueError("contraction factor undefined for the zero vector")
    return float(np.linalg.norm(x - sel.embed()) / norm)


def lowrank_project(g, basis: SubspaceBasis) -> np.ndarray:
    """Orthogonal projection ``U U^T g`` onto the span of the basis columns."""
    g = np.asarray(g, dtype=np.float64)
    if g.shape[0] != basis.ambient_dim:
        raise ValueError(
            f"gradient has {g.shape[0]} rows but basis ambient dim is {basis.ambient_dim}"
        )
    U = basis.basis
    return U @ (U.T @ g)


def subspace_from_accumulator(acc, rank: int, rtol: float = 1e-12) -> SubspaceBasis:
    """Top-``rank`` left singular directions of ``acc``.

    Columns are ordered by descending singular value and each column's first
    nonzero entry is made nonnegative. When ``acc`` has fewer than ``rank``
    nonzero singular values only those directions are returned and the basis
    is flagged ``rank_deficient``.
    """
    acc = np.asarray(acc, dtype=np.float64)
    if acc.ndim == 1:
        acc = acc[:, None]
    if not 1 <= rank <= min(acc.shape):
        raise ValueError(f"rank={rank} out of range [1, {min(acc.shape)}]")
    U, s, _ = np.linalg.svd(acc, full_matrices=False)
    if s.size == 0 or s[0] == 0.0:
        available = 0
    else:
        available = int(np.sum(s > rtol * s[0]))
    keep = min(rank, available)
    U = U[:, :keep].copy()
    for j in range(keep):
        col = U[:, j]
        # entries at round-off level do not decide the sign
        nz = np.flatnonzero(np.abs(col) > 1e-12 * np.abs(col).max())
        if nz.size and col[nz[0]] < 0:
            U[:, j] = -col
    return SubspaceBasis(U, rank_deficient=keep < rank)
