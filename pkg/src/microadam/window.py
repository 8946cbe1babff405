"""Sliding window of recent sparse gradients and the moment estimates rebuilt from it."""

from __future__ import annotations

import numpy as np

from .compress import SparseSelection


class GradientWindow:
    """Circular ``capacity x row_width`` store of (indices, values) rows.

    Every row remembers the global step at which it was written, so its age
    (0 for the newest row) is ``step - stamp``.
    """

    def __init__(self, dim: int, capacity: int, row_width: int):
        if capacity < 1:
            raise ValueError("window capacity must be >= 1")
        if not 1 <= row_width <= dim:
            raise ValueError(f"row_width={row_width} out of range [1, {dim}]")
        self.dim = dim
        self.capacity = capacity
        self.row_width = row_width
        self.index_rows = np.zeros((capacity, row_width), dtype=np.int64)
        self.value_rows = np.zeros((capacity, row_width))
        self.stamps = np.zeros(capacity, dtype=np.int64)
        self.head = 0
        self.step = 0

    @property
    def filled(self) -> int:
        return min(self.step, self.capacity)

    def push(self, sel: SparseSelection) -> GradientWindow:
        if sel.dim != self.dim:
            raise ValueError(f"selection dim {sel.dim} != window dim {self.dim}")
        if sel.k != self.row_width:
            raise ValueError(f"selection has {sel.k} entries, window rows hold {self.row_width}")
        self.step += 1
        self.index_rows[self.head] = sel.indices
        self.value_rows[self.head] = sel.values
        self.stamps[self.head] = self.step
        self.head = (self.head + 1) % self.capacity
        return self

    def live_rows(self) -> np.ndarray:
        """Physical row numbers that hold data."""
        return np.flatnonzero(self.stamps > 0)

    def ages(self) -> np.ndarray:
        """Age of each live row, aligned with :meth:`live_rows`."""
        return self.step - self.stamps[self.live_rows()]

    def adam_stats(self, beta: float, square: bool = False) -> np.ndarray:
        """Bias-corrected exponential average rebuilt from the stored rows.

        Each row contributes ``beta**age`` times its values (squared when
        ``square`` is set); duplicate coordinates add up. The result is scaled
        by ``(1 - beta) / (1 - beta**step)``.
        """
        if self.step == 0:
            raise ValueError("window is empty")
        if not 0.0 < beta < 1.0:
            raise ValueError("beta must be in (0, 1)")
        z = np.zeros(self.dim)
        rows = self.live_rows()
        for row, age in zip(rows, self.step - self.stamps[rows]):
            vals = self.value_rows[row]
            if square:
                vals = vals * vals
            np.add.at(z, self.index_rows[row], beta**age * vals)
        return (1.0 - beta) * z / (1.0 - beta**self.step)

    def snapshot_rows(self) -> list[tuple[int, int, np.ndarray, np.ndarray]]:
        """(row, stamp, indices, values) for every live row, in physical order."""
        return [
            (int(r), int(self.stamps[r]), self.index_rows[r].copy(), self.value_rows[r].copy())
            for r in self.live_rows()
        ]


def ema_oracle(history, beta: float, square: bool = False) -> np.ndarray:
    """Classical bias-corrected EMA over a full list of dense gradients."""
    history = [np.asarray(g, dtype=np.float64) for g in history]
    if not history:
        raise ValueError("history is empty")
    z = np.zeros_like(history[0])
    for g in history:
        z = beta * z + (1.0 - beta) * (g * g if square else g)
    return z / (1.0 - beta ** len(history))
