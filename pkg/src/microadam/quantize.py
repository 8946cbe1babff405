"""Uniform b-bit bucketed quantization of the error-feedback buffer.

Each bucket stores its minimum and maximum; codes index a uniform grid of
``2**bits`` levels between them. Codes are packed little-end first, so with
4 bits two codes share a byte with the earlier code in the low nibble.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

DEFAULT_BITS = 4
DEFAULT_BUCKET = 64


@dataclass(frozen=True)
class QuantParams:
    lo: float
    hi: float
    bits: int

    def __post_init__(self):
        if self.bits < 1:
            raise ValueError("bits must be >= 1")
        if not self.lo <= self.hi:
            raise ValueError(f"lo={self.lo} exceeds hi={self.hi}")

    @property
    def levels(self) -> int:
        """Largest code, ``2**bits - 1``."""
        return (1 << self.bits) - 1

    @property
    def level(self) -> float:
        """Grid spacing u; zero for a degenerate bucket."""
        if self.lo == self.hi:
            return 0.0
        return (self.hi - self.lo) / self.levels


def quant_params(x, bits: int = DEFAULT_BITS) -> QuantParams:
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise ValueError("cannot derive quantization range from an empty slice")
    if not np.all(np.isfinite(x)):
        raise ValueError("slice contains non-finite values")
    return QuantParams(float(x.min()), float(x.max()), bits)


def _scaled(x, p: QuantParams) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    # one ulp of slack on either side of the range
    lo_tol = np.spacing(abs(p.lo)) if p.lo != 0 else np.finfo(float).tiny
    hi_tol = np.spacing(abs(p.hi)) if p.hi != 0 else np.finfo(float).tiny
    if np.any(x < p.lo - lo_tol) or np.any(x > p.hi + hi_tol):
        raise ValueError(f"values outside quantization range [{p.lo}, {p.hi}]")
    return (x - p.lo) / p.level


def _finish(codes: np.ndarray, x: np.ndarray, p: QuantParams) -> np.ndarray:
    codes = np.clip(codes, 0, p.levels)
    # endpoints land on the grid exactly, whatever the division rounded to
    codes[x <= p.lo] = 0
    codes[x >= p.hi] = p.levels
    return codes.astype(np.int64)


def quantize_nearest(x, p: QuantParams) -> np.ndarray:
    """Round to the nearest grid point, halves rounding up."""
    x = np.asarray(x, dtype=np.float64)
    if p.level == 0.0:
        _check_degenerate(x, p)
        return np.zeros(x.shape, dtype=np.int64)
    v = _scaled(x, p)
    return _finish(np.floor(v + 0.5), x, p)


def quantize_stochastic(x, p: QuantParams, rng: np.random.Generator) -> np.ndarray:
    """Randomized rounding: ``floor(v + xi)`` with a fresh uniform ``xi`` per entry.

    The dequantized value is an unbiased estimate of ``x``.
    """
    x = np.asarray(x, dtype=np.float64)
    if p.level == 0.0:
        _check_degenerate(x, p)
        return np.zeros(x.shape, dtype=np.int64)
    v = _scaled(x, p)
    xi = rng.random(v.shape)
    return _finish(np.floor(v + xi), x, p)


def _check_degenerate(x, p):
    tol = np.spacing(abs(p.lo)) if p.lo != 0 else np.finfo(float).tiny
    if np.any(np.abs(x - p.lo) > tol):
        raise ValueError(f"values outside degenerate quantization range [{p.lo}, {p.hi}]")


def dequantize(codes, p: QuantParams) -> np.ndarray:
    codes = np.asarray(codes, dtype=np.int64)
    if np.any(codes < 0) or np.any(codes > p.levels):
        raise ValueError(f"codes outside [0, {p.levels}]")
    if p.level == 0.0:
        return np.full(codes.shape, p.lo)
    out = codes * p.level + p.lo
    # the top code maps to hi exactly rather than through rounded arithmetic
    out[codes == p.levels] = p.hi
    return out


def pack(codes, bits: int) -> bytes:
    """Pack codes into ``ceil(n * bits / 8)`` bytes, least significant bits first."""
    codes = np.asarray(codes, dtype=np.int64)
    if codes.ndim != 1:
        raise ValueError("codes must be 1-D")
    if np.any(codes < 0) or np.any(codes >= (1 << bits)):
        raise ValueError(f"codes do not fit in {bits} bits")
    shifts = np.arange(bits, dtype=np.int64)
    bitplane = ((codes[:, None] >> shifts) & 1).astype(np.uint8).ravel()
    return np.packbits(bitplane, bitorder="little").tobytes()


def unpack(data: bytes, n: int, bits: int) -> np.ndarray:
    expected = math.ceil(n * bits / 8)
    if len(data) != expected:
        raise ValueError(f"expected {expected} bytes for {n} codes of {bits} bits, got {len(data)}")
    bitplane = np.unpackbits(np.frombuffer(data, dtype=np.uint8), bitorder="little")
    bitplane = bitplane[: n * bits].reshape(n, bits).astype(np.int64)
    return (bitplane << np.arange(bits, dtype=np.int64)).sum(axis=1)


@dataclass
class QuantizedErrorBuffer:
    """Error-feedback vector held as packed codes plus per-bucket ranges.

    Bucket ranges are kept in ``meta_dtype`` (float32 by default). When a range
    is narrowed to that dtype it is rounded outward so every value still lies
    inside it.
    """

    dim: int
    bits: int = DEFAULT_BITS
    bucket_size: int = DEFAULT_BUCKET
    meta_dtype: np.dtype = field(default=np.dtype(np.float32))
    codes: bytes = b""
    lo: np.ndarray = None
    hi: np.ndarray = None

    def __post_init__(self):
        if self.dim < 1 or self.bucket_size < 1:
            raise ValueError("dim and bucket_size must be positive")
        self.meta_dtype = np.dtype(self.meta_dtype)
        nb = self.num_buckets
        if self.lo is None:
            self.lo = np.zeros(nb, dtype=self.meta_dtype)
            self.hi = np.zeros(nb, dtype=self.meta_dtype)
        if not self.codes:
            self.codes = bytes(math.ceil(self.dim * self.bits / 8))

    @property
    def num_buckets(self) -> int:
        return -(-self.dim // self.bucket_size)

    @property
    def nbytes(self) -> int:
        """Physical size: packed codes plus two metadata scalars per bucket."""
        return len(self.codes) + self.lo.nbytes + self.hi.nbytes

    def bucket_params(self, b: int) -> QuantParams:
        return QuantParams(float(self.lo[b]), float(self.hi[b]), self.bits)

    def _narrow(self, lo: float, hi: float) -> tuple[float, float]:
        dt = self.meta_dtype.type
        nlo, nhi = dt(lo), dt(hi)
        if float(nlo) > lo:
            nlo = np.nextafter(nlo, dt(-np.inf))
        if float(nhi) < hi:
            nhi = np.nextafter(nhi, dt(np.inf))
        return nlo, nhi

    def store(self, x, rounding: str = "nearest", rng: np.random.Generator | None = None):
        """Quantize dense ``x`` into the buffer, recomputing every bucket range."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.dim,):
            raise ValueError(f"expected shape ({self.dim},), got {x.shape}")
        if rounding == "stochastic" and rng is None:
            raise ValueError("stochastic rounding needs a random generator")
        out = np.empty(self.dim, dtype=np.int64)
        for b in range(self.num_buckets):
            sl = slice(b * self.bucket_size, min((b + 1) * self.bucket_size, self.dim))
            chunk = x[sl]
            lo, hi = self._narrow(float(chunk.min()), float(chunk.max()))
            self.lo[b], self.hi[b] = lo, hi
            p = self.bucket_params(b)
            if rounding == "nearest":
                out[sl] = quantize_nearest(chunk, p)
            elif rounding == "stochastic":
                out[sl] = quantize_stochastic(chunk, p, rng)
            else:
                raise ValueError(f"unknown rounding mode {rounding!r}")
        self.codes = pack(out, self.bits)

    def load(self) -> np.ndarray:
        """Dequantized dense vector."""
        codes = unpack(self.codes, self.dim, self.bits)
        out = np.empty(self.dim)
        for b in range(self.num_buckets):
            sl = slice(b * self.bucket_size, min((b + 1) * self.bucket_size, self.dim))
            out[sl] = dequantize(codes[sl], self.bucket_params(b))
        return out
