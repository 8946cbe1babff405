"""Binary snapshot of a practical MicroAdam state.

Layout (all integers and floats little-endian)::

    b"MADM"  u8 version
    u64 dim, u64 capacity, u64 row_width, u64 step, u64 head, u64 live_rows
    live_rows x { u32 row, u64 stamp, row_width x i64 index, row_width x f64 value }
    u8 error_kind                      0 = quantized, 1 = dense
    quantized: u8 bits, u32 bucket_size, u8 meta (0 = f32, 1 = f64), u32 buckets,
               buckets x lo, buckets x hi, u64 code_bytes, packed codes (low bits first)
    dense:     dim x f64
    dim x f64 params

The random generator driving stochastic rounding is not part of the snapshot.
"""

from __future__ import annotations

import io
import struct

import numpy as np

from .optim import DenseErrorBuffer, MicroAdamState
from .quantize import QuantizedErrorBuffer
from .window import GradientWindow

MAGIC = b"MADM"
VERSION = 1
_META = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class CheckpointError(ValueError):
    pass


def dumps(state: MicroAdamState) -> bytes:
    w = state.window
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<B", VERSION))
    live = w.snapshot_rows()
    out.write(struct.pack("<6Q", w.dim, w.capacity, w.row_width, w.step, w.head, len(live)))
    for row, stamp, idx, vals in live:
        out.write(struct.pack("<IQ", row, stamp))
        out.write(idx.astype("<i8").tobytes())
        out.write(vals.astype("<f8").tobytes())
    err = state.error
    if isinstance(err, QuantizedErrorBuffer):
        meta = 0 if err.meta_dtype == np.float32 else 1
        if err.meta_dtype not in (np.float32, np.float64):
            raise CheckpointError(f"unsupported metadata dtype {err.meta_dtype}")
        out.write(struct.pack("<BBIBI", 0, err.bits, err.bucket_size, meta, err.num_buckets))
        out.write(err.lo.astype(_META[meta]).tobytes())
        out.write(err.hi.astype(_META[meta]).tobytes())
        out.write(struct.pack("<Q", len(err.codes)))
        out.write(err.codes)
    else:
        out.write(struct.pack("<B", 1))
        out.write(err.load().astype("<f8").tobytes())
    out.write(state.params.astype("<f8").tobytes())
    return out.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.buf = memoryview(data)
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("truncated checkpoint")
        chunk = bytes(self.buf[self.pos:self.pos + n])
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, dtype, n: int) -> np.ndarray:
        dtype = np.dtype(dtype)
        return np.frombuffer(self.take(dtype.itemsize * n), dtype=dtype).copy()


def loads(data: bytes) -> MicroAdamState:
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise CheckpointError("not a MicroAdam checkpoint (bad magic)")
    (version,) = r.unpack("<B")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    dim, capacity, width, step, head, n_live = r.unpack("<6Q")
    window = GradientWindow(dim, capacity, width)
    window.step, window.head = step, head
    for _ in range(n_live):
        row, stamp = r.unpack("<IQ")
        if row >= capacity:
            raise CheckpointError(f"row {row} outside window of {capacity}")
        window.stamps[row] = stamp
        window.index_rows[row] = r.array("<i8", width)
        window.value_rows[row] = r.array("<f8", width)
    (kind,) = r.unpack("<B")
    if kind == 0:
        bits, bucket, meta, nb = r.unpack("<BIBI")
        if meta not in _META:
            raise CheckpointError(f"unknown metadata code {meta}")
        lo = r.array(_META[meta], nb).astype(_META[meta].newbyteorder("="))
        hi = r.array(_META[meta], nb).astype(_META[meta].newbyteorder("="))
        (nbytes,) = r.unpack("<Q")
        error = QuantizedErrorBuffer(dim, bits, bucket, lo.dtype, r.take(nbytes), lo, hi)
        if error.num_buckets != nb:
            raise CheckpointError("bucket count does not match dimension")
    elif kind == 1:
        error = DenseErrorBuffer(dim)
        error.value = r.array("<f8", dim)
    else:
        raise CheckpointError(f"unknown error-buffer kind {kind}")
    params = r.array("<f8", dim)
    if r.pos != len(r.buf):
        raise CheckpointError("trailing bytes after checkpoint")
    return MicroAdamState(params.astype(np.float64), window, error, step)


def save(state: MicroAdamState, path) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(state))


def load(path) -> MicroAdamState:
    with open(path, "rb") as fh:
        return loads(fh.read())
