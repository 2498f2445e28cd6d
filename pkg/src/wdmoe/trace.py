"""Gating traces: per-block, per-token expert weights.

On-disk layout (little-endian)::

    0   4s   magic b"WDMT"
    4   u32  version (1)
    8   u32  blocks I
    12  u32  tokens J
    16  u32  experts n
    20  u8   dtype width in bytes (4 = float32)
    21  3x   padding to 24
    24  f32  I*J*n weights, block-major, token-major, expert-minor
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass

import numpy as np

__all__ = [
    "GatingTrace",
    "TraceHeader",
    "TraceFormatError",
    "TraceValidationError",
    "load_trace",
    "write_trace",
    "synth_trace",
    "export_csv",
]

MAGIC = b"WDMT"
VERSION = 1
_HEADER = struct.Struct("<4sIIIIB3x")
_DTYPES = {4: np.dtype("<f4")}

ROW_SUM_TOL = 1e-6
RENORMALIZE_TOL = 1e-3


class TraceFormatError(ValueError):
    pass


class TraceValidationError(ValueError):
    pass


@dataclass(frozen=True)
class TraceHeader:
    magic: bytes
    version: int
    num_blocks: int
    num_tokens: int
    num_experts: int
    dtype: int

    def pack(self) -> bytes:
        return _HEADER.pack(
            self.magic, self.version, self.num_blocks, self.num_tokens, self.num_experts, self.dtype
        )

    @classmethod
    def unpack(cls, raw: bytes) -> "TraceHeader":
        if len(raw) < _HEADER.size:
            raise TraceFormatError(f"truncated header: {len(raw)} of {_HEADER.size} bytes")
        header = cls(*_HEADER.unpack_from(raw))
        if header.magic != MAGIC:
            raise TraceFormatError(f"bad magic {header.magic!r}")
        if header.version != VERSION:
            raise TraceFormatError(f"unsupported version {header.version}")
        if header.dtype not in _DTYPES:
            raise TraceFormatError(f"unsupported dtype width {header.dtype}")
        if min(header.num_blocks, header.num_tokens, header.num_experts) <= 0:
            raise TraceFormatError("trace dimensions must be positive")
        return header


@dataclass(frozen=True, eq=False)
class GatingTrace:
    """Immutable ``[I][J][n]`` array of float32 gating weights.

    Every token row must be a probability vector within ``ROW_SUM_TOL``.
    """

    weights: np.ndarray

    def __post_init__(self) -> None:
        w = np.array(self.weights, dtype=np.float32, copy=True)
        if w.ndim != 3 or 0 in w.shape:
            raise TraceValidationError(f"weights must be a non-empty [I][J][n] array, got {w.shape}")
        if not np.all(np.isfinite(w)):
            raise TraceValidationError("weights contain non-finite values")
        if np.any(w < 0):
            raise TraceValidationError("weights must be nonnegative")
        dev = np.abs(w.sum(axis=2, dtype=np.float64) - 1.0)
        if np.any(dev > ROW_SUM_TOL):
            i, j = np.unravel_index(int(np.argmax(dev)), dev.shape)
            raise TraceValidationError(
                f"row (block {i}, token {j}) sums to {1.0 + float(dev[i, j]):.9f}, not 1"
            )
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @property
    def num_blocks(self) -> int:
        return self.weights.shape[0]

    @property
    def num_tokens(self) -> int:
        return self.weights.shape[1]

    @property
    def num_experts(self) -> int:
        return self.weights.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.weights.shape

    def header(self) -> TraceHeader:
        return TraceHeader(MAGIC, VERSION, *self.shape, 4)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, GatingTrace):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self.weights, other.weights)


def write_trace(trace: GatingTrace, path) -> None:
    if not path:
        raise OSError("empty output path")
    with open(path, "wb") as fh:
        fh.write(trace.header().pack())
        fh.write(trace.weights.astype("<f4", copy=False).tobytes(order="C"))


def load_trace(path) -> GatingTrace:
    """Read and validate a trace file.

    Rows off by more than ``ROW_SUM_TOL`` but within ``RENORMALIZE_TOL`` are
    rescaled to sum 1; rows further off are rejected.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    header = TraceHeader.unpack(raw)
    count = header.num_blocks * header.num_tokens * header.num_experts
    expected = _HEADER.size + count * header.dtype
    if len(raw) != expected:
        raise TraceFormatError(f"payload is {len(raw)} bytes, header implies {expected}")
    w = np.frombuffer(raw, dtype=_DTYPES[header.dtype], offset=_HEADER.size, count=count)
    w = w.reshape(header.num_blocks, header.num_tokens, header.num_experts).astype(np.float32)
    if not np.all(np.isfinite(w)) or np.any(w < 0):
        raise TraceValidationError("weights must be finite and nonnegative")
    sums = w.sum(axis=2, dtype=np.float64)
    dev = np.abs(sums - 1.0)
    if np.any(dev > RENORMALIZE_TOL):
        i, j = np.unravel_index(int(np.argmax(dev)), dev.shape)
        raise TraceValidationError(
            f"row (block {i}, token {j}) sums to {float(sums[i, j]):.6f}; "
            f"outside the {RENORMALIZE_TOL:g} renormalization window"
        )
    fix = dev > ROW_SUM_TOL
    if np.any(fix):
        w[fix] = (w[fix].astype(np.float64) / sums[fix][:, None]).astype(np.float32)
    return GatingTrace(w)


def synth_trace(
    seed: int, num_blocks: int, num_tokens: int, num_experts: int, peakedness: float = 1.0
) -> GatingTrace:
    """Rows are ``softmax(peakedness * z)`` with iid standard-normal ``z``."""
    if min(num_blocks, num_tokens, num_experts) <= 0:
        raise ValueError("trace dimensions must be positive")
    if peakedness < 0:
        raise ValueError("peakedness must be nonnegative")
    rng = np.random.default_rng(seed)
    logits = peakedness * rng.standard_normal((num_blocks, num_tokens, num_experts))
    logits -= logits.max(axis=2, keepdims=True)
    p = np.exp(logits)
    p /= p.sum(axis=2, keepdims=True)
    p = p.astype(np.float32)
    # float32 rounding can push a row sum a few ulps away from 1
    p /= p.sum(axis=2, keepdims=True, dtype=np.float64).astype(np.float32)
    return GatingTrace(p)


def export_csv(trace: GatingTrace, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["block", "token", *(f"e{k}" for k in range(trace.num_experts))])
        for i in range(trace.num_blocks):
            for j in range(trace.num_tokens):
                writer.writerow([i, j, *(repr(float(x)) for x in trace.weights[i, j])])
